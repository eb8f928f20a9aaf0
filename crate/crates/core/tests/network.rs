use mtl_core::gradcheck::{max_relative_error, numeric_gradient};
use mtl_core::losses::{cross_entropy, huber, ClassMap, DepthMap, HuberParams};
use mtl_core::network::{
    build_model, AggregationMode, EncoderConfig, ModelConfig, MultiStreamModel, LEVELS,
};
use mtl_core::tensor::{Graph, Tensor, Var};
use mtl_core::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(tasks: &[Task], frames: usize, agg: AggregationMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            base_channels: 2,
            kernel: 3,
        },
        decoder_width: 3,
        tasks: tasks.to_vec(),
        num_frames: frames,
        aggregation: agg,
        num_classes: 4,
        seed: 13,
    }
}

fn frame(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)
}

fn encode_levels(model: &MultiStreamModel, frames: &[Tensor]) -> (Vec<Vec<Tensor>>, Vec<Tensor>) {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let streams: Vec<[Var; LEVELS]> = frames
        .iter()
        .map(|f| {
            let v = g.constant(f.clone());
            model.encode(&mut g, &b, v).unwrap()
        })
        .collect();
    let agg = model.aggregate(&mut g, &streams).unwrap();
    let per_stream = streams
        .iter()
        .map(|s| s.iter().map(|&v| g.value(v).clone()).collect())
        .collect();
    (
        per_stream,
        agg.iter().map(|&v| g.value(v).clone()).collect(),
    )
}

#[test]
fn duplicate_frames_under_sum_double_the_features() {
    let model = build_model(config(&Task::ALL, 2, AggregationMode::Sum)).unwrap();
    let x = frame(1, 16, 24);
    let (streams, agg) = encode_levels(&model, &[x.clone(), x]);
    for level in 0..LEVELS {
        let single = &streams[0][level];
        for (a, s) in agg[level].data().iter().zip(single.data()) {
            assert_eq!(*a, 2.0 * s);
        }
    }
}

#[test]
fn duplicate_frames_under_concat_give_equal_halves() {
    let model = build_model(config(&Task::ALL, 2, AggregationMode::Concat)).unwrap();
    let x = frame(2, 16, 24);
    let (streams, agg) = encode_levels(&model, &[x.clone(), x]);
    for level in 0..LEVELS {
        let c = streams[0][level].shape()[1];
        let halves = agg[level].split_channels(&[c, c]).unwrap();
        assert_eq!(halves[0], halves[1]);
        assert_eq!(halves[0], streams[0][level]);
    }
}

#[test]
fn encoder_taps_have_expected_strides() {
    let model = build_model(config(&[Task::Depth], 1, AggregationMode::Concat)).unwrap();
    let (streams, _) = encode_levels(&model, &[frame(3, 32, 48)]);
    for (level, t) in streams[0].iter().enumerate() {
        let stride = 2 << level;
        assert_eq!(t.shape(), &[1, 2 << level, 32 / stride, 48 / stride]);
    }
}

#[test]
fn outputs_are_full_resolution_and_normalized() {
    let model = build_model(config(&Task::ALL, 2, AggregationMode::Concat)).unwrap();
    let frames = [frame(4, 16, 24), frame(5, 16, 24)];
    let out = model.predict(&frames).unwrap();
    assert_eq!(out[&Task::Segmentation].shape(), &[1, 4, 16, 24]);
    assert_eq!(out[&Task::Motion].shape(), &[1, 2, 16, 24]);
    assert_eq!(out[&Task::Depth].shape(), &[1, 1, 16, 24]);
    for task in [Task::Segmentation, Task::Motion] {
        let t = &out[&task];
        let c = t.shape()[1];
        let plane = 16 * 24;
        for p in 0..plane {
            let s: f64 = (0..c).map(|k| t.data()[k * plane + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert!(out[&Task::Depth].data().iter().all(|&d| d >= 0.0));
}

#[test]
fn frame_order_matters_only_for_concat() {
    let (a, b) = (frame(6, 16, 24), frame(7, 16, 24));
    let concat = build_model(config(&Task::ALL, 2, AggregationMode::Concat)).unwrap();
    let fwd = concat.predict(&[a.clone(), b.clone()]).unwrap();
    let rev = concat.predict(&[b.clone(), a.clone()]).unwrap();
    assert_ne!(fwd[&Task::Segmentation], rev[&Task::Segmentation]);

    let sum = build_model(config(&Task::ALL, 2, AggregationMode::Sum)).unwrap();
    let fwd = sum.predict(&[a.clone(), b.clone()]).unwrap();
    let rev = sum.predict(&[b, a]).unwrap();
    // a + b and b + a round identically
    assert_eq!(fwd, rev);
}

#[test]
fn parameter_accounting() {
    let tasks_sets: [&[Task]; 3] = [
        &[Task::Segmentation],
        &[Task::Segmentation, Task::Depth],
        &Task::ALL,
    ];
    let base = build_model(config(&[Task::Segmentation], 1, AggregationMode::Concat))
        .unwrap()
        .count_params();
    for tasks in tasks_sets {
        for frames in [1, 2] {
            for agg in [AggregationMode::Concat, AggregationMode::Sum] {
                let cfg = config(tasks, frames, agg);
                let one = build_model(ModelConfig {
                    num_frames: 1,
                    ..cfg.clone()
                })
                .unwrap()
                .count_params();
                let r = build_model(cfg.clone()).unwrap().count_params();
                assert_eq!(r.encoder_params, base.encoder_params);
                assert_eq!(
                    r.total,
                    r.encoder_params + r.decoder_params.values().sum::<usize>()
                );
                let growth: usize = match agg {
                    AggregationMode::Sum => 0,
                    AggregationMode::Concat => {
                        let w = cfg.decoder_width;
                        let per_head: usize =
                            (0..LEVELS).map(|l| cfg.encoder.channels(l) * w).sum();
                        (frames - 1) * per_head * tasks.len()
                    }
                };
                assert_eq!(r.total - one.total, growth, "{tasks:?} {frames} {agg:?}");
            }
        }
    }
    let one = build_model(config(&[Task::Segmentation], 1, AggregationMode::Concat)).unwrap();
    let three = build_model(config(&Task::ALL, 1, AggregationMode::Concat)).unwrap();
    let (r1, r3) = (one.count_params(), three.count_params());
    assert_eq!(
        r3.total - r1.total,
        r3.decoder_params[&Task::Depth] + r3.decoder_params[&Task::Motion]
    );
    assert_eq!(
        r1.decoder_params[&Task::Segmentation],
        r3.decoder_params[&Task::Segmentation]
    );
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            base_channels: 1,
            kernel: 3,
        },
        decoder_width: 3,
        tasks: Task::ALL.to_vec(),
        num_frames: 2,
        aggregation: AggregationMode::Concat,
        num_classes: 4,
        seed: 21,
    }
}

struct Batch {
    frames: Vec<Tensor>,
    seg: ClassMap,
    depth: DepthMap,
    motion: ClassMap,
}

fn batch(h: usize, w: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = h * w;
    use rand::Rng;
    Batch {
        frames: vec![frame(30, h, w), frame(31, h, w)],
        seg: ClassMap::classes([1, h, w], (0..n).map(|_| rng.gen_range(0..4)).collect(), 4)
            .unwrap(),
        depth: DepthMap::depth([1, h, w], (0..n).map(|_| rng.gen_range(0.5..3.0)).collect())
            .unwrap(),
        motion: ClassMap::classes([1, h, w], (0..n).map(|_| rng.gen_range(0..2)).collect(), 2)
            .unwrap(),
    }
}

fn summed_loss(
    model: &MultiStreamModel,
    params: &[Tensor],
    data: &Batch,
    g: &mut Graph,
) -> (Var, Vec<Var>) {
    let mut m = model.clone();
    for (dst, src) in m.param_tensors_mut().zip(params) {
        *dst = src.clone();
    }
    let b = m.bind(g, true);
    let frames: Vec<Var> = data.frames.iter().map(|f| g.constant(f.clone())).collect();
    let out = m.forward_raw(g, &b, &frames).unwrap();
    let mut losses = Vec::new();
    for (task, y) in out {
        losses.push(match task {
            Task::Segmentation => cross_entropy(g, y, &data.seg).unwrap(),
            Task::Motion => cross_entropy(g, y, &data.motion).unwrap(),
            Task::Depth => huber(g, y, &data.depth, HuberParams::default()).unwrap(),
        });
    }
    (g.add(&losses).unwrap(), b.vars().to_vec())
}

// The encoder runs once per frame on shared parameters, so its gradients
// must accumulate over both streams.
#[test]
fn full_model_gradients_match_finite_differences() {
    let model = build_model(tiny_config()).unwrap();
    let report = model.count_params();
    assert!(report.total <= 500, "{}", report.total);
    let data = batch(16, 24);
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();

    let mut g = Graph::new();
    let (root, vars) = summed_loss(&model, &params, &data, &mut g);
    g.backward(root).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    let numeric = numeric_gradient::<_, ()>(&params, 1e-6, |ps| {
        let mut g = Graph::new();
        let (root, _) = summed_loss(&model, ps, &data, &mut g);
        Ok(g.value(root).item())
    })
    .unwrap();
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err <= 1e-5, "max relative error {err:e}");
}
