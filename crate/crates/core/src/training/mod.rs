//! Optimizers, the multi-task training loop, evaluation and metric logging.
//!
//! Every step builds a fresh graph: all frames go through the shared
//! encoder, each head's loss is computed, losses are floored and checked
//! for finiteness, the configured combiner merges them, and one backward
//! pass feeds the optimizer. Learnable combiner state (log-variances) is
//! optimized together with the model parameters.

mod metrics;
mod optim;

pub use metrics::{metrics_csv, write_metrics_csv, write_timing_csv, EpochMetrics};
pub use optim::{adam_step, sgd_step, AdamParams, AdamState, Optimizer, OptimizerConfig};

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combiners::{
    CombinerConfig, CombinerState, LossCombiner, TaskLossVector, DEFAULT_LOSS_FLOOR,
};
use crate::data::{split, Dataset, FramePairSample};
use crate::error::{Error, Result};
use crate::losses::{
    argmax_channels, cross_entropy, huber, pixel_accuracy, regression_accuracy, ClassMap, DepthMap,
    HuberParams, DEFAULT_ABS_FLOOR, DEFAULT_REL_TOL,
};
use crate::network::{build_model, AggregationMode, EncoderConfig, ModelConfig, MultiStreamModel};
use crate::task::Task;
use crate::tensor::{Graph, Tensor, Var};

/// The synthetic dataset stores frame pairs.
pub const MAX_DATASET_FRAMES: usize = 2;

const SHUFFLE_STREAM: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task order is the priority order for the focused strategy.
    pub tasks: Vec<Task>,
    pub num_frames: usize,
    pub aggregation: AggregationMode,
    pub encoder: EncoderConfig,
    pub decoder_width: usize,
    pub combiner: CombinerConfig,
    pub loss_floor: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub huber_delta: f64,
    pub eval_rel_tol: f64,
    pub eval_abs_floor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            num_frames: 2,
            aggregation: AggregationMode::default(),
            encoder: EncoderConfig::default(),
            decoder_width: ModelConfig::DEFAULT_DECODER_WIDTH,
            combiner: CombinerConfig::Gls,
            loss_floor: DEFAULT_LOSS_FLOOR,
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 8,
            seed: 42,
            train_fraction: 0.8,
            dataset: None,
            output: None,
            huber_delta: HuberParams::DEFAULT_DELTA,
            eval_rel_tol: DEFAULT_REL_TOL,
            eval_abs_floor: DEFAULT_ABS_FLOOR,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return bad(format!("duplicate task in {:?}", self.tasks));
        }
        if self.num_frames == 0 || self.num_frames > MAX_DATASET_FRAMES {
            return bad(format!(
                "num_frames must be 1 or 2, got {}",
                self.num_frames
            ));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("decoder_width", self.decoder_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [
            ("loss_floor", self.loss_floor),
            ("huber_delta", self.huber_delta),
            ("eval_rel_tol", self.eval_rel_tol),
            ("eval_abs_floor", self.eval_abs_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ));
        }
        self.optimizer.validate()?;
        self.combiner.validate(self.tasks.len())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder_width: self.decoder_width,
            tasks: self.tasks.clone(),
            num_frames: self.num_frames,
            aggregation: self.aggregation,
            num_classes,
            seed: self.seed,
        }
    }

    pub fn huber_params(&self) -> Result<HuberParams> {
        HuberParams::new(self.huber_delta)
    }
}

/// Stacked inputs and labels for a group of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// One `[N,3,H,W]` tensor per frame, oldest first.
    pub frames: Vec<Tensor>,
    pub seg: ClassMap,
    pub depth: DepthMap,
    pub motion: ClassMap,
}

impl Batch {
    pub fn from_samples<S: Borrow<FramePairSample>>(
        samples: &[S],
        num_frames: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot build an empty batch".into()));
        }
        if num_frames == 0 || num_frames > MAX_DATASET_FRAMES {
            return Err(Error::Config(format!(
                "dataset provides {MAX_DATASET_FRAMES} frames, model wants {num_frames}"
            )));
        }
        let s: Vec<&FramePairSample> = samples.iter().map(|x| x.borrow()).collect();
        let stack = |f: fn(&FramePairSample) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = s.iter().map(|x| f(x)).collect();
            Ok(Tensor::stack(&ts)?)
        };
        let curr = stack(|x| &x.frame_curr)?;
        let frames = if num_frames == 2 {
            vec![stack(|x| &x.frame_prev)?, curr]
        } else {
            vec![curr]
        };
        Ok(Self {
            frames,
            seg: ClassMap::stack(&s.iter().map(|x| &x.seg).collect::<Vec<_>>())?,
            depth: DepthMap::stack(&s.iter().map(|x| &x.depth).collect::<Vec<_>>())?,
            motion: ClassMap::stack(&s.iter().map(|x| &x.motion).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.seg.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn as_numeric(task: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NumericAbort { .. } => e,
        e if e.is_numeric() => Error::NumericAbort { task: task.into() },
        e => e,
    }
}

/// Loss of one task head on a batch. Non-finite values abort with the task
/// named.
pub fn task_loss(
    g: &mut Graph,
    task: Task,
    output: Var,
    batch: &Batch,
    params: HuberParams,
) -> Result<Var> {
    let r = match task {
        Task::Segmentation => cross_entropy(g, output, &batch.seg),
        Task::Motion => cross_entropy(g, output, &batch.motion),
        Task::Depth => huber(g, output, &batch.depth, params),
    };
    let v = r.map_err(as_numeric(task.name()))?;
    if !g.value(v).item().is_finite() {
        return Err(Error::NumericAbort {
            task: task.name().into(),
        });
    }
    Ok(v)
}

/// Per-task (floored) losses and the combined loss for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub task_losses: Vec<f64>,
    pub total: f64,
}

/// Gradients of the combined loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub report: StepReport,
    /// In model parameter order.
    pub params: Vec<Tensor>,
    /// One per task when the combiner has learnable log-variances.
    pub log_variances: Vec<f64>,
}

/// Model, combiner and optimizer for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: ExperimentConfig,
    model: MultiStreamModel,
    combiner: LossCombiner,
    optimizer: Optimizer,
    huber: HuberParams,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let model = build_model(config.model_config(num_classes))?;
        let combiner = LossCombiner::new(config.combiner.clone(), config.tasks.len())?;
        let mut t = Self {
            config: config.clone(),
            model,
            combiner,
            optimizer: Optimizer::Sgd { lr: 0.0 },
            huber: config.huber_params()?,
        };
        t.optimizer = Optimizer::new(&config.optimizer, &t.trainable());
        Ok(t)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &MultiStreamModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut MultiStreamModel {
        &mut self.model
    }

    pub fn into_model(self) -> MultiStreamModel {
        self.model
    }

    pub fn combiner(&self) -> &LossCombiner {
        &self.combiner
    }

    pub fn combiner_mut(&mut self) -> &mut LossCombiner {
        &mut self.combiner
    }

    fn trainable(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .model
            .params()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        if self.combiner.has_learnable() {
            out.extend(
                self.combiner
                    .state()
                    .log_variances()
                    .iter()
                    .map(|&s| Tensor::scalar(s)),
            );
        }
        out
    }

    // Encoder features feed every head, so a failure there implicates all
    // tasks.
    fn encoder_scope(&self) -> String {
        let names: Vec<&str> = self.config.tasks.iter().map(|t| t.name()).collect();
        format!("the shared encoder (feeding {})", names.join(", "))
    }

    fn objective(
        &self,
        g: &mut Graph,
        batch: &Batch,
        trainable: bool,
    ) -> Result<(Var, StepReport, Vec<Var>, Vec<Var>)> {
        let bound = self.model.bind(g, trainable);
        let binding = self.combiner.bind(g, trainable);
        let frames: Vec<Var> = batch.frames.iter().map(|f| g.constant(f.clone())).collect();
        let outputs = self
            .model
            .forward_raw(g, &bound, &frames)
            .map_err(as_numeric(&self.encoder_scope()))?;
        let mut entries = Vec::with_capacity(outputs.len());
        for (task, y) in outputs {
            entries.push((
                task.name().to_string(),
                task_loss(g, task, y, batch, self.huber)?,
            ));
        }
        let losses = TaskLossVector::new(g, entries, self.config.loss_floor)?;
        let total = self.combiner.combine(g, &losses, &binding)?;
        let value = g.value(total).item();
        if !value.is_finite() {
            return Err(Error::NumericAbort {
                task: "combined loss".into(),
            });
        }
        let report = StepReport {
            task_losses: losses.values(g),
            total: value,
        };
        Ok((
            total,
            report,
            bound.vars().to_vec(),
            binding.log_variance_vars().to_vec(),
        ))
    }

    /// Losses without gradient tracking.
    pub fn loss(&self, batch: &Batch) -> Result<StepReport> {
        let mut g = Graph::new();
        Ok(self.objective(&mut g, batch, false)?.1)
    }

    pub fn gradients(&self, batch: &Batch) -> Result<Gradients> {
        let mut g = Graph::new();
        let (total, report, params, log_vars) = self.objective(&mut g, batch, true)?;
        g.backward(total)?;
        let grad = |v: Var| {
            g.grad(v)
                .expect("parameter leaves always receive a gradient")
        };
        Ok(Gradients {
            report,
            params: params.into_iter().map(grad).collect(),
            log_variances: log_vars.into_iter().map(|v| grad(v).item()).collect(),
        })
    }

    /// One optimizer step on `batch`; returns the losses before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<StepReport> {
        let grads = self.gradients(batch)?;
        let mut all = grads.params;
        all.extend(grads.log_variances.iter().map(|&s| Tensor::scalar(s)));
        let mut values = self.trainable();
        self.optimizer.step(&mut values, &all)?;
        let n_model = self.model.params().len();
        let log_vars: Vec<f64> = values[n_model..].iter().map(Tensor::item).collect();
        for (dst, src) in self.model.param_tensors_mut().zip(values) {
            *dst = src;
        }
        if !log_vars.is_empty() {
            self.combiner
                .state_mut()
                .log_variances_mut()
                .copy_from_slice(&log_vars);
        }
        Ok(grads.report)
    }
}

/// Anything that maps input frames to raw head outputs: class logits for
/// segmentation and motion, depth values for depth.
pub trait Predictor {
    fn tasks(&self) -> &[Task];
    fn num_frames(&self) -> usize;
    fn predict_raw(&self, frames: &[Tensor]) -> Result<BTreeMap<Task, Tensor>>;
}

impl Predictor for MultiStreamModel {
    fn tasks(&self) -> &[Task] {
        MultiStreamModel::tasks(self)
    }

    fn num_frames(&self) -> usize {
        self.config().num_frames
    }

    fn predict_raw(&self, frames: &[Tensor]) -> Result<BTreeMap<Task, Tensor>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let out = self.forward_raw(&mut g, &b, &vars)?;
        Ok(out
            .into_iter()
            .map(|(t, v)| (t, g.value(v).clone()))
            .collect())
    }
}

/// Validation metrics per task.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: BTreeMap<Task, f64>,
    /// Pixel accuracy for segmentation and motion, regression accuracy for
    /// depth.
    pub accuracy: BTreeMap<Task, f64>,
}

/// Evaluates `config.tasks` on `samples` in batches of `config.batch_size`.
pub fn evaluate<P, S>(
    predictor: &P,
    samples: &[S],
    config: &ExperimentConfig,
) -> Result<EvalMetrics>
where
    P: Predictor + ?Sized,
    S: Borrow<FramePairSample>,
{
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    if let Some(t) = config.tasks.iter().find(|t| !predictor.tasks().contains(t)) {
        return Err(Error::Config(format!("model has no head for task `{t}`")));
    }
    let params = config.huber_params()?;
    let mut loss: BTreeMap<Task, f64> = config.tasks.iter().map(|&t| (t, 0.0)).collect();
    let mut acc = loss.clone();
    for chunk in samples.chunks(config.batch_size.max(1)) {
        let batch = Batch::from_samples(chunk, predictor.num_frames())?;
        let weight = batch.len() as f64 / samples.len() as f64;
        let out = predictor.predict_raw(&batch.frames)?;
        for &task in &config.tasks {
            let y = &out[&task];
            let mut g = Graph::new();
            let v = g.constant(y.clone());
            let l = task_loss(&mut g, task, v, &batch, params)?;
            *loss.get_mut(&task).unwrap() += weight * g.value(l).item();
            let a = match task {
                Task::Segmentation => pixel_accuracy(&argmax_channels(y)?, &batch.seg)?,
                Task::Motion => pixel_accuracy(&argmax_channels(y)?, &batch.motion)?,
                Task::Depth => regression_accuracy(
                    y,
                    &batch.depth,
                    config.eval_rel_tol,
                    config.eval_abs_floor,
                )?,
            };
            *acc.get_mut(&task).unwrap() += weight * a;
        }
    }
    Ok(EvalMetrics {
        loss,
        accuracy: acc,
    })
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MultiStreamModel,
    pub metrics: Vec<EpochMetrics>,
    pub combiner_state: CombinerState,
}

/// Splits `dataset` with `config.train_fraction` and trains on it.
pub fn train(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &ExperimentConfig,
    dataset: &Dataset,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let refs: Vec<&FramePairSample> = dataset.samples.iter().collect();
    let (tr, va) = split(&refs, config.train_fraction, config.seed)?;
    train_split(config, dataset.num_classes, &tr, &va, on_epoch)
}

/// Trains on explicit train and validation splits.
pub fn train_split<S: Borrow<FramePairSample>>(
    config: &ExperimentConfig,
    num_classes: usize,
    train: &[S],
    val: &[S],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "train and validation splits must be non-empty".into(),
        ));
    }
    let mut trainer = Trainer::new(config, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let n_tasks = config.tasks.len();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; n_tasks];
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let chunk: Vec<&FramePairSample> = idx.iter().map(|&i| train[i].borrow()).collect();
            let batch = Batch::from_samples(&chunk, config.num_frames)?;
            let w = batch.len() as f64 / train.len() as f64;
            let r = trainer.step(&batch)?;
            for (s, l) in sums.iter_mut().zip(&r.task_losses) {
                *s += w * l;
            }
            total += w * r.total;
        }
        let weights = trainer.combiner().weights_snapshot(&sums);
        let eval = evaluate(trainer.model(), val, config)?;
        trainer.combiner_mut().end_epoch(&sums)?;
        let m = EpochMetrics {
            epoch,
            tasks: config.tasks.clone(),
            train_loss: sums,
            val_loss: config.tasks.iter().map(|t| eval.loss[t]).collect(),
            val_accuracy: config.tasks.iter().map(|t| eval.accuracy[t]).collect(),
            combined_loss: total,
            weights,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
    }
    let combiner_state = trainer.combiner().state().clone();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        metrics: history,
        combiner_state,
    })
}
