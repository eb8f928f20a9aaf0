//! Multi-stream model: one encoder applied to every input frame with the
//! same parameters, per-level aggregation across frames, and one decoder
//! head per task.
//!
//! Encoder: three blocks of `conv3x3 -> ReLU -> maxpool2` with channels
//! `(c, 2c, 4c)`; each block output is a feature tap (strides 2, 4, 8).
//!
//! Decoder (per task): a 1x1 score conv per aggregated level to a common
//! width, then coarse-to-fine `upsample x2 + skip` fusion back to the input
//! resolution, a ReLU and a final 1x1 conv. Segmentation and motion heads
//! end in a channel softmax, the depth head in a softplus.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Number of encoder levels (feature taps).
pub const LEVELS: usize = 3;
/// Input spatial extents must be multiples of this.
pub const RESOLUTION_MULTIPLE: usize = 1 << LEVELS;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub base_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    /// Output channels of encoder level `level` (0-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Concat,
    Sum,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Concat => "concat",
            AggregationMode::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_decoder_width")]
    pub decoder_width: usize,
    pub tasks: Vec<Task>,
    #[serde(default = "default_frames")]
    pub num_frames: usize,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_decoder_width() -> usize {
    ModelConfig::DEFAULT_DECODER_WIDTH
}
fn default_frames() -> usize {
    2
}
fn default_classes() -> usize {
    4
}

impl ModelConfig {
    pub const DEFAULT_DECODER_WIDTH: usize = 16;

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("task set is empty".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::Config(format!("task `{t}` listed twice")));
            }
        }
        if !(1..=2).contains(&self.num_frames) {
            return Err(Error::Config(format!(
                "num_frames must be 1 or 2, got {}",
                self.num_frames
            )));
        }
        if self.encoder.base_channels == 0 || self.decoder_width == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.encoder.kernel.is_multiple_of(2) {
            return Err(Error::Config("encoder kernel must be odd".into()));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Channels entering the decoder at `level` after aggregation.
    pub fn aggregated_channels(&self, level: usize) -> usize {
        let c = self.encoder.channels(level);
        match self.aggregation {
            AggregationMode::Concat => c * self.num_frames,
            AggregationMode::Sum => c,
        }
    }

    pub fn head_channels(&self, task: Task) -> usize {
        match task {
            Task::Segmentation => self.num_classes,
            Task::Depth => 1,
            Task::Motion => 2,
        }
    }
}

/// Index of a conv layer's (weight, bias) pair in the parameter list.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    task: Task,
    score: [ConvIdx; LEVELS],
    out: ConvIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Per-component parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub encoder_params: usize,
    pub decoder_params: BTreeMap<Task, usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiStreamModel {
    config: ModelConfig,
    params: Vec<NamedParam>,
    encoder: [ConvIdx; LEVELS],
    heads: Vec<Head>,
}

/// Graph handles for every model parameter, in parameter-list order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoder taps for one frame, finest first.
pub type FeatureLevels = [Var; LEVELS];

/// Stream id for decoder-head initialization, independent of the task set.
fn head_stream(task: Task) -> u64 {
    1 + task as u64
}

fn add_conv(
    params: &mut Vec<NamedParam>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> ConvIdx {
    // He fan-in scaling
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    params.push(NamedParam {
        name: format!("{name}.weight"),
        value: Tensor::randn(&[cout, cin, k, k], std, rng),
    });
    params.push(NamedParam {
        name: format!("{name}.bias"),
        value: Tensor::zeros(&[cout]),
    });
    ConvIdx {
        weight: params.len() - 2,
        bias: params.len() - 1,
    }
}

/// Builds a model with parameters drawn deterministically from `config.seed`.
///
/// The encoder and each task head draw from independent streams, so the
/// encoder weights do not depend on which tasks or how many frames are used.
pub fn build_model(config: ModelConfig) -> Result<MultiStreamModel> {
    config.validate()?;
    let mut params = Vec::new();
    let k = config.encoder.kernel;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let mut cin = INPUT_CHANNELS;
    let mut encoder = Vec::with_capacity(LEVELS);
    for level in 0..LEVELS {
        let cout = config.encoder.channels(level);
        encoder.push(add_conv(
            &mut params,
            &mut rng,
            &format!("encoder.conv{}", level + 1),
            cout,
            cin,
            k,
        ));
        cin = cout;
    }

    let width = config.decoder_width;
    let mut heads = Vec::with_capacity(config.tasks.len());
    for &task in &config.tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(head_stream(task));
        let prefix = format!("decoder.{}", task.name());
        let score = [0, 1, 2].map(|level| {
            add_conv(
                &mut params,
                &mut rng,
                &format!("{prefix}.score{}", level + 1),
                width,
                config.aggregated_channels(level),
                1,
            )
        });
        let out = add_conv(
            &mut params,
            &mut rng,
            &format!("{prefix}.head"),
            config.head_channels(task),
            width,
            1,
        );
        heads.push(Head { task, score, out });
    }

    Ok(MultiStreamModel {
        config,
        params,
        encoder: [encoder[0], encoder[1], encoder[2]],
        heads,
    })
}

impl MultiStreamModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[Task] {
        &self.config.tasks
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Replaces parameter values by name; shapes must match exactly.
    pub fn load_params(&mut self, named: &[NamedParam]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let src = named
                .iter()
                .find(|n| n.name == p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    fn is_encoder_param(&self, idx: usize) -> bool {
        self.encoder
            .iter()
            .any(|c| c.weight == idx || c.bias == idx)
    }

    pub fn encoder_param_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.is_encoder_param(i))
            .collect()
    }

    pub fn count_params(&self) -> ParamCountReport {
        let size =
            |c: &ConvIdx| self.params[c.weight].value.numel() + self.params[c.bias].value.numel();
        let encoder_params = self.encoder.iter().map(size).sum();
        let decoder_params: BTreeMap<Task, usize> = self
            .heads
            .iter()
            .map(|h| {
                (
                    h.task,
                    h.score.iter().map(size).sum::<usize>() + size(&h.out),
                )
            })
            .collect();
        let total = encoder_params + decoder_params.values().sum::<usize>();
        ParamCountReport {
            encoder_params,
            decoder_params,
            total,
        }
    }

    /// Inserts every parameter into `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn conv(&self, g: &mut Graph, b: &BoundParams, c: ConvIdx, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, b.vars[c.weight], b.vars[c.bias], 1, Padding::Same)?)
    }

    /// Runs the shared encoder on one `[N,3,H,W]` frame.
    pub fn encode(&self, g: &mut Graph, b: &BoundParams, frame: Var) -> Result<FeatureLevels> {
        let mut x = frame;
        let mut taps = [frame; LEVELS];
        for (level, conv) in self.encoder.iter().enumerate() {
            let y = self.conv(g, b, *conv, x)?;
            let y = g.relu(y)?;
            x = g.maxpool2d(y)?;
            taps[level] = x;
        }
        Ok(taps)
    }

    /// Combines per-frame taps level by level. Frame order is preserved for
    /// concatenation.
    pub fn aggregate(&self, g: &mut Graph, streams: &[FeatureLevels]) -> Result<FeatureLevels> {
        let mut out = streams[0];
        for (level, slot) in out.iter_mut().enumerate() {
            let per_frame: Vec<Var> = streams.iter().map(|s| s[level]).collect();
            *slot = match self.config.aggregation {
                AggregationMode::Concat => g.concat_channels(&per_frame)?,
                AggregationMode::Sum => g.add(&per_frame)?,
            };
        }
        Ok(out)
    }

    fn check_frames(&self, g: &Graph, frames: &[Var]) -> Result<()> {
        if frames.len() != self.config.num_frames {
            return Err(Error::Config(format!(
                "model expects {} frame(s), got {}",
                self.config.num_frames,
                frames.len()
            )));
        }
        let shape = g.shape(frames[0]).to_vec();
        let [_, c, h, w] = g.value(frames[0]).dims4("forward")?;
        if c != INPUT_CHANNELS {
            return Err(Error::Config(format!(
                "frames must have 3 channels, got {c}"
            )));
        }
        if h % RESOLUTION_MULTIPLE != 0 || w % RESOLUTION_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "frame resolution {h}x{w} must be a positive multiple of {RESOLUTION_MULTIPLE}"
            )));
        }
        if frames.iter().any(|&f| g.shape(f) != shape.as_slice()) {
            return Err(Error::Config("all frames must share one shape".into()));
        }
        Ok(())
    }

    fn decode(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        head: &Head,
        feats: &FeatureLevels,
    ) -> Result<Var> {
        let mut d = self.conv(g, b, head.score[LEVELS - 1], feats[LEVELS - 1])?;
        for level in (0..LEVELS - 1).rev() {
            let up = g.upsample_nearest(d)?;
            let skip = self.conv(g, b, head.score[level], feats[level])?;
            d = g.add(&[up, skip])?;
        }
        let full = g.upsample_nearest(d)?;
        let act = g.relu(full)?;
        self.conv(g, b, head.out, act)
    }

    /// Raw head outputs: class logits for segmentation/motion and
    /// non-negative depth values for depth. Keys follow the configured task
    /// order.
    pub fn forward_raw(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        frames: &[Var],
    ) -> Result<Vec<(Task, Var)>> {
        self.check_frames(g, frames)?;
        let streams = frames
            .iter()
            .map(|&f| self.encode(g, b, f))
            .collect::<Result<Vec<_>>>()?;
        let feats = self.aggregate(g, &streams)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let numeric = |e: Error| {
                if e.is_numeric() {
                    Error::NumericAbort {
                        task: head.task.name().into(),
                    }
                } else {
                    e
                }
            };
            let y = self.decode(g, b, head, &feats).map_err(numeric)?;
            let y = match head.task {
                Task::Depth => g.softplus(y).map_err(|e| numeric(e.into()))?,
                _ => y,
            };
            out.push((head.task, y));
        }
        Ok(out)
    }

    /// Head outputs with segmentation/motion as per-pixel class
    /// probabilities.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        frames: &[Var],
    ) -> Result<BTreeMap<Task, Var>> {
        let raw = self.forward_raw(g, b, frames)?;
        let mut out = BTreeMap::new();
        for (task, y) in raw {
            let y = if task.is_classification() {
                g.softmax_channels(y)?
            } else {
                y
            };
            out.insert(task, y);
        }
        Ok(out)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, frames: &[Tensor]) -> Result<BTreeMap<Task, Tensor>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let out = self.forward(&mut g, &b, &vars)?;
        Ok(out
            .into_iter()
            .map(|(t, v)| (t, g.value(v).clone()))
            .collect())
    }
}

/// Free-function form of [`MultiStreamModel::count_params`].
pub fn count_params(model: &MultiStreamModel) -> ParamCountReport {
    model.count_params()
}
