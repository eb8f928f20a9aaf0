//! Per-task losses and evaluation metrics for segmentation, depth and motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Per-pixel labels laid out as `[N,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

/// Integer class ids (segmentation classes, or {0,1} motion).
pub type ClassMap = LabelMap<u8>;
/// Non-negative real depth targets.
pub type DepthMap = LabelMap<f64>;

impl<T: Clone> LabelMap<T> {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn checked_len(shape: [usize; 3], len: usize) -> Result<()> {
        if shape.iter().product::<usize>() != len {
            return Err(Error::Label(format!(
                "shape {shape:?} does not match {len} values"
            )));
        }
        Ok(())
    }

    /// Concatenates maps along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Label("cannot stack zero label maps".into()))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if m.shape[1..] != [h, w] {
                return Err(Error::Label(format!(
                    "cannot stack {:?} with {:?}",
                    m.shape, first.shape
                )));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            shape: [n, h, w],
            data,
        })
    }
}

impl ClassMap {
    pub fn classes(shape: [usize; 3], data: Vec<u8>, num_classes: usize) -> Result<Self> {
        Self::checked_len(shape, data.len())?;
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Label(format!(
                "class id {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn ids(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

impl DepthMap {
    pub fn depth(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::checked_len(shape, data.len())?;
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Label("depth targets must be finite and >= 0".into()));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberParams {
    delta: f64,
}

impl HuberParams {
    pub const DEFAULT_DELTA: f64 = 250.0;

    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!(
                "huber delta must be > 0, got {delta}"
            )));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Default for HuberParams {
    fn default() -> Self {
        Self {
            delta: Self::DEFAULT_DELTA,
        }
    }
}

/// Pixel-wise cross-entropy averaged over batch and pixels; softmax is
/// fused in.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &ClassMap) -> Result<Var> {
    let [n, _, h, w] = g.value(logits).dims4("cross_entropy")?;
    if labels.shape() != [n, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![n, h, w],
            got: labels.shape().to_vec(),
        }
        .into());
    }
    Ok(g.cross_entropy(logits, &labels.ids())?)
}

/// Mean Huber penalty of `target - pred` over all pixels.
pub fn huber(g: &mut Graph, pred: Var, target: &DepthMap, params: HuberParams) -> Result<Var> {
    let [n, c, h, w] = g.value(pred).dims4("huber")?;
    if c != 1 || target.shape() != [n, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "huber",
            expected: vec![n, 1, h, w],
            got: target.shape().to_vec(),
        }
        .into());
    }
    Ok(g.huber(pred, target.data(), params.delta())?)
}

/// Scalar Huber penalty of a residual.
pub fn huber_value(residual: f64, params: HuberParams) -> f64 {
    crate::tensor::graph_huber_value(residual, params.delta())
}

/// Per-pixel argmax over channels of an `[N,C,H,W]` tensor; ties go to the
/// lowest class id.
pub fn argmax_channels(t: &Tensor) -> Result<ClassMap> {
    let [n, c, h, w] = t.dims4("argmax_channels")?;
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * plane + p] > d[(b * c + best) * plane + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    ClassMap::classes([n, h, w], out, c.max(1))
}

/// Fraction of pixels whose predicted class equals the truth.
pub fn pixel_accuracy(pred: &ClassMap, truth: &ClassMap) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Label(format!(
            "prediction shape {:?} != truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Label("empty label map".into()));
    }
    let hits = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

pub const DEFAULT_REL_TOL: f64 = 0.1;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-3;

/// Fraction of pixels with `|pred - y| <= max(rel_tol * |y|, abs_floor)`.
pub fn regression_accuracy(
    pred: &Tensor,
    target: &DepthMap,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<f64> {
    if pred.numel() != target.len() {
        return Err(Error::Label(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if target.is_empty() {
        return Err(Error::Label("empty depth map".into()));
    }
    let hits = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(&p, &y)| (p - y).abs() <= (rel_tol * y.abs()).max(abs_floor))
        .count();
    Ok(hits as f64 / target.len() as f64)
}
