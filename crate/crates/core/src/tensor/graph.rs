use super::conv::{col2im_add, gemm, im2col, ConvGeom};
use super::{invalid, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent is `ceil(extent / stride)`; kernel must be odd.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Add(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Softplus(Var),
    Ln(Var),
    Exp(Var),
    FloorMin(Var, f64),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Huber {
        pred: Var,
        target: Vec<f64>,
        delta: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Relu(x)
            | Op::Upsample2(x)
            | Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Softplus(x)
            | Op::Ln(x)
            | Op::Exp(x)
            | Op::FloorMin(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::Concat(xs) | Op::Add(xs) => xs.clone(),
            Op::Mul(a, b) => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Huber { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, so the reverse pass is a
/// descending scan over node indices.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel softmax over the channel axis of an `[N,C,H,W]` buffer.
pub(crate) fn softmax_channels_into(data: &[f64], dims: [usize; 4], out: &mut [f64]) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(data[base + ch * plane + p]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                let e = (data[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                denom += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= denom;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
    ) -> Result<Var, TensorError> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op))
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// Available for leaves created with [`Graph::param`] once backward
    /// has run.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Clears gradients so another backward pass may run.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, kcin, kh, kw] = self.value(kernel).dims4(OP)?;
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: vec![cout, cin, kh, kw],
                got: vec![cout, kcin, kh, kw],
            });
        }
        if kh != kw {
            return Err(invalid(OP, "kernel must be square"));
        }
        if self.shape(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: vec![cout],
                got: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid(OP, "stride must be positive"));
        }
        let k = kh;
        let (pad, hout, wout) = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(invalid(OP, "same padding needs an odd kernel"));
                }
                (k / 2, h.div_ceil(stride), w.div_ceil(stride))
            }
            Padding::Valid => {
                if k > h || k > w {
                    return Err(invalid(OP, "kernel larger than input"));
                }
                (0, (h - k) / stride + 1, (w - k) / stride + 1)
            }
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            hout,
            wout,
        };
        let rows = geom.col_rows();
        let p = geom.col_cols();
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let bs = self.value(bias).data();
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; n * rows * p]
        };
        let mut out = vec![0.0; n * cout * p];
        for b in 0..n {
            let img = &x[b * cin * h * w..(b + 1) * cin * h * w];
            let col = if pointwise {
                img
            } else {
                let c = &mut cols[b * rows * p..(b + 1) * rows * p];
                im2col(img, &geom, c);
                &*c
            };
            let o = &mut out[b * cout * p..(b + 1) * cout * p];
            for (co, row) in o.chunks_exact_mut(p).enumerate() {
                row.fill(bs[co]);
            }
            gemm(cout, rows, p, wt, false, col, false, 1.0, o);
        }
        let value = Tensor::from_parts(vec![n, cout, hout, wout], out);
        self.push_checked(
            OP,
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Relu(x)))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2d";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(
                OP,
                format!("spatial dims {h}x{w} not divisible by 2"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    let o = nc * ho * wo + oy * wo + ox;
                    out[o] = plane[best];
                    argmax[o] = nc * h * w + best;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.push(value, Op::MaxPool2 { input: x, argmax }))
    }

    /// Nearest-neighbour upsampling by a factor of 2.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest")?;
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for oy in 0..ho {
                let srow = &src[nc * h * w + (oy / 2) * w..nc * h * w + (oy / 2 + 1) * w];
                let drow = &mut out[nc * ho * wo + oy * wo..nc * ho * wo + (oy + 1) * wo];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.push(value, Op::Upsample2(x)))
    }

    /// Concatenates along the channel axis, preserving input order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or_else(|| invalid(OP, "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims4(OP)?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let [nx, cx, hx, wx] = self.value(x).dims4(OP)?;
            if (nx, hx, wx) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    expected: vec![n, cx, h, w],
                    got: vec![nx, cx, hx, wx],
                });
            }
            channels.push(cx);
        }
        let ctot: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * ctot * plane);
        for b in 0..n {
            for (&x, &cx) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                out.extend_from_slice(&src[b * cx * plane..(b + 1) * cx * plane]);
            }
        }
        let value = Tensor::from_parts(vec![n, ctot, h, w], out);
        Ok(self.push(value, Op::Concat(xs.to_vec())))
    }

    /// Elementwise sum, folded left to right.
    pub fn add(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "add";
        let first = *xs.first().ok_or_else(|| invalid(OP, "no inputs"))?;
        let mut acc = self.value(first).data().to_vec();
        let shape = self.shape(first).to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    expected: shape,
                    got: self.shape(x).to_vec(),
                });
            }
            for (a, v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += v;
            }
        }
        self.push_checked(OP, Tensor::from_parts(shape, acc), Op::Add(xs.to_vec()))
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_checked("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push_checked("scale", value, Op::Scale(x, factor))
    }

    /// Softmax over the channel axis with per-pixel max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        let dims = self.value(x).dims4("softmax_channels")?;
        let mut out = vec![0.0; self.value(x).numel()];
        softmax_channels_into(self.value(x).data(), dims, &mut out);
        let value = Tensor::from_parts(dims.to_vec(), out);
        self.push_checked("softmax_channels", value, Op::Softmax(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| softplus(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push_checked("softplus", value, Op::Softplus(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push_checked("ln", value, Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push_checked("exp", value, Op::Exp(x))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn floor_min(&mut self, x: Var, floor: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(floor)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push_checked("floor_min", value, Op::FloorMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over batch and pixels of `-ln softmax(logits)[label]`.
    ///
    /// `labels` is `[N,H,W]` row-major with ids in `[0, C)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "cross_entropy";
        let dims = self.value(logits).dims4(OP)?;
        let [n, c, h, w] = dims;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: vec![n, h, w],
                got: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid(
                OP,
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for b in 0..n {
            for p in 0..plane {
                let base = b * c * plane + p;
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(src[base + ch * plane]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * plane] - max).exp();
                    probs[base + ch * plane] = e;
                    denom += e;
                }
                for ch in 0..c {
                    probs[base + ch * plane] /= denom;
                }
                // log-sum-exp form keeps tiny probabilities accurate
                let lse = denom.ln() + max;
                total += lse - src[base + labels[b * plane + p] * plane];
            }
        }
        let loss = total / (n * plane) as f64;
        self.push_checked(
            OP,
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean over pixels of the Huber penalty of `target - pred`.
    pub fn huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var, TensorError> {
        const OP: &str = "huber";
        if !(delta > 0.0) {
            return Err(invalid(OP, "delta must be positive"));
        }
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                expected: self.shape(pred).to_vec(),
                got: vec![target.len()],
            });
        }
        let total: f64 = p
            .iter()
            .zip(target)
            .map(|(&yh, &y)| huber_value(y - yh, delta))
            .sum();
        let loss = total / p.len() as f64;
        self.push_checked(
            OP,
            Tensor::scalar(loss),
            Op::Huber {
                pred,
                target: target.to_vec(),
                delta,
            },
        )
    }

    /// Runs the reverse pass from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
            // intermediate gradients are dropped once consumed
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut slot = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(&mut slot, &self.nodes);
        self.grads[v.0] = Some(slot);
    }

    fn accumulate_owned(&mut self, v: Var, grad: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(s) => add_into(s, &grad),
            slot => *slot = Some(grad),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so node values stay borrowable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let [n, cout, _, _] = self.nodes[i].value.dims4("conv2d").unwrap();
                let rows = geom.col_rows();
                let p = geom.col_cols();
                let img = geom.cin * geom.h * geom.w;
                let pointwise = geom.is_pointwise();
                if self.nodes[kernel.0].requires_grad {
                    let mut dw = vec![0.0; cout * rows];
                    let x = self.nodes[input.0].value.data();
                    for b in 0..n {
                        let go = &g[b * cout * p..(b + 1) * cout * p];
                        let col = if pointwise {
                            &x[b * img..(b + 1) * img]
                        } else {
                            &cols[b * rows * p..(b + 1) * rows * p]
                        };
                        gemm(cout, p, rows, go, false, col, true, 1.0, &mut dw);
                    }
                    self.accumulate_owned(*kernel, dw);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; cout];
                    for b in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let base = (b * cout + co) * p;
                            *d += g[base..base + p].iter().sum::<f64>();
                        }
                    }
                    self.accumulate_owned(*bias, db);
                }
                if self.nodes[input.0].requires_grad {
                    let wt = self.nodes[kernel.0].value.data();
                    let mut dx = vec![0.0; n * img];
                    let mut dcol = if pointwise {
                        Vec::new()
                    } else {
                        vec![0.0; rows * p]
                    };
                    for b in 0..n {
                        let go = &g[b * cout * p..(b + 1) * cout * p];
                        let dst = &mut dx[b * img..(b + 1) * img];
                        if pointwise {
                            gemm(rows, cout, p, wt, true, go, false, 1.0, dst);
                        } else {
                            gemm(rows, cout, p, wt, true, go, false, 0.0, &mut dcol);
                            col2im_add(&dcol, geom, dst);
                        }
                    }
                    self.accumulate_owned(*input, dx);
                }
            }
            Op::Relu(x) => {
                self.accumulate(*x, |s, nodes| {
                    let xs = nodes[x.0].value.data();
                    for ((s, &gv), &xv) in s.iter_mut().zip(g).zip(xs) {
                        if xv > 0.0 {
                            *s += gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(*input, |s, _| {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        s[idx] += gv;
                    }
                });
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4("upsample").unwrap();
                let wo = 2 * w;
                self.accumulate(*x, |s, _| {
                    for nc in 0..n * c {
                        for oy in 0..2 * h {
                            for ox in 0..wo {
                                s[nc * h * w + (oy / 2) * w + ox / 2] +=
                                    g[nc * 4 * h * w + oy * wo + ox];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let [n, ctot, h, w] = self.nodes[i].value.dims4("concat").unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let cx = self.nodes[x.0].value.shape()[1];
                    self.accumulate(x, |s, _| {
                        for b in 0..n {
                            let src =
                                &g[(b * ctot + offset) * plane..(b * ctot + offset + cx) * plane];
                            add_into(&mut s[b * cx * plane..(b + 1) * cx * plane], src);
                        }
                    });
                    offset += cx;
                }
            }
            Op::Add(xs) => {
                for &x in xs {
                    self.accumulate(x, |s, _| add_into(s, g));
                }
            }
            Op::Mul(a, b) => {
                self.accumulate(*a, |s, nodes| {
                    let bv = nodes[b.0].value.data();
                    for ((s, gv), bv) in s.iter_mut().zip(g).zip(bv) {
                        *s += gv * bv;
                    }
                });
                self.accumulate(*b, |s, nodes| {
                    let av = nodes[a.0].value.data();
                    for ((s, gv), av) in s.iter_mut().zip(g).zip(av) {
                        *s += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(*x, |s, _| {
                    for (s, gv) in s.iter_mut().zip(g) {
                        *s += gv * f;
                    }
                });
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = self.nodes[i].value.dims4("softmax").unwrap();
                let plane = h * w;
                self.accumulate(*x, |s, nodes| {
                    let y = nodes[i].value.data();
                    for b in 0..n {
                        for p in 0..plane {
                            let base = b * c * plane + p;
                            let dot: f64 = (0..c)
                                .map(|ch| g[base + ch * plane] * y[base + ch * plane])
                                .sum();
                            for ch in 0..c {
                                let k = base + ch * plane;
                                s[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                self.accumulate(*x, |s, nodes| {
                    let xs = nodes[x.0].value.data();
                    for ((s, gv), &xv) in s.iter_mut().zip(g).zip(xs) {
                        *s += gv * sigmoid(xv);
                    }
                });
            }
            Op::Ln(x) => {
                self.accumulate(*x, |s, nodes| {
                    let xs = nodes[x.0].value.data();
                    for ((s, gv), xv) in s.iter_mut().zip(g).zip(xs) {
                        *s += gv / xv;
                    }
                });
            }
            Op::Exp(x) => {
                self.accumulate(*x, |s, nodes| {
                    let y = nodes[i].value.data();
                    for ((s, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *s += gv * yv;
                    }
                });
            }
            Op::FloorMin(x, floor) => {
                self.accumulate(*x, |s, nodes| {
                    let xs = nodes[x.0].value.data();
                    for ((s, gv), &xv) in s.iter_mut().zip(g).zip(xs) {
                        if xv > *floor {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |s, _| s.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let scale = g[0] / self.nodes[x.0].value.numel() as f64;
                self.accumulate(*x, |s, _| s.iter_mut().for_each(|v| *v += scale));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let [n, c, h, w] = self.nodes[logits.0].value.dims4("cross_entropy").unwrap();
                let plane = h * w;
                let scale = g[0] / (n * plane) as f64;
                self.accumulate(*logits, |s, _| {
                    for (s, p) in s.iter_mut().zip(probs) {
                        *s += scale * p;
                    }
                    for b in 0..n {
                        for p in 0..plane {
                            s[b * c * plane + labels[b * plane + p] * plane + p] -= scale;
                        }
                    }
                });
            }
            Op::Huber {
                pred,
                target,
                delta,
            } => {
                let pv = self.nodes[pred.0].value.data().to_vec();
                let scale = g[0] / pv.len() as f64;
                self.accumulate(*pred, |s, _| {
                    for ((s, yh), y) in s.iter_mut().zip(&pv).zip(target) {
                        // d/dŷ of huber(y - ŷ)
                        *s -= scale * huber_slope(y - yh, *delta);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Derivative of `huber_value` with respect to the residual.
pub(crate) fn huber_slope(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}
