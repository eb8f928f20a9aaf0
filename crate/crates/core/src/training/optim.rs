//! First-order optimizers over flat lists of tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

fn check_shapes(op: &'static str, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!(
            "{op}: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

/// `p <- p - lr * g` for every pair.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    check_shapes("adam_step", params, grads)?;
    check_shapes("adam_step", params, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * d;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * d * d;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_lr() -> f64 {
    AdamParams::default().lr
}
fn default_beta1() -> f64 {
    AdamParams::default().beta1
}
fn default_beta2() -> f64 {
    AdamParams::default().beta2
}
fn default_eps() -> f64 {
    AdamParams::default().eps
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let p = AdamParams::default();
        OptimizerConfig::Adam {
            lr: p.lr,
            beta1: p.beta1,
            beta2: p.beta2,
            eps: p.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new: f64) {
        match self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr = new,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "optimizer {name} must be > 0, got {v}"
                )))
            }
        };
        match *self {
            OptimizerConfig::Sgd { lr } => pos("lr", lr),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                pos("lr", lr)?;
                pos("eps", eps)?;
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
                    }
                }
                Ok(())
            }
        }
    }
}

/// A configured optimizer with its state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        params: AdamParams,
        state: AdamState,
    },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &[Tensor]) -> Self {
        match *config {
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Optimizer::Adam {
                params: AdamParams {
                    lr,
                    beta1,
                    beta2,
                    eps,
                },
                state: AdamState::new(params),
            },
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
            Optimizer::Adam { params: hp, state } => adam_step(params, grads, state, hp),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn sgd_examples() {
        let mut p = s(1.0);
        sgd_step(&mut p, &s(0.0), 0.1).unwrap();
        assert_eq!(p[0].item(), 1.0);
        sgd_step(&mut p, &s(2.0), 0.1).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);

        let (mut a, mut b) = (s(3.0), s(3.0));
        sgd_step(&mut a, &s(0.7), 0.05).unwrap();
        sgd_step(&mut a, &s(0.7), 0.05).unwrap();
        sgd_step(&mut b, &s(0.7), 0.1).unwrap();
        assert!((a[0].item() - b[0].item()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
        let mut st = AdamState::new(&p);
        assert!(adam_step(
            &mut p,
            &[Tensor::zeros(&[3])],
            &mut st,
            &AdamParams::default()
        )
        .is_err());
        assert!(sgd_step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn adam_first_step() {
        let hp = AdamParams::default();
        let mut p = s(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &s(1.0), &mut st, &hp).unwrap();
        // m_hat = 1, v_hat = 1
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-18);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(
                &mut p,
                &[Tensor::zeros(&[3])],
                &mut st,
                &AdamParams::default(),
            )
            .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_scale_free() {
        let hp = AdamParams::default();
        let step = |g: f64| {
            let mut p = s(0.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &s(g), &mut st, &hp).unwrap();
            p[0].item().abs()
        };
        // |dp| = lr * g / (g + eps)
        let (a, b) = (step(1.0), step(100.0));
        assert!((a - b).abs() <= 1e-3 * 1e-8 * 1.01);
    }

    #[test]
    fn optimizer_config_serde() {
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind":"adam","lr":0.01}"#).unwrap();
        assert_eq!(c.lr(), 0.01);
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind":"sgd","lr":0.5}"#).unwrap();
        assert_eq!(c, OptimizerConfig::Sgd { lr: 0.5 });
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"kind":"rmsprop"}"#).is_err());
        assert!(OptimizerConfig::Sgd { lr: -1.0 }.validate().is_err());
    }
}
