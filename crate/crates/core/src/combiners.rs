//! Strategies that reduce a vector of per-task losses to one training loss.
//!
//! The geometric strategy is evaluated in the log domain,
//! `exp(mean(ln L_i))`, which equals the n-th root of the product but
//! cannot underflow when many losses are small. Its gradient with respect
//! to each task loss is `total / (n * L_i)`, so rescaling any one task by a
//! positive constant only rescales the total: the parameter-gradient
//! direction is untouched.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default lower bound applied to every task loss before combination.
pub const DEFAULT_LOSS_FLOOR: f64 = 1e-12;
pub const DEFAULT_DWA_TEMPERATURE: f64 = 2.0;

/// Ordered `(task, loss)` pairs. Order is priority order for the focused
/// strategy.
#[derive(Clone, Debug)]
pub struct TaskLossVector {
    entries: Vec<(String, Var)>,
}

impl TaskLossVector {
    /// Validates scalar, finite losses and floors each at `floor`.
    pub fn new(g: &mut Graph, entries: Vec<(String, Var)>, floor: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("task loss vector is empty".into()));
        }
        let mut out = Vec::with_capacity(entries.len());
        for (name, v) in entries {
            let t = g.value(v);
            if t.numel() != 1 {
                return Err(Error::Config(format!(
                    "loss for `{name}` is not a scalar (shape {:?})",
                    t.shape()
                )));
            }
            if !t.item().is_finite() {
                return Err(Error::NumericAbort { task: name });
            }
            let floored = g.floor_min(v, floor)?;
            if !(g.value(floored).item() > 0.0) {
                return Err(Error::Config(format!(
                    "loss for `{name}` is not positive after flooring"
                )));
            }
            out.push((name, floored));
        }
        Ok(Self { entries: out })
    }

    /// Wraps already-validated losses without flooring.
    pub fn from_vars(entries: Vec<(String, Var)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self, g: &Graph) -> Vec<f64> {
        self.vars().map(|v| g.value(v).item()).collect()
    }
}

fn ensure_positive(g: &Graph, losses: &TaskLossVector) -> Result<()> {
    for (name, v) in &losses.entries {
        let x = g.value(*v).item();
        if !(x > 0.0) {
            return Err(Error::Config(format!(
                "loss for `{name}` must be > 0, got {x}"
            )));
        }
    }
    Ok(())
}

fn geometric_mean(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let logs = vars
        .iter()
        .map(|&v| g.ln(v))
        .collect::<Result<Vec<_>, _>>()?;
    let total = g.add(&logs)?;
    let mean = g.scale(total, 1.0 / vars.len() as f64)?;
    Ok(g.exp(mean)?)
}

/// Geometric mean of all task losses.
pub fn combine_gls(g: &mut Graph, losses: &TaskLossVector) -> Result<Var> {
    ensure_positive(g, losses)?;
    let vars: Vec<Var> = losses.vars().collect();
    geometric_mean(g, &vars)
}

/// Geometric mean of all losses times the geometric mean of the first `m`.
pub fn combine_fls(g: &mut Graph, losses: &TaskLossVector, m: usize) -> Result<Var> {
    if m == 0 || m > losses.len() {
        return Err(Error::Config(format!(
            "focused task count m={m} must be in 1..={}",
            losses.len()
        )));
    }
    ensure_positive(g, losses)?;
    let vars: Vec<Var> = losses.vars().collect();
    let all = geometric_mean(g, &vars)?;
    let focused = geometric_mean(g, &vars[..m])?;
    Ok(g.mul(all, focused)?)
}

/// Plain sum of task losses.
pub fn combine_equal(g: &mut Graph, losses: &TaskLossVector) -> Result<Var> {
    let vars: Vec<Var> = losses.vars().collect();
    Ok(g.add(&vars)?)
}

pub fn combine_weighted(g: &mut Graph, losses: &TaskLossVector, weights: &[f64]) -> Result<Var> {
    validate_weights(weights, losses.len())?;
    weighted_sum(g, losses, weights)
}

fn validate_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Config(format!(
            "{} weights given for {n} tasks",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Config(format!(
            "task weights must be positive, got {w}"
        )));
    }
    Ok(())
}

fn weighted_sum(g: &mut Graph, losses: &TaskLossVector, weights: &[f64]) -> Result<Var> {
    let terms = losses
        .vars()
        .zip(weights)
        .map(|(v, &w)| g.scale(v, w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.add(&terms)?)
}

/// `sum_i 0.5 * exp(-s_i) * L_i + 0.5 * s_i` with learnable log-variances `s_i`.
pub fn combine_uncertainty(
    g: &mut Graph,
    losses: &TaskLossVector,
    log_variances: &[Var],
) -> Result<Var> {
    if log_variances.len() != losses.len() {
        return Err(Error::Config(format!(
            "{} log-variances for {} tasks",
            log_variances.len(),
            losses.len()
        )));
    }
    let mut terms = Vec::with_capacity(losses.len());
    for (l, &s) in losses.vars().zip(log_variances) {
        let neg = g.scale(s, -1.0)?;
        let precision = g.exp(neg)?;
        let weighted = g.mul(precision, l)?;
        let data_term = g.scale(weighted, 0.5)?;
        let reg = g.scale(s, 0.5)?;
        terms.push(g.add(&[data_term, reg])?);
    }
    Ok(g.add(&terms)?)
}

/// Dynamic weight average: `sum_i w_i L_i` with weights from
/// [`CombinerState::dwa_weights`].
pub fn combine_dwa(g: &mut Graph, losses: &TaskLossVector, state: &CombinerState) -> Result<Var> {
    state.check_tasks(losses.len())?;
    let w = state.dwa_weights();
    weighted_sum(g, losses, &w)
}

/// State a strategy carries across steps and epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinerState {
    num_tasks: usize,
    /// Most recent epoch last; at most two entries.
    dwa_history: VecDeque<Vec<f64>>,
    dwa_temperature: f64,
    log_variances: Vec<f64>,
    epoch: usize,
}

impl CombinerState {
    pub fn new(num_tasks: usize, dwa_temperature: f64, initial_log_variance: f64) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        if !(dwa_temperature > 0.0 && dwa_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "DWA temperature must be > 0, got {dwa_temperature}"
            )));
        }
        if !initial_log_variance.is_finite() {
            return Err(Error::Config("initial log-variance must be finite".into()));
        }
        Ok(Self {
            num_tasks,
            dwa_history: VecDeque::with_capacity(2),
            dwa_temperature,
            log_variances: vec![initial_log_variance; num_tasks],
            epoch: 0,
        })
    }

    fn check_tasks(&self, n: usize) -> Result<()> {
        if n != self.num_tasks {
            return Err(Error::Config(format!(
                "combiner state holds {} tasks, got {n}",
                self.num_tasks
            )));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &VecDeque<Vec<f64>> {
        &self.dwa_history
    }

    pub fn temperature(&self) -> f64 {
        self.dwa_temperature
    }

    pub fn log_variances(&self) -> &[f64] {
        &self.log_variances
    }

    pub fn log_variances_mut(&mut self) -> &mut [f64] {
        &mut self.log_variances
    }

    /// `w = n * softmax(r / T)` with `r_i = L_i(t-1) / L_i(t-2)`; all ones
    /// until two epochs of history exist.
    pub fn dwa_weights(&self) -> Vec<f64> {
        let n = self.num_tasks;
        if self.dwa_history.len() < 2 {
            return vec![1.0; n];
        }
        let older = &self.dwa_history[0];
        let newer = &self.dwa_history[1];
        let scaled: Vec<f64> = newer
            .iter()
            .zip(older)
            .map(|(a, b)| a / b / self.dwa_temperature)
            .collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.iter().map(|e| n as f64 * e / denom).collect()
    }

    /// Pushes one epoch of mean task losses, evicting the oldest beyond two.
    pub fn update(&mut self, epoch_mean_losses: &[f64]) -> Result<()> {
        self.check_tasks(epoch_mean_losses.len())?;
        if self.dwa_history.len() == 2 {
            self.dwa_history.pop_front();
        }
        self.dwa_history.push_back(epoch_mean_losses.to_vec());
        self.epoch += 1;
        Ok(())
    }
}

/// Functional form of [`CombinerState::update`].
pub fn update_state(state: &CombinerState, epoch_mean_losses: &[f64]) -> Result<CombinerState> {
    let mut next = state.clone();
    next.update(epoch_mean_losses)?;
    Ok(next)
}

/// Strategy selection as it appears in experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum CombinerConfig {
    Equal,
    Weighted {
        weights: Vec<f64>,
    },
    Gls,
    Fls {
        m: usize,
    },
    Uncertainty {
        #[serde(default)]
        initial_log_variance: f64,
    },
    Dwa {
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_temperature() -> f64 {
    DEFAULT_DWA_TEMPERATURE
}

impl CombinerConfig {
    pub const NAMES: [&'static str; 6] = ["equal", "weighted", "gls", "fls", "uncertainty", "dwa"];

    pub fn name(&self) -> &'static str {
        match self {
            CombinerConfig::Equal => "equal",
            CombinerConfig::Weighted { .. } => "weighted",
            CombinerConfig::Gls => "gls",
            CombinerConfig::Fls { .. } => "fls",
            CombinerConfig::Uncertainty { .. } => "uncertainty",
            CombinerConfig::Dwa { .. } => "dwa",
        }
    }

    /// Parses a bare strategy name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "equal" => Ok(CombinerConfig::Equal),
            "gls" => Ok(CombinerConfig::Gls),
            "fls" => Ok(CombinerConfig::Fls { m: 1 }),
            "uncertainty" => Ok(CombinerConfig::Uncertainty {
                initial_log_variance: 0.0,
            }),
            "dwa" => Ok(CombinerConfig::Dwa {
                temperature: DEFAULT_DWA_TEMPERATURE,
            }),
            "weighted" => Err(Error::Config(
                "`weighted` needs explicit weights; set it in the config file".into(),
            )),
            other => Err(Error::Config(format!(
                "unknown combiner `{other}`, expected one of: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        match self {
            CombinerConfig::Weighted { weights } => validate_weights(weights, num_tasks),
            CombinerConfig::Fls { m } if *m == 0 || *m > num_tasks => Err(Error::Config(format!(
                "focused task count m={m} must be in 1..={num_tasks}"
            ))),
            CombinerConfig::Dwa { temperature } if !(*temperature > 0.0) => Err(Error::Config(
                format!("DWA temperature must be > 0, got {temperature}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CombinerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombinerConfig::Fls { m } => write!(f, "fls(m={m})"),
            CombinerConfig::Dwa { temperature } => write!(f, "dwa(T={temperature})"),
            other => f.write_str(other.name()),
        }
    }
}

/// A configured strategy together with its running state.
#[derive(Clone, Debug)]
pub struct LossCombiner {
    config: CombinerConfig,
    state: CombinerState,
}

/// Graph handles created for one step's combination.
#[derive(Clone, Debug, Default)]
pub struct CombinerBinding {
    log_variances: Vec<Var>,
}

impl CombinerBinding {
    pub fn log_variance_vars(&self) -> &[Var] {
        &self.log_variances
    }
}

impl LossCombiner {
    pub fn new(config: CombinerConfig, num_tasks: usize) -> Result<Self> {
        config.validate(num_tasks)?;
        let (temperature, s0) = match &config {
            CombinerConfig::Dwa { temperature } => (*temperature, 0.0),
            CombinerConfig::Uncertainty {
                initial_log_variance,
            } => (DEFAULT_DWA_TEMPERATURE, *initial_log_variance),
            _ => (DEFAULT_DWA_TEMPERATURE, 0.0),
        };
        let state = CombinerState::new(num_tasks, temperature, s0)?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &CombinerConfig {
        &self.config
    }

    pub fn state(&self) -> &CombinerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut CombinerState {
        &mut self.state
    }

    /// Whether the strategy owns parameters that the optimizer updates.
    pub fn has_learnable(&self) -> bool {
        matches!(self.config, CombinerConfig::Uncertainty { .. })
    }

    /// Inserts learnable state into `g`. `trainable` controls gradient
    /// tracking.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> CombinerBinding {
        if !self.has_learnable() {
            return CombinerBinding::default();
        }
        let log_variances = self
            .state
            .log_variances()
            .iter()
            .map(|&s| {
                let t = Tensor::scalar(s);
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        CombinerBinding { log_variances }
    }

    pub fn combine(
        &self,
        g: &mut Graph,
        losses: &TaskLossVector,
        binding: &CombinerBinding,
    ) -> Result<Var> {
        self.state.check_tasks(losses.len())?;
        match &self.config {
            CombinerConfig::Equal => combine_equal(g, losses),
            CombinerConfig::Weighted { weights } => combine_weighted(g, losses, weights),
            CombinerConfig::Gls => combine_gls(g, losses),
            CombinerConfig::Fls { m } => combine_fls(g, losses, *m),
            CombinerConfig::Uncertainty { .. } => {
                combine_uncertainty(g, losses, &binding.log_variances)
            }
            CombinerConfig::Dwa { .. } => combine_dwa(g, losses, &self.state),
        }
    }

    /// Effective per-task multiplier `d total / d L_i` at the given losses.
    pub fn weights_snapshot(&self, losses: &[f64]) -> Vec<f64> {
        let n = losses.len() as f64;
        let gm = |ls: &[f64]| (ls.iter().map(|l| l.ln()).sum::<f64>() / ls.len() as f64).exp();
        match &self.config {
            CombinerConfig::Equal => vec![1.0; losses.len()],
            CombinerConfig::Weighted { weights } => weights.clone(),
            CombinerConfig::Gls => {
                let total = gm(losses);
                losses.iter().map(|l| total / (n * l)).collect()
            }
            CombinerConfig::Fls { m } => {
                let all = gm(losses);
                let focused = gm(&losses[..*m]);
                losses
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let mut d = focused * all / (n * l);
                        if i < *m {
                            d += all * focused / (*m as f64 * l);
                        }
                        d
                    })
                    .collect()
            }
            CombinerConfig::Uncertainty { .. } => self
                .state
                .log_variances()
                .iter()
                .map(|s| 0.5 * (-s).exp())
                .collect(),
            CombinerConfig::Dwa { .. } => self.state.dwa_weights(),
        }
    }

    /// Epoch boundary: records mean losses for the DWA history.
    pub fn end_epoch(&mut self, epoch_mean_losses: &[f64]) -> Result<()> {
        self.state.update(epoch_mean_losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(values: &[f64]) -> (Graph, Vec<Var>, TaskLossVector) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|&v| g.param(Tensor::scalar(v))).collect();
        let entries = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("t{i}"), v))
            .collect();
        let losses = TaskLossVector::new(&mut g, entries, DEFAULT_LOSS_FLOOR).unwrap();
        (g, vars, losses)
    }

    fn eval(
        values: &[f64],
        f: impl Fn(&mut Graph, &TaskLossVector) -> Result<Var>,
    ) -> (f64, Vec<f64>) {
        let (mut g, vars, losses) = setup(values);
        let out = f(&mut g, &losses).unwrap();
        let value = g.value(out).item();
        g.backward(out).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).unwrap().item()).collect();
        (value, grads)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn gls_examples() {
        assert!(close(eval(&[1.0, 1.0, 1.0], combine_gls).0, 1.0, 1e-14));
        assert!(close(eval(&[2.0, 4.0, 8.0], combine_gls).0, 4.0, 1e-14));
        let (v, g) = eval(&[1.0, 2.0, 4.0], combine_gls);
        assert!(close(v, 2.0, 1e-14));
        for (got, want) in g.iter().zip([2.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]) {
            assert!(close(*got, want, 1e-14), "{got} vs {want}");
        }
    }

    #[test]
    fn fls_examples() {
        let fls = |m| move |g: &mut Graph, l: &TaskLossVector| combine_fls(g, l, m);
        assert!(close(eval(&[2.0, 4.0, 8.0], fls(3)).0, 16.0, 1e-14));
        assert!(close(eval(&[1.0, 8.0, 27.0], fls(1)).0, 6.0, 1e-14));
        assert!(close(eval(&[5.0], fls(1)).0, 25.0, 1e-14));
        let (mut g, _, losses) = setup(&[1.0, 2.0]);
        assert!(combine_fls(&mut g, &losses, 0).is_err());
        assert!(combine_fls(&mut g, &losses, 3).is_err());
    }

    #[test]
    fn equal_and_weighted() {
        let (v, g) = eval(&[1.0, 2.0, 3.0], combine_equal);
        assert_eq!(v, 6.0);
        assert_eq!(g, vec![1.0; 3]);
        assert_eq!(eval(&[7.5], combine_equal).0, 7.5);
        let (v, g) = eval(&[1.0, 2.0], |g, l| combine_weighted(g, l, &[2.0, 0.5]));
        assert_eq!(v, 3.0);
        assert_eq!(g, vec![2.0, 0.5]);
        let (v1, _) = eval(&[1.0, 2.0, 3.0], |g, l| combine_weighted(g, l, &[1.0; 3]));
        assert_eq!(v1, 6.0);
        let (mut g, _, losses) = setup(&[1.0, 2.0]);
        assert!(combine_weighted(&mut g, &losses, &[1.0]).is_err());
        assert!(combine_weighted(&mut g, &losses, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let (mut g, vars, losses) = setup(&[1.0, 2.0, 3.0]);
        let s: Vec<Var> = (0..3).map(|_| g.param(Tensor::scalar(0.0))).collect();
        let out = combine_uncertainty(&mut g, &losses, &s).unwrap();
        assert_eq!(g.value(out).item(), 3.0);
        g.backward(out).unwrap();
        for v in &vars {
            assert_eq!(g.grad(*v).unwrap().item(), 0.5);
        }

        // stationary in s at s = ln L
        let (mut g, _, losses) = setup(&[2.5]);
        let s = g.param(Tensor::scalar(2.5f64.ln()));
        let out = combine_uncertainty(&mut g, &losses, &[s]).unwrap();
        g.backward(out).unwrap();
        assert!(g.grad(s).unwrap().item().abs() < 1e-15);

        let (mut g, _, losses) = setup(&[1.0, 2.0]);
        let s = g.param(Tensor::scalar(0.0));
        assert!(combine_uncertainty(&mut g, &losses, &[s]).is_err());
    }

    #[test]
    fn dwa_weights_follow_history() {
        let mut state = CombinerState::new(2, 2.0, 0.0).unwrap();
        assert_eq!(state.dwa_weights(), vec![1.0, 1.0]);
        state.update(&[3.0, 3.0]).unwrap();
        assert_eq!(state.dwa_weights(), vec![1.0, 1.0]);
        state.update(&[3.0, 3.0]).unwrap();
        assert_eq!(state.dwa_weights(), vec![1.0, 1.0]);

        // r = (2, 1), T = 2: 2 * e^{1} / (e^{1} + e^{0.5}) and its complement
        let mut state = CombinerState::new(2, 2.0, 0.0).unwrap();
        state.update(&[1.0, 1.0]).unwrap();
        state.update(&[2.0, 1.0]).unwrap();
        let w = state.dwa_weights();
        let expected = 2.0 / (1.0 + (-0.5f64).exp());
        assert!((w[0] - expected).abs() < 1e-14);
        assert!((w[0] - 1.245).abs() < 1e-3 && (w[1] - 0.755).abs() < 1e-3);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn dwa_first_epoch_is_plain_sum() {
        let (mut g, _, losses) = setup(&[1.0, 2.0, 3.0]);
        let state = CombinerState::new(3, 2.0, 0.0).unwrap();
        let out = combine_dwa(&mut g, &losses, &state).unwrap();
        assert_eq!(g.value(out).item(), 6.0);
    }

    #[test]
    fn update_state_history_window() {
        let s0 = CombinerState::new(2, 2.0, 0.0).unwrap();
        let s1 = update_state(&s0, &[1.0, 2.0]).unwrap();
        assert_eq!(s1.history().len(), 1);
        let s2 = update_state(&s1, &[3.0, 4.0]).unwrap();
        assert_eq!(s2.history().len(), 2);
        let s3 = update_state(&s2, &[5.0, 6.0]).unwrap();
        assert_eq!(s3.history().len(), 2);
        assert_eq!(s3.history()[0], vec![3.0, 4.0]);
        assert_eq!(s3.history()[1], vec![5.0, 6.0]);
        assert_eq!(s3.epoch(), 3);
        assert!(update_state(&s3, &[1.0]).is_err());
    }

    #[test]
    fn loss_floor_and_nan() {
        let mut g = Graph::new();
        let zero = g.param(Tensor::scalar(0.0));
        let losses = TaskLossVector::new(&mut g, vec![("a".into(), zero)], 1e-12).unwrap();
        assert_eq!(losses.values(&g), vec![1e-12]);
        let out = combine_gls(&mut g, &losses).unwrap();
        assert!((g.value(out).item() - 1e-12).abs() < 1e-24);
        let mut g = Graph::new();
        let neg = g.param(Tensor::scalar(-1.0));
        assert!(TaskLossVector::new(&mut g, vec![("a".into(), neg)], 0.0).is_err());
    }

    #[test]
    fn config_names() {
        let err = CombinerConfig::from_name("median").unwrap_err().to_string();
        for n in CombinerConfig::NAMES {
            assert!(err.contains(n));
        }
        let parsed: CombinerConfig = serde_json::from_str(r#"{"name":"fls","m":2}"#).unwrap();
        assert_eq!(parsed, CombinerConfig::Fls { m: 2 });
        let parsed: CombinerConfig = serde_json::from_str(r#"{"name":"dwa"}"#).unwrap();
        assert_eq!(parsed, CombinerConfig::Dwa { temperature: 2.0 });
    }

    #[test]
    fn weights_snapshot_matches_autodiff() {
        let cfgs = [
            CombinerConfig::Gls,
            CombinerConfig::Fls { m: 2 },
            CombinerConfig::Equal,
            CombinerConfig::Weighted {
                weights: vec![0.5, 2.0, 1.0],
            },
        ];
        let values = [0.7, 3.0, 12.0];
        for cfg in cfgs {
            let c = LossCombiner::new(cfg.clone(), 3).unwrap();
            let (_, grads) = eval(&values, |g, l| c.combine(g, l, &CombinerBinding::default()));
            let snap = c.weights_snapshot(&values);
            for (a, b) in grads.iter().zip(&snap) {
                assert!(close(*a, *b, 1e-12), "{cfg}: {a} vs {b}");
            }
        }
    }
}
