//! Stitching subspace identification by stochastic moment matching.
//!
//! The loss compares model lagged covariances `Lambda(s) = C Pi_s C^T + [s = 0] R`
//! with empirical ones on co-observed pairs only. Gradients are estimated from
//! random `(t, s)` samples and applied with ADAM. In linear mode the latent
//! moments are tied as `Pi_s = A^s Pi0` and `A`, `Pi0` are optimized.

pub mod adam;
pub mod gradient;
pub mod hankel;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{LaggedCovariance, LatentMoments, LdsParams, MomentModel};
use crate::observation::{empirical_lagged_cov_with, MaskedTimeSeries, VariableMajor};
use crate::rng::{substream, Stream};

pub use adam::AdamConfig;
pub use gradient::{grad_batch, grad_linear_mode, moment_gradient, moment_loss, Gradients, LagTargets, Prepared};
pub use hankel::{hankel_ssid, HankelFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Nonlinear,
}

fn default_batch() -> usize {
    1
}
fn default_passes() -> usize {
    1
}
fn default_mode() -> Mode {
    Mode::Linear
}
fn default_monitor_pairs() -> usize {
    10_000
}
fn default_monitor_every() -> u64 {
    100
}
fn default_min_count() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct S3idConfig {
    pub n: usize,
    /// Maximum lag `S`.
    #[serde(rename = "S")]
    pub max_lag: usize,
    /// `r_s` for `s = 0..=S`; empty means all ones.
    #[serde(default)]
    pub lag_weights: Vec<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Held covariance entries per lag for loss monitoring.
    #[serde(default = "default_monitor_pairs")]
    pub monitor_pairs: usize,
    #[serde(default = "default_monitor_every")]
    pub monitor_every: u64,
    /// Smallest co-occurrence count of a matched pair.
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    pub seed: u64,
}

impl S3idConfig {
    pub fn new(n: usize, max_lag: usize, seed: u64) -> Self {
        Self {
            n,
            max_lag,
            lag_weights: Vec::new(),
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            passes: default_passes(),
            mode: default_mode(),
            monitor_pairs: default_monitor_pairs(),
            monitor_every: default_monitor_every(),
            min_count: default_min_count(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("latent dimension n must be positive".into());
        }
        if self.max_lag < 1 {
            return bad("maximum lag S must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if !self.lag_weights.is_empty() && self.lag_weights.len() != self.max_lag + 1 {
            return bad(format!("lag_weights needs S + 1 = {} entries, got {}", self.max_lag + 1, self.lag_weights.len()));
        }
        if self.lag_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return bad("lag weights must be finite and nonnegative".into());
        }
        let a = &self.adam;
        if !(a.step_size > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad("invalid ADAM hyperparameters".into());
        }
        if self.min_count < 2 {
            return bad("min_count must be at least 2".into());
        }
        if self.monitor_every == 0 {
            return bad("monitor_every must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.lag_weights.is_empty() {
            vec![1.0; self.max_lag + 1]
        } else {
            self.lag_weights.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Linear { a: DMatrix<f64>, pi0: DMatrix<f64> },
    Nonlinear { lags: Vec<DMatrix<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct S3idState {
    pub c: DMatrix<f64>,
    pub r: DVector<f64>,
    pub dynamics: Dynamics,
    /// ADAM accumulators in parameter order `C, R, then A, Pi0 or Pi_0..Pi_S`.
    pub moments: Vec<adam::Moments>,
    pub step: u64,
}

impl S3idState {
    /// Assemble a state with fresh optimizer accumulators.
    pub fn new(c: DMatrix<f64>, r: DVector<f64>, dynamics: Dynamics) -> Self {
        let nn = c.ncols() * c.ncols();
        let mut moments = vec![adam::Moments::zeros(c.len()), adam::Moments::zeros(r.len())];
        let blocks = match &dynamics {
            Dynamics::Linear { .. } => 2,
            Dynamics::Nonlinear { lags } => lags.len(),
        };
        moments.extend((0..blocks).map(|_| adam::Moments::zeros(nn)));
        Self { c, r, dynamics, moments, step: 0 }
    }

    /// `Pi_s` for `s = 0..=max_lag`.
    pub fn latent_lags(&self, max_lag: usize) -> Vec<DMatrix<f64>> {
        match &self.dynamics {
            Dynamics::Linear { a, pi0 } => LatentMoments::linear(a, pi0, max_lag).lags,
            Dynamics::Nonlinear { lags } => lags[..=max_lag.min(lags.len() - 1)].to_vec(),
        }
    }

    pub fn pi0(&self) -> &DMatrix<f64> {
        match &self.dynamics {
            Dynamics::Linear { pi0, .. } => pi0,
            Dynamics::Nonlinear { lags } => &lags[0],
        }
    }

    /// Exported parameters: `Pi0` projected PSD, `Q = Pi0 - A Pi0 A^T` clamped PSD.
    pub fn to_fitted(&self) -> FittedModel {
        match &self.dynamics {
            Dynamics::Linear { a, pi0 } => {
                let pi0 = linalg::project_psd(pi0, 0.0);
                let q = linalg::project_psd(&(&pi0 - a * &pi0 * a.transpose()), 0.0);
                FittedModel::Linear(LdsParams { a: a.clone(), c: self.c.clone(), q, r: self.r.clone(), pi0 })
            }
            Dynamics::Nonlinear { lags } => {
                let mut lags = lags.clone();
                lags[0] = linalg::project_psd(&lags[0], 0.0);
                FittedModel::Nonlinear(MomentModel {
                    c: self.c.clone(),
                    moments: LatentMoments { lags },
                    r: self.r.clone(),
                })
            }
        }
    }

    /// Apply one ADAM update, then clamp `R >= 0` and symmetrize `Pi0`.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let (head, rest) = self.moments.split_at_mut(2);
        adam::update("C", self.c.as_mut_slice(), grads.c.as_slice(), &mut head[0], cfg, step)?;
        adam::update("R", self.r.as_mut_slice(), grads.r.as_slice(), &mut head[1], cfg, step)?;
        match &mut self.dynamics {
            Dynamics::Linear { a, pi0 } => {
                let (ga, gpi0) = grad_linear_mode(a, pi0, &grads.lags);
                adam::update("A", a.as_mut_slice(), ga.as_slice(), &mut rest[0], cfg, step)?;
                adam::update("Pi0", pi0.as_mut_slice(), gpi0.as_slice(), &mut rest[1], cfg, step)?;
                linalg::symmetrize_mut(pi0);
            }
            Dynamics::Nonlinear { lags } => {
                for (s, (pi, g)) in lags.iter_mut().zip(&grads.lags).enumerate() {
                    let name = format!("Pi_{s}");
                    if s == 0 {
                        let gs = linalg::symmetrize(g);
                        adam::update(&name, pi.as_mut_slice(), gs.as_slice(), &mut rest[s], cfg, step)?;
                        linalg::symmetrize_mut(pi);
                    } else {
                        adam::update(&name, pi.as_mut_slice(), g.as_slice(), &mut rest[s], cfg, step)?;
                    }
                }
            }
        }
        self.r.apply(|x| *x = x.max(0.0));
        Ok(())
    }
}

/// Result of a fit in either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Linear(LdsParams),
    Nonlinear(MomentModel),
}

impl FittedModel {
    pub fn c(&self) -> &DMatrix<f64> {
        match self {
            FittedModel::Linear(p) => &p.c,
            FittedModel::Nonlinear(m) => &m.c,
        }
    }

    pub fn pi0(&self) -> &DMatrix<f64> {
        match self {
            FittedModel::Linear(p) => &p.pi0,
            FittedModel::Nonlinear(m) => &m.moments.lags[0],
        }
    }

    pub fn as_params(&self) -> Option<&LdsParams> {
        match self {
            FittedModel::Linear(p) => Some(p),
            FittedModel::Nonlinear(_) => None,
        }
    }

    pub fn as_lagged(&self) -> &dyn LaggedCovariance {
        match self {
            FittedModel::Linear(p) => p,
            FittedModel::Nonlinear(m) => m,
        }
    }

    /// Largest lag with a latent moment; unbounded for linear dynamics.
    pub fn max_lag(&self) -> Option<usize> {
        match self {
            FittedModel::Linear(_) => None,
            FittedModel::Nonlinear(m) => Some(m.moments.max_lag()),
        }
    }

    pub fn to_moment_model(&self, max_lag: usize) -> MomentModel {
        match self {
            FittedModel::Linear(p) => MomentModel::from_params(p, max_lag),
            FittedModel::Nonlinear(m) => m.clone(),
        }
    }
}

/// Random initialization: `C ~ N(0, 1/n)`, `R_i` half the observed variance,
/// `Pi0 = I` with `A = 0.9 I` or `Pi_s = 0.9^s I`.
pub fn init_state(data: &MaskedTimeSeries, cfg: &S3idConfig) -> Result<S3idState> {
    init_state_indexed(data, cfg, 0)
}

/// As [`init_state`] on the initialization substream number `index`.
pub fn init_state_indexed(data: &MaskedTimeSeries, cfg: &S3idConfig, index: u64) -> Result<S3idState> {
    let p = data.p();
    if p == 0 || data.t() == 0 {
        return Err(Error::InvalidConfig("empty data".into()));
    }
    if cfg.n > p {
        return Err(Error::Dimension(format!("latent dimension {} exceeds p = {p}", cfg.n)));
    }
    let mut rng = crate::rng::indexed_substream(cfg.seed, Stream::Init, index);
    let c = linalg::gaussian_matrix(p, cfg.n, &mut rng) / (cfg.n as f64).sqrt();
    let r = data.observed_variance() * 0.5;
    let eye = DMatrix::identity(cfg.n, cfg.n);
    let dynamics = match cfg.mode {
        Mode::Linear => Dynamics::Linear { a: &eye * 0.9, pi0: eye },
        Mode::Nonlinear => Dynamics::Nonlinear {
            lags: (0..=cfg.max_lag).map(|s| &eye * 0.9f64.powi(s as i32)).collect(),
        },
    };
    Ok(S3idState::new(c, r, dynamics))
}

/// Fixed random subset of empirical lagged covariances used to track the loss.
#[derive(Debug, Clone)]
pub struct MonitorSet {
    pub targets: Vec<LagTargets>,
}

impl MonitorSet {
    /// Up to `per_lag` pairs from `Omega^s` for each lag, with estimates.
    pub fn sample(data: &MaskedTimeSeries, prep: &Prepared, per_lag: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, Stream::Eval);
        let series = VariableMajor::new(data);
        let mut targets = Vec::with_capacity(prep.max_lag() + 1);
        for s in 0..=prep.max_lag() {
            let min = prep.min_count();
            let pairs = prep.groups.sample_pairs(s, per_lag, |c| c >= min, &mut rng);
            let values = empirical_lagged_cov_with(&series, &prep.groups, s, &pairs)?;
            targets.push(LagTargets { lag: s, pairs, values });
        }
        Ok(Self { targets })
    }
}

/// Monitoring loss `1/2 sum_s r_s sum_pairs (Lambda(s)_ij - Lambda~(s)_ij)^2`.
pub fn loss(state: &S3idState, targets: &[LagTargets], lag_weights: &[f64]) -> f64 {
    let max_lag = targets.iter().map(|t| t.lag).max().unwrap_or(0);
    let lags = state.latent_lags(max_lag);
    moment_loss(&state.c, &state.r, &lags, lag_weights, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub monitor_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct S3idFit {
    pub fitted: FittedModel,
    pub state: S3idState,
    pub trace: Vec<LossPoint>,
}

/// Draw `B` uniform pairs from `{(t, s) : t + s < T, 0 <= s <= S}`.
pub fn sample_batch<R: Rng + ?Sized>(prep: &Prepared, b: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let t_len = prep.t();
    let n_valid = prep.n_valid;
    (0..b)
        .map(|_| {
            // Lag s has T - s valid start times; index into the stacked ranges.
            let mut idx = rng.random_range(0..n_valid);
            let mut s = 0;
            loop {
                let len = (t_len - s) as u64;
                if idx < len {
                    return (idx as usize, s);
                }
                idx -= len;
                s += 1;
            }
        })
        .collect()
}

/// Full S3ID fit from a random initialization.
pub fn fit_s3id(data: &MaskedTimeSeries, cfg: &S3idConfig) -> Result<S3idFit> {
    cfg.validate()?;
    let prep = Prepared::with_min_count(data, cfg.max_lag, cfg.min_count)?;
    let monitor = MonitorSet::sample(data, &prep, cfg.monitor_pairs, cfg.seed)?;
    let state = init_state(data, cfg)?;
    fit_s3id_from(&prep, &monitor, state, cfg)
}

/// Run `passes * T (S + 1) / B` ADAM steps from a given state.
pub fn fit_s3id_from(prep: &Prepared, monitor: &MonitorSet, mut state: S3idState, cfg: &S3idConfig) -> Result<S3idFit> {
    cfg.validate()?;
    if prep.max_lag() < cfg.max_lag {
        return Err(Error::InvalidConfig(format!(
            "prepared data covers lags up to {}, config needs {}",
            prep.max_lag(),
            cfg.max_lag
        )));
    }
    let weights = cfg.weights();
    let steps = (cfg.passes as u64 * prep.t() as u64 * (cfg.max_lag as u64 + 1)).div_ceil(cfg.batch_size as u64);
    let mut rng = substream(cfg.seed, Stream::Batch);
    let start = Instant::now();
    let mut trace = Vec::new();
    let record = |state: &S3idState, trace: &mut Vec<LossPoint>| -> Result<()> {
        let l = loss(state, &monitor.targets, &weights);
        if !l.is_finite() {
            return Err(Error::Numerical(format!("monitoring loss became {l} at step {}", state.step)));
        }
        trace.push(LossPoint { step: state.step, monitor_loss: l, wall_time_s: start.elapsed().as_secs_f64() });
        Ok(())
    };
    record(&state, &mut trace)?;
    for k in 1..=steps {
        let batch = sample_batch(prep, cfg.batch_size, &mut rng);
        let lags = state.latent_lags(cfg.max_lag);
        let grads = grad_batch(prep, &state.c, &state.r, &lags, &weights, &batch);
        state.adam_step(&grads, &cfg.adam)?;
        if k % cfg.monitor_every == 0 || k == steps {
            record(&state, &mut trace)?;
        }
    }
    log::info!(
        "s3id: {steps} steps, monitor loss {:.4e} -> {:.4e}",
        trace.first().map_or(f64::NAN, |p| p.monitor_loss),
        trace.last().map_or(f64::NAN, |p| p.monitor_loss)
    );
    Ok(S3idFit { fitted: state.to_fitted(), state, trace })
}

/// Deterministic full-batch ADAM on explicit covariance targets.
pub fn fit_moments(
    mut state: S3idState,
    targets: &[LagTargets],
    lag_weights: &[f64],
    adam: &AdamConfig,
    steps: u64,
) -> Result<S3idFit> {
    let max_lag = targets.iter().map(|t| t.lag).max().unwrap_or(0);
    let start = Instant::now();
    let mut trace = Vec::new();
    for k in 0..=steps {
        let lags = state.latent_lags(max_lag);
        if k % 100 == 0 || k == steps {
            let l = moment_loss(&state.c, &state.r, &lags, lag_weights, targets);
            trace.push(LossPoint { step: state.step, monitor_loss: l, wall_time_s: start.elapsed().as_secs_f64() });
        }
        if k == steps {
            break;
        }
        let grads = moment_gradient(&state.c, &state.r, &lags, lag_weights, targets);
        state.adam_step(&grads, adam)?;
    }
    Ok(S3idFit { fitted: state.to_fitted(), state, trace })
}
