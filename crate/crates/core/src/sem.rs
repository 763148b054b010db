//! EM for a latent LDS under serial subset observations.
//!
//! The E-step is a Kalman filter and RTS smoother that only touch the rows
//! observed at each time. Within a segment the observation pattern is fixed,
//! so once the posterior covariance recursion settles it is frozen and shared
//! by all remaining times of the segment. The M-step updates `C` and the
//! per-variable offset from sums over each variable's observed times; these
//! sums are shared by all members of a co-occurrence group.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{solve_stationary_covariance, LdsParams};
use crate::observation::{compute_cooccurrence_groups, MaskedTimeSeries, ObservationScheme};
use crate::s3id::{init_state_indexed, Mode, S3idConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const R_FLOOR: f64 = 1e-8;

/// LDS parameters as used by EM: an observation offset `d` and the initial
/// state covariance `v1` (initial mean zero).
#[derive(Debug, Clone, PartialEq)]
pub struct SemModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
    pub d: DVector<f64>,
    pub v1: DMatrix<f64>,
}

impl SemModel {
    pub fn from_params(params: &LdsParams) -> Self {
        Self {
            a: params.a.clone(),
            c: params.c.clone(),
            q: params.q.clone(),
            r: params.r.clone(),
            d: DVector::zeros(params.p()),
            v1: params.pi0.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Export with `Pi0` the stationary covariance when `A` is stable,
    /// otherwise the initial state covariance.
    pub fn to_params(&self) -> LdsParams {
        let pi0 = if linalg::spectral_radius(&self.a) < 1.0 {
            solve_stationary_covariance(&self.a, &self.q).unwrap_or_else(|_| self.v1.clone())
        } else {
            self.v1.clone()
        };
        LdsParams { a: self.a.clone(), c: self.c.clone(), q: self.q.clone(), r: self.r.clone(), pi0 }
    }
}

/// Observations as a zero-filled `p x T` matrix with the scheme marking
/// which entries are real.
#[derive(Debug, Clone)]
pub struct Observations {
    pub y: DMatrix<f64>,
    pub scheme: ObservationScheme,
}

impl Observations {
    /// Per-variable mean-centered observations.
    pub fn centered(data: &MaskedTimeSeries) -> Self {
        Self { y: data.centered_filled(), scheme: data.scheme.clone() }
    }

    /// Raw observations, unobserved entries zeroed.
    pub fn raw(data: &MaskedTimeSeries) -> Self {
        let p = data.p();
        let mut y = DMatrix::zeros(p, data.t());
        for seg in &data.scheme.segments {
            for t in seg.start..seg.end {
                let row = data.row(t);
                for i in seg.indices() {
                    y[(i, t)] = row[i];
                }
            }
        }
        Self { y, scheme: data.scheme.clone() }
    }

    pub fn t(&self) -> usize {
        self.y.ncols()
    }
}

/// Covariances shared across times: `index[t]` points into `mats`.
#[derive(Debug, Clone, Default)]
pub struct SharedCovs {
    pub mats: Vec<DMatrix<f64>>,
    pub index: Vec<u32>,
}

impl SharedCovs {
    fn push(&mut self, m: DMatrix<f64>) -> u32 {
        self.mats.push(m);
        (self.mats.len() - 1) as u32
    }

    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        &self.mats[self.index[t] as usize]
    }

    /// Number of distinct matrices actually stored.
    pub fn distinct(&self) -> usize {
        self.mats.len()
    }

    /// `sum_{t in range} mats[index[t]]`, grouping repeated entries.
    pub fn sum_over(&self, range: std::ops::Range<usize>, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        let mut t = range.start;
        while t < range.end {
            let k = self.index[t];
            let mut run = 1;
            while t + run < range.end && self.index[t + run] == k {
                run += 1;
            }
            out += &self.mats[k as usize] * run as f64;
            t += run;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Filtered {
    /// `n x T` predicted means `E[x_t | y_1..t-1]`.
    pub pred_means: DMatrix<f64>,
    /// `n x T` filtered means `E[x_t | y_1..t]`.
    pub means: DMatrix<f64>,
    pub pred_covs: SharedCovs,
    pub covs: SharedCovs,
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothedPosterior {
    /// `n x T` smoothed means.
    pub means: DMatrix<f64>,
    pub covs: SharedCovs,
    /// `cross.index[t - 1]` holds `Cov[x_t, x_{t-1} | y]` for `t >= 1`.
    pub cross: SharedCovs,
    pub loglik: f64,
}

impl SmoothedPosterior {
    /// `E[x_t x_t^T]`.
    pub fn second_moment(&self, t: usize) -> DMatrix<f64> {
        let m = self.means.column(t);
        self.covs.at(t) + m * m.transpose()
    }

    /// `E[x_t x_{t-1}^T]` for `t >= 1`.
    pub fn cross_moment(&self, t: usize) -> DMatrix<f64> {
        self.cross.at(t - 1) + self.means.column(t) * self.means.column(t - 1).transpose()
    }
}

/// Per-segment observation quantities.
struct SegmentCache {
    idx: Vec<usize>,
    c_obs: DMatrix<f64>,
    rinv: DVector<f64>,
    /// `C_o^T R_o^{-1} C_o`, present when every observed `R_i > 0`.
    info: Option<DMatrix<f64>>,
    logdet_r: f64,
}

impl SegmentCache {
    fn new(model: &SemModel, scheme: &ObservationScheme, seg: usize) -> Self {
        let idx: Vec<usize> = scheme.segments[seg].indices().collect();
        let n = model.n();
        let c_obs = DMatrix::from_fn(idx.len(), n, |k, j| model.c[(idx[k], j)]);
        let r_obs: Vec<f64> = idx.iter().map(|&i| model.r[i]).collect();
        let positive = r_obs.iter().all(|&r| r > 0.0);
        let rinv = DVector::from_iterator(idx.len(), r_obs.iter().map(|&r| if r > 0.0 { 1.0 / r } else { 0.0 }));
        // The information form pays off once the observed block exceeds the latent dimension.
        let info = (positive && idx.len() > n).then(|| {
            let mut scaled = c_obs.clone();
            for (k, mut row) in scaled.row_iter_mut().enumerate() {
                row *= rinv[k];
            }
            c_obs.transpose() * scaled
        });
        let logdet_r = r_obs.iter().map(|r| r.ln()).sum();
        Self { idx, c_obs, rinv, info, logdet_r }
    }
}

/// Measurement update reused while the covariance is frozen.
enum Update {
    Empty,
    Info { pf: DMatrix<f64>, pred_chol: Cholesky<f64, Dyn>, logdet: f64 },
    Standard { gain: DMatrix<f64>, chol: Cholesky<f64, Dyn>, logdet: f64 },
}

/// Forward pass with covariance freezing (`tol = 0` disables freezing).
pub fn kalman_filter_subset(model: &SemModel, obs: &Observations, tol: f64) -> Result<Filtered> {
    let n = model.n();
    let t_len = obs.t();
    let scheme = &obs.scheme;
    let mut pred_means = DMatrix::zeros(n, t_len);
    let mut means = DMatrix::zeros(n, t_len);
    let mut pred_covs = SharedCovs { mats: Vec::new(), index: vec![0; t_len] };
    let mut covs = SharedCovs { mats: Vec::new(), index: vec![0; t_len] };
    let mut loglik = 0.0;

    let mut m_pred = DVector::zeros(n);
    let mut p_pred_idx = pred_covs.push(linalg::symmetrize(&model.v1));
    let eye = DMatrix::<f64>::identity(n, n);

    for (seg_no, seg) in scheme.segments.iter().enumerate() {
        let cache = SegmentCache::new(model, scheme, seg_no);
        let k = cache.idx.len();
        let mut frozen: Option<(u32, u32, Update)> = None;
        let mut prev_filt: Option<u32> = None;
        let mut yo = DVector::zeros(k);
        for t in seg.start..seg.end {
            pred_means.set_column(t, &m_pred);
            for (r, &i) in cache.idx.iter().enumerate() {
                yo[r] = obs.y[(i, t)] - model.d[i];
            }
            let innov = &yo - &cache.c_obs * &m_pred;

            let mut fresh = None;
            let (pi, fi) = match &frozen {
                Some((pi, fi, _)) => (*pi, *fi),
                None => {
                    let p_pred = &pred_covs.mats[p_pred_idx as usize];
                    let (pf, upd) = measurement_update(p_pred, &cache, &eye)
                        .map_err(|msg| Error::NumericalAt { t, msg })?;
                    fresh = Some(upd);
                    (p_pred_idx, covs.push(pf))
                }
            };
            pred_covs.index[t] = pi;
            covs.index[t] = fi;
            let upd = match (&frozen, &fresh) {
                (Some((_, _, u)), _) | (None, Some(u)) => u,
                (None, None) => unreachable!("update computed when not frozen"),
            };

            // Mean update and innovation log-density.
            let m_filt = match upd {
                Update::Empty => m_pred.clone(),
                Update::Info { pf, pred_chol, logdet } => {
                    let u = cache.c_obs.transpose() * innov.component_mul(&cache.rinv);
                    let pu = pf * &u;
                    // e' S^-1 e as posterior residual plus prior shift; the direct
                    // form cancels badly when some R_i is tiny.
                    let res = &innov - &cache.c_obs * &pu;
                    let quad = res.component_mul(&cache.rinv).dot(&res) + pu.dot(&pred_chol.solve(&pu));
                    loglik -= 0.5 * (k as f64 * LN_2PI + logdet + quad);
                    &m_pred + pu
                }
                Update::Standard { gain, chol, logdet } => {
                    let sol = chol.solve(&innov);
                    loglik -= 0.5 * (k as f64 * LN_2PI + logdet + innov.dot(&sol));
                    &m_pred + gain * &innov
                }
            };
            means.set_column(t, &m_filt);
            m_pred = &model.a * &m_filt;

            if frozen.is_none() {
                let pf = &covs.mats[fi as usize];
                // Freeze once consecutive filtered covariances agree.
                let settled = prev_filt.is_some_and(|prev: u32| {
                    tol > 0.0 && linalg::frobenius(&(&covs.mats[prev as usize] - pf)) < tol
                });
                p_pred_idx = pred_covs.push(predict_cov(model, pf));
                prev_filt = Some(fi);
                if settled {
                    frozen = Some((p_pred_idx, fi, fresh.take().expect("fresh update")));
                }
            }
        }
    }
    Ok(Filtered { pred_means, means, pred_covs, covs, loglik })
}

fn predict_cov(model: &SemModel, pf: &DMatrix<f64>) -> DMatrix<f64> {
    let mut pp = &model.a * pf * model.a.transpose() + &model.q;
    linalg::symmetrize_mut(&mut pp);
    pp
}

fn measurement_update(
    p_pred: &DMatrix<f64>,
    cache: &SegmentCache,
    eye: &DMatrix<f64>,
) -> std::result::Result<(DMatrix<f64>, Update), String> {
    let k = cache.idx.len();
    if k == 0 {
        return Ok((p_pred.clone(), Update::Empty));
    }
    if let Some(j) = &cache.info {
        // P_f = (I + P J)^{-1} P,  |S| = |R| |I + P J|
        let m = eye + p_pred * j;
        let lu = m.clone().lu();
        let det = lu.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(format!("singular innovation covariance (det factor {det:e})"));
        }
        let mut pf = lu.solve(p_pred).ok_or("singular innovation covariance")?;
        linalg::symmetrize_mut(&mut pf);
        let pred_chol = Cholesky::new(p_pred.clone()).ok_or("predicted covariance not positive definite")?;
        let logdet = cache.logdet_r + det.ln();
        return Ok((pf.clone(), Update::Info { pf, pred_chol, logdet }));
    }
    // Standard form with a Joseph covariance update.
    let c = &cache.c_obs;
    let pct = p_pred * c.transpose();
    let mut s = c * &pct;
    for r in 0..k {
        s[(r, r)] += cache.r_at(r);
    }
    linalg::symmetrize_mut(&mut s);
    let chol = Cholesky::new(s).ok_or("innovation covariance not positive definite")?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let gain = chol.solve(&pct.transpose()).transpose();
    let ikc = eye - &gain * c;
    let mut kr = gain.clone();
    for r in 0..k {
        kr.column_mut(r).scale_mut(cache.r_at(r));
    }
    let mut pf = &ikc * p_pred * ikc.transpose() + kr * gain.transpose();
    linalg::symmetrize_mut(&mut pf);
    Ok((pf, Update::Standard { gain, chol, logdet }))
}

impl SegmentCache {
    fn r_at(&self, r: usize) -> f64 {
        if self.rinv[r] > 0.0 {
            1.0 / self.rinv[r]
        } else {
            0.0
        }
    }
}

/// RTS backward pass mirroring the filter's covariance sharing.
pub fn kalman_smooth(model: &SemModel, filtered: &Filtered, tol: f64) -> Result<SmoothedPosterior> {
    let n = model.n();
    let t_len = filtered.means.ncols();
    let mut means = filtered.means.clone();
    let mut covs = SharedCovs { mats: Vec::new(), index: vec![0; t_len] };
    let mut cross = SharedCovs { mats: Vec::new(), index: vec![0; t_len.saturating_sub(1)] };
    if t_len == 0 {
        return Ok(SmoothedPosterior { means, covs, cross, loglik: filtered.loglik });
    }
    covs.index[t_len - 1] = covs.push(filtered.covs.at(t_len - 1).clone());

    // Key of the smoother gain inputs: (filtered cov at t, predicted cov at t+1).
    let mut last_key: Option<(u32, u32)> = None;
    let mut gain = DMatrix::zeros(n, n);
    let mut frozen = false;
    let mut cross_idx: Option<u32> = None;
    for t in (0..t_len - 1).rev() {
        let key = (filtered.covs.index[t], filtered.pred_covs.index[t + 1]);
        let same_gain = last_key == Some(key);
        if !same_gain {
            let pf = &filtered.covs.mats[key.0 as usize];
            let pp = &filtered.pred_covs.mats[key.1 as usize];
            let chol = Cholesky::new(pp.clone()).ok_or_else(|| Error::NumericalAt {
                t: t + 1,
                msg: "predicted covariance not positive definite".into(),
            })?;
            // G = P_f A^T P_pred^{-1}
            gain = chol.solve(&(&model.a * pf)).transpose();
            frozen = false;
            cross_idx = None;
        }
        last_key = Some(key);

        let diff = means.column(t + 1) - filtered.pred_means.column(t + 1);
        let m = filtered.means.column(t) + &gain * diff;
        means.set_column(t, &m);

        let next = covs.index[t + 1];
        if frozen {
            covs.index[t] = next;
            cross.index[t] = cross_idx.expect("cross covariance cached while frozen");
            continue;
        }
        let ps_next = &covs.mats[next as usize];
        let pf = &filtered.covs.mats[key.0 as usize];
        let pp = &filtered.pred_covs.mats[key.1 as usize];
        let mut ps = pf + &gain * (ps_next - pp) * gain.transpose();
        linalg::symmetrize_mut(&mut ps);
        let cr = ps_next * gain.transpose();
        let settled = same_gain && tol > 0.0 && linalg::frobenius(&(&ps - ps_next)) < tol;
        let ci = cross.push(cr);
        cross.index[t] = ci;
        if settled {
            covs.index[t] = next;
            frozen = true;
            cross_idx = Some(ci);
        } else {
            covs.index[t] = covs.push(ps);
        }
    }
    Ok(SmoothedPosterior { means, covs, cross, loglik: filtered.loglik })
}

/// Filter then smooth.
pub fn e_step(model: &SemModel, obs: &Observations, tol: f64) -> Result<SmoothedPosterior> {
    let f = kalman_filter_subset(model, obs, tol)?;
    kalman_smooth(model, &f, tol)
}

/// Closed-form M-step. `C` and `d` regress each variable on the posterior
/// mean over its observed times (the centered normal equations); `R`
/// includes the posterior covariance correction.
pub fn m_step(obs: &Observations, post: &SmoothedPosterior) -> Result<SemModel> {
    let n = post.means.nrows();
    let t_len = obs.t();
    if t_len < 2 {
        return Err(Error::InvalidConfig("EM needs at least two time points".into()));
    }
    let scheme = &obs.scheme;
    let p = scheme.p;
    let groups = compute_cooccurrence_groups(scheme, 0);

    // Per-segment posterior sums.
    let seg_stats: Vec<(DVector<f64>, DMatrix<f64>)> = scheme
        .segments
        .iter()
        .map(|seg| {
            let mut sm = DVector::zeros(n);
            for t in seg.start..seg.end {
                sm += post.means.column(t);
            }
            let mview = post.means.columns(seg.start, seg.len());
            let sp = post.covs.sum_over(seg.start..seg.end, n) + &mview * mview.transpose();
            (sm, sp)
        })
        .collect();

    let mut c = DMatrix::zeros(p, n);
    let mut d = DVector::zeros(p);
    let mut r = DVector::zeros(p);
    for grp in &groups.groups {
        let segs: Vec<usize> = (0..scheme.segments.len()).filter(|&k| grp.observed_in[k]).collect();
        if segs.is_empty() {
            // Never observed: keep the variable inert.
            for i in grp.indices() {
                r[i] = 1.0;
            }
            continue;
        }
        let count: usize = segs.iter().map(|&k| scheme.segments[k].len()).sum();
        let nf = count as f64;
        let mut sm = DVector::zeros(n);
        let mut sp = DMatrix::zeros(n, n);
        for &k in &segs {
            sm += &seg_stats[k].0;
            sp += &seg_stats[k].1;
        }
        // Centered second moment shared by the group.
        let mut centered = &sp - &sm * sm.transpose() / nf;
        linalg::symmetrize_mut(&mut centered);
        let inv = match Cholesky::new(centered.clone()) {
            Some(ch) => ch.inverse(),
            None => {
                log::warn!("singular latent second moment in C update; using pseudo-inverse");
                linalg::pinv(&centered)?
            }
        };
        for rg in &grp.ranges {
            let len = rg.len();
            // sum_t y_i m_t^T and sums of y_i, y_i^2 over the group's times
            let mut sym = DMatrix::<f64>::zeros(len, n);
            let mut sy = DVector::<f64>::zeros(len);
            let mut syy = DVector::<f64>::zeros(len);
            for &k in &segs {
                let seg = &scheme.segments[k];
                let yb = obs.y.view((rg.start, seg.start), (len, seg.len()));
                let mb = post.means.columns(seg.start, seg.len());
                sym.gemm(1.0, &yb, &mb.transpose(), 1.0);
                for (row, acc) in yb.row_iter().zip(sy.iter_mut()) {
                    *acc += row.sum();
                }
                for (row, acc) in yb.row_iter().zip(syy.iter_mut()) {
                    *acc += row.iter().map(|v| v * v).sum::<f64>();
                }
            }
            let cov_ym = &sym - &sy * sm.transpose() / nf;
            let c_rows = &cov_ym * &inv;
            for m in 0..len {
                let i = rg.start + m;
                let ci = c_rows.row(m).transpose();
                let di = (sy[m] - ci.dot(&sm)) / nf;
                // sum (y - d - c m)^2 + c P c^T over observed times
                let resid = syy[m] - 2.0 * di * sy[m] - 2.0 * ci.dot(&sym.row(m).transpose()) + nf * di * di
                    + 2.0 * di * ci.dot(&sm)
                    + ci.dot(&(&sp * &ci));
                c.set_row(i, &ci.transpose());
                d[i] = di;
                r[i] = (resid / nf).max(R_FLOOR);
            }
        }
    }

    // Dynamics from smoothed moments over t = 1..T-1 (0-based pairs (t, t-1)).
    let tail = post.means.columns(1, t_len - 1);
    let head = post.means.columns(0, t_len - 1);
    let s_prev = post.covs.sum_over(0..t_len - 1, n) + &head * head.transpose();
    let s_curr = post.covs.sum_over(1..t_len, n) + &tail * tail.transpose();
    let s_cross = post.cross.sum_over(0..t_len - 1, n) + &tail * head.transpose();
    let a = match Cholesky::new(linalg::symmetrize(&s_prev)) {
        Some(ch) => ch.solve(&s_cross.transpose()).transpose(),
        None => {
            log::warn!("singular latent second moment in A update; using pseudo-inverse");
            &s_cross * linalg::pinv(&s_prev)?
        }
    };
    let mut q = (&s_curr - &a * s_cross.transpose()) / (t_len - 1) as f64;
    linalg::symmetrize_mut(&mut q);
    let v1 = post.second_moment(0);
    Ok(SemModel { a, c, q, r, d, v1 })
}

fn default_max_iters() -> usize {
    200
}
fn default_rel_tol() -> f64 {
    1e-8
}
fn default_cov_tol() -> f64 {
    1e-9
}
fn default_restarts() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemConfig {
    pub n: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub loglik_rel_tol: f64,
    #[serde(default = "default_cov_tol")]
    pub cov_converge_tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    pub seed: u64,
}

impl SemConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            max_iters: default_max_iters(),
            loglik_rel_tol: default_rel_tol(),
            cov_converge_tol: default_cov_tol(),
            restarts: default_restarts(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig("n, max_iters and restarts must be positive".into()));
        }
        if !(self.loglik_rel_tol >= 0.0) || !(self.cov_converge_tol >= 0.0) {
            return Err(Error::InvalidConfig("tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum SemInit {
    Random,
    Params(LdsParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikPoint {
    pub iter: usize,
    pub loglik: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct SemFit {
    pub model: SemModel,
    pub params: LdsParams,
    pub trace: Vec<LoglikPoint>,
    /// Model after each iteration, when requested.
    pub history: Vec<SemModel>,
}

impl SemFit {
    pub fn final_loglik(&self) -> f64 {
        self.trace.last().map_or(f64::NEG_INFINITY, |p| p.loglik)
    }
}

/// Random initialization shared with S3ID: `C ~ N(0, 1/n)`, `R_i` half the
/// observed variance, `A = 0.9 I`, `V1 = I` and `Q = I - A A^T`.
pub fn random_init(data: &MaskedTimeSeries, n: usize, seed: u64, restart: u64) -> Result<SemModel> {
    let mut cfg = S3idConfig::new(n, 1, seed);
    cfg.mode = Mode::Linear;
    let st = init_state_indexed(data, &cfg, restart)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let a = &eye * 0.9;
    let q = &eye - &a * a.transpose();
    let mut r = st.r;
    r.apply(|x| *x = x.max(R_FLOOR));
    Ok(SemModel { a, c: st.c, q, r, d: DVector::zeros(data.p()), v1: eye })
}

/// Prepare external parameters for EM: `Q` and `V1` made positive definite,
/// `R` floored.
pub fn init_from_params(params: &LdsParams) -> SemModel {
    let mut m = SemModel::from_params(params);
    let scale = (m.q.trace().abs() / m.n() as f64).max(1e-12);
    m.q = linalg::project_psd(&m.q, 1e-6 * scale);
    let vscale = (m.v1.trace().abs() / m.n() as f64).max(1e-12);
    m.v1 = linalg::project_psd(&m.v1, 1e-6 * vscale);
    m.r.apply(|x| *x = x.max(R_FLOOR));
    m
}

/// Run EM from one starting model on (centered) observations.
pub fn run_em(obs: &Observations, mut model: SemModel, cfg: &SemConfig, keep_history: bool) -> Result<SemFit> {
    let start = Instant::now();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut history = Vec::new();
    let mut prev: Option<f64> = None;
    for iter in 0..cfg.max_iters {
        let post = e_step(&model, obs, cfg.cov_converge_tol)?;
        let ll = post.loglik;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("log-likelihood became {ll} at iteration {iter}")));
        }
        if let Some(pl) = prev {
            if ll < pl - 1e-6 * pl.abs() {
                return Err(Error::LikelihoodDecrease { iter, prev: pl, next: ll });
            }
        }
        trace.push(LoglikPoint { iter, loglik: ll, wall_time_s: start.elapsed().as_secs_f64() });
        if let Some(pl) = prev {
            if (ll - pl).abs() <= cfg.loglik_rel_tol * pl.abs() {
                break;
            }
        }
        prev = Some(ll);
        model = m_step(obs, &post)?;
        if keep_history {
            history.push(model.clone());
        }
    }
    let params = model.to_params();
    Ok(SemFit { model, params, trace, history })
}

/// Fit by EM. Random initialization runs `cfg.restarts` fits in parallel and
/// keeps the one with the highest final log-likelihood.
pub fn fit_sem(data: &MaskedTimeSeries, cfg: &SemConfig, init: &SemInit) -> Result<SemFit> {
    cfg.validate()?;
    let obs = Observations::centered(data);
    match init {
        SemInit::Params(params) => {
            if params.p() != data.p() || params.n() != cfg.n {
                return Err(Error::Dimension(format!(
                    "initial params are {}x{}, expected {}x{}",
                    params.p(),
                    params.n(),
                    data.p(),
                    cfg.n
                )));
            }
            run_em(&obs, init_from_params(params), cfg, false)
        }
        SemInit::Random => {
            let fits: Vec<Result<SemFit>> = (0..cfg.restarts as u64)
                .into_par_iter()
                .map(|k| run_em(&obs, random_init(data, cfg.n, cfg.seed, k)?, cfg, false))
                .collect();
            let mut best: Option<SemFit> = None;
            for f in fits {
                let f = f?;
                if best.as_ref().is_none_or(|b| f.final_loglik() > b.final_loglik()) {
                    best = Some(f);
                }
            }
            Ok(best.expect("at least one restart"))
        }
    }
}

/// Every restart of a random-init fit, in restart order.
pub fn fit_sem_restarts(data: &MaskedTimeSeries, cfg: &SemConfig) -> Result<Vec<SemFit>> {
    cfg.validate()?;
    let obs = Observations::centered(data);
    (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|k| run_em(&obs, random_init(data, cfg.n, cfg.seed, k)?, cfg, false))
        .collect()
}
