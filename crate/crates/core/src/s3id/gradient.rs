//! Stochastic and full gradients of the moment-matching loss
//!
//! ```text
//! L(C, {Pi_s}, R) = 1/2 sum_s r_s sum_{(i,j) in Omega^s} (Lambda(s)_ij - Lambda~(s)_ij)^2
//! ```
//!
//! The per-sample gradient for a time/lag pair `(t, s)` weights every
//! co-observed pair by `1 / T^s_ij`, so summing it over all valid `(t, s)`
//! reproduces the full gradient with empirical moments normalized by `T^s_ij`.
//! All row operations are shared within a co-occurrence group: pairs of
//! groups share one weight, so the work per sample is linear in `p`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::observation::{compute_cooccurrence_groups, CooccurrenceGroups, MaskedTimeSeries};

/// Data prepared once per fit: centered zero-filled observations, groups and
/// the pair weights `1 / T^s_ab` (zero when `T^s_ab < min_count`, by default 2).
#[derive(Debug, Clone)]
pub struct Prepared {
    /// `p x T`, column `t` holds the centered `y_t`, zero where unobserved.
    pub y: DMatrix<f64>,
    pub groups: CooccurrenceGroups,
    weights: Vec<Vec<f64>>,
    /// Number of valid `(t, s)` pairs, `sum_s (T - s)`.
    pub n_valid: u64,
    min_count: u64,
}

impl Prepared {
    pub fn new(data: &MaskedTimeSeries, max_lag: usize) -> Result<Self> {
        Self::with_min_count(data, max_lag, 2)
    }

    /// Restrict matched pairs to counts of at least `min_count` (>= 2).
    pub fn with_min_count(data: &MaskedTimeSeries, max_lag: usize, min_count: u64) -> Result<Self> {
        if min_count < 2 {
            return Err(Error::InvalidConfig(format!("min_count must be at least 2, got {min_count}")));
        }
        let t = data.t();
        if t <= max_lag {
            return Err(Error::InvalidConfig(format!("T = {t} must exceed the maximum lag {max_lag}")));
        }
        let groups = compute_cooccurrence_groups(&data.scheme, max_lag);
        Ok(Self::with_groups(data.centered_filled(), groups, min_count))
    }

    pub fn with_groups(y: DMatrix<f64>, groups: CooccurrenceGroups, min_count: u64) -> Self {
        let g = groups.n_groups();
        let max_lag = groups.max_lag();
        let weights = (0..=max_lag)
            .map(|s| {
                let mut w = vec![0.0; g * g];
                for a in 0..g {
                    for b in 0..g {
                        let c = groups.group_count(a, b, s);
                        if c >= min_count {
                            w[a * g + b] = 1.0 / c as f64;
                        }
                    }
                }
                w
            })
            .collect();
        let t = groups.scheme.t as u64;
        let n_valid = (0..=max_lag as u64).map(|s| t - s).sum();
        Self { y, groups, weights, n_valid, min_count }
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn max_lag(&self) -> usize {
        self.groups.max_lag()
    }

    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    pub fn t(&self) -> usize {
        self.y.ncols()
    }

    #[inline]
    pub fn weight(&self, s: usize, a: usize, b: usize) -> f64 {
        self.weights[s][a * self.groups.n_groups() + b]
    }

    /// Every valid `(t, s)` pair, `t` 0-based with `t + s < T`.
    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        let t = self.t();
        (0..=self.max_lag())
            .flat_map(|s| (0..t - s).map(move |tt| (tt, s)))
            .collect()
    }
}

/// Gradients with respect to `C` (`p x n`), `R` and every `Pi_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub c: DMatrix<f64>,
    pub r: DVector<f64>,
    pub lags: Vec<DMatrix<f64>>,
}

/// Unbiased estimate of the full-loss gradient from a batch of `(t, s)` pairs.
///
/// Per-sample contributions are scaled by `r_s * n_valid / B`, so the batch
/// mean over all valid pairs equals the full gradient exactly.
pub fn grad_batch(
    prep: &Prepared,
    c: &DMatrix<f64>,
    r: &DVector<f64>,
    lags: &[DMatrix<f64>],
    lag_weights: &[f64],
    batch: &[(usize, usize)],
) -> Gradients {
    let p = prep.p();
    let n = c.ncols();
    let n_lags = lags.len();
    let groups = &prep.groups;
    let scheme = &groups.scheme;
    let g = groups.n_groups();
    let ct = c.transpose();

    let mut grad_ct = DMatrix::<f64>::zeros(n, p);
    let mut grad_r = DVector::<f64>::zeros(p);
    let mut grad_pi: Vec<DMatrix<f64>> = (0..n_lags).map(|_| DMatrix::zeros(n, n)).collect();
    if batch.is_empty() {
        return Gradients { c: grad_ct.transpose(), r: grad_r, lags: grad_pi };
    }
    let scale = prep.n_valid as f64 / batch.len() as f64;

    // Group Gram matrices Gamma_g = sum_{i in g} c_i c_i^T.
    let gamma: Vec<DMatrix<f64>> = groups
        .groups
        .iter()
        .map(|grp| {
            let mut m = DMatrix::zeros(n, n);
            for rg in &grp.ranges {
                let cr = ct.columns(rg.start, rg.len());
                m.gemm(1.0, &cr, &cr.transpose(), 1.0);
            }
            m
        })
        .collect();

    let has_lag0 = batch.iter().any(|&(_, s)| s == 0);
    // sym(Pi0) c_i for every variable, and noise-weighted Gram D_g = sum R_i c_i c_i^T.
    let (pi0_ct, noise_gram) = if has_lag0 {
        let w0 = (&lags[0] + lags[0].transpose()) * 0.5 * &ct;
        let d: Vec<DMatrix<f64>> = groups
            .groups
            .iter()
            .map(|grp| {
                let mut m = DMatrix::zeros(n, n);
                for rg in &grp.ranges {
                    let cr = ct.columns(rg.start, rg.len());
                    let mut scaled = cr.clone_owned();
                    for (k, i) in rg.clone().enumerate() {
                        scaled.column_mut(k).scale_mut(r[i]);
                    }
                    m.gemm(1.0, &scaled, &cr.transpose(), 1.0);
                }
                m
            })
            .collect();
        (Some(w0), Some(d))
    } else {
        (None, None)
    };

    // h_g(tau) = sum_{i in g} c_i y_i(tau) at columns 2k (t_k) and 2k+1 (t_k + s_k).
    let times: Vec<usize> = batch.iter().flat_map(|&(t, s)| [t, t + s]).collect();
    let h: Vec<DMatrix<f64>> = groups
        .groups
        .iter()
        .map(|grp| {
            let mut m = DMatrix::zeros(n, times.len());
            for rg in &grp.ranges {
                let yg = gather(&prep.y, rg.start, rg.len(), &times);
                m.gemm(1.0, &ct.columns(rg.start, rg.len()), &yg, 1.0);
            }
            m
        })
        .collect();

    // Aggregated weighted Gram sums per (group, lag) for both terms.
    let mut m_first: Vec<DMatrix<f64>> = (0..g * n_lags).map(|_| DMatrix::zeros(n, n)).collect();
    let mut m_second: Vec<DMatrix<f64>> = (0..g * n_lags).map(|_| DMatrix::zeros(n, n)).collect();
    let mut zeta_c = vec![0.0; g];
    let mut zeta_pi = vec![0.0; g];
    // Per group: (time, coefficient vector) pairs for the data terms of grad C.
    let mut data_terms: Vec<Vec<(usize, DVector<f64>)>> = vec![Vec::new(); g];
    let mut v = DVector::<f64>::zeros(n);

    for (k, &(t, s)) in batch.iter().enumerate() {
        let rho = lag_weights[s] * scale;
        if rho == 0.0 {
            continue;
        }
        let u = t + s;
        let seg_t = scheme.segment_index(t);
        let seg_u = scheme.segment_index(u);
        let groups_t = &groups.segment_groups[seg_t];
        let groups_u = &groups.segment_groups[seg_u];
        let pi = &lags[s];

        // First term: i in Omega_{t+s}, partners j in Omega_t.
        for &a in groups_u {
            v.fill(0.0);
            let mut any = false;
            for &b in groups_t {
                let w = prep.weight(s, a, b);
                if w != 0.0 {
                    any = true;
                    add_scaled(&mut m_first[a * n_lags + s], rho * w, &gamma[b]);
                    v.axpy(w, &h[b].column(2 * k), 1.0);
                }
            }
            if !any {
                continue;
            }
            // Pi_s gradient data term: - h_a(u) v^T
            grad_pi[s].ger(-rho, &h[a].column(2 * k + 1), &v, 1.0);
            let q = pi * &v * rho;
            data_terms[a].push((u, q));
            if s == 0 {
                let w = prep.weight(0, a, a);
                zeta_pi[a] += rho * w;
                zeta_c[a] += 2.0 * rho * w;
            }
        }
        // Second term: i in Omega_t, partners j in Omega_{t+s}.
        for &a in groups_t {
            v.fill(0.0);
            let mut any = false;
            for &b in groups_u {
                let w = prep.weight(s, b, a);
                if w != 0.0 {
                    any = true;
                    add_scaled(&mut m_second[a * n_lags + s], rho * w, &gamma[b]);
                    v.axpy(w, &h[b].column(2 * k + 1), 1.0);
                }
            }
            if !any {
                continue;
            }
            let q = pi.transpose() * &v * rho;
            data_terms[a].push((t, q));
        }
        // R: (Lambda(0)_ii - y_i(t)^2) / T^0_ii for observed i.
        if s == 0 {
            let pi0_ct = pi0_ct.as_ref().expect("lag-0 products computed");
            for &a in groups_t {
                let w = prep.weight(0, a, a);
                if w == 0.0 {
                    continue;
                }
                let col = prep.y.column(t);
                for rg in &groups.groups[a].ranges {
                    for i in rg.clone() {
                        let pred = ct.column(i).dot(&pi0_ct.column(i)) + r[i];
                        grad_r[i] += rho * w * (pred - col[i] * col[i]);
                    }
                }
            }
        }
    }

    for a in 0..g {
        // Pi_s gradient model terms and grad C linear map P_a.
        let mut p_a = DMatrix::<f64>::zeros(n, n);
        for s in 0..n_lags {
            let mf = &m_first[a * n_lags + s];
            let ms = &m_second[a * n_lags + s];
            if mf.iter().all(|&x| x == 0.0) && ms.iter().all(|&x| x == 0.0) {
                continue;
            }
            let pi = &lags[s];
            grad_pi[s] += &gamma[a] * pi * mf;
            p_a += pi * mf * pi.transpose() + pi.transpose() * ms * pi;
        }
        if zeta_pi[a] != 0.0 {
            let d = noise_gram.as_ref().expect("noise Gram computed");
            add_scaled(&mut grad_pi[0], zeta_pi[a], &d[a]);
        }
        let terms = &data_terms[a];
        let qmat = (!terms.is_empty()).then(|| {
            DMatrix::from_fn(n, terms.len(), |row, col| terms[col].1[row])
        });
        let term_times: Vec<usize> = terms.iter().map(|(tt, _)| *tt).collect();
        for rg in &groups.groups[a].ranges {
            let (lo, len) = (rg.start, rg.len());
            let mut out = grad_ct.columns_mut(lo, len);
            out.gemm(1.0, &p_a, &ct.columns(lo, len), 1.0);
            if let Some(qm) = &qmat {
                // sum_k q_k y_i(time_k) for every i in the range
                let yk = gather(&prep.y, lo, len, &term_times).transpose();
                out.gemm(-1.0, qm, &yk, 1.0);
            }
            if zeta_c[a] != 0.0 {
                let w0 = pi0_ct.as_ref().expect("lag-0 products computed");
                for (m, i) in rg.clone().enumerate() {
                    out.column_mut(m).axpy(zeta_c[a] * r[i], &w0.column(i), 1.0);
                }
            }
        }
    }

    Gradients { c: grad_ct.transpose(), r: grad_r, lags: grad_pi }
}

fn add_scaled(dst: &mut DMatrix<f64>, alpha: f64, src: &DMatrix<f64>) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += alpha * s;
    }
}

/// Rows `lo..lo+len` of `y` at the given columns, as a `len x times.len()` matrix.
fn gather(y: &DMatrix<f64>, lo: usize, len: usize, times: &[usize]) -> DMatrix<f64> {
    let p = y.nrows();
    let src = y.as_slice();
    let mut out = DMatrix::zeros(len, times.len());
    for (k, &t) in times.iter().enumerate() {
        out.column_mut(k)
            .as_mut_slice()
            .copy_from_slice(&src[t * p + lo..t * p + lo + len]);
    }
    out
}

/// Chain rule through `Pi_s = A^s Pi0`:
///
/// `dL/dA = sum_s sum_{k<s} (A^T)^k G_s (A^{s-1-k} Pi0)^T`,
/// `dL/dPi0 = sym(sum_s (A^s)^T G_s)`.
pub fn grad_linear_mode(
    a: &DMatrix<f64>,
    pi0: &DMatrix<f64>,
    lag_grads: &[DMatrix<f64>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let max_lag = lag_grads.len().saturating_sub(1);
    // powers[k] = A^k, pi_pows[k] = A^k Pi0
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..=max_lag {
        let next = &powers[k - 1] * a;
        powers.push(next);
    }
    let mut grad_a = DMatrix::zeros(n, n);
    let mut grad_pi0 = DMatrix::zeros(n, n);
    for (s, gs) in lag_grads.iter().enumerate() {
        if gs.iter().all(|&x| x == 0.0) {
            continue;
        }
        grad_pi0 += powers[s].transpose() * gs;
        for k in 0..s {
            let right = &powers[s - 1 - k] * pi0;
            grad_a += powers[k].transpose() * gs * right.transpose();
        }
    }
    let sym = (&grad_pi0 + grad_pi0.transpose()) * 0.5;
    (grad_a, sym)
}

/// Explicit lagged-covariance targets on a set of pairs for one lag.
#[derive(Debug, Clone, PartialEq)]
pub struct LagTargets {
    pub lag: usize,
    pub pairs: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

/// `1/2 sum_s r_s sum_pairs (Lambda(s)_ij - target)^2`.
pub fn moment_loss(
    c: &DMatrix<f64>,
    r: &DVector<f64>,
    lags: &[DMatrix<f64>],
    lag_weights: &[f64],
    targets: &[LagTargets],
) -> f64 {
    let mut total = 0.0;
    for tg in targets {
        let cp = c * &lags[tg.lag];
        let mut sum = 0.0;
        for (&(i, j), &target) in tg.pairs.iter().zip(&tg.values) {
            let mut pred = cp.row(i).dot(&c.row(j));
            if tg.lag == 0 && i == j {
                pred += r[i];
            }
            sum += (pred - target) * (pred - target);
        }
        total += 0.5 * lag_weights[tg.lag] * sum;
    }
    total
}

/// Exact gradient of [`moment_loss`].
pub fn moment_gradient(
    c: &DMatrix<f64>,
    r: &DVector<f64>,
    lags: &[DMatrix<f64>],
    lag_weights: &[f64],
    targets: &[LagTargets],
) -> Gradients {
    let (p, n) = c.shape();
    let ct = c.transpose();
    let mut grad_ct = DMatrix::<f64>::zeros(n, p);
    let mut grad_r = DVector::<f64>::zeros(p);
    let mut grad_pi: Vec<DMatrix<f64>> = lags.iter().map(|_| DMatrix::zeros(n, n)).collect();
    for tg in targets {
        let s = tg.lag;
        let rs = lag_weights[s];
        if rs == 0.0 {
            continue;
        }
        let pi = &lags[s];
        // columns: Pi_s c_j and Pi_s^T c_i
        let pc = pi * &ct;
        let ptc = pi.transpose() * &ct;
        for (&(i, j), &target) in tg.pairs.iter().zip(&tg.values) {
            let mut pred = ct.column(i).dot(&pc.column(j));
            if s == 0 && i == j {
                pred += r[i];
            }
            let e = rs * (pred - target);
            grad_ct.column_mut(i).axpy(e, &pc.column(j), 1.0);
            grad_ct.column_mut(j).axpy(e, &ptc.column(i), 1.0);
            grad_pi[s].ger(e, &ct.column(i), &ct.column(j), 1.0);
            if s == 0 && i == j {
                grad_r[i] += e;
            }
        }
    }
    Gradients { c: grad_ct.transpose(), r: grad_r, lags: grad_pi }
}
