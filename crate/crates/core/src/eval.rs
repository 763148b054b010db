//! Metrics and baselines.
//!
//! Subspace agreement is measured by the projection error of the true
//! loadings onto the estimated column space and by principal angles.
//! Stitching quality is measured by how well predicted covariances of pairs
//! that were never observed together match their true values.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{predicted_lagged_entries, LaggedCovariance};
use crate::observation::{CooccurrenceGroups, MaskedTimeSeries};

/// `||(I - Q Q^T) C||_F / ||C||_F` with `Q` an orthonormal basis of `C_hat`.
pub fn subspace_projection_error(c_true: &DMatrix<f64>, c_hat: &DMatrix<f64>) -> Result<f64> {
    if c_true.nrows() != c_hat.nrows() {
        return Err(Error::Dimension(format!(
            "loadings have {} and {} rows",
            c_true.nrows(),
            c_hat.nrows()
        )));
    }
    let q = linalg::orthonormal_columns(c_hat)?;
    let norm = linalg::frobenius(c_true);
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("true loadings are zero".into()));
    }
    let resid = c_true - &q * (q.transpose() * c_true);
    Ok((linalg::frobenius(&resid) / norm).clamp(0.0, 1.0))
}

/// Principal angles in degrees, ascending.
pub fn principal_angles(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Vec<f64>> {
    if u.ncols() == 0 || v.ncols() == 0 {
        return Err(Error::Dimension("zero-dimensional subspace".into()));
    }
    if u.nrows() != v.nrows() {
        return Err(Error::Dimension(format!("bases have {} and {} rows", u.nrows(), v.nrows())));
    }
    let qu = linalg::orthonormal_columns(u)?;
    let qv = linalg::orthonormal_columns(v)?;
    let sv = (qu.transpose() * qv).singular_values();
    let mut angles: Vec<f64> = sv
        .iter()
        .take(u.ncols().min(v.ncols()))
        .map(|s| s.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    // Singular values may come unsorted.
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

pub fn largest_principal_angle(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let angles = principal_angles(u, v)?;
    Ok(*angles.last().expect("nonempty"))
}

/// Where ground-truth covariances come from.
pub enum TruthSource<'a> {
    /// Model covariances of generating parameters.
    Model(&'a dyn LaggedCovariance),
    /// Empirical covariances of held-out, fully observed data.
    HeldOut(&'a MaskedTimeSeries),
}

/// Default cap on the number of evaluated pairs.
pub const MAX_EVAL_PAIRS: usize = 1_000_000;

/// Uniform sample of up to `max_pairs` pairs never observed together at lag `s`.
pub fn unobserved_pairs<R: Rng + ?Sized>(
    groups: &CooccurrenceGroups,
    s: usize,
    max_pairs: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let pairs = groups.sample_pairs(s, max_pairs, |c| c == 0, rng);
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(format!("no never-co-observed pairs at lag {s}")));
    }
    Ok(pairs)
}

/// Pearson correlation between predicted and true `Lambda(s)` on `pairs`.
pub fn prediction_correlation(
    model: &dyn LaggedCovariance,
    truth: &TruthSource<'_>,
    s: usize,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("empty pair sample".into()));
    }
    let pred = predicted_lagged_entries(model, s, pairs)?;
    let target = match truth {
        TruthSource::Model(m) => predicted_lagged_entries(*m, s, pairs)?,
        TruthSource::HeldOut(data) => {
            let groups = crate::observation::compute_cooccurrence_groups(&data.scheme, s);
            crate::observation::empirical_lagged_cov(data, &groups, s, pairs)?
        }
    };
    linalg::pearson(&pred, &target)
        .ok_or_else(|| Error::UndefinedMetric("zero variance in predicted or true covariances".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues of `Pi0`, descending.
    pub pi0_eigenvalues: Vec<f64>,
    /// Eigenvalue moduli of `A`, descending.
    pub a_moduli: Vec<f64>,
    /// `lambda_{k+1} / lambda_k` of `Pi0` for `k = 1..n-1`.
    pub pi0_ratios: Vec<f64>,
    /// 1-based `k` at which `pi0_ratios` is smallest (the elbow), searched
    /// only where `lambda_{k+1}` is above numerical rank.
    pub pi0_elbow: Option<usize>,
}

/// Eigenvalues below this fraction of the largest are treated as zero by the elbow search.
pub const ELBOW_RANK_TOL: f64 = 1e-10;

pub fn spectrum_report(pi0: &DMatrix<f64>, a: Option<&DMatrix<f64>>) -> SpectrumReport {
    let mut eig: Vec<f64> = linalg::symmetrize(pi0).symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    let mut moduli: Vec<f64> = a
        .map(|a| a.complex_eigenvalues().iter().map(|z| z.norm()).collect())
        .unwrap_or_default();
    moduli.sort_by(|x, y| y.total_cmp(x));
    let ratios: Vec<f64> = eig.windows(2).map(|w| if w[0] != 0.0 { w[1] / w[0] } else { f64::NAN }).collect();
    let floor = ELBOW_RANK_TOL * eig.first().copied().unwrap_or(0.0);
    let elbow = ratios
        .iter()
        .enumerate()
        .filter(|&(k, r)| r.is_finite() && eig[k + 1] > floor)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k + 1);
    SpectrumReport { pi0_eigenvalues: eig, a_moduli: moduli, pi0_ratios: ratios, pi0_elbow: elbow }
}

#[derive(Debug, Clone)]
pub struct FaFit {
    /// `q x n` loadings.
    pub c: DMatrix<f64>,
    /// Private variances.
    pub r: DVector<f64>,
    /// Log-likelihood before each update and after the last.
    pub loglik: Vec<f64>,
}

/// Gaussian log-likelihood of `N` samples with sample covariance `s` under
/// `C C^T + diag(r)`.
fn fa_loglik(s: &DMatrix<f64>, c: &DMatrix<f64>, r: &DVector<f64>, n_samples: usize) -> Result<f64> {
    let q = s.nrows();
    let mut sigma = c * c.transpose();
    for i in 0..q {
        sigma[(i, i)] += r[i];
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("factor-analysis covariance not positive definite".into()))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = chol.solve(s).trace();
    Ok(-0.5 * n_samples as f64 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + tr))
}

/// Factor analysis by EM on a fully observed block (`q x N`, one column per sample).
pub fn fa_em(block: &DMatrix<f64>, n: usize, iters: usize, seed: u64) -> Result<FaFit> {
    if iters < 1 {
        return Err(Error::InvalidConfig("factor analysis needs at least one iteration".into()));
    }
    let (q, m) = block.shape();
    if n == 0 || n > q || m < 2 {
        return Err(Error::Dimension(format!("factor analysis with n={n} on a {q}x{m} block")));
    }
    let mean = block.column_mean();
    let mut centered = block.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let s = &centered * centered.transpose() / m as f64;
    let var = s.diagonal();
    let floor = 1e-10 * var.max().max(f64::MIN_POSITIVE);
    let mut rng = crate::rng::substream(seed, crate::rng::Stream::Init);
    let mut c = linalg::gaussian_matrix(q, n, &mut rng);
    for i in 0..q {
        let scale = (var[i] / n as f64).sqrt();
        c.row_mut(i).scale_mut(scale);
    }
    let mut r = var.map(|v| (0.5 * v).max(floor));
    let eye = DMatrix::<f64>::identity(n, n);
    let mut loglik = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        loglik.push(fa_loglik(&s, &c, &r, m)?);
        // beta = (I + C^T R^-1 C)^-1 C^T R^-1
        let mut crinv = c.transpose();
        for i in 0..q {
            crinv.column_mut(i).scale_mut(1.0 / r[i]);
        }
        let inner = (&eye + &crinv * &c)
            .cholesky()
            .ok_or_else(|| Error::Numerical("factor-analysis posterior precision not positive definite".into()))?;
        let beta = inner.solve(&crinv);
        let sb = &s * beta.transpose();
        let ezz = &eye - &beta * &c + &beta * &sb;
        let c_new = linalg::lstsq(&ezz, &sb.transpose())?.transpose();
        let fit = &c_new * (&beta * &s);
        r = DVector::from_fn(q, |i, _| (s[(i, i)] - fit[(i, i)]).max(floor));
        c = c_new;
    }
    loglik.push(fa_loglik(&s, &c, &r, m)?);
    Ok(FaFit { c, r, loglik })
}

/// Align per-session loadings chained through consecutive overlaps.
///
/// `estimates[k] = (variables of session k, loadings rows for those variables)`.
/// Session `k` is mapped onto its neighbour towards `reference` by the least
/// squares base change on their shared rows. Rows seen by several sessions
/// are averaged after alignment.
pub fn posthoc_align(estimates: &[(Vec<usize>, DMatrix<f64>)], reference: usize, p: usize) -> Result<DMatrix<f64>> {
    if estimates.is_empty() || reference >= estimates.len() {
        return Err(Error::InvalidConfig("reference session out of range".into()));
    }
    let n = estimates[reference].1.ncols();
    for (k, (idx, c)) in estimates.iter().enumerate() {
        if c.nrows() != idx.len() || c.ncols() != n {
            return Err(Error::Dimension(format!("session {k} loadings do not match its index set")));
        }
        if idx.iter().any(|&i| i >= p) {
            return Err(Error::Dimension(format!("session {k} indexes a variable beyond p = {p}")));
        }
    }
    let mut aligned: Vec<Option<DMatrix<f64>>> = vec![None; estimates.len()];
    aligned[reference] = Some(estimates[reference].1.clone());
    let order: Vec<(usize, usize)> = (reference + 1..estimates.len())
        .map(|k| (k, k - 1))
        .chain((0..reference).rev().map(|k| (k, k + 1)))
        .collect();
    for (k, nb) in order {
        let (idx_k, c_k) = &estimates[k];
        let idx_nb = &estimates[nb].0;
        let c_nb = aligned[nb].as_ref().expect("neighbour aligned first");
        let shared: Vec<(usize, usize)> = idx_k
            .iter()
            .enumerate()
            .filter_map(|(a, i)| idx_nb.iter().position(|j| j == i).map(|b| (a, b)))
            .collect();
        let own = DMatrix::from_fn(shared.len(), n, |r, c| c_k[(shared[r].0, c)]);
        let target = DMatrix::from_fn(shared.len(), n, |r, c| c_nb[(shared[r].1, c)]);
        let rank = if shared.is_empty() { 0 } else { linalg::rank(&own, 1e-10) };
        if rank < n {
            return Err(Error::AlignmentUnderdetermined { a: nb, b: k, rank, n });
        }
        let m = linalg::lstsq(&own, &target)?;
        aligned[k] = Some(c_k * m);
    }
    let mut global = DMatrix::zeros(p, n);
    let mut count = vec![0usize; p];
    for ((idx, _), c) in estimates.iter().zip(&aligned) {
        let c = c.as_ref().expect("all sessions aligned");
        for (r, &i) in idx.iter().enumerate() {
            let mut row = global.row_mut(i);
            row += c.row(r);
            count[i] += 1;
        }
    }
    for (i, &k) in count.iter().enumerate() {
        if k > 1 {
            global.row_mut(i).scale_mut(1.0 / k as f64);
        }
    }
    Ok(global)
}

/// Outcome of aligning two models through their observability matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub rank_first: usize,
    pub rank_second: usize,
    pub n: usize,
    /// Base change with `O1 = O2 M^{-1}`, when both observability matrices have full rank.
    pub m: Option<DMatrix<f64>>,
    /// Residual `||A2 - M^{-1} A1 M||_F / ||A2||_F` of the recovered map.
    pub dynamics_residual: Option<f64>,
    /// Mean distance between sorted eigenvalues of `A1` and `A2`.
    pub eigenvalue_distance: f64,
}

/// `[C_J; C_J A; ...; C_J A^{n-1}]`.
pub fn observability_matrix(c: &DMatrix<f64>, a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let n = a.nrows();
    let j = rows.len();
    let cj = DMatrix::from_fn(j, n, |r, k| c[(rows[r], k)]);
    let mut out = DMatrix::zeros(j * n, n);
    let mut block = cj;
    for k in 0..n {
        out.rows_mut(k * j, j).copy_from(&block);
        block = &block * a;
    }
    out
}

/// Align latent coordinates of two models from the rows `J` they share.
///
/// `rows_first[k]` and `rows_second[k]` index the same variable in each model.
pub fn observability_alignment(
    (a1, c1): (&DMatrix<f64>, &DMatrix<f64>),
    (a2, c2): (&DMatrix<f64>, &DMatrix<f64>),
    rows_first: &[usize],
    rows_second: &[usize],
) -> Result<AlignmentReport> {
    let n = a1.nrows();
    if a2.nrows() != n || rows_first.len() != rows_second.len() {
        return Err(Error::Dimension("models or overlap index lists disagree in size".into()));
    }
    let eigenvalue_distance = eigen_distance(a1, a2);
    if rows_first.is_empty() {
        return Ok(AlignmentReport { rank_first: 0, rank_second: 0, n, m: None, dynamics_residual: None, eigenvalue_distance });
    }
    let o1 = observability_matrix(c1, a1, rows_first);
    let o2 = observability_matrix(c2, a2, rows_second);
    let rank_first = linalg::rank(&o1, 1e-10);
    let rank_second = linalg::rank(&o2, 1e-10);
    let (m, dynamics_residual) = if rank_first == n && rank_second == n {
        let minv = linalg::lstsq(&o2, &o1)?;
        let m = minv
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("alignment map is singular".into()))?;
        let resid = linalg::frobenius(&(a2 - &minv * a1 * &m)) / linalg::frobenius(a2).max(f64::MIN_POSITIVE);
        (Some(m), Some(resid))
    } else {
        (None, None)
    };
    Ok(AlignmentReport { rank_first, rank_second, n, m, dynamics_residual, eigenvalue_distance })
}

fn eigen_distance(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> f64 {
    let sorted = |a: &DMatrix<f64>| {
        let mut e: Vec<_> = a.complex_eigenvalues().iter().copied().collect();
        e.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
        e
    };
    let (e1, e2) = (sorted(a1), sorted(a2));
    if e1.is_empty() {
        return 0.0;
    }
    e1.iter().zip(&e2).map(|(x, y)| (x - y).norm()).sum::<f64>() / e1.len() as f64
}

/// Serializable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// `None` when no ground-truth loadings are available.
    pub projection_error: Option<f64>,
    /// Degrees.
    pub largest_principal_angle: Option<f64>,
    /// Lag `s` at index `s`; `None` when no never-co-observed pairs exist.
    pub prediction_correlation_per_lag: Vec<Option<f64>>,
    pub pairs_per_lag: Vec<usize>,
    pub spectra: SpectrumReport,
}
