//! Latent linear-Gaussian dynamical system: parameters, predicted lagged
//! covariances and synthetic data generation.
//!
//! The generative model is
//!
//! ```text
//! x_{t+1} = A x_t + eta_t,   eta_t ~ N(0, Q)
//! y_t     = C x_t + eps_t,   eps_t ~ N(0, diag(R))
//! ```
//!
//! with `x_1 ~ N(0, Pi0)` and `Pi0` the stationary latent covariance. The
//! observed lagged covariance is `Lambda(s) = C Pi_s C^T + [s == 0] diag(R)`
//! where `Pi_s = Cov[x_{t+s}, x_t]`.

use std::borrow::Cow;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_matrix, gaussian_vector};
use crate::rng::{substream, Stream};

/// Above this many variables a dense `p x p` covariance is never materialized.
pub const MAX_DENSE_P: usize = 20_000;

/// Full parameter set of a latent LDS.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsParams {
    /// Latent dynamics, `n x n`.
    pub a: DMatrix<f64>,
    /// Emission / subspace map, `p x n`.
    pub c: DMatrix<f64>,
    /// Latent innovation covariance, `n x n`.
    pub q: DMatrix<f64>,
    /// Diagonal observation noise variances, length `p`.
    pub r: DVector<f64>,
    /// Stationary latent covariance, `n x n`.
    pub pi0: DMatrix<f64>,
}

impl LdsParams {
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Checks shapes, stability and the covariance invariants.
    pub fn validate(&self) -> Result<()> {
        let (p, n) = (self.c.nrows(), self.c.ncols());
        if self.a.shape() != (n, n) || self.q.shape() != (n, n) || self.pi0.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "A {:?}, Q {:?}, Pi0 {:?} must all be {n}x{n}",
                self.a.shape(),
                self.q.shape(),
                self.pi0.shape()
            )));
        }
        if self.r.len() != p {
            return Err(Error::Dimension(format!("R has length {}, expected {p}", self.r.len())));
        }
        if self.r.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidConfig("R entries must be nonnegative".into()));
        }
        let rho = linalg::spectral_radius(&self.a);
        if !(rho < 1.0) {
            return Err(Error::UnstableDynamics(format!("spectral radius {rho} >= 1")));
        }
        let asym = (&self.pi0 - self.pi0.transpose()).norm();
        if asym > 1e-10 * self.pi0.norm().max(1.0) {
            return Err(Error::InvalidConfig("Pi0 is not symmetric".into()));
        }
        Ok(())
    }

    /// `Pi_s = A^s Pi0` for `s = 0..=max_lag`.
    pub fn latent_moments(&self, max_lag: usize) -> LatentMoments {
        LatentMoments::linear(&self.a, &self.pi0, max_lag)
    }
}

/// Lagged latent covariances `Pi_0 .. Pi_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments {
    pub lags: Vec<DMatrix<f64>>,
}

impl LatentMoments {
    pub fn linear(a: &DMatrix<f64>, pi0: &DMatrix<f64>, max_lag: usize) -> Self {
        let mut lags = Vec::with_capacity(max_lag + 1);
        lags.push(pi0.clone());
        for s in 1..=max_lag {
            let next = a * &lags[s - 1];
            lags.push(next);
        }
        Self { lags }
    }

    pub fn max_lag(&self) -> usize {
        self.lags.len().saturating_sub(1)
    }

    pub fn n(&self) -> usize {
        self.lags.first().map_or(0, |m| m.nrows())
    }
}

/// Anything that can report `C`, `R` and the latent lag covariances.
pub trait LaggedCovariance {
    fn emission(&self) -> &DMatrix<f64>;
    fn noise(&self) -> &DVector<f64>;
    fn latent_lag(&self, s: usize) -> Result<Cow<'_, DMatrix<f64>>>;
}

impl LaggedCovariance for LdsParams {
    fn emission(&self) -> &DMatrix<f64> {
        &self.c
    }

    fn noise(&self) -> &DVector<f64> {
        &self.r
    }

    fn latent_lag(&self, s: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        Ok(Cow::Owned(linalg::matrix_power(&self.a, s) * &self.pi0))
    }
}

/// Dynamics-agnostic model: `C`, free latent moments and `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentModel {
    pub c: DMatrix<f64>,
    pub moments: LatentMoments,
    pub r: DVector<f64>,
}

impl MomentModel {
    pub fn from_params(params: &LdsParams, max_lag: usize) -> Self {
        Self {
            c: params.c.clone(),
            moments: params.latent_moments(max_lag),
            r: params.r.clone(),
        }
    }
}

impl LaggedCovariance for MomentModel {
    fn emission(&self) -> &DMatrix<f64> {
        &self.c
    }

    fn noise(&self) -> &DVector<f64> {
        &self.r
    }

    fn latent_lag(&self, s: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        self.moments
            .lags
            .get(s)
            .map(Cow::Borrowed)
            .ok_or(Error::LagOutOfRange { lag: s, max: self.moments.max_lag() })
    }
}

/// Dense `Lambda(s)`; refused above [`MAX_DENSE_P`] variables.
pub fn predicted_lagged_cov<M: LaggedCovariance + ?Sized>(model: &M, s: usize) -> Result<DMatrix<f64>> {
    let c = model.emission();
    let p = c.nrows();
    if p > MAX_DENSE_P {
        return Err(Error::InvalidConfig(format!(
            "refusing to materialize a dense {p}x{p} covariance; request entries instead"
        )));
    }
    let pi = model.latent_lag(s)?;
    let mut out = c * pi.as_ref() * c.transpose();
    if s == 0 {
        for (i, r) in model.noise().iter().enumerate() {
            out[(i, i)] += r;
        }
    }
    Ok(out)
}

/// Selected entries `Lambda(s)_{ij}` without forming the full matrix.
pub fn predicted_lagged_entries<M: LaggedCovariance + ?Sized>(
    model: &M,
    s: usize,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let c = model.emission();
    let pi = model.latent_lag(s)?;
    let r = model.noise();
    // C Pi_s computed once; each entry is then a length-n dot product.
    let cp = c * pi.as_ref();
    Ok(pairs
        .iter()
        .map(|&(i, j)| {
            let mut v = cp.row(i).dot(&c.row(j));
            if s == 0 && i == j {
                v += r[i];
            }
            v
        })
        .collect())
}

fn default_range() -> (f64, f64) {
    (0.9, 0.99)
}
fn default_kappa() -> Option<f64> {
    Some(1000.0)
}
fn default_noise_fraction() -> f64 {
    0.5
}

/// Simulation protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(default = "default_range")]
    pub eig_modulus_range: (f64, f64),
    /// Von Mises concentration of eigenvalue angles; `None` gives zero angles
    /// (all eigenvalues real).
    #[serde(default = "default_kappa")]
    pub vonmises_kappa: Option<f64>,
    #[serde(default = "default_noise_fraction")]
    pub private_noise_fraction: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(p: usize, n: usize, t: usize, seed: u64) -> Self {
        Self {
            p,
            n,
            t,
            eig_modulus_range: default_range(),
            vonmises_kappa: default_kappa(),
            private_noise_fraction: default_noise_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.p {
            return Err(Error::InvalidConfig(format!("need 0 < n <= p, got n={} p={}", self.n, self.p)));
        }
        let (lo, hi) = self.eig_modulus_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eigenvalue modulus range [{lo}, {hi}] must lie inside (0, 1)"
            )));
        }
        if let Some(k) = self.vonmises_kappa {
            if !(k > 0.0) {
                return Err(Error::InvalidConfig(format!("von Mises kappa must be positive, got {k}")));
            }
        }
        let f = self.private_noise_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!("private noise fraction {f} outside (0, 1)")));
        }
        Ok(())
    }
}

/// Von Mises sample with zero mean (Best & Fisher rejection sampler).
pub fn sample_von_mises<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { theta } else { -theta };
        }
    }
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => vec![],
        1 => vec![hi],
        _ => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
    }
}

/// Real block-diagonal matrix with the requested spectrum.
///
/// With a concentration, eigenvalues come in conjugate pairs `r e^{+-i theta}`
/// (one 2x2 rotation-scaling block per pair) whose moduli span the range; an
/// odd dimension adds one real eigenvalue at the middle modulus. Without a
/// concentration all `n` eigenvalues are real and span the range.
fn spectral_blocks<R: Rng + ?Sized>(
    n: usize,
    range: (f64, f64),
    kappa: Option<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let (lo, hi) = range;
    let mut b = DMatrix::zeros(n, n);
    match kappa {
        None => {
            for (k, m) in linspace(lo, hi, n).into_iter().enumerate() {
                b[(k, k)] = m;
            }
        }
        Some(kappa) => {
            let pairs = n / 2;
            for (k, m) in linspace(lo, hi, pairs).into_iter().enumerate() {
                let theta = sample_von_mises(kappa, rng);
                let (s, c) = theta.sin_cos();
                let i = 2 * k;
                b[(i, i)] = m * c;
                b[(i, i + 1)] = -m * s;
                b[(i + 1, i)] = m * s;
                b[(i + 1, i + 1)] = m * c;
            }
            if n % 2 == 1 {
                b[(n - 1, n - 1)] = 0.5 * (lo + hi);
            }
        }
    }
    b
}

/// Draws a random stable LDS following the simulation protocol.
pub fn generate_random_lds(cfg: &SimConfig) -> Result<LdsParams> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, Stream::Sim);
    let n = cfg.n;
    let blocks = spectral_blocks(n, cfg.eig_modulus_range, cfg.vonmises_kappa, &mut rng);

    // Similarity transform U diag(sigma) V^T with singular values in [1, 10].
    let u = linalg::random_orthogonal(n, &mut rng);
    let v = linalg::random_orthogonal(n, &mut rng);
    let sigma: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random::<f64>())).collect();
    let s = &u * DMatrix::from_diagonal(&DVector::from_vec(sigma.clone())) * v.transpose();
    let s_inv = &v * DMatrix::from_diagonal(&DVector::from_iterator(n, sigma.iter().map(|x| 1.0 / x)))
        * u.transpose();
    let a = &s * blocks * s_inv;

    let q = DMatrix::identity(n, n);
    let pi0 = solve_stationary_covariance(&a, &q)?;

    let mut c = gaussian_matrix(cfg.p, n, &mut rng);
    let f = cfg.private_noise_fraction;
    let mut r = DVector::zeros(cfg.p);
    // Unit total variance per variable: shared part 1 - f, private part f.
    for i in 0..cfg.p {
        let shared = (c.row(i) * &pi0 * c.row(i).transpose())[(0, 0)];
        let scale = ((1.0 - f) / shared).sqrt();
        c.row_mut(i).scale_mut(scale);
        r[i] = f;
    }
    Ok(LdsParams { a, c, q, r, pi0 })
}

/// Stationary covariance `Pi = A Pi A^T + Q` by the doubling iteration.
pub fn solve_stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "A {:?} and Q {:?} must be square of equal size",
            a.shape(),
            q.shape()
        )));
    }
    let rho = linalg::spectral_radius(a);
    if !(rho < 1.0) {
        return Err(Error::UnstableDynamics(format!("spectral radius {rho} >= 1")));
    }
    let tol = 1e-10 * q.norm().max(1.0);
    let residual = |pi: &DMatrix<f64>| (pi - a * pi * a.transpose() - q).norm();

    let mut pi = linalg::symmetrize(q);
    let mut ak = a.clone();
    for _ in 0..200 {
        if residual(&pi) <= tol {
            return Ok(pi);
        }
        let next = &pi + &ak * &pi * ak.transpose();
        pi = next;
        linalg::symmetrize_mut(&mut pi);
        ak = &ak * &ak;
        if ak.norm() < f64::EPSILON * 1e-3 {
            // Doubling has converged; polish with fixed-point sweeps.
            for _ in 0..20 {
                if residual(&pi) <= tol {
                    return Ok(pi);
                }
                pi = a * &pi * a.transpose() + q;
                linalg::symmetrize_mut(&mut pi);
            }
        }
    }
    if residual(&pi) <= tol {
        return Ok(pi);
    }
    Err(Error::UnstableDynamics(format!(
        "stationary covariance did not converge (residual {:.3e})",
        residual(&pi)
    )))
}

/// Sample paths from the model. Column `t` of the returned matrices holds
/// `y_t` (`p x T`) and `x_t` (`n x T`).
pub fn simulate(params: &LdsParams, t_len: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if t_len < 2 {
        return Err(Error::InvalidConfig(format!("need T >= 2, got {t_len}")));
    }
    let (p, n) = (params.p(), params.n());
    let mut rng = substream(seed, Stream::Noise);
    let chol_pi = cholesky_factor(&params.pi0, "Pi0")?;
    let chol_q = cholesky_factor(&params.q, "Q")?;
    let noise_sd: Vec<f64> = params.r.iter().map(|r| r.max(0.0).sqrt()).collect();

    let mut x = DMatrix::zeros(n, t_len);
    let mut y = DMatrix::zeros(p, t_len);
    let mut state = &chol_pi * gaussian_vector(n, &mut rng);
    for t in 0..t_len {
        if t > 0 {
            state = &params.a * &state + &chol_q * gaussian_vector(n, &mut rng);
        }
        x.set_column(t, &state);
        let mut col = &params.c * &state;
        for (i, v) in col.iter_mut().enumerate() {
            if noise_sd[i] > 0.0 {
                *v += noise_sd[i] * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        y.set_column(t, &col);
    }
    Ok((y, x))
}

/// Lower factor `L` with `L L^T = m`, tolerating PSD (rank-deficient) input.
fn cholesky_factor(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = linalg::symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * m.norm().max(1.0)) {
        return Err(Error::InvalidConfig(format!("{name} is not positive semidefinite")));
    }
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sq))
}
