use lds_stitch::linalg::{gaussian_matrix, gaussian_vector};
use lds_stitch::observation::{MaskedTimeSeries, ObservationScheme, Segment};
use lds_stitch::sem::{kalman_filter_subset, kalman_smooth, Observations, SemModel};
use nalgebra::{DMatrix, DVector};

use super::rng;

pub fn random_model(p: usize, n: usize, seed: u64) -> SemModel {
    let mut g = rng(seed);
    let a = gaussian_matrix(n, n, &mut g) * 0.4;
    let b = gaussian_matrix(n, n, &mut g);
    let q = &b * b.transpose() * 0.3 + DMatrix::identity(n, n) * 0.2;
    let v = gaussian_matrix(n, n, &mut g);
    let v1 = &v * v.transpose() + DMatrix::identity(n, n) * 0.5;
    let c = gaussian_matrix(p, n, &mut g);
    let r = DVector::from_fn(p, |i, _| 0.3 + 0.2 * i as f64);
    let d = gaussian_vector(p, &mut g) * 0.5;
    SemModel { a, c, q, r, d, v1 }
}

pub fn subset_scheme() -> ObservationScheme {
    ObservationScheme::new(
        3,
        5,
        vec![
            Segment { start: 0, end: 2, ranges: vec![0..3] },
            Segment { start: 2, end: 4, ranges: vec![1..3] },
            Segment { start: 4, end: 5, ranges: vec![0..1] },
        ],
    )
    .unwrap()
}

pub fn masked(y: &DMatrix<f64>, scheme: ObservationScheme) -> MaskedTimeSeries {
    MaskedTimeSeries::from_full(y, scheme).unwrap()
}

/// Brute-force conditioning of the stacked latent path on observed entries.
pub struct Joint {
    pub n: usize,
    sigma_x: DMatrix<f64>,
    obs: Vec<(usize, usize)>,
    cov_xy: DMatrix<f64>,
    cov_yy: DMatrix<f64>,
    yvec: DVector<f64>,
}

impl Joint {
    pub fn new(m: &SemModel, y: &DMatrix<f64>, scheme: &ObservationScheme) -> Self {
        let n = m.n();
        let t_len = scheme.t;
        let mut diag = vec![m.v1.clone()];
        for t in 1..t_len {
            let next = &m.a * &diag[t - 1] * m.a.transpose() + &m.q;
            diag.push(next);
        }
        let mut sigma_x = DMatrix::zeros(n * t_len, n * t_len);
        for t in 0..t_len {
            for u in 0..=t {
                let blk = lds_stitch::linalg::matrix_power(&m.a, t - u) * &diag[u];
                sigma_x.view_mut((t * n, u * n), (n, n)).copy_from(&blk);
                sigma_x.view_mut((u * n, t * n), (n, n)).copy_from(&blk.transpose());
            }
        }
        let obs: Vec<(usize, usize)> = (0..t_len)
            .flat_map(|t| (0..scheme.p).filter(move |&i| scheme.is_observed(t, i)).map(move |i| (t, i)))
            .collect();
        let k = obs.len();
        let mut cov_xy = DMatrix::zeros(n * t_len, k);
        for (b, &(u, j)) in obs.iter().enumerate() {
            let col = sigma_x.columns(u * n, n) * m.c.row(j).transpose();
            cov_xy.set_column(b, &col);
        }
        let mut cov_yy = DMatrix::zeros(k, k);
        for (a, &(t, i)) in obs.iter().enumerate() {
            for (b, &(u, j)) in obs.iter().enumerate() {
                let blk = sigma_x.view((t * n, u * n), (n, n));
                let mut v = (m.c.row(i) * blk * m.c.row(j).transpose())[(0, 0)];
                if a == b {
                    v += m.r[i];
                }
                cov_yy[(a, b)] = v;
            }
        }
        let yvec = DVector::from_iterator(k, obs.iter().map(|&(t, i)| y[(i, t)] - m.d[i]));
        Self { n, sigma_x, obs, cov_xy, cov_yy, yvec }
    }

    /// Posterior mean and covariance of the stacked path given observations up to `t_max`.
    pub fn condition(&self, t_max: usize) -> (DVector<f64>, DMatrix<f64>) {
        let sel: Vec<usize> = (0..self.obs.len()).filter(|&b| self.obs[b].0 <= t_max).collect();
        let syy = DMatrix::from_fn(sel.len(), sel.len(), |a, b| self.cov_yy[(sel[a], sel[b])]);
        let sxy = DMatrix::from_fn(self.sigma_x.nrows(), sel.len(), |r, b| self.cov_xy[(r, sel[b])]);
        let yv = DVector::from_iterator(sel.len(), sel.iter().map(|&b| self.yvec[b]));
        let inv = syy.try_inverse().unwrap();
        let mean = &sxy * &inv * yv;
        let cov = &self.sigma_x - &sxy * inv * sxy.transpose();
        (mean, cov)
    }

    pub fn loglik(&self) -> f64 {
        let k = self.yvec.len() as f64;
        let chol = self.cov_yy.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + logdet + self.yvec.dot(&chol.solve(&self.yvec)))
    }
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Largest deviation of filter and smoother moments and the log-likelihood
/// from brute-force conditioning, with and without covariance freezing.
pub fn oracle_deviation(seed: u64, scheme: ObservationScheme) -> f64 {
    let m = random_model(3, 2, seed);
    let mut g = rng(seed + 1000);
    let y = gaussian_matrix(3, 5, &mut g) * 2.0;
    let obs = Observations::raw(&masked(&y, scheme.clone()));
    let joint = Joint::new(&m, &y, &scheme);
    let n = joint.n;
    let mut dev = 0.0f64;
    for tol in [0.0, 1e-9] {
        let f = kalman_filter_subset(&m, &obs, tol).unwrap();
        for t in 0..5 {
            let (mean, cov) = joint.condition(t);
            dev = dev.max((f.means.column(t) - mean.rows(t * n, n)).abs().max());
            dev = dev.max(max_abs(f.covs.at(t), &cov.view((t * n, t * n), (n, n)).clone_owned()));
        }
        dev = dev.max((f.loglik - joint.loglik()).abs());
        let s = kalman_smooth(&m, &f, tol).unwrap();
        let (mean, cov) = joint.condition(4);
        for t in 0..5 {
            dev = dev.max((s.means.column(t) - mean.rows(t * n, n)).abs().max());
            dev = dev.max(max_abs(s.covs.at(t), &cov.view((t * n, t * n), (n, n)).clone_owned()));
            if t > 0 {
                dev = dev.max(max_abs(s.cross.at(t - 1), &cov.view((t * n, (t - 1) * n), (n, n)).clone_owned()));
            }
        }
    }
    dev
}
