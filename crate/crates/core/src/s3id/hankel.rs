//! Classical Hankel-SVD subspace identification for fully observed covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::LdsParams;

#[derive(Debug, Clone)]
pub struct HankelFit {
    pub params: LdsParams,
    /// Singular values of the block Hankel matrix, descending.
    pub singular_values: Vec<f64>,
    /// Set when the `n`-th singular value is negligible relative to the first.
    pub rank_deficient: bool,
}

/// Identify `(A, C, Pi0, R)` from `lagged[s] = Lambda(s)`, `s = 0..K+L-1`.
///
/// The `pK x pL` Hankel matrix has block `(k, l)` (1-based) equal to
/// `Lambda(k + l - 1)`.
pub fn hankel_ssid(lagged: &[DMatrix<f64>], n: usize, k: usize, l: usize) -> Result<HankelFit> {
    if k < 2 || l < 1 {
        return Err(Error::InvalidConfig(format!("need K >= 2 and L >= 1, got K={k}, L={l}")));
    }
    if lagged.len() < k + l {
        return Err(Error::LagOutOfRange { lag: k + l - 1, max: lagged.len().saturating_sub(1) });
    }
    let p = lagged[0].nrows();
    if n == 0 || n > p * k.min(l) {
        return Err(Error::Dimension(format!("latent dimension {n} incompatible with p={p}, K={k}, L={l}")));
    }
    let mut h = DMatrix::zeros(p * k, p * l);
    for bk in 0..k {
        for bl in 0..l {
            h.view_mut((bk * p, bl * p), (p, p)).copy_from(&lagged[bk + bl + 1]);
        }
    }
    let svd = h.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let rank_deficient = sv[n - 1] <= 1e-10 * sv[0].max(f64::MIN_POSITIVE);
    if rank_deficient {
        log::warn!("Hankel matrix has effective rank below {n}: sigma_{n} = {:e}, sigma_1 = {:e}", sv[n - 1], sv[0]);
    }

    // Observability factor U_n S^{1/2}
    let mut obs = DMatrix::zeros(p * k, n);
    for (c, &i) in order.iter().take(n).enumerate() {
        obs.column_mut(c).copy_from(&(u.column(i) * svd.singular_values[i].sqrt()));
    }
    let c = obs.rows(0, p).clone_owned();
    let upper = obs.rows(0, p * (k - 1)).clone_owned();
    let lower = obs.rows(p, p * (k - 1)).clone_owned();
    let a = linalg::lstsq(&upper, &lower)?;

    // Lambda(k) = (O A)_k Pi0 C^T for k = 1..K
    let oa = &obs * &a;
    let mut stack = DMatrix::zeros(p * k, p);
    for bk in 0..k {
        stack.rows_mut(bk * p, p).copy_from(&lagged[bk + 1]);
    }
    let left = linalg::lstsq(&oa, &stack)?;
    let pi0 = linalg::lstsq(&c, &left.transpose())?.transpose();
    let pi0 = linalg::symmetrize(&pi0);

    let shared = &c * &pi0 * c.transpose();
    let r = DVector::from_fn(p, |i, _| (lagged[0][(i, i)] - shared[(i, i)]).max(0.0));
    let q = linalg::project_psd(&linalg::symmetrize(&(&pi0 - &a * &pi0 * a.transpose())), 0.0);
    Ok(HankelFit { params: LdsParams { a, c, q, r, pi0 }, singular_values: sv, rank_deficient })
}
