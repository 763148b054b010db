#![allow(dead_code)]

pub mod gradcheck;
pub mod joint;

use lds_stitch::model::{generate_random_lds, simulate, LdsParams, SimConfig};
use lds_stitch::observation::{MaskedTimeSeries, ObservationScheme};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(p: usize, n: usize, seed: u64) -> LdsParams {
    let mut cfg = SimConfig::new(p, n, 100, seed);
    cfg.vonmises_kappa = Some(4.0);
    generate_random_lds(&cfg).unwrap()
}

pub fn simulated(params: &LdsParams, scheme: ObservationScheme, seed: u64) -> MaskedTimeSeries {
    let (y, _) = simulate(params, scheme.t, seed).unwrap();
    MaskedTimeSeries::from_full(&y, scheme).unwrap()
}

/// Dense moment-matching loss with `1/T^s` normalized targets over all
/// pairs with brute-force count above one.
pub fn dense_loss(
    y_centered: &DMatrix<f64>,
    scheme: &ObservationScheme,
    c: &DMatrix<f64>,
    r: &DVector<f64>,
    lags: &[DMatrix<f64>],
    weights: &[f64],
) -> f64 {
    let p = c.nrows();
    let t_len = y_centered.ncols();
    let mut total = 0.0;
    for (s, pi) in lags.iter().enumerate() {
        let lam = c * pi * c.transpose();
        for i in 0..p {
            for j in 0..p {
                let mut count = 0u64;
                let mut sum = 0.0;
                for t in 0..t_len - s {
                    if scheme.is_observed(t + s, i) && scheme.is_observed(t, j) {
                        count += 1;
                        sum += y_centered[(i, t + s)] * y_centered[(j, t)];
                    }
                }
                if count > 1 {
                    let mut pred = lam[(i, j)];
                    if s == 0 && i == j {
                        pred += r[i];
                    }
                    let e = pred - sum / count as f64;
                    total += 0.5 * weights[s] * e * e;
                }
            }
        }
    }
    total
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + h;
            let up = f(x);
            x[k] = orig - h;
            let down = f(x);
            x[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
