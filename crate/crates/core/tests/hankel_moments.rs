mod common;

use common::*;
use lds_stitch::eval::{largest_principal_angle, subspace_projection_error};
use lds_stitch::linalg::gaussian_matrix;
use lds_stitch::model::{predicted_lagged_cov, LdsParams};
use lds_stitch::observation::{compute_cooccurrence_groups, empirical_lagged_cov, ObservationScheme};
use lds_stitch::s3id::{fit_moments, hankel_ssid, AdamConfig, Dynamics, LagTargets, S3idState};
use nalgebra::{DMatrix, DVector};

fn exact_lags(params: &LdsParams, max_lag: usize) -> Vec<DMatrix<f64>> {
    (0..=max_lag).map(|s| predicted_lagged_cov(params, s).unwrap()).collect()
}

fn dense_targets(lags: &[DMatrix<f64>]) -> Vec<LagTargets> {
    let p = lags[0].nrows();
    lags.iter()
        .enumerate()
        .map(|(s, m)| {
            let pairs: Vec<_> = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).collect();
            let values = pairs.iter().map(|&(i, j)| m[(i, j)]).collect();
            LagTargets { lag: s, pairs, values }
        })
        .collect()
}

#[test]
fn exact_hankel_has_rank_n() {
    let truth = random_params(10, 3, 1);
    let fit = hankel_ssid(&exact_lags(&truth, 8), 3, 4, 4).unwrap();
    let sv = &fit.singular_values;
    assert!(!fit.rank_deficient);
    assert!(sv[2] / sv[3] > 1e6, "sigma_3 / sigma_4 = {}", sv[2] / sv[3]);
}

#[test]
fn exact_covariances_are_recovered() {
    for seed in 0..5 {
        let truth = random_params(10, 3, 10 + seed);
        let lags = exact_lags(&truth, 8);
        let fit = hankel_ssid(&lags, 3, 4, 4).unwrap();
        let e = subspace_projection_error(&truth.c, &fit.params.c).unwrap();
        assert!(e < 1e-6, "seed {seed}: projection error {e}");
        for (s, lam) in lags.iter().enumerate().take(8) {
            let rebuilt = predicted_lagged_cov(&fit.params, s).unwrap();
            let rel = (&rebuilt - lam).norm() / lam.norm();
            assert!(rel < 1e-8, "seed {seed} lag {s}: relative error {rel}");
        }
    }
}

#[test]
fn rank_deficiency_is_flagged() {
    let truth = random_params(10, 2, 4);
    let fit = hankel_ssid(&exact_lags(&truth, 8), 3, 4, 4).unwrap();
    assert!(fit.rank_deficient);
}

#[test]
fn too_few_lags_is_rejected() {
    let truth = random_params(6, 2, 4);
    assert!(hankel_ssid(&exact_lags(&truth, 5), 2, 4, 4).is_err());
    assert!(hankel_ssid(&exact_lags(&truth, 8), 2, 1, 4).is_err());
}

#[test]
fn sample_covariances_give_close_subspace() {
    let truth = random_params(10, 3, 21);
    let t = 50_000;
    let data = simulated(&truth, ObservationScheme::full(10, t), 22);
    let pairs: Vec<_> = (0..10).flat_map(|i| (0..10).map(move |j| (i, j))).collect();
    let groups = compute_cooccurrence_groups(&data.scheme, 8);
    let lags: Vec<DMatrix<f64>> = (0..=8)
        .map(|s| {
            let v = empirical_lagged_cov(&data, &groups, s, &pairs).unwrap();
            DMatrix::from_row_slice(10, 10, &v)
        })
        .collect();
    let fit = hankel_ssid(&lags, 3, 4, 4).unwrap();
    let angle = largest_principal_angle(&truth.c, &fit.params.c).unwrap();
    assert!(angle < 5.0, "angle {angle}");
}

#[test]
fn moment_fit_converges_on_exact_covariances() {
    let truth = random_params(10, 3, 1);
    let lags = exact_lags(&truth, 7);
    let targets = dense_targets(&lags);
    let mut g = rng(5);
    let c = gaussian_matrix(10, 3, &mut g) / 3f64.sqrt();
    let r = DVector::from_fn(10, |i, _| 0.5 * lags[0][(i, i)]);
    let eye = DMatrix::identity(3, 3);
    let state = S3idState::new(c, r, Dynamics::Linear { a: &eye * 0.9, pi0: eye });
    let adam = AdamConfig { step_size: 1e-2, ..AdamConfig::default() };
    let fit = fit_moments(state, &targets, &[1.0; 8], &adam, 20_000).unwrap();
    let first = fit.trace.first().unwrap().monitor_loss;
    let last = fit.trace.last().unwrap().monitor_loss;
    assert!(last < 1e-3 * first, "loss {first} -> {last}");
    let e = subspace_projection_error(&truth.c, fit.fitted.c()).unwrap();
    assert!(e < 1e-2, "projection error {e}");
}
