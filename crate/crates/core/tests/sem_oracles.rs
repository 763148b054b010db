mod common;

use common::joint::*;
use common::*;
use lds_stitch::linalg::gaussian_matrix;
use lds_stitch::observation::{make_two_subset_scheme, ObservationScheme, Overlap, Segment};
use lds_stitch::sem::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn filter_and_smoother_match_joint_gaussian() {
    for seed in 0..10 {
        assert!(oracle_deviation(seed, ObservationScheme::full(3, 5)) < 1e-8);
        assert!(oracle_deviation(seed + 50, subset_scheme()) < 1e-8);
    }
}

#[test]
fn static_bayes_rule() {
    let r = 0.7;
    let m = SemModel {
        a: DMatrix::zeros(2, 2),
        c: DMatrix::identity(2, 2),
        q: DMatrix::identity(2, 2),
        r: DVector::from_element(2, r),
        d: DVector::zeros(2),
        v1: DMatrix::identity(2, 2),
    };
    let y = DMatrix::from_column_slice(2, 1, &[1.5, -2.0]);
    let obs = Observations::raw(&masked(&y, ObservationScheme::full(2, 1)));
    let f = kalman_filter_subset(&m, &obs, 0.0).unwrap();
    assert!((f.means.column(0) - y.column(0) / (1.0 + r)).abs().max() < 1e-14);
    assert!(max_abs(f.covs.at(0), &(DMatrix::identity(2, 2) * (r / (1.0 + r)))) < 1e-14);
    let s = kalman_smooth(&m, &f, 0.0).unwrap();
    assert_eq!(s.means, f.means);
    assert_eq!(s.covs.at(0), f.covs.at(0));
}

#[test]
fn missing_rows_equal_deleted_rows() {
    // Variable 2 missing on the second segment vs a model without that row there.
    let m = random_model(3, 2, 77);
    let mut g = rng(78);
    let y = gaussian_matrix(3, 6, &mut g);
    let scheme = ObservationScheme::new(
        3,
        6,
        vec![Segment { start: 0, end: 3, ranges: vec![0..3] }, Segment { start: 3, end: 6, ranges: vec![0..2] }],
    )
    .unwrap();
    let f = kalman_filter_subset(&m, &Observations::raw(&masked(&y, scheme.clone())), 0.0).unwrap();
    // Same data with variable 2 replaced by garbage where unobserved: nothing changes.
    let mut y2 = y.clone();
    for t in 3..6 {
        y2[(2, t)] = 1e6;
    }
    let mut obs2 = Observations::raw(&masked(&y, scheme));
    obs2.y.copy_from(&y2);
    let f2 = kalman_filter_subset(&m, &obs2, 0.0).unwrap();
    assert_eq!(f.means, f2.means);
    assert_eq!(f.loglik, f2.loglik);
    // Explicit deletion: a 2-variable model on the second segment's rows only.
    let mut tail = m.clone();
    tail.v1 = f.pred_covs.at(3).clone();
    tail.c = m.c.rows(0, 2).clone_owned();
    tail.r = m.r.rows(0, 2).clone_owned();
    tail.d = m.d.rows(0, 2).clone_owned();
    let ytail = y.view((0, 3), (2, 3)).clone_owned();
    let obs_tail = Observations::raw(&masked(&ytail, ObservationScheme::full(2, 3)));
    // Shift by the predicted mean: filter the residual process.
    let mut shifted = obs_tail.clone();
    let mut mp = f.pred_means.column(3).clone_owned();
    for k in 0..3 {
        let off = &tail.c * &mp;
        for i in 0..2 {
            shifted.y[(i, k)] -= off[i];
        }
        mp = &m.a * &mp;
    }
    let ft = kalman_filter_subset(&tail, &shifted, 0.0).unwrap();
    let mut mp = f.pred_means.column(3).clone_owned();
    for k in 0..3 {
        let expect = ft.means.column(k) + &mp;
        assert!((f.means.column(3 + k) - expect).abs().max() < 1e-10);
        assert!(max_abs(f.covs.at(3 + k), ft.covs.at(k)) < 1e-10);
        mp = &m.a * &mp;
    }
}

#[test]
fn noise_free_identity_system_tracks_data() {
    let n = 3;
    let m = SemModel {
        a: DMatrix::identity(n, n) * 0.5,
        c: DMatrix::identity(n, n),
        q: DMatrix::identity(n, n) * 1e-12,
        r: DVector::from_element(n, 1e-12),
        d: DVector::zeros(n),
        v1: DMatrix::identity(n, n),
    };
    // Data generated by the noiseless system itself.
    let x0 = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
    let y = DMatrix::from_fn(n, 8, |i, t| x0[i] * 0.5f64.powi(t as i32));
    let obs = Observations::raw(&masked(&y, ObservationScheme::full(n, 8)));
    let s = e_step(&m, &obs, 1e-9).unwrap();
    assert!((s.means - y).abs().max() < 1e-6);
}

#[test]
fn freezing_stores_few_covariances_and_preserves_likelihood() {
    let truth = random_params(20, 3, 8);
    let scheme = make_two_subset_scheme(20, Overlap::Count(6), 500, 500).unwrap();
    let data = simulated(&truth, scheme, 9);
    let obs = Observations::centered(&data);
    let m = SemModel::from_params(&truth);
    let exact = kalman_filter_subset(&m, &obs, 0.0).unwrap();
    let frozen = kalman_filter_subset(&m, &obs, 1e-9).unwrap();
    assert!(frozen.covs.distinct() < 200, "{} distinct covariances", frozen.covs.distinct());
    assert!((exact.loglik - frozen.loglik).abs() < 1e-6 * exact.loglik.abs());
    let se = kalman_smooth(&m, &exact, 0.0).unwrap();
    let sf = kalman_smooth(&m, &frozen, 1e-9).unwrap();
    assert!(sf.covs.distinct() < 400);
    assert!((se.means - sf.means).abs().max() < 1e-5);
}

#[test]
fn m_step_recovers_exact_regression() {
    // Posterior concentrated on the true latents, noise-free y = C x.
    let mut g = rng(12);
    let (p, n, t) = (6, 2, 30);
    let c = gaussian_matrix(p, n, &mut g);
    let x = gaussian_matrix(n, t, &mut g);
    let y = &c * &x;
    let obs = Observations { y, scheme: ObservationScheme::full(p, t) };
    let post = point_posterior(&x);
    let m = m_step(&obs, &post).unwrap();
    assert!((m.c - &c).abs().max() < 1e-10);
    assert!(m.d.abs().max() < 1e-10);
}

fn point_posterior(x: &DMatrix<f64>) -> SmoothedPosterior {
    let (n, t) = x.shape();
    SmoothedPosterior {
        means: x.clone(),
        covs: SharedCovs { mats: vec![DMatrix::zeros(n, n)], index: vec![0; t] },
        cross: SharedCovs { mats: vec![DMatrix::zeros(n, n)], index: vec![0; t - 1] },
        loglik: 0.0,
    }
}

#[test]
fn m_step_scalar_hand_calculation() {
    // p = n = 1, four points: y = [2, 0, 4, 2], E[x] = [1, 0, 2, 1], Var[x] = 0.5
    let y = DMatrix::from_row_slice(1, 4, &[2.0, 0.0, 4.0, 2.0]);
    let x = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 2.0, 1.0]);
    let mut post = point_posterior(&x);
    post.covs.mats[0][(0, 0)] = 0.5;
    let obs = Observations { y, scheme: ObservationScheme::full(1, 4) };
    let m = m_step(&obs, &post).unwrap();
    // sum y x = 12, sum y = 8, sum x = 4, sum (V + x^2) = 2 + 6 = 8
    // C = (12 - 8*4/4) / (8 - 16/4) = 4 / 4 = 1
    assert!((m.c[(0, 0)] - 1.0).abs() < 1e-14);
    assert!((m.d[0] - 1.0).abs() < 1e-14);
}

#[test]
fn m_step_groups_match_per_row_regression() {
    let truth = random_params(8, 2, 31);
    let scheme = make_two_subset_scheme(8, Overlap::Count(3), 40, 40).unwrap();
    let data = simulated(&truth, scheme.clone(), 32);
    let obs = Observations::centered(&data);
    let post = e_step(&SemModel::from_params(&truth), &obs, 0.0).unwrap();
    let m = m_step(&obs, &post).unwrap();
    for i in 0..8 {
        let times: Vec<usize> = (0..80).filter(|&t| scheme.is_observed(t, i)).collect();
        let nf = times.len() as f64;
        let mut sm = DVector::zeros(2);
        let mut sp = DMatrix::zeros(2, 2);
        let mut sym = DVector::zeros(2);
        let mut sy = 0.0;
        for &t in &times {
            sm += post.means.column(t);
            sp += post.second_moment(t);
            sym += post.means.column(t) * obs.y[(i, t)];
            sy += obs.y[(i, t)];
        }
        let lhs = (sym - &sm * (sy / nf)).transpose();
        let rhs = sp - &sm * sm.transpose() / nf;
        let ci = lhs * rhs.try_inverse().unwrap();
        assert!((ci - m.c.row(i)).abs().max() < 1e-10, "row {i}");
    }
}

#[test]
fn m_step_is_optimal_in_each_row() {
    // Expected complete-data log-likelihood term for variable i.
    let truth = random_params(6, 2, 41);
    let scheme = make_two_subset_scheme(6, Overlap::Count(2), 30, 30).unwrap();
    let data = simulated(&truth, scheme.clone(), 42);
    let obs = Observations::centered(&data);
    let post = e_step(&SemModel::from_params(&truth), &obs, 0.0).unwrap();
    let m = m_step(&obs, &post).unwrap();
    let q_i = |i: usize, c: &DVector<f64>, d: f64, r: f64| -> f64 {
        let mut acc = 0.0;
        for t in 0..60 {
            if scheme.is_observed(t, i) {
                let mt = post.means.column(t);
                let e = obs.y[(i, t)] - d - c.dot(&mt);
                let pc = post.covs.at(t) * c;
                acc += -0.5 * (r.ln() + (e * e + c.dot(&pc)) / r);
            }
        }
        acc
    };
    for i in 0..6 {
        let c = m.c.row(i).transpose();
        let base = q_i(i, &c, m.d[i], m.r[i]);
        for k in 0..2 {
            for h in [1e-4, -1e-4] {
                let mut cp = c.clone();
                cp[k] += h;
                assert!(q_i(i, &cp, m.d[i], m.r[i]) <= base + 1e-12);
            }
        }
        for h in [1e-4, -1e-4] {
            assert!(q_i(i, &c, m.d[i] + h, m.r[i]) <= base + 1e-12);
            assert!(q_i(i, &c, m.d[i], m.r[i] * (1.0 + h)) <= base + 1e-12);
        }
    }
}

#[test]
fn em_is_monotone_from_random_init() {
    let truth = random_params(50, 3, 51);
    let data = simulated(&truth, ObservationScheme::full(50, 400), 52);
    let mut cfg = SemConfig::new(3, 53);
    cfg.max_iters = 30;
    cfg.loglik_rel_tol = 0.0;
    cfg.restarts = 1;
    let fit = fit_sem(&data, &cfg, &SemInit::Random).unwrap();
    for w in fit.trace.windows(2) {
        assert!(w[1].loglik >= w[0].loglik - 1e-8 * w[0].loglik.abs(), "{:?}", w);
    }
}

#[test]
fn ground_truth_init_is_near_fixed_point() {
    let truth = random_params(30, 3, 61);
    let data = simulated(&truth, ObservationScheme::full(30, 3000), 62);
    let mut cfg = SemConfig::new(3, 63);
    cfg.max_iters = 11;
    cfg.loglik_rel_tol = 0.0;
    let obs = Observations::centered(&data);
    let fit = run_em(&obs, init_from_params(&truth), &cfg, true).unwrap();
    for w in fit.trace.windows(2) {
        assert!(w[1].loglik >= w[0].loglik - 1e-8 * w[0].loglik.abs());
    }
    // The first update lands at the finite-sample optimum; later ones barely move.
    let first = &fit.history[0].c;
    let last = &fit.history.last().unwrap().c;
    let moved = lds_stitch::eval::subspace_projection_error(first, last).unwrap();
    assert!(moved < 0.01, "moved {moved}");
}

#[test]
fn results_are_permutation_invariant() {
    let truth = random_params(7, 2, 71);
    let scheme = make_two_subset_scheme(7, Overlap::Count(3), 25, 25).unwrap();
    let (y, _) = lds_stitch::model::simulate(&truth, 50, 72).unwrap();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let scheme_p = scheme.permuted(&perm).unwrap();
    // New index perm[i] holds old variable i.
    let mut inv = [0usize; 7];
    for (i, &k) in perm.iter().enumerate() {
        inv[k] = i;
    }
    let yp = DMatrix::from_fn(7, 50, |k, t| y[(inv[k], t)]);
    let mut m = SemModel::from_params(&truth);
    m.d = DVector::from_fn(7, |i, _| 0.1 * i as f64);
    let mut mp = m.clone();
    mp.c = DMatrix::from_fn(7, 2, |k, j| m.c[(inv[k], j)]);
    mp.r = DVector::from_fn(7, |k, _| m.r[inv[k]]);
    mp.d = DVector::from_fn(7, |k, _| m.d[inv[k]]);
    let f = e_step(&m, &Observations::raw(&masked(&y, scheme)), 0.0).unwrap();
    let fp = e_step(&mp, &Observations::raw(&masked(&yp, scheme_p)), 0.0).unwrap();
    assert!((f.means - fp.means).abs().max() < 1e-10);
    assert!((f.loglik - fp.loglik).abs() < 1e-9 * f.loglik.abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn smoothed_covariances_are_symmetric_psd(seed in 0u64..500) {
        let m = random_model(4, 2, seed);
        let mut g = rng(seed + 1);
        let y = gaussian_matrix(4, 12, &mut g);
        let scheme = make_two_subset_scheme(4, Overlap::Count(2), 6, 6).unwrap();
        let s = e_step(&m, &Observations::raw(&masked(&y, scheme)), 1e-9).unwrap();
        for k in &s.covs.mats {
            prop_assert!((k - k.transpose()).abs().max() <= 1e-9);
            let min = k.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min >= -1e-9);
        }
    }
}


#[test]
fn likelihood_is_accurate_with_a_nearly_noiseless_channel() {
    let mut m = random_model(6, 2, 9);
    m.r[2] = 1e-8;
    let mut g = rng(77);
    let x = gaussian_matrix(2, 5, &mut g);
    let noise = gaussian_matrix(6, 5, &mut g);
    let mut y = &m.c * &x;
    for t in 0..5 {
        for i in 0..6 {
            y[(i, t)] += m.d[i] + m.r[i].sqrt() * noise[(i, t)];
        }
    }
    let scheme = ObservationScheme::full(6, 5);
    let obs = Observations::raw(&masked(&y, scheme.clone()));
    let reference = Joint::new(&m, &y, &scheme).loglik();
    for tol in [0.0, 1e-9] {
        let ll = kalman_filter_subset(&m, &obs, tol).unwrap().loglik;
        assert!(rel_err(ll, reference) < 1e-8, "{ll} vs {reference}");
    }
}
