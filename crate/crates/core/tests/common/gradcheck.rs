use lds_stitch::linalg::gaussian_matrix;
use lds_stitch::model::LatentMoments;
use lds_stitch::observation::{make_two_subset_scheme, ObservationScheme, Overlap};
use lds_stitch::s3id::{grad_batch, grad_linear_mode, Prepared};
use nalgebra::{DMatrix, DVector};

use super::{central_diff, dense_loss, random_params, rel_err, rng, simulated};

pub struct Instance {
    pub prep: Prepared,
    pub c: DMatrix<f64>,
    pub r: DVector<f64>,
    pub a: DMatrix<f64>,
    pub pi0: DMatrix<f64>,
    pub free_lags: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
}

pub fn instance(seed: u64, two_subset: bool) -> Instance {
    let (p, n, s_max, t) = (6, 2, 2, 40);
    let truth = random_params(p, n, seed);
    let scheme = if two_subset {
        make_two_subset_scheme(p, Overlap::Count(2), t / 2, t / 2).unwrap()
    } else {
        ObservationScheme::full(p, t)
    };
    let data = simulated(&truth, scheme, seed + 1);
    let prep = Prepared::new(&data, s_max).unwrap();
    let mut g = rng(seed + 2);
    let c = gaussian_matrix(p, n, &mut g);
    let r = DVector::from_fn(p, |i, _| 0.2 + 0.1 * i as f64);
    let a = gaussian_matrix(n, n, &mut g) * 0.4;
    let b = gaussian_matrix(n, n, &mut g);
    let pi0 = &b * b.transpose() + DMatrix::identity(n, n);
    // Free lags are generic (not symmetric, not tied to any A).
    let free_lags = (0..=s_max).map(|_| gaussian_matrix(n, n, &mut g)).collect();
    Instance { prep, c, r, a, pi0, free_lags, weights: vec![1.0, 0.7, 1.3] }
}

pub fn full_gradient(inst: &Instance, lags: &[DMatrix<f64>]) -> lds_stitch::s3id::Gradients {
    grad_batch(&inst.prep, &inst.c, &inst.r, lags, &inst.weights, &inst.prep.all_pairs())
}

fn dense(inst: &Instance, c: &DMatrix<f64>, r: &DVector<f64>, lags: &[DMatrix<f64>]) -> f64 {
    dense_loss(&inst.prep.y, &inst.prep.groups.scheme, c, r, lags, &inst.weights)
}

/// Largest coordinate-wise relative error between two gradients.
pub fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max)
}

/// Worst relative error of the free-lag gradients against central differences.
pub fn nonlinear_error(seed: u64, two_subset: bool) -> f64 {
    let inst = instance(seed, two_subset);
    let g = full_gradient(&inst, &inst.free_lags);
    let h = 1e-5;
    let mut err = 0.0f64;

    let mut c = inst.c.clone();
    let (p, n) = c.shape();
    let num = central_diff(c.as_mut_slice(), h, |x| {
        dense(&inst, &DMatrix::from_column_slice(p, n, x), &inst.r, &inst.free_lags)
    });
    err = err.max(worst(g.c.as_slice(), &num));

    let mut r = inst.r.clone();
    let num = central_diff(r.as_mut_slice(), h, |x| {
        dense(&inst, &inst.c, &DVector::from_column_slice(x), &inst.free_lags)
    });
    err = err.max(worst(g.r.as_slice(), &num));

    for s in 0..inst.free_lags.len() {
        let mut pi = inst.free_lags[s].clone();
        let num = central_diff(pi.as_mut_slice(), h, |x| {
            let mut lags = inst.free_lags.clone();
            lags[s] = DMatrix::from_column_slice(n, n, x);
            dense(&inst, &inst.c, &inst.r, &lags)
        });
        err = err.max(worst(g.lags[s].as_slice(), &num));
    }
    err
}

/// Worst relative error of the linear-mode gradients against central differences.
pub fn linear_error(seed: u64, two_subset: bool) -> f64 {
    let inst = instance(seed, two_subset);
    let s_max = inst.weights.len() - 1;
    let n = inst.a.nrows();
    let lags = LatentMoments::linear(&inst.a, &inst.pi0, s_max).lags;
    let g = full_gradient(&inst, &lags);
    let (ga, gpi0) = grad_linear_mode(&inst.a, &inst.pi0, &g.lags);
    let h = 1e-5;

    let mut a = inst.a.clone();
    let num = central_diff(a.as_mut_slice(), h, |x| {
        let lags = LatentMoments::linear(&DMatrix::from_column_slice(n, n, x), &inst.pi0, s_max).lags;
        dense(&inst, &inst.c, &inst.r, &lags)
    });
    let mut err = worst(ga.as_slice(), &num);

    // Symmetric perturbations of Pi0: d/dPi0_{kl} along E_kl + E_lk.
    for k in 0..n {
        for l in 0..n {
            let f = |eps: f64| {
                let mut pi0 = inst.pi0.clone();
                pi0[(k, l)] += eps;
                if k != l {
                    pi0[(l, k)] += eps;
                }
                dense(&inst, &inst.c, &inst.r, &LatentMoments::linear(&inst.a, &pi0, s_max).lags)
            };
            let num = (f(h) - f(-h)) / (2.0 * h);
            let analytic = if k == l { gpi0[(k, l)] } else { 2.0 * gpi0[(k, l)] };
            err = err.max(rel_err(analytic, num));
        }
    }
    err
}
