mod common;

use wdlab::diagnostics::{
    c_hk, euler_identity_check, g_minus_slope, pseudo_rank_weights, rank1_check, zero_solution_diagnostic,
    ZeroSolutionStatus,
};
use wdlab::linalg::Matrix;
use wdlab::model::{predict, Activation, Architecture};
use wdlab::optimize::{init_params, Init};

fn g_minus(r: f64, lambda: f64, k: usize) -> f64 {
    let c = (k as f64).powf(-(k as f64) / 2.0);
    0.5 * lambda * r * r + common::logistic(c * r.powi(k as i32))
}

#[test]
fn radial_slope_matches_finite_differences() {
    for k in [2, 3, 4] {
        for r in [0.1, 0.8, 2.0, 5.0] {
            let h = 1e-6;
            let fd = (g_minus(r + h, 0.05, k) - g_minus(r - h, 0.05, k)) / (2.0 * h);
            assert!((g_minus_slope(r, 0.05, k) - fd).abs() < 1e-8, "K={k} r={r}");
        }
    }
}

/// A nonzero critical point exists iff λ ≤ max_r K c r^{K−2} / (1 + e^{c r^K}).
fn threshold_oracle(k: usize) -> f64 {
    let c = (k as f64).powf(-(k as f64) / 2.0);
    let phi = |r: f64| k as f64 * c * r.powi(k as i32 - 2) / (1.0 + (c * r.powi(k as i32)).exp());
    let (mut best_r, mut best) = (0.0, 0.0);
    for i in 1..200_000 {
        let r = i as f64 * 1e-4;
        if phi(r) > best {
            best = phi(r);
            best_r = r;
        }
    }
    // Golden-section refinement around the grid maximum.
    let (mut a, mut b) = (best_r - 1e-4, best_r + 1e-4);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let (x1, x2) = (b - g * (b - a), a + g * (b - a));
        if phi(x1) < phi(x2) {
            a = x1;
        } else {
            b = x2;
        }
    }
    phi(0.5 * (a + b))
}

#[test]
fn zero_solution_threshold_matches_direct_maximisation() {
    let want = threshold_oracle(3);
    let z = zero_solution_diagnostic(0.01, 3, 1).unwrap();
    assert_eq!(z.status, ZeroSolutionStatus::Applicable);
    assert!((z.threshold_estimate - want).abs() <= 1e-6 * want, "{} vs {want}", z.threshold_estimate);
    assert!(z.nonzero_critical_point);
    let above = zero_solution_diagnostic(want * 1.01, 3, 1).unwrap();
    assert!(!above.nonzero_critical_point);
    assert!(above.critical_radii.is_empty());
}

#[test]
fn each_critical_radius_zeroes_the_slope() {
    let z = zero_solution_diagnostic(0.05, 3, 1).unwrap();
    assert!(!z.critical_radii.is_empty());
    for &r in &z.critical_radii {
        assert!(g_minus_slope(r, 0.05, 3).abs() < 1e-9, "r = {r}");
    }
}

#[test]
fn pseudo_rank_weights_for_unit_degree() {
    // H = 1: every weight is 1/K, so C_{1,K} = 1.
    let arch = Architecture::new(3, vec![2, 2, 2], Activation::Relu).unwrap();
    let w = pseudo_rank_weights(&arch);
    assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!((c_hk(&arch) - 1.0).abs() < 1e-15);
    // H = 2, K = 2: layer factors 2 and 1, Z = 3, weights (2^{3/2}/3, 1/3).
    let arch2 = Architecture::new(3, vec![2], Activation::ReluPower { degree: 2 }).unwrap();
    let w2 = pseudo_rank_weights(&arch2);
    assert!((w2[0] - 2f64.powf(1.5) / 3.0).abs() < 1e-15 && (w2[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn euler_identity_matches_layer_scaling() {
    // Scaling W_k by (1 + s) scales f by (1 + s)^{H^{K−k}}; its derivative at
    // s = 0 is the trace the check compares against H^{K−k} f.
    for (act, h) in [(Activation::Relu, 1), (Activation::ReluPower { degree: 2 }, 2)] {
        let arch = Architecture::new(4, vec![3, 3], act).unwrap();
        let p = init_params(&arch, Init::Xavier, 6).unwrap();
        let x = vec![0.5, -0.5, 0.5, 0.5];
        let f = predict(&p, &arch, &x);
        for k in 0..2 {
            let mut q = p.clone();
            q.weights[k].scale(1.5);
            let want = 1.5f64.powi((h as i32).pow(2 - k as u32)) * f;
            assert!((predict(&q, &arch, &x) - want).abs() <= 1e-12 * want.abs().max(1e-12));
        }
        let res = euler_identity_check(&p, &arch, &x).unwrap();
        assert_eq!(res.len(), 3);
        assert!(res.iter().all(|&r| r < 1e-12), "{res:?}");
    }
}

#[test]
fn rank1_check_separates_rank_one_from_full_rank() {
    let p = wdlab::model::Params {
        weights: vec![Matrix::outer(&[1.0, 2.0], &[3.0, -1.0, 0.5]), Matrix::identity(2)],
        head: vec![1.0, 1.0],
    };
    let r = rank1_check(&p, 1e-4).unwrap();
    assert!(r.ratios[0] < 1e-12);
    assert!((r.ratios[1] - 1.0).abs() < 1e-12);
    assert!(!r.passes());
}
