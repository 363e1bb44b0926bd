mod common;

use common::rng;
use partfield::mat::Mat;
use partfield::policy::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(r)).collect())
}

fn random_schedule(r: &mut impl Rng) -> NoiseSchedule {
    let steps = r.random_range(1..=120);
    let lo = r.random_range(1e-5..0.05);
    let hi = r.random_range(lo..0.5);
    let kind = if r.random_bool(0.5) { ScheduleKind::Linear } else { ScheduleKind::Cosine };
    make_schedule(steps, kind, lo, hi).unwrap()
}

/// Independent products, recomputed from `γ` alone.
fn oracle_beta_bar(s: &NoiseSchedule, k: usize) -> f64 {
    (1..=k).map(|j| 1.0 - s.gamma(j)).product()
}

#[test]
fn linear_gamma_endpoints_and_monotone_retention() {
    let s = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    assert_eq!(s.steps(), 100);
    assert!((s.gamma(1) - 1e-4).abs() < 1e-15);
    assert!((s.gamma(100) - 0.02).abs() < 1e-15);
    for k in 1..100 {
        assert!(s.beta_bar(k + 1) < s.beta_bar(k));
        assert!((s.gamma(k + 1) - s.gamma(k) - (0.02 - 1e-4) / 99.0).abs() < 1e-15);
    }
    assert_eq!(s.beta_bar(0), 1.0);
}

#[test]
fn cumulative_quantities_match_direct_products() {
    let mut r = rng(1);
    for _ in 0..50 {
        let s = random_schedule(&mut r);
        for k in 0..=s.steps() {
            let bb = oracle_beta_bar(&s, k);
            assert!((s.beta_bar(k) - bb).abs() < 1e-13);
            assert!((s.one_minus_beta_bar(k) - (1.0 - bb)).abs() < 1e-13);
        }
    }
}

#[test]
fn invariants_hold_for_several_lengths() {
    for steps in [1, 10, 100] {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(steps, kind, 1e-3, 0.2).unwrap();
            for k in 1..=steps {
                assert!(s.gamma(k) > 0.0 && s.gamma(k) < 1.0);
                assert_eq!(s.beta(k), 1.0 - s.gamma(k));
                assert!(s.beta_bar(k) > 0.0 && s.beta_bar(k) < s.beta_bar(k - 1));
                let tau = s.posterior_tau(k);
                assert!(tau >= 0.0 && tau <= s.gamma(k).sqrt() + 1e-15);
            }
            assert_eq!(s.posterior_tau(1), 0.0);
        }
    }
}

#[test]
fn forward_noise_matches_scalar_formula() {
    let mut r = rng(2);
    let s = make_schedule(50, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    let a0 = gaussian(&mut r, 16, 4);
    let eps = gaussian(&mut r, 16, 4);
    for k in [1, 7, 50] {
        let bb = oracle_beta_bar(&s, k);
        let out = forward_noise(&a0, k, &eps, &s).unwrap();
        for i in 0..a0.as_slice().len() {
            let want = bb.sqrt() * a0.as_slice()[i] + (1.0 - bb).sqrt() * eps.as_slice()[i];
            assert!((out.as_slice()[i] - want).abs() <= 1e-15 * (1.0 + want.abs()) * 4.0);
        }
    }
}

#[test]
fn ddim_step_matches_scalar_formula() {
    let mut r = rng(3);
    let s = make_schedule(30, ScheduleKind::Cosine, 1e-3, 0.2).unwrap();
    let a_k = gaussian(&mut r, 5, 4);
    let x0 = gaussian(&mut r, 5, 4);
    let v = gaussian(&mut r, 5, 4);
    for k in [2, 15, 30] {
        let tau = 0.3;
        let bb = oracle_beta_bar(&s, k);
        let bb_prev = oracle_beta_bar(&s, k - 1);
        let g = s.gamma(k);
        let c0 = bb_prev.sqrt() * g / (1.0 - bb);
        let ck = (1.0 - g).sqrt() * (1.0 - bb_prev) / (1.0 - bb);
        let out = ddim_step(&a_k, &x0, k, &s, tau, &v).unwrap();
        for i in 0..a_k.as_slice().len() {
            let want = c0 * x0.as_slice()[i] + ck * a_k.as_slice()[i] + tau * v.as_slice()[i];
            assert!((out.as_slice()[i] - want).abs() <= 1e-14);
        }
    }
}

#[test]
fn first_step_returns_the_prediction_exactly() {
    let mut r = rng(4);
    for _ in 0..20 {
        let s = random_schedule(&mut r);
        assert_eq!(s.step_coefficients(1), (1.0, 0.0));
        let a1 = gaussian(&mut r, 3, 4);
        let x0 = gaussian(&mut r, 3, 4);
        let out = ddim_step(&a1, &x0, 1, &s, 0.0, &Mat::zeros(0, 0)).unwrap();
        assert_eq!(out, x0);
    }
}

#[test]
fn noiseless_path_stays_on_the_signal_trajectory() {
    let mut r = rng(5);
    for _ in 0..50 {
        let s = random_schedule(&mut r);
        let a0 = gaussian(&mut r, 4, 4);
        let mut a = forward_noise(&a0, s.steps(), &Mat::zeros(4, 4), &s).unwrap();
        for k in (1..=s.steps()).rev() {
            a = ddim_step(&a, &a0, k, &s, 0.0, &Mat::zeros(0, 0)).unwrap();
            let scale = oracle_beta_bar(&s, k - 1).sqrt();
            for (x, y) in a.as_slice().iter().zip(a0.as_slice()) {
                assert!((x - scale * y).abs() < 1e-12, "k={k}");
            }
        }
    }
}

#[test]
fn forward_then_denoise_with_oracle_prediction_recovers_clean_actions() {
    let mut r = rng(6);
    let s = make_schedule(50, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    for _ in 0..10 {
        let a0 = gaussian(&mut r, 16, 4);
        let mut a = forward_noise(&a0, 50, &gaussian(&mut r, 16, 4), &s).unwrap();
        for k in (1..=50).rev() {
            let v = gaussian(&mut r, 16, 4);
            a = ddim_step(&a, &a0, k, &s, s.posterior_tau(k), &v).unwrap();
        }
        for (x, y) in a.as_slice().iter().zip(a0.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn posterior_step_preserves_marginal_noise_variance() {
    let mut r = rng(7);
    for _ in 0..50 {
        let s = random_schedule(&mut r);
        for k in 1..=s.steps() {
            let (_, ck) = s.step_coefficients(k);
            let tau = s.posterior_tau(k);
            let lhs = ck * ck * s.one_minus_beta_bar(k) + tau * tau;
            assert!((lhs - s.one_minus_beta_bar(k - 1)).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_arguments_are_rejected() {
    assert!(make_schedule(0, ScheduleKind::Linear, 1e-3, 0.2).is_err());
    assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.2).is_err());
    assert!(make_schedule(10, ScheduleKind::Linear, 0.3, 0.2).is_err());
    assert!(make_schedule(10, ScheduleKind::Linear, 1e-3, 1.0).is_err());
    let s = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    let a = Mat::zeros(2, 4);
    assert!(forward_noise(&a, 0, &a, &s).is_err());
    assert!(forward_noise(&a, 11, &a, &s).is_err());
    assert!(forward_noise(&a, 1, &Mat::zeros(3, 4), &s).is_err());
    assert!(ddim_step(&a, &a, 2, &s, -0.1, &a).is_err());
    assert!(ddim_step(&a, &a, 2, &s, 0.1, &Mat::zeros(1, 4)).is_err());
}
