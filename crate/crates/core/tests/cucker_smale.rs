use std::sync::Arc;

use msde::models::{
    cs_drift, cucker_smale_system, fit_cs_kernel, kernel_library, kernel_r_max, momentum_drift, permute_agents, velocity_spread,
    CuckerSmaleSpec,
};
use msde::{FitOptions, TrajectoryEnsemble};
use proptest::prelude::*;

mod common;
use common::{simulate, Lcg};

fn spec(n: usize, d: usize, sigma: f64) -> CuckerSmaleSpec {
    CuckerSmaleSpec::new(n, d, Arc::new(|r: f64| (1.0 + r * r).powf(-0.25)), sigma)
}

fn max_distance(ens: &TrajectoryEnsemble, n: usize, d: usize) -> f64 {
    let mut best = 0.0f64;
    for z in ens.all_states() {
        for i in 0..n {
            for j in i + 1..n {
                let r = (0..d).map(|c| (z[i * d + c] - z[j * d + c]).powi(2)).sum::<f64>().sqrt();
                best = best.max(r);
            }
        }
    }
    best
}

#[test]
fn momentum_is_conserved_without_noise() {
    let model = cucker_smale_system(&spec(10, 2, 0.0));
    let ens = simulate(&model, 1.0, 0.001, 5, 3);
    assert!(momentum_drift(&ens, 10, 2) <= 1e-10);
}

#[test]
fn velocity_spread_never_grows_without_noise() {
    let model = cucker_smale_system(&spec(10, 2, 0.0));
    let ens = simulate(&model, 1.0, 0.001, 5, 4);
    for m in 0..ens.n_trajectories {
        for l in 0..ens.n_times() - 1 {
            let (a, b) = (velocity_spread(ens.state(m, l), 10, 2), velocity_spread(ens.state(m, l + 1), 10, 2));
            assert!(b <= a * (1.0 + 1e-12), "m={m} l={l}: {a} -> {b}");
        }
    }
}

#[test]
fn kernel_fit_is_label_free() {
    let (n, d) = (10, 2);
    let ens = simulate(&cucker_smale_system(&spec(n, d, 0.1)), 0.5, 0.001, 20, 5);
    let fit = |e: &TrajectoryEnsemble| {
        let lib = kernel_library(kernel_r_max(e, n, d).unwrap(), 8, 2).unwrap();
        fit_cs_kernel(e, n, d, lib, &FitOptions::default()).unwrap()
    };
    let base = fit(&ens);
    let mut rng = Lcg(99);
    for _ in 0..3 {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, (rng.next_f64() * (i + 1) as f64) as usize);
        }
        let other = fit(&permute_agents(&ens, n, d, &perm));
        assert_eq!(other.r_max, base.r_max);
        for (a, b) in other.coefficients.iter().zip(&base.coefficients) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn noiseless_kernel_in_span_is_recovered() {
    let (n, d) = (5, 2);
    let phi = |r: f64| 1.0 - 0.3 * r + 0.1 * r * r;
    let truth = CuckerSmaleSpec::new(n, d, Arc::new(phi), 0.0);
    let ens = simulate(&cucker_smale_system(&truth), 1.0, 0.001, 20, 6);
    let r_max = 1.05 * max_distance(&ens, n, d);
    let est = fit_cs_kernel(&ens, n, d, kernel_library(r_max, 4, 2).unwrap(), &FitOptions::default()).unwrap();
    let sup = (0..=200)
        .map(|i| r_max * i as f64 / 200.0)
        .map(|r| (est.evaluate(r) - phi(r)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 1e-4, "{sup}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_commutes_with_relabelling(state in prop::collection::vec(-2.0f64..2.0, 24), seed in 0u64..1000) {
        let (n, d) = (6, 2);
        let s = spec(n, d, 0.0);
        let mut out = vec![0.0; n * d];
        cs_drift(&s, &state[..n * d], &state[n * d..], &mut out);
        let mut rng = Lcg(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, (rng.next_f64() * (i + 1) as f64) as usize);
        }
        let relabel = |block: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&p| block[p * d..(p + 1) * d].to_vec()).collect() };
        let mut permuted = vec![0.0; n * d];
        cs_drift(&s, &relabel(&state[..n * d]), &relabel(&state[n * d..]), &mut permuted);
        prop_assert_eq!(permuted, relabel(&out));
    }

    #[test]
    fn drift_sums_to_zero(state in prop::collection::vec(-2.0f64..2.0, 24)) {
        let (n, d) = (6, 2);
        let mut out = vec![0.0; n * d];
        cs_drift(&spec(n, d, 0.0), &state[..n * d], &state[n * d..], &mut out);
        for c in 0..d {
            let total: f64 = (0..n).map(|i| out[i * d + c]).sum();
            prop_assert!(total.abs() <= 1e-14);
        }
    }
}
