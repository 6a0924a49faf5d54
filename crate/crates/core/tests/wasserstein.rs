use msde::wasserstein::{wasserstein2, wasserstein2_exact, W2Options};
use proptest::prelude::*;

mod common;
use common::{brute_force_w2, lp_w2, sorted_quantile_w2, Lcg};

#[test]
fn matches_brute_force_permutations_for_small_clouds() {
    let mut rng = Lcg(7);
    for n in 1..=7 {
        for dim in [1, 2, 3] {
            let a = rng.points(n * dim);
            let b = rng.points(n * dim);
            let exact = wasserstein2_exact(&a, &b, dim);
            let brute = brute_force_w2(&a, &b, dim);
            assert!((exact - brute).abs() <= 1e-9, "n={n} dim={dim}: {exact} vs {brute}");
        }
    }
}

#[test]
fn matches_transport_linear_program() {
    let mut rng = Lcg(11);
    for n in [8, 16, 32, 64] {
        let dim = 2;
        let a = rng.points(n * dim);
        let b = rng.points(n * dim);
        let exact = wasserstein2_exact(&a, &b, dim);
        let lp = lp_w2(&a, &b, dim);
        assert!((exact - lp).abs() <= 1e-9, "n={n}: {exact} vs {lp}");
    }
}

#[test]
fn one_dimensional_equals_sorted_quantile_coupling() {
    let mut rng = Lcg(3);
    for k in 0..100 {
        let n = 1 + (k * 37) % 500;
        let a: Vec<f64> = rng.points(n).iter().map(|v| 4.0 * v - 1.0).collect();
        let b: Vec<f64> = rng.points(n).iter().map(|v| v * v).collect();
        let exact = wasserstein2_exact(&a, &b, 1);
        assert!((exact - sorted_quantile_w2(&a, &b)).abs() <= 1e-10, "instance {k}");
    }
}

#[test]
fn large_clouds_use_flagged_approximation() {
    let mut rng = Lcg(5);
    let opts = W2Options {
        m_exact: 50,
        ..W2Options::default()
    };
    let a = rng.points(120);
    let b: Vec<f64> = rng.points(120).iter().map(|v| v + 0.5).collect();
    let approx = wasserstein2(&a, &b, 1, &opts).unwrap();
    let exact = wasserstein2(&a, &b, 1, &W2Options::default()).unwrap();
    assert!(approx.approximate);
    assert!(!exact.approximate);
    assert!((approx.distance - exact.distance).abs() < 0.02 * exact.distance);
}

fn cloud(n: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn symmetric(a in cloud(20, 2), b in cloud(20, 2)) {
        let ab = wasserstein2_exact(&a, &b, 2);
        let ba = wasserstein2_exact(&b, &a, 2);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn triangle_inequality(a in cloud(20, 2), b in cloud(20, 2), c in cloud(20, 2)) {
        let ab = wasserstein2_exact(&a, &b, 2);
        let bc = wasserstein2_exact(&b, &c, 2);
        let ac = wasserstein2_exact(&a, &c, 2);
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn zero_on_reordered_copy(a in cloud(15, 3), shift in 0usize..15) {
        let mut b = a.clone();
        b.rotate_left(shift * 3);
        prop_assert!(wasserstein2_exact(&a, &b, 3) <= 1e-12);
    }

    #[test]
    fn positive_on_different_multisets(a in cloud(10, 2), i in 0usize..20, bump in 0.01f64..1.0) {
        let mut b = a.clone();
        b[i] += bump;
        prop_assert!(wasserstein2_exact(&a, &b, 2) > 0.0);
    }
}
