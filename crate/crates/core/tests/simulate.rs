use msde::models::{vicsek, BuiltinModel, MODEL_NAMES};
use msde::simulate::replay_ensemble;
use msde::system::DriftWorkspace;
use msde::StateVector;
use std::collections::BTreeMap;

mod common;
use common::{simulate, Lcg};

fn builtins() -> Vec<BuiltinModel> {
    MODEL_NAMES
        .iter()
        .map(|n| BuiltinModel::from_params(n, &BTreeMap::new()).unwrap())
        .collect()
}

#[test]
fn noise_only_enters_y_block() {
    let mut rng = Lcg(1);
    for b in builtins() {
        let model = b.build().unwrap();
        let d = model.dims;
        for _ in 0..1000 {
            let z: Vec<f64> = rng.points(d.total).iter().map(|v| 4.0 * v - 2.0).collect();
            let full = model.full_diffusion(&StateVector::split(&d, &z).unwrap()).unwrap();
            for i in 0..d.total {
                for j in 0..d.total {
                    if i < d.x || j < d.x {
                        assert_eq!(full[(i, j)], 0.0, "{} at ({i}, {j})", b.name());
                    }
                }
            }
            let sigma = model.sigma_y(&z[d.x..]).unwrap();
            assert_eq!(full.view((d.x, d.x), (d.y, d.y)), sigma.view((0, 0), (d.y, d.y)));
        }
    }
}

#[test]
fn euler_steps_match_drift_and_recorded_noise() {
    for b in builtins() {
        let model = b.build().unwrap();
        let d = model.dims;
        let ens = simulate(&model, 0.05, 0.001, 4, 3);
        let mut ws = DriftWorkspace::new(&d);
        let mut h = vec![0.0; d.total];
        for m in 0..ens.n_trajectories {
            for l in 0..ens.n_times() - 1 {
                let (z, z1) = (ens.state(m, l), ens.state(m, l + 1));
                model.drift_into(z, &mut ws, &mut h);
                let dt = ens.dt_at(l);
                for i in 0..d.x {
                    assert!((z1[i] - (z[i] + h[i] * dt)).abs() <= 1e-15 * (1.0 + z[i].abs()), "{}", b.name());
                }
                let s = model.sigma_y(&z[d.x..]).unwrap();
                let w = ens.noise(m, l);
                for j in 0..d.y {
                    let noise: f64 = (0..d.y).map(|k| s[(j, k)] * w[k]).sum();
                    let expect = z[d.x + j] + h[d.x + j] * dt + noise;
                    assert!((z1[d.x + j] - expect).abs() <= 1e-14 * (1.0 + z[d.x + j].abs()), "{}", b.name());
                }
            }
        }
    }
}

#[test]
fn same_seed_is_bitwise_identical_and_seeds_differ() {
    for b in builtins() {
        let model = b.build().unwrap();
        let a = simulate(&model, 0.1, 0.01, 6, 42);
        assert_eq!(a, simulate(&model, 0.1, 0.01, 6, 42));
        let c = simulate(&model, 0.1, 0.01, 6, 43);
        assert_ne!(a.noise_increments, c.noise_increments);
        assert_ne!(a.states, c.states);
    }
}

#[test]
fn trajectories_do_not_depend_on_ensemble_size() {
    let model = builtins().remove(0).build().unwrap();
    let small = simulate(&model, 0.2, 0.01, 3, 9);
    let large = simulate(&model, 0.2, 0.01, 10, 9);
    for m in 0..3 {
        assert_eq!(small.trajectory(m), large.trajectory(m));
    }
}

#[test]
fn recorded_increments_are_brownian() {
    let model = builtins()
        .into_iter()
        .find(|b| b.name() == "henon_heiles")
        .unwrap()
        .build()
        .unwrap();
    let dt = 0.001;
    let ens = simulate(&model, 1.0, dt, 200, 17);
    let w = &ens.noise_increments;
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 4.0 * (dt / n).sqrt());
    assert!((var / dt - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    let cross = w.chunks_exact(2).map(|p| p[0] * p[1]).sum::<f64>() / (n / 2.0);
    assert!(cross.abs() < 4.0 * dt / (n / 2.0).sqrt());
}

#[test]
fn vicsek_moves_at_constant_speed() {
    let v = 0.03;
    let dt = 0.001;
    let model = vicsek(v, 0.05, 0.08).unwrap();
    let ens = simulate(&model, 1.0, dt, 20, 5);
    for m in 0..ens.n_trajectories {
        for l in 0..ens.n_times() - 1 {
            let (z, z1) = (ens.state(m, l), ens.state(m, l + 1));
            let step = ((z1[0] - z[0]).powi(2) + (z1[1] - z[1]).powi(2)).sqrt();
            assert!((step - v * dt).abs() <= 1e-15, "{step}");
        }
    }
}

#[test]
fn replaying_the_truth_is_exact() {
    for b in builtins() {
        let model = b.build().unwrap();
        let ens = simulate(&model, 0.1, 0.01, 5, 2);
        assert_eq!(replay_ensemble(&model, &ens).unwrap(), ens);
    }
}

#[test]
fn thinning_keeps_paths_and_sums_noise() {
    let model = builtins().remove(0).build().unwrap();
    let ens = simulate(&model, 1.0, 0.01, 3, 8);
    let thin = ens.thin(4).unwrap();
    assert_eq!(thin.n_times(), 26);
    assert!((thin.dt - 0.04).abs() < 1e-15);
    for m in 0..3 {
        for l in 0..thin.n_times() {
            assert_eq!(thin.state(m, l), ens.state(m, 4 * l));
        }
        let total: f64 = ens.trajectory_noise(m).iter().sum();
        let thinned: f64 = thin.trajectory_noise(m).iter().sum();
        assert!((total - thinned).abs() < 1e-12);
    }
}
