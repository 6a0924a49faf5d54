//! Paired replay of a perturbed model: trajectory error and the W2 curve.

use std::sync::Arc;

use msde::metrics::{trajectory_error, wasserstein_curve};
use msde::models::van_der_pol;
use msde::wasserstein::W2Options;
use msde::{replay_ensemble, simulate_ensemble, InitialDistribution, SimulationConfig};

fn main() -> msde::Result<()> {
    let truth = van_der_pol(1.0, 0.1)?;
    let ens = simulate_ensemble(
        &truth,
        &SimulationConfig {
            horizon: 5.0,
            dt: 0.001,
            n_trajectories: 300,
            seed: 5,
            initial: InitialDistribution::unit_box(2),
        },
    )?;
    for mu in [1.0, 1.05, 1.2] {
        let g = Arc::new(move |z: &[f64], o: &mut [f64]| o[0] = mu * (1.0 - z[0] * z[0]) * z[1] - z[0]);
        let model = truth.with_drifts(truth.drift_f.clone(), g);
        let replay = replay_ensemble(&model, &ens)?;
        let t = trajectory_error(&ens, &replay)?;
        let w2 = wasserstein_curve(&ens, &replay, &[1.0, 2.5, 5.0], &W2Options::default())?;
        let curve: Vec<String> = w2.iter().map(|p| format!("t={}: {:.3e}", p.time, p.distance)).collect();
        println!("mu = {mu}: trajectory error {:.3e} +/- {:.3e}; W2 {}", t.mean, t.std, curve.join(", "));
    }
    Ok(())
}
