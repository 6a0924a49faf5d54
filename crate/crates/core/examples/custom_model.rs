//! A user-defined mSDE: a noisy pendulum with angle x and angular velocity y.
//!
//! dx = y dt, dy = (−sin x − 0.2 y) dt + 0.15 dw

use std::sync::Arc;

use msde::diffusion::{empirical_qv, fit_sigma_constant};
use msde::drift::{fit_f, fit_g};
use msde::metrics::{l2_rho_error_models, OccupationMeasure};
use msde::system::{diagonal_sigma, identity_map};
use msde::{
    simulate_ensemble, BasisConfig, BasisFamily, DiffusionWeight, FitOptions, InitialDistribution, ModelSystem,
    SimulationConfig, SystemDimensions,
};

fn main() -> msde::Result<()> {
    let truth = ModelSystem::new(
        SystemDimensions::identity_features(1, 1)?,
        Arc::new(|z: &[f64], o: &mut [f64]| o[0] = z[1]),
        Arc::new(|z: &[f64], o: &mut [f64]| o[0] = -z[0].sin() - 0.2 * z[1]),
        diagonal_sigma(&[0.15]),
    )?;
    let ens = simulate_ensemble(
        &truth,
        &SimulationConfig {
            horizon: 5.0,
            dt: 0.001,
            n_trajectories: 200,
            seed: 9,
            initial: InitialDistribution::Gaussian {
                mean: vec![0.0, 0.0],
                std: vec![1.0, 0.5],
            },
        },
    )?;
    let sigma = fit_sigma_constant(&empirical_qv(&ens))?;
    let basis = BasisConfig::uniform(BasisFamily::Bspline, 2, 6, 2);
    let opts = FitOptions::default();
    let f = fit_f(&ens, &*identity_map(), basis.build_from_data(ens.all_states())?, &opts)?;
    let g = fit_g(&ens, &*identity_map(), basis.build_from_data(ens.all_states())?, DiffusionWeight::Estimate(&sigma), &opts)?;
    let est = truth.with_drifts(Arc::new(f).into_map(), Arc::new(g).into_map());
    let e = l2_rho_error_models(&truth, &est, &OccupationMeasure::from_ensemble(&ens))?;
    println!("sigma_hat = {:.4} (true 0.15)", sigma.sigma_display(&[])[0]);
    println!("relative L2(rho) drift error = {:.4e}", e.relative.unwrap_or(e.absolute));
    Ok(())
}
