//! Learn the Cucker–Smale alignment kernel from noisy flocks.

use std::sync::Arc;

use msde::models::{cucker_smale_system, fit_cs_kernel, kernel_l2_error, kernel_library, kernel_r_max, CuckerSmaleSpec};
use msde::{simulate_ensemble, FitOptions, InitialDistribution, SimulationConfig};

fn main() -> msde::Result<()> {
    let (n, d) = (8, 2);
    let phi = |r: f64| (1.0 + r * r).powf(-0.25);
    let spec = CuckerSmaleSpec::new(n, d, Arc::new(phi), 0.1);
    let ens = simulate_ensemble(
        &cucker_smale_system(&spec),
        &SimulationConfig {
            horizon: 1.0,
            dt: 0.001,
            n_trajectories: 100,
            seed: 15,
            initial: InitialDistribution::unit_box(2 * n * d),
        },
    )?;
    let r_max = kernel_r_max(&ens, n, d)?;
    let est = fit_cs_kernel(&ens, n, d, kernel_library(r_max, 8, 2)?, &FitOptions::default())?;
    println!("relative L2(rho_r) kernel error: {:.4e}", kernel_l2_error(&est, &phi, &ens, n, d)?);
    print!("{}", est.to_csv(&phi, 11));
    Ok(())
}
