//! Fit f and g of the toy model on quadratic B-splines and score them.

use std::sync::Arc;

use msde::drift::{fit_f, fit_g};
use msde::metrics::{l2_rho_error_models, OccupationMeasure};
use msde::models::toy;
use msde::system::identity_map;
use msde::{simulate_ensemble, BasisConfig, BasisFamily, DiffusionWeight, FitOptions, InitialDistribution, SimulationConfig};

fn main() -> msde::Result<()> {
    let truth = toy(0.1)?;
    let ens = simulate_ensemble(
        &truth,
        &SimulationConfig {
            horizon: 1.0,
            dt: 0.001,
            n_trajectories: 500,
            seed: 1,
            initial: InitialDistribution::unit_box(2),
        },
    )?;
    let basis = BasisConfig::uniform(BasisFamily::Bspline, 2, 1, 2);
    let opts = FitOptions::default();
    let f = fit_f(&ens, &*identity_map(), basis.build_from_data(ens.all_states())?, &opts)?;
    let g = fit_g(&ens, &*identity_map(), basis.build_from_data(ens.all_states())?, DiffusionWeight::Identity, &opts)?;
    println!("f: {} basis functions, gradient norm {:.2e}", f.library.n_total(), f.diagnostics.gradient_norm);
    println!("g: {} basis functions, gradient norm {:.2e}", g.library.n_total(), g.diagnostics.gradient_norm);

    for z in [[0.2, 0.3], [0.5, 0.5], [0.9, 0.1]] {
        println!(
            "z = {z:?}: f = {:.4} (true {:.4}), g = {:.4} (true {:.4})",
            f.evaluate(&z)[0],
            0.4 * z[0] - 0.1 * z[0] * z[1],
            g.evaluate(&z)[0],
            -0.8 * z[1] + 0.2 * z[0] * z[0]
        );
    }
    let est = truth.with_drifts(Arc::new(f).into_map(), Arc::new(g).into_map());
    let e = l2_rho_error_models(&truth, &est, &OccupationMeasure::from_ensemble(&ens))?;
    println!("relative L2(rho) error: {:.4e}", e.relative.unwrap_or(e.absolute));
    Ok(())
}
