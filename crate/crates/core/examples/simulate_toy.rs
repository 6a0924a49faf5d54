//! Simulate the toy mSDE and write the ensemble as CSV.
//!
//! cargo run --release --example simulate_toy -- out/toy.csv

use msde::ensemble_io;
use msde::models::toy;
use msde::{simulate_ensemble, InitialDistribution, SimulationConfig};

fn main() -> msde::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "toy_ensemble.csv".into());
    let model = toy(0.1)?;
    let cfg = SimulationConfig {
        horizon: 1.0,
        dt: 0.001,
        n_trajectories: 20,
        seed: 7,
        initial: InitialDistribution::unit_box(2),
    };
    let ens = simulate_ensemble(&model, &cfg)?;
    let last = ens.snapshot(ens.n_times() - 1);
    let mean_y = last.chunks_exact(2).map(|z| z[1]).sum::<f64>() / ens.n_trajectories as f64;
    println!("M = {}, L = {}, mean y(T) = {mean_y:.4}", ens.n_trajectories, ens.n_times());
    ensemble_io::save_csv(&ens, std::path::Path::new(&path))?;
    println!("wrote {path}");
    Ok(())
}
