//! Vicsek at reduced size: simulate, fit, evaluate, summarize.
//!
//! cargo run --release --example vicsek_pipeline -- [n_trajectories]

use msde::experiment::{bundled_config, describe_diffusion, Experiment, Scale};

fn main() -> msde::Result<()> {
    let mut cfg = bundled_config("vicsek", Scale::Desk)?;
    if let Some(m) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.simulation.n_trajectories = m;
    }
    let exp = Experiment::new(cfg)?;
    let ens = exp.simulate()?;
    let est = exp.fit(&ens)?;
    print!("{}", describe_diffusion(&est, 4));
    let (report, _) = exp.evaluate(&ens, &est)?;
    print!("{}", exp.summarize(&report)?.to_text(4));
    Ok(())
}
