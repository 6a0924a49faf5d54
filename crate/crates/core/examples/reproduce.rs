//! Full reproduce run for a bundled experiment, writing the usual output tree.
//!
//! cargo run --release --example reproduce -- toy desk out/toy

use msde::experiment::{bundled_config, cmd_reproduce, Experiment, OutputLayout, Scale};

fn main() -> msde::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "toy".into());
    let scale: Scale = args.next().unwrap_or_else(|| "desk".into()).parse()?;
    let out = args.next().unwrap_or_else(|| format!("out/{name}_{}", scale.as_str()));
    let exp = Experiment::new(bundled_config(&name, scale)?)?;
    let summary = cmd_reproduce(&exp, &OutputLayout::new(&out))?;
    print!("{}", summary.to_text(exp.config.report_precision));
    println!("outputs in {out}");
    Ok(())
}
