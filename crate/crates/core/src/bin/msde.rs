use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msde::experiment::{
    bundled_config, cmd_evaluate, cmd_fit, cmd_reproduce, cmd_simulate, describe_diffusion, Experiment,
    ExperimentConfig, OutputLayout, Scale,
};
use msde::metrics::format_sig;
use msde::Error;

#[derive(Parser)]
#[command(name = "msde", version, about = "Learn drift and diffusion of mixed SDEs")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MSDE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Bundled experiment name, used when --config is absent.
    example: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = ["paper", "desk"])]
    scale: String,
    /// Overrides the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble and write it with a manifest.
    Simulate(Common),
    /// Fit drift and diffusion to an ensemble.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Ensemble file (default: <out>/ensemble.bin).
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Score fitted estimates and write the metric report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Run the whole pipeline and compare against the configured targets.
    Reproduce(Common),
}

fn setup(c: &Common) -> Result<(Experiment, OutputLayout), Error> {
    let mut config = match (&c.config, &c.example) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => bundled_config(name, c.scale.parse::<Scale>()?)?,
        (None, None) => return Err(Error::Config {
            path: "--config".into(),
            message: "give a config file or a bundled experiment name".into(),
        }),
    };
    if let Some(seed) = c.seed {
        config.simulation.seed = seed;
    }
    if let Some(out) = &c.out {
        config.output_dir = out.clone();
    }
    let layout = OutputLayout::new(config.output_dir.clone());
    Ok((Experiment::new(config)?, layout))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Simulate(c) => {
            let (exp, layout) = setup(&c)?;
            let (_, m) = cmd_simulate(&exp, &layout)?;
            println!(
                "wrote {} (M = {}, L = {}, sha256 {})",
                layout.ensemble().display(),
                m.n_trajectories,
                m.n_times,
                m.sha256
            );
        }
        Command::Fit { common, ensemble } => {
            let (exp, layout) = setup(&common)?;
            let est = cmd_fit(&exp, &ensemble.unwrap_or_else(|| layout.ensemble()), &layout)?;
            print!("{}", describe_diffusion(&est, exp.config.report_precision));
            println!("wrote estimates to {}", layout.estimates().display());
        }
        Command::Evaluate { common, ensemble } => {
            let (exp, layout) = setup(&common)?;
            let report = cmd_evaluate(&exp, &ensemble.unwrap_or_else(|| layout.ensemble()), &layout)?;
            println!("{}", report.metrics.csv_header());
            println!("{}", report.metrics.csv_row(exp.config.report_precision));
            for (i, s) in report.sigma_hat.iter().enumerate() {
                println!("sigma_hat_{i} = {}", format_sig(*s, exp.config.report_precision));
            }
        }
        Command::Reproduce(c) => {
            let (exp, layout) = setup(&c)?;
            let summary = cmd_reproduce(&exp, &layout)?;
            print!("{}", summary.to_text(exp.config.report_precision));
            return Ok(summary.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
