use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ridgelab_core::harness::{run_experiment, ExperimentConfig};
use ridgelab_core::linkfn::LinkFunction;
use ridgelab_core::theory::{
    burnin_integral_lb, burnin_integral_ub, lb_crossing_time, lb_epsilon_sequence, ub_trajectory_ode, write_curves_csv, DEFAULT_PANELS,
};
use ridgelab_core::Error;

#[derive(Parser)]
#[command(name = "ridgelab", version, about = "Ridge bandit simulation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run { config: PathBuf },
    /// Check a JSON config without running it.
    Validate { config: PathBuf },
    /// Write predicted trajectories for one link and dimension.
    Theory {
        /// identity, cubic, abs_power:P, signed_power:P, or a JSON link descriptor
        #[arg(long)]
        link: String,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 1_000_000_000_000)]
        t_max: u64,
    },
}

fn parse_link(spec: &str) -> Result<LinkFunction, Error> {
    if spec.trim_start().starts_with('{') {
        return LinkFunction::from_json(spec);
    }
    let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let p = || arg.parse::<f64>().map_err(|_| Error::config("link", format!("`{spec}` needs a numeric exponent")));
    match name {
        "identity" => Ok(LinkFunction::identity()),
        "cubic" => Ok(LinkFunction::cubic()),
        "abs_power" => LinkFunction::abs_power(p()?),
        "signed_power" => LinkFunction::signed_power(p()? as u32),
        _ => Err(Error::config("link", format!("unknown link `{spec}`"))),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig::from_path(path).map_err(|e| match e {
        Error::Io(io) => Error::config("config", format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } | Error::Json(_) => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(&e),
        },
        Command::Run { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    for g in &report.summary.records.groups {
                        println!(
                            "d={} T={} trials={} success={:.3} median_queries={:.4e} mean_final_ip={:.4} mean_regret={:.4e}",
                            g.d, g.horizon, g.trials, g.success_rate, g.median_queries, g.mean_final_inner_product, g.mean_cum_regret
                        );
                    }
                    if let Some(s) = report.summary.records.fitted_slope {
                        println!("fitted log-log slope of median queries: {s:.3}");
                    }
                    println!("wrote {}", cfg.output_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Theory { link, d, out, c, delta, t_max } => {
            let run = || -> Result<(), Error> {
                let f = parse_link(&link)?;
                let mut curves = vec![lb_epsilon_sequence(&f, d, c, delta, t_max)?];
                let x0 = (c / d as f64).sqrt();
                if x0 < 1.0 {
                    curves.push(ub_trajectory_ode(&f, d, x0, t_max)?);
                }
                write_curves_csv(&out, &curves)?;
                println!("lower-bound crossing of 1/2: {:.4e}", lb_crossing_time(&f, d, c, delta, 0.5)?);
                if x0 <= 0.5 {
                    println!("upper-bound integral: {:.4e}", burnin_integral_ub(&f, d, 0.5, c, DEFAULT_PANELS)?);
                }
                let log_t = (t_max as f64).ln();
                if (c * log_t / d as f64).sqrt() <= 0.5 {
                    println!("lower-bound integral (log T = {log_t:.2}): {:.4e}", burnin_integral_lb(&f, d, 0.5, log_t, c, DEFAULT_PANELS)?);
                }
                println!("wrote {}", out.display());
                Ok(())
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => exit_for(&e),
            }
        }
    }
}
