use std::path::PathBuf;
use std::process::ExitCode;

use amq::config::ExperimentConfig;
use amq::experiment::{cmd_gen_data, cmd_report, cmd_sweep, cmd_train, SWEEP_CSV};
use amq::AmqError;
use clap::{Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Adaptive mixed-precision quantization experiments on synthetic Darcy flow.
#[derive(Parser)]
#[command(name = "amq", version)]
struct Cli {
    /// TOML configuration file; `AMQ_<SECTION>__<KEY>` variables override it.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the Darcy dataset.
    GenData {
        /// Output file (overrides output.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train every sweep point and write a consolidated CSV.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip points that already finished.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a sweep CSV.
    Report {
        /// Sweep CSV (default: <output.dir>/sweep.csv).
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Also write an SVG plot of loss against cost.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), AmqError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), std::env::vars())?;
    let mut progress = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::GenData { out } => {
            if let Some(p) = out {
                cfg.output.dataset = p;
            }
            let r = cmd_gen_data(&cfg)?;
            println!("wrote {} samples to {}", r.samples, r.path.display());
            println!("sha256 {}", r.sha256);
        }
        Command::Train { dataset, out, resume } => {
            override_paths(&mut cfg, dataset, out);
            let r = cmd_train(&cfg, resume, &mut progress)?;
            let e = &r.final_eval;
            println!(
                "{} steps; val_loss {:.6e} rel_l2 {:.5} macs_int8eq {:.0}; results in {}",
                r.steps,
                e.val_loss,
                e.rel_l2,
                e.macs_int8eq,
                r.dir.display()
            );
        }
        Command::Sweep { dataset, out, resume } => {
            override_paths(&mut cfg, dataset, out);
            let r = cmd_sweep(&cfg, resume, &mut progress)?;
            println!(
                "{} runs ({} reused, {} failed); results in {}",
                r.rows.len(),
                r.skipped,
                r.failures(),
                r.csv.display()
            );
        }
        Command::Report { sweep, plot } => {
            let path = sweep.unwrap_or_else(|| cfg.output.dir.join(SWEEP_CSV));
            print!("{}", cmd_report(&path, plot.as_deref())?);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml_string()?),
    }
    Ok(())
}

fn override_paths(cfg: &mut ExperimentConfig, dataset: Option<PathBuf>, out: Option<PathBuf>) {
    if let Some(p) = dataset {
        cfg.output.dataset = p;
    }
    if let Some(p) = out {
        cfg.output.dir = p;
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                AmqError::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            })
        }
    }
}
