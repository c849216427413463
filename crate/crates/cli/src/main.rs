use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbnr_cli::config::load_config;
use fedbnr_cli::experiment::cmd_run;
use fedbnr_cli::fig2::{synthetic_fig2, write_fig2, Fig2Options};
use fedbnr_cli::kernel_check::cmd_kernel_check;
use fedbnr_cli::CliError;

/// Federated Bayesian neural regression experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config over all of its seeds.
    Run {
        config: PathBuf,
        /// Run all six phase-1/phase-2 combinations instead of the configured mode.
        #[arg(long)]
        ablation_sweep: bool,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-client synthetic study: prediction band and new-client curves.
    SyntheticFig2 {
        #[arg(long, default_value = "fig2")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte-Carlo convergence and PSD checks of the kernel constructions.
    KernelCheck {
        #[arg(long, default_value_t = 1_000_000)]
        m_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("FEDBNR_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().map_err(|_| format!("FEDBNR_THREADS must be a positive integer, got {value:?}"))?;
    if n == 0 {
        return Err("FEDBNR_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, ablation_sweep, out } => {
            let cfg = load_config(&config)?;
            let out_dir =
                out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results").join(&cfg.name));
            let report = cmd_run(&cfg, ablation_sweep, &out_dir)?;
            println!("{:<14} {:>5} {:>12} {:>10} {:>8}", "mode", "seeds", "rmse", "sem", "ece");
            for row in &report.summary {
                println!(
                    "{:<14} {:>5} {:>12.4} {:>10.4} {:>8.4}",
                    row.mode, row.num_seeds, row.rmse_mean, row.rmse_sem, row.ece_mean
                );
            }
            println!("wrote {} records to {}", report.records.len(), out_dir.display());
        }
        Command::SyntheticFig2 { out, seed } => {
            let outcome = synthetic_fig2(&Fig2Options { seed, ..Fig2Options::default() })?;
            write_fig2(&outcome, &out)?;
            let s = &outcome.summary;
            println!("centralized rmse {:.4}", s.centralized_rmse);
            println!("fedbnr rmse      {:.4}", s.fedbnr_rmse);
            println!("local+local rmse {:.4}", s.local_local_rmse);
            println!("wrote {}", out.display());
        }
        Command::KernelCheck { m_max, seed } => {
            println!("{}", cmd_kernel_check(m_max, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
