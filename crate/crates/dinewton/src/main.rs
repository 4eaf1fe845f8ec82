//! Command-line front end of the simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence detected,
//! 4 numerical failure.

use clap::{Parser, Subcommand};
use dinewton::harness::{self, ExperimentConfig, Overrides};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dinewton",
    version,
    about = "Distributed Newton optimization over consensus networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        config: PathBuf,
        /// Override the instance seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the round count.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the trace output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan the deflated spectral radius over the step grid.
    ScanAlpha {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the second network eigenvalue by the distributed power method.
    EstimateSpectrum {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        rounds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the preset config files (fig1, fig2, fig3) into a directory.
    Presets {
        name: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn config_base(config: &Path) -> PathBuf {
    config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    };
    ExitCode::from(code)
}

fn dispatch(cli: Cli) -> Result<u8, harness::HarnessError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            rounds,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let overrides = Overrides { seed, rounds, out };
            let report = harness::run_experiment(&cfg, &config_base(&config), &overrides)?;
            println!("trace:   {}", report.trace_path.display());
            println!("summary: {}", report.summary_path.display());
            if let Some(alpha) = report.resolved_alpha {
                println!("alpha:   {alpha}");
            }
            if let Some(rate) = report.theoretical_rate {
                println!("theoretical rate: {rate}");
            }
            println!("final max error: {}", report.summary.final_max_err);
            if let Some(ratio) = report.summary.fitted_ratio {
                println!("fitted ratio: {ratio}");
            }
            if report.diverged {
                println!(
                    "divergence detected at round {}",
                    report.summary.divergence_round.unwrap_or(0)
                );
                return Ok(3);
            }
            Ok(0)
        }
        Command::ScanAlpha { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = harness::scan_experiment(&cfg, &config_base(&config), out)?;
            println!("curve:       {}", report.csv_path.display());
            println!("alpha_opt:   {}", report.alpha_opt);
            println!("radius:      {}", report.radius_at_opt);
            println!("alpha_star:  {}", report.alpha_star);
            println!("alpha_offline: {}", report.alpha_offline);
            Ok(0)
        }
        Command::EstimateSpectrum {
            config,
            seed,
            rounds,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report =
                harness::estimate_spectrum(&cfg, &config_base(&config), seed, rounds, out)?;
            println!("estimate: {}", report.estimate);
            println!("direct:   {}", report.direct);
            println!("relative error: {}", report.relative_error);
            if let Some(p) = report.csv_path {
                println!("csv: {}", p.display());
            }
            Ok(0)
        }
        Command::Presets { name, out } => {
            let files = harness::write_presets(&name, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(0)
        }
    }
}
