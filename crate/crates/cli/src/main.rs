//! `fedopt`: run experiments, export plot data, evaluate the performance bound.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 runtime. Log verbosity comes
//! from `FEDOPT_LOG` (e.g. `FEDOPT_LOG=debug`).

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedopt_core::orchestrator::{compute_performance_bound, run_federated, BoundInputs, Seeds};

#[derive(Parser)]
#[command(name = "fedopt", version, about = "Federated learning simulator with an RL-driven data-selecting client")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its results to a directory
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Derive all four seed streams from this number
        #[arg(long)]
        seed: Option<u64>,
        /// Train the designated client on its full split (no agent)
        #[arg(long)]
        ablation_naive_all: bool,
    },
    /// Turn a rounds file into CSV series for plotting
    PlotData {
        #[arg(long)]
        rounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the performance bound for full (Z) and selected (z) radii
    Bound {
        #[arg(long = "Z", value_delimiter = ',', required = true, allow_negative_numbers = true)]
        full: Vec<f64>,
        #[arg(long = "z", value_delimiter = ',', required = true, allow_negative_numbers = true)]
        selected: Vec<f64>,
    },
    /// Check a config file and print it fully resolved
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            out,
            seed,
            ablation_naive_all,
        } => {
            let mut cfg = config::parse_config_file(&config).map_err(|e| Failure::Config(e.to_string()))?;
            if let Some(s) = seed {
                cfg.seeds = Seeds::from_base(s);
            }
            if ablation_naive_all {
                cfg.naive_all = true;
            }
            let resolved = config::emit_config(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
            log::info!("resolved config:\n{resolved}");
            let result = run_federated(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
            let art = output::write_run(&out, &resolved, &result).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("config:   {}", art.config.display());
            println!("rounds:   {}", art.rounds.display());
            println!("summary:  {}", art.summary.display());
            println!("finetune: {}", art.finetune.display());
            Ok(())
        }
        Command::PlotData { rounds, out } => {
            for p in output::plot_data(&rounds, &out).map_err(|e| Failure::Runtime(e.to_string()))? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Bound { full, selected } => {
            if full.len() != selected.len() {
                return Err(Failure::Usage(format!(
                    "--Z has {} values but --z has {}",
                    full.len(),
                    selected.len()
                )));
            }
            let b = compute_performance_bound(&BoundInputs { full, selected }).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("P_k = {:.6}", b.p_full);
            println!("P'_k = {:.6}", b.p_selected);
            println!("Omega = {:.6}", b.omega);
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = config::parse_config_file(&config).map_err(|e| Failure::Config(e.to_string()))?;
            print!("{}", config::emit_config(&cfg).map_err(|e| Failure::Config(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDOPT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
