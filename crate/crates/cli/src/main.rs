//! `stnhcl` command-line harness.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, data files),
//! 2 runtime failure. `STNHCL_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stnhcl::checkpoint::Checkpoint;
use stnhcl::config::RunConfig;
use stnhcl::data::{make_dataset, Domain};
use stnhcl::{eval, suite, train, Error};

#[derive(Parser)]
#[command(name = "stnhcl", version, about = "Hypergraph contrastive stain transfer")]
struct Cli {
    /// Print the default configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split; prints JSON lines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic dataset with masks and a manifest.
    Synth {
        /// Comma-separated subset of he,mas,pas,pasm.
        #[arg(long)]
        domains: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    Ok(RunConfig::parse(&text)?)
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("STNHCL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Validation(format!("STNHCL_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    if cli.print_config {
        print!("{}", RunConfig::default().render());
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(Failure::Validation("no command given (see --help)".into()));
    };
    match cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = train::train(&cfg, &cfg.out_dir)?;
            if let Some(last) = outcome.rows.last() {
                eprintln!("iter {} total {:.4}", last.iter, last.loss_total);
            }
            println!("{}", outcome.final_checkpoint.display());
        }
        Cmd::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let bytes = std::fs::read(&checkpoint)
                .map_err(|e| Failure::Validation(format!("{}: {e}", checkpoint.display())))?;
            let models = train::models_from_checkpoint(&Checkpoint::from_bytes(&bytes)?, &cfg)?;
            let report = eval::evaluate(&models, &cfg)?;
            print!("{}", report.to_json_lines());
        }
        Cmd::Synth {
            domains,
            n,
            out,
            seed,
            size,
        } => {
            let domains = Domain::parse_list(&domains)?;
            let m = make_dataset(n, &domains, seed, size, &out)?;
            eprintln!("wrote {} images to {}", m.records.len(), out.display());
        }
        Cmd::Gradcheck => {
            let report = suite::run_suite(&suite::SuiteOptions::default())?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(Failure::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
