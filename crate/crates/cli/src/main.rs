use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rmot_core::harness::{self, ExperimentConfig, Mode};
use rmot_core::CoreError;

/// Referring multi-object tracking attack testbed.
#[derive(Parser)]
#[command(name = "rmot", version)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict the run to one evaluation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint.
    Train,
    /// Clean and attacked evaluation of every seed.
    Attack,
    /// Sweep the number of attacked frames.
    SweepDelta,
    /// Sweep the memory buffer length, training one model per size.
    SweepBuffer,
    /// Aggregate persisted runs into a summary and charts.
    Report,
    /// Finite-difference check of the model and attack losses.
    Gradcheck,
}

/// Errors caused by the configuration rather than by the computation.
struct ConfigError(anyhow::Error);

fn load_config(cli: &Cli) -> std::result::Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(ConfigError)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    Ok(cfg)
}

fn print_header(key: &str) {
    println!("{}", harness::csv_header(key));
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    match cli.command {
        Command::Train => {
            cfg.validate(Mode::Single)?;
            let mut log = std::io::stdout();
            println!("epoch,loss");
            let (_, path) = harness::train_model(cfg, Some(&mut log))?;
            eprintln!("checkpoint written to {}", path.display());
        }
        Command::Attack => {
            cfg.validate(Mode::Single)?;
            let model = harness::obtain_model(cfg)?;
            let rows = harness::run_seeds(cfg, &model)?;
            print_header("seed");
            for r in &rows {
                println!("{}", r.csv_line());
            }
        }
        Command::SweepDelta => {
            let rows = harness::sweep_delta(cfg)?;
            print_header("seeds");
            for s in harness::aggregate(&rows) {
                println!("{}", s.csv_line());
            }
        }
        Command::SweepBuffer => {
            let rows = harness::sweep_buffer(cfg)?;
            print_header("seeds");
            for s in rows {
                println!("{}", s.csv_line());
            }
        }
        Command::Report => {
            let r = harness::report(&cfg.run.out)?;
            eprintln!("{} runs in {} groups", r.runs, r.summary.len());
            for f in &r.files {
                println!("{}", f.display());
            }
        }
        Command::Gradcheck => {
            let seeds: Vec<u64> = match cli.seed {
                Some(s) => vec![s],
                None => (0..20).collect(),
            };
            let mut failed = 0;
            println!("seed,check,max_rel_error,passed");
            for seed in seeds {
                for c in harness::gradient_suite(seed)? {
                    failed += !c.passed as usize;
                    println!("{seed},{},{:.3e},{}", c.name, c.max_rel_error, c.passed);
                }
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<CoreError>(),
        Some(
            CoreError::Config(_)
                | CoreError::AttackConfig(_)
                | CoreError::ModelConfig(_)
                | CoreError::MissingCheckpoint(_)
                | CoreError::UnknownToken(_)
        )
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(ConfigError(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
