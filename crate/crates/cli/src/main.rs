use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbp_cli::{parse_config, run_ablate, run_eval, run_gradcheck, run_train, CliError, CliResult};

#[derive(Parser)]
#[command(name = "pbp", version, about = "Point projection network: train, evaluate, check gradients, run ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus an epoch log.
    Train(Common),
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the configured checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a tiny fixture.
    Gradcheck(Common),
    /// Train and evaluate the 24-variant architecture grid.
    Ablate(Common),
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("PBP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("PBP_THREADS: expected a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(c) => {
            let cfg = parse_config(c.config.as_deref(), &c.overrides)?;
            let out = run_train(&cfg)?;
            if let Some(last) = out.history.last() {
                println!("{}", last.to_line());
            }
            if let Some(p) = &out.checkpoint {
                println!("checkpoint={}", p.display());
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = parse_config(common.config.as_deref(), &common.overrides)?;
            let path = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            let report = run_eval(&cfg, &path)?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck(c) => {
            let cfg = parse_config(c.config.as_deref(), &c.overrides)?;
            let report = run_gradcheck(&cfg)?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(CliError::Numeric(format!(
                    "gradient check exceeded tolerance {}",
                    report.tolerance
                )));
            }
        }
        Command::Ablate(c) => {
            let cfg = parse_config(c.config.as_deref(), &c.overrides)?;
            print!("{}", run_ablate(&cfg)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::Config(first.to_string()).to_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.code() as u8)
        }
    }
}
