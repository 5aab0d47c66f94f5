mod commands;
mod config;
mod error;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use canopy_fewshot::classify::Method;
use clap::{Parser, Subcommand};

use commands::{Arm, Context, FoldSelector};
use config::{Overrides, RunConfig};
use error::CliError;

/// Few-shot Siamese classification of canopy tiles with case-based explanations.
///
/// Configuration precedence, lowest first: built-in defaults, the `--config`
/// JSON file, then flags. Exit codes: 0 ok, 2 validation or missing input,
/// 3 refused overwrite or locked output, 4 internal error.
#[derive(Debug, Parser)]
#[command(name = "canopy", version)]
struct Cli {
    /// JSON run configuration; any subset of keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for stage directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Reduced epochs and folds; results are not acceptance grade.
    #[arg(long, global = true)]
    quick: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct FoldArgs {
    /// Shot count; defaults to `fewshot.k` from the configuration.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest the raw manifest and normalize every tile.
    Prepare,
    /// Cap, augment and sample balanced training pairs.
    Pairs,
    /// Train the base model.
    Train,
    /// Refine the base model on one fold's support set.
    Refine {
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Classify one fold's test tiles.
    Classify {
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long, value_enum, default_value = "refined")]
        arm: Arm,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        knn_k: Option<usize>,
    },
    /// Explain a classified fold and score the explanations.
    Explain {
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long, value_enum, default_value = "refined")]
        arm: Arm,
    },
    /// Zero-shot and refined arms over every fold and shot count.
    Sweep,
    /// Generate synthetic data and run the whole pipeline on it.
    Synthetic,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "avg" => Ok(Method::Avg),
        "knn" => Ok(Method::Knn),
        other => Err(format!("unknown method `{other}` (expected avg or knn)")),
    }
}

impl FoldArgs {
    fn select(&self, config: &RunConfig) -> FoldSelector {
        FoldSelector { k: self.k.unwrap_or(config.fewshot.k), fold: self.fold }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, out: cli.out, quick: cli.quick };
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Context::open(config, cli.force)?;
    let dir = match &cli.command {
        Command::Prepare => commands::prepare(&ctx)?,
        Command::Pairs => commands::pairs(&ctx)?,
        Command::Train => commands::train(&ctx)?,
        Command::Refine { fold } => commands::refine_fold(&ctx, fold.select(&ctx.config))?,
        Command::Classify { fold, arm, method, knn_k } => {
            commands::classify_fold(&ctx, fold.select(&ctx.config), *arm, *method, *knn_k)?
        }
        Command::Explain { fold, arm } => commands::explain_fold(&ctx, fold.select(&ctx.config), *arm)?,
        Command::Sweep => commands::sweep(&ctx)?,
        Command::Synthetic => {
            let (dir, passed) = commands::synthetic(&ctx)?;
            let text = std::fs::read_to_string(dir.join("acceptance.txt")).unwrap_or_default();
            print!("{text}");
            println!("{}", if passed { "all checks passed" } else { "some checks failed" });
            dir
        }
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
