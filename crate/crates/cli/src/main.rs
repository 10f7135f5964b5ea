use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nnmf_cli::{
    cmd_evaluate, cmd_ingest, cmd_report, cmd_split, cmd_sweep, cmd_train, CliError, CliResult, Context, RunConfig,
    SplitName,
};

#[derive(Parser)]
#[command(name = "nnmf", version, about = "Neural network matrix factorization experiments")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dataset and write it in canonical form.
    Ingest,
    /// Write the train/validation/test index files for every repeat.
    Split,
    /// Train on one repeat and write a checkpoint and trace.
    Train {
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Fixed regularization strength instead of a grid search.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run every repeat with lambda selection and report test RMSE.
    Sweep,
    /// RMSE of a checkpoint on one partition.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Aggregate `repeats.csv` from run directories.
    Report {
        /// Run directories; defaults to the output directory.
        runs: Vec<PathBuf>,
    },
}

fn context(cli: &Cli) -> CliResult<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    Context::new(RunConfig::load(path)?, cli.seed, cli.out.clone())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest => {
            let path = cmd_ingest(&context(&cli)?)?;
            println!("wrote {}", path.display());
        }
        Command::Split => {
            let paths = cmd_split(&context(&cli)?)?;
            println!("wrote {} split files", paths.len());
        }
        Command::Train { repeat, lambda } => {
            let mut ctx = context(&cli)?;
            if lambda.is_some() {
                ctx.config.train.lambda = *lambda;
                ctx.config.validate()?;
            }
            let s = cmd_train(&ctx, *repeat)?;
            println!(
                "lambda {} best epoch {} validation RMSE {:.5} test RMSE {:.5}",
                s.lambda, s.best_epoch, s.validation_rmse, s.test_rmse
            );
            println!("wrote {} and {}", s.checkpoint.display(), s.trace.display());
        }
        Command::Sweep => {
            let report = cmd_sweep(&context(&cli)?)?;
            print!("{}", report.to_table());
        }
        Command::Evaluate {
            checkpoint,
            split,
            repeat,
        } => {
            let which: SplitName = split.parse()?;
            let rmse = cmd_evaluate(&context(&cli)?, checkpoint, which, *repeat)?;
            println!("{split} RMSE {rmse:.6}");
        }
        Command::Report { runs } => {
            let (out, snapshot) = match &cli.config {
                Some(_) => {
                    let ctx = context(&cli)?;
                    let snap = ctx.config.snapshot();
                    (ctx.out, Some(snap))
                }
                None => (
                    cli.out
                        .clone()
                        .ok_or_else(|| CliError::Usage("report needs --out or --config".into()))?,
                    None,
                ),
            };
            let runs = if runs.is_empty() { vec![out.clone()] } else { runs.clone() };
            print!("{}", cmd_report(&out, &runs, snapshot.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
