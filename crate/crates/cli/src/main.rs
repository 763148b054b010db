use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use stitch_cli::{cmd_eval, cmd_fit, cmd_simulate, configure_threads, load_config, CliError, EvalConfig, Method};

#[derive(Parser, Debug)]
#[command(name = "stitch", version, about = "Stitch latent linear dynamics across partially overlapping recordings")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "STITCH_THREADS")]
    threads: Option<usize>,

    /// Fixed-order reductions. Every reduction is already ordered, so `false`
    /// only documents intent.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from the `sim` and `scheme` sections of a config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// One of s3id, sem, s3id+sem, fa-posthoc.
        #[arg(long)]
        method: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fitted parameters against truth parameters or held-out data.
    Eval {
        #[arg(long)]
        params: PathBuf,
        /// Truth parameter file, or a fully observed held-out dataset directory.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config whose `eval` section sets lags, sample size and seed.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    log::debug!("deterministic reductions: {}", cli.deterministic);
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Fit { data, method, config, out } => cmd_fit(&data, method.parse::<Method>()?, &config, &out),
        Command::Eval { params, truth, scheme, out, config } => {
            let eval = match config {
                Some(path) => load_config(&path)?.config.eval.unwrap_or_default(),
                None => EvalConfig::default(),
            };
            let report = cmd_eval(&params, &truth, &scheme, &out, &eval)?;
            if let Some(c) = report.prediction_correlation_per_lag.first().copied().flatten() {
                println!("prediction correlation at lag 0: {c:.4}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
