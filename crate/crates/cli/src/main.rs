use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mbll_cli::commands::{cmd_eval, cmd_eval_batch, cmd_fit, cmd_predict};
use mbll_cli::config::RunConfig;
use mbll_cli::demo::{self, DemoName};
use mbll_cli::error::CliError;

#[derive(Parser)]
#[command(name = "mbll", version, about = "Multivariate Bayesian last-layer regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model from a JSON run config.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predictive mean and uncertainty for the inputs of a CSV file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fitted model on a CSV file, or fit and evaluate a config over several seeds.
    Eval {
        #[arg(long, conflicts_with = "config", required_unless_present = "config", requires = "data")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of consecutive seeds, starting at the config seed.
        #[arg(long, requires = "config", default_value_t = 1)]
        seeds: usize,
        #[arg(long, requires = "config")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reproduce one of the built-in experiments.
    Demo {
        #[arg(value_enum)]
        name: DemoName,
        #[arg(long)]
        out: PathBuf,
        /// Station CSV for `varx-beijing`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replaces the built-in run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to 0, or to the seed of --config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Fit { config, out, seed } => {
            let s = cmd_fit(&load(&config, seed)?, &out)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Cmd::Predict { model, data, out } => {
            let p = cmd_predict(&model, &data, &out)?;
            println!("{}", p.display());
        }
        Cmd::Eval { model, data, config, seeds, seed, out } => match (model, config) {
            (Some(m), _) => {
                let r = cmd_eval(&m, data.as_ref().expect("clap requires data"), &out)?;
                println!("{}", serde_json::to_string(&r)?);
            }
            (None, Some(c)) => {
                let b = cmd_eval_batch(&load(&c, seed)?, seeds, &out)?;
                println!("{}", serde_json::to_string(&b.summary)?);
            }
            (None, None) => unreachable!("clap requires --model or --config"),
        },
        Cmd::Demo { name, out, data, config, seed } => {
            let cfg = config.map(|c| load(&c, seed)).transpose()?;
            demo::run(name, seed.unwrap_or(0), data.as_ref(), cfg, &out)?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { mbll_cli::error::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let r = e.report();
            eprintln!("{}", serde_json::to_string(&r).unwrap_or_else(|_| r.message.clone()));
            ExitCode::from(r.exit_code as u8)
        }
    }
}
