//! Command-line front end: `verify`, `train-base`, `train-adapter`, `eval`,
//! `compare` and `bench`.

pub mod commands;
pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::trainer::Method;
use config::{EvalTask, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "hificl", version, about = "Virtual key-value adapters and PEFT baselines on a toy transformer")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialisation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Epoch budget: `base.max_epochs` for train-base, `train.epochs` otherwise.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the merged configuration and exit without running.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Numerical self-checks.
    Verify {
        /// Random decomposition instances.
        #[arg(long)]
        trials: Option<usize>,
        /// Offset added to every decomposed output (fault injection).
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Pretrain the base model on episodic-random episodes.
    TrainBase,
    /// Train one adapter method on the fixed task over a frozen base.
    TrainAdapter {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Evaluate the base model, alone or with an adapter.
    Eval {
        /// Adapter checkpoint; omit to evaluate the bare base.
        #[arg(long, value_name = "PATH")]
        adapter: Option<PathBuf>,
        /// Explicit demonstrations per prompt.
        #[arg(long)]
        shots: Option<usize>,
        /// fixed or episodic.
        #[arg(long)]
        task: Option<String>,
    },
    /// Compare every method over `compare.seeds`.
    Compare {
        /// Train base models and adapters that have no checkpoint yet.
        #[arg(long)]
        train_missing: bool,
    },
    /// Inference latency and training cost.
    Bench {
        #[arg(long)]
        train_missing: bool,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

/// Defaults, then the config file, then `--set` overrides, then named flags.
pub fn resolve_config(cli: &Cli) -> crate::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.common.overrides {
        cfg.apply_assignment(kv)?;
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.out = out.clone();
    }
    if let Some(e) = cli.common.epochs {
        match cli.command {
            Command::TrainBase => cfg.base.max_epochs = e,
            _ => cfg.train.epochs = e,
        }
    }
    match &cli.command {
        Command::Verify { trials: Some(t), .. } => cfg.verify_trials = *t,
        Command::Eval { task: Some(t), .. } => cfg.eval_task = t.parse()?,
        _ => {}
    }
    Ok(cfg)
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn run_command(cli: &Cli, cfg: &RunConfig) -> crate::Result<u8> {
    match &cli.command {
        Command::Verify { perturb, .. } => {
            let report = verify::run_verify(cfg.seed, cfg.verify_trials, *perturb)?;
            println!("{report}");
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::TrainBase => {
            let s = commands::cmd_train_base(cfg)?;
            println!("{}", json(&s));
            if s.reached {
                Ok(EXIT_OK)
            } else {
                eprintln!(
                    "base model stopped at 8-shot val accuracy {:.4} after {} epochs, below the {} gate; \
                     raise --epochs or base.max_epochs, or try another --seed",
                    s.val_acc, s.epochs_run, s.target_acc
                );
                Ok(EXIT_FAILURE)
            }
        }
        Command::TrainAdapter { method } => {
            let s = commands::cmd_train_adapter(cfg, *method)?;
            println!("trainable parameters: {}", s.trainable_params);
            println!("{}", json(&s));
            Ok(EXIT_OK)
        }
        Command::Eval { adapter, shots, .. } => {
            let shots = shots.unwrap_or(if adapter.is_some() { cfg.train.demo_shots } else { cfg.eval_shots });
            let task: EvalTask = cfg.eval_task;
            let s = commands::cmd_eval(cfg, adapter.as_deref(), shots, task)?;
            println!("{}", json(&s));
            Ok(EXIT_OK)
        }
        Command::Compare { train_missing } => {
            let c = commands::cmd_compare(cfg, *train_missing)?;
            print!("{}", c.table);
            Ok(EXIT_OK)
        }
        Command::Bench { train_missing } => {
            let b = commands::cmd_bench(cfg, *train_missing)?;
            print!("{}", b.table);
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    if cli.common.print_config {
        print!("{}", cfg.render());
        return EXIT_OK;
    }
    match run_command(&cli, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str]) -> crate::Result<RunConfig> {
        let cli = Cli::try_parse_from(std::iter::once("hificl").chain(args.iter().copied())).unwrap();
        resolve_config(&cli)
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "seed = 5\ntrain.epochs = 7\nmodel.d_ff = 80\n").unwrap();
        let f = file.to_str().unwrap();
        let c = resolve(&["--config", f, "--seed", "9", "train-adapter", "--method", "lora"]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.d_ff, 80);
        assert_eq!(c.model.d_model, 32);
        let c = resolve(&["--config", f, "--set", "train.epochs=3", "--epochs", "4", "verify"]).unwrap();
        assert_eq!(c.train.epochs, 4);
        let c = resolve(&["--config", f, "--set", "train.epochs=3", "verify"]).unwrap();
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn epochs_flag_targets_the_command() {
        let c = resolve(&["train-base", "--epochs", "6"]).unwrap();
        assert_eq!(c.base.max_epochs, 6);
        assert_eq!(c.train.epochs, crate::trainer::TrainConfig::default().epochs);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["hificl", "train-adapter", "--method", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["hificl", "--set", "nope=1", "verify"]), EXIT_USAGE);
        assert_eq!(run(["hificl", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["hificl", "--print-config", "verify"]), EXIT_OK);
    }
}
