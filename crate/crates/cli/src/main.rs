//! Command-line front end. Every command reads a JSON run configuration
//! (`--config`), applies `--<key> <value>` overrides for any configuration
//! key, and writes its artifacts under `output_dir`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contrafeat::config::RunConfig;
use contrafeat::experiments;
use contrafeat::{Error, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "contrafeat", version, about = "Latent direction discovery on a toy generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides as `--key value` or `--key=value`
    /// (dashes and underscores are interchangeable).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Directions {
    /// Checkpoint directory (default `<output_dir>/checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the ground-truth factor directions instead of a checkpoint.
    #[arg(long)]
    oracle_directions: bool,
}

#[derive(Subcommand)]
enum Command {
    /// PCA of sampled base codes.
    Pca(Common),
    /// Train the navigator.
    Train {
        /// Continue from this checkpoint up to `steps` total.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Attribute-change matrix, S_disen and N_discov.
    Eval {
        #[command(flatten)]
        dirs: Directions,
        #[command(flatten)]
        common: Common,
    },
    /// Traversal strips as PPM images, one per direction.
    Traverse {
        #[command(flatten)]
        dirs: Directions,
        #[command(flatten)]
        common: Common,
    },
    /// Pure vs mixed pair losses for every loss mode.
    MaskExperiment(Common),
    /// Pair dataset, group VAE, MIG and FVM.
    Distill {
        #[command(flatten)]
        dirs: Directions,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Merges `--key value` pairs into the configuration document.
fn apply_overrides(doc: &mut Value, args: &[String]) -> Result<()> {
    let map = doc.as_object_mut().expect("configuration serializes to an object");
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument {arg:?}")))?;
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag, v.clone())
            }
        };
        map.insert(key.replace('-', "_"), parse_value(&raw));
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base)?;
    apply_overrides(&mut doc, &common.overrides)?;
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pca(common) => print(&experiments::cmd_pca(&load_config(&common)?)?),
        Command::Train { resume, common } => {
            print(&experiments::cmd_train(&load_config(&common)?, resume.as_deref())?)
        }
        Command::Eval { dirs, common } => print(&experiments::cmd_eval(
            &load_config(&common)?,
            dirs.checkpoint.as_deref(),
            dirs.oracle_directions,
        )?),
        Command::Traverse { dirs, common } => {
            let paths = experiments::cmd_traverse(
                &load_config(&common)?,
                dirs.checkpoint.as_deref(),
                dirs.oracle_directions,
            )?;
            paths.iter().for_each(|p| println!("{}", p.display()));
            Ok(())
        }
        Command::MaskExperiment(common) => print(&experiments::cmd_mask_experiment(&load_config(&common)?)?),
        Command::Distill { dirs, common } => print(&experiments::cmd_distill(
            &load_config(&common)?,
            dirs.checkpoint.as_deref(),
            dirs.oracle_directions,
        )?),
    }
}

/// Command flags, with whether they take a value.
const COMMAND_FLAGS: [(&str, bool); 4] = [
    ("--config", true),
    ("--checkpoint", true),
    ("--resume", true),
    ("--oracle-directions", false),
];

/// Moves command flags ahead of the configuration overrides so they may
/// appear anywhere after the subcommand.
fn hoist_command_flags(args: Vec<String>) -> Vec<String> {
    if args.len() < 2 {
        return args;
    }
    let (mut head, mut rest) = (args[..2].to_vec(), Vec::new());
    let mut it = args.into_iter().skip(2);
    while let Some(arg) = it.next() {
        let name = arg.split('=').next().unwrap_or("");
        match COMMAND_FLAGS.iter().find(|(f, _)| *f == name) {
            Some(&(_, takes_value)) => {
                let inline = arg.contains('=');
                head.push(arg);
                if takes_value && !inline {
                    head.extend(it.next());
                }
            }
            None => rest.push(arg),
        }
    }
    head.extend(rest);
    head
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(hoist_command_flags(std::env::args().collect()));
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
