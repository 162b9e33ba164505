//! `tokentrack` commands. Each one resolves an effective [`RunConfig`]
//! (defaults, then `--config`, then `--set`, then flags), echoes it into the
//! output directory, and runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tokentrack_core::Variant;

mod commands;
mod draw;

pub use commands::{load_model, resolve_eval_config};

/// File the effective configuration is echoed to.
pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Parser)]
#[command(
    name = "tokentrack",
    version,
    about = "Track-token temporal tracker on synthetic video"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence suite to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Which suite: `train` uses train.world_seed, `eval` uses eval.world_seed.
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Train a model; writes a log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// One-pass evaluation of a checkpoint on a sequence suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence suite on disk; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Track one sequence and dump annotated frames, score and guidance maps.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index of the sequence in the suite.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Stop after this many frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Analytic parameter and MAC counts per module.
    Summary {
        #[command(flatten)]
        common: Common,
        /// Also walk the tensors of this checkpoint and compare.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed (train); world seed of the generated suite (gen-data, eval, trace).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Temporal window m (train); inference window override (eval, trace).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub no_temporal: bool,
    /// Drop the track token; implies --no-temporal.
    #[arg(long)]
    pub no_track_token: bool,
    #[arg(long)]
    pub no_prior: bool,
    /// Override any config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

impl Common {
    fn out_dir(&self, cfg_out: &str, fallback: &str) -> PathBuf {
        match (&self.out, cfg_out) {
            (Some(p), _) => p.clone(),
            (None, "") => PathBuf::from(fallback),
            (None, p) => PathBuf::from(p),
        }
    }

    /// `--set` pairs, split at the first `=`.
    fn set_pairs(&self) -> Result<Vec<(&str, &str)>> {
        self.set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))
            })
            .collect()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, split } => commands::gen_data(&common, split),
        Command::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => commands::eval(&common, &checkpoint, data.as_deref()),
        Command::Trace {
            common,
            checkpoint,
            data,
            sequence,
            frames,
        } => commands::trace(&common, &checkpoint, data.as_deref(), sequence, frames),
        Command::Summary { common, checkpoint } => commands::summary(&common, checkpoint.as_deref()),
    }
}

/// Writes the effective config next to a command's outputs.
fn echo_config(dir: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), text).with_context(|| format!("writing config into {}", dir.display()))?;
    Ok(())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if !cond {
        bail!(msg());
    }
    Ok(())
}
