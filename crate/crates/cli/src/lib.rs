//! Batch workflows for the `hhir` binary: corpus building, stream masking,
//! synthetic data, training, caption generation and evaluation.
//!
//! Every flag can also be set through an environment variable named
//! `HHIR_<FLAG>` (for example `HHIR_SEED`, `HHIR_OUT`, `HHIR_MANIFEST`).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

pub use commands::{
    cmd_build_data, cmd_eval, cmd_generate, cmd_mask, cmd_synth, cmd_train, read_captions,
    TrainOutcome,
};
pub use config::{EvalConfig, ResponderKind, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "hhir",
    version,
    about = "Two-person interaction captioning pipeline"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "HHIR_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage; overrides the config file.
    #[arg(long, global = true, env = "HHIR_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "HHIR_OUT")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge source datasets into a manifest, vocabulary and chat records.
    BuildData(BuildDataArgs),
    /// Split one clip into person-1, person-2 and background streams.
    Mask(MaskArgs),
    /// Write a procedurally generated two-person corpus.
    Synth,
    /// Train the learnable branches with frozen encoders and LM.
    Train(TrainArgs),
    /// Caption every clip of a manifest.
    Generate(GenerateArgs),
    /// Similarity and classification metrics, optionally open-set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct BuildDataArgs {
    /// Source descriptors (`[[source]]` TOML); the bundled ten sources when absent.
    #[arg(long, env = "HHIR_SOURCES")]
    pub sources: Option<PathBuf>,
    /// Alias rules TSV; the bundled rules when absent.
    #[arg(long, env = "HHIR_RULES")]
    pub rules: Option<PathBuf>,
    /// Caption templates TSV; the bundled templates when absent.
    #[arg(long, env = "HHIR_TEMPLATES")]
    pub templates: Option<PathBuf>,
    /// Directory holding each source's `root_path`.
    #[arg(long, env = "HHIR_DATA_ROOT")]
    pub data_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, env = "HHIR_CLIP")]
    pub clip: PathBuf,
    #[arg(long, env = "HHIR_MASKS")]
    pub masks: PathBuf,
    /// Uniformly sample this many frames from each stream.
    #[arg(long, env = "HHIR_FRAMES")]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "HHIR_MANIFEST")]
    pub manifest: PathBuf,
    /// Class vocabulary; `vocab.json` next to the manifest when absent.
    #[arg(long, env = "HHIR_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long, env = "HHIR_RESUME")]
    pub resume: Option<PathBuf>,
    /// Total optimizer steps; overrides the config file.
    #[arg(long, env = "HHIR_STEPS")]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "HHIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "HHIR_MANIFEST")]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "HHIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "HHIR_MANIFEST")]
    pub manifest: PathBuf,
    /// Vocabulary the manifest's class indices refer to; `vocab.json` next
    /// to the manifest when absent.
    #[arg(long, env = "HHIR_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Classes known at training time; `--vocab` when absent.
    #[arg(long, env = "HHIR_SEEN_VOCAB")]
    pub seen_vocab: Option<PathBuf>,
    /// Evaluate only records of this source.
    #[arg(long, env = "HHIR_SLICE")]
    pub slice: Option<String>,
    /// Score these `id<TAB>caption` lines instead of generating captions.
    #[arg(long, env = "HHIR_CAPTIONS")]
    pub captions: Option<PathBuf>,
    /// Also run the open-set protocol; requires `--unseen`.
    #[arg(long, env = "HHIR_OPEN_SET")]
    pub open_set: bool,
    /// One unseen class name per line.
    #[arg(long, env = "HHIR_UNSEEN")]
    pub unseen: Option<PathBuf>,
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let out = cli
        .out
        .ok_or_else(|| CliError::Usage("--out (or HHIR_OUT) is required".into()))?;
    match cli.command {
        Command::BuildData(a) => cmd_build_data(&cfg, &a, &out).map(|_| ()),
        Command::Mask(a) => cmd_mask(&cfg, &a, &out),
        Command::Synth => cmd_synth(&cfg, &out).map(|_| ()),
        Command::Train(a) => cmd_train(&cfg, &a, &out).map(|_| ()),
        Command::Generate(a) => cmd_generate(&cfg, cli.seed, &a, &out).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(&cfg, cli.seed, &a, &out)?;
            print!("{}", report.to_table());
            Ok(())
        }
    }
}
