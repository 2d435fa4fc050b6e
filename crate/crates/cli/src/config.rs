use std::fs;
use std::path::Path;

use hhir_core::eval::ClassifierPromptSpec;
use hhir_core::fusion_lm::Decode;
use hhir_core::synth::SynthConfig;
use hhir_core::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponderKind {
    /// Greedy answer from the frozen LM.
    Lm,
    /// The generated caption itself.
    #[default]
    Echo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub responder: ResponderKind,
    pub responder_max_len: usize,
    pub prompt: ClassifierPromptSpec,
    pub decode: Decode,
    pub max_caption_len: usize,
    pub embedder_dim: usize,
    pub embedder_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            responder: ResponderKind::Echo,
            responder_max_len: 8,
            prompt: ClassifierPromptSpec::default(),
            decode: Decode::Greedy,
            max_caption_len: 32,
            embedder_dim: 256,
            embedder_seed: 17,
        }
    }
}

/// Contents of the `--config` TOML file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads `path` (defaults when absent) and applies the seed override to
    /// every seeded stage.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        Ok(cfg)
    }
}
