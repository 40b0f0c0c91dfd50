//! Run configuration: one TOML file with a section per subcommand. Unknown
//! keys are rejected; command-line flags are applied on top; the resolved
//! configuration is echoed into every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maple::contact_eval::CvaeConfig;
use maple::extraction::ExtractionConfig;
use maple::policy::{PolicyConfig, ProtocolConfig, ToyEnvConfig};
use maple::prior_model::PriorModelConfig;
use maple::synth::{CorpusMix, PriorSceneSpec, SynthPoseSpec};
use maple::tokenizer::TokenizerConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Synthetic approach videos run through the extraction pipeline.
    #[default]
    Approach,
    /// Synthetic single-object scenes with analytic contact points.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub source: Source,
    /// Number of prior scenes (source = prior).
    pub samples: usize,
    /// Outcome mix of the generated approach corpus (source = approach).
    pub mix: CorpusMix,
    pub extraction: ExtractionConfig,
    pub scenes: PriorSceneSpec,
    /// Hand poses attached to prior scenes.
    pub poses: SynthPoseSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Pose corpus used when no manifest is given.
    pub corpus: SynthPoseSpec,
    pub model: TokenizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub demos: usize,
    pub env: ToyEnvConfig,
    pub bc: PolicyConfig,
    pub protocol: ProtocolConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            demos: 25,
            env: ToyEnvConfig::default(),
            bc: PolicyConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section's seed when the configuration is resolved.
    pub seed: u64,
    pub device: String,
    pub log_level: String,
    pub extract: ExtractSection,
    pub tokenizer: TokenizerSection,
    pub prior: PriorModelConfig,
    pub cvae: CvaeConfig,
    pub policy: PolicySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            log_level: "info".into(),
            extract: ExtractSection {
                samples: 2000,
                ..Default::default()
            },
            tokenizer: TokenizerSection::default(),
            prior: PriorModelConfig::default(),
            cvae: CvaeConfig::default(),
            policy: PolicySection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the global seed everywhere and checks global settings.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if self.device != "cpu" {
            bail!("unsupported device {:?}; only \"cpu\" is available", self.device);
        }
        let s = self.seed;
        self.extract.extraction.seed = s;
        self.extract.scenes.seed = s;
        self.extract.poses.seed = s;
        self.tokenizer.corpus.seed = s;
        self.tokenizer.model.seed = s;
        self.prior.seed = s;
        self.cvae.seed = s;
        self.policy.bc.seed = s;
        self.policy.protocol.base_seed = s;
        Ok(self)
    }

    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default().resolve(Some(7)).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.prior.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[prior]\nlearning_rate = 3").is_err());
        let ok: RunConfig = toml::from_str("[prior]\niterations = 5").unwrap();
        assert_eq!(ok.prior.iterations, 5);
        assert_eq!(ok.prior.batch_size, PriorModelConfig::default().batch_size);
    }

    #[test]
    fn desk_config_matches_the_desk_preset() {
        let cfg: RunConfig = toml::from_str(include_str!("../../../configs/desk.toml")).unwrap();
        let desk = PriorModelConfig::desk_scale();
        assert_eq!(cfg.prior.embedding_dim, desk.embedding_dim);
        assert_eq!(cfg.prior.encoder_layers, desk.encoder_layers);
        assert_eq!(cfg.prior.optimizer, desk.optimizer);
        assert_eq!(cfg.extract.source, Source::Prior);
    }

    #[test]
    fn non_cpu_device_is_refused() {
        let cfg = RunConfig {
            device: "cuda".into(),
            ..Default::default()
        };
        assert!(cfg.resolve(None).is_err());
    }
}
