//! Experiment configuration: everything a run needs besides the code.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{swiglu_inner, BackboneConfig};
use crate::diagnostics::{DonorProbeConfig, StratifyConfig, SWEEP_CLAMPS};
use crate::engram::EngramModuleConfig;
use crate::error::{config_err, Result};
use crate::hashing::BankVariant;
use crate::inference::SamplerConfig;
use crate::model::ModelConfig;
use crate::rng;
use crate::tokens::{generate_range, CorpusSpec, TokenGrid};
use crate::training::TrainConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const VERSION_FILE: &str = "VERSION";

/// Build identity written next to every artifact.
pub fn version_string() -> String {
    let describe = option_env!("ENGRAM_AR_GIT_DESCRIBE").unwrap_or("unknown");
    format!("engram-ar {} ({describe})", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Held-out grids used as donor-probe references.
    pub references: usize,
    pub donor: DonorProbeConfig,
    pub clamps: Vec<Option<f64>>,
    pub jaccard: StratifyConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            references: 16,
            donor: DonorProbeConfig::default(),
            clamps: SWEEP_CLAMPS.to_vec(),
            jaccard: StratifyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Root seed. Component seeds are derived from it by [`ExperimentConfig::resolve`].
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub train_size: usize,
    /// First sample index of the held-out split.
    pub eval_start: u64,
    pub eval_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub probe: ProbeSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// The desk-scale toy run: d=64, L=4, 64 image tokens on an 8x8 grid,
    /// memory at layers 0 and 2.
    pub fn toy() -> Self {
        let corpus = CorpusSpec::default();
        let backbone = BackboneConfig {
            num_layers: 4,
            hidden: 64,
            num_heads: 4,
            ffn_inner: swiglu_inner(64),
            image_vocab: corpus.vocab_size,
            num_classes: corpus.num_classes,
            aux_tokens: corpus.aux_tokens,
            grid_height: corpus.grid_height,
            grid_width: corpus.grid_width,
            rope_base: 10_000.0,
        };
        let engram = [0, 2]
            .iter()
            .map(|&l| EngramModuleConfig::new(l, BankVariant::Seq1d, 2, 16, 1009))
            .collect();
        ExperimentConfig {
            seed: 0,
            corpus,
            train_size: 2048,
            eval_start: 1 << 20,
            eval_size: 64,
            model: ModelConfig {
                backbone,
                engram,
                hash_seed: 0,
            },
            train: TrainConfig {
                lr: TOY_LR,
                batch_size: 8,
                total_steps: 2000,
                log_interval: 100,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            probe: ProbeSettings::default(),
            output_dir: PathBuf::from("runs/toy"),
        }
        .resolve()
    }

    /// Re-derive every component seed from the root seed. Idempotent.
    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        let part = |name: &str| rng::derive_seed(s, &[rng::fnv1a(name.as_bytes())]);
        self.corpus.seed = part("corpus");
        self.model.hash_seed = part("hash");
        self.train.seed = part("train");
        self.sampler.seed = part("sampler");
        self.probe.donor.seed = part("donor");
        self.probe.jaccard.seed = part("jaccard");
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        let b = &self.model.backbone;
        if b.image_vocab != self.corpus.vocab_size
            || b.num_classes != self.corpus.num_classes
            || b.aux_tokens != self.corpus.aux_tokens
            || b.grid_height != self.corpus.grid_height
            || b.grid_width != self.corpus.grid_width
        {
            return config_err("model vocabulary or grid does not match the corpus");
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return config_err("train_size and eval_size must be positive");
        }
        if self.eval_start < self.train_size as u64 {
            return config_err("held-out split overlaps the training split");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Write the config and version string into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.to_json())?;
        fs::write(dir.join(VERSION_FILE), version_string() + "\n")?;
        Ok(())
    }

    pub fn train_split(&self) -> Result<Vec<TokenGrid>> {
        generate_range(&self.corpus, 0, self.train_size)
    }

    pub fn eval_split(&self) -> Result<Vec<TokenGrid>> {
        generate_range(&self.corpus, self.eval_start, self.eval_size)
    }
}

pub const TOY_LR: f64 = 3e-3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid_and_round_trips() {
        let c = ExperimentConfig::toy();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.clone().resolve(), back);
    }

    #[test]
    fn seeds_follow_the_root() {
        let a = ExperimentConfig::toy();
        let b = a.clone().with_seed(7);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.corpus.seed, b.corpus.seed);
        assert_eq!(b.clone().with_seed(7), b);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut c = ExperimentConfig::toy();
        c.eval_start = 10;
        assert!(c.validate().is_err());
    }
}
