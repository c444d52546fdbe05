//! Training configuration, read from a TOML file.

use crate::ctc::{CtcTap, HierarchicalLossSpec};
use crate::error::{Error, Result};
use crate::units::UnitFamily;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ctc,
    Lm,
    Rnnt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// LSTM widths per encoder layer, bottom to top.
    pub encoder_widths: Vec<usize>,
    /// LSTM widths of the prediction network (and the LM).
    pub decoder_widths: Vec<usize>,
    pub joint_width: usize,
    /// Input embedding dimension; omit for one-hot LM inputs.
    pub embed_dim: Option<usize>,
    pub feature_dim: usize,
    /// Optional learned time reduction: (after encoder layer, factor).
    pub time_conv: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Heavy-ball momentum coefficient; 0.0 recovers plain SGD.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
}

fn default_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitsConfig {
    pub family: UnitFamily,
    /// Latent class count; required for the phoneme (abstract label) family.
    pub vocab_size: Option<usize>,
    /// Wordpiece vocabulary file; required for the wordpiece family.
    pub vocab_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransferConfig {
    /// CTC checkpoint to initialize the encoder from.
    pub encoder_source: Option<PathBuf>,
    /// LM checkpoint to initialize the prediction network from.
    pub decoder_source: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TapConfig {
    pub depth: usize,
    pub family: UnitFamily,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub units: UnitsConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    /// CTC tap heads; defaults to a single tap at the top layer.
    #[serde(default)]
    pub taps: Option<Vec<TapConfig>>,
    /// Optional per-source corpus weight (single synthetic source).
    #[serde(default)]
    pub source_weight: Option<f64>,
}

impl TrainingConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.encoder_widths.is_empty() || self.model.decoder_widths.is_empty() {
            return Err(Error::Invalid("encoder and decoder need layers".into()));
        }
        match self.units.family {
            UnitFamily::Phoneme if self.units.vocab_size.is_none() => {
                return Err(Error::Invalid(
                    "phoneme (abstract label) units need units.vocab_size".into(),
                ));
            }
            UnitFamily::Wordpiece if self.units.vocab_path.is_none() => {
                return Err(Error::Invalid(
                    "wordpiece units need units.vocab_path".into(),
                ));
            }
            _ => {}
        }
        if self.stage == Stage::Ctc {
            // Tap depths must sit inside the encoder; validated again when
            // the loss spec is built.
            self.hierarchical_spec()?;
        }
        Ok(())
    }

    /// The CTC loss topology for this config (default: one tap on top).
    pub fn hierarchical_spec(&self) -> Result<HierarchicalLossSpec> {
        let taps = match &self.taps {
            Some(taps) => taps
                .iter()
                .map(|t| CtcTap {
                    depth: t.depth,
                    units: t.family,
                    weight: t.weight,
                })
                .collect(),
            None => vec![CtcTap {
                depth: self.model.encoder_widths.len(),
                units: self.units.family,
                weight: 1.0,
            }],
        };
        for tap in &taps {
            if tap.depth == 0 || tap.depth > self.model.encoder_widths.len() {
                return Err(Error::Invalid(format!(
                    "tap depth {} outside encoder of {} layers",
                    tap.depth,
                    self.model.encoder_widths.len()
                )));
            }
        }
        HierarchicalLossSpec::new(taps)
    }

    /// SHA-256 of the canonical serialized form, recorded in run manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
