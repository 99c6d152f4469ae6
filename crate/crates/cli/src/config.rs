//! Run configuration: TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tek_core::masking::MaskConfig;
use tek_core::model::EncoderConfig;
use tek_core::packer::PackConfig;
use tek_core::synthetic::SyntheticConfig;
use tek_core::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Encoder shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        ModelShape {
            layers: d.layers,
            heads: d.heads,
            hidden: d.hidden,
            ffn: d.ffn,
            max_positions: d.max_positions,
            dropout: d.dropout,
        }
    }
}

impl ModelShape {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            max_positions: self.max_positions,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Qa,
    Pretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveSettings {
    pub mode: Mode,
    pub budget: usize,
}

impl Default for RetrieveSettings {
    fn default() -> Self {
        RetrieveSettings {
            mode: Mode::Qa,
            budget: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub vocab_size: usize,
    pub paths: Paths,
    pub pack: PackConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub model: ModelShape,
    pub retrieve: RetrieveSettings,
    pub synth: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: None,
            vocab_size: 30_000,
            paths: Paths::default(),
            pack: PackConfig::default(),
            mask: MaskConfig::default(),
            train: TrainConfig::default(),
            model: ModelShape::default(),
            retrieve: RetrieveSettings::default(),
            synth: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Propagates the top-level seed into the per-stage configurations.
    pub fn seeded(mut self) -> Self {
        self.mask.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }
}

/// Sets `$target` from an optional flag value.
macro_rules! apply {
    ($target:expr, $flag:expr) => {
        if let Some(v) = $flag {
            $target = v.clone();
        }
    };
}
pub(crate) use apply;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn populated_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.threads = Some(3);
        c.paths.corpus = Some("data/corpus.jsonl".into());
        c.pack = PackConfig::new(256, 256, 64).unwrap();
        c.mask.mask_rate = 0.123456789;
        c.train.peak_lr = 3.3e-5;
        c.train.epochs = Some(5);
        c.train.clip_norm = 0.0;
        c.model.dropout = 0.0;
        c.retrieve.mode = Mode::Pretrain;
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[pack]\nn_c = 256\nn_b = 256\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.pack.n_c, 256);
        assert_eq!(c.pack.total_len, 512);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 4\n").is_err());
    }
}
