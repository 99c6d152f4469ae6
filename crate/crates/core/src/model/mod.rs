//! Small bidirectional Transformer encoder (pre-norm, GELU) with a tied MLM
//! head and start/end span classifiers. Forward and backward passes are
//! written out by hand over a single flat parameter buffer.

mod checkpoint;
mod encoder;
mod heads;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use encoder::{ForwardCache, Objective, TrainItem};
pub use heads::{mlm_loss, predict_span, qa_logits, qa_loss, SpanPrediction, DEFAULT_MAX_ANSWER_LEN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers, hidden 128, 4 heads, ffn 512.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            hidden: 128,
            ffn: 512,
            max_positions: 512,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIAL || self.max_positions == 0 || self.ffn == 0 {
            return Err(Error::InvalidConfig("degenerate encoder dimensions".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Offsets of one layer's tensors in the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// A named tensor in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Vectors (biases, norm parameters) are excluded from weight decay.
    pub fn decays(&self) -> bool {
        self.shape.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub mlm_bias: usize,
    pub qa_start: usize,
    pub qa_end: usize,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl Layout {
    fn new(c: &EncoderConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let (h, f) = (c.hidden, c.ffn);
        let tok_emb = add("tok_emb".into(), vec![c.vocab_size, h]);
        let pos_emb = add("pos_emb".into(), vec![c.max_positions, h]);
        let layers = (0..c.layers)
            .map(|l| {
                let mut t = |n: &str, s: Vec<usize>| add(format!("layer{l}.{n}"), s);
                LayerOffsets {
                    ln1_g: t("ln1_g", vec![h]),
                    ln1_b: t("ln1_b", vec![h]),
                    wq: t("wq", vec![h, h]),
                    bq: t("bq", vec![h]),
                    wk: t("wk", vec![h, h]),
                    bk: t("bk", vec![h]),
                    wv: t("wv", vec![h, h]),
                    bv: t("bv", vec![h]),
                    wo: t("wo", vec![h, h]),
                    bo: t("bo", vec![h]),
                    ln2_g: t("ln2_g", vec![h]),
                    ln2_b: t("ln2_b", vec![h]),
                    w1: t("w1", vec![h, f]),
                    b1: t("b1", vec![f]),
                    w2: t("w2", vec![f, h]),
                    b2: t("b2", vec![h]),
                }
            })
            .collect();
        let lnf_g = add("lnf_g".into(), vec![h]);
        let lnf_b = add("lnf_b".into(), vec![h]);
        let mlm_bias = add("mlm_bias".into(), vec![c.vocab_size]);
        let qa_start = add("qa_start".into(), vec![h]);
        let qa_end = add("qa_end".into(), vec![h]);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            mlm_bias,
            qa_start,
            qa_end,
            tensors,
            total,
        }
    }
}

/// Encoder parameters. All tensors live in `params` in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: EncoderConfig,
    layout: Layout,
    params: Vec<f64>,
}

const INIT_STD: f64 = 0.02;

impl ModelState {
    /// Random initialization: weights and embeddings ~ N(0, 0.02²), norm
    /// gains 1, biases 0.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in &layout.tensors {
            let slice = &mut params[t.offset..t.offset + t.numel()];
            let base = t.name.rsplit('.').next().unwrap_or(&t.name);
            if base.ends_with("_g") {
                slice.fill(1.0);
            } else if t.decays() || base.starts_with("qa_") {
                for v in slice.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(ModelState { config, layout, params })
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(ModelState { config, layout, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor_info(&self, name: &str) -> Option<&TensorInfo> {
        self.layout.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensor_info(name)
            .map(|t| &self.params[t.offset..t.offset + t.numel()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.tensor_info(name)?.clone();
        Some(&mut self.params[t.offset..t.offset + t.numel()])
    }

    /// Per-parameter weight-decay mask (true for matrices).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for t in &self.layout.tensors {
            if t.decays() {
                mask[t.offset..t.offset + t.numel()].fill(true);
            }
        }
        mask
    }

    /// Changes the dropout rate, e.g. 0 for deterministic evaluation.
    pub fn set_dropout(&mut self, dropout: f64) {
        self.config.dropout = dropout;
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}
