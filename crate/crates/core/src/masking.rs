//! Span masking for MLM pretraining over the whole packed input (context
//! and backgrounds alike).
//!
//! Span lengths follow a geometric distribution truncated to
//! `1..=max_span`; each span is replaced as a whole with MASK, random
//! tokens, or left unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{is_special, TokenId, MASK, NUM_SPECIAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaceProbs {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub mask_rate: f64,
    pub geom_p: f64,
    pub max_span: usize,
    pub replace_probs: ReplaceProbs,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mask_rate: 0.15,
            geom_p: 0.2,
            max_span: 10,
            replace_probs: ReplaceProbs {
                mask: 0.8,
                random: 0.1,
                keep: 0.1,
            },
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.replace_probs;
        let probs_ok = [r.mask, r.random, r.keep].iter().all(|p| (0.0..=1.0).contains(p))
            && (r.mask + r.random + r.keep - 1.0).abs() < 1e-9;
        if !probs_ok {
            return Err(Error::InvalidConfig("replacement probabilities must sum to 1".into()));
        }
        if self.max_span < 1 {
            return Err(Error::InvalidConfig("max_span must be at least 1".into()));
        }
        if !(self.geom_p > 0.0 && self.geom_p < 1.0) {
            return Err(Error::InvalidConfig("geom_p must be in (0, 1)".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::InvalidConfig("mask_rate must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Independent RNG stream for example `index` under `seed`, so examples can
/// be masked in any order or in parallel.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a span length from Geometric(geom_p) on {1, 2, ...} conditioned on
/// being at most `max_span` (rejection sampling).
pub fn sample_span_length<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> usize {
    let geom = Geometric::new(cfg.geom_p).expect("geom_p validated");
    loop {
        let len = geom.sample(rng) as usize + 1;
        if len <= cfg.max_span {
            return len;
        }
    }
}

/// Chooses `(start, length)` spans over the non-special positions of `ids`
/// until at least `mask_rate` of them are covered. Starts are uniform over
/// still-unmasked maskable positions; a span stops early at a special token
/// (so never crosses a SEP) or at an already-masked position.
pub fn sample_spans<R: Rng + ?Sized>(ids: &[TokenId], cfg: &MaskConfig, rng: &mut R) -> Vec<(usize, usize)> {
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    let target = cfg.mask_rate * maskable.len() as f64;
    // Free list with position -> slot index for O(1) removal.
    let mut free = maskable;
    let mut slot = vec![usize::MAX; ids.len()];
    for (k, &p) in free.iter().enumerate() {
        slot[p] = k;
    }
    let mut masked = 0usize;
    let mut spans = Vec::new();
    while (masked as f64) < target && !free.is_empty() {
        let len = sample_span_length(cfg, rng);
        let start = free[rng.random_range(0..free.len())];
        let mut pos = start;
        while pos < ids.len() && pos < start + len && slot[pos] != usize::MAX {
            let k = slot[pos];
            let last = free.len() - 1;
            free.swap(k, last);
            slot[free[k]] = k;
            free.pop();
            slot[pos] = usize::MAX;
            pos += 1;
        }
        masked += pos - start;
        spans.push((start, pos - start));
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input_ids: Vec<TokenId>,
    /// Original id at masked positions, `None` elsewhere.
    pub targets: Vec<Option<TokenId>>,
    pub mask_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<SpanAction>,
}

/// Applies whole-span replacement. Random replacements draw uniformly from
/// non-special ids `5..vocab_size`.
pub fn apply_mask<R: Rng + ?Sized>(
    ids: &[TokenId],
    spans: &[(usize, usize)],
    cfg: &MaskConfig,
    rng: &mut R,
    vocab_size: usize,
) -> Result<MaskedExample> {
    for &(start, len) in spans {
        let ok = len > 0 && start + len <= ids.len() && ids[start..start + len].iter().all(|&t| !is_special(t));
        if !ok {
            return Err(Error::InvalidSpan { start, len });
        }
    }
    let mut input_ids = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    let mut mask_positions = Vec::new();
    let mut actions = Vec::with_capacity(spans.len());
    let probs = &cfg.replace_probs;
    for &(start, len) in spans {
        let u: f64 = rng.random();
        let action = if u < probs.mask {
            SpanAction::Mask
        } else if u < probs.mask + probs.random {
            SpanAction::Random
        } else {
            SpanAction::Keep
        };
        for pos in start..start + len {
            targets[pos] = Some(ids[pos]);
            mask_positions.push(pos);
            match action {
                SpanAction::Mask => input_ids[pos] = MASK,
                SpanAction::Random if vocab_size > NUM_SPECIAL => {
                    input_ids[pos] = rng.random_range(NUM_SPECIAL as TokenId..vocab_size as TokenId)
                }
                _ => {}
            }
        }
        actions.push(action);
    }
    mask_positions.sort_unstable();
    Ok(MaskedExample {
        input_ids,
        targets,
        mask_positions,
        actions,
    })
}

/// Samples spans and applies them with the example's own RNG stream.
pub fn mask_example(ids: &[TokenId], cfg: &MaskConfig, example_index: u64, vocab_size: usize) -> Result<MaskedExample> {
    let mut rng = example_rng(cfg.seed, example_index);
    let spans = sample_spans(ids, cfg, &mut rng);
    apply_mask(ids, &spans, cfg, &mut rng, vocab_size)
}
