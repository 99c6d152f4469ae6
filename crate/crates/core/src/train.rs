//! Optimizer, learning-rate schedule, MLM pretraining and QA finetuning
//! loops, window-aggregated prediction and the context/background ablation
//! sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{aggregate_windows, MetricsReport, Prediction, WindowPrediction};
use crate::masking::{mask_example, MaskConfig, MaskedExample};
use crate::model::{predict_span, qa_logits, ModelState, Objective, TrainItem, DEFAULT_MAX_ANSWER_LEN};
use crate::packer::{pack_pretrain, pack_qa_record, PackConfig, PackedInput, PackedRecord, QaExample, QaRecord};
use crate::retrieval::Retriever;
use crate::tokenizer::Vocab;

/// Items per gradient chunk. Chunks run in parallel and are summed in
/// index order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 4;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_RUN: usize = 100;
const DROPOUT_SALT: u64 = 0xd50b_0f7e_a11c_e5ed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// When set, finetuning runs this many passes over the examples and
    /// `total_steps`/`warmup_steps` are derived from it.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_steps(1e-3, 1000, 16)
    }
}

impl TrainConfig {
    /// Warmup of 5% of `total_steps`.
    pub fn with_steps(peak_lr: f64, total_steps: usize, batch_size: usize) -> Self {
        TrainConfig {
            peak_lr,
            warmup_steps: total_steps / 20,
            total_steps,
            batch_size,
            epochs: None,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::InvalidConfig("clip_norm must be non-negative".into()));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig("peak_lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Resolves `epochs` against a dataset size.
    pub fn for_examples(&self, n: usize) -> TrainConfig {
        match self.epochs {
            Some(e) => {
                let total = e * n.div_ceil(self.batch_size);
                TrainConfig {
                    total_steps: total,
                    warmup_steps: total / 20,
                    ..*self
                }
            }
            None => *self,
        }
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`; 0 beyond.
pub fn triangular_lr(step: usize, cfg: &TrainConfig) -> f64 {
    if step > cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.peak_lr;
    }
    cfg.peak_lr * (cfg.total_steps - step) as f64 / span as f64
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(model: &ModelState, cfg: AdamConfig) -> Self {
        let n = model.num_params();
        AdamW {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay: model.decay_mask(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
            let wd = if self.decay[i] { c.weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (update + wd);
        }
    }
}

fn dropout_rng(seed: u64, step: usize, item: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
    rng.set_stream((step * batch + item) as u64);
    rng
}

/// Mean loss and gradient over `items`, computed in fixed-size chunks.
pub fn batch_gradients(model: &ModelState, items: &[&TrainItem], seed: u64, step: usize) -> Result<(f64, Vec<f64>)> {
    let n = items.len();
    if n == 0 {
        return Ok((0.0, vec![0.0; model.num_params()]));
    }
    let w = 1.0 / n as f64;
    let dropout = model.config().dropout > 0.0;
    let partials: Vec<Result<(f64, Vec<f64>)>> = items
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = vec![0.0; model.num_params()];
            let mut loss = 0.0;
            for (k, item) in chunk.iter().enumerate() {
                let idx = c * GRAD_CHUNK + k;
                let mut rng = dropout.then(|| dropout_rng(seed, step, idx, n));
                loss += model.accumulate_item(item, w, rng.as_mut(), &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for p in partials {
        let (l, g) = p?;
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total * w, grads))
}

fn clip(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.step, s.lr, s.loss));
        }
        out
    }
}

/// Called with `(step, model)` every `checkpoint_every` steps and once at
/// the end of training.
pub type CheckpointFn<'a> = dyn FnMut(usize, &ModelState) -> Result<()> + 'a;

/// Shared training loop. Batches are drawn from successive seeded
/// permutations of `items`.
pub fn train(
    model: &mut ModelState,
    items: &[TrainItem],
    cfg: &TrainConfig,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.total_steps == 0 || items.is_empty() {
        return Ok(report);
    }
    let mut checkpoint = checkpoint;
    let mut opt = AdamW::new(model, cfg.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut initial = None;
    let mut run = 0usize;
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&items[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = batch_gradients(model, &batch, cfg.seed, step)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let init = *initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            run += 1;
            if run >= DIVERGENCE_RUN {
                log::error!("diverged at step {step}: loss {loss}, initial {init}");
                return Err(Error::Diverged {
                    step,
                    loss,
                    initial: init,
                    run,
                });
            }
        } else {
            run = 0;
        }
        if cfg.clip_norm > 0.0 {
            clip(&mut grads, cfg.clip_norm);
        }
        let lr = triangular_lr(step, cfg);
        opt.step(model.params_mut(), &grads, lr);
        report.steps.push(StepLog { step, lr, loss });
        log::debug!("step {step} lr {lr:.3e} loss {loss:.4}");
        if let Some(cb) = checkpoint.as_deref_mut() {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.total_steps {
                cb(done, model)?;
            }
        }
    }
    if let Some(cb) = checkpoint {
        cb(cfg.total_steps, model)?;
    }
    Ok(report)
}

pub fn mlm_item(ex: &MaskedExample) -> TrainItem {
    TrainItem {
        ids: ex.input_ids.clone(),
        objective: Objective::Mlm {
            targets: ex.targets.clone(),
        },
    }
    .trimmed()
}

/// QA training item: candidates are CLS and every passage position.
pub fn qa_item(ex: &QaExample) -> TrainItem {
    let p = ex.packed.regions.passage;
    let mut candidates = vec![0];
    candidates.extend(p.start..p.end);
    TrainItem {
        ids: ex.packed.ids.clone(),
        objective: Objective::Qa {
            start: ex.answer.start,
            end: ex.answer.end,
            candidates,
        },
    }
    .trimmed()
}

/// MLM pretraining on masked examples.
pub fn pretrain(
    model: &mut ModelState,
    examples: &[MaskedExample],
    cfg: &TrainConfig,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<TrainReport> {
    let items: Vec<TrainItem> = examples.iter().map(mlm_item).collect();
    train(model, &items, cfg, checkpoint)
}

/// Joint finetuning of the encoder and span heads on labeled windows.
pub fn finetune_qa(
    model: &mut ModelState,
    examples: &[QaExample],
    cfg: &TrainConfig,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<TrainReport> {
    let items: Vec<TrainItem> = examples.iter().map(qa_item).collect();
    train(model, &items, &cfg.for_examples(items.len()), checkpoint)
}

/// Packs every page of the corpus into pretraining inputs: blocks of
/// `n_c - 2` tokens with entity backgrounds or following-context fallback.
pub fn pretrain_inputs(retriever: &Retriever<'_>, cfg: &PackConfig) -> Result<Vec<PackedInput>> {
    let mut out = Vec::new();
    for page_id in retriever.index().pages.keys() {
        for block in retriever.page_blocks(page_id, cfg.n_c - 2) {
            let bg = retriever.retrieve_pretrain_background(&block, cfg.n_b);
            out.push(pack_pretrain(&block.tokens, &bg, cfg)?);
        }
    }
    Ok(out)
}

/// Masks each packed input with its own RNG stream (stream = input index).
pub fn mask_inputs(inputs: &[PackedInput], cfg: &MaskConfig, vocab_size: usize) -> Result<Vec<MaskedExample>> {
    cfg.validate()?;
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, p)| mask_example(&p.ids, cfg, i as u64, vocab_size))
        .collect()
}

/// Mean eval-mode loss over `items`.
pub fn mean_loss(model: &ModelState, items: &[TrainItem]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut eval = model.clone();
    eval.set_dropout(0.0);
    Ok(batch_gradients(&eval, &refs, 0, 0)?.0)
}

/// Best span of one packed window.
pub fn predict_window(model: &ModelState, ex: &QaExample, max_answer_len: usize) -> Result<WindowPrediction> {
    let n = ex.packed.content_len();
    let ids = &ex.packed.ids[..n];
    let hidden = model.forward(ids, &vec![true; n])?;
    let (s, e) = qa_logits(&hidden, model);
    let sp = predict_span(&s, &e, ex.packed.regions.passage, max_answer_len);
    Ok(WindowPrediction {
        window_index: ex.window_index,
        span: sp.best,
        null_score: sp.null_score,
    })
}

/// Aggregated prediction for one record.
pub fn predict_record(model: &ModelState, rec: &PackedRecord) -> Result<Prediction> {
    let windows = rec
        .examples
        .iter()
        .map(|ex| predict_window(model, ex, DEFAULT_MAX_ANSWER_LEN))
        .collect::<Result<Vec<_>>>()?;
    Ok(match aggregate_windows(&windows) {
        Some((w, s, e, score)) => Prediction {
            qid: rec.record.qid.clone(),
            answer_text: rec.answer_text(w, s, e),
            score,
            source: Some((w, s, e)),
        },
        None => Prediction {
            qid: rec.record.qid.clone(),
            answer_text: String::new(),
            score: windows.iter().map(|w| w.null_score).fold(f64::INFINITY, f64::min),
            source: None,
        },
    })
}

/// Predictions for every record, in input order.
pub fn predict(model: &ModelState, records: &[PackedRecord]) -> Result<Vec<Prediction>> {
    records.par_iter().map(|r| predict_record(model, r)).collect()
}

/// Predicts and scores; fails on duplicate qids.
pub fn evaluate(model: &ModelState, records: &[PackedRecord]) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = predict(model, records)?;
    let report = MetricsReport::score(
        preds
            .iter()
            .zip(records)
            .map(|(p, r)| (p.qid.clone(), p.answer_text.clone(), r.record.answers.clone())),
    )?;
    Ok((report, preds))
}

/// Packs every record under `cfg`; records too long for the budget fail.
pub fn pack_records(
    records: &[QaRecord],
    vocab: &Vocab,
    retriever: Option<&Retriever<'_>>,
    cfg: &PackConfig,
) -> Result<Vec<PackedRecord>> {
    records
        .par_iter()
        .map(|r| pack_qa_record(r, vocab, retriever, cfg))
        .collect()
}

/// The (N_C, N_B) grid of the context/background ablation.
pub const ABLATION_GRID: [(usize, usize); 5] = [(512, 0), (384, 0), (384, 128), (256, 256), (128, 384)];

/// Ablation configurations; the stride is capped at half the context
/// budget so short contexts still overlap.
pub fn ablation_configs(stride: usize) -> Result<Vec<PackConfig>> {
    ABLATION_GRID
        .iter()
        .map(|&(n_c, n_b)| PackConfig::new(n_c, n_b, stride.min(n_c / 2)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_c: usize,
    pub n_b: usize,
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

/// Packs and evaluates one fixed model under each configuration.
pub fn ablate(
    model: &ModelState,
    records: &[QaRecord],
    vocab: &Vocab,
    retriever: Option<&Retriever<'_>>,
    configs: &[PackConfig],
) -> Result<Vec<AblationRow>> {
    configs
        .iter()
        .map(|cfg| {
            let packed = pack_records(records, vocab, retriever, cfg)?;
            let (report, _) = evaluate(model, &packed)?;
            Ok(AblationRow {
                n_c: cfg.n_c,
                n_b: cfg.n_b,
                em: report.em,
                f1: report.f1,
                n: report.n,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| N_C | N_B |    EM |    F1 |\n|----:|----:|------:|------:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {:>3} | {:>3} | {:>5.1} | {:>5.1} |\n",
            r.n_c, r.n_b, r.em, r.f1
        ));
    }
    out
}
