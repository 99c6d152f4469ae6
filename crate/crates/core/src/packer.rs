//! Input packing under a fixed context/background token budget.
//!
//! Reading-comprehension inputs are laid out as
//! `[CLS] question [SEP] passage [SEP] bg_1 [SEP] bg_2 [SEP] ... [PAD]*`,
//! pretraining inputs as `[CLS] block [SEP] bg_1 [SEP] ... [PAD]*`. The
//! context part never exceeds `n_c` positions and the background part never
//! exceeds `n_b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normalize_answer;
use crate::retrieval::{Background, PretrainBackground, Retriever, SentenceRef};
use crate::tokenizer::{encode, split_words, TokenId, TokenizedText, Vocab, CLS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackConfig {
    pub total_len: usize,
    pub n_c: usize,
    pub n_b: usize,
    pub stride: usize,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            total_len: 512,
            n_c: 384,
            n_b: 128,
            stride: 128,
        }
    }
}

impl PackConfig {
    pub fn new(n_c: usize, n_b: usize, stride: usize) -> Result<Self> {
        let cfg = PackConfig {
            total_len: n_c + n_b,
            n_c,
            n_b,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c + self.n_b != self.total_len {
            return Err(Error::InvalidConfig(format!(
                "n_c ({}) + n_b ({}) must equal total_len ({})",
                self.n_c, self.n_b, self.total_len
            )));
        }
        if self.stride == 0 || self.stride > self.n_c {
            return Err(Error::InvalidConfig(format!(
                "stride {} must be in 1..={}",
                self.stride, self.n_c
            )));
        }
        if self.n_c < 3 {
            return Err(Error::InvalidConfig("n_c must be at least 3".into()));
        }
        Ok(())
    }
}

/// Half-open range of positions in a packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regions {
    pub cls: usize,
    /// Absent for pretraining inputs.
    pub question: Option<Span>,
    /// The passage window (QA) or the text block (pretraining).
    pub passage: Span,
    /// Formatted background sentences; each is followed by a SEP.
    pub backgrounds: Vec<Span>,
    /// Verbatim following-context tokens used instead of backgrounds.
    pub fallback: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedInput {
    /// Exactly `total_len` ids, PAD-filled.
    pub ids: Vec<TokenId>,
    pub regions: Regions,
    /// Positions up to and including the SEP closing the context part.
    pub context_len: usize,
    /// Positions used by backgrounds (including their SEPs) or fallback.
    pub background_len: usize,
    /// Document token offset of the passage window.
    pub window_start: usize,
    /// Backgrounds skipped because they did not fit the remaining budget.
    pub skipped_backgrounds: usize,
}

impl PackedInput {
    /// Number of non-PAD positions; PADs only ever trail.
    pub fn content_len(&self) -> usize {
        self.context_len + self.background_len
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    /// Checks every layout invariant; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, cfg: &PackConfig) -> std::result::Result<(), String> {
        let r = &self.regions;
        if self.ids.len() != cfg.total_len {
            return Err(format!("length {} != total_len {}", self.ids.len(), cfg.total_len));
        }
        if r.cls != 0 || self.ids[0] != CLS {
            return Err("position 0 is not CLS".into());
        }
        if self.context_len > cfg.n_c {
            return Err(format!("context {} exceeds n_c {}", self.context_len, cfg.n_c));
        }
        if self.background_len > cfg.n_b {
            return Err(format!("background {} exceeds n_b {}", self.background_len, cfg.n_b));
        }
        let mut pos = 1;
        if let Some(q) = r.question {
            if q.start != pos {
                return Err("question does not follow CLS".into());
            }
            if self.ids[q.end] != SEP {
                return Err("question not closed by SEP".into());
            }
            pos = q.end + 1;
        }
        if r.passage.start != pos || self.ids.get(r.passage.end) != Some(&SEP) {
            return Err("passage misplaced or not closed by SEP".into());
        }
        if r.passage.end + 1 != self.context_len {
            return Err("context_len does not end after passage SEP".into());
        }
        let mut pos = self.context_len;
        for b in &r.backgrounds {
            if b.start != pos || b.is_empty() || self.ids[b.end] != SEP {
                return Err(format!("background span {b:?} misplaced"));
            }
            pos = b.end + 1;
        }
        if let Some(f) = r.fallback {
            if !r.backgrounds.is_empty() || f.start != pos {
                return Err("fallback region misplaced".into());
            }
            pos = f.end;
        }
        if pos != self.content_len() {
            return Err("background_len does not match regions".into());
        }
        let specials_ok = |span: &Span| {
            self.ids[span.start..span.end]
                .iter()
                .all(|&t| t != CLS && t != SEP && t != PAD)
        };
        let mut spans: Vec<Span> = r.question.iter().copied().collect();
        spans.push(r.passage);
        spans.extend(r.backgrounds.iter().copied());
        if !spans.iter().all(specials_ok) {
            return Err("special token inside a content region".into());
        }
        if self.ids[self.content_len()..].iter().any(|&t| t != PAD) {
            return Err("non-PAD token after content".into());
        }
        Ok(())
    }
}

/// Result of greedy background fitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fit {
    /// Indices into the ranked list, in rank order.
    pub selected: Vec<usize>,
    pub skipped: usize,
    /// Budget consumed, SEPs included.
    pub used: usize,
}

/// Walks `ranked` in order and keeps every background whose formatted
/// tokens plus one SEP fit in what is left of `budget`. Backgrounds that do
/// not fit are skipped whole; later ones are still tried.
pub fn fit_backgrounds(ranked: &[Background], budget: usize) -> Fit {
    let mut fit = Fit {
        selected: Vec::new(),
        skipped: 0,
        used: 0,
    };
    for (i, b) in ranked.iter().enumerate() {
        let need = b.formatted_tokens.len() + 1;
        if fit.used + need <= budget {
            fit.selected.push(i);
            fit.used += need;
        } else {
            fit.skipped += 1;
        }
    }
    fit
}

fn finish(mut ids: Vec<TokenId>, total_len: usize) -> Vec<TokenId> {
    ids.resize(total_len, PAD);
    ids
}

fn append_backgrounds(ids: &mut Vec<TokenId>, ranked: &[Background], budget: usize) -> (Vec<Span>, usize, usize) {
    let fit = fit_backgrounds(ranked, budget);
    let mut spans = Vec::with_capacity(fit.selected.len());
    for &i in &fit.selected {
        let start = ids.len();
        ids.extend_from_slice(&ranked[i].formatted_tokens);
        spans.push(Span::new(start, ids.len()));
        ids.push(SEP);
    }
    (spans, fit.used, fit.skipped)
}

/// Packs a reading-comprehension input. The caller sizes the passage window
/// so that `1 + |q| + 1 + |p| + 1 <= n_c`.
pub fn pack_rc(
    question: &[TokenId],
    passage: &[TokenId],
    backgrounds: &[Background],
    cfg: &PackConfig,
) -> Result<PackedInput> {
    if question.len() + 3 > cfg.n_c {
        return Err(Error::QuestionTooLong {
            len: question.len(),
            n_c: cfg.n_c,
        });
    }
    if question.len() + passage.len() + 3 > cfg.n_c {
        return Err(Error::PassageTooLong { len: passage.len() });
    }
    let mut ids = Vec::with_capacity(cfg.total_len);
    ids.push(CLS);
    ids.extend_from_slice(question);
    let q = Span::new(1, ids.len());
    ids.push(SEP);
    let p_start = ids.len();
    ids.extend_from_slice(passage);
    let p = Span::new(p_start, ids.len());
    ids.push(SEP);
    let context_len = ids.len();
    let (spans, used, skipped) = append_backgrounds(&mut ids, backgrounds, cfg.n_b);
    Ok(PackedInput {
        ids: finish(ids, cfg.total_len),
        regions: Regions {
            cls: 0,
            question: Some(q),
            passage: p,
            backgrounds: spans,
            fallback: None,
        },
        context_len,
        background_len: used,
        window_start: 0,
        skipped_backgrounds: skipped,
    })
}

/// Packs a pretraining input: `[CLS] block [SEP]` followed by either fitted
/// entity backgrounds or the verbatim following context. The whole sequence
/// shares one segment.
pub fn pack_pretrain(block: &[TokenId], background: &PretrainBackground, cfg: &PackConfig) -> Result<PackedInput> {
    let capacity = cfg.n_c.saturating_sub(2);
    if block.len() > capacity {
        return Err(Error::BlockTooLong {
            len: block.len(),
            capacity,
        });
    }
    let mut ids = Vec::with_capacity(cfg.total_len);
    ids.push(CLS);
    ids.extend_from_slice(block);
    let p = Span::new(1, ids.len());
    ids.push(SEP);
    let context_len = ids.len();
    let (backgrounds, fallback, used, skipped) = match background {
        PretrainBackground::Entities { backgrounds } => {
            let (spans, used, skipped) = append_backgrounds(&mut ids, backgrounds, cfg.n_b);
            (spans, None, used, skipped)
        }
        PretrainBackground::Fallback { tokens } => {
            let take = tokens.len().min(cfg.n_b);
            let start = ids.len();
            ids.extend_from_slice(&tokens[..take]);
            let span = (take > 0).then(|| Span::new(start, ids.len()));
            (Vec::new(), span, take, 0)
        }
    };
    Ok(PackedInput {
        ids: finish(ids, cfg.total_len),
        regions: Regions {
            cls: 0,
            question: None,
            passage: p,
            backgrounds,
            fallback,
        },
        context_len,
        background_len: used,
        window_start: 0,
        skipped_backgrounds: skipped,
    })
}

/// A passage window over a tokenized document: tokens `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Passage window capacity left after the question and three specials.
pub fn window_capacity(question_len: usize, cfg: &PackConfig) -> Result<usize> {
    let capacity = cfg.n_c as i64 - question_len as i64 - 3;
    if capacity <= 0 {
        return Err(Error::QuestionConsumesBudget { capacity });
    }
    Ok(capacity as usize)
}

/// Windows start at 0, stride, 2*stride, ...; the last one is cut at the
/// document end and no window starts past it. An empty document yields one
/// empty window.
pub fn sliding_windows(doc_len: usize, question_len: usize, cfg: &PackConfig) -> Result<Vec<Window>> {
    let capacity = window_capacity(question_len, cfg)?;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + capacity).min(doc_len);
        out.push(Window { start, end });
        if end >= doc_len {
            break;
        }
        start += cfg.stride;
        if start >= doc_len {
            break;
        }
    }
    Ok(out)
}

/// (start, end) positions of the labeled answer in the packed ids, or
/// `(0, 0)` for the CLS no-answer label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerLabel {
    pub start: usize,
    pub end: usize,
}

impl AnswerLabel {
    pub const NULL: AnswerLabel = AnswerLabel { start: 0, end: 0 };

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }
}

/// Distant supervision: the earliest (then shortest) token span of the
/// passage window whose source text EM-normalizes to a normalized gold
/// answer. Spans must start and end on tokens that survive normalization,
/// so leading articles and trailing punctuation are never swallowed.
/// Backgrounds are never searched.
pub fn label_answer(doc: &TokenizedText, window: Window, passage: Span, gold_answers: &[String]) -> AnswerLabel {
    let golds: Vec<String> = gold_answers
        .iter()
        .map(|g| normalize_answer(g))
        .filter(|g| !g.is_empty())
        .collect();
    if golds.is_empty() || window.is_empty() {
        return AnswerLabel::NULL;
    }
    let max_tokens = gold_answers.iter().map(|g| split_words(g).len()).max().unwrap_or(0);
    let content: Vec<bool> = (window.start..window.end)
        .map(|i| !normalize_answer(&doc.surface(i, i)).is_empty())
        .collect();
    for i in 0..window.len() {
        if !content[i] {
            continue;
        }
        for j in i..window.len().min(i + max_tokens) {
            if !content[j] {
                continue;
            }
            let text = normalize_answer(&doc.surface(window.start + i, window.start + j));
            if golds.contains(&text) {
                return AnswerLabel {
                    start: passage.start + i,
                    end: passage.start + j,
                };
            }
        }
    }
    AnswerLabel::NULL
}

/// An MRQA-style QA record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qid: String,
    pub question: String,
    pub context: String,
    #[serde(default)]
    pub answers: Vec<String>,
    /// Corpus sentences the context was taken from, if any; they are never
    /// retrieved as backgrounds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub passage_refs: Vec<SentenceRef>,
}

/// One packed window of a QA record with its distant-supervision label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub qid: String,
    pub window_index: usize,
    pub window: Window,
    pub packed: PackedInput,
    pub answer: AnswerLabel,
}

/// A tokenized record with all of its windows packed and labeled.
#[derive(Debug, Clone)]
pub struct PackedRecord {
    pub record: QaRecord,
    pub context: TokenizedText,
    pub examples: Vec<QaExample>,
}

impl PackedRecord {
    /// Source text of packed positions `start..=end` of window `w`.
    pub fn answer_text(&self, w: usize, start: usize, end: usize) -> String {
        let ex = &self.examples[w];
        let p = ex.packed.regions.passage;
        self.context
            .surface(ex.window.start + (start - p.start), ex.window.start + (end - p.start))
    }
}

/// Tokenizes, windows, retrieves backgrounds for and packs one QA record.
/// With `retriever == None` or `n_b == 0` no backgrounds are added.
pub fn pack_qa_record(
    record: &QaRecord,
    vocab: &Vocab,
    retriever: Option<&Retriever<'_>>,
    cfg: &PackConfig,
) -> Result<PackedRecord> {
    let question = encode(&record.question, vocab);
    if question.len() + 3 > cfg.n_c {
        return Err(Error::QuestionTooLong {
            len: question.len(),
            n_c: cfg.n_c,
        });
    }
    let context = encode(&record.context, vocab);
    let windows = sliding_windows(context.len(), question.len(), cfg)?;
    let question_mentions = match retriever {
        Some(r) if cfg.n_b > 0 => Some(r.index().link_entities(&record.question)),
        _ => None,
    };
    let mut examples = Vec::with_capacity(windows.len());
    for (wi, w) in windows.into_iter().enumerate() {
        let passage_ids = &context.ids[w.start..w.end];
        let backgrounds = match (retriever, &question_mentions) {
            (Some(r), Some(qm)) => {
                let passage_text = if w.is_empty() {
                    String::new()
                } else {
                    context.surface(w.start, w.end - 1)
                };
                let mut query = r.qa_query("", &question.ids, &passage_text);
                let mut mentions = qm.clone();
                mentions.append(&mut query.mentions);
                query.mentions = mentions;
                r.rank_backgrounds(&query, &record.passage_refs)
            }
            _ => Vec::new(),
        };
        let mut packed = pack_rc(&question.ids, passage_ids, &backgrounds, cfg)?;
        packed.window_start = w.start;
        let answer = label_answer(&context, w, packed.regions.passage, &record.answers);
        examples.push(QaExample {
            qid: record.qid.clone(),
            window_index: wi,
            window: w,
            packed,
            answer,
        });
    }
    Ok(PackedRecord {
        record: record.clone(),
        context,
        examples,
    })
}

/// Human-readable rendering of the non-PAD part of a packed input, with
/// specials spelled out (`[CLS]`, `[SEP]`).
pub fn render_packed(packed: &PackedInput, vocab: &Vocab) -> String {
    packed.ids[..packed.content_len()]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("[?]"))
        .collect::<Vec<_>>()
        .join(" ")
}
