use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::encoder::{grad1, grad2, view1, view2};
use super::ModelState;
use crate::error::{Error, Result};
use crate::packer::Span;
use crate::tokenizer::TokenId;

pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn masked_rows(targets: &[Option<TokenId>]) -> Vec<(usize, TokenId)> {
    targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .collect()
}

fn mlm_logits(state: &ModelState, hidden: &Array2<f64>, rows: &[(usize, TokenId)]) -> Array2<f64> {
    let c = state.config();
    let p = state.params();
    let l = &state.layout;
    let hm = hidden.select(Axis(0), &rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let mut logits = hm.dot(&view2(p, l.tok_emb, c.vocab_size, c.hidden).t());
    logits += &view1(p, l.mlm_bias, c.vocab_size);
    logits
}

/// Mean cross-entropy over positions with a target. Logits are the hidden
/// states against the (tied) token embeddings plus an output bias. With no
/// masked position the loss is 0.
pub fn mlm_loss(hidden: &Array2<f64>, targets: &[Option<TokenId>], state: &ModelState) -> f64 {
    let rows = masked_rows(targets);
    if rows.is_empty() {
        log::warn!("MLM loss over zero masked positions");
        return 0.0;
    }
    let logits = mlm_logits(state, hidden, &rows);
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(&rows)
        .map(|(row, &(_, t))| -log_softmax_row(row.as_slice().expect("contiguous"))[t as usize])
        .sum();
    total / rows.len() as f64
}

/// MLM loss and its gradient: head gradients (scaled) go into `grads`,
/// the scaled gradient with respect to `hidden` is returned.
pub(crate) fn mlm_loss_grad(
    state: &ModelState,
    hidden: &Array2<f64>,
    targets: &[Option<TokenId>],
    scale: f64,
    grads: &mut [f64],
) -> (f64, Array2<f64>) {
    let mut d_hidden = Array2::zeros(hidden.dim());
    let rows = masked_rows(targets);
    if rows.is_empty() {
        log::warn!("MLM loss over zero masked positions");
        return (0.0, d_hidden);
    }
    let c = state.config();
    let l = &state.layout;
    let m = rows.len() as f64;
    let mut dl = mlm_logits(state, hidden, &rows);
    let mut loss = 0.0;
    for (mut row, &(_, t)) in dl.rows_mut().into_iter().zip(&rows) {
        let lp = log_softmax_row(row.as_slice().expect("contiguous"));
        loss -= lp[t as usize];
        for (d, v) in row.iter_mut().zip(&lp) {
            *d = v.exp();
        }
        row[t as usize] -= 1.0;
        row *= scale / m;
    }
    let emb = view2(state.params(), l.tok_emb, c.vocab_size, c.hidden);
    let dhm = dl.dot(&emb);
    for (k, &(i, _)) in rows.iter().enumerate() {
        d_hidden.row_mut(i).assign(&dhm.row(k));
    }
    let hm = hidden.select(Axis(0), &rows.iter().map(|r| r.0).collect::<Vec<_>>());
    {
        let mut de = grad2(grads, l.tok_emb, c.vocab_size, c.hidden);
        ndarray::linalg::general_mat_mul(1.0, &dl.t(), &hm, 1.0, &mut de);
    }
    let mut db = grad1(grads, l.mlm_bias, c.vocab_size);
    db += &dl.sum_axis(Axis(0));
    (loss / m, d_hidden)
}

/// Start and end logits at every position.
pub fn qa_logits(hidden: &Array2<f64>, state: &ModelState) -> (Vec<f64>, Vec<f64>) {
    let h = state.config().hidden;
    let p = state.params();
    let l = &state.layout;
    let s = hidden.dot(&view1(p, l.qa_start, h));
    let e = hidden.dot(&view1(p, l.qa_end, h));
    (s.to_vec(), e.to_vec())
}

fn candidate_xent(logits: &[f64], gold: usize, candidates: &[usize]) -> Result<(f64, Vec<f64>)> {
    let k = candidates
        .iter()
        .position(|&c| c == gold)
        .ok_or(Error::GoldNotCandidate(gold))?;
    let sub: Vec<f64> = candidates
        .iter()
        .map(|&c| logits.get(c).copied().ok_or(Error::GoldNotCandidate(c)))
        .collect::<Result<_>>()?;
    let lp = log_softmax_row(&sub);
    Ok((-lp[k], lp))
}

/// Mean of the start and end cross-entropies, each a softmax over the
/// candidate positions only.
pub fn qa_loss(
    start_logits: &[f64],
    end_logits: &[f64],
    gold_start: usize,
    gold_end: usize,
    candidates: &[usize],
) -> Result<f64> {
    let (ls, _) = candidate_xent(start_logits, gold_start, candidates)?;
    let (le, _) = candidate_xent(end_logits, gold_end, candidates)?;
    Ok(0.5 * (ls + le))
}

pub(crate) fn qa_loss_grad(
    state: &ModelState,
    hidden: &Array2<f64>,
    gold_start: usize,
    gold_end: usize,
    candidates: &[usize],
    scale: f64,
    grads: &mut [f64],
) -> Result<(f64, Array2<f64>)> {
    let h = state.config().hidden;
    let l = &state.layout;
    let (start_logits, end_logits) = qa_logits(hidden, state);
    let mut d_hidden = Array2::zeros(hidden.dim());
    let mut loss = 0.0;
    for (logits, gold, off) in [
        (&start_logits, gold_start, l.qa_start),
        (&end_logits, gold_end, l.qa_end),
    ] {
        let (xent, lp) = candidate_xent(logits, gold, candidates)?;
        loss += 0.5 * xent;
        let w: Array1<f64> = view1(state.params(), off, h).to_owned();
        let mut dw = Array1::zeros(h);
        for (&pos, lpk) in candidates.iter().zip(&lp) {
            let mut d = lpk.exp();
            if pos == gold {
                d -= 1.0;
            }
            d *= 0.5 * scale;
            d_hidden.row_mut(pos).scaled_add(d, &w);
            dw.scaled_add(d, &hidden.row(pos));
        }
        let mut g = grad1(grads, off, h);
        g += &dw;
    }
    Ok((loss, d_hidden))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    /// Best `(start, end, start_logit + end_logit)` inside the passage.
    pub best: Option<(usize, usize, f64)>,
    /// `start_logits[CLS] + end_logits[CLS]`.
    pub null_score: f64,
}

/// Highest-scoring span `i <= j < i + max_answer_len` with both ends in
/// `passage`. Ties go to the earliest start, then the earliest end.
pub fn predict_span(start_logits: &[f64], end_logits: &[f64], passage: Span, max_answer_len: usize) -> SpanPrediction {
    let null_score = match (start_logits.first(), end_logits.first()) {
        (Some(s), Some(e)) => s + e,
        _ => f64::NEG_INFINITY,
    };
    let end = passage.end.min(start_logits.len()).min(end_logits.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for i in passage.start..end {
        for j in i..end.min(i + max_answer_len) {
            let score = start_logits[i] + end_logits[j];
            if best.is_none_or(|b| score > b.2) {
                best = Some((i, j, score));
            }
        }
    }
    SpanPrediction { best, null_score }
}

#[cfg(test)]
mod tests {
    use super::super::{EncoderConfig, Objective, TrainItem};
    use super::*;
    use crate::tokenizer::{CLS, SEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, hidden: usize, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            heads: 2,
            hidden,
            ffn: 2 * hidden,
            max_positions: 16,
            vocab_size: vocab,
            dropout: 0.0,
        }
    }

    #[test]
    fn uniform_mlm_logits_give_ln_v() {
        let mut m = ModelState::new(cfg(1, 4, 37), 0).unwrap();
        m.tensor_mut("tok_emb").unwrap().fill(0.0);
        let hidden = Array2::from_elem((3, 4), 0.7);
        let loss = mlm_loss(&hidden, &[Some(6), None, Some(30)], &m);
        assert!((loss - 37f64.ln()).abs() < 1e-12);
        assert_eq!(mlm_loss(&hidden, &[None; 3], &m), 0.0);
    }

    #[test]
    fn peaked_mlm_logits_give_near_zero_loss() {
        let mut m = ModelState::new(cfg(1, 4, 10), 0).unwrap();
        m.tensor_mut("tok_emb").unwrap().fill(0.0);
        m.tensor_mut("mlm_bias").unwrap()[7] = 60.0;
        let hidden = Array2::zeros((2, 4));
        assert!(mlm_loss(&hidden, &[Some(7), Some(7)], &m) < 1e-20);
    }

    #[test]
    fn mlm_loss_matches_direct_formula() {
        let m = ModelState::new(cfg(1, 4, 12), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hidden = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let targets = [None, Some(5), Some(9), None, Some(11)];
        let emb = m.tensor("tok_emb").unwrap();
        let bias = m.tensor("mlm_bias").unwrap();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let z: Vec<f64> = (0..12)
                .map(|v| (0..4).map(|k| hidden[[i, k]] * emb[v * 4 + k]).sum::<f64>() + bias[v])
                .collect();
            let denom: f64 = z.iter().map(|x| x.exp()).sum();
            total += denom.ln() - z[*t as usize];
        }
        let expected = total / 3.0;
        assert!((mlm_loss(&hidden, &targets, &m) - expected).abs() < 1e-12);
    }

    #[test]
    fn qa_logit_shapes_and_zero_heads() {
        let mut m = ModelState::new(cfg(1, 4, 12), 0).unwrap();
        let hidden = Array2::from_elem((6, 4), 0.3);
        let (s, e) = qa_logits(&hidden, &m);
        assert_eq!((s.len(), e.len()), (6, 6));
        m.tensor_mut("qa_start").unwrap().fill(0.0);
        m.tensor_mut("qa_end").unwrap().fill(0.0);
        let (s, e) = qa_logits(&hidden, &m);
        assert!(s.iter().chain(&e).all(|&v| v == 0.0));
    }

    #[test]
    fn qa_loss_uniform_and_peaked() {
        let zeros = [0.0; 8];
        let cands = [0, 3, 4, 5, 6];
        assert!((qa_loss(&zeros, &zeros, 4, 5, &cands).unwrap() - 5f64.ln()).abs() < 1e-12);
        let mut peaked = [0.0; 8];
        peaked[4] = 80.0;
        assert!(qa_loss(&peaked, &peaked, 4, 4, &cands).unwrap() < 1e-30);
        assert!(matches!(
            qa_loss(&zeros, &zeros, 1, 4, &cands),
            Err(Error::GoldNotCandidate(1))
        ));
    }

    #[test]
    fn qa_loss_four_positions_by_hand() {
        // Candidates {0, 1, 2, 3}; start gold 1, end gold 2.
        let s = [0.0, 1.0, 2.0, 0.5];
        let e = [1.0, -1.0, 3.0, 0.0];
        let ls = (1.0 + 1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln() - 1.0;
        let le = (1f64.exp() + (-1f64).exp() + 3f64.exp() + 1.0).ln() - 3.0;
        let got = qa_loss(&s, &e, 1, 2, &[0, 1, 2, 3]).unwrap();
        assert!((got - 0.5 * (ls + le)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn predict_span_single_position() {
        let s = [0.0, 1.0, 5.0, 2.0];
        let e = [0.0, 3.0, -1.0, 2.0];
        let p = predict_span(&s, &e, Span::new(2, 3), 30);
        assert_eq!(p.best, Some((2, 2, 4.0)));
        assert_eq!(p.null_score, 0.0);
        assert_eq!(predict_span(&s, &e, Span::new(3, 3), 30).best, None);
    }

    #[test]
    fn predict_span_ignores_background_peak() {
        // Passage at 2..5, background at 6..9 holding the largest logits.
        let mut s = vec![0.0; 10];
        let mut e = vec![0.0; 10];
        s[7] = 9.0;
        e[8] = 9.0;
        s[3] = 1.0;
        e[4] = 2.0;
        let p = predict_span(&s, &e, Span::new(2, 5), 30);
        assert_eq!(p.best, Some((3, 4, 3.0)));
    }

    #[test]
    fn predict_span_respects_max_len() {
        let mut s = vec![0.0; 12];
        let mut e = vec![0.0; 12];
        s[1] = 5.0;
        e[10] = 5.0;
        e[3] = 1.0;
        let p = predict_span(&s, &e, Span::new(1, 12), 3);
        assert_eq!(p.best, Some((1, 3, 6.0)));
    }

    fn fd_check(m: &mut ModelState, item: &TrainItem) {
        let (_, analytic) = m.backward(std::slice::from_ref(item), 1.0, None).unwrap();
        let loss_at = |m: &ModelState| m.backward(std::slice::from_ref(item), 1.0, None).unwrap().0;
        let h = 1e-4;
        for k in 0..m.num_params() {
            let orig = m.params()[k];
            m.params_mut()[k] = orig + h;
            let up = loss_at(m);
            m.params_mut()[k] = orig - h;
            let down = loss_at(m);
            m.params_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (a - numeric).abs() <= 1e-3 * denom,
                "param {k}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let c = EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 4,
            ffn: 6,
            max_positions: 6,
            vocab_size: 9,
            dropout: 0.0,
        };
        let mut m = ModelState::new(c, 2).unwrap();
        for v in m.params_mut() {
            *v *= 10.0;
        }
        let mlm = TrainItem {
            ids: vec![CLS, 5, 3, 7, SEP],
            objective: Objective::Mlm {
                targets: vec![None, None, Some(6), None, None],
            },
        };
        fd_check(&mut m, &mlm);
        let qa = TrainItem {
            ids: vec![CLS, 5, SEP, 7, 8, SEP],
            objective: Objective::Qa {
                start: 3,
                end: 4,
                candidates: vec![0, 3, 4],
            },
        };
        fd_check(&mut m, &qa);
    }

    #[test]
    fn qa_heads_get_zero_gradient_under_mlm() {
        let m = ModelState::new(cfg(2, 8, 20), 1).unwrap();
        let item = TrainItem {
            ids: vec![CLS, 5, 6, 7, SEP],
            objective: Objective::Mlm {
                targets: vec![None, Some(9), None, Some(12), None],
            },
        };
        let (_, g) = m.backward(&[item], 1.0, None).unwrap();
        for name in ["qa_start", "qa_end"] {
            let t = m.tensor_info(name).unwrap();
            assert!(g[t.offset..t.offset + t.numel()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradients_scale_linearly() {
        let m = ModelState::new(cfg(2, 8, 20), 1).unwrap();
        let item = TrainItem {
            ids: vec![CLS, 5, 6, SEP, 7, 8, SEP],
            objective: Objective::Qa {
                start: 4,
                end: 5,
                candidates: vec![0, 4, 5],
            },
        };
        let (l1, g1) = m.backward(std::slice::from_ref(&item), 1.0, None).unwrap();
        let (l2, g2) = m.backward(&[item], 2.0, None).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn background_tokens_change_qa_logits() {
        let m = ModelState::new(cfg(2, 8, 20), 4).unwrap();
        let a = [CLS, 5, SEP, 6, 7, SEP, 9, 10, SEP];
        let mut b = a;
        b[7] = 15;
        let ha = m.forward(&a, &[true; 9]).unwrap();
        let hb = m.forward(&b, &[true; 9]).unwrap();
        let (sa, _) = qa_logits(&ha, &m);
        let (sb, _) = qa_logits(&hb, &m);
        assert!((3..5).any(|i| (sa[i] - sb[i]).abs() > 1e-9));
    }

    proptest! {
        #[test]
        fn predicted_span_stays_in_passage(
            logits in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..64),
            a_frac in 0.0f64..1.0,
            b_frac in 0.0f64..=1.0,
            max_len in 1usize..40,
        ) {
            let n = logits.len();
            let (s, e): (Vec<f64>, Vec<f64>) = logits.into_iter().unzip();
            let a = 1 + ((n - 1) as f64 * a_frac) as usize;
            let b = a + ((n - a) as f64 * b_frac) as usize;
            let pred = predict_span(&s, &e, Span::new(a, b), max_len);
            prop_assert_eq!(pred.null_score, s[0] + e[0]);
            match pred.best {
                None => prop_assert_eq!(a, b),
                Some((i, j, score)) => {
                    prop_assert!(a <= i && i <= j && j < b && j - i < max_len);
                    prop_assert_eq!(score, s[i] + e[j]);
                }
            }
        }
    }
}
