//! SQuAD-style answer normalization, EM/F1 scoring and sliding-window
//! prediction aggregation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::is_punct;

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|&c| !is_punct(c))
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match (0 or 1) and the best token-level F1 over the gold answers.
pub fn em_f1(prediction: &str, gold_answers: &[String]) -> Result<(f64, f64)> {
    if gold_answers.is_empty() {
        return Err(Error::EmptyGold);
    }
    let pred = normalize_answer(prediction);
    let mut em: f64 = 0.0;
    let mut f1: f64 = 0.0;
    for g in gold_answers {
        let g = normalize_answer(g);
        if pred == g {
            em = 1.0;
        }
        f1 = f1.max(token_f1(&pred, &g));
    }
    Ok((em, f1))
}

/// Best span of one window, with the window's null (CLS) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub window_index: usize,
    /// `(start, end, start_logit + end_logit)` of the best in-passage span.
    pub span: Option<(usize, usize, f64)>,
    pub null_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qid: String,
    /// Empty for a null prediction.
    pub answer_text: String,
    pub score: f64,
    /// `(window_index, start, end)` of the chosen span, packed positions.
    pub source: Option<(usize, usize, usize)>,
}

/// The winning `(window_index, start, end, score)` across windows: the
/// highest span score, ties going to the earliest window and then the
/// earliest start. `None` when the best span scores below the smallest
/// null score or no window has a span.
pub fn aggregate_windows(windows: &[WindowPrediction]) -> Option<(usize, usize, usize, f64)> {
    let mut best: Option<(usize, usize, usize, f64)> = None;
    for w in windows {
        if let Some((s, e, score)) = w.span {
            let better = match best {
                None => true,
                Some((bw, bs, _, bscore)) => score > bscore || (score == bscore && (w.window_index, s) < (bw, bs)),
            };
            if better {
                best = Some((w.window_index, s, e, score));
            }
        }
    }
    let min_null = windows.iter().map(|w| w.null_score).fold(f64::INFINITY, f64::min);
    match best {
        Some(b) if b.3 >= min_null => Some(b),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub qid: String,
    pub prediction: String,
    pub answers: Vec<String>,
    pub em: f64,
    pub f1: f64,
}

/// Metrics report; `em` and `f1` are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    pub per_example: Vec<ExampleScore>,
}

impl MetricsReport {
    /// Scores predictions against golds. Records without gold answers are
    /// unanswerable: they score 1 only for an empty prediction.
    pub fn score(items: impl IntoIterator<Item = (String, String, Vec<String>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut per_example = Vec::new();
        for (qid, prediction, answers) in items {
            if !seen.insert(qid.clone()) {
                return Err(Error::DuplicateQid(qid));
            }
            let (em, f1) = if answers.is_empty() {
                let v = if normalize_answer(&prediction).is_empty() {
                    1.0
                } else {
                    0.0
                };
                (v, v)
            } else {
                em_f1(&prediction, &answers)?
            };
            per_example.push(ExampleScore {
                qid,
                prediction,
                answers,
                em,
                f1,
            });
        }
        let n = per_example.len();
        let mean = |f: fn(&ExampleScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                100.0 * per_example.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Ok(MetricsReport {
            em: mean(|e| e.em),
            f1: mean(|e| e.f1),
            n,
            per_example,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn article_is_ignored() {
        assert_eq!(em_f1("the Euphrates", &golds(&["Euphrates"])).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn disjoint_answers_score_zero() {
        assert_eq!(em_f1("Tigris", &golds(&["Euphrates"])).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn partial_overlap_f1() {
        let (em, f1) = em_f1("Euphrates River", &golds(&["Euphrates"])).unwrap();
        assert_eq!(em, 0.0);
        assert_eq!(f1, 2.0 / 3.0);
    }

    #[test]
    fn empty_gold_list_errors() {
        assert!(matches!(em_f1("x", &[]), Err(Error::EmptyGold)));
    }

    #[test]
    fn best_gold_wins() {
        let (em, f1) = em_f1("river", &golds(&["Euphrates", "the River!"])).unwrap();
        assert_eq!((em, f1), (1.0, 1.0));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The  U.S.,  an Army! "), "us army");
        assert_eq!(normalize_answer("a"), "");
    }

    fn wp(w: usize, span: Option<(usize, usize, f64)>, null: f64) -> WindowPrediction {
        WindowPrediction {
            window_index: w,
            span,
            null_score: null,
        }
    }

    #[test]
    fn aggregate_single_window() {
        assert_eq!(
            aggregate_windows(&[wp(0, Some((3, 4, 1.5)), 0.0)]),
            Some((0, 3, 4, 1.5))
        );
    }

    #[test]
    fn aggregate_picks_max() {
        let ws = [
            wp(0, Some((3, 3, 2.0)), -1.0),
            wp(1, Some((5, 6, 5.0)), -1.0),
            wp(2, Some((7, 7, 3.1)), -1.0),
        ];
        assert_eq!(aggregate_windows(&ws), Some((1, 5, 6, 5.0)));
    }

    #[test]
    fn aggregate_ties_go_to_earliest_window() {
        let ws = [wp(0, Some((9, 9, 4.0)), 0.0), wp(1, Some((2, 2, 4.0)), 0.0)];
        assert_eq!(aggregate_windows(&ws), Some((0, 9, 9, 4.0)));
    }

    #[test]
    fn aggregate_null_wins_when_spans_are_weaker() {
        let ws = [wp(0, Some((3, 3, 1.0)), 2.0), wp(1, None, 5.0)];
        assert_eq!(aggregate_windows(&ws), None);
        assert_eq!(aggregate_windows(&[wp(0, None, 0.0)]), None);
    }

    #[test]
    fn report_is_mean_of_examples() {
        let r = MetricsReport::score(vec![
            ("a".into(), "Euphrates".into(), golds(&["Euphrates"])),
            ("b".into(), "Euphrates River".into(), golds(&["Euphrates"])),
            ("c".into(), "".into(), vec![]),
        ])
        .unwrap();
        assert_eq!(r.n, 3);
        assert!((r.em - 100.0 * 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 100.0 * (1.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!(matches!(
            MetricsReport::score(vec![("a".into(), "".into(), vec![]), ("a".into(), "".into(), vec![]),]),
            Err(Error::DuplicateQid(_))
        ));
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_consistent(
            pred in "[a-c ,.]{0,12}",
            gold in prop::collection::vec("[a-c ]{1,12}", 1..3),
        ) {
            let (em, f1) = em_f1(&pred, &gold).unwrap();
            prop_assert!(em == 0.0 || em == 1.0);
            prop_assert!((0.0..=1.0).contains(&f1));
            if em == 1.0 {
                prop_assert_eq!(f1, 1.0);
            }
            prop_assert_eq!(normalize_answer(&normalize_answer(&pred)), normalize_answer(&pred));
        }
    }
}
