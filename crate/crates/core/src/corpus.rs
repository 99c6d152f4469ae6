//! Encyclopedic corpus store: pages, sentences with hyperlink mentions, and
//! the alias dictionary used by the dictionary entity linker.
//!
//! Input is `corpus-jsonl`, one page per line:
//!
//! ```text
//! {"page_id": "P1", "title": "Euphrates", "sentences": [{"text": "...", "links": [{"start": 0, "end": 9, "target": "P1"}]}]}
//! ```
//!
//! Link offsets are Unicode scalar-value indices into the sentence text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A hyperlink or linker match inside a piece of text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub target: String,
    /// Set when `target` does not name a page of the corpus. Dangling
    /// mentions are kept for provenance but never retrieved from.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dangling: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    #[serde(default)]
    pub links: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub page_id: String,
    pub title: String,
    pub sentences: Vec<Sentence>,
}

/// Raw link as it appears in corpus-jsonl (no surface, no flag).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub start: usize,
    pub end: usize,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    #[serde(default)]
    pub links: Vec<LinkRecord>,
}

/// One line of corpus-jsonl.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: String,
    pub title: String,
    #[serde(default)]
    pub sentences: Vec<SentenceRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pages: usize,
    pub sentences: usize,
    pub mentions: usize,
    pub dangling_mentions: usize,
}

/// Candidate page for an alias, with the number of hyperlinks using that
/// surface to point at it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasTarget {
    pub page_id: String,
    pub link_count: usize,
}

/// Immutable corpus index. All maps are ordered so that serialization is
/// byte-stable across runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub pages: BTreeMap<String, Page>,
    /// normalized surface -> candidate pages, best first (most hyperlink
    /// occurrences, ties by smallest page_id).
    pub alias_dict: BTreeMap<String, Vec<AliasTarget>>,
    pub stats: CorpusStats,
    #[serde(skip)]
    max_alias_chars: usize,
}

/// Lowercase and collapse whitespace runs to a single space, trimming both
/// ends.
pub fn normalize_surface(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

impl CorpusIndex {
    /// Builds an index from parsed page records; record `i` is reported as
    /// line `i + 1` in errors.
    pub fn from_records(records: Vec<PageRecord>) -> Result<Self> {
        Self::build(records.into_iter().enumerate().map(|(i, r)| (i + 1, r)))
    }

    fn build(records: impl IntoIterator<Item = (usize, PageRecord)>) -> Result<Self> {
        let records: Vec<(usize, PageRecord)> = records.into_iter().collect();
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for (line, rec) in &records {
            if rec.title.trim().is_empty() {
                return Err(Error::MalformedLine {
                    line: *line,
                    message: "title must be non-empty".into(),
                });
            }
            if ids.insert(rec.page_id.as_str(), *line).is_some() {
                return Err(Error::DuplicatePage(rec.page_id.clone()));
            }
        }

        let mut stats = CorpusStats::default();
        // surface -> page -> hyperlink count
        let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let mut pages = BTreeMap::new();

        for (line, rec) in &records {
            let title_key = normalize_surface(&rec.title);
            counts
                .entry(title_key)
                .or_default()
                .entry(rec.page_id.clone())
                .or_insert(0);

            let mut sentences = Vec::with_capacity(rec.sentences.len());
            for (si, s) in rec.sentences.iter().enumerate() {
                let len = s.text.chars().count();
                let mut links = Vec::with_capacity(s.links.len());
                for l in &s.links {
                    if l.start >= l.end || l.end > len {
                        return Err(Error::MalformedLine {
                            line: *line,
                            message: format!(
                                "sentence {si}: link offsets ({}, {}) outside text of length {len}",
                                l.start, l.end
                            ),
                        });
                    }
                    let surface = char_slice(&s.text, l.start, l.end);
                    let dangling = !ids.contains_key(l.target.as_str());
                    stats.mentions += 1;
                    if dangling {
                        stats.dangling_mentions += 1;
                    } else {
                        let key = normalize_surface(&surface);
                        if !key.is_empty() {
                            *counts.entry(key).or_default().entry(l.target.clone()).or_insert(0) += 1;
                        }
                    }
                    links.push(Mention {
                        start: l.start,
                        end: l.end,
                        surface,
                        target: l.target.clone(),
                        dangling,
                    });
                }
                links.sort_by_key(|m| (m.start, m.end));
                sentences.push(Sentence {
                    text: s.text.clone(),
                    links,
                });
            }
            stats.pages += 1;
            stats.sentences += sentences.len();
            pages.insert(
                rec.page_id.clone(),
                Page {
                    page_id: rec.page_id.clone(),
                    title: rec.title.clone(),
                    sentences,
                },
            );
        }

        let alias_dict: BTreeMap<String, Vec<AliasTarget>> = counts
            .into_iter()
            .map(|(surface, targets)| {
                let mut list: Vec<AliasTarget> = targets
                    .into_iter()
                    .map(|(page_id, link_count)| AliasTarget { page_id, link_count })
                    .collect();
                // BTreeMap iteration already orders by page_id; stable sort keeps it for ties.
                list.sort_by_key(|t| std::cmp::Reverse(t.link_count));
                (surface, list)
            })
            .collect();

        if stats.dangling_mentions > 0 {
            log::warn!(
                "{} hyperlink(s) point at pages missing from the corpus",
                stats.dangling_mentions
            );
        }

        let mut index = CorpusIndex {
            pages,
            alias_dict,
            stats,
            max_alias_chars: 0,
        };
        index.refresh_derived();
        Ok(index)
    }

    fn refresh_derived(&mut self) {
        self.max_alias_chars = self.alias_dict.keys().map(|k| k.chars().count()).max().unwrap_or(0);
    }

    /// Loads a serialized index (as written by [`CorpusIndex::to_json`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut index: CorpusIndex = serde_json::from_str(text)?;
        index.refresh_derived();
        Ok(index)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn page(&self, page_id: &str) -> Option<&Page> {
        self.pages.get(page_id)
    }

    pub fn contains(&self, page_id: &str) -> bool {
        self.pages.contains_key(page_id)
    }

    pub fn sentences_of(&self, page_id: &str) -> Result<&[Sentence]> {
        self.pages
            .get(page_id)
            .map(|p| p.sentences.as_slice())
            .ok_or_else(|| Error::UnknownPage(page_id.to_string()))
    }

    /// Resolves a normalized alias to its preferred page.
    pub fn resolve(&self, normalized: &str) -> Option<&str> {
        self.alias_dict
            .get(normalized)
            .and_then(|targets| targets.first())
            .map(|t| t.page_id.as_str())
    }

    /// Dictionary entity linker: longest-match, left-to-right,
    /// non-overlapping alias matches. Matches must start and end on word
    /// boundaries. Offsets are char indices into `text`.
    pub fn link_entities(&self, text: &str) -> Vec<Mention> {
        let chars: Vec<char> = text.chars().collect();
        let (norm, orig) = normalize_with_offsets(&chars);
        let n = norm.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if !is_match_start(&norm, i) {
                i += 1;
                continue;
            }
            let max_end = (i + self.max_alias_chars).min(n);
            let mut found = None;
            let mut j = max_end;
            while j > i {
                if is_match_end(&norm, j) {
                    let key: String = norm[i..j].iter().collect();
                    if let Some(target) = self.resolve(&key) {
                        found = Some((j, target));
                        break;
                    }
                }
                j -= 1;
            }
            match found {
                Some((j, target)) => {
                    let start = orig[i];
                    let end = orig[j - 1] + 1;
                    out.push(Mention {
                        start,
                        end,
                        surface: chars[start..end].iter().collect(),
                        target: target.to_string(),
                        dangling: false,
                    });
                    i = j;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Normalized char sequence plus, per normalized char, the index of the
/// source char it came from. Whitespace runs become one space; leading
/// whitespace is dropped.
fn normalize_with_offsets(chars: &[char]) -> (Vec<char>, Vec<usize>) {
    let mut norm = Vec::with_capacity(chars.len());
    let mut orig = Vec::with_capacity(chars.len());
    let mut prev_space = true;
    for (idx, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !prev_space {
                norm.push(' ');
                orig.push(idx);
            }
            prev_space = true;
            continue;
        }
        prev_space = false;
        for lc in c.to_lowercase() {
            norm.push(lc);
            orig.push(idx);
        }
    }
    (norm, orig)
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_match_start(norm: &[char], i: usize) -> bool {
    norm[i] != ' ' && (i == 0 || !(is_word(norm[i - 1]) && is_word(norm[i])))
}

fn is_match_end(norm: &[char], j: usize) -> bool {
    norm[j - 1] != ' ' && (j == norm.len() || !(is_word(norm[j - 1]) && is_word(norm[j])))
}

/// Reads corpus-jsonl. Blank lines are ignored.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<CorpusIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_jsonl(&text)
}

pub fn parse_corpus_jsonl(text: &str) -> Result<CorpusIndex> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PageRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    CorpusIndex::build(records)
}

/// Loads either raw corpus-jsonl (`.jsonl`) or a serialized index.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusIndex> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        return ingest_corpus(path);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CorpusIndex::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, title: &str, sents: &[(&str, &[(usize, usize, &str)])]) -> PageRecord {
        PageRecord {
            page_id: id.into(),
            title: title.into(),
            sentences: sents
                .iter()
                .map(|(t, links)| SentenceRecord {
                    text: (*t).into(),
                    links: links
                        .iter()
                        .map(|&(s, e, tg)| LinkRecord {
                            start: s,
                            end: e,
                            target: tg.into(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn to_jsonl(recs: &[PageRecord]) -> String {
        recs.iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn counts_pages_and_sentences() {
        let recs = vec![
            rec("A", "Alpha", &[("a one.", &[]), ("a two.", &[]), ("a three.", &[])]),
            rec("B", "Beta", &[("b one.", &[]), ("b two.", &[]), ("b three.", &[])]),
        ];
        let idx = parse_corpus_jsonl(&to_jsonl(&recs)).unwrap();
        assert_eq!(idx.stats.pages, 2);
        assert_eq!(idx.stats.sentences, 6);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = parse_corpus_jsonl("").unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
        assert!(matches!(parse_corpus_jsonl("\n  \n"), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = to_jsonl(&[rec("A", "Alpha", &[])]);
        let text = format!("{good}\n{{not json");
        match parse_corpus_jsonl(&text) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_page_is_an_error() {
        let text = to_jsonl(&[rec("A", "Alpha", &[]), rec("A", "Other", &[])]);
        assert!(matches!(parse_corpus_jsonl(&text), Err(Error::DuplicatePage(id)) if id == "A"));
    }

    #[test]
    fn dangling_link_is_flagged_and_counted() {
        let recs = vec![
            rec("A", "Alpha", &[("see Gamma here", &[(4, 9, "MISSING")])]),
            rec("B", "Beta", &[]),
        ];
        let idx = parse_corpus_jsonl(&to_jsonl(&recs)).unwrap();
        assert_eq!(idx.stats.dangling_mentions, 1);
        let m = &idx.sentences_of("A").unwrap()[0].links[0];
        assert!(m.dangling);
        assert_eq!(m.surface, "Gamma");
        // Dangling surfaces never become aliases.
        assert!(!idx.alias_dict.contains_key("gamma"));
    }

    #[test]
    fn link_offsets_are_validated() {
        let text = to_jsonl(&[rec("A", "Alpha", &[("short", &[(2, 9, "A")])])]);
        assert!(matches!(
            parse_corpus_jsonl(&text),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn surface_uses_char_offsets() {
        let recs = vec![rec("A", "Zürich", &[("in Zürich now", &[(3, 9, "A")])])];
        let idx = CorpusIndex::from_records(recs).unwrap();
        assert_eq!(idx.sentences_of("A").unwrap()[0].links[0].surface, "Zürich");
    }

    #[test]
    fn sentences_of_known_unknown_and_empty() {
        let recs = vec![
            rec("A", "Alpha", &[("one", &[]), ("two", &[]), ("three", &[])]),
            rec("E", "Empty", &[]),
        ];
        let idx = CorpusIndex::from_records(recs).unwrap();
        let s: Vec<&str> = idx.sentences_of("A").unwrap().iter().map(|s| s.text.as_str()).collect();
        assert_eq!(s, ["one", "two", "three"]);
        assert!(idx.sentences_of("E").unwrap().is_empty());
        assert!(matches!(idx.sentences_of("Z"), Err(Error::UnknownPage(_))));
    }

    #[test]
    fn alias_resolution_prefers_most_linked_then_smallest_id() {
        let recs = vec![
            rec(
                "X",
                "Src",
                &[
                    ("Mercury rises", &[(0, 7, "P2")]),
                    ("Mercury sets", &[(0, 7, "P2")]),
                    ("Mercury again", &[(0, 7, "P1")]),
                ],
            ),
            rec("P1", "Mercury", &[]),
            rec("P2", "Mercury (planet)", &[]),
            rec("Q2", "Twin", &[]),
            rec("Q1", "Twin", &[]),
        ];
        let idx = CorpusIndex::from_records(recs).unwrap();
        assert_eq!(idx.resolve("mercury"), Some("P2"));
        assert_eq!(idx.resolve("twin"), Some("Q1"));
    }

    #[test]
    fn links_single_entity() {
        let idx = CorpusIndex::from_records(vec![rec("P_euph", "Euphrates", &[])]).unwrap();
        let ms = idx.link_entities("the Euphrates flows");
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].target, "P_euph");
        assert_eq!((ms[0].start, ms[0].end), (4, 13));
        assert_eq!(ms[0].surface, "Euphrates");
    }

    #[test]
    fn no_alias_no_mentions() {
        let idx = CorpusIndex::from_records(vec![rec("P", "Euphrates", &[])]).unwrap();
        assert!(idx.link_entities("nothing to see").is_empty());
        assert!(idx.link_entities("").is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let idx = CorpusIndex::from_records(vec![rec("T", "Thames", &[]), rec("RT", "River Thames", &[])]).unwrap();
        let ms = idx.link_entities("the  River\tThames floods");
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].target, "RT");
        assert_eq!(ms[0].surface, "River\tThames");
        assert_eq!(normalize_surface(&ms[0].surface), "river thames");
    }

    #[test]
    fn matches_respect_word_boundaries() {
        let idx = CorpusIndex::from_records(vec![rec("A", "Art", &[])]).unwrap();
        assert!(idx.link_entities("the party started").is_empty());
        assert_eq!(idx.link_entities("modern art.").len(), 1);
    }

    #[test]
    fn serialization_round_trips() {
        let idx = CorpusIndex::from_records(vec![
            rec("A", "Alpha", &[("see Beta", &[(4, 8, "B")])]),
            rec("B", "Beta", &[]),
        ])
        .unwrap();
        let json = idx.to_json().unwrap();
        let back = CorpusIndex::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.link_entities("Beta"), idx.link_entities("Beta"));
    }
}
