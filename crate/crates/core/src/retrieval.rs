//! Background retrieval: candidate sentences come from the pages of
//! entities mentioned in the input and are ranked by the number of distinct
//! unigrams, bigrams and trigrams they share with the query.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusIndex, Mention, Sentence};
use crate::packer::fit_backgrounds;
use crate::tokenizer::{encode, TokenId, TokenizedText, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef {
    pub page_id: String,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Background {
    pub entity_title: String,
    pub page_id: String,
    pub sentence_index: usize,
    pub score: usize,
    /// Tokens of `"<title> : <sentence>"`, without the trailing SEP.
    pub formatted_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Qa,
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalQuery {
    pub mode: RetrievalMode,
    /// The question in QA mode, the block itself in pretraining mode.
    pub query_tokens: Vec<TokenId>,
    /// Mentions in input order; the first mention of an entity fixes its
    /// place in the candidate pool.
    pub mentions: Vec<Mention>,
}

/// Distinct 1-, 2- and 3-grams of a token sequence.
#[derive(Debug, Default, Clone)]
pub struct NgramSet {
    uni: HashSet<TokenId>,
    bi: HashSet<(TokenId, TokenId)>,
    tri: HashSet<(TokenId, TokenId, TokenId)>,
}

impl NgramSet {
    pub fn of(tokens: &[TokenId]) -> Self {
        NgramSet {
            uni: tokens.iter().copied().collect(),
            bi: tokens.windows(2).map(|w| (w[0], w[1])).collect(),
            tri: tokens.windows(3).map(|w| (w[0], w[1], w[2])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.uni.len() + self.bi.len() + self.tri.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uni.is_empty()
    }

    /// Number of distinct n-grams of `tokens` that are also in `self`.
    pub fn overlap_with(&self, tokens: &[TokenId]) -> usize {
        if self.is_empty() {
            return 0;
        }
        let other = NgramSet::of(tokens);
        other.uni.iter().filter(|g| self.uni.contains(g)).count()
            + other.bi.iter().filter(|g| self.bi.contains(g)).count()
            + other.tri.iter().filter(|g| self.tri.contains(g)).count()
    }
}

/// Equally weighted, set-semantics unigram + bigram + trigram overlap.
pub fn ngram_overlap(query: &[TokenId], sentence: &[TokenId]) -> usize {
    NgramSet::of(query).overlap_with(sentence)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate<'a> {
    pub entity_title: &'a str,
    pub page_id: &'a str,
    pub sentence_index: usize,
    pub sentence: &'a Sentence,
}

/// Union of the sentences of all mentioned pages, in (first mention,
/// sentence index) order. Dangling or unknown targets contribute nothing.
pub fn candidate_pool<'a>(mentions: &[Mention], index: &'a CorpusIndex) -> Vec<Candidate<'a>> {
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for m in mentions {
        if m.dangling || !seen.insert(m.target.as_str()) {
            continue;
        }
        let Some(page) = index.page(&m.target) else {
            continue;
        };
        pool.extend(page.sentences.iter().enumerate().map(|(i, s)| Candidate {
            entity_title: &page.title,
            page_id: &page.page_id,
            sentence_index: i,
            sentence: s,
        }));
    }
    pool
}

#[derive(Debug, Clone)]
struct PageTokens {
    title: Vec<TokenId>,
    sentences: Vec<Vec<TokenId>>,
}

/// What fills the background region of a pretraining input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PretrainBackground {
    /// Ranked entity backgrounds that fit the budget.
    Entities { backgrounds: Vec<Background> },
    /// Tokens following the block in its document, taken verbatim.
    Fallback { tokens: Vec<TokenId> },
}

impl PretrainBackground {
    pub fn is_fallback(&self) -> bool {
        matches!(self, PretrainBackground::Fallback { .. })
    }
}

/// A contiguous block of a page used as pretraining input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainBlock {
    pub page_id: String,
    pub start: usize,
    pub tokens: Vec<TokenId>,
    /// Hyperlinks whose token span lies inside the block, in order.
    pub mentions: Vec<Mention>,
    /// Sentences of the source page that overlap the block.
    pub sentences: Vec<SentenceRef>,
    /// Document tokens after the block.
    pub following: Vec<TokenId>,
}

/// Sentence scorer and background formatter over a tokenized corpus.
pub struct Retriever<'a> {
    index: &'a CorpusIndex,
    vocab: &'a Vocab,
    pages: HashMap<&'a str, PageTokens>,
    colon: TokenId,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a CorpusIndex, vocab: &'a Vocab) -> Self {
        let pages = index
            .pages
            .par_iter()
            .map(|(id, p)| {
                let toks = PageTokens {
                    title: encode(&p.title, vocab).ids,
                    sentences: p.sentences.iter().map(|s| encode(&s.text, vocab).ids).collect(),
                };
                (id.as_str(), toks)
            })
            .collect();
        Retriever {
            index,
            vocab,
            pages,
            colon: vocab.id(":"),
        }
    }

    pub fn index(&self) -> &'a CorpusIndex {
        self.index
    }

    pub fn vocab(&self) -> &'a Vocab {
        self.vocab
    }

    pub fn sentence_tokens(&self, page_id: &str, sentence_index: usize) -> Option<&[TokenId]> {
        self.pages
            .get(page_id)
            .and_then(|p| p.sentences.get(sentence_index))
            .map(Vec::as_slice)
    }

    /// Builds a QA-mode query: mentions are linked over the question and
    /// then the passage, the overlap query is the question alone.
    pub fn qa_query(&self, question: &str, question_tokens: &[TokenId], passage: &str) -> RetrievalQuery {
        let mut mentions = self.index.link_entities(question);
        mentions.extend(self.index.link_entities(passage));
        RetrievalQuery {
            mode: RetrievalMode::Qa,
            query_tokens: question_tokens.to_vec(),
            mentions,
        }
    }

    /// Scores the candidate pool against the query and stable-sorts it by
    /// descending score. Candidates listed in `exclude` are dropped.
    pub fn rank_backgrounds(&self, query: &RetrievalQuery, exclude: &[SentenceRef]) -> Vec<Background> {
        let grams = NgramSet::of(&query.query_tokens);
        let excluded: HashSet<(&str, usize)> = exclude.iter().map(|r| (r.page_id.as_str(), r.sentence_index)).collect();
        let mut ranked: Vec<Background> = candidate_pool(&query.mentions, self.index)
            .into_iter()
            .filter(|c| !excluded.contains(&(c.page_id, c.sentence_index)))
            .map(|c| {
                let page = &self.pages[c.page_id];
                let sent = &page.sentences[c.sentence_index];
                let mut formatted = Vec::with_capacity(page.title.len() + 1 + sent.len());
                formatted.extend_from_slice(&page.title);
                formatted.push(self.colon);
                formatted.extend_from_slice(sent);
                Background {
                    entity_title: c.entity_title.to_string(),
                    page_id: c.page_id.to_string(),
                    sentence_index: c.sentence_index,
                    score: grams.overlap_with(sent),
                    formatted_tokens: formatted,
                }
            })
            .collect();
        ranked.sort_by_key(|b| std::cmp::Reverse(b.score));
        ranked
    }

    /// Backgrounds for a pretraining block. With at least one resolvable
    /// hyperlink the top-ranked sentences are fitted greedily into `n_b`;
    /// otherwise the block's following context is used, truncated to `n_b`.
    pub fn retrieve_pretrain_background(&self, block: &PretrainBlock, n_b: usize) -> PretrainBackground {
        let has_entity = block
            .mentions
            .iter()
            .any(|m| !m.dangling && self.index.contains(&m.target));
        if !has_entity {
            let take = block.following.len().min(n_b);
            return PretrainBackground::Fallback {
                tokens: block.following[..take].to_vec(),
            };
        }
        let query = RetrievalQuery {
            mode: RetrievalMode::Pretrain,
            query_tokens: block.tokens.clone(),
            mentions: block.mentions.clone(),
        };
        let ranked = self.rank_backgrounds(&query, &block.sentences);
        let fit = fit_backgrounds(&ranked, n_b);
        PretrainBackground::Entities {
            backgrounds: fit.selected.into_iter().map(|i| ranked[i].clone()).collect(),
        }
    }

    /// Splits a page into consecutive blocks of at most `block_len` tokens.
    pub fn page_blocks(&self, page_id: &str, block_len: usize) -> Vec<PretrainBlock> {
        let Some(page) = self.index.page(page_id) else {
            return Vec::new();
        };
        let doc = PageDocument::new(&page.sentences, self.vocab);
        let n = doc.tokens.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start < n && block_len > 0 {
            let end = (start + block_len).min(n);
            out.push(doc.block(page_id, start, end));
            start = end;
        }
        out
    }
}

/// A page's sentences tokenized as one document, with each token mapped to
/// its sentence and hyperlinks mapped to token spans.
struct PageDocument<'s> {
    tokens: Vec<TokenId>,
    sentence_of: Vec<usize>,
    /// (first token, one-past-last token, mention)
    links: Vec<(usize, usize, &'s Mention)>,
}

impl<'s> PageDocument<'s> {
    fn new(sentences: &'s [Sentence], vocab: &Vocab) -> Self {
        let mut tokens = Vec::new();
        let mut sentence_of = Vec::new();
        let mut links = Vec::new();
        for (si, s) in sentences.iter().enumerate() {
            let TokenizedText { ids, offsets, .. } = encode(&s.text, vocab);
            let base = tokens.len();
            for m in &s.links {
                let first = offsets.iter().position(|&(_, b)| b > m.start);
                let last = offsets.iter().rposition(|&(a, _)| a < m.end);
                if let (Some(f), Some(l)) = (first, last) {
                    if f <= l {
                        links.push((base + f, base + l + 1, m));
                    }
                }
            }
            tokens.extend(ids);
            sentence_of.extend(std::iter::repeat_n(si, offsets.len()));
        }
        PageDocument {
            tokens,
            sentence_of,
            links,
        }
    }

    fn block(&self, page_id: &str, start: usize, end: usize) -> PretrainBlock {
        let mentions = self
            .links
            .iter()
            .filter(|(a, b, _)| *a >= start && *b <= end)
            .map(|(_, _, m)| (*m).clone())
            .collect();
        let mut sentences: Vec<SentenceRef> = Vec::new();
        for &si in &self.sentence_of[start..end] {
            if sentences.last().map(|r| r.sentence_index) != Some(si) {
                sentences.push(SentenceRef {
                    page_id: page_id.to_string(),
                    sentence_index: si,
                });
            }
        }
        PretrainBlock {
            page_id: page_id.to_string(),
            start,
            tokens: self.tokens[start..end].to_vec(),
            mentions,
            sentences,
            following: self.tokens[end..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LinkRecord, PageRecord, SentenceRecord};
    use crate::tokenizer::build_vocab;
    use proptest::prelude::*;

    fn ids(s: &str) -> Vec<TokenId> {
        // Stable word -> id map independent of any vocab.
        s.split_whitespace()
            .map(|w| w.bytes().fold(7u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32)))
            .collect()
    }

    #[test]
    fn overlap_hand_enumerated() {
        let q = ids("the euphrates flows through syria");
        let s = ids("the euphrates flows through syria and iraq");
        assert_eq!(ngram_overlap(&q, &s), 5 + 4 + 3);
        assert_eq!(ngram_overlap(&ids("a b c"), &ids("a b c")), 6);
        assert_eq!(ngram_overlap(&ids("a b"), &ids("c d")), 0);
    }

    #[test]
    fn overlap_uses_set_semantics() {
        assert_eq!(ngram_overlap(&ids("a a a"), &ids("a a")), 1 + 1);
        assert_eq!(ngram_overlap(&[], &ids("a")), 0);
    }

    proptest! {
        #[test]
        fn overlap_bounded_and_monotone(
            q in proptest::collection::vec(0u32..6, 0..12),
            s in proptest::collection::vec(0u32..6, 0..12),
            extra in proptest::collection::vec(0u32..6, 0..5),
        ) {
            let base = ngram_overlap(&q, &s);
            let bound = NgramSet::of(&q).len();
            prop_assert!(base <= bound);
            prop_assert_eq!(ngram_overlap(&q, &q), bound);
            let mut longer = s.clone();
            longer.extend(extra);
            prop_assert!(ngram_overlap(&q, &longer) >= base);
        }
    }

    fn page(id: &str, title: &str, sents: &[&str]) -> PageRecord {
        PageRecord {
            page_id: id.into(),
            title: title.into(),
            sentences: sents
                .iter()
                .map(|t| SentenceRecord {
                    text: (*t).into(),
                    links: vec![],
                })
                .collect(),
        }
    }

    fn mention(target: &str) -> Mention {
        Mention {
            start: 0,
            end: 1,
            surface: "x".into(),
            target: target.into(),
            dangling: false,
        }
    }

    fn fixture() -> CorpusIndex {
        CorpusIndex::from_records(vec![
            page("A", "Alpha", &["a one .", "a two .", "a three ."]),
            page("B", "Beta", &["b one .", "b two .", "b three .", "b four ."]),
        ])
        .unwrap()
    }

    #[test]
    fn pool_counts_and_dedup() {
        let idx = fixture();
        assert_eq!(candidate_pool(&[mention("A"), mention("B")], &idx).len(), 7);
        assert_eq!(candidate_pool(&[mention("A"), mention("A")], &idx).len(), 3);
        let order: Vec<_> = candidate_pool(&[mention("B"), mention("A")], &idx)
            .iter()
            .map(|c| (c.page_id, c.sentence_index))
            .collect();
        assert_eq!(order[0], ("B", 0));
        assert_eq!(order[4], ("A", 0));
        assert!(candidate_pool(&[], &idx).is_empty());
    }

    #[test]
    fn pool_skips_dangling() {
        let idx = CorpusIndex::from_records(vec![PageRecord {
            page_id: "A".into(),
            title: "Alpha".into(),
            sentences: vec![SentenceRecord {
                text: "to Nowhere".into(),
                links: vec![LinkRecord {
                    start: 3,
                    end: 10,
                    target: "GONE".into(),
                }],
            }],
        }])
        .unwrap();
        let link = idx.sentences_of("A").unwrap()[0].links[0].clone();
        assert!(link.dangling);
        assert!(candidate_pool(&[link], &idx).is_empty());
        let mut undetected = mention("GONE");
        undetected.dangling = false;
        assert!(candidate_pool(&[undetected], &idx).is_empty());
    }

    #[test]
    fn ranking_is_stable_descending() {
        // Query "w x y z". Pool order a,b,c,d:
        //   a "w k x"      -> unigrams {w,x}                   = 2
        //   b "w x y k z"  -> 4 unigrams + {wx,xy} + {wxy}     = 7
        //   c "z k w x y"  -> 4 unigrams + {wx,xy} + {wxy}     = 7
        //   d "k m"        -> 0
        let idx =
            CorpusIndex::from_records(vec![page("P", "Pg", &["w k x", "w x y k z", "z k w x y", "k m"])]).unwrap();
        let vocab = build_vocab(&idx, 100);
        let r = Retriever::new(&idx, &vocab);
        let q = RetrievalQuery {
            mode: RetrievalMode::Qa,
            query_tokens: encode("w x y z", &vocab).ids,
            mentions: vec![mention("P")],
        };
        let ranked = r.rank_backgrounds(&q, &[]);
        assert_eq!(
            ranked.iter().map(|b| (b.sentence_index, b.score)).collect::<Vec<_>>(),
            [(1, 7), (2, 7), (0, 2), (3, 0)]
        );
        // Entity prefix: title tokens then ":".
        assert_eq!(ranked[0].formatted_tokens, encode("pg : w x y k z", &vocab).ids);
    }

    #[test]
    fn empty_pool_ranks_nothing() {
        let idx = fixture();
        let vocab = build_vocab(&idx, 100);
        let r = Retriever::new(&idx, &vocab);
        let q = RetrievalQuery {
            mode: RetrievalMode::Qa,
            query_tokens: vec![5, 6],
            mentions: vec![],
        };
        assert!(r.rank_backgrounds(&q, &[]).is_empty());
    }

    #[test]
    fn passage_sentences_are_excluded() {
        let idx = fixture();
        let vocab = build_vocab(&idx, 100);
        let r = Retriever::new(&idx, &vocab);
        let q = RetrievalQuery {
            mode: RetrievalMode::Qa,
            query_tokens: encode("a two", &vocab).ids,
            mentions: vec![mention("A")],
        };
        let ex = [SentenceRef {
            page_id: "A".into(),
            sentence_index: 1,
        }];
        let ranked = r.rank_backgrounds(&q, &ex);
        assert_eq!(ranked.len(), 2);
        assert!(ranked.iter().all(|b| b.sentence_index != 1));
    }

    fn linked_corpus() -> CorpusIndex {
        let text = "Rivers like Euphrates and Tigris run south .";
        CorpusIndex::from_records(vec![
            PageRecord {
                page_id: "DOC".into(),
                title: "Rivers".into(),
                sentences: vec![
                    SentenceRecord {
                        text: text.into(),
                        links: vec![
                            LinkRecord {
                                start: 12,
                                end: 21,
                                target: "EU".into(),
                            },
                            LinkRecord {
                                start: 26,
                                end: 32,
                                target: "TI".into(),
                            },
                        ],
                    },
                    SentenceRecord {
                        text: "nothing linked here at all .".into(),
                        links: vec![],
                    },
                    SentenceRecord {
                        text: "the end of the page .".into(),
                        links: vec![],
                    },
                ],
            },
            page(
                "EU",
                "Euphrates",
                &["the euphrates runs south through iraq .", "it is long ."],
            ),
            page(
                "TI",
                "Tigris",
                &["the tigris is east of the euphrates .", "rivers run ."],
            ),
        ])
        .unwrap()
    }

    #[test]
    fn pretrain_block_with_links_uses_entity_backgrounds() {
        let idx = linked_corpus();
        let vocab = build_vocab(&idx, 200);
        let r = Retriever::new(&idx, &vocab);
        let blocks = r.page_blocks("DOC", 9);
        assert_eq!(blocks[0].mentions.len(), 2);
        let n_b = 20;
        match r.retrieve_pretrain_background(&blocks[0], n_b) {
            PretrainBackground::Entities { backgrounds } => {
                assert!(!backgrounds.is_empty());
                let used: usize = backgrounds.iter().map(|b| b.formatted_tokens.len() + 1).sum();
                assert!(used <= n_b);
            }
            other => panic!("expected entity backgrounds, got {other:?}"),
        }
    }

    #[test]
    fn pretrain_block_without_links_falls_back_to_following_context() {
        let idx = linked_corpus();
        let vocab = build_vocab(&idx, 200);
        let r = Retriever::new(&idx, &vocab);
        let blocks = r.page_blocks("DOC", 6);
        // Block 1 is "south . nothing linked here at": no links, 14 tokens follow.
        let b = &blocks[1];
        assert!(b.mentions.is_empty());
        let bg = r.retrieve_pretrain_background(b, 4);
        let expected = b.following[..4].to_vec();
        assert_eq!(bg, PretrainBackground::Fallback { tokens: expected });

        let last = blocks.last().unwrap();
        assert!(last.following.is_empty());
        assert_eq!(
            r.retrieve_pretrain_background(last, 4),
            PretrainBackground::Fallback { tokens: vec![] }
        );
    }
}
