//! Word-level tokenizer with reserved special tokens and char offsets.
//!
//! Text is split on whitespace; every punctuation character is its own
//! token. Tokens are lowercased. Offsets are `(start, end)` char indices
//! into the source string.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::CorpusIndex;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const MASK: TokenId = 3;
pub const UNK: TokenId = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}'
        )
}

/// Splits `text` into lowercased word/punctuation pieces with char offsets.
pub fn split_words(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 0;
    let flush = |cur: &mut String, start: usize, end: usize, out: &mut Vec<_>| {
        if !cur.is_empty() {
            out.push((std::mem::take(cur), (start, end)));
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut cur, cur_start, i, &mut out);
        } else if is_punct(c) {
            flush(&mut cur, cur_start, i, &mut out);
            out.push((c.to_lowercase().collect(), (i, i + 1)));
        } else {
            if cur.is_empty() {
                cur_start = i;
            }
            cur.extend(c.to_lowercase());
        }
    }
    let n = text.chars().count();
    flush(&mut cur, cur_start, n, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocab from an iterator of raw texts. Word types are ranked
    /// by frequency, ties broken lexicographically, and truncated to
    /// `max_size - 5` so specials fit.
    pub fn from_texts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in texts {
            for (w, _) in split_words(t.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        // BTreeMap order is lexicographic; the stable sort keeps it among ties.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        let room = max_size.saturating_sub(NUM_SPECIAL);
        Self::from_words(ranked.into_iter().take(room).map(|(w, _)| w)).expect("split words are unique and non-special")
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!("bad token {w:?}")));
            }
            if ids.contains_key(&w) {
                return Err(Error::InvalidVocab(format!("duplicate token {w:?}")));
            }
            ids.insert(w.clone(), tokens.len() as TokenId);
            tokens.push(w);
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens, one per line; line `n` holds id `n + 5`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[NUM_SPECIAL..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Vocabulary over all sentence texts of the corpus plus each title in its
/// background-prefix form `"<title> :"`.
pub fn build_vocab(corpus: &CorpusIndex, max_size: usize) -> Vocab {
    let texts = corpus
        .pages
        .values()
        .flat_map(|p| std::iter::once(format!("{} :", p.title)).chain(p.sentences.iter().map(|s| s.text.clone())));
    Vocab::from_texts(texts, max_size)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<(usize, usize)>,
    pub source: String,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Source text covered by tokens `start..=end` (inclusive), original casing.
    pub fn surface(&self, start: usize, end: usize) -> String {
        let (a, _) = self.offsets[start];
        let (_, b) = self.offsets[end];
        self.source.chars().skip(a).take(b - a).collect()
    }

    /// Lowercased surface form of each token.
    pub fn token_texts(&self) -> Vec<String> {
        let chars: Vec<char> = self.source.chars().collect();
        self.offsets
            .iter()
            .map(|&(a, b)| chars[a..b].iter().flat_map(|c| c.to_lowercase()).collect())
            .collect()
    }
}

pub fn encode(text: &str, vocab: &Vocab) -> TokenizedText {
    let pieces = split_words(text);
    let mut ids = Vec::with_capacity(pieces.len());
    let mut offsets = Vec::with_capacity(pieces.len());
    for (w, off) in pieces {
        ids.push(vocab.id(&w));
        offsets.push(off);
    }
    TokenizedText {
        ids,
        offsets,
        source: text.to_string(),
    }
}

/// Space-joined token strings with specials dropped.
pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::UnknownTokenId { id, size: vocab.len() })?;
        if !is_special(id) {
            parts.push(tok);
        }
    }
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_ranked_vocab() {
        let v = Vocab::from_texts(["a a b"], 7);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("b"));
    }

    #[test]
    fn specials_only_vocab() {
        let v = Vocab::from_texts(["a a b"], 5);
        assert_eq!(v.len(), 5);
        let t = encode("a b", &v);
        assert_eq!(t.ids, vec![UNK, UNK]);
    }

    #[test]
    fn lexicographic_tie_break() {
        let v = Vocab::from_texts(["y x"], 6);
        assert_eq!(v.token(5), Some("x"));
        assert_eq!(v.id("y"), UNK);
    }

    #[test]
    fn splits_punctuation() {
        let v = Vocab::from_texts(["euphrates flows ."], 10);
        let t = encode("Euphrates flows.", &v);
        assert_eq!(decode(&t.ids, &v).unwrap(), "euphrates flows .");
        assert_eq!(t.offsets, vec![(0, 9), (10, 15), (15, 16)]);
    }

    #[test]
    fn empty_text() {
        let v = Vocab::from_texts(["a"], 10);
        assert!(encode("", &v).is_empty());
        assert_eq!(decode(&[], &v).unwrap(), "");
    }

    #[test]
    fn oov_is_unk_with_offsets() {
        let v = Vocab::from_texts(["known"], 10);
        let t = encode("known Zyx", &v);
        assert_eq!(t.ids[1], UNK);
        assert_eq!(t.offsets[1], (6, 9));
        assert_eq!(t.surface(1, 1), "Zyx");
    }

    #[test]
    fn decode_unknown_id_errors() {
        let v = Vocab::from_texts(["a"], 10);
        assert!(matches!(decode(&[99], &v), Err(Error::UnknownTokenId { id: 99, .. })));
    }

    #[test]
    fn decode_drops_specials() {
        let v = Vocab::from_texts(["a b"], 10);
        let ids = [CLS, v.id("a"), SEP, v.id("b"), SEP, PAD];
        assert_eq!(decode(&ids, &v).unwrap(), "a b");
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_texts(["the cat sat on the mat ."], 100);
        let text = v.to_text();
        assert_eq!(text.lines().next(), Some("the"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("a\na\n").is_err());
        assert!(Vocab::from_text("[CLS]\n").is_err());
    }

    fn word() -> impl Strategy<Value = String> {
        prop_oneof!["[a-zA-Z0-9]{1,8}", "[.,;:!?()'\"-]", "[äöüéß]{1,3}",]
    }

    fn text() -> impl Strategy<Value = String> {
        proptest::collection::vec((word(), "[ \t\n]{0,2}"), 0..20)
            .prop_map(|parts| parts.into_iter().map(|(w, s)| w + &s).collect())
    }

    proptest! {
        #[test]
        fn offsets_reconstruct_surfaces(t in text()) {
            let v = Vocab::from_texts([t.as_str()], 1000);
            let enc = encode(&t, &v);
            prop_assert_eq!(enc.ids.len(), enc.offsets.len());
            let chars: Vec<char> = t.chars().collect();
            let mut prev_end = 0;
            for (i, &(a, b)) in enc.offsets.iter().enumerate() {
                prop_assert!(a < b && a >= prev_end);
                prev_end = b;
                let surface: String = chars[a..b].iter().flat_map(|c| c.to_lowercase()).collect();
                prop_assert_eq!(v.token(enc.ids[i]).unwrap(), surface.as_str());
            }
        }

        #[test]
        fn decode_then_encode_is_identity(t in text()) {
            let v = Vocab::from_texts([t.as_str()], 1000);
            let enc = encode(&t, &v);
            let again = encode(&decode(&enc.ids, &v).unwrap(), &v);
            prop_assert_eq!(again.ids, enc.ids.clone());
            prop_assert_eq!(encode(&t, &v), enc);
        }
    }
}
