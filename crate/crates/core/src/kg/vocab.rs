use super::RESERVED;
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;

pub const PAD_ID: u32 = 0;
pub const UNK_TOKEN: &str = "[UNK]";
pub const UNK_ID: u32 = RESERVED.len() as u32;

/// Lowercases and splits on whitespace. Marker tokens are recognized
/// case-insensitively and kept in their canonical upper-case spelling.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            let upper = w.to_uppercase();
            if RESERVED.contains(&upper.as_str()) || upper == UNK_TOKEN {
                upper
            } else {
                w.to_lowercase()
            }
        })
        .collect()
}

/// Bijective token/id map with the markers and `[UNK]` at fixed low ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved markers, `[UNK]`, then every corpus word with count ≥ `min_count`,
    /// ordered by descending count and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Self {
        let min_count = min_count.max(1);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if RESERVED.contains(&tok.as_str()) || tok == UNK_TOKEN {
                    continue;
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once(UNK_TOKEN.to_string()))
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("tokens are unique by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Record { line: n + 1, msg: "expected token<TAB>id".into() })?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Record { line: n + 1, msg: format!("bad id {id:?}") })?;
            if id != tokens.len() {
                return Err(Error::Record { line: n + 1, msg: format!("ids must be dense and sorted, got {id}") });
            }
            tokens.push(tok.to_string());
        }
        let reserved_ok = RESERVED
            .iter()
            .chain(std::iter::once(&UNK_TOKEN))
            .enumerate()
            .all(|(i, r)| tokens.get(i).map(String::as_str) == Some(*r));
        if !reserved_ok {
            return Err(Error::Format("vocab does not start with the reserved tokens".into()));
        }
        Self::from_tokens(tokens)
    }

    /// Hex SHA-256 of the TSV form; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id).unwrap_or(UNK_TOKEN)).collect()
    }
}

/// Fixed-length id sequence. Positions at or after `len` are `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for `[PAD]`.
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn from_ids(mut ids: Vec<u32>, n_max: usize) -> Self {
        ids.truncate(n_max);
        let real = ids.len();
        ids.resize(n_max, PAD_ID);
        let mask = (0..n_max).map(|i| i < real).collect();
        TokenSequence { ids, mask }
    }

    pub fn n_max(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-`[PAD]` positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode(text: &str, vocab: &Vocab, n_max: usize) -> TokenSequence {
    let ids = tokenize(text)
        .into_iter()
        .take(n_max)
        .map(|t| vocab.id(&t).unwrap_or(UNK_ID))
        .collect();
    TokenSequence::from_ids(ids, n_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn min_count_filters_words() {
        let v = Vocab::build(&["a a b"], 2);
        assert_eq!(v.len(), RESERVED.len() + 2);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(v.id(UNK_TOKEN), Some(UNK_ID));
    }

    #[test]
    fn one_word_corpus() {
        assert_eq!(Vocab::build(&["word"], 1).len(), RESERVED.len() + 2);
    }

    #[test]
    fn reserved_tokens_are_not_shadowed() {
        let v = Vocab::build(&["[head] [HEAD] [pad] x [unk]"], 1);
        assert_eq!(v.len(), RESERVED.len() + 2);
        assert_eq!(v.id("[PAD]"), Some(PAD_ID));
        assert_eq!(v.id("[HEAD]"), Some(1));
        assert_eq!(v.id("[head]"), None);
    }

    #[test]
    fn encode_pads_and_lowercases() {
        let v = Vocab::build(&["hello world"], 1);
        let s = encode("Hello WORLD", &v, 4);
        assert_eq!(s.ids, vec![v.id("hello").unwrap(), v.id("world").unwrap(), PAD_ID, PAD_ID]);
        assert_eq!(s.mask, vec![true, true, false, false]);
        assert_eq!(v.decode(&s), "hello world");
    }

    #[test]
    fn encode_truncates_from_the_right() {
        let v = Vocab::build(&["a b c d e"], 1);
        let s = encode("a b c d e", &v, 3);
        assert_eq!(v.decode(&s), "a b c");
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(&["a"], 1);
        assert_eq!(encode("a zzz", &v, 2).ids[1], UNK_ID);
    }

    #[test]
    fn tsv_round_trip_and_fingerprint() {
        let v = Vocab::build(&["b a a [SEP] c"], 1);
        let back = Vocab::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_eq!(v.fingerprint().len(), 64);
        assert!(Vocab::from_tsv("x\t0\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_on_in_vocab_text(words in prop::collection::vec("[a-z]{1,6}", 1..12), extra in 0usize..4) {
            let text = words.join(" ");
            let v = Vocab::build(&[text.as_str()], 1);
            let n_max = words.len() + extra;
            let seq = encode(&text.to_uppercase(), &v, n_max);
            prop_assert_eq!(v.decode(&seq), text);
            prop_assert!(seq.ids[words.len()..].iter().all(|&id| id == PAD_ID));
        }

        #[test]
        fn padding_keeps_prefix(ids in prop::collection::vec(1u32..50, 0..10), n_max in 1usize..16) {
            let seq = TokenSequence::from_ids(ids.clone(), n_max);
            let keep = ids.len().min(n_max);
            prop_assert_eq!(&seq.ids[..keep], &ids[..keep]);
            prop_assert_eq!(seq.len(), keep);
        }
    }
}
