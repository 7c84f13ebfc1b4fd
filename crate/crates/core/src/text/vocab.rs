use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tokenize;
use crate::error::{read_to_string, write_file, Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Frozen bijection between tokens and ids. Ids 0..4 are the special
/// tokens, the rest follow first-occurrence order of the build corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Tokenizes every document in order, then appends each `atomic` entry
    /// as a single token (category names are control codes and are never
    /// word-split).
    pub fn build<'a, I>(documents: I, atomic: &[&str]) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut v = Self::with_specials();
        for doc in documents {
            for tok in tokenize(doc) {
                v.insert(&tok);
            }
        }
        for &a in atomic {
            v.insert(a);
        }
        v
    }

    /// Builds from an explicit token list (specials are prepended).
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Self::with_specials();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown-token id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line index (0-based) is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected special token {special}"),
                });
            }
        }
        let mut v = Self::with_specials();
        for (i, line) in lines.iter().enumerate().skip(SPECIAL_TOKENS.len()) {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: "token is empty or contains whitespace".into(),
                });
            }
            if v.get(line).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("duplicate token `{line}`"),
                });
            }
            v.insert(line);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_to_string(path)?, path)
    }

    /// SHA-256 of the persisted text form.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed-length id sequence; every position at or past `true_len` is pad.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub true_len: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequence of `len` pads.
    pub fn padding(len: usize) -> Self {
        Self {
            ids: vec![PAD; len],
            true_len: 0,
        }
    }
}

/// Maps tokens to ids, appends the end token when `with_end` is set, then
/// truncates on the right or pads to exactly `fixed_len`.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, fixed_len: usize, with_end: bool) -> TokenSeq {
    assert!(fixed_len >= 1, "fixed_len must be at least 1");
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t.as_ref())).collect();
    if with_end {
        ids.push(END);
    }
    ids.truncate(fixed_len);
    let true_len = ids.len();
    ids.resize(fixed_len, PAD);
    TokenSeq { ids, true_len }
}

/// Tokens up to the first end or pad.
pub fn decode(seq: &TokenSeq, vocab: &Vocabulary) -> Vec<String> {
    seq.ids
        .iter()
        .take_while(|&&id| id != END && id != PAD)
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
        .collect()
}

/// Boolean mask of shape `B×1×T`; false exactly at pad positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadMask {
    pub batch: usize,
    pub len: usize,
    pub keep: Vec<bool>,
}

impl PadMask {
    pub fn shape(&self) -> [usize; 3] {
        [self.batch, 1, self.len]
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.len..(b + 1) * self.len]
    }

    pub fn from_ids(ids: &[usize], len: usize) -> Self {
        Self {
            batch: ids.len() / len.max(1),
            len,
            keep: ids.iter().map(|&id| id != PAD).collect(),
        }
    }
}

pub fn make_pad_mask(batch: &[TokenSeq]) -> Result<PadMask> {
    let len = batch.first().map_or(0, TokenSeq::len);
    if let Some((i, s)) = batch.iter().enumerate().find(|(_, s)| s.len() != len) {
        return Err(Error::Format(format!(
            "ragged batch: row {i} has length {} but row 0 has {len}",
            s.len()
        )));
    }
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
    Ok(PadMask {
        batch: batch.len(),
        len,
        keep: ids.iter().map(|&id| id != PAD).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_counts_specials_plus_unique_tokens() {
        let v = Vocabulary::build(["a b", "b c"], &[]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("c"), Some(6));
        let empty = Vocabulary::build(["", "   "], &[]);
        assert_eq!(empty.len(), 4);
    }

    #[test]
    fn atomic_tokens_are_not_split() {
        let v = Vocabulary::build(["x"], &["two words"]);
        assert_eq!(v.get("two words"), Some(5));
        assert_eq!(v.get("two"), None);
    }

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::build(["hello"], &[]);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.get(s), Some(i));
            assert_eq!(v.token(i), Some(*s));
        }
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(["dog"], &[]);
        let s = encode(&["cat"], &v, 5, true);
        assert_eq!(s.ids, vec![UNK, END, PAD, PAD, PAD]);
        assert_eq!(s.true_len, 2);

        let words: Vec<String> = (0..22).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::from_tokens(&words);
        let s = encode(&words, &v, 20, true);
        assert_eq!(s.ids, (4..24).collect::<Vec<_>>());
        assert_eq!(s.true_len, 20);

        let s = encode(&words[..5], &v, 5, false);
        assert_eq!(s.true_len, 5);
        assert!(!s.ids.contains(&PAD));
    }

    #[test]
    fn pad_mask_examples() {
        let rows = vec![
            TokenSeq { ids: vec![5, 9, PAD, PAD], true_len: 2 },
            TokenSeq::padding(4),
            TokenSeq { ids: vec![5, 6, 7, 8], true_len: 4 },
        ];
        let m = make_pad_mask(&rows).unwrap();
        assert_eq!(m.shape(), [3, 1, 4]);
        assert_eq!(m.row(0), &[true, true, false, false]);
        assert_eq!(m.row(1), &[false; 4]);
        assert_eq!(m.row(2), &[true; 4]);
        let ragged = vec![TokenSeq::padding(3), TokenSeq::padding(4)];
        assert!(make_pad_mask(&ragged).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["এটা কি ?", "লাল"], &["color"]);
        let path = Path::new("vocab.txt");
        assert_eq!(Vocabulary::from_text(&v.to_text(), path).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n", path).is_err());
        let dup = format!("{}x\nx\n", v.to_text());
        assert!(Vocabulary::from_text(&dup, path).is_err());
    }

    proptest! {
        #[test]
        fn encode_is_length_total_and_round_trips(
            words in proptest::collection::vec("[a-e]{1,3}", 0..30),
            fixed_len in 1usize..25,
        ) {
            let v = Vocabulary::from_tokens(&words);
            let q = encode(&words, &v, fixed_len, true);
            prop_assert_eq!(q.ids.len(), fixed_len);
            prop_assert!(q.ids[q.true_len..].iter().all(|&id| id == PAD));
            let m = make_pad_mask(std::slice::from_ref(&q)).unwrap();
            let popcount = m.keep.iter().filter(|&&k| k).count();
            prop_assert_eq!(popcount, (words.len() + 1).min(fixed_len));
            let back = decode(&q, &v);
            let keep = words.len().min(fixed_len);
            prop_assert_eq!(&back[..], &words[..keep]);
        }

        #[test]
        fn build_is_deterministic(docs in proptest::collection::vec("[a-d ]{0,12}", 0..8)) {
            let a = Vocabulary::build(docs.iter().map(String::as_str), &["color"]);
            let b = Vocabulary::build(docs.iter().map(String::as_str), &["color"]);
            prop_assert_eq!(a, b);
        }
    }
}
