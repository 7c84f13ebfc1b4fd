//! Word-level text handling: tokenization, vocabulary, fixed-length
//! encoding, padding masks, and pretrained word vectors.

mod vectors;
pub(crate) mod vocab;

pub use vectors::{load_pretrained_vectors, parse_pretrained_vectors, EmbeddingTable, LoadReport};
pub use vocab::{
    decode, encode, make_pad_mask, PadMask, TokenSeq, Vocabulary, END, PAD, SPECIAL_TOKENS, START, UNK,
};

use unicode_normalization::UnicodeNormalization;

/// Punctuation split off the edges of whitespace-delimited words. Covers
/// ASCII plus the Bengali danda and common typographic marks.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '।' | '॥' | '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '¿' | '¡' | '–' | '—' | '،' | '؟'
        )
}

/// NFC-normalizes, splits on Unicode whitespace, and peels leading and
/// trailing punctuation into one token per character.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    let mut tokens = Vec::new();
    for word in normalized.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|&&c| is_punctuation(c)).count();
        let trail = chars[lead..].iter().rev().take_while(|&&c| is_punctuation(c)).count();
        let core_end = chars.len() - trail;
        tokens.extend(chars[..lead].iter().map(|c| c.to_string()));
        if lead < core_end {
            tokens.push(chars[lead..core_end].iter().collect());
        }
        tokens.extend(chars[core_end..].iter().map(|c| c.to_string()));
    }
    tokens
}

/// Number of tokens that contain at least one letter or digit, i.e. the
/// word count with stand-alone punctuation excluded.
pub fn word_count(text: &str) -> usize {
    tokenize(text)
        .iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .count()
}

/// Joins tokens with single spaces; terminal punctuation attaches to the
/// preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let attaches = matches!(tok, "?" | "।" | "!" | "." | "," | "؟");
        if !out.is_empty() && !attaches {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("এটা কি?"), vec!["এটা", "কি", "?"]);
        assert_eq!(tokenize("a  b"), vec!["a", "b"]);
        assert_eq!(tokenize("ঘড়িটা কোথায়।"), vec!["ঘড়িটা", "কোথায়", "।"]);
        assert_eq!(tokenize("\"hi?!\""), vec!["\"", "hi", "?", "!", "\""]);
        assert_eq!(tokenize("don't"), vec!["don't"]);
        assert_eq!(tokenize(" ? "), vec!["?"]);
    }

    #[test]
    fn tokenize_normalizes_to_nfc() {
        // "য়" written as য + nukta composes under NFC
        let decomposed = "\u{09AF}\u{09BC}";
        let composed: String = decomposed.nfc().collect();
        assert_eq!(tokenize(decomposed), vec![composed]);
    }

    #[test]
    fn word_count_ignores_punctuation() {
        assert_eq!(word_count("এটা কি?"), 2);
        assert_eq!(word_count("?"), 0);
        assert_eq!(word_count("how many 3 ?"), 3);
    }

    #[test]
    fn detokenize_attaches_question_mark() {
        assert_eq!(detokenize(&["what", "color", "?"]), "what color?");
        assert_eq!(detokenize::<&str>(&[]), "");
    }
}
