//! VQA-style ingestion, answer categories, image feature storage,
//! synthetic corpora, and batch scheduling.

mod batching;
mod categories;
mod features;
mod ingest;
pub mod synthetic;

pub use batching::{Batcher, Cursor};
pub use categories::{category_id, category_name, load_category_map, normalize_answer, CategoryMap, CATEGORIES};
pub use features::FeatureStore;
pub use ingest::{ingest, load_split, DatasetStats, RawSample, Split, SplitManifest};
pub use synthetic::{make_synthetic, write_synthetic, SyntheticConfig, SyntheticCorpus};

use crate::text::{encode, tokenize, TokenSeq, Vocabulary};

pub const QUESTION_LEN: usize = 20;
pub const ANSWER_LEN: usize = 5;

/// An encoded training unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub question_id: u64,
    pub image_id: u64,
    pub question: TokenSeq,
    pub answer: TokenSeq,
    pub category_id: usize,
}

/// Questions carry an end token; answers do not.
pub fn encode_sample(raw: &RawSample, vocab: &Vocabulary, question_len: usize, answer_len: usize) -> Sample {
    Sample {
        question_id: raw.question_id,
        image_id: raw.image_id,
        question: encode(&tokenize(&raw.question), vocab, question_len, true),
        answer: encode(&tokenize(&raw.answer), vocab, answer_len, false),
        category_id: raw.category_id,
    }
}

/// Vocabulary over questions, then answers, then all sixteen category
/// names as atomic tokens.
pub fn build_corpus_vocab(samples: &[RawSample]) -> Vocabulary {
    let docs = samples
        .iter()
        .map(|s| s.question.as_str())
        .chain(samples.iter().map(|s| s.answer.as_str()));
    Vocabulary::build(docs, &CATEGORIES)
}
