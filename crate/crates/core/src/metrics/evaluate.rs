use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalPair, EvalReport};
use crate::dataset::{category_name, FeatureStore, RawSample};
use crate::error::{Error, Result};
use crate::inference::{generate_batch, DecodeMode, GenRequest, ImageRef};
use crate::model::checkpoint::params_hash;
use crate::model::VqgModel;
use crate::text::{tokenize, Vocabulary, END};

const GENERATION_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub variant: String,
    pub config_hash: String,
    pub params_hash: String,
    pub vocab_hash: String,
    /// Samples in the split.
    pub corpus_size: usize,
    /// Scored (image, category) groups.
    pub pairs: usize,
    pub decode: DecodeMode,
    pub bleu_monotone: bool,
    pub metric_variants: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedReport {
    #[serde(flatten)]
    pub scores: EvalReport,
    pub metadata: EvalMetadata,
    /// Generated text per group key, in key order.
    pub hypotheses: BTreeMap<String, String>,
}

pub fn metric_variants() -> BTreeMap<String, String> {
    [
        ("bleu", "corpus BLEU, pooled clipped counts, closest-reference brevity penalty"),
        ("rouge_l", "LCS F-measure, beta 1, precision and recall maximized over references"),
        ("cider", "CIDEr without length penalty, n=1..4, idf=ln(|I|/max(df,1)) over per-group reference sets, x10"),
        ("meteor", "exact-match METEOR: F=10PR/(R+9P), penalty 0.5(chunks/matches)^3, no stemming or synonyms"),
        ("grouping", "one hypothesis per (image_id, category); all questions of the group are references"),
        ("inference", "image and category only; answer slots are padding"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Reference questions, tokenized, grouped by `(image_id, category_id)`.
pub fn group_references(samples: &[RawSample]) -> BTreeMap<(u64, usize), Vec<Vec<String>>> {
    let mut groups: BTreeMap<(u64, usize), Vec<Vec<String>>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.image_id, s.category_id))
            .or_default()
            .push(tokenize(&s.question));
    }
    groups
}

/// Generates one question per `(image, category)` group in the realistic
/// setting and scores it against the group's questions.
pub fn evaluate(
    model: &VqgModel,
    vocab: &Vocabulary,
    samples: &[RawSample],
    features: Option<&FeatureStore>,
    mode: DecodeMode,
    config_hash: &str,
) -> Result<EvaluatedReport> {
    if samples.is_empty() {
        return Err(Error::Format("evaluation split has no samples".into()));
    }
    let groups = group_references(samples);
    let keys: Vec<(u64, usize)> = groups.keys().copied().collect();
    let mut pairs = Vec::with_capacity(keys.len());
    let mut hypotheses = BTreeMap::new();
    for chunk in keys.chunks(GENERATION_BATCH) {
        let requests: Vec<GenRequest> = chunk
            .iter()
            .map(|&(image, cat)| GenRequest {
                image: ImageRef::Id(image),
                category: category_name(cat).expect("ingested categories are valid").to_string(),
                max_len: None,
                mode,
            })
            .collect();
        for (&(image, cat), result) in chunk.iter().zip(generate_batch(&requests, model, vocab, features)?) {
            let result = result?;
            let tokens: Vec<String> = result
                .ids
                .iter()
                .filter(|&&id| id != END)
                .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
                .collect();
            let key = format!("{image}/{}", category_name(cat).unwrap_or("?"));
            hypotheses.insert(key.clone(), result.text);
            pairs.push(EvalPair {
                key,
                hypothesis: tokens,
                references: groups[&(image, cat)].clone(),
            });
        }
    }
    let scores = EvalReport::score(&pairs)?;
    let metadata = EvalMetadata {
        variant: model.config.variant.to_string(),
        config_hash: config_hash.to_string(),
        params_hash: params_hash(&model.params),
        vocab_hash: vocab.content_hash(),
        corpus_size: samples.len(),
        pairs: pairs.len(),
        decode: mode,
        bleu_monotone: scores.bleu_monotone(),
        metric_variants: metric_variants(),
    };
    Ok(EvaluatedReport {
        scores,
        metadata,
        hypotheses,
    })
}
