//! Question generation from an image and a category alone. Answers are
//! withheld: image-ans-cat models see all-pad answer slots.

use serde::{Deserialize, Serialize};
use vqg_tensor::Tensor;

use crate::dataset::{category_id, FeatureStore};
use crate::error::{Error, Result};
use crate::model::{category_token, Batch, EvalMemory, VqgModel};
use crate::text::{detokenize, Vocabulary, END, PAD, START};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

pub const MAX_BEAM: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageRef {
    Id(u64),
    Features(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub image: ImageRef,
    pub category: String,
    /// Defaults to the model's question length.
    pub max_len: Option<usize>,
    pub mode: DecodeMode,
}

impl GenRequest {
    pub fn greedy(image_id: u64, category: &str) -> Self {
        Self {
            image: ImageRef::Id(image_id),
            category: category.to_string(),
            max_len: None,
            mode: DecodeMode::Greedy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EndToken,
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    /// Emitted ids, including the end token when decoding stopped on it.
    pub ids: Vec<usize>,
    pub text: String,
    /// Log-probability of each emitted id under the full softmax.
    pub log_probs: Vec<f64>,
    pub stop: StopReason,
}

impl GenResult {
    fn new(ids: Vec<usize>, log_probs: Vec<f64>, vocab: &Vocabulary) -> Self {
        let stop = if ids.last() == Some(&END) {
            StopReason::EndToken
        } else {
            StopReason::Length
        };
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != END)
            .map(|&id| vocab.token(id).unwrap_or("<unk>"))
            .collect();
        Self {
            text: detokenize(&words),
            ids,
            log_probs,
            stop,
        }
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// A validated request ready for batching.
struct Prepared {
    image_id: u64,
    features: Option<Vec<f64>>,
    category: usize,
    max_len: usize,
}

fn prepare(req: &GenRequest, model: &VqgModel, vocab: &Vocabulary, store: Option<&FeatureStore>) -> Result<Prepared> {
    let name = req.category.trim().to_lowercase();
    let cat = category_id(&name).ok_or_else(|| {
        Error::UnknownCategory(req.category.clone())
    })?;
    let category = category_token(vocab, cat)?;
    let q = model.config.question_len;
    let max_len = req.max_len.unwrap_or(q);
    if max_len == 0 || max_len > q {
        return Err(Error::Config(format!("max_len must be in 1..={q}, got {max_len}")));
    }
    if let DecodeMode::Beam(k) = req.mode {
        if !(1..=MAX_BEAM).contains(&k) {
            return Err(Error::Config(format!("beam width must be in 1..={MAX_BEAM}, got {k}")));
        }
    }
    let (image_id, features) = match &req.image {
        ImageRef::Id(id) => {
            let f = if model.config.variant.uses_image() {
                let store = store.ok_or(Error::MissingImage(*id))?;
                Some(store.get(*id)?.to_vec())
            } else {
                None
            };
            (*id, f)
        }
        ImageRef::Features(v) => {
            let width = model.config.image_input.raw_width();
            if model.config.variant.uses_image() && v.len() != width {
                return Err(Error::Format(format!("image features have width {}, expected {width}", v.len())));
            }
            (0, model.config.variant.uses_image().then(|| v.clone()))
        }
    };
    Ok(Prepared {
        image_id,
        features,
        category,
        max_len,
    })
}

fn memory(items: &[&Prepared], model: &VqgModel) -> Result<EvalMemory> {
    let n = items.len();
    let cfg = &model.config;
    let features = if cfg.variant.uses_image() {
        let width = cfg.image_input.raw_width();
        let data: Vec<f64> = items
            .iter()
            .flat_map(|p| p.features.as_ref().expect("prepared with features").iter().copied())
            .collect();
        Some(Tensor::new(vec![n, width], data)?)
    } else {
        None
    };
    let batch = Batch {
        image_ids: items.iter().map(|p| p.image_id).collect(),
        features,
        questions: vec![PAD; n * cfg.question_len],
        answers: vec![PAD; n * cfg.answer_len],
        categories: items.iter().map(|p| p.category).collect(),
    };
    model.eval_memory(&batch)
}

/// Log-softmax of the last position of each row of `[B, L, V]` logits.
fn last_log_probs(logits: &Tensor) -> Vec<Vec<f64>> {
    let (b, l, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    (0..b)
        .map(|r| {
            let row = &logits.data()[((r * l) + l - 1) * v..(r * l + l) * v];
            log_softmax(row)
        })
        .collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Padding and start are never emitted.
fn emittable(id: usize) -> bool {
    id != PAD && id != START
}

/// Highest log-probability among emittable ids; ties go to the lowest id.
fn argmax(lp: &[f64]) -> usize {
    let mut best = None;
    for (id, &v) in lp.iter().enumerate().filter(|(id, _)| emittable(*id)) {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.expect("vocabulary has emittable tokens").0
}

fn decoder_input(prefixes: &[&Vec<usize>]) -> Vec<usize> {
    prefixes
        .iter()
        .flat_map(|p| std::iter::once(START).chain(p.iter().copied()))
        .collect()
}

fn greedy(model: &VqgModel, mem: &EvalMemory, max_len: &[usize], vocab: &Vocabulary) -> Result<Vec<GenResult>> {
    let n = mem.batch();
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut lps: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut active: Vec<usize> = (0..n).filter(|&r| max_len[r] > 0).collect();
    while !active.is_empty() {
        let sub = mem.select(&active)?;
        let prefixes: Vec<&Vec<usize>> = active.iter().map(|&r| &ids[r]).collect();
        let logits = model.eval_logits(&sub, &decoder_input(&prefixes))?;
        for (lp, &r) in last_log_probs(&logits).iter().zip(&active) {
            let next = argmax(lp);
            ids[r].push(next);
            lps[r].push(lp[next]);
        }
        active.retain(|&r| ids[r].last() != Some(&END) && ids[r].len() < max_len[r]);
    }
    Ok(ids
        .into_iter()
        .zip(lps)
        .map(|(i, l)| GenResult::new(i, l, vocab))
        .collect())
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    log_probs: Vec<f64>,
    score: f64,
}

/// Beam search over one memory row. Candidates are ranked by summed
/// log-probability, then by parent beam, then by token id, so width 1
/// reproduces greedy decoding.
fn beam(model: &VqgModel, mem: &EvalMemory, k: usize, max_len: usize, vocab: &Vocabulary) -> Result<GenResult> {
    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let sub = mem.select(&vec![0; alive.len()])?;
        let prefixes: Vec<&Vec<usize>> = alive.iter().map(|h| &h.ids).collect();
        let logits = model.eval_logits(&sub, &decoder_input(&prefixes))?;
        let rows = last_log_probs(&logits);
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, lp) in rows.iter().enumerate() {
            for (id, &v) in lp.iter().enumerate().filter(|(id, _)| emittable(*id)) {
                candidates.push((alive[b].score + v, b, id));
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(k);
        for &(score, b, id) in candidates.iter().take(k) {
            let mut h = alive[b].clone();
            h.ids.push(id);
            h.log_probs.push(rows[b][id]);
            h.score = score;
            if id == END {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= k {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .into_iter()
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("at least one hypothesis");
    Ok(GenResult::new(best.ids, best.log_probs, vocab))
}

pub fn generate(req: &GenRequest, model: &VqgModel, vocab: &Vocabulary, store: Option<&FeatureStore>) -> Result<GenResult> {
    generate_batch(std::slice::from_ref(req), model, vocab, store)?
        .pop()
        .expect("one result per request")
}

/// Decodes all valid requests together. Invalid requests yield their own
/// error without affecting the rest; mixing decode modes is rejected.
pub fn generate_batch(
    requests: &[GenRequest],
    model: &VqgModel,
    vocab: &Vocabulary,
    store: Option<&FeatureStore>,
) -> Result<Vec<Result<GenResult>>> {
    let Some(first) = requests.first() else {
        return Ok(Vec::new());
    };
    if requests.iter().any(|r| r.mode != first.mode) {
        return Err(Error::Config("all requests in a batch must use the same decode mode".into()));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let prepared: Vec<Result<Prepared>> = requests.iter().map(|r| prepare(r, model, vocab, store)).collect();
    let ok: Vec<(usize, &Prepared)> = prepared
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().ok().map(|p| (i, p)))
        .collect();
    let mut results: Vec<Option<GenResult>> = vec![None; requests.len()];
    if !ok.is_empty() {
        let items: Vec<&Prepared> = ok.iter().map(|(_, p)| *p).collect();
        let mem = memory(&items, model)?;
        match first.mode {
            DecodeMode::Greedy => {
                let lens: Vec<usize> = items.iter().map(|p| p.max_len).collect();
                for ((i, _), r) in ok.iter().zip(greedy(model, &mem, &lens, vocab)?) {
                    results[*i] = Some(r);
                }
            }
            DecodeMode::Beam(k) => {
                for (row, (i, p)) in ok.iter().enumerate() {
                    let one = mem.select(&[row])?;
                    results[*i] = Some(beam(model, &one, k, p.max_len, vocab)?);
                }
            }
        }
    }
    Ok(prepared
        .into_iter()
        .zip(results)
        .map(|(p, r)| p.map(|_| r.expect("decoded")))
        .collect())
}

/// Teacher-forced log-likelihood of `ids` (emitted tokens, end token
/// included when present) given the request's image and category.
pub fn sequence_log_likelihood(
    req: &GenRequest,
    ids: &[usize],
    model: &VqgModel,
    vocab: &Vocabulary,
    store: Option<&FeatureStore>,
) -> Result<f64> {
    let p = prepare(req, model, vocab, store)?;
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mem = memory(&[&p], model)?;
    let input: Vec<usize> = std::iter::once(START).chain(ids[..ids.len() - 1].iter().copied()).collect();
    let logits = model.eval_logits(&mem, &input)?;
    let v = logits.shape()[2];
    Ok(ids
        .iter()
        .enumerate()
        .map(|(t, &id)| log_softmax(&logits.data()[t * v..(t + 1) * v])[id])
        .sum())
}
