//! Corpus-level text generation metrics over token sequences, reported
//! on a 0–100 scale (CIDEr on its conventional ×10 scale, so 0–1000).

mod evaluate;

pub use evaluate::{evaluate, group_references, EvalMetadata, EvaluatedReport};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One hypothesis with its reference set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub key: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new<S: AsRef<str>>(key: impl Into<String>, hypothesis: &[S], references: &[Vec<S>]) -> Self {
        let own = |v: &[S]| v.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>();
        Self {
            key: key.into(),
            hypothesis: own(hypothesis),
            references: references.iter().map(|r| own(r)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub cider: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

impl EvalReport {
    pub fn score(pairs: &[EvalPair]) -> Result<Self> {
        Ok(Self {
            bleu1: bleu_n(pairs, 1)?,
            bleu2: bleu_n(pairs, 2)?,
            bleu3: bleu_n(pairs, 3)?,
            cider: cider(pairs)?,
            meteor: meteor_lite(pairs)?,
            rouge_l: rouge_l(pairs, 1.0)?,
        })
    }

    /// BLEU-1 ≥ BLEU-2 ≥ BLEU-3.
    pub fn bleu_monotone(&self) -> bool {
        self.bleu1 >= self.bleu2 && self.bleu2 >= self.bleu3
    }
}

fn check_corpus(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Format("cannot score an empty corpus".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.references.iter().all(Vec::is_empty)) {
        return Err(Error::Format(format!("pair `{}` has no non-empty reference", p.key)));
    }
    Ok(())
}

pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with pooled clipped precisions for orders `1..=n`, their
/// geometric mean, and the brevity penalty against the closest reference
/// length of each pair (ties to the shorter).
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must be in 1..=4, got {n}")));
    }
    check_corpus(pairs)?;
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        let c = p.hypothesis.len() as i64;
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| ((r as i64 - c).abs(), r))
            .expect("non-empty reference set");
        for k in 1..=n {
            let hyp = ngram_counts(&p.hypothesis, k);
            let refs: Vec<_> = p.references.iter().map(|r| ngram_counts(r, k)).collect();
            for (g, &count) in &hyp {
                let max_ref = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[k - 1] += count.min(max_ref);
            }
            total[k - 1] += p.hypothesis.len().saturating_sub(k - 1);
        }
    }
    if hyp_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_mean.exp())
}

/// Length of the longest common subsequence.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Mean over pairs of the LCS F-measure, ×100. Precision and recall are
/// each maximized over references; `beta` weights recall (1 gives the
/// harmonic mean).
pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> Result<f64> {
    check_corpus(pairs)?;
    let mut sum = 0.0;
    for p in pairs {
        if p.hypothesis.is_empty() {
            continue;
        }
        let (mut prec, mut rec) = (0.0f64, 0.0f64);
        for r in p.references.iter().filter(|r| !r.is_empty()) {
            let l = lcs(&p.hypothesis, r) as f64;
            prec = prec.max(l / p.hypothesis.len() as f64);
            rec = rec.max(l / r.len() as f64);
        }
        if prec > 0.0 && rec > 0.0 {
            let b2 = beta * beta;
            sum += (1.0 + b2) * prec * rec / (rec + b2 * prec);
        }
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

/// CIDEr (no length penalty) over orders 1..4. Document frequencies
/// count the pairs whose reference set contains an n-gram, with
/// `idf = ln(|I| / max(df, 1))`. Each pair scores `10 · mean_n mean_refs
/// cos(tfidf(hyp), tfidf(ref))`; the corpus mean is reported ×100.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    const ORDERS: usize = 4;
    let docs = pairs.len() as f64;
    let mut df: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); ORDERS];
    for p in pairs {
        for n in 1..=ORDERS {
            let mut seen: Vec<&[String]> = p.references.iter().flat_map(|r| r.windows(n)).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    let vector = |tokens: &'_ [String], n: usize| -> HashMap<Vec<String>, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let d = df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
                (g.to_vec(), c as f64 / total as f64 * (docs / d).ln())
            })
            .collect()
    };
    let mut sum = 0.0;
    for p in pairs {
        let mut per_pair = 0.0;
        for n in 1..=ORDERS {
            let h = vector(&p.hypothesis, n);
            let mut acc = 0.0;
            for r in &p.references {
                acc += cosine(&h, &vector(r, n));
            }
            per_pair += acc / p.references.len() as f64;
        }
        sum += 10.0 * per_pair / ORDERS as f64;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let norm = |m: &HashMap<Vec<String>, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // iterate in a fixed order so the sum is reproducible
    let mut keys: Vec<&Vec<String>> = a.keys().filter(|k| b.contains_key(*k)).collect();
    keys.sort();
    keys.iter().map(|k| a[*k] * b[*k]).sum::<f64>() / (na * nb)
}

/// Exact-match unigram alignment of maximum size with the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    // memoized search over (hyp position, used reference positions,
    // reference position matched by the previous hyp token)
    let candidates: Vec<Vec<usize>> = hyp
        .iter()
        .map(|w| (0..reference.len()).filter(|&j| &reference[j] == w).collect())
        .collect();
    let mut memo: HashMap<(usize, u128, Option<usize>), (usize, usize)> = HashMap::new();
    fn better(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }
    fn go(
        i: usize,
        used: u128,
        prev: Option<usize>,
        cand: &[Vec<usize>],
        memo: &mut HashMap<(usize, u128, Option<usize>), (usize, usize)>,
    ) -> (usize, usize) {
        if i == cand.len() {
            return (0, 0);
        }
        if let Some(&v) = memo.get(&(i, used, prev)) {
            return v;
        }
        let mut best = go(i + 1, used, None, cand, memo);
        for &j in &cand[i] {
            if used & (1u128 << j) != 0 {
                continue;
            }
            let (m, c) = go(i + 1, used | (1u128 << j), Some(j), cand, memo);
            let starts_chunk = prev.map_or(true, |p| p + 1 != j);
            let option = (m + 1, c + usize::from(starts_chunk));
            if better(option, best) {
                best = option;
            }
        }
        memo.insert((i, used, prev), best);
        best
    }
    assert!(reference.len() <= 128, "reference longer than 128 tokens");
    go(0, 0, None, &candidates, &mut memo)
}

/// METEOR restricted to exact matches: `F = 10PR / (R + 9P)`, penalty
/// `0.5 · (chunks / matches)³`, best reference per pair, corpus mean ×100.
pub fn meteor_lite(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let mut sum = 0.0;
    for p in pairs {
        let mut best = 0.0f64;
        for r in p.references.iter().filter(|r| !r.is_empty()) {
            best = best.max(meteor_sentence(&p.hypothesis, r));
        }
        sum += best;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

pub fn meteor_sentence(hyp: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pair(h: &str, refs: &[&str]) -> EvalPair {
        EvalPair {
            key: h.into(),
            hypothesis: toks(h),
            references: refs.iter().map(|r| toks(r)).collect(),
        }
    }

    #[test]
    fn bleu_hand_examples() {
        let p = [pair("a b c d", &["a b c e"])];
        assert_eq!(bleu_n(&p, 1).unwrap(), 75.0);
        let same = [pair("x y z", &["x y z"]), pair("u v", &["u v"])];
        for n in 1..=2 {
            assert!((bleu_n(&same, n).unwrap() - 100.0).abs() < 1e-12);
        }
        assert!(bleu_n(&[], 1).is_err());
        assert!(bleu_n(&p, 0).is_err());
    }

    #[test]
    fn bleu_clips_repeated_words() {
        let p = [pair("the the the the", &["the cat"])];
        // clipped precision 1/4, brevity penalty 1
        assert!((bleu_n(&p, 1).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let p = [pair("a b", &["a b c d"])];
        let want = 100.0 * (1.0f64 - 2.0).exp();
        assert!((bleu_n(&p, 1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_example() {
        let p = [pair("a b c d", &["a c d"])];
        let want = 2.0 * 0.75 * 1.0 / 1.75 * 100.0;
        assert!((rouge_l(&p, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 85.714285714).abs() < 1e-6);
        assert_eq!(rouge_l(&[pair("", &["a"])], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn meteor_hand_examples() {
        let p = [pair("a b c d", &["a b c d"])];
        assert!((meteor_lite(&p).unwrap() - 99.21875).abs() < 1e-12);
        assert_eq!(meteor_lite(&[pair("a b", &["c d"])]).unwrap(), 0.0);
        // "b a" vs "a b": two matches, two chunks
        assert_eq!(align(&toks("b a"), &toks("a b")), (2, 2));
        // repeated words: choose the alignment with a single chunk
        assert_eq!(align(&toks("a b"), &toks("a x a b")), (2, 1));
    }

    #[test]
    fn cider_single_image_is_zero() {
        let p = [pair("a b c", &["a b c"])];
        assert_eq!(cider(&p).unwrap(), 0.0);
    }

    #[test]
    fn lcs_basic() {
        assert_eq!(lcs(&toks("a b c d"), &toks("a c d")), 3);
        assert_eq!(lcs(&toks(""), &toks("a")), 0);
        assert_eq!(lcs(&toks("a b"), &toks("b a")), 1);
    }
}
