//! Brute-force metric oracles shared by the metrics tests and the
//! acceptance suite. Written without reference to the library code.

use rand::Rng as _;
use vqg_core::metrics::EvalPair;
use vqg_tensor::init::{seeded, Rng};

pub const WORDS: [&str; 6] = ["what", "is", "the", "color", "cat", "?"];
pub const TOL: f64 = 1e-9;

pub fn sentence(rng: &mut Rng, min: usize, max: usize) -> Vec<String> {
    let len = rng.gen_range(min..=max);
    (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

pub fn corpus(seed: u64) -> Vec<EvalPair> {
    let mut rng = seeded(seed);
    let n = rng.gen_range(1..=20);
    (0..n)
        .map(|i| {
            let refs = rng.gen_range(1..=3);
            EvalPair {
                key: i.to_string(),
                hypothesis: sentence(&mut rng, 1, 7),
                references: (0..refs).map(|_| sentence(&mut rng, 1, 7)).collect(),
            }
        })
        .collect()
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn bleu_oracle(pairs: &[EvalPair], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for p in pairs {
            let hyp = grams(&p.hypothesis, k);
            den += hyp.len();
            let mut distinct: Vec<Vec<String>> = Vec::new();
            for g in &hyp {
                if !distinct.contains(g) {
                    distinct.push(g.clone());
                }
            }
            for g in &distinct {
                let best_ref = p
                    .references
                    .iter()
                    .map(|r| occurrences(&grams(r, k), g))
                    .max()
                    .unwrap();
                num += occurrences(&hyp, g).min(best_ref);
            }
        }
        if num == 0 {
            return 0.0;
        }
        log_p += (num as f64 / den as f64).ln();
    }
    let c: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let mut r = 0usize;
    for p in pairs {
        let h = p.hypothesis.len() as f64;
        let mut best = p.references[0].len();
        for x in &p.references {
            let (d, bd) = ((x.len() as f64 - h).abs(), (best as f64 - h).abs());
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (log_p / n as f64).exp()
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// Longest common subsequence by enumerating every subset of `a`.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(pairs: &[EvalPair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let ps: Vec<f64> = p
            .references
            .iter()
            .map(|r| lcs_oracle(&p.hypothesis, r) as f64 / p.hypothesis.len() as f64)
            .collect();
        let rs: Vec<f64> = p
            .references
            .iter()
            .map(|r| lcs_oracle(&p.hypothesis, r) as f64 / r.len() as f64)
            .collect();
        let pm = ps.iter().cloned().fold(0.0, f64::max);
        let rm = rs.iter().cloned().fold(0.0, f64::max);
        if pm > 0.0 {
            total += 2.0 * pm * rm / (pm + rm);
        }
    }
    100.0 * total / pairs.len() as f64
}

/// CIDEr with explicit dense vectors over an enumerated n-gram index.
pub fn cider_oracle(pairs: &[EvalPair]) -> f64 {
    let big_n = pairs.len() as f64;
    let mut score = 0.0;
    for p in pairs {
        let mut pair_score = 0.0;
        for n in 1..=4 {
            let mut index: Vec<Vec<String>> = Vec::new();
            for s in std::iter::once(&p.hypothesis).chain(&p.references) {
                for g in grams(s, n) {
                    if !index.contains(&g) {
                        index.push(g);
                    }
                }
            }
            let df = |g: &Vec<String>| {
                pairs
                    .iter()
                    .filter(|q| q.references.iter().any(|r| grams(r, n).contains(g)))
                    .count()
            };
            let idf: Vec<f64> = index.iter().map(|g| (big_n / df(g).max(1) as f64).ln()).collect();
            let dense = |s: &[String]| -> Vec<f64> {
                let all = grams(s, n);
                index
                    .iter()
                    .zip(&idf)
                    .map(|(g, w)| {
                        if all.is_empty() {
                            0.0
                        } else {
                            occurrences(&all, g) as f64 / all.len() as f64 * w
                        }
                    })
                    .collect()
            };
            let h = dense(&p.hypothesis);
            let mut acc = 0.0;
            for r in &p.references {
                let r = dense(r);
                let dot: f64 = h.iter().zip(&r).map(|(a, b)| a * b).sum();
                let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nh > 0.0 && nr > 0.0 {
                    acc += dot / (nh * nr);
                }
            }
            pair_score += acc / p.references.len() as f64;
        }
        score += 10.0 * pair_score / 4.0;
    }
    100.0 * score / big_n
}

/// Every injective exact-match alignment; keeps the most matches, then
/// the fewest chunks.
pub fn align_oracle(hyp: &[String], reference: &[String]) -> (usize, usize) {
    fn rec(i: usize, hyp: &[String], reference: &[String], used: &mut Vec<bool>, links: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == hyp.len() {
            let mut chunks = 0;
            for (k, &(h, r)) in links.iter().enumerate() {
                if k == 0 || !(links[k - 1].0 + 1 == h && links[k - 1].1 + 1 == r) {
                    chunks += 1;
                }
            }
            let m = links.len();
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        rec(i + 1, hyp, reference, used, links, best);
        for j in 0..reference.len() {
            if !used[j] && reference[j] == hyp[i] {
                used[j] = true;
                links.push((i, j));
                rec(i + 1, hyp, reference, used, links, best);
                links.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    rec(0, hyp, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor_oracle(pairs: &[EvalPair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let mut best = 0.0f64;
        for r in &p.references {
            let (m, ch) = align_oracle(&p.hypothesis, r);
            if m == 0 {
                continue;
            }
            let prec = m as f64 / p.hypothesis.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f = prec * rec / (0.9 * prec + 0.1 * rec);
            let frag = ch as f64 / m as f64;
            best = best.max(f * (1.0 - 0.5 * frag * frag * frag));
        }
        total += best;
    }
    100.0 * total / pairs.len() as f64
}

