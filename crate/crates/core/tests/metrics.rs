//! Metric implementations checked against brute-force oracles.

mod support {
    pub mod metric_oracles;
}

use proptest::prelude::*;
use rand::Rng as _;
use support::metric_oracles::*;
use vqg_core::metrics::{align, bleu_n, cider, lcs, meteor_lite, rouge_l, EvalPair, EvalReport};
use vqg_tensor::init::seeded;

// ---- oracle agreement ----------------------------------------------------

#[test]
fn bleu_matches_oracle() {
    for seed in 0..10 {
        let pairs = corpus(seed);
        for n in 1..=4 {
            let (got, want) = (bleu_n(&pairs, n).unwrap(), bleu_oracle(&pairs, n));
            assert!((got - want).abs() <= TOL, "seed {seed} n {n}: {got} vs {want}");
        }
    }
}

#[test]
fn lcs_and_rouge_match_oracle() {
    for seed in 0..10 {
        let pairs = corpus(seed);
        for p in &pairs {
            for r in &p.references {
                assert_eq!(lcs(&p.hypothesis, r), lcs_oracle(&p.hypothesis, r));
            }
        }
        let (got, want) = (rouge_l(&pairs, 1.0).unwrap(), rouge_oracle(&pairs));
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn cider_matches_oracle() {
    for seed in 0..10 {
        let pairs = corpus(seed);
        let (got, want) = (cider(&pairs).unwrap(), cider_oracle(&pairs));
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn meteor_matches_oracle() {
    for seed in 0..10 {
        let pairs = corpus(seed);
        for p in &pairs {
            for r in &p.references {
                assert_eq!(align(&p.hypothesis, r), align_oracle(&p.hypothesis, r), "seed {seed}");
            }
        }
        let (got, want) = (meteor_lite(&pairs).unwrap(), meteor_oracle(&pairs));
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

// ---- fixed values --------------------------------------------------------

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn cider_two_disjoint_images() {
    // every n-gram appears in exactly one of two reference sets, so
    // idf = ln 2 throughout and a perfect four-token copy scores 10 per pair
    let pairs = vec![
        EvalPair::new("a", &toks("red ball here now"), &[toks("red ball here now")]),
        EvalPair::new("b", &toks("blue cube over there"), &[toks("blue cube over there")]),
    ];
    assert!((cider(&pairs).unwrap() - 1000.0).abs() <= TOL);

    // one unigram right out of four, other orders miss
    let half = vec![
        EvalPair::new("a", &toks("red x y z"), &[toks("red ball here now")]),
        EvalPair::new("b", &toks("blue cube over there"), &[toks("blue cube over there")]),
    ];
    // unigram cosine for the first pair: 1 shared of 4 equally weighted terms
    let want = 100.0 * (10.0 * (0.25 / 4.0) + 10.0) / 2.0;
    assert!((cider(&half).unwrap() - want).abs() <= TOL);
}

#[test]
fn identical_corpus_scores_top_marks() {
    let pairs = vec![
        EvalPair::new("1", &toks("what color is the cat ?"), &[toks("what color is the cat ?")]),
        EvalPair::new("2", &toks("how many dogs are there ?"), &[toks("how many dogs are there ?")]),
    ];
    let r = EvalReport::score(&pairs).unwrap();
    for v in [r.bleu1, r.bleu2, r.bleu3, r.rouge_l] {
        assert!((v - 100.0).abs() <= TOL);
    }
    // a single chunk still pays 0.5 / m^3
    let m: f64 = 6.0;
    assert!((r.meteor - 100.0 * (1.0 - 0.5 / m.powi(3))).abs() <= TOL);
    assert!(r.bleu_monotone());
}

#[test]
fn empty_inputs_are_rejected() {
    assert!(EvalReport::score(&[]).is_err());
    let no_refs = vec![EvalPair::new("x", &toks("a"), &[])];
    assert!(EvalReport::score(&no_refs).is_err());
}

// ---- invariants ----------------------------------------------------------

fn arb_corpus() -> impl Strategy<Value = Vec<EvalPair>> {
    let sent = |min| prop::collection::vec(0usize..6, min..7);
    prop::collection::vec((sent(1), prop::collection::vec(sent(1), 1..4)), 1..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (h, rs))| EvalPair {
                key: i.to_string(),
                hypothesis: h.iter().map(|&w| WORDS[w].to_string()).collect(),
                references: rs.iter().map(|r| r.iter().map(|&w| WORDS[w].to_string()).collect()).collect(),
            })
            .collect()
    })
}

fn relabel(pairs: &[EvalPair], perm: &[usize]) -> Vec<EvalPair> {
    let map = |s: &Vec<String>| -> Vec<String> {
        s.iter()
            .map(|w| format!("w{}", perm[WORDS.iter().position(|x| x == w).unwrap()]))
            .collect()
    };
    pairs
        .iter()
        .map(|p| EvalPair {
            key: p.key.clone(),
            hypothesis: map(&p.hypothesis),
            references: p.references.iter().map(map).collect(),
        })
        .collect()
}

proptest! {
    #[test]
    fn scores_are_invariant_to_token_relabeling(
        pairs in arb_corpus(),
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let a = EvalReport::score(&pairs).unwrap();
        let b = EvalReport::score(&relabel(&pairs, &perm)).unwrap();
        for (x, y) in [(a.bleu1, b.bleu1), (a.bleu2, b.bleu2), (a.bleu3, b.bleu3), (a.rouge_l, b.rouge_l), (a.meteor, b.meteor), (a.cider, b.cider)] {
            prop_assert!((x - y).abs() <= TOL, "{x} vs {y}");
        }
    }

    #[test]
    fn scores_stay_in_range(pairs in arb_corpus()) {
        let r = EvalReport::score(&pairs).unwrap();
        for v in [r.bleu1, r.bleu2, r.bleu3, r.rouge_l, r.meteor] {
            prop_assert!((0.0..=100.0 + TOL).contains(&v));
        }
        prop_assert!((0.0..=1000.0 + TOL).contains(&r.cider));
    }

    #[test]
    fn pair_order_does_not_matter(pairs in arb_corpus(), seed in any::<u64>()) {
        let mut shuffled = pairs.clone();
        let mut rng = seeded(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let (a, b) = (EvalReport::score(&pairs).unwrap(), EvalReport::score(&shuffled).unwrap());
        prop_assert!((a.cider - b.cider).abs() <= TOL);
        prop_assert!((a.bleu3 - b.bleu3).abs() <= TOL);
        prop_assert!((a.meteor - b.meteor).abs() <= TOL);
    }
}
