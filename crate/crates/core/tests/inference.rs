use proptest::prelude::*;
use vqg_core::dataset::{build_corpus_vocab, make_synthetic, FeatureStore, RawSample, SyntheticConfig};
use vqg_core::inference::{
    generate, generate_batch, log_softmax, sequence_log_likelihood, DecodeMode, GenRequest, ImageRef, StopReason,
};
use vqg_core::model::{ImageInput, ModelConfig, Variant, VqgModel};
use vqg_core::text::{Vocabulary, END, PAD, START};
use vqg_core::training::{train, RunOptions, TrainConfig, TrainData};
use vqg_core::Error;
use vqg_tensor::init::seeded;

const CATS: [&str; 4] = ["color", "count", "shape", "spatial"];

struct Fixture {
    model: VqgModel,
    vocab: Vocabulary,
    features: FeatureStore,
}

fn fixture(variant: Variant, seed: u64) -> Fixture {
    let corpus = make_synthetic(&SyntheticConfig {
        n_images: 6,
        n_categories: 4,
        seed: 3,
    })
    .unwrap();
    let vocab = build_corpus_vocab(&corpus.samples);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        question_len: 10,
        answer_len: 3,
        variant,
        reconstruct_image: false,
        lambda_recon: 1.0,
        image_input: ImageInput::Pixels,
        position_encoding: true,
        dropout: 0.0,
        freeze_embeddings: false,
    };
    Fixture {
        model: VqgModel::new(config, &mut seeded(seed)).unwrap(),
        vocab,
        features: corpus.features,
    }
}

fn req(image: u64, cat: &str, mode: DecodeMode) -> GenRequest {
    GenRequest {
        mode,
        ..GenRequest::greedy(image, cat)
    }
}

#[test]
fn beam_of_one_equals_greedy() {
    for variant in Variant::ALL {
        let f = fixture(variant, 1);
        for image in 1..=6 {
            for cat in CATS {
                let g = generate(&req(image, cat, DecodeMode::Greedy), &f.model, &f.vocab, Some(&f.features)).unwrap();
                let b = generate(&req(image, cat, DecodeMode::Beam(1)), &f.model, &f.vocab, Some(&f.features)).unwrap();
                assert_eq!(g.ids, b.ids, "{variant} {image} {cat}");
                assert_eq!(g.text, b.text);
            }
        }
    }
}

#[test]
fn emitted_tokens_are_never_pad_or_start() {
    for seed in 0..4 {
        let f = fixture(Variant::ImageAnsCat, seed);
        for mode in [DecodeMode::Greedy, DecodeMode::Beam(3)] {
            for cat in CATS {
                let r = generate(&req(2, cat, mode), &f.model, &f.vocab, Some(&f.features)).unwrap();
                assert!(r.ids.iter().all(|&id| id != PAD && id != START));
                assert_eq!(r.ids.len(), r.log_probs.len());
                assert!(r.ids.len() <= 10);
                match r.stop {
                    StopReason::EndToken => assert_eq!(r.ids.last(), Some(&END)),
                    StopReason::Length => assert_eq!(r.ids.len(), 10),
                }
            }
        }
    }
}

#[test]
fn reported_log_probs_match_teacher_forcing() {
    let f = fixture(Variant::ImageCat, 2);
    for mode in [DecodeMode::Greedy, DecodeMode::Beam(2), DecodeMode::Beam(5)] {
        for cat in CATS {
            let r = req(4, cat, mode);
            let out = generate(&r, &f.model, &f.vocab, Some(&f.features)).unwrap();
            let ll = sequence_log_likelihood(&r, &out.ids, &f.model, &f.vocab, Some(&f.features)).unwrap();
            assert!((ll - out.log_likelihood()).abs() <= 1e-9, "{mode:?} {cat}: {ll} vs {}", out.log_likelihood());
        }
    }
}

#[test]
fn batch_results_match_scalar_results_bitwise() {
    let f = fixture(Variant::ImageCat, 3);
    let reqs: Vec<GenRequest> = (1..=6)
        .flat_map(|i| CATS.iter().map(move |c| req(i, c, DecodeMode::Greedy)))
        .collect();
    let batch = generate_batch(&reqs, &f.model, &f.vocab, Some(&f.features)).unwrap();
    for (r, b) in reqs.iter().zip(&batch) {
        let single = generate(r, &f.model, &f.vocab, Some(&f.features)).unwrap();
        let b = b.as_ref().unwrap();
        assert_eq!(single.ids, b.ids);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&single.log_probs), bits(&b.log_probs));
    }
    let one = generate_batch(&reqs[..1], &f.model, &f.vocab, Some(&f.features)).unwrap();
    assert_eq!(one[0].as_ref().unwrap(), batch[0].as_ref().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn batch_order_does_not_change_results(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle()) {
        let f = fixture(Variant::ImageAnsCat, 4);
        let reqs: Vec<GenRequest> = (0..12).map(|i| req(1 + (i as u64 % 6), CATS[i % 4], DecodeMode::Greedy)).collect();
        let base = generate_batch(&reqs, &f.model, &f.vocab, Some(&f.features)).unwrap();
        let shuffled: Vec<GenRequest> = perm.iter().map(|&i| reqs[i].clone()).collect();
        let out = generate_batch(&shuffled, &f.model, &f.vocab, Some(&f.features)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(out[k].as_ref().unwrap(), base[i].as_ref().unwrap());
        }
    }
}

#[test]
fn inline_features_match_stored_features() {
    let f = fixture(Variant::ImageOnly, 6);
    let stored = generate(&req(3, "shape", DecodeMode::Greedy), &f.model, &f.vocab, Some(&f.features)).unwrap();
    let inline = GenRequest {
        image: ImageRef::Features(f.features.get(3).unwrap().to_vec()),
        ..req(3, "shape", DecodeMode::Greedy)
    };
    assert_eq!(generate(&inline, &f.model, &f.vocab, None).unwrap(), stored);

    let short = GenRequest {
        image: ImageRef::Features(vec![0.0; 7]),
        ..req(3, "shape", DecodeMode::Greedy)
    };
    assert!(generate(&short, &f.model, &f.vocab, None).is_err());
}

#[test]
fn text_only_ignores_the_image() {
    let f = fixture(Variant::TextOnly, 7);
    let a = generate(&req(1, "count", DecodeMode::Greedy), &f.model, &f.vocab, None).unwrap();
    let b = generate(&req(999, "count", DecodeMode::Greedy), &f.model, &f.vocab, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_requests_fail_individually() {
    let f = fixture(Variant::ImageCat, 8);
    let reqs = vec![
        req(1, "color", DecodeMode::Greedy),
        req(1, "colour", DecodeMode::Greedy),
        req(77, "color", DecodeMode::Greedy),
        GenRequest {
            max_len: Some(11),
            ..req(1, "color", DecodeMode::Greedy)
        },
        req(2, "  Count ", DecodeMode::Greedy),
    ];
    let out = generate_batch(&reqs, &f.model, &f.vocab, Some(&f.features)).unwrap();
    assert!(out[0].is_ok());
    match &out[1] {
        Err(e @ Error::UnknownCategory(name)) => {
            assert_eq!(name, "colour");
            let msg = e.to_string();
            for name in ["binary", "color", "count", "shape", "spatial", "time"] {
                assert!(msg.contains(name), "{msg}");
            }
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(out[2], Err(Error::MissingImage(77))));
    assert!(matches!(out[3], Err(Error::Config(_))));
    assert!(out[4].is_ok());

    let mixed = vec![req(1, "color", DecodeMode::Greedy), req(1, "color", DecodeMode::Beam(2))];
    assert!(generate_batch(&mixed, &f.model, &f.vocab, Some(&f.features)).is_err());
    for k in [0, 6] {
        assert!(generate(&req(1, "color", DecodeMode::Beam(k)), &f.model, &f.vocab, Some(&f.features)).is_err());
    }
}

#[test]
fn max_len_truncates_generation() {
    let f = fixture(Variant::ImageCat, 9);
    for len in 1..=4 {
        let r = GenRequest {
            max_len: Some(len),
            ..req(1, "spatial", DecodeMode::Greedy)
        };
        let out = generate(&r, &f.model, &f.vocab, Some(&f.features)).unwrap();
        assert!(out.ids.len() <= len);
    }
}

#[test]
fn log_softmax_normalizes() {
    let row = [1.0, -2.0, 3.5, 1000.0, 999.0];
    let lp = log_softmax(&row);
    let total: f64 = lp.iter().map(|x| x.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!((lp[3] - lp[4] - 1.0).abs() < 1e-12);
}

#[test]
fn model_trained_on_one_question_always_asks_it() {
    let corpus = make_synthetic(&SyntheticConfig {
        n_images: 4,
        n_categories: 4,
        seed: 9,
    })
    .unwrap();
    let question = "what is in the picture ?";
    let samples: Vec<RawSample> = corpus
        .samples
        .iter()
        .map(|s| RawSample {
            question: question.to_string(),
            ..s.clone()
        })
        .collect();
    let vocab = build_corpus_vocab(&samples);
    let data = TrainData::encode(&samples, Some(corpus.features.clone()), vocab, 10, 3);
    let mut config = fixture(Variant::ImageCat, 0).model.config.clone();
    config.vocab_size = data.vocab.len();
    let tc = TrainConfig {
        steps: 150,
        batch_size: 8,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let (t, _) = train(config, tc, &data, &RunOptions::default()).unwrap();
    for image in 1..=4 {
        for cat in CATS {
            for mode in [DecodeMode::Greedy, DecodeMode::Beam(3)] {
                let out = generate(&req(image, cat, mode), &t.model, &data.vocab, Some(&corpus.features)).unwrap();
                assert_eq!(out.text, "what is in the picture?", "{image} {cat} {mode:?}");
                assert_eq!(out.stop, StopReason::EndToken);
            }
        }
    }
}
