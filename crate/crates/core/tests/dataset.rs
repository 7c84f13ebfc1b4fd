use std::path::{Path, PathBuf};

use proptest::prelude::*;
use serde_json::Value;
use vqg_core::dataset::{build_corpus_vocab, ingest, load_split, CategoryMap, DatasetStats, CATEGORIES};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/vqa-mini")
}

fn expected() -> Value {
    let text = std::fs::read_to_string(fixture().join("manifest.json")).unwrap();
    serde_json::from_str::<Value>(&text).unwrap()["expected"].clone()
}

/// Word counts by a separate rule: whitespace words minus those made only
/// of ASCII punctuation, with trailing punctuation ignored.
fn scan_stats(questions: &[String], images: &[u64]) -> (usize, usize, usize, usize, f64) {
    let mut distinct: Vec<u64> = Vec::new();
    let (mut max, mut min, mut sum) = (0usize, usize::MAX, 0usize);
    for (q, id) in questions.iter().zip(images) {
        let words = q
            .split_whitespace()
            .filter(|w| w.chars().any(|c| !c.is_ascii_punctuation()))
            .count();
        max = max.max(words);
        min = min.min(words);
        sum += words;
        if !distinct.contains(id) {
            distinct.push(*id);
        }
    }
    (questions.len(), distinct.len(), max, min, sum as f64 / questions.len() as f64)
}

#[test]
fn fixture_matches_manifest() {
    let want = expected();
    let split = load_split(&fixture().join("manifest.json"), true).unwrap();
    let ids: Vec<u64> = split.samples.iter().map(|s| s.question_id).collect();
    let want_ids: Vec<u64> = serde_json::from_value(want["retained_question_ids"].clone()).unwrap();
    assert_eq!(ids, want_ids);
    let stats: DatasetStats = serde_json::from_value(want["stats"].clone()).unwrap();
    assert_eq!(split.stats, stats);
    assert_eq!(build_corpus_vocab(&split.samples).len(), want["vocab_size"].as_u64().unwrap() as usize);
    assert_eq!(split.categories.len(), want["category_map_rows"].as_u64().unwrap() as usize);
    assert_eq!(split.categories.distinct_categories(), want["distinct_categories"].as_u64().unwrap() as usize);
    let features = split.features.unwrap();
    assert!(split.samples.iter().all(|s| features.contains(s.image_id)));
}

#[test]
fn fixture_filtering_agrees_with_direct_scan() {
    let dir = fixture();
    let questions: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("questions.json")).unwrap()).unwrap();
    let annotations: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("annotations.json")).unwrap()).unwrap();
    let map: Vec<(String, String)> = std::fs::read_to_string(dir.join("categories.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (a, c) = l.split_once('\t').unwrap();
            (a.to_string(), c.to_string())
        })
        .collect();
    let questions = questions["questions"].as_array().unwrap();
    assert_eq!(questions.len() as u64, expected()["raw_questions"].as_u64().unwrap());

    let (mut texts, mut images, mut cats) = (Vec::new(), Vec::new(), Vec::new());
    for q in questions {
        let qid = &q["question_id"];
        let ann = annotations["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| &a["question_id"] == qid)
            .unwrap();
        let answer = ann["multiple_choice_answer"].as_str().unwrap().trim().to_lowercase();
        if let Some((_, c)) = map.iter().find(|(a, _)| *a == answer) {
            texts.push(q["question"].as_str().unwrap().to_string());
            images.push(q["image_id"].as_u64().unwrap());
            cats.push(c.clone());
        }
    }
    let split = load_split(&dir.join("manifest.json"), false).unwrap();
    assert_eq!(texts.len(), 7);
    let (n, imgs, max, min, avg) = scan_stats(&texts, &images);
    let s = &split.stats;
    assert_eq!((s.questions, s.images, s.max, s.min), (n, imgs, max, min));
    assert!((s.avg - avg).abs() < 1e-12);
    for (sample, cat) in split.samples.iter().zip(&cats) {
        assert_eq!(CATEGORIES[sample.category_id], cat);
    }
}

#[test]
fn empty_annotations_retain_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.json");
    std::fs::write(&ann, r#"{"annotations": []}"#).unwrap();
    let map = vqg_core::dataset::load_category_map(&fixture().join("categories.tsv")).unwrap();
    let (samples, stats) = ingest(&fixture().join("questions.json"), &ann, &map).unwrap();
    assert!(samples.is_empty());
    assert_eq!(stats, DatasetStats::default());
}

#[test]
fn malformed_records_name_their_index() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.json");
    let a = dir.path().join("a.json");
    std::fs::write(&q, r#"[{"image_id": 1, "question_id": 1, "question": "x?"}, {"image_id": 1, "question": "y?"}]"#).unwrap();
    std::fs::write(&a, "[]").unwrap();
    let err = ingest(&q, &a, &CategoryMap::new()).unwrap_err().to_string();
    assert!(err.contains("record 1") || err.contains("index 1") || err.contains("#1"), "{err}");

    std::fs::write(&q, r#"[{"image_id": 1, "question_id": 1, "question": "x?"}]"#).unwrap();
    std::fs::write(&a, r#"[{"question_id": 9, "multiple_choice_answer": "red"}]"#).unwrap();
    assert!(ingest(&q, &a, &CategoryMap::new()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn adding_mapping_rows_never_drops_samples(extra in prop::collection::vec(("[a-z ]{1,12}", 0usize..16), 0..6)) {
        let dir = fixture();
        let base = vqg_core::dataset::load_category_map(&dir.join("categories.tsv")).unwrap();
        let (before, _) = ingest(&dir.join("questions.json"), &dir.join("annotations.json"), &base).unwrap();
        let mut bigger = base.clone();
        for (answer, cat) in &extra {
            if !answer.trim().is_empty() && bigger.lookup(answer).is_none() {
                bigger.insert(answer, *cat);
            }
        }
        let (after, _) = ingest(&dir.join("questions.json"), &dir.join("annotations.json"), &bigger).unwrap();
        prop_assert!(after.len() >= before.len());
    }
}
