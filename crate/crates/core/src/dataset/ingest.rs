use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{load_category_map, CategoryMap, FeatureStore};
use crate::error::{read_to_string, Error, Result};
use crate::text::word_count;

#[derive(Clone, Debug, Deserialize)]
struct QuestionRecord {
    image_id: u64,
    question_id: u64,
    question: String,
}

#[derive(Clone, Debug, Deserialize)]
struct AnnotationRecord {
    question_id: u64,
    multiple_choice_answer: String,
}

/// A retained question with its primary answer and category, before
/// encoding against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
    pub answer: String,
    pub category_id: usize,
}

/// Corpus statistics; lengths are raw word counts before truncation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub questions: usize,
    pub images: usize,
    pub max: usize,
    pub min: usize,
    pub avg: f64,
}

impl DatasetStats {
    pub fn compute(samples: &[RawSample]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let lengths: Vec<usize> = samples.iter().map(|s| word_count(&s.question)).collect();
        let images: BTreeSet<u64> = samples.iter().map(|s| s.image_id).collect();
        Self {
            questions: samples.len(),
            images: images.len(),
            max: *lengths.iter().max().unwrap(),
            min: *lengths.iter().min().unwrap(),
            avg: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
        }
    }
}

/// Reads a JSON file holding either a bare array or an object whose `key`
/// field is the array, deserializing each record separately so errors can
/// name the record index.
fn read_records<T: DeserializeOwned>(path: &Path, key: &str) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let items = match value {
        Value::Array(items) => items,
        Value::Object(mut obj) => match obj.remove(key) {
            Some(Value::Array(items)) => items,
            _ => {
                return Err(Error::Format(format!(
                    "{}: expected a `{key}` array",
                    path.display()
                )))
            }
        },
        _ => {
            return Err(Error::Format(format!(
                "{}: expected a JSON array or object",
                path.display()
            )))
        }
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            serde_json::from_value(item).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                index,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Joins questions with their annotations and keeps those whose primary
/// answer maps to a category. Questions without an annotation are skipped.
pub fn ingest(questions: &Path, annotations: &Path, categories: &CategoryMap) -> Result<(Vec<RawSample>, DatasetStats)> {
    let questions_list: Vec<QuestionRecord> = read_records(questions, "questions")?;
    let annotation_list: Vec<AnnotationRecord> = read_records(annotations, "annotations")?;

    let mut seen = HashSet::new();
    for (index, q) in questions_list.iter().enumerate() {
        if !seen.insert(q.question_id) {
            return Err(Error::Record {
                path: questions.to_path_buf(),
                index,
                reason: format!("duplicate question_id {}", q.question_id),
            });
        }
    }
    let mut answers: HashMap<u64, String> = HashMap::new();
    for (index, a) in annotation_list.into_iter().enumerate() {
        let reason = if !seen.contains(&a.question_id) {
            format!("question_id {} not present in {}", a.question_id, questions.display())
        } else if answers.contains_key(&a.question_id) {
            format!("duplicate annotation for question_id {}", a.question_id)
        } else {
            answers.insert(a.question_id, a.multiple_choice_answer);
            continue;
        };
        return Err(Error::Record {
            path: annotations.to_path_buf(),
            index,
            reason,
        });
    }

    let samples: Vec<RawSample> = questions_list
        .into_iter()
        .filter_map(|q| {
            let answer = answers.remove(&q.question_id)?;
            let category_id = categories.lookup(&answer)?;
            Some(RawSample {
                question_id: q.question_id,
                image_id: q.image_id,
                question: q.question,
                answer,
                category_id,
            })
        })
        .collect();
    let stats = DatasetStats::compute(&samples);
    Ok((samples, stats))
}

/// JSON file naming the inputs of one split; relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub questions: PathBuf,
    pub annotations: PathBuf,
    pub category_map: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub samples: Vec<RawSample>,
    pub stats: DatasetStats,
    pub categories: CategoryMap,
    pub features: Option<FeatureStore>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        m.questions = base.join(&m.questions);
        m.annotations = base.join(&m.annotations);
        m.category_map = base.join(&m.category_map);
        m.features = m.features.map(|f| base.join(f));
        Ok(m)
    }

    /// Ingests the split; features are loaded only when `with_features`.
    pub fn open(&self, with_features: bool) -> Result<Split> {
        let categories = load_category_map(&self.category_map)?;
        let (samples, stats) = ingest(&self.questions, &self.annotations, &categories)?;
        let features = match (&self.features, with_features) {
            (Some(p), true) => Some(FeatureStore::load(p)?),
            _ => None,
        };
        Ok(Split {
            samples,
            stats,
            categories,
            features,
        })
    }
}

pub fn load_split(manifest: &Path, with_features: bool) -> Result<Split> {
    SplitManifest::load(manifest)?.open(with_features)
}
