use std::path::Path;

use serde_json::{json, Map, Value};

use super::{train, RunOptions, StepRecord, TrainConfig, TrainData};
use crate::dataset::{FeatureStore, RawSample};
use crate::inference::DecodeMode;
use crate::metrics::{evaluate, EvaluatedReport};
use crate::model::{ModelConfig, Variant};

/// The three ablations followed by the two full variants.
pub const ABLATION_ROWS: [&str; 5] = ["image-only", "text-only", "without-image-recon", "image-cat", "image-ans-cat"];

/// Model configuration of every row derived from `base`.
/// `without-image-recon` is image-cat with the reconstruction head off.
pub fn ablation_rows(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let with = |variant: Variant, reconstruct: bool| ModelConfig {
        variant,
        reconstruct_image: reconstruct,
        ..base.clone()
    };
    vec![
        (ABLATION_ROWS[0], with(Variant::ImageOnly, true)),
        (ABLATION_ROWS[1], with(Variant::TextOnly, false)),
        (ABLATION_ROWS[2], with(Variant::ImageCat, false)),
        (ABLATION_ROWS[3], with(Variant::ImageCat, true)),
        (ABLATION_ROWS[4], with(Variant::ImageAnsCat, true)),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: ModelConfig,
    /// Parameter names of the trained model.
    pub parameters: Vec<String>,
    pub records: Vec<StepRecord>,
    pub outcome: std::result::Result<EvaluatedReport, String>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// JSON object keyed by row name holding the six metric fields, or an
    /// `error` field for rows that failed.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for row in &self.rows {
            let v = match &row.outcome {
                Ok(r) => json!({
                    "bleu1": r.scores.bleu1,
                    "bleu2": r.scores.bleu2,
                    "bleu3": r.scores.bleu3,
                    "cider": r.scores.cider,
                    "meteor": r.scores.meteor,
                    "rouge_l": r.scores.rouge_l,
                }),
                Err(e) => json!({ "error": e }),
            };
            map.insert(row.name.to_string(), v);
        }
        Value::Object(map)
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub struct AblationInputs<'a> {
    pub train: &'a TrainData,
    pub eval_samples: &'a [RawSample],
    pub eval_features: Option<&'a FeatureStore>,
    pub decode: DecodeMode,
    /// Per-row artifacts go to `out_dir/<row name>` when set.
    pub out_dir: Option<&'a Path>,
    pub config_hash: &'a str,
}

/// Trains and evaluates every row; a failing row records its error and
/// the remaining rows still run.
pub fn run_ablation_matrix(base: &ModelConfig, config: &TrainConfig, inputs: &AblationInputs) -> AblationReport {
    let mut rows = Vec::new();
    for (name, model_config) in ablation_rows(base) {
        let opts = RunOptions {
            out_dir: inputs.out_dir.map(|d| d.join(name)),
            validation: None,
            meta: json!({ "row": name, "config_hash": inputs.config_hash }),
        };
        let mut row = AblationRow {
            name,
            config: model_config.clone(),
            parameters: Vec::new(),
            records: Vec::new(),
            outcome: Err(String::new()),
        };
        row.outcome = match train(model_config, config.clone(), inputs.train, &opts) {
            Ok((trainer, outcome)) => {
                row.parameters = trainer.model.params.entries().iter().map(|e| e.name.clone()).collect();
                row.records = outcome.records;
                evaluate(
                    &trainer.model,
                    &inputs.train.vocab,
                    inputs.eval_samples,
                    inputs.eval_features,
                    inputs.decode,
                    inputs.config_hash,
                )
                .map_err(|e| e.to_string())
            }
            Err(e) => Err(e.to_string()),
        };
        rows.push(row);
    }
    AblationReport { rows }
}
