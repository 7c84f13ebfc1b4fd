//! End-to-end finite-difference check of the full loss with respect to
//! every trainable parameter.

use serde::Serialize;
use vqg_tensor::init::{seeded, uniform};
use vqg_tensor::{grad_check_params, TensorError};

use super::layers::Ctx;
use super::{Batch, ImageInput, ModelConfig, Variant, VqgModel};
use crate::error::{Error, Result};
use crate::text::{END, PAD};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelCheck {
    pub variant: Variant,
    pub batch: usize,
    /// Batch-statistic normalization (train) or running statistics (eval).
    pub train: bool,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// One layer, one head, d=8, eleven-word vocabulary, three-wide features.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        d_ff: 8,
        question_len: 6,
        answer_len: 2,
        variant,
        reconstruct_image: variant != Variant::TextOnly,
        lambda_recon: 1.0,
        image_input: ImageInput::Features { width: 3 },
        position_encoding: true,
        dropout: 0.0,
        freeze_embeddings: false,
    }
}

/// Fixed token rows for [`tiny_config`], tiled to `rows`, with one padded
/// question and one padded answer.
pub fn tiny_batch(rows: usize, seed: u64) -> Batch {
    let questions = [4, 5, 6, END, PAD, PAD, 7, 8, 4, 5, 6, END];
    let answers = [7, PAD, 8, 4];
    let categories = [9, 10];
    let tile = |v: &[usize], width: usize| v.iter().cycle().take(width * rows).copied().collect();
    Batch {
        image_ids: (1..=rows as u64).collect(),
        features: Some(uniform(&mut seeded(seed), &[rows, 3], -1.0, 1.0)),
        questions: tile(&questions, 6),
        answers: tile(&answers, 2),
        categories: tile(&categories, 1),
    }
}

pub fn check_model(model: &VqgModel, batch: &Batch, train: bool, h: f64) -> Result<ModelCheck> {
    let report = grad_check_params(
        &model.params,
        |g, bound, store| {
            let mut cx = Ctx {
                g,
                bound,
                store,
                train,
                rng: None,
            };
            match model.forward(&mut cx, batch) {
                Ok(out) => Ok(out.total),
                Err(Error::Tensor(e)) => Err(e),
                Err(e) => Err(TensorError::InvalidArgument {
                    op: "model",
                    reason: e.to_string(),
                }),
            }
        },
        h,
    )?;
    Ok(ModelCheck {
        variant: model.config.variant,
        batch: batch.len(),
        train,
        max_rel_err: report.max_rel_err,
        worst_param: model.params.entries()[report.worst.0].name.clone(),
        checked: report.checked,
    })
}

/// Every variant at B=2 with running statistics, then at B=4 with batch
/// statistics. Two-row batch statistics leave image-path gradients of
/// order eps, below what central differences resolve, hence the larger
/// batch for the train-mode pass.
pub fn tiny_suite(h: f64) -> Result<Vec<ModelCheck>> {
    let mut out = Vec::new();
    for (rows, train) in [(2, false), (4, true)] {
        for variant in Variant::ALL {
            let model = VqgModel::new(tiny_config(variant), &mut seeded(3))?;
            out.push(check_model(&model, &tiny_batch(rows, 4), train, h)?);
        }
    }
    Ok(out)
}
