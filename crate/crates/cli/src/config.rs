//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vqg_core::dataset::synthetic::IMAGE_WIDTH;
use vqg_core::inference::DecodeMode;
use vqg_core::model::{ImageInput, ModelConfig, Variant};
use vqg_core::training::TrainConfig;

use crate::CliError;

/// Model settings except the vocabulary size, which comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub question_len: usize,
    pub answer_len: usize,
    /// Defaults to on for variants that see the image.
    pub reconstruct_image: Option<bool>,
    /// Inferred from the feature store when absent: 3072-wide stores hold
    /// raw synthetic images, anything else precomputed features.
    pub image_input: Option<ImageInput>,
    pub position_encoding: bool,
    pub dropout: f64,
    pub freeze_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ModelConfig::full_size(0, ImageInput::Pixels);
        Self {
            variant: p.variant,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            d_model: p.d_model,
            d_ff: p.d_ff,
            question_len: p.question_len,
            answer_len: p.answer_len,
            reconstruct_image: None,
            image_input: None,
            position_encoding: p.position_encoding,
            dropout: p.dropout,
            freeze_embeddings: p.freeze_embeddings,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, feature_width: Option<usize>, lambda_recon: f64) -> ModelConfig {
        let image_input = self.image_input.unwrap_or(match feature_width {
            Some(w) if w != IMAGE_WIDTH => ImageInput::Features { width: w },
            _ => ImageInput::Pixels,
        });
        ModelConfig {
            vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            question_len: self.question_len,
            answer_len: self.answer_len,
            variant: self.variant,
            reconstruct_image: self.reconstruct_image.unwrap_or(self.variant.uses_image()),
            lambda_recon,
            image_input,
            position_encoding: self.position_encoding,
            dropout: self.dropout,
            freeze_embeddings: self.freeze_embeddings,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Split manifest used for training.
    pub train: Option<PathBuf>,
    /// Split manifest used for evaluation.
    pub eval: Option<PathBuf>,
    /// Vocabulary file; built from the training split when absent.
    pub vocab: Option<PathBuf>,
    /// Text-format word vectors for initializing the embedding table.
    pub vectors: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Beam width; greedy when absent.
    pub beam: Option<usize>,
}

impl DecodeSection {
    pub fn mode(&self) -> DecodeMode {
        self.beam.map_or(DecodeMode::Greedy, DecodeMode::Beam)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub paths: Paths,
    pub decode: DecodeSection,
}

pub const DEFAULT_OUT_DIR: &str = "runs/default";

impl RunConfig {
    /// Reads a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [&mut p.train, &mut p.eval, &mut p.vocab, &mut p.vectors, &mut p.out_dir] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| DEFAULT_OUT_DIR.into())
    }

    /// SHA-256 over the canonical JSON rendering, first 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Fails on the first configured input path that does not exist.
    pub fn check_inputs(&self) -> Result<(), CliError> {
        let p = &self.paths;
        for (key, path) in [
            ("paths.train", &p.train),
            ("paths.eval", &p.eval),
            ("paths.vocab", &p.vocab),
            ("paths.vectors", &p.vectors),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(CliError::config(format!("{key}: no such file {}", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn require_train(&self) -> Result<&Path, CliError> {
        self.paths
            .train
            .as_deref()
            .ok_or_else(|| CliError::config("paths.train is not set (use --train or the config file)"))
    }

    pub fn require_eval(&self) -> Result<&Path, CliError> {
        self.paths
            .eval
            .as_deref()
            .ok_or_else(|| CliError::config("paths.eval is not set (use --eval or the config file)"))
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}
