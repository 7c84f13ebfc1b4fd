use serde::{Deserialize, Serialize};

use crate::dataset::synthetic::IMAGE_WIDTH;
use crate::error::{Error, Result};

/// Which inputs the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Image alone; no text encoder.
    ImageOnly,
    /// Image plus answer category.
    ImageCat,
    /// Image plus answer and category.
    ImageAnsCat,
    /// Answer category alone; no image head.
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ImageOnly, Variant::ImageCat, Variant::ImageAnsCat, Variant::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ImageOnly => "image-only",
            Variant::ImageCat => "image-cat",
            Variant::ImageAnsCat => "image-ans-cat",
            Variant::TextOnly => "text-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant `{s}` (valid: image-only, image-cat, image-ans-cat, text-only)"
            ))
        })
    }

    pub fn uses_image(self) -> bool {
        self != Variant::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != Variant::ImageOnly
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Source of the raw image vector `f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ImageInput {
    /// Precomputed feature vectors of the given width.
    Features { width: usize },
    /// Raw 3×32×32 images run through the built-in conv stack.
    Pixels,
}

impl ImageInput {
    /// Width of the stored per-image vector.
    pub fn raw_width(self) -> usize {
        match self {
            ImageInput::Features { width } => width,
            ImageInput::Pixels => IMAGE_WIDTH,
        }
    }

    /// Width `F` of the feature vector fed to the image head and
    /// reconstructed by the reconstruction head.
    pub fn feature_width(self) -> usize {
        match self {
            ImageInput::Features { width } => width,
            ImageInput::Pixels => super::conv::CONV_OUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub variant: Variant,
    pub reconstruct_image: bool,
    pub lambda_recon: f64,
    pub image_input: ImageInput,
    #[serde(default = "default_true")]
    pub position_encoding: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub freeze_embeddings: bool,
}

fn default_true() -> bool {
    true
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Full-size configuration: 4 layers, 4 heads, width 300.
    pub fn full_size(vocab_size: usize, image_input: ImageInput) -> Self {
        Self {
            vocab_size,
            n_layers: 4,
            n_heads: 4,
            d_model: 300,
            d_ff: 300,
            question_len: 20,
            answer_len: 5,
            variant: Variant::ImageCat,
            reconstruct_image: true,
            lambda_recon: 1.0,
            image_input,
            position_encoding: true,
            dropout: 0.0,
            freeze_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("n_layers and d_ff must be positive".into());
        }
        if self.question_len == 0 || self.answer_len == 0 {
            return fail("question_len and answer_len must be positive".into());
        }
        if self.vocab_size <= crate::text::SPECIAL_TOKENS.len() {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.variant == Variant::TextOnly && self.reconstruct_image {
            return fail("text-only variant has no image to reconstruct; set reconstruct_image = false".into());
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return fail(format!("lambda_recon must be finite and non-negative, got {}", self.lambda_recon));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.image_input.raw_width() == 0 {
            return fail("image feature width must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Length of the guiding text sequence fed to the encoder.
    pub fn context_len(&self) -> usize {
        match self.variant {
            Variant::ImageOnly => 0,
            Variant::ImageCat | Variant::TextOnly => 1,
            Variant::ImageAnsCat => self.answer_len + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = ModelConfig::full_size(100, ImageInput::Features { width: 512 });
        assert!(c.validate().is_ok());
        c.n_heads = 7;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.variant = Variant::TextOnly;
        assert!(c.validate().is_err());
        c.reconstruct_image = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        let err = Variant::parse("foo").unwrap_err().to_string();
        assert!(err.contains("image-ans-cat"));
    }
}
