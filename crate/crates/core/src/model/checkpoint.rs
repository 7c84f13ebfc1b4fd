//! Binary checkpoint: `VQGM` magic and version, a JSON header (model
//! configuration, metadata, step, batch cursor, RNG state), the
//! vocabulary, named tensors, and optional optimizer moments. All
//! numbers are little-endian. No wall-clock data is stored, so equal
//! training states serialize to equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vqg_tensor::init::{seeded, Rng};
use vqg_tensor::{Adam, ParamKind, ParamStore, Tensor};

use super::{ModelConfig, VqgModel};
use crate::dataset::Cursor;
use crate::error::{write_file, Error, Result};
use crate::text::vocab::hex_digest;
use crate::text::Vocabulary;

const MAGIC: &[u8; 4] = b"VQGM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    step: u64,
    cursor: Cursor,
    rng: Option<Rng>,
    learning_rate: Option<f64>,
    optimizer_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VqgModel,
    pub vocab: Vocabulary,
    /// Free-form provenance (run configuration, hashes).
    pub meta: serde_json::Value,
    pub optimizer: Option<Adam>,
    pub rng: Option<Rng>,
    pub step: u64,
    pub cursor: Cursor,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Trainable => 0,
        ParamKind::Frozen => 1,
        ParamKind::Buffer => 2,
    }
}

/// SHA-256 over parameter names, shapes, and values.
pub fn params_hash(store: &ParamStore) -> String {
    let mut w = Writer(Vec::new());
    for e in store.entries() {
        w.bytes(e.name.as_bytes());
        for &d in e.value.shape() {
            w.u64(d as u64);
        }
        w.floats(e.value.data());
    }
    hex_digest(&w.0)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            meta: self.meta.clone(),
            step: self.step,
            cursor: self.cursor,
            rng: self.rng.clone(),
            learning_rate: self.optimizer.as_ref().map(|o| o.learning_rate),
            optimizer_steps: self.optimizer.as_ref().map(Adam::step_count),
        };
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(serde_json::to_string(&header).expect("header serializes").as_bytes());
        w.bytes(self.vocab.to_text().as_bytes());
        let entries = self.model.params.entries();
        w.u32(entries.len() as u32);
        for e in entries {
            w.bytes(e.name.as_bytes());
            w.u8(kind_code(e.kind));
            w.u32(e.value.ndim() as u32);
            for &d in e.value.shape() {
                w.u64(d as u64);
            }
            w.floats(e.value.data());
        }
        match &self.optimizer {
            Some(opt) => {
                w.u8(1);
                for m in opt.first_moments().iter().chain(opt.second_moments()) {
                    w.floats(m);
                }
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let ctx = |e: Error| Error::Format(format!("{}: {e}", path.display()));
        Self::parse(bytes, path).map_err(|e| match e {
            Error::Format(_) | Error::Config(_) | Error::Tensor(_) => ctx(e),
            other => other,
        })
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header: Header = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let vocab_text = std::str::from_utf8(r.bytes()?).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        let vocab = Vocabulary::from_text(vocab_text, path)?;
        if vocab.len() != header.config.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                header.config.vocab_size
            )));
        }

        let mut model = VqgModel::new(header.config.clone(), &mut seeded(0))?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, configuration defines {}",
                model.params.len()
            )));
        }
        for entry in model.params.entries_mut() {
            let name = std::str::from_utf8(r.bytes()?).map_err(|e| Error::Format(e.to_string()))?;
            if name != entry.name {
                return Err(Error::Format(format!("expected tensor `{}`, found `{name}`", entry.name)));
            }
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Frozen,
                2 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("tensor `{name}`: bad kind {k}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != entry.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    entry.value.shape()
                )));
            }
            let data = r.floats(entry.value.numel())?;
            entry.value = Tensor::new(shape, data)?;
            entry.kind = kind;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let sizes: Vec<usize> = model.params.entries().iter().map(|e| e.value.numel()).collect();
                let first = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>>>()?;
                let second = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>>>()?;
                let lr = header
                    .learning_rate
                    .ok_or_else(|| Error::Format("optimizer state without learning rate".into()))?;
                let steps = header.optimizer_steps.unwrap_or(0);
                Some(Adam::from_state(&model.params, lr, steps, first, second)?)
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            vocab,
            meta: header.meta,
            optimizer,
            rng: header.rng,
            step: header.step,
            cursor: header.cursor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageInput, Variant};
    use rand::Rng as _;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 6,
            question_len: 4,
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

    #[test]
    fn round_trip_is_byte_identical() {
        let vocab = Vocabulary::from_tokens(&["a", "b", "c", "d", "e"]);
        let model = VqgModel::new(tiny(Variant::ImageAnsCat), &mut seeded(5)).unwrap();
        let mut rng = seeded(11);
        let _: u64 = rng.gen();
        let ck = Checkpoint {
            optimizer: Some(Adam::new(&model.params, 0.003)),
            model,
            vocab,
            meta: serde_json::json!({"run": "x"}),
            rng: Some(rng),
            step: 17,
            cursor: Cursor { epoch: 2, position: 8 },
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(params_hash(&back.model.params), params_hash(&ck.model.params));
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.cursor, ck.cursor);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let vocab = Vocabulary::from_tokens(&["a", "b", "c", "d", "e"]);
        let model = VqgModel::new(tiny(Variant::ImageCat), &mut seeded(5)).unwrap();
        let ck = Checkpoint {
            model,
            vocab,
            meta: serde_json::Value::Null,
            optimizer: None,
            rng: None,
            step: 0,
            cursor: Cursor::default(),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        assert!(Checkpoint::from_bytes(b"VQGF\x01\0\0\0", Path::new("m")).is_err());
    }
}
