//! The guided question-generation network: image head, text encoder,
//! fusion, causal decoder, and reconstruction head.

pub mod checkpoint;
mod config;
pub mod conv;
pub mod gradcheck;
pub mod layers;

pub use config::{ImageInput, ModelConfig, Variant, BN_MOMENTUM, NORM_EPS};

use vqg_tensor::init::{normal, Rng};
use vqg_tensor::{BatchStats, BoundParams, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::dataset::{FeatureStore, Sample, CATEGORIES};
use crate::error::{Error, Result};
use crate::text::{Vocabulary, PAD, START};
use conv::ConvStack;
use layers::{sinusoidal, Ctx, DecoderLayer, EncoderLayer, LayerNorm, Linear};

/// Standard deviation for randomly initialized embedding rows.
pub const EMBED_STD: f64 = 0.02;

/// Model-ready tensors for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image_ids: Vec<u64>,
    /// `[B, raw_width]`; absent for text-only models.
    pub features: Option<Tensor>,
    /// Target question ids, `B × question_len`, with end token.
    pub questions: Vec<usize>,
    /// Answer ids, `B × answer_len`.
    pub answers: Vec<usize>,
    /// Vocabulary id of each row's category token.
    pub categories: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Gathers rows `indices` of `samples`. Features are looked up only
    /// when `store` is given.
    pub fn from_samples(
        samples: &[Sample],
        indices: &[usize],
        store: Option<&FeatureStore>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut batch = Batch {
            image_ids: Vec::with_capacity(indices.len()),
            features: None,
            questions: Vec::new(),
            answers: Vec::new(),
            categories: Vec::new(),
        };
        let mut features = Vec::new();
        for &i in indices {
            let s = &samples[i];
            batch.image_ids.push(s.image_id);
            batch.questions.extend_from_slice(&s.question.ids);
            batch.answers.extend_from_slice(&s.answer.ids);
            batch.categories.push(category_token(vocab, s.category_id)?);
            if let Some(store) = store {
                features.extend_from_slice(store.get(s.image_id)?);
            }
        }
        if let Some(store) = store {
            batch.features = Some(Tensor::new(vec![indices.len(), store.width()], features)?);
        }
        Ok(batch)
    }
}

pub fn category_token(vocab: &Vocabulary, category_id: usize) -> Result<usize> {
    let name = CATEGORIES
        .get(category_id)
        .ok_or_else(|| Error::UnknownCategory(format!("#{category_id}")))?;
    vocab
        .get(name)
        .ok_or_else(|| Error::Format(format!("vocabulary lacks the category token `{name}`")))
}

/// `[start, q_0 .. q_{L-2}]` per row.
pub fn shift_right(questions: &[usize], len: usize) -> Vec<usize> {
    questions
        .chunks(len)
        .flat_map(|row| std::iter::once(START).chain(row[..len - 1].iter().copied()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ImageHead {
    pub conv: Option<ConvStack>,
    pub fc: Linear,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct ReconHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Result of encoding raw images.
pub struct ImageEncoding {
    /// Normalized image token `i`, `[B, d]`.
    pub i: Var,
    /// Reconstruction target `f`, `[B, F]`, detached from the graph.
    pub target: Var,
    pub stats: Option<BatchStats>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub loss_q: Var,
    pub loss_i: Option<Var>,
    pub total: Var,
    pub bn_stats: Option<BatchStats>,
}

/// Encoder memory `X` with its key mask.
pub struct Memory {
    pub x: Var,
    pub keep: Vec<bool>,
    pub image: Option<Var>,
    pub target: Option<Var>,
    pub stats: Option<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct VqgModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    embedding: ParamId,
    image: Option<ImageHead>,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<LayerNorm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    output: Linear,
    recon: Option<ReconHead>,
}

impl VqgModel {
    /// Parameters are created (and drawn from `rng`) in a fixed order:
    /// embedding, image head, encoder, decoder, output projection,
    /// reconstruction head.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let embed_kind = if config.freeze_embeddings {
            ParamKind::Frozen
        } else {
            ParamKind::Trainable
        };
        let embedding = store.add("embedding", normal(rng, &[config.vocab_size, d], EMBED_STD), embed_kind);

        let image = config.variant.uses_image().then(|| {
            let conv = matches!(config.image_input, ImageInput::Pixels).then(|| ConvStack::new(&mut store, rng));
            let f = config.image_input.feature_width();
            ImageHead {
                conv,
                // no bias: batch norm subtracts the mean right after
                fc: Linear::new(&mut store, rng, "image.fc", f, d, false),
                bn_gain: store.add("image.bn.gain", Tensor::full(&[d], 1.0), ParamKind::Trainable),
                bn_bias: store.add("image.bn.bias", Tensor::zeros(&[d]), ParamKind::Trainable),
                running_mean: store.add("image.bn.running_mean", Tensor::zeros(&[d]), ParamKind::Buffer),
                running_var: store.add("image.bn.running_var", Tensor::full(&[d], 1.0), ParamKind::Buffer),
            }
        });

        let (encoder, encoder_norm) = if config.variant.uses_text() {
            let layers = (0..config.n_layers)
                .map(|l| EncoderLayer::new(&mut store, rng, &format!("encoder.{l}"), d, config.n_heads, config.d_ff))
                .collect();
            (layers, Some(LayerNorm::new(&mut store, "encoder.norm", d)))
        } else {
            (Vec::new(), None)
        };
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayer::new(&mut store, rng, &format!("decoder.{l}"), d, config.n_heads, config.d_ff))
            .collect();
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let output = Linear::new(&mut store, rng, "output", d, config.vocab_size, true);
        let recon = config.reconstruct_image.then(|| ReconHead {
            hidden: Linear::new(&mut store, rng, "recon.hidden", d, d, true),
            out: Linear::new(&mut store, rng, "recon.out", d, config.image_input.feature_width(), true),
        });

        Ok(Self {
            config,
            params: store,
            embedding,
            image,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            recon,
        })
    }

    /// `(name, shape)` of every stored tensor, in creation order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn image_head(&self) -> Option<&ImageHead> {
        self.image.as_ref()
    }

    pub fn has_image_head(&self) -> bool {
        self.image.is_some()
    }

    pub fn has_text_encoder(&self) -> bool {
        !self.encoder.is_empty()
    }

    /// Replaces the word embedding table, e.g. with pretrained vectors.
    /// Trainability stays as configured by `freeze_embeddings`.
    pub fn set_embedding(&mut self, table: Tensor) -> Result<()> {
        let want = [self.config.vocab_size, self.config.d_model];
        if table.shape() != want {
            return Err(Error::Config(format!(
                "embedding table has shape {:?}, expected {want:?}",
                table.shape()
            )));
        }
        self.params.get_mut(self.embedding).value = table;
        Ok(())
    }

    /// Token embeddings scaled by `sqrt(d)` plus position encodings,
    /// `[B, T, d]`.
    fn embed(&self, cx: &mut Ctx, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let d = self.config.d_model;
        let table = cx.p(self.embedding)?;
        let e = cx.g.embedding(table, ids)?;
        let e = cx.g.reshape(e, &[batch, len, d])?;
        let e = cx.g.scale(e, (d as f64).sqrt())?;
        if !self.config.position_encoding {
            return Ok(e);
        }
        let pe = sinusoidal(len, d);
        let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = cx.g.constant(Tensor::new(vec![batch, len, d], tiled)?)?;
        Ok(cx.g.add(e, pe)?)
    }

    /// `i = BatchNorm(FC(f))`. Train mode normalizes with batch
    /// statistics (needs B ≥ 2); eval mode uses the running estimates.
    pub fn encode_image(&self, cx: &mut Ctx, raw: Var) -> Result<ImageEncoding> {
        let head = self
            .image
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("{} model has no image head", self.config.variant)))?;
        let shape = cx.g.shape(raw).to_vec();
        let expected = self.config.image_input.raw_width();
        if shape.len() != 2 || shape[1] != expected {
            return Err(Error::Format(format!(
                "image input has shape {shape:?}, expected [B, {expected}]"
            )));
        }
        let f = match &head.conv {
            Some(conv) => conv.forward(cx, raw)?,
            None => raw,
        };
        let target = cx.g.detach(f)?;
        let h = head.fc.forward(cx, f)?;
        let gain = cx.p(head.bn_gain)?;
        let bias = cx.p(head.bn_bias)?;
        let (i, stats) = if cx.train {
            let (y, stats) = cx.g.batch_norm(h, gain, bias, NORM_EPS)?;
            (y, Some(stats))
        } else {
            let mean = cx.store.value(head.running_mean).data();
            let var = cx.store.value(head.running_var).data();
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let d = inv.len();
            let inv = cx.g.constant(Tensor::new(vec![d], inv)?)?;
            let shift = cx.g.constant(Tensor::new(vec![d], shift)?)?;
            let y = cx.g.mul_row(h, inv)?;
            let y = cx.g.add_row(y, shift)?;
            let y = cx.g.mul_row(y, gain)?;
            (cx.g.add_row(y, bias)?, None)
        };
        Ok(ImageEncoding { i, target, stats })
    }

    /// Guiding text ids and keep-mask, `B × T`: `[category]` for
    /// image-cat and text-only, `[answer…; category]` for image-ans-cat.
    pub fn build_context(&self, answers: &[usize], categories: &[usize]) -> Result<(Vec<usize>, Vec<bool>)> {
        let a = self.config.answer_len;
        let ids: Vec<usize> = match self.config.variant {
            Variant::ImageOnly => {
                return Err(Error::Unsupported("image-only model takes no guiding text".into()));
            }
            Variant::ImageCat | Variant::TextOnly => categories.to_vec(),
            Variant::ImageAnsCat => {
                if answers.len() != categories.len() * a {
                    return Err(Error::Format(format!(
                        "expected {} answer ids for {} rows, got {}",
                        categories.len() * a,
                        categories.len(),
                        answers.len()
                    )));
                }
                answers
                    .chunks(a)
                    .zip(categories)
                    .flat_map(|(ans, &c)| ans.iter().copied().chain(std::iter::once(c)))
                    .collect()
            }
        };
        let keep = ids.iter().map(|&id| id != PAD).collect();
        Ok((ids, keep))
    }

    /// `S = encoder(context, mask)`, `[B, T, d]`.
    pub fn encode_text(&self, cx: &mut Ctx, ids: &[usize], keep: &[bool], batch: usize) -> Result<Var> {
        let norm = self
            .encoder_norm
            .as_ref()
            .ok_or_else(|| Error::Unsupported("image-only model has no text encoder".into()))?;
        let len = ids.len() / batch;
        let mut x = self.embed(cx, ids, batch, len)?;
        for layer in &self.encoder {
            x = layer.forward(cx, x, keep, self.config.dropout)?;
        }
        norm.forward(cx, x)
    }

    /// `X = [S; i]`: the image token is appended as one extra position
    /// whose mask entry is true. Either part may be absent.
    pub fn fuse(&self, cx: &mut Ctx, text: Option<(Var, &[bool])>, image: Option<Var>) -> Result<(Var, Vec<bool>)> {
        let d = self.config.d_model;
        let image = match image {
            Some(i) => {
                let b = cx.g.shape(i)[0];
                if cx.g.shape(i) != [b, d] {
                    return Err(Error::Format(format!("image token has shape {:?}, expected [B, {d}]", cx.g.shape(i))));
                }
                Some((cx.g.reshape(i, &[b, 1, d])?, b))
            }
            None => None,
        };
        match (text, image) {
            (Some((s, keep)), Some((i, b))) => {
                let t = cx.g.shape(s)[1];
                if cx.g.shape(s)[2] != d {
                    return Err(Error::Format(format!("text states have width {}, expected {d}", cx.g.shape(s)[2])));
                }
                let x = cx.g.concat(&[s, i], 1)?;
                let mut fused = Vec::with_capacity(b * (t + 1));
                for row in keep.chunks(t) {
                    fused.extend_from_slice(row);
                    fused.push(true);
                }
                Ok((x, fused))
            }
            (Some((s, keep)), None) => Ok((s, keep.to_vec())),
            (None, Some((i, b))) => Ok((i, vec![true; b])),
            (None, None) => Err(Error::Unsupported("model has neither text nor image input".into())),
        }
    }

    /// Builds the encoder memory for a batch.
    pub fn memory(&self, cx: &mut Ctx, batch: &Batch) -> Result<Memory> {
        let b = batch.len();
        let (image, target, stats) = if self.config.variant.uses_image() {
            let features = batch
                .features
                .as_ref()
                .ok_or_else(|| Error::Format("batch lacks image features".into()))?;
            let raw = cx.g.constant(features.clone())?;
            let enc = self.encode_image(cx, raw)?;
            (Some(enc.i), Some(enc.target), enc.stats)
        } else {
            (None, None, None)
        };
        let text = if self.config.variant.uses_text() {
            let (ids, keep) = self.build_context(&batch.answers, &batch.categories)?;
            let s = self.encode_text(cx, &ids, &keep, b)?;
            Some((s, keep))
        } else {
            None
        };
        let (x, keep) = self.fuse(cx, text.as_ref().map(|(s, k)| (*s, k.as_slice())), image)?;
        Ok(Memory {
            x,
            keep,
            image,
            target,
            stats,
        })
    }

    /// Logits `[B, L, V]` for decoder input ids `B × L`. The decoder
    /// sequence is `[i; embed(input)]`; the image position is dropped
    /// from the output.
    pub fn decode(&self, cx: &mut Ctx, memory: Var, memory_keep: &[bool], input: &[usize], image: Option<Var>) -> Result<Var> {
        let d = self.config.d_model;
        let b = cx.g.shape(memory)[0];
        let len = input.len() / b;
        let tokens = self.embed(cx, input, b, len)?;
        let (mut y, offset) = match image {
            Some(i) => {
                let i = cx.g.reshape(i, &[b, 1, d])?;
                (cx.g.concat(&[i, tokens], 1)?, 1)
            }
            None => (tokens, 0),
        };
        let mut keep = Vec::with_capacity(b * (len + offset));
        for row in input.chunks(len) {
            keep.extend(std::iter::repeat(true).take(offset));
            keep.extend(row.iter().map(|&id| id != PAD));
        }
        for layer in &self.decoder {
            y = layer.forward(cx, y, &keep, memory, memory_keep, self.config.dropout)?;
        }
        let y = if offset > 0 { cx.g.narrow(y, 1, offset, len)? } else { y };
        let y = self.decoder_norm.forward(cx, y)?;
        self.output.forward(cx, y)
    }

    /// Masked mean over the positions of `X`, then the two-layer MLP,
    /// giving `i_r` of width `F`.
    pub fn reconstruct(&self, cx: &mut Ctx, memory: Var, keep: &[bool]) -> Result<Var> {
        let head = self
            .recon
            .as_ref()
            .ok_or_else(|| Error::Unsupported("reconstruction is disabled for this model".into()))?;
        let shape = cx.g.shape(memory).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut weights = Vec::with_capacity(b * t);
        for row in keep.chunks(t) {
            let n = row.iter().filter(|&&k| k).count().max(1) as f64;
            weights.extend(row.iter().map(|&k| if k { 1.0 / n } else { 0.0 }));
        }
        let w = cx.g.constant(Tensor::new(vec![b, 1, t], weights)?)?;
        let pooled = cx.g.matmul(w, memory)?;
        let pooled = cx.g.reshape(pooled, &[b, d])?;
        let h = head.hidden.forward(cx, pooled)?;
        let h = cx.g.relu(h)?;
        head.out.forward(cx, h)
    }

    /// Teacher-forced forward pass with both losses.
    pub fn forward(&self, cx: &mut Ctx, batch: &Batch) -> Result<ForwardOutput> {
        let mem = self.memory(cx, batch)?;
        let input = shift_right(&batch.questions, self.config.question_len);
        let logits = self.decode(cx, mem.x, &mem.keep, &input, mem.image)?;
        let loss_q = cx.g.cross_entropy(logits, &batch.questions, PAD)?;
        let (loss_i, total) = if self.config.reconstruct_image {
            let recon = self.reconstruct(cx, mem.x, &mem.keep)?;
            let target = mem.target.expect("reconstruction requires an image head");
            let loss_i = cx.g.mse(recon, target)?;
            let weighted = cx.g.scale(loss_i, self.config.lambda_recon)?;
            (Some(loss_i), cx.g.add(loss_q, weighted)?)
        } else {
            (None, loss_q)
        };
        Ok(ForwardOutput {
            logits,
            loss_q,
            loss_i,
            total,
            bn_stats: mem.stats,
        })
    }

    /// Exponential moving update of batch-norm running statistics; the
    /// batch variance is bias-corrected by `B / (B - 1)`.
    pub fn update_running_stats(&mut self, stats: &BatchStats, batch: usize) {
        let Some(head) = &self.image else { return };
        let correction = batch as f64 / (batch as f64 - 1.0);
        let m = BN_MOMENTUM;
        let rm = &mut self.params.get_mut(head.running_mean).value;
        for (r, s) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        let rv = &mut self.params.get_mut(head.running_var).value;
        for (r, s) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s * correction;
        }
    }

    /// Eval-mode encoder memory as plain tensors, for decoding.
    pub fn eval_memory(&self, batch: &Batch) -> Result<EvalMemory> {
        let mut g = Graph::new();
        let mut bound = BoundParams::new(&self.params);
        let mut cx = Ctx {
            g: &mut g,
            bound: &mut bound,
            store: &self.params,
            train: false,
            rng: None,
        };
        let mem = self.memory(&mut cx, batch)?;
        Ok(EvalMemory {
            x: g.value(mem.x).clone(),
            keep: mem.keep,
            image: mem.image.map(|i| g.value(i).clone()),
        })
    }

    /// Eval-mode logits `[B, L, V]` for decoder inputs over a precomputed
    /// memory.
    pub fn eval_logits(&self, memory: &EvalMemory, input: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut bound = BoundParams::new(&self.params);
        let mut cx = Ctx {
            g: &mut g,
            bound: &mut bound,
            store: &self.params,
            train: false,
            rng: None,
        };
        let x = cx.g.constant(memory.x.clone())?;
        let image = match &memory.image {
            Some(i) => Some(cx.g.constant(i.clone())?),
            None => None,
        };
        let logits = self.decode(&mut cx, x, &memory.keep, input, image)?;
        Ok(g.value(logits).clone())
    }
}

/// Encoder memory detached from any graph.
#[derive(Clone, Debug)]
pub struct EvalMemory {
    pub x: Tensor,
    pub keep: Vec<bool>,
    pub image: Option<Tensor>,
}

impl EvalMemory {
    pub fn batch(&self) -> usize {
        self.x.shape()[0]
    }

    /// Rows `rows` of the memory, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let per: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(rows.len() * per);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Ok(Tensor::new(shape, data)?)
        };
        let t = self.x.shape()[1];
        Ok(Self {
            x: pick(&self.x)?,
            keep: rows.iter().flat_map(|&r| self.keep[r * t..(r + 1) * t].iter().copied()).collect(),
            image: self.image.as_ref().map(pick).transpose()?,
        })
    }
}
