//! Teacher-forced optimization of `L = L_q + λ·L_i`, with loss logging,
//! periodic checkpoints, bit-exact resume, and the ablation driver.

mod ablation;

pub use ablation::{ablation_rows, run_ablation_matrix, AblationInputs, AblationReport, AblationRow, ABLATION_ROWS};

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vqg_tensor::init::{seeded, Rng};
use vqg_tensor::{Adam, BoundParams, Graph};

use crate::dataset::{encode_sample, Batcher, FeatureStore, RawSample, Sample};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::layers::Ctx;
use crate::model::{Batch, VqgModel};
use crate::text::{Vocabulary, PAD};

/// Stream offset separating the dropout generator from the model
/// initialization generator drawn from the same seed.
const DROPOUT_STREAM: u64 = 0xD50F_0A7E_5EED_0001;

/// Attaches the step and batch to a non-finite value raised inside the graph.
fn non_finite(e: Error, step: u64, batch: &Batch) -> Error {
    match e {
        Error::Tensor(vqg_tensor::TensorError::NonFinite { op, index }) => Error::NonFiniteLoss {
            step,
            image_ids: batch.image_ids.clone(),
            detail: format!("non-finite value in `{op}` at element {index}"),
        },
        other => other,
    }
}

pub const LOSS_CSV_HEADER: &str = "step,L_q,L_i,total,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer updates.
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_recon: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Held-out cross-entropy cadence; 0 disables it.
    pub eval_every: u64,
    /// Global gradient-norm ceiling; off when absent.
    pub clip_grad_norm: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 13_000,
            batch_size: 64,
            learning_rate: 0.003,
            lambda_recon: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 0,
            clip_grad_norm: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &VqgModel) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return fail(format!("lambda_recon must be finite and non-negative, got {}", self.lambda_recon));
        }
        let min = if model.has_image_head() { 2 } else { 1 };
        if self.batch_size < min {
            return fail(format!(
                "batch_size must be at least {min} for the {} variant (batch norm trains on batch statistics)",
                model.config.variant
            ));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Encoded samples plus whatever the model needs alongside them.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub samples: Vec<Sample>,
    pub features: Option<FeatureStore>,
    pub vocab: Vocabulary,
}

impl TrainData {
    pub fn encode(
        raw: &[RawSample],
        features: Option<FeatureStore>,
        vocab: Vocabulary,
        question_len: usize,
        answer_len: usize,
    ) -> Self {
        let samples = raw
            .iter()
            .map(|r| encode_sample(r, &vocab, question_len, answer_len))
            .collect();
        Self {
            samples,
            features,
            vocab,
        }
    }

    pub fn batch(&self, model: &VqgModel, indices: &[usize]) -> Result<Batch> {
        let store = if model.config.variant.uses_image() {
            Some(
                self.features
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("the {} variant needs image features", model.config.variant)))?,
            )
        } else {
            None
        };
        Batch::from_samples(&self.samples, indices, store, &self.vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based index of the optimizer update.
    pub step: u64,
    pub loss_q: f64,
    pub loss_i: Option<f64>,
    pub total: f64,
    /// Wall time since the trainer was created.
    pub seconds: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let li = self.loss_i.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{:.3}", self.step, self.loss_q, li, self.total, self.seconds)
    }

    /// Equality ignoring wall time.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.step == other.step
            && self.loss_q.to_bits() == other.loss_q.to_bits()
            && self.loss_i.map(f64::to_bits) == other.loss_i.map(f64::to_bits)
            && self.total.to_bits() == other.total.to_bits()
    }
}

pub struct Trainer {
    pub model: VqgModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    rng: Rng,
    batcher: Batcher,
    step: u64,
    clock: Instant,
}

impl Trainer {
    /// The training configuration's `lambda_recon` replaces the model's.
    pub fn new(mut model: VqgModel, config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate(&model)?;
        model.config.lambda_recon = config.lambda_recon;
        let optimizer = Adam::new(&model.params, config.learning_rate);
        let batcher = Self::batcher(&model, &config, data)?;
        Ok(Self {
            model,
            optimizer,
            rng: seeded(config.seed ^ DROPOUT_STREAM),
            config,
            batcher,
            step: 0,
            clock: Instant::now(),
        })
    }

    /// Continues from a checkpoint that carries optimizer and RNG state.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, data: &TrainData) -> Result<Self> {
        let Checkpoint {
            mut model,
            optimizer,
            rng,
            step,
            cursor,
            ..
        } = checkpoint;
        config.validate(&model)?;
        model.config.lambda_recon = config.lambda_recon;
        let mut optimizer = optimizer.ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        optimizer.learning_rate = config.learning_rate;
        let rng = rng.ok_or_else(|| Error::Format("checkpoint has no RNG state".into()))?;
        let mut batcher = Self::batcher(&model, &config, data)?;
        batcher.seek(cursor);
        Ok(Self {
            model,
            optimizer,
            config,
            rng,
            batcher,
            step,
            clock: Instant::now(),
        })
    }

    fn batcher(model: &VqgModel, config: &TrainConfig, data: &TrainData) -> Result<Batcher> {
        if data.samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let min_batch = if model.has_image_head() { 2 } else { 1 };
        if data.samples.len() < min_batch {
            return Err(Error::Config("batch norm needs at least two training samples".into()));
        }
        Ok(Batcher::new(
            data.samples.len(),
            config.batch_size,
            config.seed,
            config.shuffle,
            min_batch,
        ))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update on the next scheduled batch.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let indices = self.batcher.next_batch();
        let batch = data.batch(&self.model, &indices)?;
        self.step_on(&batch)
    }

    /// Forward, backward, optional clipping, Adam update, gradient reset,
    /// and running-statistics update on `batch`.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step + 1;
        let mut g = Graph::new();
        let mut bound = BoundParams::new(&self.model.params);
        let out = {
            let mut cx = Ctx {
                g: &mut g,
                bound: &mut bound,
                store: &self.model.params,
                train: true,
                rng: Some(&mut self.rng),
            };
            self.model.forward(&mut cx, batch).map_err(|e| non_finite(e, step, batch))?
        };
        let loss_q = g.value(out.loss_q).item();
        let loss_i = out.loss_i.map(|v| g.value(v).item());
        let total = g.value(out.total).item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                image_ids: batch.image_ids.clone(),
                detail: format!("L_q = {loss_q}, L_i = {loss_i:?}"),
            });
        }
        g.backward(out.total).map_err(|e| non_finite(e.into(), step, batch))?;
        self.model.params.zero_grad();
        self.model.params.accumulate(&g, &bound);
        if let Some(max) = self.config.clip_grad_norm {
            self.model.params.clip_grad_norm(max)?;
        }
        self.optimizer.step(&mut self.model.params)?;
        self.model.params.zero_grad();
        if let Some(stats) = &out.bn_stats {
            self.model.update_running_stats(stats, batch.len());
        }
        self.step = step;
        Ok(StepRecord {
            step,
            loss_q,
            loss_i,
            total,
            seconds: self.clock.elapsed().as_secs_f64(),
        })
    }

    /// Full training state at the current step.
    pub fn checkpoint(&self, vocab: &Vocabulary, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: vocab.clone(),
            meta,
            optimizer: Some(self.optimizer.clone()),
            rng: Some(self.rng.clone()),
            step: self.step,
            cursor: self.batcher.cursor(),
        }
    }

    /// Trains until `config.steps` updates have been made in total.
    pub fn run(&mut self, data: &TrainData, opts: &RunOptions) -> Result<TrainOutcome> {
        let mut outcome = TrainOutcome::default();
        let mut log = match &opts.out_dir {
            Some(dir) => Some(LossLog::open(dir, self.step)?),
            None => None,
        };
        while self.step < self.config.steps {
            let record = self.train_step(data)?;
            if let Some(log) = &mut log {
                log.write(&record)?;
            }
            outcome.records.push(record);
            if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 {
                if let Some(val) = opts.validation {
                    let ce = validation_loss(&self.model, val, self.config.batch_size)?;
                    if let Some(log) = &mut log {
                        log.write_validation(self.step, ce)?;
                    }
                    outcome.validation.push((self.step, ce));
                }
            }
            let periodic = self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0;
            if let (Some(dir), true) = (&opts.out_dir, periodic && self.step < self.config.steps) {
                let path = dir.join(format!("step-{:06}.vqgm", self.step));
                self.checkpoint(&data.vocab, opts.meta.clone()).save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(FINAL_CHECKPOINT);
            self.checkpoint(&data.vocab, opts.meta.clone()).save(&path)?;
            outcome.checkpoints.push(path.clone());
            outcome.final_checkpoint = Some(path);
        }
        Ok(outcome)
    }
}

pub const FINAL_CHECKPOINT: &str = "model.vqgm";

#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Where the loss curve and checkpoints go; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
    pub validation: Option<&'a TrainData>,
    /// Provenance stored in every checkpoint.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub validation: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

struct LossLog {
    loss: File,
    loss_path: PathBuf,
    validation: Option<File>,
    dir: PathBuf,
    append: bool,
}

impl LossLog {
    /// Starts a fresh curve at step 0; a resumed run appends.
    fn open(dir: &Path, step: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let loss_path = dir.join("loss.csv");
        let append = step > 0 && loss_path.exists();
        let mut loss = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&loss_path)
            .map_err(|e| Error::io(&loss_path, e))?;
        if !append {
            writeln!(loss, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&loss_path, e))?;
        }
        Ok(Self {
            loss,
            loss_path,
            validation: None,
            dir: dir.to_path_buf(),
            append,
        })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.loss, "{}", r.csv_row()).map_err(|e| Error::io(&self.loss_path, e))
    }

    fn write_validation(&mut self, step: u64, ce: f64) -> Result<()> {
        let path = self.dir.join("validation.csv");
        if self.validation.is_none() {
            let append = self.append && path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if !append {
                writeln!(f, "step,ce").map_err(|e| Error::io(&path, e))?;
            }
            self.validation = Some(f);
        }
        let f = self.validation.as_mut().expect("opened above");
        writeln!(f, "{step},{ce}").map_err(|e| Error::io(&path, e))
    }
}

/// Renders records as the loss-curve CSV.
pub fn loss_csv(records: &[StepRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Token-weighted mean question cross-entropy in eval mode.
pub fn validation_loss(model: &VqgModel, data: &TrainData, batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    let indices: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(model, chunk)?;
        let mut g = Graph::new();
        let mut bound = BoundParams::new(&model.params);
        let mut cx = Ctx {
            g: &mut g,
            bound: &mut bound,
            store: &model.params,
            train: false,
            rng: None,
        };
        let out = model.forward(&mut cx, &batch)?;
        let n = batch.questions.iter().filter(|&&t| t != PAD).count();
        sum += g.value(out.loss_q).item() * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

/// Builds a model from `seed` and trains it; the model-init generator and
/// the trainer share the seed.
pub fn train(
    model_config: crate::model::ModelConfig,
    config: TrainConfig,
    data: &TrainData,
    opts: &RunOptions,
) -> Result<(Trainer, TrainOutcome)> {
    let model = VqgModel::new(model_config, &mut seeded(config.seed))?;
    let mut trainer = Trainer::new(model, config, data)?;
    let outcome = trainer.run(data, opts)?;
    Ok((trainer, outcome))
}
