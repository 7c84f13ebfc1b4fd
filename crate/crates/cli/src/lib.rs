//! Subcommands of the `vqg` executable.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use vqg_core::dataset::{build_corpus_vocab, load_split, make_synthetic, write_synthetic, Split, SyntheticConfig};
use vqg_core::inference::{generate, DecodeMode, GenRequest, ImageRef};
use vqg_core::metrics::evaluate;
use vqg_core::model::checkpoint::Checkpoint;
use vqg_core::model::{gradcheck, Variant, VqgModel};
use vqg_core::text::{load_pretrained_vectors, Vocabulary};
use vqg_core::training::{run_ablation_matrix, AblationInputs, RunOptions, TrainData, Trainer};
use vqg_core::Error;
use vqg_tensor::init::seeded;

use config::{parse_variant, RunConfig};

/// Largest relative error `check` accepts.
pub const CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct CliError {
    /// 2 for configuration and input problems, 1 for runtime failures.
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            Self::config(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "vqg", version, about = "Category-guided visual question generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics of a split after category filtering.
    DataStats {
        #[arg(long)]
        split: PathBuf,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the vocabulary of a split's questions, answers, and category tokens.
    BuildVocab {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic corpus with train and eval manifests.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        images: usize,
        #[arg(long, default_value_t = 4)]
        categories: usize,
        #[arg(long, default_value_t = 50)]
        held_out: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and evaluate the five ablation rows.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate one question for an image and a category.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature store holding the image; not needed by text-only models.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        category: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score a checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Refuse to run unless the checkpoint's vocabulary matches this file.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and the tiny model.
    Check {
        /// Random inputs per operation.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        json: bool,
    },
}

/// Config file plus the overrides shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
}

impl RunArgs {
    /// Loads the config file and applies flags, which win.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        let p = &mut cfg.paths;
        for (slot, flag) in [
            (&mut p.train, &self.train),
            (&mut p.eval, &self.eval),
            (&mut p.vocab, &self.vocab),
            (&mut p.vectors, &self.vectors),
            (&mut p.out_dir, &self.out),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        let t = &mut cfg.train;
        t.steps = self.steps.unwrap_or(t.steps);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        t.seed = self.seed.unwrap_or(t.seed);
        t.checkpoint_every = self.checkpoint_every.unwrap_or(t.checkpoint_every);
        if self.beam.is_some() {
            cfg.decode.beam = self.beam;
        }
        cfg.check_inputs()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DataStats { split, out } => data_stats(&split, out.as_deref()),
        Command::BuildVocab { split, out } => build_vocab(&split, &out),
        Command::MakeSynthetic {
            out,
            images,
            categories,
            held_out,
            seed,
        } => synthetic(&out, images, categories, held_out, seed),
        Command::Train { run, resume } => train(&run.resolve()?, resume.as_deref()),
        Command::Ablate { run } => ablate(&run.resolve()?),
        Command::Generate {
            checkpoint,
            features,
            image_id,
            category,
            beam,
            max_len,
        } => gen(&checkpoint, features.as_deref(), image_id, category, beam, max_len),
        Command::Evaluate {
            checkpoint,
            split,
            out,
            beam,
            vocab,
        } => eval(&checkpoint, &split, out.as_deref(), beam, vocab.as_deref()),
        Command::Check { seeds, json } => check(seeds, json),
    }
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
    match out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn require_file(key: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{key}: no such file {}", path.display())))
    }
}

fn data_stats(split: &Path, out: Option<&Path>) -> Result<()> {
    require_file("--split", split)?;
    let s = load_split(split, false)?;
    let mut cfg = RunConfig::default();
    cfg.paths.train = Some(split.to_path_buf());
    let mut v = serde_json::to_value(&s.stats).expect("stats serialize");
    v["config_hash"] = json!(cfg.hash());
    emit(&v, out)
}

fn build_vocab(split: &Path, out: &Path) -> Result<()> {
    require_file("--split", split)?;
    let s = load_split(split, false)?;
    let vocab = build_corpus_vocab(&s.samples);
    vocab.save(out)?;
    emit(&json!({ "size": vocab.len(), "vocab_hash": vocab.content_hash(), "path": out }), None)
}

fn synthetic(out: &Path, images: usize, categories: usize, held_out: usize, seed: u64) -> Result<()> {
    let corpus = make_synthetic(&SyntheticConfig {
        n_images: images,
        n_categories: categories,
        seed,
    })?;
    let manifests = write_synthetic(&corpus, out, held_out)?;
    emit(
        &json!({ "samples": corpus.samples.len(), "images": images, "manifests": manifests }),
        None,
    )
}

/// Training inputs derived from a resolved config.
struct Prepared {
    data: TrainData,
    split: Split,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let train_path = cfg.require_train()?;
    let split = load_split(train_path, cfg.model.variant.uses_image())?;
    if split.samples.is_empty() {
        return Err(CliError::config(format!("{}: no samples after category filtering", train_path.display())));
    }
    let vocab = match &cfg.paths.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_corpus_vocab(&split.samples),
    };
    let data = TrainData::encode(
        &split.samples,
        split.features.clone(),
        vocab,
        cfg.model.question_len,
        cfg.model.answer_len,
    );
    Ok(Prepared { data, split })
}

fn provenance(cfg: &RunConfig, vocab: &Vocabulary) -> Value {
    json!({
        "config_hash": cfg.hash(),
        "run_config": cfg,
        "vocab_hash": vocab.content_hash(),
    })
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    if let Some(r) = resume {
        require_file("--resume", r)?;
    }
    let Prepared { data, split } = prepare(cfg)?;
    let width = split.features.as_ref().map(|f| f.width());
    let model_config = cfg.model.resolve(data.vocab.len(), width, cfg.train.lambda_recon);
    model_config.validate()?;
    let validation = match (&cfg.paths.eval, cfg.train.eval_every) {
        (Some(p), n) if n > 0 => {
            let s = load_split(p, cfg.model.variant.uses_image())?;
            Some(TrainData::encode(
                &s.samples,
                s.features,
                data.vocab.clone(),
                model_config.question_len,
                model_config.answer_len,
            ))
        }
        _ => None,
    };
    let out_dir = cfg.out_dir();
    write(&out_dir.join("config.toml"), toml::to_string(cfg).expect("config serializes"))?;
    let opts = RunOptions {
        out_dir: Some(out_dir.clone()),
        validation: validation.as_ref(),
        meta: provenance(cfg, &data.vocab),
    };

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model.config != model_config {
                return Err(CliError::config(format!(
                    "{}: checkpoint model configuration differs from the run configuration",
                    path.display()
                )));
            }
            if ckpt.vocab != data.vocab {
                return Err(CliError::config(format!("{}: checkpoint vocabulary differs from the run's", path.display())));
            }
            Trainer::resume(ckpt, cfg.train.clone(), &data)?
        }
        None => {
            let mut rng = seeded(cfg.train.seed);
            let mut model = VqgModel::new(model_config, &mut rng)?;
            if let Some(path) = &cfg.paths.vectors {
                let (table, report) = load_pretrained_vectors(path, &data.vocab, model.config.d_model, &mut rng)?;
                model.set_embedding(table.matrix)?;
                eprintln!("word vectors cover {:.1}% of the vocabulary", 100.0 * report.coverage);
            }
            Trainer::new(model, cfg.train.clone(), &data)?
        }
    };
    let outcome = trainer.run(&data, &opts)?;
    let last = outcome.records.last();
    emit(
        &json!({
            "config_hash": cfg.hash(),
            "steps": trainer.step(),
            "final_loss_q": last.map(|r| r.loss_q),
            "final_total": last.map(|r| r.total),
            "parameters": trainer.model.num_parameters(),
            "checkpoint": outcome.final_checkpoint,
            "loss_csv": out_dir.join("loss.csv"),
        }),
        None,
    )
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let eval_path = cfg.require_eval()?;
    let Prepared { data, split } = prepare(cfg)?;
    let eval_split = load_split(eval_path, true)?;
    let width = split.features.as_ref().map(|f| f.width());
    let base = cfg.model.resolve(data.vocab.len(), width, cfg.train.lambda_recon);
    base.validate()?;
    let out_dir = cfg.out_dir();
    write(&out_dir.join("config.toml"), toml::to_string(cfg).expect("config serializes"))?;
    let hash = cfg.hash();
    let report = run_ablation_matrix(
        &base,
        &cfg.train,
        &AblationInputs {
            train: &data,
            eval_samples: &eval_split.samples,
            eval_features: eval_split.features.as_ref(),
            decode: cfg.decode.mode(),
            out_dir: Some(&out_dir),
            config_hash: &hash,
        },
    );
    let mut failed = Vec::new();
    for row in &report.rows {
        match &row.outcome {
            Ok(r) => emit(
                &serde_json::to_value(r).expect("report serializes"),
                Some(&out_dir.join(row.name).join("report.json")),
            )?,
            Err(e) => failed.push(format!("{}: {e}", row.name)),
        }
    }
    let table = report.to_json();
    emit(&table, Some(&out_dir.join("ablation.json")))?;
    emit(&table, None)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("ablation rows failed: {}", failed.join("; "))))
    }
}

fn gen(
    checkpoint: &Path,
    features: Option<&Path>,
    image_id: u64,
    category: String,
    beam: Option<usize>,
    max_len: Option<usize>,
) -> Result<()> {
    require_file("--checkpoint", checkpoint)?;
    if let Some(f) = features {
        require_file("--features", f)?;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let store = features.map(vqg_core::dataset::FeatureStore::load).transpose()?;
    let req = GenRequest {
        image: ImageRef::Id(image_id),
        category,
        max_len,
        mode: beam.map_or(DecodeMode::Greedy, DecodeMode::Beam),
    };
    let result = generate(&req, &ckpt.model, &ckpt.vocab, store.as_ref())?;
    emit(&serde_json::to_value(&result).expect("result serializes"), None)
}

fn eval(checkpoint: &Path, split: &Path, out: Option<&Path>, beam: Option<usize>, vocab: Option<&Path>) -> Result<()> {
    require_file("--checkpoint", checkpoint)?;
    require_file("--split", split)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let embedded = ckpt.vocab.content_hash();
    if let Some(recorded) = ckpt.meta.get("vocab_hash").and_then(Value::as_str) {
        if recorded != embedded {
            return Err(CliError::config(format!(
                "{}: vocabulary does not match the one recorded at training time",
                checkpoint.display()
            )));
        }
    }
    if let Some(path) = vocab {
        require_file("--vocab", path)?;
        let given = Vocabulary::load(path)?;
        if given.content_hash() != embedded {
            return Err(CliError::config(format!(
                "{} does not match the vocabulary of checkpoint {}",
                path.display(),
                checkpoint.display()
            )));
        }
    }
    let config_hash = ckpt.meta.get("config_hash").and_then(Value::as_str).unwrap_or("").to_string();
    let s = load_split(split, ckpt.model.config.variant.uses_image())?;
    let mode = beam.map_or(DecodeMode::Greedy, DecodeMode::Beam);
    let report = evaluate(&ckpt.model, &ckpt.vocab, &s.samples, s.features.as_ref(), mode, &config_hash)?;
    emit(&serde_json::to_value(&report).expect("report serializes"), out)
}

fn check(seeds: u64, as_json: bool) -> Result<()> {
    let start = Instant::now();
    let ops = vqg_tensor::op_suite(0..seeds.max(1), 1e-5).map_err(|e| CliError::runtime(e.to_string()))?;
    let models = gradcheck::tiny_suite(1e-5)?;
    let seconds = start.elapsed().as_secs_f64();
    let worst_op = ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let worst_model = models.iter().map(|m| m.max_rel_err).fold(0.0, f64::max);
    let pass = worst_op <= CHECK_TOLERANCE && worst_model <= CHECK_TOLERANCE;
    if as_json {
        let ops: Vec<Value> = ops
            .iter()
            .map(|o| json!({ "op": o.op, "max_rel_err": o.max_rel_err, "checked": o.checked }))
            .collect();
        emit(
            &json!({ "ops": ops, "model": models, "tolerance": CHECK_TOLERANCE, "pass": pass, "seconds": seconds }),
            None,
        )?;
    } else {
        for o in &ops {
            println!("{:<16} {:>10.3e}  ({} elements)", o.op, o.max_rel_err, o.checked);
        }
        for m in &models {
            let mode = if m.train { "batch stats" } else { "running stats" };
            println!(
                "model {:<13} B={} {:<13} {:>10.3e}  (worst {})",
                m.variant.name(),
                m.batch,
                mode,
                m.max_rel_err,
                m.worst_param
            );
        }
        println!(
            "{} max op error {worst_op:.3e}, max model error {worst_model:.3e}, tolerance {CHECK_TOLERANCE:e}, {seconds:.1}s",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::runtime("gradient check exceeded tolerance"))
    }
}
