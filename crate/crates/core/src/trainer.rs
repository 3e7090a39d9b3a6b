//! Fine-tuning loop, cross-validation driver and the on-disk model handle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::GoldRecord;
use crate::dataset::{self, BalancedTrainSet, DatasetError, FoldPlan, TokenizedExample};
use crate::evaluator::{EvalError, EvalReport};
use crate::model::{batch_tensors, DropoutRng, EncoderClassifier, EncoderConfig, ModelError, Pooling};
use crate::plot;
use crate::taxonomy::NUM_CATEGORIES;
use crate::tokenizer::{ModelFamily, TextTokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("label index {0} out of range")]
    BadLabel(usize),
    #[error("post {0} is in both training and validation data")]
    Overlap(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("example {post_id} does not fit the model: {reason}")]
    Mismatch { post_id: String, reason: String },
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// A preset name (see [`crate::model::PRESETS`]) or a directory holding
    /// `config.json`, `model.safetensors` and `tokenizer.json`.
    pub checkpoint_id: String,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub dropout: f32,
    pub grad_clip: f64,
    /// Vocabulary size when a tokenizer has to be trained for a preset.
    pub vocab_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            checkpoint_id: "bert-base-uncased".into(),
            num_classes: NUM_CATEGORIES,
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            max_len: dataset::DEFAULT_MAX_LEN,
            seed: 42,
            pooling: Pooling::default(),
            dropout: 0.1,
            grad_clip: 1.0,
            vocab_size: 8000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if self.num_classes != NUM_CATEGORIES {
            return fail("num_classes must be 6");
        }
        if self.max_len < 8 {
            return fail("max_len must be at least 8");
        }
        Ok(())
    }

    /// Short stable hash naming the run directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }
}

/// Linear warmup to `peak`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        LinearSchedule {
            peak,
            warmup_steps: (warmup_fraction * total_steps as f64) as usize,
            total_steps,
        }
    }

    /// Rate used for optimizer step `step` (0-based); `lr(total_steps)` is 0.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        self.peak * self.total_steps.saturating_sub(step) as f64 / decay as f64
    }

    pub fn trace(&self) -> Vec<f64> {
        (0..=self.total_steps).map(|s| self.lr(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr_at_end: f64,
}

pub fn epoch_logs_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr_at_end\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:e}",
            l.epoch, l.train_loss, l.train_acc, l.val_loss, l.val_acc, l.lr_at_end
        );
    }
    out
}

/// Accuracy and loss curves side by side in one SVG document per metric.
pub fn render_curves(logs: &[EpochLog], dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    let series = |f: fn(&EpochLog) -> f64| logs.iter().map(|l| (l.epoch as f64, f(l))).collect::<Vec<_>>();
    let acc = plot::line_chart(
        "Accuracy",
        "epoch",
        "accuracy",
        &[("train".into(), series(|l| l.train_acc)), ("validation".into(), series(|l| l.val_acc))],
        false,
    );
    let loss = plot::line_chart(
        "Loss",
        "epoch",
        "cross-entropy",
        &[("train".into(), series(|l| l.train_loss)), ("validation".into(), series(|l| l.val_loss))],
        false,
    );
    std::fs::write(dir.join("curves.svg"), acc)?;
    std::fs::write(dir.join("loss.svg"), loss)
}

/// Starting point for fine-tuning: architecture, tokenizer and optional weights.
#[derive(Clone)]
pub struct Checkpoint {
    pub id: String,
    pub config: EncoderConfig,
    pub tokenizer: TextTokenizer,
    pub weights: Option<PathBuf>,
}

impl Checkpoint {
    /// A directory id loads its tokenizer and weights; a preset id trains a
    /// tokenizer on `texts` and starts from seeded random weights.
    pub fn resolve<I, S>(cfg: &TrainConfig, texts: I) -> Result<Self, TrainError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str> + Send,
    {
        cfg.validate()?;
        let dir = Path::new(&cfg.checkpoint_id);
        if dir.join("config.json").is_file() {
            let mut config: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
            let tokenizer = TextTokenizer::load(dir.join("tokenizer.json"), config.family)?.with_max_len(cfg.max_len)?;
            config.pooling = cfg.pooling;
            config.dropout = cfg.dropout;
            check_positions(&config, cfg.max_len)?;
            return Ok(Checkpoint {
                id: cfg.checkpoint_id.clone(),
                config,
                tokenizer,
                weights: Some(dir.join("model.safetensors")),
            });
        }
        let family = crate::model::PRESETS
            .iter()
            .find(|p| p.0 == cfg.checkpoint_id)
            .map(|p| p.1)
            .ok_or_else(|| ModelError::UnknownCheckpoint(cfg.checkpoint_id.clone()))?;
        let tokenizer = TextTokenizer::train(family, texts, cfg.vocab_size)?.with_max_len(cfg.max_len)?;
        Self::from_tokenizer(cfg, tokenizer)
    }

    /// Preset architecture over an existing tokenizer.
    pub fn from_tokenizer(cfg: &TrainConfig, tokenizer: TextTokenizer) -> Result<Self, TrainError> {
        let tokenizer = tokenizer.with_max_len(cfg.max_len)?;
        let mut config = EncoderConfig::preset(
            &cfg.checkpoint_id,
            tokenizer.vocab_size(),
            cfg.max_len,
            tokenizer.special_ids().pad,
        )?;
        if config.family != tokenizer.family() {
            return Err(TrainError::Config(format!(
                "checkpoint {} is a {} model but the tokenizer is {}",
                cfg.checkpoint_id,
                config.family,
                tokenizer.family()
            )));
        }
        config.pooling = cfg.pooling;
        config.dropout = cfg.dropout;
        Ok(Checkpoint {
            id: cfg.checkpoint_id.clone(),
            config,
            tokenizer,
            weights: None,
        })
    }

    pub fn family(&self) -> ModelFamily {
        self.config.family
    }

    fn instantiate(&self, seed: u64, device: &Device) -> Result<EncoderClassifier, TrainError> {
        let model = EncoderClassifier::new(self.config.clone(), seed, device)?;
        if let Some(w) = &self.weights {
            let n = model.params().load_partial(w)?;
            log::info!("loaded {n} tensors from {}", w.display());
        }
        Ok(model)
    }
}

fn check_positions(config: &EncoderConfig, max_len: usize) -> Result<(), TrainError> {
    let offset = match config.family {
        ModelFamily::Roberta => config.pad_token_id as usize + 1,
        _ => 0,
    };
    if max_len + offset > config.max_position_embeddings {
        return Err(TrainError::Config(format!(
            "max_len {max_len} exceeds the checkpoint's {} positions",
            config.max_position_embeddings
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleManifest {
    pub checkpoint_id: String,
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub max_len: usize,
    pub family: ModelFamily,
}

/// A trained classifier with its tokenizer. Cheap to clone.
#[derive(Clone)]
pub struct ModelHandle {
    model: Arc<EncoderClassifier>,
    tokenizer: Arc<TextTokenizer>,
    pub checkpoint_id: String,
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("checkpoint_id", &self.checkpoint_id)
            .field("fold", &self.fold)
            .field("best_epoch", &self.best_epoch)
            .field("best_val_acc", &self.best_val_acc)
            .finish()
    }
}

impl ModelHandle {
    pub fn new(model: EncoderClassifier, tokenizer: TextTokenizer, checkpoint_id: &str) -> Self {
        ModelHandle {
            model: Arc::new(model),
            tokenizer: Arc::new(tokenizer),
            checkpoint_id: checkpoint_id.to_string(),
            fold: 0,
            best_epoch: 0,
            best_val_acc: 0.0,
        }
    }

    /// Seeded random weights on CPU, for smoke tests and service wiring.
    pub fn untrained(checkpoint: &Checkpoint, seed: u64) -> Result<Self, TrainError> {
        let model = checkpoint.instantiate(seed, &Device::Cpu)?;
        Ok(Self::new(model, checkpoint.tokenizer.clone(), &checkpoint.id))
    }

    pub fn model(&self) -> &EncoderClassifier {
        &self.model
    }

    pub fn tokenizer(&self) -> &TextTokenizer {
        &self.tokenizer
    }

    pub fn manifest(&self) -> HandleManifest {
        HandleManifest {
            checkpoint_id: self.checkpoint_id.clone(),
            fold: self.fold,
            best_epoch: self.best_epoch,
            best_val_acc: self.best_val_acc,
            max_len: self.tokenizer.max_len(),
            family: self.tokenizer.family(),
        }
    }

    /// Writes weights, config, tokenizer and `handle.json`. The directory can
    /// be loaded again or used as a `checkpoint_id`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        self.tokenizer.save(dir.join("tokenizer.json"))?;
        std::fs::write(dir.join("handle.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref();
        let model = EncoderClassifier::load(dir, &Device::Cpu)?;
        let manifest: HandleManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("handle.json"))?)?;
        let tokenizer = TextTokenizer::load(dir.join("tokenizer.json"), manifest.family)?.with_max_len(manifest.max_len)?;
        if tokenizer.vocab_size() != model.config().vocab_size {
            return Err(TrainError::Config(format!(
                "tokenizer vocabulary {} does not match model vocabulary {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(ModelHandle {
            model: Arc::new(model),
            tokenizer: Arc::new(tokenizer),
            checkpoint_id: manifest.checkpoint_id,
            fold: manifest.fold,
            best_epoch: manifest.best_epoch,
            best_val_acc: manifest.best_val_acc,
        })
    }

    /// Probabilities for raw classifier texts (title and body already joined).
    pub fn predict_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<[f64; NUM_CATEGORIES]>, TrainError> {
        let encoded = texts
            .iter()
            .map(|t| self.tokenizer.encode(t.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<(&[u32], &[u32])> = encoded
            .iter()
            .map(|e| (e.ids.as_slice(), e.attention_mask.as_slice()))
            .collect();
        self.predict_rows(&rows)
    }

    /// Probabilities for already encoded rows, in batches of 64.
    pub fn predict_rows(&self, rows: &[(&[u32], &[u32])]) -> Result<Vec<[f64; NUM_CATEGORIES]>, TrainError> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(64) {
            let (ids, mask) = batch_tensors(chunk.iter().copied(), self.model.device())?;
            for p in self.model.probabilities(&ids, &mask)? {
                let mut row = [0.0; NUM_CATEGORIES];
                for (dst, src) in row.iter_mut().zip(p) {
                    *dst = src as f64;
                }
                out.push(row);
            }
        }
        Ok(out)
    }
}

fn check_examples(examples: &[TokenizedExample], max_len: usize, vocab: usize) -> Result<(), TrainError> {
    for e in examples {
        if e.label_index >= NUM_CATEGORIES {
            return Err(TrainError::BadLabel(e.label_index));
        }
        let reason = if e.input_ids.len() != max_len || e.attention_mask.len() != max_len {
            Some(format!("length {} but the model expects {max_len}", e.input_ids.len()))
        } else {
            e.input_ids
                .iter()
                .find(|&&id| id as usize >= vocab)
                .map(|id| format!("token id {id} outside vocabulary of {vocab}"))
        };
        if let Some(reason) = reason {
            return Err(TrainError::Mismatch {
                post_id: e.post_id.clone(),
                reason,
            });
        }
    }
    Ok(())
}

/// Softmax probabilities for tokenized examples, order preserved.
pub fn predict(model: &ModelHandle, examples: &[TokenizedExample]) -> Result<Vec<[f64; NUM_CATEGORIES]>, TrainError> {
    check_examples(examples, model.tokenizer.max_len(), model.model.config().vocab_size)?;
    let rows: Vec<(&[u32], &[u32])> = examples
        .iter()
        .map(|e| (e.input_ids.as_slice(), e.attention_mask.as_slice()))
        .collect();
    model.predict_rows(&rows)
}

/// Mean cross-entropy and accuracy in evaluation mode.
fn evaluate(model: &EncoderClassifier, examples: &[TokenizedExample]) -> candle_core::Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let (ids, mask) = batch_tensors(
            chunk.iter().map(|e| (e.input_ids.as_slice(), e.attention_mask.as_slice())),
            model.device(),
        )?;
        let labels: Vec<u32> = chunk.iter().map(|e| e.label_index as u32).collect();
        let labels = Tensor::new(labels.as_slice(), model.device())?;
        let logits = model.forward(&ids, &mask, None)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &labels)?.to_scalar::<f32>()? as f64;
        loss_sum += loss * chunk.len() as f64;
        let pred = logits.argmax(1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(chunk).filter(|(p, e)| **p as usize == e.label_index).count();
    }
    let n = examples.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Rescales all gradients in place when their global L2 norm exceeds `max_norm`.
fn clip_grad_norm(
    grads: &mut candle_core::backprop::GradStore,
    vars: &[&Var],
    max_norm: f64,
) -> candle_core::Result<f64> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

fn no_decay(name: &str) -> bool {
    name.contains("bias") || name.contains("LayerNorm") || name.contains("layer_norm")
}

/// Fine-tunes a fresh copy of `checkpoint` on one fold and returns the
/// best-validation-accuracy snapshot with one log per epoch.
pub fn fine_tune(
    train: &BalancedTrainSet,
    val: &[TokenizedExample],
    cfg: &TrainConfig,
    checkpoint: &Checkpoint,
) -> Result<(ModelHandle, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    if train.examples.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let vocab = checkpoint.config.vocab_size;
    check_examples(&train.examples, cfg.max_len, vocab)?;
    check_examples(val, cfg.max_len, vocab)?;
    let train_ids = train.post_ids();
    if let Some(e) = val.iter().find(|e| train_ids.contains(e.post_id.as_str())) {
        return Err(TrainError::Overlap(e.post_id.clone()));
    }

    let device = Device::Cpu;
    let seed = cfg.seed.wrapping_add(train.fold as u64);
    let model = checkpoint.instantiate(seed, &device)?;
    let (decay, plain): (Vec<_>, Vec<_>) = model.params().vars().partition(|(n, _)| !no_decay(n));
    let all_vars: Vec<&Var> = model.params().vars().map(|(_, v)| v).collect();
    let params = |wd: f64| ParamsAdamW {
        lr: cfg.learning_rate,
        weight_decay: wd,
        ..Default::default()
    };
    let mut opt_decay = AdamW::new(decay.iter().map(|(_, v)| (*v).clone()).collect(), params(cfg.weight_decay))?;
    let mut opt_plain = AdamW::new(plain.iter().map(|(_, v)| (*v).clone()).collect(), params(0.0))?;

    let n = train.examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.learning_rate, steps_per_epoch * cfg.epochs, cfg.warmup_fraction);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut dropout_rng = DropoutRng::new(seed ^ 0xd50, checkpoint.config.dropout);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (ids, mask) = batch_tensors(
                batch.iter().map(|&i| {
                    let e = &train.examples[i];
                    (e.input_ids.as_slice(), e.attention_mask.as_slice())
                }),
                &device,
            )?;
            let labels: Vec<u32> = batch.iter().map(|&i| train.examples[i].label_index as u32).collect();
            let labels = Tensor::new(labels.as_slice(), &device)?;
            let logits = model.forward(&ids, &mask, Some(&mut dropout_rng))?;
            let loss = candle_nn::loss::cross_entropy(&logits, &labels)?;
            loss_sum += loss.to_scalar::<f32>()? as f64;
            let mut grads = loss.backward()?;
            clip_grad_norm(&mut grads, &all_vars, cfg.grad_clip)?;
            let lr = schedule.lr(step);
            opt_decay.set_learning_rate(lr);
            opt_plain.set_learning_rate(lr);
            opt_decay.step(&grads)?;
            opt_plain.step(&grads)?;
            step += 1;
        }
        let (_, train_acc) = evaluate(&model, &train.examples)?;
        let (val_loss, val_acc) = evaluate(&model, val)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            train_acc,
            val_loss,
            val_acc,
            lr_at_end: schedule.lr(step),
        };
        log::info!(
            "fold {} epoch {epoch}: loss {:.4} acc {:.3} val_loss {:.4} val_acc {:.3}",
            train.fold,
            log.train_loss,
            log.train_acc,
            log.val_loss,
            log.val_acc
        );
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, model.params().snapshot()?));
        }
        logs.push(log);
    }
    let (best_epoch, best_val_acc, snapshot) = best.expect("at least one epoch");
    model.params().restore(&snapshot)?;
    let mut handle = ModelHandle::new(model, checkpoint.tokenizer.clone(), &checkpoint.id);
    handle.fold = train.fold;
    handle.best_epoch = best_epoch;
    handle.best_val_acc = best_val_acc;
    Ok((handle, logs))
}

pub fn data_hash(examples: &[TokenizedExample]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.post_id.as_bytes());
        h.update([0, e.label_index as u8]);
        for id in &e.input_ids {
            h.update(id.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub fold: usize,
    pub train_data_hash: String,
    pub validation_data_hash: String,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub metrics: Option<EvalReport>,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub model: ModelHandle,
    pub report: EvalReport,
    pub logs: Vec<EpochLog>,
    /// Validation post ids in report order.
    pub validation_ids: Vec<String>,
}

/// Directory of one fold under `runs_root`.
pub fn fold_dir(runs_root: &Path, cfg: &TrainConfig, fold: usize) -> PathBuf {
    runs_root.join(cfg.hash()).join(format!("fold{fold}"))
}

fn persist_fold(
    dir: &Path,
    cfg: &TrainConfig,
    fold: &dataset::FoldData,
    result: &FoldResult,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    result.model.save(dir)?;
    std::fs::write(dir.join("epochs.csv"), epoch_logs_csv(&result.logs))?;
    render_curves(&result.logs, dir)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed.wrapping_add(fold.fold as u64),
        fold: fold.fold,
        train_data_hash: data_hash(&fold.train.examples),
        validation_data_hash: data_hash(&fold.validation),
        best_epoch: result.model.best_epoch,
        best_val_acc: result.model.best_val_acc,
        metrics: Some(result.report.clone()),
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    result.report.render(dir.join("eval"), &cfg.checkpoint_id)?;
    Ok(())
}

/// Trains one model per fold: upsampled folds != i for training, fold i for
/// validation. Each completed fold is written under `runs_root` when given,
/// so a later failure leaves earlier folds on disk.
pub fn cross_validate(
    gold: &[GoldRecord],
    plan: &FoldPlan,
    cfg: &TrainConfig,
    checkpoint: &Checkpoint,
    runs_root: Option<&Path>,
) -> Result<Vec<FoldResult>, TrainError> {
    let all: Vec<usize> = (0..plan.k).collect();
    cross_validate_folds(gold, plan, cfg, checkpoint, runs_root, &all)
}

/// [`cross_validate`] restricted to the listed folds.
pub fn cross_validate_folds(
    gold: &[GoldRecord],
    plan: &FoldPlan,
    cfg: &TrainConfig,
    checkpoint: &Checkpoint,
    runs_root: Option<&Path>,
    folds: &[usize],
) -> Result<Vec<FoldResult>, TrainError> {
    cfg.validate()?;
    let examples = dataset::tokenize(gold, &checkpoint.tokenizer)?;
    let mut results = Vec::with_capacity(folds.len());
    for &fold in folds {
        let run = || -> Result<(dataset::FoldData, FoldResult), TrainError> {
            let data = dataset::fold_data(&examples, plan, fold, cfg.seed)?;
            let (model, logs) = fine_tune(&data.train, &data.validation, cfg, checkpoint)?;
            let probs = predict(&model, &data.validation)?;
            let actual: Vec<usize> = data.validation.iter().map(|e| e.label_index).collect();
            let report = EvalReport::from_probabilities(&actual, &probs)?;
            let validation_ids = data.validation.iter().map(|e| e.post_id.clone()).collect();
            Ok((
                data,
                FoldResult {
                    fold,
                    model,
                    report,
                    logs,
                    validation_ids,
                },
            ))
        };
        let (data, result) = run().map_err(|e| TrainError::Fold {
            fold,
            source: Box::new(e),
        })?;
        if let Some(root) = runs_root {
            persist_fold(&fold_dir(root, cfg, fold), cfg, &data, &result)?;
        }
        results.push(result);
    }
    Ok(results)
}
