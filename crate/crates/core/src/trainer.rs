//! Mini-batch training loop: scorer forward, combined loss, analytic
//! backward, global-norm clipping and an adaptive-moment update, with
//! dev-set model selection and early stopping. Fully deterministic for
//! a fixed seed: shuffling, initialization and reduction order all flow
//! from explicit seeded generators.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_vocab, Corpus, LabelSet, Vocabulary};
use crate::eval::{decode, evaluate_sets, EvalReport, PredictionSet};
use crate::losses::{combined_loss, gold_tensor, EmcConfig, EmcForm, LossError};
use crate::mat::Mat;
use crate::scorer::{
    backward, forward, EmbeddingSource, ScoreTensor, ScorerError, ScorerGrads, ScorerParams,
    DEFAULT_ROPE_BASE,
};

/// Global gradient-norm ceiling; the log-IoU penalty can spike early.
pub const CLIP_NORM: f64 = 5.0;

const CHECKPOINT_MAGIC: &str = "nestner-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyTrainSet,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("label sets of the splits differ")]
    IncompatibleLabels,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("checkpoint uses external vectors; none were provided")]
    VectorsRequired,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the box loss in the combined objective.
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev micro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Decoding threshold.
    pub threshold: f64,
    pub emc_form: EmcForm,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub max_len: Option<usize>,
    /// Minimum token frequency for the trainable vocabulary.
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            seed: 42,
            threshold: 0.0,
            emc_form: EmcForm::Product,
            head_dim: 16,
            embed_dim: 32,
            max_len: None,
            min_freq: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::BadConfig(msg));
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0)
            || !(self.adam_eps > 0.0)
        {
            return fail("adam parameters out of range".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return fail(format!(
                "head_dim must be positive and even, got {}",
                self.head_dim
            ));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.min_freq == 0 {
            return fail("min_freq must be at least 1".into());
        }
        Ok(())
    }
}

/// One padded mini-batch: sentence indices plus the padded tensor side
/// length (the longest sentence in the batch). Shorter sentences are
/// masked beyond their own length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub padded_len: usize,
}

/// Seeded permutation of the corpus chunked into batches; the epoch is
/// folded into the seed so every epoch reshuffles reproducibly.
pub fn batch_iter(
    corpus: &Corpus,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>, TrainError> {
    if corpus.sentences.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if batch_size == 0 {
        return Err(TrainError::BadConfig(
            "batch_size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            padded_len: chunk
                .iter()
                .map(|&i| corpus.sentences[i].tokens.len())
                .max()
                .unwrap_or(0),
        })
        .collect())
}

/// First/second moment state for [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected adaptive-moment update, in place. `step` is 1-based.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    cfg: &TrainConfig,
    step: usize,
) {
    debug_assert_eq!(params.len(), grads.len());
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * grads[i];
        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = moments.m[i] / bias1;
        let v_hat = moments.v[i] / bias2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Embedding source plus scorer head parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub source: EmbeddingSource,
    pub params: ScorerParams,
}

impl Model {
    /// Seeded init with a trainable lookup table: projections and
    /// embeddings uniform in `(-1/sqrt(d_in), 1/sqrt(d_in))`, biases zero.
    pub fn init(
        labels: &LabelSet,
        vocab: Vocabulary,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let table = Mat::zeros(vocab.len(), cfg.embed_dim);
        Self::init_with_source(
            labels,
            EmbeddingSource::TrainableLookup { vocab, table },
            cfg,
        )
    }

    /// Seeded init keeping the given embedding source; with fixed
    /// external vectors only the heads are trainable.
    pub fn init_with_source(
        labels: &LabelSet,
        source: EmbeddingSource,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let d_in = source.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut sample = move || rng.random_range(-bound..bound);
        let source = match source {
            EmbeddingSource::TrainableLookup { vocab, table } => {
                let table = Mat::from_fn(table.rows(), table.cols(), |_, _| sample());
                EmbeddingSource::TrainableLookup { vocab, table }
            }
            fixed @ EmbeddingSource::FileVectors { .. } => fixed,
        };
        let mut params = ScorerParams::zeros(labels.len(), d_in, cfg.head_dim)?;
        params.rope_base = DEFAULT_ROPE_BASE;
        for head in &mut params.heads {
            for x in head.w_start.data_mut() {
                *x = sample();
            }
            for x in head.w_end.data_mut() {
                *x = sample();
            }
        }
        Ok(Self { source, params })
    }

    fn table(&self) -> Option<&Mat> {
        match &self.source {
            EmbeddingSource::TrainableLookup { table, .. } => Some(table),
            EmbeddingSource::FileVectors { .. } => None,
        }
    }

    /// Flat view: embedding table (lookup mode only), then per class
    /// w_start, b_start, w_end, b_end.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(table) = self.table() {
            out.extend_from_slice(table.data());
        }
        for head in &self.params.heads {
            out.extend_from_slice(head.w_start.data());
            out.extend_from_slice(&head.b_start);
            out.extend_from_slice(head.w_end.data());
            out.extend_from_slice(&head.b_end);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut cursor = 0;
        let mut take = |len: usize| {
            let s = &flat[cursor..cursor + len];
            cursor += len;
            s
        };
        if let EmbeddingSource::TrainableLookup { table, .. } = &mut self.source {
            let len = table.data().len();
            table.data_mut().copy_from_slice(take(len));
        }
        for head in &mut self.params.heads {
            let len = head.w_start.data().len();
            head.w_start.data_mut().copy_from_slice(take(len));
            let len = head.b_start.len();
            head.b_start.copy_from_slice(take(len));
            let len = head.w_end.data().len();
            head.w_end.data_mut().copy_from_slice(take(len));
            let len = head.b_end.len();
            head.b_end.copy_from_slice(take(len));
        }
        debug_assert_eq!(cursor, flat.len());
    }
}

pub(crate) fn grads_to_flat(grads: &ScorerGrads) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(table) = &grads.table {
        out.extend_from_slice(table.data());
    }
    for head in &grads.heads {
        out.extend_from_slice(head.w_start.data());
        out.extend_from_slice(&head.b_start);
        out.extend_from_slice(head.w_end.data());
        out.extend_from_slice(&head.b_end);
    }
    out
}

fn clip_global_norm(grads: &mut [f64], ceiling: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > ceiling {
        let scale = ceiling / norm;
        for g in grads {
            *g *= scale;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_eiou: f64,
    pub train_emc: f64,
    pub train_combined: f64,
    pub dev: EvalReport,
}

/// One entry per completed epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record).expect("serialize epoch record"));
            out.push('\n');
        }
        out
    }
}

/// How the checkpointed model gets token representations back.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointEmbedding {
    /// Trainable table; its rows are part of the flat parameters.
    Lookup { vocab: Vocabulary },
    /// Fixed per-sentence vectors supplied at evaluation time.
    External { dim: usize },
}

/// Single-file JSON container with a magic string and format version;
/// reloading reproduces dev metrics bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub config: TrainConfig,
    pub labels: Vec<String>,
    pub embedding: CheckpointEmbedding,
    pub classes: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    /// Flat parameters in declared order: table rows (lookup mode),
    /// then per class w_start, b_start, w_end, b_end.
    pub params: Vec<f64>,
    pub epoch: usize,
    pub dev_metrics: Option<EvalReport>,
}

impl Checkpoint {
    fn from_model(
        model: &Model,
        config: &TrainConfig,
        labels: &LabelSet,
        epoch: usize,
        dev_metrics: Option<EvalReport>,
    ) -> Self {
        let embedding = match &model.source {
            EmbeddingSource::TrainableLookup { vocab, .. } => CheckpointEmbedding::Lookup {
                vocab: vocab.clone(),
            },
            EmbeddingSource::FileVectors { dim, .. } => CheckpointEmbedding::External { dim: *dim },
        };
        Self {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            labels: labels.iter().map(str::to_string).collect(),
            embedding,
            classes: labels.len(),
            embed_dim: model.source.dim(),
            head_dim: model.params.head_dim,
            params: model.to_flat(),
            epoch,
            dev_metrics,
        }
    }

    pub fn label_set(&self) -> Result<LabelSet, TrainError> {
        LabelSet::new(self.labels.clone())
            .map_err(|e| TrainError::BadCheckpoint(format!("bad label set: {e}")))
    }

    /// Rebuilds the model; external-embedding checkpoints need the
    /// vector map that lookup checkpoints carry internally.
    pub fn to_model(&self, vectors: Option<HashMap<String, Mat>>) -> Result<Model, TrainError> {
        let source = match &self.embedding {
            CheckpointEmbedding::Lookup { vocab } => EmbeddingSource::TrainableLookup {
                vocab: vocab.clone(),
                table: Mat::zeros(vocab.len(), self.embed_dim),
            },
            CheckpointEmbedding::External { dim } => EmbeddingSource::FileVectors {
                dim: *dim,
                by_id: vectors.ok_or(TrainError::VectorsRequired)?,
            },
        };
        let mut params = ScorerParams::zeros(self.classes, self.embed_dim, self.head_dim)?;
        params.rope_base = DEFAULT_ROPE_BASE;
        let mut model = Model { source, params };
        let expected = model.to_flat().len();
        if self.params.len() != expected {
            return Err(TrainError::BadCheckpoint(format!(
                "expected {expected} parameters, found {}",
                self.params.len()
            )));
        }
        model.set_from_flat(&self.params);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let reader = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(reader)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint(format!(
                "bad magic {:?}",
                ckpt.magic
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// Per-sentence box-loss components keyed by label, for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct SentenceBreakdown {
    pub id: String,
    pub classes: std::collections::BTreeMap<String, crate::losses::EiouClassTerms>,
}

/// Box-loss component dump over a corpus, one record per sentence with
/// one entry per gold-bearing class.
pub fn loss_breakdowns(
    model: &Model,
    corpus: &Corpus,
) -> Result<Vec<SentenceBreakdown>, TrainError> {
    let mut out = Vec::with_capacity(corpus.sentences.len());
    for sentence in &corpus.sentences {
        let k = sentence.tokens.len();
        let (scores, _) = forward(sentence, &model.source, &model.params, k)?;
        let gold = gold_tensor(sentence, &corpus.labels, k)?;
        let loss = crate::losses::eiou_loss(&scores, &gold)?;
        let mut classes = std::collections::BTreeMap::new();
        if let Some(breakdown) = loss.eiou {
            for terms in breakdown.per_class {
                classes.insert(corpus.labels.name(terms.class).to_string(), terms);
            }
        }
        out.push(SentenceBreakdown {
            id: sentence.id.clone(),
            classes,
        });
    }
    Ok(out)
}

/// Scores, decodes and micro-evaluates `corpus` under `model`.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    threshold: f64,
    max_len: Option<usize>,
) -> Result<EvalReport, TrainError> {
    if corpus.sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut pairs = Vec::with_capacity(corpus.sentences.len());
    for sentence in &corpus.sentences {
        let k = sentence.tokens.len();
        let (scores, _) = forward(sentence, &model.source, &model.params, k)?;
        let preds = decode(&scores, threshold, max_len);
        let golds = PredictionSet::from_sentence(sentence, &corpus.labels);
        pairs.push((preds, golds));
    }
    Ok(evaluate_sets(&pairs, &corpus.labels))
}

/// Trains on `train`, selects on dev micro-F1, stops early after
/// `patience` stale epochs. Returns the best checkpoint and the full
/// per-epoch history.
pub fn train(
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
) -> Result<(Checkpoint, RunHistory), TrainError> {
    config.validate()?;
    if train.sentences.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if train.labels != dev.labels {
        return Err(TrainError::IncompatibleLabels);
    }
    let vocab = build_vocab(train, config.min_freq);
    let model = Model::init(&train.labels, vocab, config)?;
    train_model(model, train, dev, config)
}

/// Like [`train`] but with an explicit embedding source; fixed
/// external vectors leave only the projection heads trainable.
pub fn train_with_source(
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    source: EmbeddingSource,
) -> Result<(Checkpoint, RunHistory), TrainError> {
    config.validate()?;
    if train.sentences.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if train.labels != dev.labels {
        return Err(TrainError::IncompatibleLabels);
    }
    let model = Model::init_with_source(&train.labels, source, config)?;
    train_model(model, train, dev, config)
}

fn train_model(
    mut model: Model,
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
) -> Result<(Checkpoint, RunHistory), TrainError> {
    let emc_cfg = EmcConfig {
        form: config.emc_form,
    };
    let table_rows = model.table().map(Mat::rows);
    let d_in = model.source.dim();

    let mut flat = model.to_flat();
    let mut moments = AdamMoments::zeros(flat.len());
    let mut step = 0usize;

    let mut history = RunHistory::default();
    let mut best: Option<(Vec<f64>, usize, EvalReport)> = None;
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        let mut sum_eiou = 0.0;
        let mut sum_emc = 0.0;
        let mut sum_combined = 0.0;
        let mut seen = 0usize;
        for batch in batch_iter(train, config.batch_size, config.seed, epoch)? {
            let mut grads = ScorerGrads::zeros(&model.params, d_in, table_rows);
            for &idx in &batch.indices {
                let sentence = &train.sentences[idx];
                let (scores, cache) =
                    forward(sentence, &model.source, &model.params, batch.padded_len)?;
                let gold = gold_tensor(sentence, &train.labels, batch.padded_len)?;
                let loss = combined_loss(&scores, &gold, config.beta, &emc_cfg)?;
                if !loss.value.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                sum_eiou += loss.eiou.as_ref().map_or(0.0, |b| b.aggregate);
                sum_emc += loss.emc.as_ref().map_or(0.0, |t| t.total);
                sum_combined += loss.value;
                seen += 1;
                let mut grad_scores =
                    ScoreTensor::zeros(scores.classes(), scores.size(), scores.valid_len());
                grad_scores.data_mut().copy_from_slice(&loss.grad);
                backward(&grad_scores, &cache, &model.params, &mut grads);
            }
            let mut flat_grads = grads_to_flat(&grads);
            let scale = 1.0 / batch.indices.len() as f64;
            for g in &mut flat_grads {
                *g *= scale;
            }
            clip_global_norm(&mut flat_grads, CLIP_NORM);
            step += 1;
            adam_step(&mut flat, &flat_grads, &mut moments, config, step);
            model.set_from_flat(&flat);
        }
        let dev_report = evaluate_model(&model, dev, config.threshold, config.max_len)?;
        let dev_f1 = dev_report.f1;
        history.epochs.push(EpochRecord {
            epoch,
            train_eiou: sum_eiou / seen as f64,
            train_emc: sum_emc / seen as f64,
            train_combined: sum_combined / seen as f64,
            dev: dev_report.clone(),
        });
        let improved = best.as_ref().is_none_or(|(_, _, b)| dev_f1 > b.f1);
        if improved {
            best = Some((flat.clone(), epoch, dev_report));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let checkpoint = match best {
        Some((params, epoch, report)) => {
            model.set_from_flat(&params);
            Checkpoint::from_model(&model, config, &train.labels, epoch, Some(report))
        }
        None => Checkpoint::from_model(&model, config, &train.labels, 0, None),
    };
    Ok((checkpoint, history))
}

/// Decode-and-evaluate a saved checkpoint on a corpus at threshold
/// `threshold`. External-embedding checkpoints need `vectors`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    threshold: f64,
    vectors: Option<HashMap<String, Mat>>,
) -> Result<EvalReport, TrainError> {
    if corpus.sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let labels = checkpoint.label_set()?;
    if corpus.labels != labels {
        return Err(TrainError::IncompatibleLabels);
    }
    let model = checkpoint.to_model(vectors)?;
    evaluate_model(&model, corpus, threshold, checkpoint.config.max_len)
}
