//! Experiment wiring: run configuration, the training loop, evaluation,
//! correlation statistics, the symmetry probe, representation export, and
//! the parameter-control comparison.
//!
//! Every random choice flows from the run seed through named sub-streams,
//! so a config plus a seed pins the full byte content of reports and
//! checkpoints. Wall time is the one exception and lives in a dedicated
//! metadata field at the end of each report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_vocab, dev_holdout, epoch_order, load_dataset, load_dataset_with_labels,
    load_sis_pairs, load_word2vec_binary, make_batch, random_embeddings, split_cv10, Dataset,
    EmbeddingMatrix, Example, SisPair, Vocab, FETCH_MANIFEST,
};
use crate::fixtures;
use crate::models::{
    checkpoint_bytes, model_from_checkpoint_bytes, Model, ModelConfig, ModelError, ParamCount,
};
use crate::ndtensor::{Adadelta, Optimizer, SgdMomentum, Tape, TensorError};
use crate::real::Real;
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 3 points, got {n}")]
    TooFewPoints { n: usize },
    #[error("{which} input is constant, correlation undefined")]
    ConstantInput { which: &'static str },
    #[error("zero-norm vector, cosine similarity undefined")]
    ZeroNorm,
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("{which} split is empty")]
    EmptySplit { which: &'static str },
    #[error("checkpoint vocabulary ({model}) does not match dataset vocabulary ({data})")]
    VocabMismatch { model: usize, data: usize },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("unknown dataset {0:?}; see the fetch manifest for recognized names")]
    UnknownDataset(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------
// correlation statistics
// ---------------------------------------------------------------------

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(HarnessError::LengthMismatch { a: u.len(), b: v.len() });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(HarnessError::ZeroNorm);
    }
    // rounding can push |cos| a few ulps past 1; the true value never is
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Product-moment correlation. Constant input leaves it undefined.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(HarnessError::LengthMismatch { a: xs.len(), b: ys.len() });
    }
    if xs.len() < 3 {
        return Err(HarnessError::TooFewPoints { n: xs.len() });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 {
        return Err(HarnessError::ConstantInput { which: "first" });
    }
    if vy == 0.0 {
        return Err(HarnessError::ConstantInput { which: "second" });
    }
    // single square root: sqrt(2)*sqrt(2) != 2 in floating point, and the
    // rank hand cases land on exact halves only without that detour
    Ok(cov / (vx * vy).sqrt())
}

/// Ranks with ties sharing their average position (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: product-moment correlation of average-ties ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(HarnessError::LengthMismatch { a: xs.len(), b: ys.len() });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

// ---------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------

fn d_batch_ada() -> usize {
    50
}
fn d_batch_sgd() -> usize {
    100
}
fn d_one() -> f64 {
    1.0
}
fn d_rho() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-6
}
fn d_sgd_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}
fn d_epochs() -> usize {
    200
}
fn d_patience() -> usize {
    10
}
fn d_drop_frac() -> f64 {
    0.45
}
fn d_drop_factor() -> f64 {
    0.1
}
fn d_dev_frac() -> f64 {
    0.1
}
fn d_sis_limit() -> usize {
    200
}
fn d_min_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adadelta {
        #[serde(default = "d_batch_ada")]
        batch: usize,
        #[serde(default = "d_one")]
        lr: f64,
        #[serde(default = "d_rho")]
        rho: f64,
        #[serde(default = "d_eps")]
        epsilon: f64,
        #[serde(default = "d_zero")]
        weight_decay: f64,
    },
    Sgd {
        #[serde(default = "d_batch_sgd")]
        batch: usize,
        #[serde(default = "d_sgd_lr")]
        lr: f64,
        #[serde(default = "d_momentum")]
        momentum: f64,
        #[serde(default = "d_wd")]
        weight_decay: f64,
    },
}

fn d_zero() -> f64 {
    0.0
}

impl OptimizerConfig {
    pub fn batch(&self) -> usize {
        match self {
            OptimizerConfig::Adadelta { batch, .. } | OptimizerConfig::Sgd { batch, .. } => *batch,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        match self {
            OptimizerConfig::Adadelta { lr, .. } | OptimizerConfig::Sgd { lr, .. } => *lr,
        }
    }

    /// The schedule only moves SGD runs; Adadelta adapts on its own.
    pub fn scheduled(&self) -> bool {
        matches!(self, OptimizerConfig::Sgd { .. })
    }

    pub fn build<R: Real>(&self) -> Optimizer<R> {
        match *self {
            OptimizerConfig::Adadelta { lr, rho, epsilon, weight_decay, .. } => {
                Optimizer::Adadelta(Adadelta::new(lr, rho, epsilon, weight_decay))
            }
            OptimizerConfig::Sgd { lr, momentum, weight_decay, .. } => {
                Optimizer::Sgd(SgdMomentum::new(lr, momentum, weight_decay))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Stratified 10-fold cross-validation. Without a fold index, all ten
    /// folds run and the report carries their mean and spread.
    Cv10 {
        #[serde(default)]
        fold: Option<usize>,
    },
    /// Published train/test split; dev is carved out of train.
    Standard {
        #[serde(default = "d_dev_frac")]
        dev_fraction: f64,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Standard { dev_fraction: d_dev_frac() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// Seeded uniform init for every word.
    Random,
    /// Pretrained binary vectors; words missing from the file fall back
    /// to the seeded init. Without a path, the conventional file name is
    /// looked up in the data directory.
    Word2vec {
        #[serde(default)]
        path: Option<String>,
    },
    /// The compiled-in reproducible stand-in for the pretrained file.
    Fixture,
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Random
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Registry name (`mr`, `subj`, `cr`, `mpqa`, `trec`, `sstb`) or a
    /// fixture name (`binary64`, `trec6`).
    pub name: String,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "d_min_count")]
    pub min_count: usize,
    #[serde(default)]
    pub embeddings: EmbeddingSource,
    /// Pair budget for the symmetry probe sample.
    #[serde(default = "d_sis_limit")]
    pub sis_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of max epochs trained at the initial SGD learning rate.
    #[serde(default = "d_drop_frac")]
    pub lr_drop_frac: f64,
    #[serde(default = "d_drop_factor")]
    pub lr_drop_factor: f64,
    /// Where the best-dev checkpoint is written, when set.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.optimizer.batch() == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr_drop_frac > 0.0 && self.lr_drop_frac < 1.0) {
            return bad(format!("lr_drop_frac {} outside (0,1)", self.lr_drop_frac));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad(format!("lr_drop_factor {} outside (0,1)", self.lr_drop_factor));
        }
        if let SplitSpec::Standard { dev_fraction } = self.data.split {
            if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
                return bad(format!("dev_fraction {dev_fraction} outside (0,1)"));
            }
        }
        if self.data.min_count == 0 {
            return bad("min_count must be at least 1".into());
        }
        Ok(())
    }

    /// First epoch index trained at the reduced SGD rate.
    pub fn lr_drop_epoch(&self) -> usize {
        (self.lr_drop_frac * self.max_epochs as f64).ceil() as usize
    }
}

// ---------------------------------------------------------------------
// data resolution
// ---------------------------------------------------------------------

pub const DATA_DIR_ENV: &str = "LIETEXT_DATA_DIR";

/// Train set, optional published test set, and parse-reject counts.
pub struct ResolvedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub train_rejects: usize,
    pub test_rejects: usize,
}

fn data_dir() -> Result<PathBuf> {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
        _ => Err(HarnessError::Config(format!(
            "{DATA_DIR_ENV} is not set; fetch the corpora listed in the fetch manifest \
             or run against the compiled-in fixtures"
        ))),
    }
}

/// Map a registry name onto its TSV files. Names with a published test
/// split resolve to a train/test pair; the rest use cross-validation.
pub fn resolve_dataset(cfg: &DataConfig, fixture: bool) -> Result<ResolvedData> {
    if fixture {
        let train = fixtures::dataset(&cfg.name)
            .ok_or_else(|| HarnessError::UnknownDataset(cfg.name.clone()))?;
        let test = fixtures::test_split(&cfg.name);
        let train_rejects = train.rejects.rejects.len();
        let test_rejects = test.as_ref().map_or(0, |t| t.rejects.rejects.len());
        return Ok(ResolvedData { train, test, train_rejects, test_rejects });
    }
    let dir = data_dir()?;
    let (train, test) = match cfg.name.as_str() {
        "mr" | "subj" | "cr" | "mpqa" => {
            let train = load_dataset(&dir.join(format!("{}.tsv", cfg.name)))?;
            (train, None)
        }
        "trec" | "sstb" => {
            let train = load_dataset(&dir.join(format!("{}.train.tsv", cfg.name)))?;
            let test =
                load_dataset_with_labels(&dir.join(format!("{}.test.tsv", cfg.name)), &train.labels)?;
            (train, Some(test))
        }
        other => return Err(HarnessError::UnknownDataset(other.to_string())),
    };
    let train_rejects = train.rejects.rejects.len();
    let test_rejects = test.as_ref().map_or(0, |t| t.rejects.rejects.len());
    Ok(ResolvedData { train, test, train_rejects, test_rejects })
}

/// Vocabulary over every sentence the run can see. Pretrained vectors are
/// task-independent, so including test tokens only fixes their init.
pub fn build_run_vocab(data: &ResolvedData, min_count: usize) -> Vocab {
    let mut all: Vec<Example> = data.train.examples.clone();
    if let Some(test) = &data.test {
        all.extend(test.examples.iter().cloned());
    }
    build_vocab(&all, min_count)
}

pub fn resolve_embeddings(
    cfg: &DataConfig,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
    fixture: bool,
) -> Result<EmbeddingMatrix> {
    match &cfg.embeddings {
        EmbeddingSource::Random => Ok(random_embeddings(vocab.len(), dim, seed)),
        EmbeddingSource::Fixture => Ok(fixtures::embeddings(vocab, dim, seed)),
        EmbeddingSource::Word2vec { path } => {
            let p = match path {
                Some(p) => PathBuf::from(p),
                None => {
                    if fixture {
                        return Ok(fixtures::embeddings(vocab, dim, seed));
                    }
                    data_dir()?.join("GoogleNews-vectors-negative300.bin")
                }
            };
            Ok(load_word2vec_binary(&p, vocab, seed)?)
        }
    }
}

// ---------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test_accuracy: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub embedding: usize,
    pub non_embedding: usize,
}

impl From<ParamCount> for ParamReport {
    fn from(c: ParamCount) -> Self {
        ParamReport {
            total: c.total,
            embedding: c.embedding,
            non_embedding: c.non_embedding(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReport {
    pub name: String,
    pub train_examples: usize,
    pub test_examples: usize,
    pub classes: usize,
    pub labels: Vec<String>,
    pub vocab: usize,
    pub embedding_hits: usize,
    pub train_rejects: usize,
    pub test_rejects: usize,
}

/// Timing only. Everything outside this block is a pure function of the
/// config and seed, which is what makes reruns comparable byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMeta {
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub precision: String,
    pub data: DataReport,
    pub parameters: ParamReport,
    pub folds: Vec<FoldReport>,
    /// Fold whose best-dev checkpoint the run keeps.
    pub checkpoint_fold: usize,
    pub test_accuracy: Option<f64>,
    pub cv_mean: Option<f64>,
    pub cv_std: Option<f64>,
    pub meta: RunMeta,
}

impl RunReport {
    /// Best-dev accuracy of the retained checkpoint's fold.
    pub fn headline_accuracy(&self) -> f64 {
        if let Some(t) = self.test_accuracy {
            return t;
        }
        if let Some(m) = self.cv_mean {
            return m;
        }
        self.folds[self.checkpoint_fold].best_dev_accuracy
    }
}

// ---------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate<R: Real>(
    model: &Model<R>,
    ds: &Dataset,
    indices: &[usize],
    vocab: &Vocab,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(HarnessError::EmptySplit { which: "evaluation" });
    }
    if vocab.len() != model.vocab_len {
        return Err(HarnessError::VocabMismatch { model: model.vocab_len, data: vocab.len() });
    }
    let c = model.n_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &ds.examples[i]).collect();
        let batch = make_batch(&refs, vocab, model.min_width())?;
        let mut tape = Tape::new();
        let mut rng = stream(0, "eval");
        let logits = model.forward(&mut tape, &batch, false, &mut rng)?;
        let vals = tape.value(logits);
        for (r, ex) in refs.iter().enumerate() {
            let row: Vec<f64> = vals[r * c..(r + 1) * c].iter().map(|&v| v.to_f64()).collect();
            let pred = argmax(&row);
            if ex.label >= c {
                return Err(TensorError::LabelOutOfRange { label: ex.label, classes: c }.into());
            }
            confusion[ex.label][pred] += 1;
            if pred == ex.label {
                correct += 1;
            }
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / indices.len() as f64,
        confusion,
    })
}

// ---------------------------------------------------------------------
// training
// ---------------------------------------------------------------------

struct FoldSpec<'a> {
    fold: usize,
    train_ds: &'a Dataset,
    train_idx: Vec<usize>,
    dev_idx: Vec<usize>,
    test: Option<(&'a Dataset, Vec<usize>)>,
}

/// Per-fold model init stays tied to the master seed but distinct across
/// folds.
fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Whether an error is the non-finite signal, at any wrapping depth.
fn is_nonfinite(e: &HarnessError) -> bool {
    use crate::lieconv::LieConvError;
    match e {
        HarnessError::Tensor(TensorError::NonFinite { .. }) => true,
        HarnessError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => true,
        HarnessError::Model(ModelError::LieConv(LieConvError::Tensor(
            TensorError::NonFinite { .. },
        ))) => true,
        _ => false,
    }
}

fn train_fold<R: Real>(
    cfg: &RunConfig,
    spec: &FoldSpec,
    vocab: &Vocab,
    emb: &EmbeddingMatrix,
) -> Result<(FoldReport, Vec<u8>)> {
    if spec.train_idx.is_empty() {
        return Err(HarnessError::EmptySplit { which: "train" });
    }
    if spec.dev_idx.is_empty() {
        return Err(HarnessError::EmptySplit { which: "dev" });
    }
    let n_classes = spec.train_ds.n_classes();
    let mut model: Model<R> = Model::build(&cfg.model, n_classes, emb, fold_seed(cfg.seed, spec.fold))?;
    let mut opt = cfg.optimizer.build::<R>();
    let batch_size = cfg.optimizer.batch();
    let initial_lr = cfg.optimizer.initial_lr();
    let drop_at = cfg.lr_drop_epoch();

    let mut epochs = Vec::new();
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_bytes: Vec<u8> = Vec::new();
    let mut since_improve = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = if cfg.optimizer.scheduled() && epoch >= drop_at {
            initial_lr * cfg.lr_drop_factor
        } else {
            initial_lr
        };
        opt.set_lr(lr);

        let order = epoch_order(spec.train_idx.len(), cfg.seed, epoch + spec.fold * cfg.max_epochs);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let refs: Vec<&Example> =
                chunk.iter().map(|&i| &spec.train_ds.examples[spec.train_idx[i]]).collect();
            let batch = make_batch(&refs, vocab, model.min_width())?;
            let mut tape = Tape::new();
            let mut rng = stream(
                cfg.seed,
                &format!("step-f{}-e{}-b{}", spec.fold, epoch, batch_idx),
            );
            let step = (|| -> Result<f64> {
                let loss = model.loss_with(&mut tape, &model.params, &batch, true, &mut rng)?;
                let lv = tape.scalar_value(loss)?.to_f64();
                let grads = tape.backward(loss)?;
                model.params.clear_grads();
                tape.accumulate_param_grads(&grads, &mut model.params)?;
                model.params.zero_grad_rows("embed", model.frozen_rows())?;
                opt.step(&mut model.params)?;
                Ok(lv)
            })();
            match step {
                Ok(lv) => loss_sum += lv * refs.len() as f64,
                Err(e) if is_nonfinite(&e) => {
                    return Err(HarnessError::Divergence { epoch, batch: batch_idx });
                }
                Err(e) => return Err(e),
            }
        }
        // a blow-up can also surface in the epoch evaluation, one step
        // after the optimizer produced the bad parameters
        let last_batch = (spec.train_idx.len() + batch_size - 1) / batch_size - 1;
        let diverged = |e: HarnessError| {
            if is_nonfinite(&e) {
                HarnessError::Divergence { epoch, batch: last_batch }
            } else {
                e
            }
        };
        let train_loss = loss_sum / spec.train_idx.len() as f64;
        let train_eval =
            evaluate(&model, spec.train_ds, &spec.train_idx, vocab).map_err(diverged)?;
        let dev_eval = evaluate(&model, spec.train_ds, &spec.dev_idx, vocab).map_err(diverged)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_accuracy: train_eval.accuracy,
            dev_accuracy: dev_eval.accuracy,
        });

        if dev_eval.accuracy > best_dev {
            best_dev = dev_eval.accuracy;
            best_epoch = epoch;
            best_bytes = checkpoint_bytes(&model);
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }

    // the retained checkpoint, not the last state, faces the test split
    let best_model: Model<R> = model_from_checkpoint_bytes(&best_bytes, "best")?;
    let (test_accuracy, confusion) = match &spec.test {
        Some((ds, idx)) => {
            let ev = evaluate(&best_model, ds, idx, vocab)?;
            (Some(ev.accuracy), Some(ev.confusion))
        }
        None => (None, None),
    };

    Ok((
        FoldReport {
            fold: spec.fold,
            epochs,
            best_dev_accuracy: best_dev,
            best_epoch,
            stopped_early,
            test_accuracy,
            confusion,
        },
        best_bytes,
    ))
}

/// Train under a config: resolves data and embeddings, runs one fold or
/// the full cross-validation, and returns the report together with the
/// retained best-dev checkpoint bytes.
pub fn run_train<R: Real>(cfg: &RunConfig, fixture: bool) -> Result<(RunReport, Vec<u8>)> {
    cfg.validate()?;
    let started = Instant::now();
    let data = resolve_dataset(&cfg.data, fixture)?;
    let vocab = build_run_vocab(&data, cfg.data.min_count);
    let emb = resolve_embeddings(&cfg.data, &vocab, cfg.model.embedding_dim, cfg.seed, fixture)?;

    let all_test: Option<(&Dataset, Vec<usize>)> = data
        .test
        .as_ref()
        .map(|t| (t, (0..t.examples.len()).collect()));

    let specs: Vec<FoldSpec> = match cfg.data.split {
        SplitSpec::Cv10 { fold } => {
            let folds: Vec<usize> = match fold {
                Some(f) => vec![f],
                None => (0..10).collect(),
            };
            folds
                .into_iter()
                .map(|f| {
                    let s = split_cv10(&data.train, f, cfg.seed)?;
                    Ok(FoldSpec {
                        fold: f,
                        train_ds: &data.train,
                        train_idx: s.train,
                        dev_idx: s.dev,
                        test: Some((&data.train, s.test)),
                    })
                })
                .collect::<Result<_>>()?
        }
        SplitSpec::Standard { dev_fraction } => {
            let (train_idx, dev_idx) = dev_holdout(&data.train, dev_fraction, cfg.seed)?;
            vec![FoldSpec {
                fold: 0,
                train_ds: &data.train,
                train_idx,
                dev_idx,
                test: all_test,
            }]
        }
    };

    let mut folds = Vec::new();
    let mut checkpoints = Vec::new();
    let mut parameters: Option<ParamReport> = None;
    for spec in &specs {
        let (report, bytes) = train_fold::<R>(cfg, spec, &vocab, &emb)?;
        if parameters.is_none() {
            let m: Model<R> = model_from_checkpoint_bytes(&bytes, "fold")?;
            parameters = Some(m.count_parameters().into());
        }
        folds.push(report);
        checkpoints.push(bytes);
    }

    // first fold wins ties so reruns pick the same checkpoint
    let mut checkpoint_fold = 0;
    for (i, f) in folds.iter().enumerate() {
        if f.best_dev_accuracy > folds[checkpoint_fold].best_dev_accuracy {
            checkpoint_fold = i;
        }
    }

    let is_cv = matches!(cfg.data.split, SplitSpec::Cv10 { fold: None });
    let (cv_mean, cv_std) = if is_cv {
        let accs: Vec<f64> = folds.iter().filter_map(|f| f.test_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        (Some(mean), Some(var.sqrt()))
    } else {
        (None, None)
    };
    let test_accuracy = if is_cv { None } else { folds[0].test_accuracy };

    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        precision: R::NAME.to_string(),
        data: DataReport {
            name: cfg.data.name.clone(),
            train_examples: data.train.examples.len(),
            test_examples: data.test.as_ref().map_or(0, |t| t.examples.len()),
            classes: data.train.n_classes(),
            labels: data.train.labels.clone(),
            vocab: vocab.len(),
            embedding_hits: emb.hit_count(),
            train_rejects: data.train_rejects,
            test_rejects: data.test_rejects,
        },
        parameters: parameters.expect("at least one fold"),
        folds,
        checkpoint_fold,
        test_accuracy,
        cv_mean,
        cv_std,
        meta: RunMeta { wall_seconds: started.elapsed().as_secs_f64() },
    };
    let checkpoint = checkpoints.swap_remove(checkpoint_fold);
    Ok((report, checkpoint))
}

// ---------------------------------------------------------------------
// symmetry probe
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pairs: usize,
    pub similarities: Vec<f64>,
    pub scores: Vec<f64>,
    /// Correlations of similarity against the negated score, so that a
    /// positive value means representations track the symmetry judgment.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// The same correlations against the raw 1-5 score, sign intact.
    pub pearson_raw: Option<f64>,
    pub spearman_raw: Option<f64>,
    /// Set when a correlation is undefined (constant similarities or
    /// scores); the similarity list is still reported.
    pub degenerate: Option<String>,
    pub meta: RunMeta,
}

fn represent_tokens<R: Real>(
    model: &Model<R>,
    vocab: &Vocab,
    tokens: &[String],
) -> Result<Vec<f64>> {
    let ex = Example { label: 0, tokens: tokens.to_vec() };
    let batch = make_batch(&[&ex], vocab, model.min_width())?;
    let mut tape = Tape::new();
    let mut rng = stream(0, "probe");
    let rep = model.represent(&mut tape, &batch, &mut rng)?;
    Ok(tape.value(rep).iter().map(|&v| v.to_f64()).collect())
}

/// Cosine similarity of each pair's two representations, correlated
/// against the human symmetry scores.
pub fn symmetry_probe<R: Real>(
    model: &Model<R>,
    vocab: &Vocab,
    pairs: &[SisPair],
) -> Result<ProbeReport> {
    if vocab.len() != model.vocab_len {
        return Err(HarnessError::VocabMismatch { model: model.vocab_len, data: vocab.len() });
    }
    if pairs.len() < 3 {
        return Err(HarnessError::TooFewPoints { n: pairs.len() });
    }
    let started = Instant::now();
    let mut similarities = Vec::with_capacity(pairs.len());
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let a = represent_tokens(model, vocab, &pair.first)?;
        let b = represent_tokens(model, vocab, &pair.second)?;
        similarities.push(cosine_similarity(&a, &b)?);
        scores.push(pair.score);
    }
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    let oriented_p = pearson(&similarities, &negated);
    let oriented_s = spearman(&similarities, &negated);
    let raw_p = pearson(&similarities, &scores);
    let raw_s = spearman(&similarities, &scores);
    let degenerate = match (&oriented_p, &oriented_s) {
        (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
        _ => None,
    };
    Ok(ProbeReport {
        pairs: pairs.len(),
        similarities,
        scores,
        pearson: oriented_p.ok(),
        spearman: oriented_s.ok(),
        pearson_raw: raw_p.ok(),
        spearman_raw: raw_s.ok(),
        degenerate,
        meta: RunMeta { wall_seconds: started.elapsed().as_secs_f64() },
    })
}

/// Probe pairs for a config: the fixture sample or the data-directory
/// file, both seeded and limited the same way.
pub fn resolve_sis_pairs(cfg: &DataConfig, seed: u64, fixture: bool) -> Result<Vec<SisPair>> {
    if fixture {
        return Ok(fixtures::sis_pairs(cfg.sis_limit, seed).0);
    }
    let path = data_dir()?.join("sis.tsv");
    Ok(load_sis_pairs(&path, cfg.sis_limit, seed)?.0)
}

// ---------------------------------------------------------------------
// representation export
// ---------------------------------------------------------------------

/// CSV of L2-normalized sentence representations, `id,label,v_0,...`.
/// The bytes are a pure function of checkpoint and dataset.
pub fn export_representations<R: Real>(
    model: &Model<R>,
    ds: &Dataset,
    vocab: &Vocab,
) -> Result<String> {
    if ds.examples.is_empty() {
        return Err(HarnessError::EmptySplit { which: "export" });
    }
    if vocab.len() != model.vocab_len {
        return Err(HarnessError::VocabMismatch { model: model.vocab_len, data: vocab.len() });
    }
    let r = model.rep_dim();
    let mut out = String::from("id,label");
    for j in 0..r {
        out.push_str(&format!(",v_{j}"));
    }
    out.push('\n');
    for (i, ex) in ds.examples.iter().enumerate() {
        let rep = represent_tokens(model, vocab, &ex.tokens)?;
        let norm: f64 = rep.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(HarnessError::ZeroNorm);
        }
        out.push_str(&format!("{i},{}", ds.labels[ex.label]));
        for v in &rep {
            out.push_str(&format!(",{}", v / norm));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Whole-file atomic replace so partial writes never survive.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source: std::io::Error| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------
// parameter control
// ---------------------------------------------------------------------

const PARITY_GRID: [f64; 3] = [1.5, 2.0, 2.5];
const PARITY_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterControlReport {
    pub lie_parameters: ParamReport,
    pub base_parameters: ParamReport,
    pub chosen_multiplier: f64,
    pub matched_parameters: ParamReport,
    /// Relative gap between the matched model's total count and the lie
    /// model's.
    pub parity_gap: f64,
    pub parity_within_tolerance: bool,
    pub grid: Vec<(f64, usize)>,
    pub lie_accuracy: f64,
    pub matched_accuracy: f64,
    pub accuracy_delta: f64,
    pub lie_report: RunReport,
    pub matched_report: RunReport,
    pub meta: RunMeta,
}

/// Channel-matched comparison: scale the plain deep model until its total
/// trainable count reaches the lie model's, then train both under the
/// same protocol. The doubling is tried first; if it misses the tolerance
/// the closest grid multiplier is reported and used.
pub fn parameter_control<R: Real>(base: &RunConfig, fixture: bool) -> Result<ParameterControlReport> {
    use crate::models::Arch;
    base.validate()?;
    if base.model.arch != Arch::Dpcnn {
        return Err(HarnessError::Config(format!(
            "parameter control starts from a dpcnn config, got {:?}",
            base.model.arch.name()
        )));
    }
    let started = Instant::now();
    let data = resolve_dataset(&base.data, fixture)?;
    let vocab = build_run_vocab(&data, base.data.min_count);
    let emb = resolve_embeddings(&base.data, &vocab, base.model.embedding_dim, base.seed, fixture)?;
    let n_classes = data.train.n_classes();

    let mut lie_model_cfg = base.model.clone();
    lie_model_cfg.arch = Arch::Dpclie;
    lie_model_cfg.channel_multiplier = 1.0;
    let lie_count: ParamCount = {
        let m: Model<R> = Model::build(&lie_model_cfg, n_classes, &emb, base.seed)?;
        m.count_parameters()
    };

    let count_at = |mult: f64| -> Result<ParamCount> {
        let mut c = base.model.clone();
        c.channel_multiplier = mult;
        let m: Model<R> = Model::build(&c, n_classes, &emb, base.seed)?;
        Ok(m.count_parameters())
    };

    let base_count = count_at(base.model.channel_multiplier)?;
    let gap = |count: ParamCount| {
        (count.total as f64 - lie_count.total as f64).abs() / lie_count.total as f64
    };

    let mut grid = Vec::new();
    for &mult in &PARITY_GRID {
        grid.push((mult, count_at(mult)?.total));
    }

    let doubled = count_at(2.0)?;
    let (chosen_multiplier, matched_count) = if gap(doubled) <= PARITY_TOLERANCE {
        (2.0, doubled)
    } else {
        let mut best = (PARITY_GRID[0], count_at(PARITY_GRID[0])?);
        for &mult in &PARITY_GRID[1..] {
            let c = count_at(mult)?;
            if gap(c) < gap(best.1) {
                best = (mult, c);
            }
        }
        best
    };
    let parity_gap = gap(matched_count);
    let parity_within_tolerance = parity_gap <= PARITY_TOLERANCE;

    let mut lie_cfg = base.clone();
    lie_cfg.model = lie_model_cfg;
    lie_cfg.checkpoint = None;
    let (lie_report, _) = run_train::<R>(&lie_cfg, fixture)?;

    let mut matched_cfg = base.clone();
    matched_cfg.model.channel_multiplier = chosen_multiplier;
    matched_cfg.checkpoint = None;
    let (matched_report, _) = run_train::<R>(&matched_cfg, fixture)?;

    let lie_accuracy = lie_report.headline_accuracy();
    let matched_accuracy = matched_report.headline_accuracy();
    Ok(ParameterControlReport {
        lie_parameters: lie_count.into(),
        base_parameters: base_count.into(),
        chosen_multiplier,
        matched_parameters: matched_count.into(),
        parity_gap,
        parity_within_tolerance,
        grid,
        lie_accuracy,
        matched_accuracy,
        accuracy_delta: lie_accuracy - matched_accuracy,
        lie_report,
        matched_report,
        meta: RunMeta { wall_seconds: started.elapsed().as_secs_f64() },
    })
}

// ---------------------------------------------------------------------
// gradient check entry point
// ---------------------------------------------------------------------

/// Tiny-model finite-difference check used by the command line and the
/// acceptance gate: d=8 embeddings, 4 feature maps, full f64.
pub fn gradcheck_model(arch: crate::models::Arch, seed: u64) -> Result<crate::ndtensor::GradCheckReport> {
    use crate::ndtensor::grad_check_params;

    let mut config = ModelConfig::new(arch);
    config.embedding_dim = 8;
    config.widths = vec![3, 4, 5];
    config.filters = 4;
    config.channels = 4;
    config.kernel_hidden = vec![6, 5];
    config.dropout = 0.0;

    let words: Vec<Example> = vec![Example {
        label: 0,
        tokens: "the quick brown fox jumps over a lazy dog near riverbank stones"
            .split_whitespace()
            .map(|s| s.to_string())
            .collect(),
    }];
    let vocab = build_vocab(&words, 1);
    let emb = random_embeddings(vocab.len(), 8, seed);
    let mut model: Model<f64> = Model::build(&config, 2, &emb, seed)?;

    // jitter to a generic point: fresh inits put several pre-activations
    // exactly on the relu kink (zero biases, the zero quadrature node),
    // where central differences measure the kink rather than the gradient
    {
        use rand::Rng;
        let mut jitter = stream(seed, "gradcheck-jitter");
        for (_, p) in model.params.iter_mut() {
            for v in p.data.iter_mut() {
                *v += jitter.gen_range(-0.05..0.05);
            }
        }
    }

    let sentences = [
        Example {
            label: 0,
            tokens: "the quick brown fox jumps over".split_whitespace().map(|s| s.to_string()).collect(),
        },
        Example {
            label: 1,
            tokens: "a lazy dog near riverbank stones".split_whitespace().map(|s| s.to_string()).collect(),
        },
    ];
    let refs: Vec<&Example> = sentences.iter().collect();
    let batch = make_batch(&refs, &vocab, model.min_width())?;

    let report = grad_check_params(&model.params, 1e-5, |tape, params| {
        let mut rng = stream(seed, "gradcheck");
        let loss = model
            .loss_with(tape, params, &batch, false, &mut rng)
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::NonFinite { op: Box::leak(other.to_string().into_boxed_str()) },
            })?;
        Ok(loss)
    })?;
    Ok(report)
}

pub fn fetch_manifest() -> &'static str {
    FETCH_MANIFEST
}
