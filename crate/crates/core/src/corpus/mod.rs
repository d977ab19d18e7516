//! Dataset loading, vocabulary, embeddings, splits, and batching.
//!
//! Datasets are tab-separated files, one example per line: `<label>\t<text>`.
//! Loading never drops lines silently: every malformed line lands in a
//! reject report with its line number and reason, and callers decide how
//! loud to be about it.

mod embed;
mod text;

pub use embed::{load_word2vec_binary, random_embeddings, read_word2vec, write_word2vec_binary, EmbeddingMatrix};
pub use text::{build_vocab, tokenize, Vocab, PAD_ID, UNK_ID};

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::stream;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {path} has no usable examples")]
    EmptyDataset { path: String },
    #[error("cross-validation fold {fold} out of range 0..{folds}")]
    BadFold { fold: usize, folds: usize },
    #[error("holdout fraction {frac} outside (0, 1)")]
    BadFraction { frac: f64 },
    #[error("word2vec file {path}: {reason}")]
    BadWord2Vec { path: String, reason: String },
    #[error("batch needs at least one example")]
    EmptyBatch,
    #[error("class {label:?} has fewer examples ({count}) than folds ({folds})")]
    ClassTooSmall {
        label: String,
        count: usize,
        folds: usize,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One tokenized, label-indexed example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// Line-level rejects from a load, with reasons. `lines` counts every
/// line read, including rejected and blank ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectReport {
    pub lines: usize,
    pub rejects: Vec<(usize, String)>,
}

impl RejectReport {
    pub fn accepted(&self) -> usize {
        self.lines - self.rejects.len()
    }
}

/// A loaded classification dataset. `labels` maps class index to class
/// name, sorted lexicographically so indices are reproducible.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
    pub rejects: RejectReport,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// Examples per class, indexed by label id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.labels.len()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Parse `<label>\t<text>` lines. Lines that lack a tab, have an empty
/// label, tokenize to nothing, or (when `fixed_labels` is given) carry an
/// unknown label are rejected with a reason.
pub fn parse_tsv<R: Read>(reader: R, fixed_labels: Option<&[String]>) -> Dataset {
    let reader = BufReader::new(reader);
    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    let mut report = RejectReport::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        report.lines += 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.rejects.push((lineno, format!("unreadable: {e}")));
                continue;
            }
        };
        if line.trim().is_empty() {
            report.rejects.push((lineno, "blank line".to_string()));
            continue;
        }
        let Some((label, body)) = line.split_once('\t') else {
            report.rejects.push((lineno, "no tab separator".to_string()));
            continue;
        };
        let label = label.trim();
        if label.is_empty() {
            report.rejects.push((lineno, "empty label".to_string()));
            continue;
        }
        let tokens = tokenize(body);
        if tokens.is_empty() {
            report
                .rejects
                .push((lineno, "text tokenizes to nothing".to_string()));
            continue;
        }
        if let Some(allowed) = fixed_labels {
            if !allowed.iter().any(|l| l == label) {
                report
                    .rejects
                    .push((lineno, format!("unknown label {label:?}")));
                continue;
            }
        }
        raw.push((label.to_string(), tokens));
    }
    let labels: Vec<String> = match fixed_labels {
        Some(l) => l.to_vec(),
        None => {
            let mut set: Vec<String> = raw.iter().map(|(l, _)| l.clone()).collect();
            set.sort();
            set.dedup();
            set
        }
    };
    let index: IndexMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let examples = raw
        .into_iter()
        .map(|(l, tokens)| Example {
            label: index[l.as_str()],
            tokens,
        })
        .collect();
    Dataset {
        examples,
        labels,
        rejects: report,
    }
}

/// Load a dataset file, deriving the label set from its contents.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_dataset_inner(path, None)
}

/// Load a dataset file against a fixed label set (a test split sharing the
/// training file's classes).
pub fn load_dataset_with_labels(path: &Path, labels: &[String]) -> Result<Dataset> {
    load_dataset_inner(path, Some(labels))
}

fn load_dataset_inner(path: &Path, labels: Option<&[String]>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ds = parse_tsv(file, labels);
    if ds.examples.is_empty() {
        return Err(CorpusError::EmptyDataset {
            path: path.display().to_string(),
        });
    }
    Ok(ds)
}

/// Write a dataset back as TSV, one `<label>\t<tokens joined by spaces>`
/// line per example. Loading the result reproduces the same examples
/// because tokenization is idempotent.
pub fn save_tsv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    for e in &ds.examples {
        out.push_str(&ds.labels[e.label]);
        out.push('\t');
        out.push_str(&e.tokens.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Index sets for one train/dev/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified 10-fold assignment: within each class, examples are shuffled
/// once under the seed and dealt round-robin into ten buckets, so every
/// fold sees near-identical class proportions. Fold `k` tests on bucket
/// `k`, tunes on bucket `(k+1) % 10`, and trains on the rest.
pub fn split_cv10(ds: &Dataset, fold: usize, seed: u64) -> Result<SplitIndices> {
    const FOLDS: usize = 10;
    if fold >= FOLDS {
        return Err(CorpusError::BadFold { fold, folds: FOLDS });
    }
    let mut rng = stream(seed, "cv10");
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); FOLDS];
    for class in 0..ds.labels.len() {
        let mut members: Vec<usize> = (0..ds.examples.len())
            .filter(|&i| ds.examples[i].label == class)
            .collect();
        if members.len() < FOLDS {
            return Err(CorpusError::ClassTooSmall {
                label: ds.labels[class].clone(),
                count: members.len(),
                folds: FOLDS,
            });
        }
        members.shuffle(&mut rng);
        for (j, idx) in members.into_iter().enumerate() {
            buckets[j % FOLDS].push(idx);
        }
    }
    let dev_fold = (fold + 1) % FOLDS;
    let mut split = SplitIndices {
        train: Vec::new(),
        dev: buckets[dev_fold].clone(),
        test: buckets[fold].clone(),
    };
    for (b, bucket) in buckets.iter().enumerate() {
        if b != fold && b != dev_fold {
            split.train.extend_from_slice(bucket);
        }
    }
    split.train.sort_unstable();
    split.dev.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Carve a stratified development holdout out of a training set: per
/// class, a seeded shuffle sends `frac` of the examples (at least one,
/// rounded to nearest) to dev and the rest to train.
pub fn dev_holdout(ds: &Dataset, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(CorpusError::BadFraction { frac });
    }
    let mut rng = stream(seed, "dev-holdout");
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for class in 0..ds.labels.len() {
        let mut members: Vec<usize> = (0..ds.examples.len())
            .filter(|&i| ds.examples[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        let k = ((members.len() as f64 * frac).round() as usize)
            .max(1)
            .min(members.len().saturating_sub(1));
        dev.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    dev.sort_unstable();
    Ok((train, dev))
}

/// One similarity-scored sentence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SisPair {
    pub first: Vec<String>,
    pub second: Vec<String>,
    pub score: f64,
}

/// Load similarity pairs from `<score>\t<sentence>\t<sentence>` lines,
/// keep only the extremes (scores exactly 1 or 5), and take a seeded
/// sample of at most `limit` pairs.
pub fn load_sis_pairs(path: &Path, limit: usize, seed: u64) -> Result<(Vec<SisPair>, RejectReport)> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_sis(file, limit, seed))
}

pub fn parse_sis<R: Read>(reader: R, limit: usize, seed: u64) -> (Vec<SisPair>, RejectReport) {
    let reader = BufReader::new(reader);
    let mut report = RejectReport::default();
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        report.lines += 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.rejects.push((lineno, format!("unreadable: {e}")));
                continue;
            }
        };
        if line.trim().is_empty() {
            report.rejects.push((lineno, "blank line".to_string()));
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            report
                .rejects
                .push((lineno, format!("expected 3 tab fields, got {}", fields.len())));
            continue;
        }
        let Ok(score) = fields[0].trim().parse::<f64>() else {
            report
                .rejects
                .push((lineno, format!("unparseable score {:?}", fields[0])));
            continue;
        };
        if score != 1.0 && score != 5.0 {
            report
                .rejects
                .push((lineno, format!("score {score} outside {{1, 5}}")));
            continue;
        }
        let first = tokenize(fields[1]);
        let second = tokenize(fields[2]);
        if first.is_empty() || second.is_empty() {
            report
                .rejects
                .push((lineno, "sentence tokenizes to nothing".to_string()));
            continue;
        }
        pairs.push(SisPair {
            first,
            second,
            score,
        });
    }
    if pairs.len() > limit {
        let mut rng = stream(seed, "sis-sample");
        pairs.shuffle(&mut rng);
        pairs.truncate(limit);
    }
    (pairs, report)
}

/// A right-padded batch of encoded examples: `ids` is row-major
/// `[len() x width]` with pad id 0 past each sentence's length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..(i + 1) * self.width]
    }
}

/// Encode and right-pad examples into one batch. `min_width` guarantees
/// room for the widest convolution window even when every sentence is
/// shorter.
pub fn make_batch(examples: &[&Example], vocab: &Vocab, min_width: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(CorpusError::EmptyBatch);
    }
    let width = examples
        .iter()
        .map(|e| e.tokens.len())
        .max()
        .unwrap()
        .max(min_width);
    let mut ids = Vec::with_capacity(examples.len() * width);
    let mut labels = Vec::with_capacity(examples.len());
    let mut lengths = Vec::with_capacity(examples.len());
    for e in examples {
        let encoded = vocab.encode(&e.tokens);
        lengths.push(encoded.len());
        labels.push(e.label);
        ids.extend_from_slice(&encoded);
        ids.extend(std::iter::repeat(PAD_ID).take(width - encoded.len()));
    }
    Ok(Batch {
        ids,
        labels,
        lengths,
        width,
    })
}

/// Deterministic epoch order: a seeded shuffle of `0..n` that also folds in
/// the epoch number, so every epoch has a fresh but reproducible order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(seed, &format!("shuffle-epoch-{epoch}"));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Sizes-only sanity summary used in reports.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct DatasetSummary {
    pub examples: usize,
    pub classes: usize,
    pub vocab: usize,
    pub rejected_lines: usize,
}

/// Where the published corpora and pretrained vectors live. The toolkit
/// never downloads anything itself; this manifest is printed for the user
/// to fetch and convert datasets by hand.
pub const FETCH_MANIFEST: &str = include_str!("fetch_manifest.json");

#[allow(dead_code)]
fn _manifest_is_valid_json() {
    // compile-time presence; parse checked in tests
}
