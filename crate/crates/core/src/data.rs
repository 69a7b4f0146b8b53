//! Synthetic labelled vectors, stochastic "view" augmentation, and the
//! shuffled pairing that turns a batch into a batch of image pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::objective::ViewSet;
use crate::rng::{self, Rng, Stream};

/// Shuffles are redrawn at most this many times while looking for a
/// permutation without fixed points.
pub const MAX_DERANGEMENT_RETRIES: usize = 100;

/// Fraction of every class that goes to the train split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    InvalidConfig(String),
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("batch size {batch} exceeds the {train} train samples")]
    BatchTooLarge { batch: usize, train: usize },
    #[error("no derangement found after {MAX_DERANGEMENT_RETRIES} shuffles")]
    DerangementFailed,
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Matrix,
    labels: Vec<usize>,
    splits: Vec<Split>,
    classes: usize,
}

impl Dataset {
    /// Checks that labels and split tags line up with the samples and that
    /// every class has at least two train samples.
    pub fn new(samples: Matrix, labels: Vec<usize>, splits: Vec<Split>) -> Result<Self> {
        if labels.len() != samples.rows() || splits.len() != samples.rows() {
            return Err(DataError::InvalidConfig(format!(
                "{} samples but {} labels and {} split tags",
                samples.rows(),
                labels.len(),
                splits.len()
            )));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut train_counts = vec![0usize; classes];
        for (&l, &s) in labels.iter().zip(&splits) {
            if s == Split::Train {
                train_counts[l] += 1;
            }
        }
        if let Some(c) = train_counts.iter().position(|&n| n < 2) {
            return Err(DataError::InvalidConfig(format!(
                "class {c} has {} train samples; at least 2 are needed",
                train_counts[c]
            )));
        }
        Ok(Self {
            samples,
            labels,
            splits,
            classes,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    /// Samples and labels of one split, in dataset order.
    pub fn split_data(&self, split: Split) -> (Matrix, Vec<usize>) {
        let idx = self.indices(split);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.samples.select_rows(&idx), labels)
    }
}

fn train_count(n: usize) -> usize {
    ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(n.min(2), n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub cluster_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 256,
            d_in: 32,
            cluster_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Gaussian clusters around class centres drawn uniformly on the sphere of
/// radius `5 * cluster_sigma`. Each class is split 80/20 into train and test.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.per_class < 2 || cfg.d_in == 0 {
        return Err(DataError::InvalidConfig(format!(
            "need classes >= 2, per_class >= 2 and d_in >= 1, got {}, {}, {}",
            cfg.classes, cfg.per_class, cfg.d_in
        )));
    }
    if !(cfg.cluster_sigma >= 0.0 && cfg.cluster_sigma.is_finite()) {
        return Err(DataError::InvalidConfig(format!(
            "cluster_sigma must be finite and non-negative, got {}",
            cfg.cluster_sigma
        )));
    }
    let mut rng = rng::stream(cfg.seed, Stream::Dataset, &[]);
    let radius = 5.0 * cfg.cluster_sigma;
    let n = cfg.classes * cfg.per_class;
    let mut samples = Matrix::zeros(n, cfg.d_in);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let n_train = train_count(cfg.per_class);
    for c in 0..cfg.classes {
        let center = loop {
            let v: Vec<f64> = (0..cfg.d_in).map(|_| rng.sample(StandardNormal)).collect();
            let norm = crate::matrix::l2_norm(&v);
            if norm > 1e-9 {
                break v.into_iter().map(|x| radius * x / norm).collect::<Vec<_>>();
            }
        };
        for k in 0..cfg.per_class {
            let row = samples.row_mut(c * cfg.per_class + k);
            for (x, m) in row.iter_mut().zip(&center) {
                let e: f64 = rng.sample(StandardNormal);
                *x = m + cfg.cluster_sigma * e;
            }
            labels.push(c);
            splits.push(if k < n_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    Dataset::new(samples, labels, splits)
}

/// Reads `samples.csv`-style data: a header row, feature columns, and an
/// integer label in the last column. Each class is shuffled with `seed` and
/// split 80/20.
pub fn load_csv(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| DataError::Csv(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let line = i + 2;
        if record.len() < 2 {
            return Err(DataError::Csv(format!(
                "line {line}: need at least one feature and a label"
            )));
        }
        let label_field = record[record.len() - 1].trim();
        let label: usize = label_field.parse().map_err(|_| {
            DataError::Csv(format!(
                "line {line}: label `{label_field}` is not a non-negative integer"
            ))
        })?;
        let features = record
            .iter()
            .take(record.len() - 1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| DataError::Csv(format!("line {line}: `{f}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != features.len() {
                return Err(DataError::Csv(format!(
                    "line {line}: {} features, expected {}",
                    features.len(),
                    first.len()
                )));
            }
        }
        rows.push(features);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(DataError::Csv("no data rows".into()));
    }
    let samples = Matrix::from_rows(&rows);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut splits = vec![Split::Test; labels.len()];
    let mut rng = rng::stream(seed, Stream::Split, &[]);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for &i in members.iter().take(train_count(members.len())) {
            splits[i] = Split::Train;
        }
    }
    Dataset::new(samples, labels, splits)
}

/// Parametric stand-in for image augmentations:
/// `y = s * (x ⊙ mask) + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_prob: 0.1,
            scale_range: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(DataError::InvalidConfig(format!(
                "mask_prob must lie in [0, 1), got {}",
                self.mask_prob
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DataError::InvalidConfig(format!(
                "scale_range needs 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// One random view of `x`. Draw order: scale, then per-coordinate mask and
/// noise.
pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = cfg.scale_range;
    let s = if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    x.iter()
        .map(|&v| {
            let kept = if cfg.mask_prob > 0.0 && rng.random::<f64>() < cfg.mask_prob {
                0.0
            } else {
                v
            };
            let mut y = s * kept;
            if cfg.noise_sigma > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                y += cfg.noise_sigma * e;
            }
            y
        })
        .collect()
}

/// `B` pairs `(x1, x2)` with their four augmented views. Row `i` of every view
/// matrix belongs to pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub indices1: Vec<usize>,
    pub indices2: Vec<usize>,
    /// `partner[i]` is the position in the batch that pair `i` was matched with.
    pub partner: Vec<usize>,
    pub views: ViewSet<Matrix>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.indices1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices1.is_empty()
    }
}

/// Draws a uniform permutation of `0..n`; with `derange`, redraws until no
/// element stays in place.
pub fn pairing_permutation(n: usize, derange: bool, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..MAX_DERANGEMENT_RETRIES {
        perm.shuffle(rng);
        if !derange || perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
    Err(DataError::DerangementFailed)
}

/// Iterator over one epoch of paired batches.
///
/// Train indices are shuffled per epoch and cut into consecutive chunks of
/// `batch_size`; a partial final chunk is dropped. Each chunk is paired with a
/// shuffle of itself. Everything is a pure function of `(seed, epoch)`.
pub struct PairedBatches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    augment: AugmentConfig,
    derange: bool,
    seed: u64,
    epoch: u64,
    next_chunk: usize,
}

impl PairedBatches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for PairedBatches<'_> {
    type Item = Result<PairedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_chunk >= self.num_batches() {
            return None;
        }
        let c = self.next_chunk;
        self.next_chunk += 1;
        let b = self.batch_size;
        let indices1 = self.order[c * b..(c + 1) * b].to_vec();
        let mut pair_rng = rng::stream(self.seed, Stream::Pairing, &[self.epoch, c as u64]);
        let partner = match pairing_permutation(b, self.derange, &mut pair_rng) {
            Ok(p) => p,
            Err(e) => return Some(Err(e)),
        };
        let indices2: Vec<usize> = partner.iter().map(|&j| indices1[j]).collect();

        let d = self.dataset.dim();
        let mut views = ViewSet {
            v11: Matrix::zeros(b, d),
            v12: Matrix::zeros(b, d),
            v21: Matrix::zeros(b, d),
            v22: Matrix::zeros(b, d),
        };
        let mut aug_rng = rng::stream(self.seed, Stream::Augment, &[self.epoch, c as u64]);
        let samples = self.dataset.samples();
        for i in 0..b {
            let (x1, x2) = (samples.row(indices1[i]), samples.row(indices2[i]));
            views
                .v11
                .row_mut(i)
                .copy_from_slice(&augment(x1, &self.augment, &mut aug_rng));
            views
                .v12
                .row_mut(i)
                .copy_from_slice(&augment(x1, &self.augment, &mut aug_rng));
            views
                .v21
                .row_mut(i)
                .copy_from_slice(&augment(x2, &self.augment, &mut aug_rng));
            views
                .v22
                .row_mut(i)
                .copy_from_slice(&augment(x2, &self.augment, &mut aug_rng));
        }
        Some(Ok(PairedBatch {
            indices1,
            indices2,
            partner,
            views,
        }))
    }
}

pub fn make_paired_batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    augment: &AugmentConfig,
    derange: bool,
    seed: u64,
    epoch: u64,
) -> Result<PairedBatches<'a>> {
    if batch_size < 2 {
        return Err(DataError::BatchTooSmall(batch_size));
    }
    augment.validate()?;
    let mut order = dataset.train_indices();
    if batch_size > order.len() {
        return Err(DataError::BatchTooLarge {
            batch: batch_size,
            train: order.len(),
        });
    }
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, &[epoch]));
    Ok(PairedBatches {
        dataset,
        order,
        batch_size,
        augment: *augment,
        derange,
        seed,
        epoch,
        next_chunk: 0,
    })
}
