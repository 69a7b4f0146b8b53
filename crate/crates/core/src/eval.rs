//! Representation quality: kNN accuracy, a linear probe, and a collapse
//! statistic, all computed on backbone features.

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::{Dataset, Split};
use crate::matrix::{self, Matrix};
use crate::nn::{EncoderStack, NnError};
use crate::rng::{self, Stream};
use crate::train::optim::{lr_at, sgd_step, OptimizerState, Schedule};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature bank is empty")]
    EmptyBank,
    #[error("k must be at least 1 and at most the {train} train rows, got {k}")]
    InvalidK { k: usize, train: usize },
    #[error("collapse statistic needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("feature row {0} is not finite or has zero norm")]
    DegenerateFeature(usize),
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("{0} labels for {1} feature rows")]
    LabelCount(usize, usize),
    #[error("linear probe loss became non-finite at epoch {0}")]
    NonFiniteProbe(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Backbone features with labels, plus a cached row-normalised copy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    features: Matrix,
    labels: Vec<usize>,
    normalized: Matrix,
}

impl FeatureBank {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(EvalError::LabelCount(labels.len(), features.rows()));
        }
        let mut normalized = features.clone();
        for r in 0..normalized.rows() {
            let row = normalized.row_mut(r);
            let norm = matrix::l2_norm(row);
            if !norm.is_finite() || norm <= crate::autodiff::NORM_FLOOR {
                return Err(EvalError::DegenerateFeature(r));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            features,
            labels,
            normalized,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Backbone outputs for one split of the dataset: no augmentation, no
/// projector or predictor, no gradient. Batch norm uses the statistics of the
/// whole split.
pub fn extract_features(stack: &EncoderStack, ds: &Dataset, split: Split) -> Result<FeatureBank> {
    let (x, labels) = ds.split_data(split);
    if x.rows() == 0 {
        return Err(EvalError::EmptyBank);
    }
    let mut g = Graph::new();
    let bound = stack.bind_frozen(&mut g);
    let x = g.constant(x);
    let h = stack.backbone_forward(&mut g, &bound, x)?;
    FeatureBank::new(g.value(h)?.clone(), labels)
}

/// Majority vote among the `k` most cosine-similar train rows. Vote ties go
/// to the tied class holding the nearest neighbour.
fn knn_predict(
    train: &FeatureBank,
    query: &[f64],
    k: usize,
    exclude: Option<usize>,
    classes: usize,
) -> usize {
    let mut sims: Vec<(f64, usize)> = train
        .normalized
        .iter_rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, row)| (matrix::dot(row, query), i))
        .collect();
    // Highest similarity first; equal similarities keep index order.
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; classes];
    for &(_, i) in sims.iter().take(k) {
        votes[train.labels[i]] += 1;
    }
    let best = *votes.iter().max().expect("at least one class");
    sims.iter()
        .take(k)
        .map(|&(_, i)| train.labels[i])
        .find(|&l| votes[l] == best)
        .expect("the winning class appears among the neighbours")
}

fn class_count(banks: &[&FeatureBank]) -> usize {
    banks
        .iter()
        .flat_map(|b| b.labels.iter())
        .max()
        .map_or(0, |m| m + 1)
}

/// Top-1 kNN accuracy of `test` against `train` using cosine similarity.
pub fn knn_accuracy(train: &FeatureBank, test: &FeatureBank, k: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    if train.dim() != test.dim() {
        return Err(EvalError::WidthMismatch(train.dim(), test.dim()));
    }
    if k == 0 || k > train.len() {
        return Err(EvalError::InvalidK {
            k,
            train: train.len(),
        });
    }
    let classes = class_count(&[train, test]);
    let correct = test
        .normalized
        .iter_rows()
        .zip(&test.labels)
        .filter(|(q, &l)| knn_predict(train, q, k, None, classes) == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// kNN accuracy of a bank against itself with each query's own row excluded.
pub fn knn_leave_one_out(bank: &FeatureBank, k: usize) -> Result<f64> {
    if bank.len() < 2 {
        return Err(EvalError::EmptyBank);
    }
    if k == 0 || k >= bank.len() {
        return Err(EvalError::InvalidK {
            k,
            train: bank.len() - 1,
        });
    }
    let classes = class_count(&[bank]);
    let correct = (0..bank.len())
        .filter(|&i| {
            knn_predict(bank, bank.normalized.row(i), k, Some(i), classes) == bank.labels[i]
        })
        .count();
    Ok(correct as f64 / bank.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Softmax regression on frozen raw features, trained full-batch with SGD
/// momentum and a cosine schedule (one step per epoch). Returns test top-1
/// accuracy.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    if train.dim() != test.dim() {
        return Err(EvalError::WidthMismatch(train.dim(), test.dim()));
    }
    let classes = class_count(&[train, test]);
    let d = train.dim();
    let mut rng = rng::stream(cfg.seed, Stream::Probe, &[]);
    let bound = 1.0 / (d as f64).sqrt();
    let w_data = (0..d * classes)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let mut params = [
        Matrix::from_vec(d, classes, w_data).expect("sized"),
        Matrix::zeros(1, classes),
    ];
    let mut state = OptimizerState::new(params.iter());
    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let w = g.param(params[0].clone());
        let b = g.param(params[1].clone());
        let x = g.constant(train.features.clone());
        let logits = g.matmul(x, w)?;
        let logits = g.add_row(logits, b)?;
        let loss = g.softmax_cross_entropy(logits, &train.labels)?;
        if !g.scalar(loss)?.is_finite() {
            return Err(EvalError::NonFiniteProbe(epoch));
        }
        g.backward(loss)?;
        let grads = vec![g.grad(w)?.clone(), g.grad(b)?.clone()];
        let lr = lr_at(epoch, cfg.epochs, cfg.lr, Schedule::Cosine).expect("epoch < epochs");
        let mut refs: Vec<&mut Matrix> = params.iter_mut().collect();
        sgd_step(
            &mut refs,
            &grads,
            &mut state,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )
        .expect("shapes fixed by construction");
    }
    let logits = test.features.matmul(&params[0]);
    let correct = test
        .labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let row: Vec<f64> = logits
                .row(r)
                .iter()
                .zip(params[1].data())
                .map(|(a, b)| a + b)
                .collect();
            argmax(&row) == label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean over dimensions of the per-dimension (population) standard deviation
/// of the row-normalised features. Zero exactly when every normalised row is
/// the same; about `1/sqrt(d)` for directions spread uniformly on the sphere.
pub fn collapse_statistic(bank: &FeatureBank) -> Result<f64> {
    collapse_statistic_of(&bank.normalized)
}

/// [`collapse_statistic`] for rows that are already unit-norm.
pub fn collapse_statistic_of(normalized: &Matrix) -> Result<f64> {
    let (n, d) = normalized.shape();
    if n < 2 {
        return Err(EvalError::TooFewRows(n));
    }
    let mut mean = vec![0.0; d];
    for row in normalized.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in normalized.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(var.iter().map(|s| (s / n as f64).sqrt()).sum::<f64>() / d as f64)
}
