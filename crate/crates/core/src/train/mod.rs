//! The self-supervised training loop for SimSiam and BYOL.

pub mod optim;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::{self, AugmentConfig, DataError, Dataset, Split};
use crate::eval::{self, EvalError};
use crate::nn::{ArchSpec, EncoderStack, NnError};
use crate::objective::{self, LossStrategy, ObjectiveError, PairProjections, SelectionInput};
use crate::rng::{self, Stream};
use optim::{lr_at, sgd_step, OptimizerState, Schedule};

/// Slack on the `[-1, 1]` loss bound for floating-point rounding.
pub const LOSS_BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("loss or parameters not finite at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("loss {loss} outside [-1, 1] at epoch {epoch}, step {step}")]
    LossOutOfRange {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    /// True for aborts caused by the numbers rather than the setup.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. }
                | Self::LossOutOfRange { .. }
                | Self::Eval(EvalError::DegenerateFeature(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Algorithm {
    #[default]
    SimSiam,
    Byol,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SimSiam => "simsiam",
            Self::Byol => "byol",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "simsiam" => Ok(Self::SimSiam),
            "byol" => Ok(Self::Byol),
            _ => Err(format!(
                "unknown algorithm `{s}` (expected simsiam or byol)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub strategy: LossStrategy,
    pub predictor_enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Target momentum, BYOL only.
    pub tau: f64,
    pub seed: u64,
    pub selection_input: SelectionInput,
    pub derange: bool,
    /// Caps the steps per epoch; `None` uses every full batch.
    pub steps_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
    pub arch: ArchSpec,
    /// kNN is evaluated every this many epochs and after the last one.
    pub eval_every: usize,
    pub knn_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::SimSiam,
            strategy: LossStrategy::Gsg,
            predictor_enabled: true,
            epochs: 30,
            batch_size: 64,
            lr_base: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            tau: 0.99,
            seed: 0,
            selection_input: SelectionInput::Source,
            derange: true,
            steps_per_epoch: None,
            augment: AugmentConfig::default(),
            arch: ArchSpec::default(),
            eval_every: 5,
            knn_k: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr_base.is_finite() && self.lr_base > 0.0) {
            return bad(format!(
                "lr must be finite and positive, got {}",
                self.lr_base
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.algorithm == Algorithm::Byol && !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.selection_input == SelectionInput::Target && self.algorithm != Algorithm::Byol {
            return bad("selection input `target` needs the byol algorithm".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.knn_k == 0 {
            return bad("knn_k must be positive".into());
        }
        self.augment.validate()?;
        self.arch.validate()?;
        Ok(())
    }

    fn target_momentum(&self) -> Option<f64> {
        (self.algorithm == Algorithm::Byol).then_some(self.tau)
    }
}

/// One row of `metrics.csv`: per-epoch aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    /// Collapse statistic of train-split backbone features after the epoch.
    pub collapse: f64,
    pub knn_acc: Option<f64>,
    /// How often each case was applied, summed over the epoch.
    pub cases: [usize; 4],
    pub loss_min: f64,
    pub loss_max: f64,
}

/// Observed after every optimiser step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub loss: f64,
    pub lr: f64,
    pub cases: [usize; 4],
}

/// Steps per epoch for `cfg` on `ds`.
pub fn steps_per_epoch(cfg: &TrainConfig, ds: &Dataset) -> Result<usize> {
    let natural = ds.train_indices().len() / cfg.batch_size;
    if natural == 0 {
        return Err(DataError::BatchTooLarge {
            batch: cfg.batch_size,
            train: ds.train_indices().len(),
        }
        .into());
    }
    match cfg.steps_per_epoch {
        None => Ok(natural),
        Some(s) if s <= natural => Ok(s),
        Some(s) => Err(TrainError::InvalidConfig(format!(
            "steps_per_epoch {s} exceeds the {natural} full batches of size {}",
            cfg.batch_size
        ))),
    }
}

pub fn train_run(cfg: &TrainConfig, ds: &Dataset) -> Result<(EncoderStack, Vec<MetricsRecord>)> {
    train_run_observed(cfg, ds, |_| {})
}

/// [`train_run`] with a callback after every step.
pub fn train_run_observed(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut observe: impl FnMut(&StepInfo),
) -> Result<(EncoderStack, Vec<MetricsRecord>)> {
    cfg.validate()?;
    if ds.dim() != cfg.arch.input_dim() {
        return Err(TrainError::InvalidConfig(format!(
            "data has {} features but the backbone expects {}",
            ds.dim(),
            cfg.arch.input_dim()
        )));
    }
    let mut stack = EncoderStack::init(&cfg.arch, cfg.target_momentum(), cfg.seed)?;
    stack.predictor_enabled = cfg.predictor_enabled;
    let steps = steps_per_epoch(cfg, ds)?;
    let total = cfg.epochs * steps;
    let mut state = OptimizerState::new(stack.source_params());
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let batches = data::make_paired_batches(
            ds,
            cfg.batch_size,
            &cfg.augment,
            cfg.derange,
            cfg.seed,
            epoch as u64,
        )?;
        let mut loss_sum = 0.0;
        let mut loss_min = f64::INFINITY;
        let mut loss_max = f64::NEG_INFINITY;
        let mut cases = [0usize; 4];
        let mut lr = 0.0;
        for (step, batch) in batches.take(steps).enumerate() {
            let batch = batch?;
            let global_step = epoch * steps + step;
            lr = lr_at(global_step, total, cfg.lr_base, cfg.schedule)
                .map_err(TrainError::InvalidConfig)?;

            let mut g = Graph::new();
            let bound = stack.bind(&mut g);
            let x = batch.views.into_map(|m| g.constant(m));
            let z = x.try_map(|t| stack.encode(&mut g, &bound, t, false))?;
            let p = z.try_map(|t| stack.predict(&mut g, &bound, t))?;
            let target_z = match cfg.algorithm {
                Algorithm::Byol => Some(x.try_map(|t| stack.encode(&mut g, &bound, t, true))?),
                Algorithm::SimSiam => None,
            };
            let pairs = PairProjections::split_batch(&mut g, z, p, target_z)?;
            let mut rngs: Vec<_> = (0..pairs.len())
                .map(|i| {
                    rng::stream(
                        cfg.seed,
                        Stream::Strategy,
                        &[epoch as u64, step as u64, i as u64],
                    )
                })
                .collect();
            let (loss, hist) = objective::batch_loss(
                &mut g,
                &pairs,
                cfg.strategy,
                cfg.selection_input,
                &mut rngs,
            )?;
            let value = g.scalar(loss)?;
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }
            if value.abs() > 1.0 + LOSS_BOUND_SLACK {
                return Err(TrainError::LossOutOfRange {
                    epoch: epoch + 1,
                    step: step + 1,
                    loss: value,
                });
            }
            g.backward(loss)?;
            let grads = stack.source_grads(&g, &bound)?;
            if grads.iter().any(|m| !m.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }
            sgd_step(
                &mut stack.source_params_mut(),
                &grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )
            .map_err(TrainError::InvalidConfig)?;
            if stack.source_params().iter().any(|m| !m.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }
            if stack.target.is_some() {
                stack.ema_update()?;
            }

            loss_sum += value;
            loss_min = loss_min.min(value);
            loss_max = loss_max.max(value);
            for (c, h) in cases.iter_mut().zip(hist) {
                *c += h;
            }
            observe(&StepInfo {
                epoch: epoch + 1,
                step: step + 1,
                global_step,
                loss: value,
                lr,
                cases: hist,
            });
        }

        let train_bank = eval::extract_features(&stack, ds, Split::Train)?;
        let collapse = eval::collapse_statistic(&train_bank)?;
        let knn_acc = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let test_bank = eval::extract_features(&stack, ds, Split::Test)?;
            Some(eval::knn_accuracy(
                &train_bank,
                &test_bank,
                cfg.knn_k.min(train_bank.len()),
            )?)
        } else {
            None
        };
        metrics.push(MetricsRecord {
            epoch: epoch + 1,
            loss: loss_sum / steps as f64,
            lr,
            collapse,
            knn_acc,
            cases,
            loss_min,
            loss_max,
        });
    }
    Ok((stack, metrics))
}

/// Total optimiser updates a run performs.
pub fn total_updates(cfg: &TrainConfig, ds: &Dataset) -> Result<usize> {
    Ok(cfg.epochs * steps_per_epoch(cfg, ds)?)
}
