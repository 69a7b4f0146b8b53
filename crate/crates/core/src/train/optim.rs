//! SGD with momentum and L2 weight decay, plus the
//! learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Constant => "constant",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "constant" => Ok(Self::Constant),
            _ => Err(format!(
                "unknown schedule `{s}` (expected cosine or constant)"
            )),
        }
    }
}

/// Learning rate at step `t` of `total`. Cosine decays from `base` at `t = 0`
/// to zero at `t = total`.
pub fn lr_at(t: usize, total: usize, base: f64, schedule: Schedule) -> Result<f64, String> {
    if total == 0 || t > total {
        return Err(format!("step {t} outside the schedule of {total} steps"));
    }
    Ok(match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => base * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos()),
    })
}

/// One velocity buffer per parameter, zero-initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        Self {
            velocity: params
                .into_iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }
}

/// `g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v`.
pub fn sgd_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), String> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for (i, ((p, g), v)) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.velocity)
        .enumerate()
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(format!(
                "parameter {i}: shape {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
        for ((theta, grad), vel) in pd.iter_mut().zip(gd).zip(vd.iter_mut()) {
            let g = grad + weight_decay * *theta;
            *vel = momentum * *vel + g;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}
