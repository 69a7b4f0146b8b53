//! Negative cosine similarity, cross-pair projection distances and the four
//! ways of deciding which view of each image gets the predictor:
//!
//! - `symmetric`: all four predictor/stop-gradient terms, weighted 1/4.
//! - `gsg`: guided stop-gradient. The two projections (one per image) that are
//!   closest in Euclidean distance get the predictor, the other two are the
//!   stop-gradient targets.
//! - `random`: one of the four guided cases, uniformly at random.
//! - `reverse`: the complement of the guided choice.
//!
//! Case numbering follows the order of the four distances
//! `d(z11,z21)`, `d(z11,z22)`, `d(z12,z21)`, `d(z12,z22)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::matrix::{self, euclidean_distance};
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("batch_loss needs at least one pair")]
    EmptyBatch,
    #[error("got {pairs} pairs but {rngs} rng streams")]
    RngCountMismatch { pairs: usize, rngs: usize },
    #[error("selection input `target` needs target projections")]
    MissingTarget,
    #[error("pair projections have inconsistent widths")]
    WidthMismatch,
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossStrategy {
    Symmetric,
    Gsg,
    Random,
    Reverse,
}

impl LossStrategy {
    pub const ALL: [LossStrategy; 4] = [Self::Symmetric, Self::Gsg, Self::Random, Self::Reverse];

    pub fn name(self) -> &'static str {
        match self {
            Self::Symmetric => "symmetric",
            Self::Gsg => "gsg",
            Self::Random => "random",
            Self::Reverse => "reverse",
        }
    }
}

impl fmt::Display for LossStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                format!("unknown strategy `{s}` (expected symmetric, gsg, random or reverse)")
            })
    }
}

/// Which projections feed the guided distance computation. Only differs for
/// BYOL, where the target encoder produces its own projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionInput {
    #[default]
    Source,
    Target,
}

impl fmt::Display for SelectionInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Source => "source",
            Self::Target => "target",
        })
    }
}

impl FromStr for SelectionInput {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            _ => Err(format!(
                "unknown selection input `{s}` (expected source or target)"
            )),
        }
    }
}

/// The four augmented views of a pair: two of image 1, two of image 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    V11,
    V12,
    V21,
    V22,
}

/// One value per view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSet<T> {
    pub v11: T,
    pub v12: T,
    pub v21: T,
    pub v22: T,
}

impl<T> ViewSet<T> {
    pub fn into_map<U>(self, mut f: impl FnMut(T) -> U) -> ViewSet<U> {
        ViewSet {
            v11: f(self.v11),
            v12: f(self.v12),
            v21: f(self.v21),
            v22: f(self.v22),
        }
    }
}

impl<T: Copy> ViewSet<T> {
    pub fn get(&self, v: View) -> T {
        match v {
            View::V11 => self.v11,
            View::V12 => self.v12,
            View::V21 => self.v21,
            View::V22 => self.v22,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> ViewSet<U> {
        ViewSet {
            v11: f(self.v11),
            v12: f(self.v12),
            v21: f(self.v21),
            v22: f(self.v22),
        }
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ViewSet<U>, E> {
        Ok(ViewSet {
            v11: f(self.v11)?,
            v12: f(self.v12)?,
            v21: f(self.v21)?,
            v22: f(self.v22)?,
        })
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.v11, self.v12, self.v21, self.v22]
    }
}

/// A guided-selection case. The discriminant is the case id (1 to 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Case {
    /// `z11` and `z21` are closest.
    D1121 = 1,
    /// `z11` and `z22` are closest.
    D1122 = 2,
    /// `z12` and `z21` are closest.
    D1221 = 3,
    /// `z12` and `z22` are closest.
    D1222 = 4,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::D1121, Case::D1122, Case::D1221, Case::D1222];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Case> {
        Self::ALL.get(id.wrapping_sub(1)).copied()
    }

    /// The case whose predictor views are this case's stop-gradient views
    /// (1 <-> 4, 2 <-> 3).
    pub fn complement(self) -> Case {
        match self {
            Case::D1121 => Case::D1222,
            Case::D1122 => Case::D1221,
            Case::D1221 => Case::D1122,
            Case::D1222 => Case::D1121,
        }
    }

    /// `(predicted view, stop-gradient view)` for image 1 and image 2.
    pub fn terms(self) -> [(View, View); 2] {
        let first = match self {
            Case::D1121 | Case::D1122 => (View::V11, View::V12),
            Case::D1221 | Case::D1222 => (View::V12, View::V11),
        };
        let second = match self {
            Case::D1121 | Case::D1221 => (View::V21, View::V22),
            Case::D1122 | Case::D1222 => (View::V22, View::V21),
        };
        [first, second]
    }
}

/// Result of the guided distance check for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseSelection {
    pub case: Case,
    pub min_distance: f64,
    /// `[d11_21, d11_22, d12_21, d12_22]`.
    pub distances: [f64; 4],
}

impl CaseSelection {
    /// Picks the smallest distance; ties go to the lowest case id.
    pub fn from_distances(distances: [f64; 4]) -> Self {
        let mut best = 0;
        for i in 1..4 {
            if distances[i] < distances[best] {
                best = i;
            }
        }
        Self {
            case: Case::ALL[best],
            min_distance: distances[best],
            distances,
        }
    }

    /// Distances between every projection of image 1 and every projection of image 2.
    pub fn from_rows(z11: &[f64], z12: &[f64], z21: &[f64], z22: &[f64]) -> Self {
        Self::from_distances([
            euclidean_distance(z11, z21),
            euclidean_distance(z11, z22),
            euclidean_distance(z12, z21),
            euclidean_distance(z12, z22),
        ])
    }
}

/// Projections and predictions of the four views of one pair, each a `1 x d` row.
///
/// `z` are raw encoder outputs. For BYOL, `target_z` holds the momentum
/// encoder's projections, which replace `z` on the stop-gradient side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairProjections {
    pub z: ViewSet<Tensor>,
    pub p: ViewSet<Tensor>,
    pub target_z: Option<ViewSet<Tensor>>,
}

impl PairProjections {
    /// Splits batched `B x d` projections into `B` per-pair row sets.
    pub fn split_batch(
        g: &mut Graph,
        z: ViewSet<Tensor>,
        p: ViewSet<Tensor>,
        target_z: Option<ViewSet<Tensor>>,
    ) -> Result<Vec<PairProjections>> {
        let rows = z.v11.rows();
        let all_rows = z
            .to_array()
            .into_iter()
            .chain(p.to_array())
            .chain(target_z.iter().flat_map(|t| t.to_array()));
        if all_rows.clone().any(|t| t.rows() != rows) {
            return Err(ObjectiveError::WidthMismatch);
        }
        (0..rows)
            .map(|i| {
                Ok(PairProjections {
                    z: z.try_map(|t| g.row(t, i))?,
                    p: p.try_map(|t| g.row(t, i))?,
                    target_z: target_z.map(|tz| tz.try_map(|t| g.row(t, i))).transpose()?,
                })
            })
            .collect()
    }

    fn check_widths(&self) -> Result<()> {
        let width = self.z.v11.shape();
        let mut all = self.z.to_array().into_iter().chain(self.p.to_array());
        let ok = all.all(|t| t.shape() == width)
            && self
                .target_z
                .is_none_or(|tz| tz.to_array().iter().all(|t| t.shape() == width));
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::WidthMismatch)
        }
    }

    fn stop_gradient_source(&self) -> ViewSet<Tensor> {
        self.target_z.unwrap_or(self.z)
    }
}

/// `D(p, z) = -(p / |p|) . (z / |z|)`, row-wise. Returns `m x 1` for `m x d`
/// inputs. Stop-gradient on `z` is the caller's choice.
pub fn cosine_dissimilarity(g: &mut Graph, p: Tensor, z: Tensor) -> Result<Tensor> {
    let pn = g.l2_normalize(p)?;
    let zn = g.l2_normalize(z)?;
    let dot = g.row_dot(pn, zn)?;
    Ok(g.scale(dot, -1.0)?)
}

/// Plain-value version of [`cosine_dissimilarity`] for two vectors.
pub fn cosine_dissimilarity_value(p: &[f64], z: &[f64]) -> Result<f64> {
    let (np, nz) = (matrix::l2_norm(p), matrix::l2_norm(z));
    for (row, norm) in [(0, np), (1, nz)] {
        if norm.is_nan() || norm <= crate::autodiff::NORM_FLOOR {
            return Err(AutodiffError::NearZeroNorm { row, norm }.into());
        }
    }
    Ok(-matrix::dot(p, z) / (np * nz))
}

/// The guided case for a pair, computed from projection values only; nothing
/// here enters the graph.
pub fn pair_distances(
    g: &Graph,
    pp: &PairProjections,
    selection: SelectionInput,
) -> Result<CaseSelection> {
    pp.check_widths()?;
    let zs = match selection {
        SelectionInput::Source => pp.z,
        SelectionInput::Target => pp.target_z.ok_or(ObjectiveError::MissingTarget)?,
    };
    let rows = zs.try_map(|t| g.value(t))?;
    Ok(CaseSelection::from_rows(
        rows.v11.data(),
        rows.v12.data(),
        rows.v21.data(),
        rows.v22.data(),
    ))
}

fn term(g: &mut Graph, pp: &PairProjections, predicted: View, target: View) -> Result<Tensor> {
    let z = g.detach(pp.stop_gradient_source().get(target))?;
    cosine_dissimilarity(g, pp.p.get(predicted), z)
}

/// Loss of one guided case: `1/2 [D(p_a, sg z_a') + D(p_b, sg z_b')]`.
pub fn case_loss(g: &mut Graph, pp: &PairProjections, case: Case) -> Result<Tensor> {
    let [(pa, za), (pb, zb)] = case.terms();
    let a = term(g, pp, pa, za)?;
    let b = term(g, pp, pb, zb)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, 0.5)?)
}

/// Loss of one pair under `strategy`, plus the case that was applied (none for
/// symmetric). `rng` is only drawn from by the random strategy.
pub fn strategy_loss(
    g: &mut Graph,
    pp: &PairProjections,
    strategy: LossStrategy,
    selection: SelectionInput,
    rng: &mut Rng,
) -> Result<(Tensor, Option<Case>)> {
    pp.check_widths()?;
    let case = match strategy {
        LossStrategy::Symmetric => {
            let pairs = [
                (View::V11, View::V12),
                (View::V12, View::V11),
                (View::V21, View::V22),
                (View::V22, View::V21),
            ];
            let mut total = None;
            for (pv, zv) in pairs {
                let t = term(g, pp, pv, zv)?;
                total = Some(match total {
                    None => t,
                    Some(acc) => g.add(acc, t)?,
                });
            }
            let loss = g.scale(total.expect("four terms"), 0.25)?;
            return Ok((loss, None));
        }
        LossStrategy::Gsg => pair_distances(g, pp, selection)?.case,
        LossStrategy::Reverse => pair_distances(g, pp, selection)?.case.complement(),
        LossStrategy::Random => Case::ALL[rng.random_range(0..4)],
    };
    Ok((case_loss(g, pp, case)?, Some(case)))
}

/// Mean loss over pairs and the histogram of applied cases (index 0 is case 1).
/// `rngs[i]` is the stream owned by `pairs[i]`.
pub fn batch_loss(
    g: &mut Graph,
    pairs: &[PairProjections],
    strategy: LossStrategy,
    selection: SelectionInput,
    rngs: &mut [Rng],
) -> Result<(Tensor, [usize; 4])> {
    if pairs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if rngs.len() != pairs.len() {
        return Err(ObjectiveError::RngCountMismatch {
            pairs: pairs.len(),
            rngs: rngs.len(),
        });
    }
    let mut hist = [0usize; 4];
    let mut losses = Vec::with_capacity(pairs.len());
    for (pp, rng) in pairs.iter().zip(rngs.iter_mut()) {
        let (loss, case) = strategy_loss(g, pp, strategy, selection, rng)?;
        if let Some(c) = case {
            hist[c.id() - 1] += 1;
        }
        losses.push(loss);
    }
    Ok((g.mean_scalars(&losses)?, hist))
}
