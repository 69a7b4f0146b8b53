//! Central finite-difference checks for graph gradients.

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::matrix::Matrix;
use crate::nn::EncoderStack;
use crate::objective::{self, LossStrategy, PairProjections, SelectionInput, ViewSet};
use crate::rng::{self, Stream};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Gradient norms below this are compared in absolute terms. Central
/// differences carry about `1e-16 / step` of noise per entry, so a true zero
/// gradient (a bias feeding batch norm, say) reads as `~1e-11`.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Analytic and numeric gradients for each checked parameter.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Matrix>,
    pub numeric: Vec<Matrix>,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, SCALE_FLOOR)` per parameter, in Frobenius norm.
    pub fn relative_errors(&self) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| {
                let mut diff = a.clone();
                diff.axpy(-1.0, n);
                diff.frobenius_norm() / a.frobenius_norm().max(n.frobenius_norm()).max(SCALE_FLOOR)
            })
            .collect()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors().into_iter().fold(0.0, f64::max)
    }
}

/// Compares `backward` against `(f(x + h) - f(x - h)) / 2h` for every entry of
/// every parameter. `build` receives fresh parameter leaves, in the order of
/// `params`, and returns the scalar loss.
pub fn check<E, F>(params: &[Matrix], step: f64, mut build: F) -> Result<GradCheck, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Graph, &[Tensor]) -> Result<Tensor, E>,
{
    let mut g = Graph::new();
    let handles: Vec<Tensor> = params.iter().map(|m| g.param(m.clone())).collect();
    let loss = build(&mut g, &handles)?;
    g.backward(loss)?;
    let analytic = handles
        .iter()
        .map(|&t| Ok(g.grad(t)?.clone()))
        .collect::<Result<Vec<_>, AutodiffError>>()?;

    let mut eval = |values: &[Matrix]| -> Result<f64, E> {
        let mut g = Graph::new();
        let handles: Vec<Tensor> = values.iter().map(|m| g.param(m.clone())).collect();
        let loss = build(&mut g, &handles)?;
        Ok(g.scalar(loss)?)
    };

    let mut values = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Matrix::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        numeric.push(grad);
    }
    Ok(GradCheck { analytic, numeric })
}

/// Gradient check of a full batch loss through a stack's source parameters.
#[derive(Debug, Clone)]
pub struct StackCheck {
    pub check: GradCheck,
    /// Gradients from the training path (`bind` + `detach`), for comparison
    /// with `check.analytic`.
    pub training_path: Vec<Matrix>,
}

/// Checks `batch_loss` gradients for `stack` on fixed views. The numeric side
/// holds the stop-gradient projections at their unperturbed values, which is
/// the function whose derivative `detach` defines. Random draws use streams
/// keyed by `seed`.
pub fn check_stack_loss(
    stack: &EncoderStack,
    views: &ViewSet<Matrix>,
    strategy: LossStrategy,
    selection: SelectionInput,
    seed: u64,
    step: f64,
) -> Result<StackCheck, BoxError> {
    let rows = views.v11.rows();
    let rngs = || -> Vec<rng::Rng> {
        (0..rows)
            .map(|i| rng::stream(seed, Stream::Strategy, &[i as u64]))
            .collect()
    };

    let mut g = Graph::new();
    let bound = stack.bind(&mut g);
    let x = views.clone().into_map(|m| g.constant(m));
    let z = x.try_map(|t| stack.encode(&mut g, &bound, t, false))?;
    let p = z.try_map(|t| stack.predict(&mut g, &bound, t))?;
    let tz = match stack.target {
        Some(_) => Some(x.try_map(|t| stack.encode(&mut g, &bound, t, true))?),
        None => None,
    };
    let sg_values = tz.unwrap_or(z).try_map(|t| g.value(t).cloned())?;
    let pairs = PairProjections::split_batch(&mut g, z, p, tz)?;
    let (loss, _) = objective::batch_loss(&mut g, &pairs, strategy, selection, &mut rngs())?;
    g.backward(loss)?;
    let training_path = stack.source_grads(&g, &bound)?;

    let params: Vec<Matrix> = stack.source_params().into_iter().cloned().collect();
    let (nb, np) = (
        stack.backbone.params().len(),
        stack.projector.params().len(),
    );
    let check = check::<BoxError, _>(&params, step, |g, h| {
        let (hb, rest) = h.split_at(nb);
        let (hp, hq) = rest.split_at(np);
        let encode = |g: &mut Graph, x: Tensor| -> Result<Tensor, BoxError> {
            let f = stack.backbone.forward(g, hb, x)?;
            Ok(stack.projector.forward(g, hp, f)?)
        };
        let x = views.clone().into_map(|m| g.constant(m));
        let z = x.try_map(|t| encode(g, t))?;
        let p = z.try_map(|t| -> Result<Tensor, BoxError> {
            if stack.predictor_enabled {
                Ok(stack.predictor.forward(g, hq, t)?)
            } else {
                Ok(t)
            }
        })?;
        let frozen = sg_values.clone().into_map(|m| g.constant(m));
        let pairs = PairProjections::split_batch(g, z, p, Some(frozen))?;
        let (loss, _) = objective::batch_loss(g, &pairs, strategy, selection, &mut rngs())?;
        Ok(loss)
    })?;
    Ok(StackCheck {
        check,
        training_path,
    })
}
