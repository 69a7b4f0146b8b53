//! Backbone, projector and predictor MLPs, the momentum (EMA) target copy
//! used by BYOL, and text checkpoints.
//!
//! Parameters live in plain [`Matrix`] values owned by an [`EncoderStack`].
//! For every training step the stack is bound into a fresh [`Graph`]: source
//! parameters become trainable leaves, target parameters become constants, so
//! the target path can never receive gradient.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};

pub const BN_EPS: f64 = 1e-5;
pub const CHECKPOINT_HEADER: &str = "gsglab-ckpt v1";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("input width {got} does not match expected width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("stack has no target encoder (EMA update needs BYOL mode)")]
    NoTarget,
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint is missing section `{0}`")]
    MissingSection(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Layer widths of an MLP plus where batch normalisation goes.
///
/// Hidden layers are `Linear -> [BN] -> ReLU`; the output layer is
/// `Linear -> [BN]` with no activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub hidden_norm: bool,
    pub output_norm: bool,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, hidden_norm: bool, output_norm: bool) -> Self {
        Self {
            layer_dims,
            hidden_norm,
            output_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "an MLP needs at least 2 dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "layer dims must be positive, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// Shapes of the three networks that make up a Siamese encoder stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub backbone: MlpSpec,
    pub projector: MlpSpec,
    pub predictor: MlpSpec,
}

impl Default for ArchSpec {
    /// 32 -> 64 -> 64 backbone, 64 -> 64 -> 32 projector with BN on the output,
    /// and a 32 -> 16 -> 32 bottleneck predictor. At width 8 some rows have
    /// every hidden ReLU off on the first step, which with zero output biases
    /// gives an all-zero prediction.
    fn default() -> Self {
        Self {
            backbone: MlpSpec::new(vec![32, 64, 64], true, false),
            projector: MlpSpec::new(vec![64, 64, 32], true, true),
            predictor: MlpSpec::new(vec![32, 16, 32], true, false),
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.projector.validate()?;
        self.predictor.validate()?;
        if self.backbone.output_dim() != self.projector.input_dim() {
            return Err(NnError::InvalidSpec(format!(
                "backbone output {} does not feed projector input {}",
                self.backbone.output_dim(),
                self.projector.input_dim()
            )));
        }
        let dz = self.projector.output_dim();
        if self.predictor.input_dim() != dz || self.predictor.output_dim() != dz {
            return Err(NnError::InvalidSpec(format!(
                "predictor must map the projection width {dz} to itself, got {:?}",
                self.predictor.layer_dims
            )));
        }
        let dims = &self.predictor.layer_dims;
        if dims[1..dims.len() - 1].iter().any(|&h| h >= dz) {
            return Err(NnError::InvalidSpec(format!(
                "predictor hidden widths must be narrower than {dz} (bottleneck), got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn projection_dim(&self) -> usize {
        self.projector.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`, applied as `x * weight`.
    pub weight: Matrix,
    pub bias: Matrix,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, and identity batch norm (`gamma = 1`, `beta = 0`).
    pub fn init(spec: &MlpSpec, rng: &mut rng::Rng) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_layers();
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let last = l + 1 == n;
                let normed = if last {
                    spec.output_norm
                } else {
                    spec.hidden_norm
                };
                Layer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: Matrix::zeros(1, fan_out),
                    norm: normed.then(|| BatchNorm {
                        gamma: Matrix::filled(1, fan_out, 1.0),
                        beta: Matrix::zeros(1, fan_out),
                    }),
                    relu: !last,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Parameters in canonical order: per layer `weight, bias[, gamma, beta]`.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(bn) = &layer.norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(bn) = &mut layer.norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(format!("{prefix}.{i}.weight"));
            out.push(format!("{prefix}.{i}.bias"));
            if layer.norm.is_some() {
                out.push(format!("{prefix}.{i}.gamma"));
                out.push(format!("{prefix}.{i}.beta"));
            }
        }
        out
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Tensor> {
        self.params()
            .into_iter()
            .map(|m| {
                if trainable {
                    g.param(m.clone())
                } else {
                    g.constant(m.clone())
                }
            })
            .collect()
    }

    /// Forward pass using the handles produced by binding this MLP.
    pub fn forward(&self, g: &mut Graph, handles: &[Tensor], x: Tensor) -> Result<Tensor> {
        if x.cols() != self.spec.input_dim() {
            return Err(NnError::WidthMismatch {
                expected: self.spec.input_dim(),
                got: x.cols(),
            });
        }
        let mut h = x;
        let mut params = handles.iter().copied();
        let mut next = || params.next().expect("handles match the layer layout");
        for layer in &self.layers {
            let (w, b) = (next(), next());
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if layer.norm.is_some() {
                let (gamma, beta) = (next(), next());
                h = g.batchnorm(h, gamma, beta, BN_EPS)?;
            }
            if layer.relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// EMA copy of the source backbone and projector.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoder {
    pub backbone: Mlp,
    pub projector: Mlp,
    pub tau: f64,
}

/// Encoder `f` (backbone + projector), predictor `h`, and for BYOL a
/// momentum target copy of `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub backbone: Mlp,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub target: Option<TargetEncoder>,
    /// When false the predictor acts as the identity map.
    pub predictor_enabled: bool,
}

/// Graph handles for one step. Built by [`EncoderStack::bind`].
#[derive(Debug, Clone)]
pub struct BoundStack {
    backbone: Vec<Tensor>,
    projector: Vec<Tensor>,
    predictor: Vec<Tensor>,
    target: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl BoundStack {
    /// Source parameter handles, in the order of [`EncoderStack::source_params`].
    pub fn source_handles(&self) -> impl Iterator<Item = Tensor> + '_ {
        self.backbone
            .iter()
            .chain(&self.projector)
            .chain(&self.predictor)
            .copied()
    }

    pub fn target_handles(&self) -> impl Iterator<Item = Tensor> + '_ {
        self.target
            .iter()
            .flat_map(|(b, p)| b.iter().chain(p.iter()))
            .copied()
    }
}

impl EncoderStack {
    /// Deterministic initialisation. `target_momentum = Some(tau)` builds a
    /// BYOL stack whose target starts as an exact copy of the source.
    pub fn init(arch: &ArchSpec, target_momentum: Option<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if let Some(tau) = target_momentum {
            if !(0.0..=1.0).contains(&tau) {
                return Err(NnError::InvalidSpec(format!(
                    "tau must lie in [0, 1], got {tau}"
                )));
            }
        }
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let backbone = Mlp::init(&arch.backbone, &mut rng)?;
        let projector = Mlp::init(&arch.projector, &mut rng)?;
        let predictor = Mlp::init(&arch.predictor, &mut rng)?;
        let target = target_momentum.map(|tau| TargetEncoder {
            backbone: backbone.clone(),
            projector: projector.clone(),
            tau,
        });
        Ok(Self {
            backbone,
            projector,
            predictor,
            target,
            predictor_enabled: true,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            backbone: self.backbone.spec.clone(),
            projector: self.projector.spec.clone(),
            predictor: self.predictor.spec.clone(),
        }
    }

    pub fn tau(&self) -> Option<f64> {
        self.target.as_ref().map(|t| t.tau)
    }

    pub fn source_params(&self) -> Vec<&Matrix> {
        let mut out = self.backbone.params();
        out.extend(self.projector.params());
        out.extend(self.predictor.params());
        out
    }

    pub fn source_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.backbone.params_mut();
        out.extend(self.projector.params_mut());
        out.extend(self.predictor.params_mut());
        out
    }

    pub fn target_params(&self) -> Vec<&Matrix> {
        match &self.target {
            Some(t) => {
                let mut out = t.backbone.params();
                out.extend(t.projector.params());
                out
            }
            None => Vec::new(),
        }
    }

    /// All parameters with their checkpoint names, source first.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut names = self.backbone.param_names("backbone");
        names.extend(self.projector.param_names("projector"));
        names.extend(self.predictor.param_names("predictor"));
        let mut values = self.source_params();
        if let Some(t) = &self.target {
            names.extend(t.backbone.param_names("target.backbone"));
            names.extend(t.projector.param_names("target.projector"));
            values.extend(self.target_params());
        }
        names.into_iter().zip(values).collect()
    }

    /// Source parameters become trainable leaves, target parameters constants.
    pub fn bind(&self, g: &mut Graph) -> BoundStack {
        self.bind_with(g, true)
    }

    /// Binds everything as constants, for evaluation.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundStack {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundStack {
        BoundStack {
            backbone: self.backbone.bind(g, trainable),
            projector: self.projector.bind(g, trainable),
            predictor: self.predictor.bind(g, trainable),
            target: self
                .target
                .as_ref()
                .map(|t| (t.backbone.bind(g, false), t.projector.bind(g, false))),
        }
    }

    pub fn backbone_forward(&self, g: &mut Graph, bound: &BoundStack, x: Tensor) -> Result<Tensor> {
        self.backbone.forward(g, &bound.backbone, x)
    }

    /// `z = projector(backbone(x))`. With `use_target` and a target copy the
    /// constant target parameters are used; without a copy the weights are
    /// shared and the source path is used.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &BoundStack,
        x: Tensor,
        use_target: bool,
    ) -> Result<Tensor> {
        match (&self.target, &bound.target, use_target) {
            (Some(t), Some((tb, tp)), true) => {
                let h = t.backbone.forward(g, tb, x)?;
                t.projector.forward(g, tp, h)
            }
            _ => {
                let h = self.backbone.forward(g, &bound.backbone, x)?;
                self.projector.forward(g, &bound.projector, h)
            }
        }
    }

    /// `p = h(z)`, or `p = z` when the predictor is disabled.
    pub fn predict(&self, g: &mut Graph, bound: &BoundStack, z: Tensor) -> Result<Tensor> {
        if !self.predictor_enabled {
            let dz = self.predictor.spec.input_dim();
            if z.cols() != dz {
                return Err(NnError::WidthMismatch {
                    expected: dz,
                    got: z.cols(),
                });
            }
            return Ok(z);
        }
        self.predictor.forward(g, &bound.predictor, z)
    }

    /// Gradients of the source parameters after `backward`, in
    /// [`source_params`](Self::source_params) order.
    pub fn source_grads(&self, g: &Graph, bound: &BoundStack) -> Result<Vec<Matrix>> {
        bound
            .source_handles()
            .map(|t| Ok(g.grad(t)?.clone()))
            .collect()
    }

    /// `theta_t <- tau * theta_t + (1 - tau) * theta_s` for every target parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        let target = self.target.as_mut().ok_or(NnError::NoTarget)?;
        let tau = target.tau;
        let sources = self
            .backbone
            .params()
            .into_iter()
            .chain(self.projector.params());
        let targets = target
            .backbone
            .params_mut()
            .into_iter()
            .chain(target.projector.params_mut());
        for (t, s) in targets.zip(sources) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = tau * *tv + (1.0 - tau) * sv;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        for (name, m) in self.named_params() {
            writeln!(out, "{name} {} {}", m.rows(), m.cols()).unwrap();
            for row in m.iter_rows() {
                let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        if let Some(tau) = self.tau() {
            writeln!(out, "tau {}", format_f64(tau)).unwrap();
        }
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        checkpoint::parse(text)
    }
}

/// Shortest text that round-trips: 17 significant digits in scientific form.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

mod checkpoint {
    use std::collections::BTreeMap;

    use super::*;

    struct Entry {
        line: usize,
        value: Matrix,
    }

    pub(super) fn parse(text: &str) -> Result<EncoderStack> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, CHECKPOINT_HEADER)) => {}
            Some((n, other)) => {
                return Err(NnError::Parse {
                    line: n,
                    message: format!("expected header `{CHECKPOINT_HEADER}`, found `{other}`"),
                })
            }
            None => return Err(NnError::MissingSection("header".into())),
        }

        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        let mut tau = None;
        while let Some((n, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "tau" {
                if fields.len() != 2 {
                    return Err(parse_err(n, "footer must be `tau <value>`"));
                }
                tau = Some(parse_f64(n, fields[1])?);
                continue;
            }
            if tau.is_some() {
                return Err(parse_err(n, "content after the `tau` footer"));
            }
            if fields.len() != 3 {
                return Err(parse_err(
                    n,
                    format!("expected `name rows cols`, found `{line}`"),
                ));
            }
            let name = fields[0].to_string();
            let rows = parse_usize(n, fields[1])?;
            let cols = parse_usize(n, fields[2])?;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let (rn, row_line) = lines.next().ok_or_else(|| {
                    NnError::MissingSection(format!("{name} (row {r} of {rows})"))
                })?;
                let before = data.len();
                for tok in row_line.split_whitespace() {
                    data.push(parse_f64(rn, tok)?);
                }
                if data.len() - before != cols {
                    return Err(parse_err(
                        rn,
                        format!(
                            "{name}: row {r} has {} values, header says {cols}",
                            data.len() - before
                        ),
                    ));
                }
            }
            let value = Matrix::from_vec(rows, cols, data).expect("counted");
            if entries
                .insert(name.clone(), Entry { line: n, value })
                .is_some()
            {
                return Err(parse_err(n, format!("duplicate parameter `{name}`")));
            }
        }

        let backbone = take_mlp(&mut entries, "backbone")?;
        let projector = take_mlp(&mut entries, "projector")?;
        let predictor = take_mlp(&mut entries, "predictor")?;
        let has_target = entries.keys().any(|k| k.starts_with("target."));
        let target = if has_target {
            let tb = take_mlp(&mut entries, "target.backbone")?;
            let tp = take_mlp(&mut entries, "target.projector")?;
            if tb.spec != backbone.spec || tp.spec != projector.spec {
                return Err(NnError::InvalidSpec(
                    "target parameters do not match the source shapes".into(),
                ));
            }
            let tau = tau.ok_or_else(|| NnError::MissingSection("tau".into()))?;
            Some(TargetEncoder {
                backbone: tb,
                projector: tp,
                tau,
            })
        } else {
            None
        };
        if let Some((name, e)) = entries.iter().next() {
            return Err(parse_err(e.line, format!("unexpected parameter `{name}`")));
        }
        let stack = EncoderStack {
            backbone,
            projector,
            predictor,
            target,
            predictor_enabled: true,
        };
        stack.arch().validate()?;
        Ok(stack)
    }

    fn take(entries: &mut BTreeMap<String, Entry>, name: &str) -> Option<Entry> {
        entries.remove(name)
    }

    fn take_mlp(entries: &mut BTreeMap<String, Entry>, prefix: &str) -> Result<Mlp> {
        let mut layers: Vec<Layer> = Vec::new();
        let mut dims = Vec::new();
        let mut norms = Vec::new();
        for i in 0.. {
            let Some(weight) = take(entries, &format!("{prefix}.{i}.weight")) else {
                break;
            };
            let bias = take(entries, &format!("{prefix}.{i}.bias"))
                .ok_or_else(|| NnError::MissingSection(format!("{prefix}.{i}.bias")))?;
            let gamma = take(entries, &format!("{prefix}.{i}.gamma"));
            let beta = take(entries, &format!("{prefix}.{i}.beta"));
            let (fan_in, fan_out) = weight.value.shape();
            if let Some(&prev) = dims.last() {
                if prev != fan_in {
                    return Err(parse_err(
                        weight.line,
                        format!("{prefix}.{i}.weight has {fan_in} rows but the previous layer outputs {prev}"),
                    ));
                }
            } else {
                dims.push(fan_in);
            }
            dims.push(fan_out);
            check_row(&bias, &format!("{prefix}.{i}.bias"), fan_out)?;
            let norm = match (gamma, beta) {
                (Some(gamma), Some(beta)) => {
                    check_row(&gamma, &format!("{prefix}.{i}.gamma"), fan_out)?;
                    check_row(&beta, &format!("{prefix}.{i}.beta"), fan_out)?;
                    Some(BatchNorm {
                        gamma: gamma.value,
                        beta: beta.value,
                    })
                }
                (None, None) => None,
                (Some(_), None) => {
                    return Err(NnError::MissingSection(format!("{prefix}.{i}.beta")))
                }
                (None, Some(_)) => {
                    return Err(NnError::MissingSection(format!("{prefix}.{i}.gamma")))
                }
            };
            norms.push(norm.is_some());
            layers.push(Layer {
                weight: weight.value,
                bias: bias.value,
                norm,
                relu: true,
            });
        }
        let Some(last) = layers.last_mut() else {
            return Err(NnError::MissingSection(prefix.to_string()));
        };
        last.relu = false;
        let n = norms.len();
        let hidden_norm = n > 1 && norms[0];
        if norms[..n - 1].iter().any(|&b| b != hidden_norm) {
            return Err(NnError::InvalidSpec(format!(
                "{prefix}: hidden layers disagree on batch norm"
            )));
        }
        let spec = MlpSpec::new(dims, hidden_norm, norms[n - 1]);
        Ok(Mlp { spec, layers })
    }

    fn check_row(e: &Entry, name: &str, width: usize) -> Result<()> {
        if e.value.shape() != (1, width) {
            return Err(parse_err(
                e.line,
                format!(
                    "{name} has shape {:?}, expected (1, {width})",
                    e.value.shape()
                ),
            ));
        }
        Ok(())
    }

    fn parse_err(line: usize, message: impl Into<String>) -> NnError {
        NnError::Parse {
            line,
            message: message.into(),
        }
    }

    fn parse_usize(line: usize, tok: &str) -> Result<usize> {
        tok.parse()
            .map_err(|_| parse_err(line, format!("`{tok}` is not a non-negative integer")))
    }

    fn parse_f64(line: usize, tok: &str) -> Result<f64> {
        tok.parse()
            .map_err(|_| parse_err(line, format!("`{tok}` is not a number")))
    }
}
