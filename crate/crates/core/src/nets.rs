//! Multilayer perceptrons: plain dense teachers and BatchEnsemble students.
//!
//! A BatchEnsemble layer stores one shared weight matrix `θ` and, for each
//! member `m`, rank-one factors `r_m` (output side) and `s_m` (input side) plus
//! a member bias. Member `m` computes with the effective weight
//! `θ ∘ (r_m s_mᵀ)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Plain,
    BatchEnsemble { members: usize },
}

/// How the network's outputs are read as a predictive distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Outputs are logits.
    #[default]
    Softmax,
    /// Outputs are log-concentrations `S`; the Dirichlet has concentrations
    /// `exp(S) + 1` and predicts their normalized values.
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub kind: ModelKind,
}

impl ModelSpec {
    pub fn plain(input_dim: usize, num_classes: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_dim,
            num_classes,
            hidden,
            activation: Activation::Relu,
            kind: ModelKind::Plain,
        }
    }

    pub fn batch_ensemble(input_dim: usize, num_classes: usize, hidden: Vec<usize>, members: usize) -> Self {
        Self {
            kind: ModelKind::BatchEnsemble { members },
            ..Self::plain(input_dim, num_classes, hidden)
        }
    }

    /// Same architecture with a different kind.
    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidArgument("input dimension must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("need at least one non-empty hidden layer".into()));
        }
        if let ModelKind::BatchEnsemble { members } = self.kind {
            if members < 1 {
                return Err(Error::InvalidArgument("batch ensemble needs at least one member".into()));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("finite init")
}

/// Models that map inputs to a predictive distribution.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Logits whose softmax is the model's predictive distribution.
    fn predictive_logits(&self, x: &Tensor) -> Result<Tensor>;
}

/// A collection of networks evaluated member by member (teacher ensembles,
/// BatchEnsemble members).
pub trait MemberSet: Sync {
    fn member_count(&self) -> usize;

    /// Logits of member `m` on `x`, with the member's weights as constants.
    fn member_forward(&self, tape: &mut Tape, m: usize, x: Var) -> Result<Var>;

    fn member_logits(&self, m: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.member_forward(&mut tape, m, xv)?;
        Ok(tape.to_tensor(out))
    }
}

fn check_input(op: &'static str, x_shape: &[usize], input_dim: usize) -> Result<()> {
    if x_shape.len() != 2 || x_shape[1] != input_dim {
        return Err(Error::shape(op, format!("expected [B, {input_dim}] input, got {x_shape:?}")));
    }
    Ok(())
}

/// Runs `forward` over fixed row chunks (in parallel when enabled) and
/// concatenates the outputs in order.
pub(crate) fn chunked_rows<F>(x: &Tensor, forward: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync + Send,
{
    if x.rows() <= par::CHUNK_ROWS {
        return forward(x);
    }
    let parts = par::map(&par::chunks(x.rows(), par::CHUNK_ROWS), |&(s, e)| {
        forward(&x.slice_rows(s, e)?)
    });
    Tensor::vstack(&parts.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    head: OutputHead,
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| DenseLayer {
                weight: he_normal(rng, i, o),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        Ok(Self {
            spec: spec.with_kind(ModelKind::Plain),
            head: OutputHead::Softmax,
            layers,
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| DenseLayer {
                weight: Tensor::zeros(&[o, i]),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        Ok(Self {
            spec: spec.with_kind(ModelKind::Plain),
            head: OutputHead::Softmax,
            layers,
        })
    }

    pub fn from_layers(spec: &ModelSpec, layers: Vec<DenseLayer>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::shape("Mlp::from_layers", format!("{} layers for spec with {}", layers.len(), dims.len())));
        }
        for (l, (i, o)) in layers.iter().zip(&dims) {
            if l.weight.shape() != [*o, *i] || l.bias.shape() != [*o] {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {:?}/{:?} vs ({o}, {i})", l.weight.shape(), l.bias.shape()),
                ));
            }
        }
        Ok(Self {
            spec: spec.with_kind(ModelKind::Plain),
            head: OutputHead::Softmax,
            layers,
        })
    }

    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.head = head;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Parameters in binding order: `W0, b0, W1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records all parameters on the tape, in [`Mlp::params`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p) })
            .collect()
    }

    /// Raw network outputs given bound parameters.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        check_input("forward_plain", tape.shape(x), self.spec.input_dim)?;
        let n = self.layers.len();
        let mut h = x;
        for (l, pair) in params.chunks(2).enumerate() {
            let wt = tape.transpose(pair[0])?;
            let z = tape.matmul(h, wt)?;
            h = tape.add_row(z, pair[1])?;
            if l + 1 < n {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Raw outputs on `x` with the weights held constant.
    pub fn forward_plain(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.bind(tape, false);
        self.forward(tape, &params, x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input("forward_plain", x.shape(), self.spec.input_dim)?;
        chunked_rows(x, |chunk| {
            let mut tape = Tape::new();
            let xv = tape.constant(chunk);
            let out = self.forward_plain(&mut tape, xv)?;
            Ok(tape.to_tensor(out))
        })
    }
}

impl Classifier for Mlp {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn predictive_logits(&self, x: &Tensor) -> Result<Tensor> {
        let raw = self.logits(x)?;
        match self.head {
            OutputHead::Softmax => Ok(raw),
            OutputHead::Dirichlet => dirichlet_log_mean(&raw),
        }
    }
}

/// `log(normalized(exp(S) + 1))` row-wise.
pub(crate) fn dirichlet_log_mean(log_conc: &Tensor) -> Result<Tensor> {
    let k = log_conc.cols();
    let mut out = Vec::with_capacity(log_conc.numel());
    for row in log_conc.data().chunks(k) {
        let conc: Vec<f64> = row.iter().map(|s| s.exp() + 1.0).collect();
        let total: f64 = conc.iter().sum();
        out.extend(conc.iter().map(|c| (c / total).ln()));
    }
    Tensor::new(log_conc.shape().to_vec(), out)
}

impl MemberSet for [Mlp] {
    fn member_count(&self) -> usize {
        self.len()
    }

    fn member_forward(&self, tape: &mut Tape, m: usize, x: Var) -> Result<Var> {
        self.get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("teacher {m} out of range")))?
            .forward_plain(tape, x)
    }
}

/// Initial value of BatchEnsemble rank-one factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOneInit {
    /// All factors start at the ones vector; members begin identical.
    #[default]
    Ones,
    /// Independent ±1 entries per member.
    RandomSign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeDenseLayer {
    /// `[out × in]`, shared by all members.
    pub shared: Tensor,
    /// Per member, `[out]`.
    pub r: Vec<Tensor>,
    /// Per member, `[in]`.
    pub s: Vec<Tensor>,
    /// Per member, `[out]`.
    pub bias: Vec<Tensor>,
}

impl BeDenseLayer {
    /// `shared ∘ (r_m s_mᵀ)` computed element by element.
    pub fn member_weight(&self, m: usize) -> Tensor {
        let (out, inp) = (self.shared.shape()[0], self.shared.shape()[1]);
        let (r, s) = (self.r[m].data(), self.s[m].data());
        let data = (0..out * inp)
            .map(|idx| self.shared.data()[idx] * (r[idx / inp] * s[idx % inp]))
            .collect();
        Tensor::new(vec![out, inp], data).expect("finite weights")
    }
}

/// Which parameters of a BatchEnsemble a flat parameter slot belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeParamRole {
    Shared,
    RankOne { member: usize },
    Bias { member: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeMlp {
    spec: ModelSpec,
    layers: Vec<BeDenseLayer>,
}

/// Tape handles for a bound BatchEnsemble, per layer.
#[derive(Clone, Debug)]
pub struct BeBinding {
    pub shared: Vec<Var>,
    pub r: Vec<Vec<Var>>,
    pub s: Vec<Vec<Var>>,
    pub bias: Vec<Vec<Var>>,
}

impl BeBinding {
    /// Handles in [`BeMlp::params`] order.
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in 0..self.shared.len() {
            out.push(self.shared[l]);
            for m in 0..self.r[l].len() {
                out.extend([self.r[l][m], self.s[l][m], self.bias[l][m]]);
            }
        }
        out
    }
}

impl BeMlp {
    /// He-normal shared weights, zero biases, rank-one factors per `init`.
    pub fn init<R: Rng>(spec: &ModelSpec, init: RankOneInit, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ModelKind::BatchEnsemble { members } = spec.kind else {
            return Err(Error::InvalidArgument("spec is not a batch ensemble".into()));
        };
        let mut layers = Vec::new();
        for (i, o) in spec.layer_dims() {
            let shared = he_normal(rng, i, o);
            let mut factor = |n: usize| match init {
                RankOneInit::Ones => Tensor::ones(&[n]),
                RankOneInit::RandomSign => Tensor::vector(
                    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
                )
                .expect("finite"),
            };
            let mut r = Vec::new();
            let mut s = Vec::new();
            for _ in 0..members {
                r.push(factor(o));
                s.push(factor(i));
            }
            layers.push(BeDenseLayer {
                shared,
                r,
                s,
                bias: vec![Tensor::zeros(&[o]); members],
            });
        }
        Ok(Self { spec: spec.clone(), layers })
    }

    pub fn from_layers(spec: &ModelSpec, layers: Vec<BeDenseLayer>) -> Result<Self> {
        spec.validate()?;
        let ModelKind::BatchEnsemble { members } = spec.kind else {
            return Err(Error::InvalidArgument("spec is not a batch ensemble".into()));
        };
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::shape("BeMlp::from_layers", "layer count differs from spec"));
        }
        for (l, (i, o)) in layers.iter().zip(&dims) {
            let ok = l.shared.shape() == [*o, *i]
                && l.r.len() == members
                && l.s.len() == members
                && l.bias.len() == members
                && l.r.iter().all(|t| t.shape() == [*o])
                && l.s.iter().all(|t| t.shape() == [*i])
                && l.bias.iter().all(|t| t.shape() == [*o]);
            if !ok {
                return Err(Error::shape("BeMlp::from_layers", format!("layer shapes disagree with ({o}, {i}) x {members}")));
            }
        }
        Ok(Self { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn members(&self) -> usize {
        self.layers[0].r.len()
    }

    pub fn layers(&self) -> &[BeDenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [BeDenseLayer] {
        &mut self.layers
    }

    /// Per layer: `shared`, then for each member `r_m, s_m, b_m`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.shared);
            for m in 0..l.r.len() {
                out.extend([&l.r[m], &l.s[m], &l.bias[m]]);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.shared);
            for ((r, s), b) in l.r.iter_mut().zip(l.s.iter_mut()).zip(l.bias.iter_mut()) {
                out.extend([r, s, b]);
            }
        }
        out
    }

    /// Roles aligned with [`BeMlp::params`].
    pub fn param_roles(&self) -> Vec<BeParamRole> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(BeParamRole::Shared);
            for member in 0..l.r.len() {
                out.extend([
                    BeParamRole::RankOne { member },
                    BeParamRole::RankOne { member },
                    BeParamRole::Bias { member },
                ]);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BeBinding {
        let mut rec = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let mut b = BeBinding {
            shared: Vec::new(),
            r: Vec::new(),
            s: Vec::new(),
            bias: Vec::new(),
        };
        for l in &self.layers {
            b.shared.push(rec(&l.shared));
            let mut r = Vec::new();
            let mut s = Vec::new();
            let mut bias = Vec::new();
            for m in 0..l.r.len() {
                r.push(rec(&l.r[m]));
                s.push(rec(&l.s[m]));
                bias.push(rec(&l.bias[m]));
            }
            b.r.push(r);
            b.s.push(s);
            b.bias.push(bias);
        }
        b
    }

    /// Logits of member `m` given bound parameters.
    pub fn forward_member(&self, tape: &mut Tape, binding: &BeBinding, m: usize, x: Var) -> Result<Var> {
        if m >= self.members() {
            return Err(Error::InvalidArgument(format!("member {m} out of range for M = {}", self.members())));
        }
        check_input("forward_member", tape.shape(x), self.spec.input_dim)?;
        let n = self.layers.len();
        let mut h = x;
        for l in 0..n {
            let rs = tape.outer(binding.r[l][m], binding.s[l][m])?;
            let w = tape.mul(binding.shared[l], rs)?;
            let wt = tape.transpose(w)?;
            let z = tape.matmul(h, wt)?;
            h = tape.add_row(z, binding.bias[l][m])?;
            if l + 1 < n {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain network with member `m`'s effective weights.
    pub fn materialize_member(&self, m: usize) -> Result<Mlp> {
        if m >= self.members() {
            return Err(Error::InvalidArgument(format!("member {m} out of range")));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weight: l.member_weight(m),
                bias: l.bias[m].clone(),
            })
            .collect();
        Mlp::from_layers(&self.spec.with_kind(ModelKind::Plain), layers)
    }

    /// Mean of member probabilities at temperature `tau`.
    pub fn ensemble_probs(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        let mut acc: Option<Vec<f64>> = None;
        for m in 0..self.members() {
            let p = crate::autodiff::softmax_temp(&self.member_logits(m, x)?, tau)?;
            match &mut acc {
                Some(a) => a.iter_mut().zip(p.data()).for_each(|(s, v)| *s += v),
                None => acc = Some(p.into_data()),
            }
        }
        let m = self.members() as f64;
        Tensor::new(
            vec![x.rows(), self.spec.num_classes],
            acc.expect("at least one member").into_iter().map(|v| v / m).collect(),
        )
    }
}

impl MemberSet for BeMlp {
    fn member_count(&self) -> usize {
        self.members()
    }

    fn member_forward(&self, tape: &mut Tape, m: usize, x: Var) -> Result<Var> {
        if m >= self.members() {
            return Err(Error::InvalidArgument(format!("member {m} out of range for M = {}", self.members())));
        }
        let mut b = BeBinding {
            shared: Vec::new(),
            r: Vec::new(),
            s: Vec::new(),
            bias: Vec::new(),
        };
        // Only member m's factors are recorded; the other slots alias them.
        for l in &self.layers {
            b.shared.push(tape.constant(&l.shared));
            let (r, s, bias) = (tape.constant(&l.r[m]), tape.constant(&l.s[m]), tape.constant(&l.bias[m]));
            b.r.push(vec![r; m + 1]);
            b.s.push(vec![s; m + 1]);
            b.bias.push(vec![bias; m + 1]);
        }
        self.forward_member(tape, &b, m, x)
    }

    fn member_logits(&self, m: usize, x: &Tensor) -> Result<Tensor> {
        check_input("forward_member", x.shape(), self.spec.input_dim)?;
        chunked_rows(x, |chunk| {
            let mut tape = Tape::new();
            let xv = tape.constant(chunk);
            let out = self.member_forward(&mut tape, m, xv)?;
            Ok(tape.to_tensor(out))
        })
    }
}

impl Classifier for BeMlp {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Log of the mean member probability.
    fn predictive_logits(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.ensemble_probs(x, 1.0)?;
        let data = p.data().iter().map(|v| v.max(1e-300).ln()).collect();
        Tensor::new(p.shape().to_vec(), data)
    }
}

/// Collapses a BatchEnsemble into one network with weight
/// `θ ∘ (1/M Σ_m r_m s_mᵀ)` and the mean member bias.
pub fn average_rank_one(model: &BeMlp) -> Result<Mlp> {
    let m = model.members() as f64;
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let (out, inp) = (l.shared.shape()[0], l.shared.shape()[1]);
            let mut factor = vec![0.0; out * inp];
            for (r, s) in l.r.iter().zip(&l.s) {
                for i in 0..out {
                    for j in 0..inp {
                        factor[i * inp + j] += r.data()[i] * s.data()[j];
                    }
                }
            }
            let weight = l
                .shared
                .data()
                .iter()
                .zip(&factor)
                .map(|(w, f)| w * (f / m))
                .collect();
            let mut bias = vec![0.0; out];
            for b in &l.bias {
                bias.iter_mut().zip(b.data()).for_each(|(acc, v)| *acc += v);
            }
            Ok(DenseLayer {
                weight: Tensor::new(vec![out, inp], weight)?,
                bias: Tensor::vector(bias.into_iter().map(|v| v / m).collect())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(&model.spec.with_kind(ModelKind::Plain), layers)
}

/// Either kind of network, as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Plain(Mlp),
    BatchEnsemble(BeMlp),
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Plain(m) => m.spec(),
            Model::BatchEnsemble(m) => m.spec(),
        }
    }

    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            Model::Plain(m) => m,
            Model::BatchEnsemble(m) => m,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArchitectureRecord {
    input_dim: usize,
    num_classes: usize,
    hidden: Vec<usize>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format_version: u32,
    spec: ArchitectureRecord,
    kind: String,
    #[serde(rename = "M")]
    members: Option<usize>,
    #[serde(default)]
    head: OutputHead,
    tensors: BTreeMap<String, TensorRecord>,
}

fn encode(t: &Tensor) -> TensorRecord {
    TensorRecord {
        shape: t.shape().to_vec(),
        values: t.data().iter().map(|v| format!("{v:.16e}")).collect(),
    }
}

fn decode(name: &str, rec: &TensorRecord) -> Result<Tensor> {
    let values = rec
        .values
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: bad value {s:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(rec.shape.clone(), values).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
}

impl Model {
    fn to_record(&self) -> CheckpointRecord {
        let spec = self.spec();
        let mut tensors = BTreeMap::new();
        let (kind, members, head) = match self {
            Model::Plain(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    tensors.insert(format!("layer{i}.W"), encode(&l.weight));
                    tensors.insert(format!("layer{i}.b"), encode(&l.bias));
                }
                ("plain", None, m.head)
            }
            Model::BatchEnsemble(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    tensors.insert(format!("layer{i}.shared"), encode(&l.shared));
                    for k in 0..l.r.len() {
                        tensors.insert(format!("layer{i}.r{k}"), encode(&l.r[k]));
                        tensors.insert(format!("layer{i}.s{k}"), encode(&l.s[k]));
                        tensors.insert(format!("layer{i}.b{k}"), encode(&l.bias[k]));
                    }
                }
                ("batch_ensemble", Some(m.members()), OutputHead::Softmax)
            }
        };
        CheckpointRecord {
            format_version: CHECKPOINT_VERSION,
            spec: ArchitectureRecord {
                input_dim: spec.input_dim,
                num_classes: spec.num_classes,
                hidden: spec.hidden.clone(),
                activation: spec.activation,
            },
            kind: kind.to_string(),
            members,
            head,
            tensors,
        }
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_record())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let rec: CheckpointRecord = serde_json::from_str(text)?;
        if rec.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
                rec.format_version
            )));
        }
        let arch = &rec.spec;
        let kind = match (rec.kind.as_str(), rec.members) {
            ("plain", _) => ModelKind::Plain,
            ("batch_ensemble", Some(members)) => ModelKind::BatchEnsemble { members },
            (k, m) => return Err(Error::Checkpoint(format!("unknown kind {k:?} with M = {m:?}"))),
        };
        let spec = ModelSpec {
            input_dim: arch.input_dim,
            num_classes: arch.num_classes,
            hidden: arch.hidden.clone(),
            activation: arch.activation,
            kind,
        };
        spec.validate()?;
        let take = |name: String| -> Result<Tensor> {
            let t = rec
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            decode(&name, t)
        };
        let n_layers = spec.layer_dims().len();
        let model = match kind {
            ModelKind::Plain => {
                let layers = (0..n_layers)
                    .map(|i| {
                        Ok(DenseLayer {
                            weight: take(format!("layer{i}.W"))?,
                            bias: take(format!("layer{i}.b"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Model::Plain(Mlp::from_layers(&spec, layers).map_err(|e| Error::Checkpoint(e.to_string()))?.with_head(rec.head))
            }
            ModelKind::BatchEnsemble { members } => {
                let layers = (0..n_layers)
                    .map(|i| {
                        let per = |p: &str| (0..members).map(|k| take(format!("layer{i}.{p}{k}"))).collect::<Result<Vec<_>>>();
                        Ok(BeDenseLayer {
                            shared: take(format!("layer{i}.shared"))?,
                            r: per("r")?,
                            s: per("s")?,
                            bias: per("b")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Model::BatchEnsemble(BeMlp::from_layers(&spec, layers).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
        };
        let expected: usize = model.spec().layer_dims().len() * 2;
        let actual = match &model {
            Model::Plain(_) => rec.tensors.len(),
            Model::BatchEnsemble(m) => rec.tensors.len() - n_layers * (3 * m.members() - 1),
        };
        if actual != expected {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(model)
    }
}

pub fn checkpoint_save(model: &Model, path: &Path) -> Result<()> {
    let text = model.to_checkpoint_string()?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected`, also rejects architecture mismatches.
pub fn checkpoint_load(path: &Path, expected: Option<&ModelSpec>) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = Model::from_checkpoint_str(&text)?;
    if let Some(want) = expected {
        let got = model.spec();
        if got.input_dim != want.input_dim || got.num_classes != want.num_classes || got.hidden != want.hidden {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture (D={}, K={}, hidden={:?}) does not match requested (D={}, K={}, hidden={:?})",
                got.input_dim, got.num_classes, got.hidden, want.input_dim, want.num_classes, want.hidden
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn spec_be(m: usize) -> ModelSpec {
        ModelSpec::batch_ensemble(2, 3, vec![16, 8], m)
    }

    fn perturbed_be(m: usize, seed: u64) -> BeMlp {
        let mut r = rng::stream(seed, rng::INIT);
        let mut model = BeMlp::init(&spec_be(m), RankOneInit::Ones, &mut r).unwrap();
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        model
    }

    fn inputs(n: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, rng::DATA);
        Tensor::matrix(n, 2, (0..2 * n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let model = Mlp::zeros(&ModelSpec::plain(2, 3, vec![4])).unwrap();
        let out = model.logits(&inputs(5, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_input_width() {
        let model = Mlp::zeros(&ModelSpec::plain(2, 3, vec![4])).unwrap();
        let x = Tensor::zeros(&[3, 5]);
        assert!(matches!(model.logits(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::plain(0, 3, vec![4]).validate().is_err());
        assert!(ModelSpec::plain(2, 1, vec![4]).validate().is_err());
        assert!(ModelSpec::plain(2, 3, vec![]).validate().is_err());
    }

    #[test]
    fn ones_init_members_agree_with_shared_network() {
        let mut r = rng::stream(4, rng::INIT);
        let be = BeMlp::init(&spec_be(3), RankOneInit::Ones, &mut r).unwrap();
        let x = inputs(7, 2);
        let plain = average_rank_one(&be).unwrap().logits(&x).unwrap();
        for m in 0..3 {
            assert_eq!(be.member_logits(m, &x).unwrap(), be.member_logits(0, &x).unwrap());
            assert!(be.member_logits(m, &x).unwrap().max_abs_diff(&plain) < 1e-12);
        }
    }

    #[test]
    fn zero_factor_leaves_only_biases() {
        let mut be = perturbed_be(2, 8);
        let last = be.layers().len() - 1;
        for l in be.layers_mut() {
            l.r[0] = Tensor::zeros(l.r[0].shape());
        }
        let x = inputs(4, 3);
        let out = be.member_logits(0, &x).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), be.layers()[last].bias[0].data());
        }
    }

    #[test]
    fn member_forward_matches_materialized_network() {
        let be = perturbed_be(3, 5);
        let x = inputs(9, 4);
        for m in 0..3 {
            let direct = be.member_logits(m, &x).unwrap();
            let mat = be.materialize_member(m).unwrap().logits(&x).unwrap();
            assert!(direct.max_abs_diff(&mat) < 1e-12);
        }
        assert!(be.member_logits(3, &x).is_err());
    }

    #[test]
    fn averaging_matches_elementwise_loop() {
        let be = perturbed_be(3, 6);
        let avg = average_rank_one(&be).unwrap();
        for (l, dense) in be.layers().iter().zip(avg.layers()) {
            let (out, inp) = (l.shared.shape()[0], l.shared.shape()[1]);
            for i in 0..out {
                for j in 0..inp {
                    let mut acc = 0.0;
                    for m in 0..3 {
                        acc += l.r[m].data()[i] * l.s[m].data()[j];
                    }
                    let want = l.shared.data()[i * inp + j] * acc / 3.0;
                    assert!((dense.weight.data()[i * inp + j] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn identical_members_average_to_any_member() {
        let mut be = perturbed_be(3, 9);
        for l in be.layers_mut() {
            let (r, s, b) = (l.r[0].clone(), l.s[0].clone(), l.bias[0].clone());
            l.r = vec![r; 3];
            l.s = vec![s; 3];
            l.bias = vec![b; 3];
        }
        let x = inputs(6, 5);
        let avg = average_rank_one(&be).unwrap().logits(&x).unwrap();
        assert!(avg.max_abs_diff(&be.member_logits(1, &x).unwrap()) < 1e-12);
    }

    #[test]
    fn member_gradients_are_isolated() {
        let be = perturbed_be(3, 10);
        let x = inputs(5, 6);
        let mut tape = Tape::new();
        let b = be.bind(&mut tape, true);
        let xv = tape.constant(&x);
        let out = be.forward_member(&mut tape, &b, 1, xv).unwrap();
        let loss = tape.sum(out).unwrap();
        let g = tape.backward(loss).unwrap();
        for l in 0..be.layers().len() {
            for m in [0, 2] {
                assert!(g.get(b.r[l][m]).is_none());
                assert!(g.get(b.s[l][m]).is_none());
                assert!(g.get(b.bias[l][m]).is_none());
            }
            assert!(g.get(b.r[l][1]).is_some());
        }
    }

    #[test]
    fn summed_member_losses_accumulate_shared_gradient() {
        let be = perturbed_be(2, 11);
        let x = inputs(5, 7);
        let shared_grad = |members: &[usize]| {
            let mut tape = Tape::new();
            let b = be.bind(&mut tape, true);
            let xv = tape.constant(&x);
            let mut total = None;
            for &m in members {
                let out = be.forward_member(&mut tape, &b, m, xv).unwrap();
                let sq = tape.mul(out, out).unwrap();
                let l = tape.sum(sq).unwrap();
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l).unwrap(),
                });
            }
            let g = tape.backward(total.unwrap()).unwrap();
            g.get(b.shared[0]).unwrap().to_vec()
        };
        let joint = shared_grad(&[0, 1]);
        let separate: Vec<f64> = shared_grad(&[0])
            .iter()
            .zip(shared_grad(&[1]))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in joint.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let be = Model::BatchEnsemble(perturbed_be(2, 12));
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        checkpoint_save(&be, &p1).unwrap();
        let loaded = checkpoint_load(&p1, None).unwrap();
        assert_eq!(loaded, be);
        checkpoint_save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let plain = Model::Plain(average_rank_one(&perturbed_be(2, 13)).unwrap().with_head(OutputHead::Dirichlet));
        checkpoint_save(&plain, &p1).unwrap();
        assert_eq!(checkpoint_load(&p1, None).unwrap(), plain);
    }

    #[test]
    fn checkpoint_rejects_mismatch_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let model = Model::Plain(Mlp::zeros(&ModelSpec::plain(2, 3, vec![4])).unwrap());
        checkpoint_save(&model, &p).unwrap();
        let want = ModelSpec::plain(2, 4, vec![4]);
        assert!(matches!(checkpoint_load(&p, Some(&want)), Err(Error::Checkpoint(_))));

        let text = std::fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(checkpoint_load(&p, None), Err(Error::Checkpoint(_))));
        assert!(matches!(checkpoint_load(&dir.path().join("missing.json"), None), Err(Error::Io { .. })));
    }
}
