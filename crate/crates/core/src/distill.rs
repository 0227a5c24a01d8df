//! Distillation objectives and training loops.
//!
//! * KD: a plain student matches the mean teacher distribution.
//! * AE-KD: per-sample teacher weights from a box-constrained least-squares
//!   problem replace the uniform mean.
//! * Proxy-EnD²: a Dirichlet-headed student matches a proxy Dirichlet built
//!   from teacher probabilities, by reverse KL.
//! * BE (one-to-one): member `m` of a BatchEnsemble student matches teacher `m`.
//! * LatentBE: BE from all-ones rank-one factors with a prior pulling the
//!   factors toward one, optional input perturbations, and a final collapse
//!   of the members into a single network.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{digamma, lgamma, softmax_temp, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{average_rank_one, BeMlp, BeParamRole, Mlp, ModelKind, ModelSpec, OutputHead, RankOneInit};
use crate::optim::{epoch_batches, lr_at, OptimConfig, Sgd};
use crate::perturb::{default_gamma, perturb_batch, PerturbRngs, PerturbationKind};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kd,
    Aekd,
    ProxyEnd2,
    Be,
    Latentbe,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Kd, Method::Aekd, Method::ProxyEnd2, Method::Be, Method::Latentbe];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kd => "kd",
            Method::Aekd => "aekd",
            Method::ProxyEnd2 => "proxy_end2",
            Method::Be => "be",
            Method::Latentbe => "latentbe",
        }
    }

    pub fn has_be_student(self) -> bool {
        matches!(self, Method::Be | Method::Latentbe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Strength of the pull of rank-one factors toward the ones vector.
    pub lambda: f64,
    /// Perturbation step size; derived from the training inputs when unset.
    pub gamma: Option<f64>,
    pub perturbation: PerturbationKind,
    /// Student member count; must equal the teacher count for BE students.
    pub members: usize,
    /// Initial rank-one factors of a plain BE student.
    pub rank_one_init: RankOneInit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            alpha: 1.0,
            lambda: 1e-3,
            gamma: None,
            perturbation: PerturbationKind::None,
            members: 2,
            rank_one_init: RankOneInit::RandomSign,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {g}")));
            }
        }
        if self.members < 1 {
            return Err(Error::InvalidArgument("members must be >= 1".into()));
        }
        Ok(())
    }

    /// Temperature inside the perturbation objective: ODS follows `p(x; τ)`,
    /// while the pair-diversity estimators compare plain predictive
    /// distributions.
    pub fn perturbation_tau(&self) -> f64 {
        match self.perturbation {
            PerturbationKind::Tdiv | PerturbationKind::TdivSdiv => 1.0,
            _ => self.tau,
        }
    }

    /// Configured step size, or `0.05 · √D · σ̄` of `data`.
    pub fn gamma_for(&self, data: &Dataset) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(data.dim(), data.mean_std()))
    }
}

/// Mean over the batch of `H[targets, softmax(logits / τ)]`.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor, tau: f64) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(Error::shape(
            "soft_cross_entropy",
            format!("logits {:?} vs targets {:?}", tape.shape(logits), targets.shape()),
        ));
    }
    let rows = targets.rows() as f64;
    let logp = tape.log_softmax(logits, tau)?;
    let t = tape.constant(targets);
    let prod = tape.mul(t, logp)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / rows)
}

/// `(1−α)·onehot + α·τ²·Σ_m weights[b][m] p_m` row by row; because cross-entropy
/// is linear in its target this single target reproduces the weighted sum
/// of per-teacher cross-entropies.
fn mixed_target(onehot: &Tensor, teacher_probs: &[Tensor], weights: Option<&[Vec<f64>]>, tau: f64, alpha: f64) -> Result<Tensor> {
    let m = teacher_probs.len();
    let k = onehot.cols();
    let mut out = Vec::with_capacity(onehot.numel());
    for b in 0..onehot.rows() {
        for c in 0..k {
            let mut mix = 0.0;
            for (t, p) in teacher_probs.iter().enumerate() {
                let w = weights.map_or(1.0 / m as f64, |w| w[b][t]);
                mix += w * p.row(b)[c];
            }
            out.push((1.0 - alpha) * onehot.row(b)[c] + alpha * tau * tau * mix);
        }
    }
    Tensor::new(onehot.shape().to_vec(), out)
}

/// `(1−α)·H[y, p_S(τ)] + α·τ²·(1/M)·Σ_m H[p_{T_m}(τ), p_S(τ)]`, averaged over
/// the batch. `teacher_probs` are temperature-`τ` teacher distributions and
/// act as constants.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher_probs: &[Tensor], onehot: &Tensor, tau: f64, alpha: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::domain("kd_loss", format!("temperature must be > 0, got {tau}")));
    }
    if teacher_probs.is_empty() {
        return Err(Error::InvalidArgument("kd_loss needs at least one teacher".into()));
    }
    let target = mixed_target(onehot, teacher_probs, None, tau, alpha)?;
    soft_cross_entropy(tape, student_logits, &target, tau)
}

// ---------------------------------------------------------------- AE-KD

fn aekd_objective(teacher_probs: &[&[f64]], student: &[f64], w: &[f64]) -> f64 {
    student
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mix: f64 = teacher_probs.iter().zip(w).map(|(p, wm)| wm * p[k]).sum();
            (s - mix).powi(2)
        })
        .sum::<f64>()
        * 0.5
}

/// Euclidean projection onto `{ω : Σω = 1, 0 ≤ ω ≤ c}`.
fn project_capped_simplex(y: &[f64], c: f64) -> Vec<f64> {
    let total = |nu: f64| y.iter().map(|v| (v - nu).clamp(0.0, c)).sum::<f64>();
    let mut lo = y.iter().copied().fold(f64::INFINITY, f64::min) - c - 1.0;
    let mut hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    y.iter().map(|v| (v - nu).clamp(0.0, c)).collect()
}

fn gram(teacher_probs: &[&[f64]], student: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let m = teacher_probs.len();
    let q = DMatrix::from_fn(m, m, |i, j| teacher_probs[i].iter().zip(teacher_probs[j]).map(|(a, b)| a * b).sum());
    let b = DVector::from_fn(m, |i, _| teacher_probs[i].iter().zip(student).map(|(a, s)| a * s).sum());
    (q, b)
}

fn aekd_projected_gradient(teacher_probs: &[&[f64]], student: &[f64], c: f64) -> Vec<f64> {
    let m = teacher_probs.len();
    let (q, b) = gram(teacher_probs, student);
    let step = 1.0 / (q.trace() + 1e-12);
    let mut w = vec![1.0 / m as f64; m];
    for _ in 0..100_000 {
        let wv = DVector::from_column_slice(&w);
        let g = &q * &wv - &b;
        let y: Vec<f64> = w.iter().zip(g.iter()).map(|(a, gi)| a - step * gi).collect();
        let next = project_capped_simplex(&y, c);
        let change = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if change < 1e-13 {
            break;
        }
    }
    w
}

/// Candidate minimizers over every face of the box, solved from the KKT system.
fn aekd_active_sets(teacher_probs: &[&[f64]], student: &[f64], c: f64) -> Option<Vec<f64>> {
    let m = teacher_probs.len();
    let (q, b) = gram(teacher_probs, student);
    let tol = 1e-12;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        let mut state = Vec::with_capacity(m);
        let mut rest = code;
        for _ in 0..m {
            state.push(rest % 3);
            rest /= 3;
        }
        let mut w = vec![0.0; m];
        let free: Vec<usize> = (0..m).filter(|&i| state[i] == 2).collect();
        for i in 0..m {
            if state[i] == 1 {
                w[i] = c;
            }
        }
        let fixed_sum: f64 = w.iter().sum();
        if free.is_empty() {
            if (fixed_sum - 1.0).abs() > tol {
                continue;
            }
        } else {
            let f = free.len();
            let mut a = DMatrix::zeros(f + 1, f + 1);
            let mut rhs = DVector::zeros(f + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = q[(i, j)];
                }
                a[(r, f)] = 1.0;
                a[(f, r)] = 1.0;
                rhs[r] = b[i] - (0..m).filter(|j| state[*j] != 2).map(|j| q[(i, j)] * w[j]).sum::<f64>();
            }
            rhs[f] = 1.0 - fixed_sum;
            let Ok(pinv) = a.clone().pseudo_inverse(1e-12) else { continue };
            let sol = &pinv * &rhs;
            if (&a * &sol - &rhs).amax() > 1e-9 {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                w[i] = sol[r];
            }
            if free.iter().any(|&i| w[i] < -tol || w[i] > c + tol) {
                continue;
            }
            for &i in &free {
                w[i] = w[i].clamp(0.0, c);
            }
        }
        let obj = aekd_objective(teacher_probs, student, &w);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, w));
        }
    }
    best.map(|(_, w)| w)
}

/// Teacher weights `ω` minimizing `(1/2τ²)‖p_S − Σ_m ω_m p_{T_m}‖²` subject to
/// `Σω = 1` and `0 ≤ ω_m ≤ c`. The scale `1/τ²` does not move the minimizer.
pub fn aekd_weights(teacher_probs: &[&[f64]], student_probs: &[f64], c: f64) -> Result<Vec<f64>> {
    let m = teacher_probs.len();
    if m == 0 {
        return Err(Error::InvalidArgument("AE-KD needs at least one teacher".into()));
    }
    if teacher_probs.iter().any(|p| p.len() != student_probs.len()) {
        return Err(Error::shape("aekd_weights", "teacher and student class counts differ"));
    }
    let uniform = 1.0 / m as f64;
    if !(c <= 1.0 + 1e-12) || c < uniform - 1e-12 {
        return Err(Error::InvalidArgument(format!("AE-KD tolerance C = {c} outside [1/M, 1] for M = {m}")));
    }
    if c * m as f64 <= 1.0 + 1e-12 {
        return Ok(vec![uniform; m]);
    }
    let w = if m <= 3 {
        aekd_active_sets(teacher_probs, student_probs, c)
    } else {
        None
    };
    Ok(w.unwrap_or_else(|| aekd_projected_gradient(teacher_probs, student_probs, c)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AekdConfig {
    pub c: f64,
}

// ------------------------------------------------------------ Proxy-EnD²

/// Per-sample concentration parameters, already shifted by one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyDirichlet {
    /// `[B × K]`, all entries > 1.
    pub beta: Tensor,
}

/// Unshifted `β_k = p̄_k · ((K−1)/2) / Σ_j p̄_j (ln p̄_j − mean_m ln p_{m,j})`
/// for one input. With `floor`, small denominators are raised to it instead
/// of failing.
pub fn proxy_beta(teacher_rows: &[&[f64]], floor: Option<f64>) -> Result<Vec<f64>> {
    let m = teacher_rows.len();
    if m < 2 {
        return Err(Error::InvalidArgument("proxy Dirichlet needs at least two teachers".into()));
    }
    let k = teacher_rows[0].len();
    let mean: Vec<f64> = (0..k)
        .map(|j| teacher_rows.iter().map(|p| p[j]).sum::<f64>() / m as f64)
        .collect();
    let ln = |p: f64| p.max(f64::MIN_POSITIVE).ln();
    let mut denom = 0.0;
    for j in 0..k {
        if mean[j] > 0.0 {
            let mean_log = teacher_rows.iter().map(|p| ln(p[j])).sum::<f64>() / m as f64;
            denom += mean[j] * (ln(mean[j]) - mean_log);
        }
    }
    let denom = match floor {
        Some(f) => denom.max(f),
        None if denom <= 1e-12 => {
            return Err(Error::DegenerateEnsemble(format!(
                "teacher predictions are numerically identical (denominator {denom:.3e})"
            )))
        }
        None => denom,
    };
    let scale = (k as f64 - 1.0) / 2.0 / denom;
    Ok(mean.iter().map(|p| p * scale).collect())
}

fn proxy_target_with(teacher_probs: &[Tensor], floor: Option<f64>) -> Result<ProxyDirichlet> {
    let first = teacher_probs
        .first()
        .ok_or_else(|| Error::InvalidArgument("proxy Dirichlet needs teachers".into()))?;
    let mut beta = Vec::with_capacity(first.numel());
    for b in 0..first.rows() {
        let rows: Vec<&[f64]> = teacher_probs.iter().map(|p| p.row(b)).collect();
        beta.extend(proxy_beta(&rows, floor)?.into_iter().map(|v| v + 1.0));
    }
    Ok(ProxyDirichlet {
        beta: Tensor::new(first.shape().to_vec(), beta)?,
    })
}

/// Shifted proxy Dirichlet for each row of the per-teacher probability matrices.
pub fn proxy_dirichlet_target(teacher_probs: &[Tensor]) -> Result<ProxyDirichlet> {
    proxy_target_with(teacher_probs, None)
}

/// Denominator floor used while training, where near-unanimous teachers are common.
pub const PROXY_TRAIN_FLOOR: f64 = 1e-8;

/// `KL(Dir(α) ‖ Dir(β))`.
pub fn dirichlet_kl(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    let a0: f64 = alpha.iter().sum();
    let b0: f64 = beta.iter().sum();
    let psi_a0 = digamma(a0)?;
    let mut kl = lgamma(a0)? - lgamma(b0)?;
    for (&a, &b) in alpha.iter().zip(beta) {
        kl += lgamma(b)? - lgamma(a)? + (a - b) * (digamma(a)? - psi_a0);
    }
    Ok(kl)
}

/// Batch mean of `KL(Dir(exp(S)+1) ‖ Dir(β)) / Σ_k β_k`.
pub fn proxy_end2_loss(tape: &mut Tape, student_logits: Var, target: &ProxyDirichlet) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if shape != target.beta.shape() {
        return Err(Error::shape("proxy_end2_loss", format!("logits {shape:?} vs target {:?}", target.beta.shape())));
    }
    let (rows, k) = (shape[0], shape[1]);
    let mut const_terms = Vec::with_capacity(rows);
    let mut inv_b0 = Vec::with_capacity(rows);
    for b in 0..rows {
        let beta = target.beta.row(b);
        let b0: f64 = beta.iter().sum();
        let mut c = -lgamma(b0)?;
        for &v in beta {
            c += lgamma(v)?;
        }
        const_terms.push(c);
        inv_b0.push(1.0 / b0);
    }
    let e = tape.exp(student_logits)?;
    let alpha = tape.add_scalar(e, 1.0)?;
    let a0 = tape.sum_rows(alpha)?;
    let lg_a0 = tape.lgamma(a0)?;
    let lg_a = tape.lgamma(alpha)?;
    let sum_lg_a = tape.sum_rows(lg_a)?;
    let psi_a = tape.digamma(alpha)?;
    let psi_a0 = tape.digamma(a0)?;
    let psi_a0 = tape.repeat_cols(psi_a0, k)?;
    let beta = tape.constant(&target.beta);
    let diff = tape.sub(alpha, beta)?;
    let dpsi = tape.sub(psi_a, psi_a0)?;
    let cross = tape.mul(diff, dpsi)?;
    let cross = tape.sum_rows(cross)?;
    let kl = tape.sub(lg_a0, sum_lg_a)?;
    let kl = tape.add(kl, cross)?;
    let c = tape.constant(&Tensor::vector(const_terms)?);
    let kl = tape.add(kl, c)?;
    let w = tape.constant(&Tensor::vector(inv_b0)?);
    let scaled = tape.mul(kl, w)?;
    tape.mean(scaled)
}

// --------------------------------------------------------- training loops

/// Temperature-`tau` probabilities of each teacher on `x`.
pub fn teacher_probs(teachers: &[Mlp], x: &Tensor, tau: f64) -> Result<Vec<Tensor>> {
    par::map(teachers, |t| softmax_temp(&t.logits(x)?, tau))
        .into_iter()
        .collect()
}

fn check_common(teachers: &[Mlp], data: &Dataset, dcfg: &DistillConfig, ocfg: &OptimConfig) -> Result<()> {
    dcfg.validate()?;
    ocfg.validate()?;
    let first = teachers
        .first()
        .ok_or_else(|| Error::InvalidArgument("distillation needs at least one teacher".into()))?;
    if teachers.iter().any(|t| t.spec().num_classes != data.num_classes || t.spec().input_dim != data.dim()) {
        return Err(Error::InvalidArgument(format!(
            "teachers (D={}, K={}) do not match the data (D={}, K={})",
            first.spec().input_dim,
            first.spec().num_classes,
            data.dim(),
            data.num_classes
        )));
    }
    Ok(())
}

/// Called with the step count (0 before the first update) and the current
/// student after every update.
pub type BeObserver<'a> = dyn FnMut(usize, &BeMlp) -> Result<()> + 'a;

/// Shared loop for one-to-one BatchEnsemble distillation.
///
/// Member `m` minimizes `(1−α)H[y, p_{S_m}] + ατ²H[p_{T_m}, p_{S_m}]`; the summed
/// member losses are differentiated once, the shared-weight gradient is
/// divided by `M`, and for `lambda > 0` the rank-one gradients gain
/// `λ(r − 1)` and `λ(s − 1)`.
fn train_be_core(
    teachers: &[Mlp],
    mut student: BeMlp,
    data: &Dataset,
    dcfg: &DistillConfig,
    ocfg: &OptimConfig,
    lambda: f64,
    mut observer: Option<&mut BeObserver<'_>>,
) -> Result<BeMlp> {
    check_common(teachers, data, dcfg, ocfg)?;
    let m = student.members();
    if m != teachers.len() {
        return Err(Error::InvalidArgument(format!(
            "student has {m} members but there are {} teachers",
            teachers.len()
        )));
    }
    if dcfg.perturbation.needs_student_members() && m < 2 {
        return Err(Error::InvalidArgument("tdiv_sdiv needs at least two members".into()));
    }
    let gamma = dcfg.gamma_for(data);
    let seed = ocfg.seed;
    let mut order = rng::stream(seed, rng::SHUFFLE);
    let mut prngs = PerturbRngs::new(seed);
    let onehot = data.one_hot();
    let roles = student.param_roles();
    let decay: Vec<bool> = roles.iter().map(|r| !matches!(r, BeParamRole::RankOne { .. })).collect();
    let mut opt = Sgd::new(&student.params(), ocfg.momentum, ocfg.weight_decay);
    let spe = ocfg.steps_per_epoch(data.len());
    let mut step = 0;
    if let Some(obs) = observer.as_deref_mut() {
        obs(0, &student)?;
    }
    for _ in 0..ocfg.epochs {
        for batch in epoch_batches(data.len(), ocfg.batch_size, &mut order) {
            let mut x = data.x.select_rows(&batch)?;
            if dcfg.perturbation != PerturbationKind::None {
                let p = perturb_batch(dcfg.perturbation, teachers, Some(&student), &x, dcfg.perturbation_tau(), gamma, &mut prngs)?;
                x = p.apply(&x)?;
            }
            let tp = teacher_probs(teachers, &x, dcfg.tau)?;
            let y = onehot.select_rows(&batch)?;

            let mut tape = Tape::new();
            let binding = student.bind(&mut tape, true);
            let xv = tape.constant(&x);
            let mut total: Option<Var> = None;
            for (member, p) in tp.iter().enumerate() {
                let logits = student.forward_member(&mut tape, &binding, member, xv)?;
                let target = mixed_target(&y, std::slice::from_ref(p), None, dcfg.tau, dcfg.alpha)?;
                let loss = soft_cross_entropy(&mut tape, logits, &target, dcfg.tau)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss)?,
                });
            }
            let grads = tape.backward(total.expect("at least one member"))?;
            let vars = binding.flatten();
            let params = student.params();
            let mut flat: Vec<Vec<f64>> = Vec::with_capacity(vars.len());
            for ((v, p), role) in vars.iter().zip(&params).zip(&roles) {
                let mut g = grads.get_or_zeros(*v, p.numel());
                match role {
                    BeParamRole::Shared => g.iter_mut().for_each(|x| *x /= m as f64),
                    BeParamRole::RankOne { .. } if lambda > 0.0 => {
                        g.iter_mut().zip(p.data()).for_each(|(x, w)| *x += lambda * (w - 1.0));
                    }
                    _ => {}
                }
                flat.push(g);
            }
            opt.step(student.params_mut(), &flat, lr_at(ocfg, step, spe), &decay)?;
            step += 1;
            if let Some(obs) = observer.as_deref_mut() {
                obs(step, &student)?;
            }
        }
    }
    Ok(student)
}

/// One-to-one distillation into a BatchEnsemble student (rank-one
/// regularization off).
pub fn distill_be(
    teachers: &[Mlp],
    student: BeMlp,
    data: &Dataset,
    dcfg: &DistillConfig,
    ocfg: &OptimConfig,
    observer: Option<&mut BeObserver<'_>>,
) -> Result<BeMlp> {
    train_be_core(teachers, student, data, dcfg, ocfg, 0.0, observer)
}

/// BE student spec with one member per teacher.
pub fn be_student_spec(spec: &ModelSpec, members: usize) -> ModelSpec {
    spec.with_kind(ModelKind::BatchEnsemble { members })
}

/// LatentBE: ones-initialized BE student trained with the rank-one prior and
/// the configured perturbation; returns the collapsed network and the
/// trained BatchEnsemble.
pub fn distill_latentbe(
    teachers: &[Mlp],
    spec: &ModelSpec,
    data: &Dataset,
    dcfg: &DistillConfig,
    ocfg: &OptimConfig,
    observer: Option<&mut BeObserver<'_>>,
) -> Result<(Mlp, BeMlp)> {
    let be_spec = be_student_spec(spec, teachers.len());
    let student = BeMlp::init(&be_spec, RankOneInit::Ones, &mut rng::stream(ocfg.seed, rng::INIT))?;
    let trained = train_be_core(teachers, student, data, dcfg, ocfg, dcfg.lambda, observer)?;
    Ok((average_rank_one(&trained)?, trained))
}

/// Per-batch loss of a plain student given the perturbed batch, the teacher
/// distributions at the distillation temperature, and one-hot labels.
type PlainLoss<'a> = dyn Fn(&mut Tape, Var, &[Tensor], &Tensor, &Tensor) -> Result<Var> + 'a;

fn train_plain_student(
    teachers: &[Mlp],
    mut student: Mlp,
    data: &Dataset,
    dcfg: &DistillConfig,
    ocfg: &OptimConfig,
    teacher_tau: f64,
    loss_fn: &PlainLoss<'_>,
) -> Result<Mlp> {
    check_common(teachers, data, dcfg, ocfg)?;
    if dcfg.perturbation.needs_student_members() {
        return Err(Error::InvalidArgument("tdiv_sdiv needs a BatchEnsemble student".into()));
    }
    let gamma = dcfg.gamma_for(data);
    let seed = ocfg.seed;
    let mut order = rng::stream(seed, rng::SHUFFLE);
    let mut prngs = PerturbRngs::new(seed);
    let onehot = data.one_hot();
    let mut opt = Sgd::new(&student.params(), ocfg.momentum, ocfg.weight_decay);
    let decay = vec![true; student.params().len()];
    let spe = ocfg.steps_per_epoch(data.len());
    let mut step = 0;
    for _ in 0..ocfg.epochs {
        for batch in epoch_batches(data.len(), ocfg.batch_size, &mut order) {
            let mut x = data.x.select_rows(&batch)?;
            if dcfg.perturbation != PerturbationKind::None {
                let p = perturb_batch::<_, BeMlp>(dcfg.perturbation, teachers, None, &x, dcfg.perturbation_tau(), gamma, &mut prngs)?;
                x = p.apply(&x)?;
            }
            let tp = teacher_probs(teachers, &x, teacher_tau)?;
            let y = onehot.select_rows(&batch)?;
            let mut tape = Tape::new();
            let params = student.bind(&mut tape, true);
            let xv = tape.constant(&x);
            let logits = student.forward(&mut tape, &params, xv)?;
            let loss = loss_fn(&mut tape, logits, &tp, &y, &x)?;
            let g = tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .zip(student.params())
                .map(|(&v, p)| g.get_or_zeros(v, p.numel()))
                .collect();
            opt.step(student.params_mut(), &grads, lr_at(ocfg, step, spe), &decay)?;
            step += 1;
        }
    }
    Ok(student)
}

fn plain_student(spec: &ModelSpec, seed: u64) -> Result<Mlp> {
    Mlp::init(&spec.with_kind(ModelKind::Plain), &mut rng::stream(seed, rng::INIT))
}

/// Vanilla KD into a plain student.
pub fn distill_kd(teachers: &[Mlp], spec: &ModelSpec, data: &Dataset, dcfg: &DistillConfig, ocfg: &OptimConfig) -> Result<Mlp> {
    let (tau, alpha) = (dcfg.tau, dcfg.alpha);
    train_plain_student(
        teachers,
        plain_student(spec, ocfg.seed)?,
        data,
        dcfg,
        ocfg,
        tau,
        &|tape, logits, tp, y, _| kd_loss(tape, logits, tp, y, tau, alpha),
    )
}

/// AE-KD: the mean teacher of KD is replaced per sample by the AE-KD
/// weighting, computed from the current student's temperature-`τ` output.
pub fn distill_aekd(
    teachers: &[Mlp],
    spec: &ModelSpec,
    data: &Dataset,
    dcfg: &DistillConfig,
    ocfg: &OptimConfig,
    aekd: &AekdConfig,
) -> Result<Mlp> {
    let (tau, alpha) = (dcfg.tau, dcfg.alpha);
    let m = teachers.len();
    if !(aekd.c <= 1.0 && aekd.c >= 1.0 / m as f64 - 1e-12) {
        return Err(Error::InvalidArgument(format!("AE-KD tolerance C = {} outside [1/M, 1]", aekd.c)));
    }
    train_plain_student(
        teachers,
        plain_student(spec, ocfg.seed)?,
        data,
        dcfg,
        ocfg,
        tau,
        &|tape, logits, tp, y, _| {
            let z = tape.to_tensor(logits);
            let ps = softmax_temp(&z, tau)?;
            let weights = (0..y.rows())
                .map(|b| {
                    let rows: Vec<&[f64]> = tp.iter().map(|p| p.row(b)).collect();
                    aekd_weights(&rows, ps.row(b), aekd.c)
                })
                .collect::<Result<Vec<_>>>()?;
            let target = mixed_target(y, tp, Some(&weights), tau, alpha)?;
            soft_cross_entropy(tape, logits, &target, tau)
        },
    )
}

/// Proxy-EnD²: a Dirichlet-headed student trained by reverse KL to the proxy
/// Dirichlet of the temperature-1 teacher distributions.
pub fn distill_proxy_end2(teachers: &[Mlp], spec: &ModelSpec, data: &Dataset, dcfg: &DistillConfig, ocfg: &OptimConfig) -> Result<Mlp> {
    if teachers.len() < 2 {
        return Err(Error::InvalidArgument("Proxy-EnD² needs at least two teachers".into()));
    }
    let student = train_plain_student(
        teachers,
        plain_student(spec, ocfg.seed)?,
        data,
        dcfg,
        ocfg,
        1.0,
        &|tape, logits, tp, _, _| {
            let target = proxy_target_with(tp, Some(PROXY_TRAIN_FLOOR))?;
            proxy_end2_loss(tape, logits, &target)
        },
    )?;
    Ok(student.with_head(OutputHead::Dirichlet))
}

/// Reproducibility record written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// FNV-1a digest of the training split, hexadecimal.
    pub data_digest: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, data: &Dataset, config: serde_json::Value) -> Result<Self> {
        Ok(Self {
            tool: "distilab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            data_digest: format!("{:016x}", data.digest()?),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kd_loss_pair_example() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::matrix(1, 2, vec![0.7f64.ln(), 0.3f64.ln()]).unwrap());
        let tp = [
            Tensor::matrix(1, 2, vec![0.9, 0.1]).unwrap(),
            Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(),
        ];
        let y = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let l = kd_loss(&mut tape, z, &tp, &y, 1.0, 1.0).unwrap();
        let h = |p: [f64; 2]| -(p[0] * 0.7f64.ln() + p[1] * 0.3f64.ln());
        let want = 0.5 * (h([0.9, 0.1]) + h([0.5, 0.5]));
        assert!((want - 0.610_864).abs() < 1e-6);
        assert!((tape.item(l) - want).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_label_only() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let tp = [Tensor::matrix(1, 2, vec![0.2, 0.8]).unwrap()];
        let y = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let l = kd_loss(&mut tape, z, &tp, &y, 1.0, 0.0).unwrap();
        let want = -(1.0 / (1.0 + 1f64.exp())).ln();
        assert!((tape.item(l) - want).abs() < 1e-12);
        assert!(kd_loss(&mut tape, z, &tp, &y, 0.0, 1.0).is_err());
    }

    #[test]
    fn aekd_examples() {
        let t1 = [0.7, 0.2, 0.1];
        let t2 = [0.1, 0.3, 0.6];
        let s = [0.4, 0.4, 0.2];
        assert_eq!(aekd_weights(&[&t1, &t2], &s, 0.5).unwrap(), vec![0.5, 0.5]);
        let w = aekd_weights(&[&t1, &t2], &t1, 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && w[1].abs() < 1e-12);
        let w = aekd_weights(&[&t1, &t2], &t1, 0.6).unwrap();
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        assert!(aekd_weights(&[&t1, &t2], &s, 0.4).is_err());
    }

    #[test]
    fn aekd_large_ensembles_use_projection() {
        let ps: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let a = 0.1 + 0.15 * i as f64;
                vec![a, 1.0 - a]
            })
            .collect();
        let rows: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
        let w = aekd_weights(&rows, &[0.1, 0.9], 0.3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&v| (-1e-12..=0.3 + 1e-12).contains(&v)));
        assert!((w[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn proxy_beta_example() {
        let b = proxy_beta(&[&[0.9, 0.1], &[0.5, 0.5]], None).unwrap();
        assert!((b[0] - 2.966_776).abs() < 1e-5, "{b:?}");
        assert!((b[1] - 1.271_476).abs() < 1e-5, "{b:?}");
        assert!(matches!(
            proxy_beta(&[&[0.9, 0.1], &[0.9, 0.1]], None),
            Err(Error::DegenerateEnsemble(_))
        ));
    }

    #[test]
    fn dirichlet_kl_spot_values() {
        assert!(dirichlet_kl(&[2.0, 3.0, 4.0], &[2.0, 3.0, 4.0]).unwrap().abs() < 1e-12);
        assert!((dirichlet_kl(&[2.0, 2.0], &[3.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn proxy_loss_matches_scalar_kl() {
        let beta = Tensor::matrix(2, 2, vec![3.0, 1.5, 2.0, 5.0]).unwrap();
        let s = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(&s);
        let l = proxy_end2_loss(&mut tape, z, &ProxyDirichlet { beta: beta.clone() }).unwrap();
        let mut want = 0.0;
        for b in 0..2 {
            let a: Vec<f64> = s.row(b).iter().map(|v| v.exp() + 1.0).collect();
            want += dirichlet_kl(&a, beta.row(b)).unwrap() / beta.row(b).iter().sum::<f64>();
        }
        assert!((tape.item(l) - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
