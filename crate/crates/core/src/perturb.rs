//! Input perturbations used during distillation and their diagnostics.
//!
//! Gradient-based strategies return per-sample steps of norm `γ` along the
//! input gradient of an objective: a random linear functional of one
//! teacher's probabilities (ODS, ConfODS), or a stochastic pairwise KL
//! estimate of teacher diversity (TDiv), optionally minus the same estimate
//! for the student members (TDiv−SDiv).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{kl_log, member_log_probs};
use crate::nets::MemberSet;
use crate::rng::{self, StreamRng};

/// Gradients with smaller norm produce no step.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    #[default]
    None,
    Gaussian,
    Ods,
    ConfOds,
    Tdiv,
    TdivSdiv,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::None,
        PerturbationKind::Gaussian,
        PerturbationKind::Ods,
        PerturbationKind::ConfOds,
        PerturbationKind::Tdiv,
        PerturbationKind::TdivSdiv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::None => "none",
            PerturbationKind::Gaussian => "gaussian",
            PerturbationKind::Ods => "ods",
            PerturbationKind::ConfOds => "conf_ods",
            PerturbationKind::Tdiv => "tdiv",
            PerturbationKind::TdivSdiv => "tdiv_sdiv",
        }
    }

    /// Whether the strategy needs a multi-member student.
    pub fn needs_student_members(self) -> bool {
        self == PerturbationKind::TdivSdiv
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation kind {s:?}")))
    }
}

/// Random linear functional applied to output probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceVector {
    pub w: Vec<f64>,
}

impl GuidanceVector {
    pub fn sample<R: Rng>(k: usize, rng: &mut R) -> Self {
        Self {
            w: (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub epsilon: Tensor,
    pub kind: PerturbationKind,
    pub gamma: f64,
}

impl Perturbation {
    pub fn none(x: &Tensor) -> Self {
        Self {
            epsilon: Tensor::zeros(x.shape()),
            kind: PerturbationKind::None,
            gamma: 0.0,
        }
    }

    /// `x + ε`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.epsilon.shape() {
            return Err(Error::shape("Perturbation::apply", "input and perturbation shapes differ"));
        }
        let data = x.data().iter().zip(self.epsilon.data()).map(|(a, e)| a + e).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Per-row Euclidean norms of `ε`.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.epsilon.rows())
            .map(|b| self.epsilon.row(b).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Default step size `0.05 · √D · σ̄` for inputs with mean per-dimension
/// standard deviation `mean_std`.
pub fn default_gamma(dim: usize, mean_std: f64) -> f64 {
    0.05 * (dim as f64).sqrt() * mean_std
}

/// `x + γ z` with `z ~ N(0, I)`.
pub fn gaussian_perturb<R: Rng>(x: &Tensor, gamma: f64, rng: &mut R) -> Result<Perturbation> {
    check_gamma(gamma)?;
    let data = (0..x.numel())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            gamma * z
        })
        .collect();
    Ok(Perturbation {
        epsilon: Tensor::new(x.shape().to_vec(), data)?,
        kind: PerturbationKind::Gaussian,
        gamma,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

/// Scales each row of `g` to norm `gamma · scale[b]`; rows with norm below
/// [`DEGENERATE_NORM`] become zero.
fn normalize_rows(g: &[f64], shape: &[usize], gamma: f64, scale: Option<&[f64]>) -> Result<Tensor> {
    let d = shape[1];
    let mut out = vec![0.0; g.len()];
    for (b, (src, dst)) in g.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            continue;
        }
        let step = gamma * scale.map_or(1.0, |s| s[b]);
        for (o, v) in dst.iter_mut().zip(src) {
            *o = step * v / norm;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Draws per-sample teacher indices then guidance vectors, in sample order.
pub fn draw_guidance<R: Rng>(members: usize, k: usize, rows: usize, rng: &mut R) -> (Vec<usize>, Vec<GuidanceVector>) {
    let mut choice = Vec::with_capacity(rows);
    let mut w = Vec::with_capacity(rows);
    for _ in 0..rows {
        choice.push(rng.random_range(0..members));
        w.push(GuidanceVector::sample(k, rng));
    }
    (choice, w)
}

/// Input gradient of `Σ_b w_bᵀ p_{choice[b]}(x_b; τ)` and the chosen
/// members' confidences.
fn guidance_gradient<S: MemberSet + ?Sized>(
    members: &S,
    choice: &[usize],
    w: &[GuidanceVector],
    x: &Tensor,
    tau: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let probs = (0..members.member_count())
        .map(|m| {
            let z = members.member_forward(&mut tape, m, xv)?;
            tape.softmax(z, tau)
        })
        .collect::<Result<Vec<Var>>>()?;
    let chosen = tape.gather_rows(&probs, choice)?;
    let k = tape.shape(chosen)[1];
    let mut wt = Vec::with_capacity(x.rows() * k);
    for g in w {
        wt.extend_from_slice(&g.w);
    }
    let wv = tape.constant(&Tensor::matrix(x.rows(), k, wt)?);
    let prod = tape.mul(chosen, wv)?;
    let obj = tape.sum(prod)?;
    let conf = tape
        .value(chosen)
        .chunks(k)
        .map(|row| row.iter().copied().fold(f64::MIN, f64::max))
        .collect();
    let grads = tape.backward(obj)?;
    Ok((grads.get_or_zeros(xv, x.numel()), conf))
}

fn ods_like<S: MemberSet + ?Sized>(
    members: &S,
    choice: &[usize],
    w: &[GuidanceVector],
    x: &Tensor,
    tau: f64,
    gamma: f64,
    confidence: bool,
) -> Result<Perturbation> {
    check_gamma(gamma)?;
    let (g, conf) = guidance_gradient(members, choice, w, x, tau)?;
    let kind = if confidence { PerturbationKind::ConfOds } else { PerturbationKind::Ods };
    Ok(Perturbation {
        epsilon: normalize_rows(&g, x.shape(), gamma, confidence.then_some(conf.as_slice()))?,
        kind,
        gamma,
    })
}

/// ODS against member `m` of `members`, one guidance vector per sample.
pub fn ods_perturb<S: MemberSet + ?Sized, R: Rng>(
    members: &S,
    m: usize,
    x: &Tensor,
    tau: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<Perturbation> {
    let k = member_classes(members, x)?;
    let w: Vec<_> = (0..x.rows()).map(|_| GuidanceVector::sample(k, rng)).collect();
    ods_like(members, &vec![m; x.rows()], &w, x, tau, gamma, false)
}

/// ODS with the step scaled per sample by the teacher's top probability.
pub fn conf_ods_perturb<S: MemberSet + ?Sized, R: Rng>(
    members: &S,
    m: usize,
    x: &Tensor,
    tau: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<Perturbation> {
    let k = member_classes(members, x)?;
    let w: Vec<_> = (0..x.rows()).map(|_| GuidanceVector::sample(k, rng)).collect();
    ods_like(members, &vec![m; x.rows()], &w, x, tau, gamma, true)
}

/// ODS with explicit per-sample teacher choices and guidance vectors.
pub fn ods_with(
    members: &(impl MemberSet + ?Sized),
    choice: &[usize],
    w: &[GuidanceVector],
    x: &Tensor,
    tau: f64,
    gamma: f64,
    confidence: bool,
) -> Result<Perturbation> {
    ods_like(members, choice, w, x, tau, gamma, confidence)
}

fn member_classes<S: MemberSet + ?Sized>(members: &S, x: &Tensor) -> Result<usize> {
    Ok(members.member_logits(0, &x.slice_rows(0, 1)?)?.cols())
}

/// An ordered member pair `(i, j)` with `i ≠ j` per sample.
pub fn draw_pairs<R: Rng>(members: usize, rows: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if members < 2 {
        return Err(Error::InvalidArgument("pair sampling needs at least two members".into()));
    }
    Ok((0..rows)
        .map(|_| {
            let i = rng.random_range(0..members);
            let mut j = rng.random_range(0..members - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect())
}

/// Tape node holding per-sample `KL(sg(p_{i_b}) ‖ p_{j_b})` at temperature `tau`.
pub fn pair_kl_rows<S: MemberSet + ?Sized>(
    tape: &mut Tape,
    members: &S,
    x: Var,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Var> {
    let logp = (0..members.member_count())
        .map(|m| {
            let z = members.member_forward(tape, m, x)?;
            tape.log_softmax(z, tau)
        })
        .collect::<Result<Vec<Var>>>()?;
    let first: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let li = tape.gather_rows(&logp, &first)?;
    let li = tape.stop_grad(li)?;
    let lj = tape.gather_rows(&logp, &second)?;
    let pi = tape.exp(li)?;
    let diff = tape.sub(li, lj)?;
    let terms = tape.mul(pi, diff)?;
    tape.sum_rows(terms)
}

/// `KL(p_i ‖ p_j)` summed over the rows of `x`, with an optional stop-gradient
/// on the first argument; returns the value and the input gradient.
pub fn div_estimate<A, B>(first: &A, second: &B, x: &Tensor, stop_first: bool) -> Result<(f64, Vec<f64>)>
where
    A: MemberSet + ?Sized,
    B: MemberSet + ?Sized,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let zi = first.member_forward(&mut tape, 0, xv)?;
    let zj = second.member_forward(&mut tape, 0, xv)?;
    let mut li = tape.log_softmax(zi, 1.0)?;
    if stop_first {
        li = tape.stop_grad(li)?;
    }
    let lj = tape.log_softmax(zj, 1.0)?;
    let pi = tape.exp(li)?;
    let diff = tape.sub(li, lj)?;
    let terms = tape.mul(pi, diff)?;
    let total = tape.sum(terms)?;
    let grads = tape.backward(total)?;
    Ok((tape.item(total), grads.get_or_zeros(xv, x.numel())))
}

/// Per-sample `KL(p_i(anchor) ‖ p_j(x))` at temperature `tau`.
fn pair_kl_values<S: MemberSet + ?Sized>(
    members: &S,
    anchor: &Tensor,
    x: &Tensor,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Vec<f64>> {
    let log_probs = |input: &Tensor| -> Result<Vec<Vec<f64>>> {
        (0..members.member_count())
            .map(|m| {
                let z = members.member_logits(m, input)?;
                Ok(log_softmax_rows(z.data(), z.cols(), tau))
            })
            .collect()
    };
    let first = log_probs(anchor)?;
    let second = if std::ptr::eq(anchor, x) { first.clone() } else { log_probs(x)? };
    let k = first[0].len() / anchor.rows().max(1);
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(b, &(i, j))| kl_log(&first[i][b * k..(b + 1) * k], &second[j][b * k..(b + 1) * k]))
        .collect())
}

/// Per-sample value of the pair objective `TDiv − SDiv` (or `TDiv` alone
/// when `students` is `None`).
pub fn pair_objective<T, S>(
    teachers: &T,
    students: Option<&S>,
    x: &Tensor,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Vec<f64>>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
{
    pair_objective_at(teachers, students, x, x, pairs, tau)
}

/// Pair objective with the stop-gradient argument `p_i` evaluated at `anchor`
/// and `p_j` at `x`. As a function of `x` around `anchor`, this is the
/// quantity whose gradient [`diversity_perturb_with`] follows.
pub fn pair_objective_at<T, S>(
    teachers: &T,
    students: Option<&S>,
    anchor: &Tensor,
    x: &Tensor,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Vec<f64>>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
{
    if anchor.shape() != x.shape() || pairs.len() != x.rows() {
        return Err(Error::shape(
            "pair_objective",
            format!("anchor {:?}, x {:?}, {} pairs", anchor.shape(), x.shape(), pairs.len()),
        ));
    }
    let mut out = pair_kl_values(teachers, anchor, x, pairs, tau)?;
    if let Some(s) = students {
        let sv = pair_kl_values(s, anchor, x, pairs, tau)?;
        out.iter_mut().zip(sv).for_each(|(a, b)| *a -= b);
    }
    Ok(out)
}

/// Normalized step along the input gradient of the pair objective; the pairs
/// are shared between teachers and students.
pub fn diversity_perturb_with<T, S>(
    teachers: &T,
    students: Option<&S>,
    x: &Tensor,
    pairs: &[(usize, usize)],
    tau: f64,
    gamma: f64,
) -> Result<Perturbation>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
{
    check_gamma(gamma)?;
    if let Some(s) = students {
        if s.member_count() < 2 {
            return Err(Error::InvalidArgument("student diversity needs at least two members".into()));
        }
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let t = pair_kl_rows(&mut tape, teachers, xv, pairs, tau)?;
    let mut obj = tape.sum(t)?;
    if let Some(s) = students {
        let sv = pair_kl_rows(&mut tape, s, xv, pairs, tau)?;
        let ss = tape.sum(sv)?;
        obj = tape.sub(obj, ss)?;
    }
    let grads = tape.backward(obj)?;
    let kind = if students.is_some() { PerturbationKind::TdivSdiv } else { PerturbationKind::Tdiv };
    Ok(Perturbation {
        epsilon: normalize_rows(&grads.get_or_zeros(xv, x.numel()), x.shape(), gamma, None)?,
        kind,
        gamma,
    })
}

/// Ascends the stochastic teacher-diversity estimate.
pub fn tdiv_perturb<T: MemberSet + ?Sized, R: Rng>(teachers: &T, x: &Tensor, tau: f64, gamma: f64, rng: &mut R) -> Result<Perturbation> {
    let pairs = draw_pairs(teachers.member_count(), x.rows(), rng)?;
    diversity_perturb_with::<T, T>(teachers, None, x, &pairs, tau, gamma)
}

/// Ascends teacher diversity while descending student diversity.
pub fn tdiv_sdiv_perturb<T, S, R>(teachers: &T, students: &S, x: &Tensor, tau: f64, gamma: f64, rng: &mut R) -> Result<Perturbation>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
    R: Rng,
{
    if teachers.member_count() != students.member_count() {
        return Err(Error::InvalidArgument("teacher and student member counts differ".into()));
    }
    let pairs = draw_pairs(teachers.member_count(), x.rows(), rng)?;
    diversity_perturb_with(teachers, Some(students), x, &pairs, tau, gamma)
}

/// Random streams for the perturbation consumers of one run.
pub struct PerturbRngs {
    pub guidance: StreamRng,
    pub pairs: StreamRng,
    pub noise: StreamRng,
}

impl PerturbRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            guidance: rng::stream(seed, rng::GUIDANCE),
            pairs: rng::stream(seed, rng::PAIRS),
            noise: rng::stream(seed, rng::NOISE),
        }
    }
}

/// Perturbation of kind `kind` for one minibatch. ODS variants draw the
/// teacher per sample; `students` is required for `TdivSdiv`.
pub fn perturb_batch<T, S>(
    kind: PerturbationKind,
    teachers: &T,
    students: Option<&S>,
    x: &Tensor,
    tau: f64,
    gamma: f64,
    rngs: &mut PerturbRngs,
) -> Result<Perturbation>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
{
    match kind {
        PerturbationKind::None => Ok(Perturbation::none(x)),
        PerturbationKind::Gaussian => gaussian_perturb(x, gamma, &mut rngs.noise),
        PerturbationKind::Ods | PerturbationKind::ConfOds => {
            let k = member_classes(teachers, x)?;
            let (choice, w) = draw_guidance(teachers.member_count(), k, x.rows(), &mut rngs.guidance);
            ods_like(teachers, &choice, &w, x, tau, gamma, kind == PerturbationKind::ConfOds)
        }
        PerturbationKind::Tdiv => tdiv_perturb(teachers, x, tau, gamma, &mut rngs.pairs),
        PerturbationKind::TdivSdiv => {
            let s = students.ok_or_else(|| Error::InvalidArgument("tdiv_sdiv needs a multi-member student".into()))?;
            tdiv_sdiv_perturb(teachers, s, x, tau, gamma, &mut rngs.pairs)
        }
    }
}

/// Per-sample full pairwise diversity (temperature 1).
pub fn diversity_rows<S: MemberSet + ?Sized>(members: &S, x: &Tensor) -> Result<Vec<f64>> {
    let m = members.member_count();
    if m < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two members".into()));
    }
    let logp = member_log_probs(members, x)?;
    let k = logp[0].cols();
    Ok((0..x.rows())
        .map(|b| {
            let mut s = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        s += kl_log(&logp[i].data()[b * k..(b + 1) * k], &logp[j].data()[b * k..(b + 1) * k]);
                    }
                }
            }
            s / (m * (m - 1)) as f64
        })
        .collect())
}

/// Mean change of teacher and student diversity when moving from `x` to `x + ε`.
pub fn diversity_shift<T, S>(teachers: &T, students: &S, x: &Tensor, eps: &Perturbation) -> Result<(f64, f64)>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
{
    let moved = eps.apply(x)?;
    let mean_delta = |before: Vec<f64>, after: Vec<f64>| {
        before.iter().zip(&after).map(|(b, a)| a - b).sum::<f64>() / before.len() as f64
    };
    let dt = mean_delta(diversity_rows(teachers, x)?, diversity_rows(teachers, &moved)?);
    let ds = mean_delta(diversity_rows(students, x)?, diversity_rows(students, &moved)?);
    Ok((dt, ds))
}

/// One line of the perturbation diagnostic CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub step: usize,
    pub kind: PerturbationKind,
    #[serde(rename = "mean_dT")]
    pub mean_dt: f64,
    #[serde(rename = "mean_dS")]
    pub mean_ds: f64,
    pub frac_ascent: f64,
}

/// Fraction of samples with a non-zero step for which the pair objective
/// increases when moving along `eps`. With `anchored`, the stop-gradient
/// arguments stay at their values on `x` (the estimator the step ascends);
/// otherwise both arguments move.
pub fn ascent_fraction<T, S>(
    teachers: &T,
    students: Option<&S>,
    x: &Tensor,
    pairs: &[(usize, usize)],
    tau: f64,
    eps: &Perturbation,
    anchored: bool,
) -> Result<(f64, usize)>
where
    T: MemberSet + ?Sized,
    S: MemberSet + ?Sized,
{
    let moved = eps.apply(x)?;
    let before = pair_objective(teachers, students, x, pairs, tau)?;
    let anchor = if anchored { x } else { &moved };
    let after = pair_objective_at(teachers, students, anchor, &moved, pairs, tau)?;
    let live: Vec<usize> = eps
        .norms()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0.0)
        .map(|(b, _)| b)
        .collect();
    if live.is_empty() {
        return Ok((0.0, 0));
    }
    let up = live.iter().filter(|&&b| after[b] > before[b]).count();
    Ok((up as f64 / live.len() as f64, live.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{DenseLayer, Mlp, ModelSpec};

    fn tiny(seed: u64) -> Mlp {
        Mlp::init(&ModelSpec::plain(2, 3, vec![8]), &mut rng::stream(seed, rng::INIT)).unwrap()
    }

    fn xs(n: usize) -> Tensor {
        let mut r = rng::stream(1, rng::DATA);
        Tensor::matrix(n, 2, (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PerturbationKind::ALL {
            assert_eq!(k.as_str().parse::<PerturbationKind>().unwrap(), k);
        }
        assert!("pgd".parse::<PerturbationKind>().is_err());
    }

    #[test]
    fn gaussian_zero_gamma_is_identity() {
        let x = xs(4);
        let p = gaussian_perturb(&x, 0.0, &mut rng::stream(0, rng::NOISE)).unwrap();
        assert_eq!(p.apply(&x).unwrap(), x);
    }

    #[test]
    fn normalized_steps_have_norm_gamma() {
        let teachers = vec![tiny(1), tiny(2), tiny(3)];
        let x = xs(20);
        let mut rngs = PerturbRngs::new(4);
        for kind in [PerturbationKind::Ods, PerturbationKind::Tdiv] {
            let p = perturb_batch::<_, [Mlp]>(kind, teachers.as_slice(), None, &x, 2.0, 0.3, &mut rngs).unwrap();
            for n in p.norms() {
                assert!((n - 0.3).abs() < 1e-12 || n == 0.0);
            }
        }
    }

    #[test]
    fn zero_guidance_gives_zero_step() {
        let teachers = vec![tiny(1)];
        let x = xs(3);
        let w = vec![GuidanceVector { w: vec![0.0; 3] }; 3];
        let p = ods_with(teachers.as_slice(), &[0, 0, 0], &w, &x, 1.0, 0.5, false).unwrap();
        assert!(p.epsilon.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_members_give_zero_diversity_step() {
        let t = vec![tiny(5), tiny(5)];
        let s = vec![tiny(6), tiny(6)];
        let x = xs(6);
        let p = tdiv_sdiv_perturb(t.as_slice(), s.as_slice(), &x, 1.0, 0.2, &mut rng::stream(0, rng::PAIRS)).unwrap();
        assert!(p.epsilon.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_kl_example() {
        // p_i = (0.5, 0.5), p_j = (0.9, 0.1) as constant-output networks.
        let constant = |p: [f64; 2]| {
            let spec = ModelSpec::plain(2, 2, vec![1]);
            let mut m = Mlp::zeros(&spec).unwrap();
            m.layers_mut()[1] = DenseLayer {
                weight: Tensor::zeros(&[2, 1]),
                bias: Tensor::vector(vec![p[0].ln(), p[1].ln()]).unwrap(),
            };
            vec![m]
        };
        let (a, b) = (constant([0.5, 0.5]), constant([0.9, 0.1]));
        let (v, g) = div_estimate(a.as_slice(), b.as_slice(), &xs(1), true).unwrap();
        assert!((v - 0.510_826).abs() < 1e-6);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stop_grad_blocks_first_argument() {
        let a = vec![tiny(7)];
        let frozen = vec![Mlp::zeros(&ModelSpec::plain(2, 3, vec![8])).unwrap()];
        let x = xs(5);
        let (_, g) = div_estimate(a.as_slice(), frozen.as_slice(), &x, true).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let (_, g) = div_estimate(a.as_slice(), frozen.as_slice(), &x, false).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pairs_are_distinct_and_reproducible() {
        let a = draw_pairs(3, 100, &mut rng::stream(1, rng::PAIRS)).unwrap();
        let b = draw_pairs(3, 100, &mut rng::stream(1, rng::PAIRS)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|(i, j)| i != j && *i < 3 && *j < 3));
        assert!(draw_pairs(1, 3, &mut rng::stream(1, rng::PAIRS)).is_err());
    }
}
