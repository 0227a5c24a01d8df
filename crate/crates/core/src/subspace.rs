//! Loss landscape along the line through two BatchEnsemble members, and
//! diversity of the members over training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_temp, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, diversity, nll};
use crate::nets::{average_rank_one, BeMlp, DenseLayer, Mlp, ModelKind};
use crate::par;

/// Plain network with weights `(1−t)·W_i + t·W_j` and biases interpolated
/// the same way, where `W_m = θ ∘ (r_m s_mᵀ)`.
pub fn interpolate_pair(model: &BeMlp, i: usize, j: usize, t: f64) -> Result<Mlp> {
    let m = model.members();
    if i >= m || j >= m {
        return Err(Error::InvalidArgument(format!("member pair ({i}, {j}) out of range for M = {m}")));
    }
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let (wi, wj) = (l.member_weight(i), l.member_weight(j));
            let mix = |a: &Tensor, b: &Tensor| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if x == y { x } else { (1.0 - t) * x + t * y }).collect();
                Tensor::new(a.shape().to_vec(), data)
            };
            Ok(DenseLayer {
                weight: mix(&wi, &wj)?,
                bias: mix(&l.bias[i], &l.bias[j])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(&model.spec().with_kind(ModelKind::Plain), layers)
}

/// `interpolate_pair(model, 0, 1, t)` for a two-member model.
pub fn interpolate(model: &BeMlp, t: f64) -> Result<Mlp> {
    if model.members() != 2 {
        return Err(Error::InvalidArgument(format!("line interpolation needs M = 2, got {}", model.members())));
    }
    interpolate_pair(model, 0, 1, t)
}

/// 41 evenly spaced points over [−0.25, 1.25] together with 0, 0.5 and 1.
pub fn default_grid() -> Vec<f64> {
    let mut ts: Vec<f64> = (0..41).map(|i| -0.25 + 1.5 * i as f64 / 40.0).collect();
    ts.extend([0.0, 0.5, 1.0]);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinePoint {
    pub t: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub test_nll: f64,
    /// Mean train cross-entropy, used for the barrier.
    #[serde(skip)]
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineScan {
    pub points: Vec<LinePoint>,
    pub barrier: f64,
}

fn eval_point(net: &Mlp, data: &Dataset) -> Result<(f64, f64)> {
    let probs = softmax_temp(&net.logits(&data.x)?, 1.0)?;
    Ok((1.0 - accuracy(&probs, &data.y)?, nll(&probs, &data.y)?.mean))
}

/// `max_{t∈[0,1]} L(t) − max(L(0), L(1))`, floored at zero.
pub fn barrier(ts: &[f64], losses: &[f64]) -> Result<f64> {
    let at = |target: f64| {
        ts.iter()
            .position(|&t| t == target)
            .map(|i| losses[i])
            .ok_or_else(|| Error::InvalidArgument(format!("grid lacks t = {target}")))
    };
    let ends = at(0.0)?.max(at(1.0)?);
    let peak = ts
        .iter()
        .zip(losses)
        .filter(|(&t, _)| (0.0..=1.0).contains(&t))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((peak - ends).max(0.0))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    if ![0.0, 0.5, 1.0].iter().all(|t| grid.contains(t)) {
        return Err(Error::InvalidArgument("grid must contain 0, 0.5 and 1".into()));
    }
    Ok(())
}

/// Errors and NLL along the member line of a two-member model.
pub fn line_scan(model: &BeMlp, train: &Dataset, test: &Dataset, grid: &[f64]) -> Result<LineScan> {
    if model.members() != 2 {
        return Err(Error::InvalidArgument(format!("line scan needs M = 2, got {}", model.members())));
    }
    check_grid(grid)?;
    let points = par::map(grid, |&t| {
        let net = interpolate(model, t)?;
        let (train_err, train_loss) = eval_point(&net, train)?;
        let (test_err, test_nll) = eval_point(&net, test)?;
        Ok(LinePoint {
            t,
            train_err,
            test_err,
            test_nll,
            train_loss,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = points.iter().map(|p| p.train_loss).collect();
    Ok(LineScan {
        barrier: barrier(grid, &losses)?,
        points,
    })
}

/// Train-loss barrier of every member pair `i < j`.
pub fn pairwise_barriers(model: &BeMlp, train: &Dataset, grid: &[f64]) -> Result<Vec<((usize, usize), f64)>> {
    check_grid(grid)?;
    let m = model.members();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    par::map(&pairs, |&(i, j)| {
        let losses = grid
            .iter()
            .map(|&t| Ok(eval_point(&interpolate_pair(model, i, j, t)?, train)?.1))
            .collect::<Result<Vec<_>>>()?;
        Ok(((i, j), barrier(grid, &losses)?))
    })
    .into_iter()
    .collect()
}

/// Largest pairwise barrier; equals the line-scan barrier when `M = 2`.
pub fn max_pairwise_barrier(model: &BeMlp, train: &Dataset, grid: &[f64]) -> Result<f64> {
    Ok(pairwise_barriers(model, train, grid)?
        .into_iter()
        .map(|(_, b)| b)
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub div_train: f64,
    pub div_test: f64,
    pub avg_test_nll: f64,
}

/// Records member diversity and the collapsed network's test NLL every
/// `every` steps; pass [`DiversityTrace::observe`] as a training observer.
pub struct DiversityTrace<'a> {
    every: usize,
    train: &'a Dataset,
    test: &'a Dataset,
    pub points: Vec<TracePoint>,
}

impl<'a> DiversityTrace<'a> {
    pub fn new(every: usize, train: &'a Dataset, test: &'a Dataset) -> Self {
        Self {
            every: every.max(1),
            train,
            test,
            points: Vec::new(),
        }
    }

    pub fn observe(&mut self, step: usize, model: &BeMlp) -> Result<()> {
        if step.is_multiple_of(self.every) {
            self.points.push(endpoint_point(step, model, self.train, self.test)?);
        }
        Ok(())
    }
}

/// One trace entry for the current state of `model`.
pub fn endpoint_point(step: usize, model: &BeMlp, train: &Dataset, test: &Dataset) -> Result<TracePoint> {
    if model.members() < 2 {
        return Err(Error::InvalidArgument("diversity trace needs at least two members".into()));
    }
    let avg = average_rank_one(model)?;
    let probs = softmax_temp(&avg.logits(&test.x)?, 1.0)?;
    Ok(TracePoint {
        step,
        div_train: diversity(model, &train.x)?,
        div_test: diversity(model, &test.x)?,
        avg_test_nll: nll(&probs, &test.y)?.mean,
    })
}
