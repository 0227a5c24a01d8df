//! Nesterov SGD, warmup + cosine learning-rate schedule, and teacher training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::distill::soft_cross_entropy;
use crate::error::{Error, Result};
use crate::nets::{Mlp, ModelSpec};
use crate::{par, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            epochs: 200,
            warmup_epochs: 5,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be < epochs");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).max(1)
    }
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Rises linearly from `0.01·base_lr` to `base_lr` over the warmup epochs, then
/// follows `base_lr · ½(1 + cos(π·progress))` over the remaining steps.
pub fn lr_at(cfg: &OptimConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    if step < warm {
        return cfg.base_lr * (0.01 + 0.99 * step as f64 / warm as f64);
    }
    let span = (cfg.epochs * steps_per_epoch - warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One Nesterov step in place. Weight decay is folded into the gradient.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("params {}, grads {}, velocity {}", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v - lr * g;
        *p += momentum * *v - lr * g;
        if !p.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    Ok(())
}

/// Velocity buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[&Tensor], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Updates every parameter; `decay[i]` selects whether weight decay
    /// applies to parameter `i`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64, decay: &[bool]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::shape("Sgd::step", "parameter list length changed"));
        }
        for (i, p) in params.into_iter().enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            sgd_step(p.data_mut(), &grads[i], &mut self.velocity[i], lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

/// Row indices of every minibatch of one epoch, after a full shuffle.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch cross-entropy.
    pub loss: f64,
    /// Accuracy of the minibatch predictions made during the epoch.
    pub acc: f64,
}

/// Trains `model` with cross-entropy to the labels.
pub fn train_classifier(model: &mut Mlp, data: &Dataset, cfg: &OptimConfig, seed: u64) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let onehot = data.one_hot();
    let mut order = rng::stream(seed, rng::SHUFFLE);
    let mut opt = Sgd::new(&model.params(), cfg.momentum, cfg.weight_decay);
    let decay = vec![true; model.params().len()];
    let spe = cfg.steps_per_epoch(data.len());
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut order);
        for batch in &batches {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let x = tape.constant(&data.x.select_rows(batch)?);
            let logits = model.forward(&mut tape, &params, x)?;
            let loss = soft_cross_entropy(&mut tape, logits, &onehot.select_rows(batch)?, 1.0)?;
            loss_sum += tape.item(loss);
            let out = tape.value(logits);
            let k = data.num_classes;
            for (r, &i) in batch.iter().enumerate() {
                if crate::metrics::argmax(&out[r * k..(r + 1) * k]) == data.y[i] {
                    correct += 1;
                }
            }
            let g = tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| g.get_or_zeros(v, p.numel()))
                .collect();
            opt.step(model.params_mut(), &grads, lr_at(cfg, step, spe), &decay)?;
            step += 1;
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / batches.len() as f64,
            acc: correct as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

/// A trained teacher with its per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    pub model: Mlp,
    pub history: Vec<EpochStats>,
}

/// Trains `m` teachers, teacher `i` seeded with `cfg.seed + i`.
pub fn train_teachers_logged(spec: &ModelSpec, data: &Dataset, m: usize, cfg: &OptimConfig) -> Result<Vec<TrainedTeacher>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one teacher".into()));
    }
    cfg.validate()?;
    par::map_range(m, |i| {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut model = Mlp::init(spec, &mut rng::stream(seed, rng::INIT))?;
        let history = train_classifier(&mut model, data, cfg, seed)?;
        Ok(TrainedTeacher { model, history })
    })
    .into_iter()
    .collect()
}

pub fn train_teachers(spec: &ModelSpec, data: &Dataset, m: usize, cfg: &OptimConfig) -> Result<Vec<Mlp>> {
    Ok(train_teachers_logged(spec, data, m, cfg)?
        .into_iter()
        .map(|t| t.model)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = OptimConfig::default();
        let spe = 10;
        assert!((lr_at(&cfg, 0, spe) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 50, spe), 0.1);
        let left = cfg.base_lr * (0.01 + 0.99 * (50.0 - 1e-9) / 50.0);
        assert!((left - lr_at(&cfg, 50, spe)).abs() < 1e-10);
        let t = (200 - 5) * spe;
        let last = lr_at(&cfg, 200 * spe - 1, spe);
        let want = 0.1 * 0.5 * (1.0 + (std::f64::consts::PI * (t - 1) as f64 / t as f64).cos());
        assert!((last - want).abs() < 1e-15);
    }

    #[test]
    fn lr_monotone_after_warmup() {
        let cfg = OptimConfig {
            epochs: 100,
            warmup_epochs: 5,
            ..OptimConfig::default()
        };
        let spe = 10;
        let lrs: Vec<f64> = (50..1000).map(|s| lr_at(&cfg, s, spe)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [0.95, -2.1]);

        let mut v = [1.0];
        let mut p = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v[0] - 0.9).abs() < 1e-15);

        assert!(sgd_step(&mut [0.0], &[0.0, 1.0], &mut [0.0], 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn nesterov_hand_trace() {
        // f(p) = p²/2, g = p.
        let mut p = [1.0];
        let mut v = [0.0];
        let g = p[0];
        sgd_step(&mut p, &[g], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.81).abs() < 1e-12);
        let g = p[0];
        sgd_step(&mut p, &[g], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.5751).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = OptimConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.warmup_epochs = cfg.epochs;
        assert!(cfg.validate().is_err());
    }
}
