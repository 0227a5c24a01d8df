//! Evaluation metrics: accuracy, NLL, ECE, temperature scaling, functional
//! diversity, and predictive-entropy histograms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_temp, Tensor};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{Classifier, MemberSet};
use crate::par;

/// Probabilities below this are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_ENTROPY_BINS: usize = 30;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn check_labels(op: &'static str, probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(Error::shape(op, format!("{:?} predictions for {} labels", probs.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= probs.cols()) {
        return Err(Error::InvalidArgument(format!("{op}: label {bad} out of range")));
    }
    Ok(())
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    check_labels("accuracy", probs, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nll {
    /// `−Σ ln p(y|x)` over the dataset.
    pub sum: f64,
    pub mean: f64,
    /// Number of true-class probabilities raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<Nll> {
    check_labels("nll", probs, labels)?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument("nll of an empty dataset".into()));
    }
    let mut sum = 0.0;
    let mut clamped = 0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i)[y];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        sum -= p.max(PROB_FLOOR).ln();
    }
    Ok(Nll {
        sum,
        mean: sum / labels.len() as f64,
        clamped,
    })
}

/// Bin of confidence `conf` among `bins` bins `((l−1)/L, l/L]`, 0-based;
/// confidence 0 goes to the first bin.
pub fn ece_bin(conf: f64, bins: usize) -> usize {
    let l = bins as f64;
    let mut idx = ((conf * l).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    // Guard against rounding in conf·L: compare with the exact edges.
    while idx > 0 && conf <= idx as f64 / l {
        idx -= 1;
    }
    while idx + 1 < bins && conf > (idx + 1) as f64 / l {
        idx += 1;
    }
    idx
}

pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    check_labels("ece", probs, labels)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("ece of an empty dataset".into()));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let b = ece_bin(row[pred], bins);
        count[b] += 1;
        conf_sum[b] += row[pred];
        if pred == y {
            hits[b] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let c = count[b] as f64;
            total += (c / n) * (hits[b] as f64 / c - conf_sum[b] / c).abs();
        }
    }
    Ok(total)
}

/// Mean NLL of `softmax(logits / tau)`, computed in log space.
pub fn nll_at_temperature(logits: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let k = logits.cols();
    let logp = log_softmax_rows(logits.data(), k, tau);
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -logp[i * k + y].max(PROB_FLOOR.ln()))
        .sum();
    sum / labels.len() as f64
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Temperature minimizing the mean NLL of `softmax(logits/τ)`.
///
/// A 100-point log grid over [0.05, 10] (widened ×2 at a boundary hit, at
/// most three times) is refined by golden-section search to `|Δτ| < 1e-4`.
/// The returned value never has larger NLL than τ = 1.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("temperature fit needs validation data".into()));
    }
    check_labels("fit_temperature", logits, labels)?;
    let f = |tau: f64| nll_at_temperature(logits, labels, tau);
    let (mut lo, mut hi) = (0.05, 10.0);
    let mut grid = log_grid(lo, hi, 100);
    let mut vals: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let mut best = argmin(&vals);
    for _ in 0..3 {
        if best == 0 {
            lo /= 2.0;
        } else if best == grid.len() - 1 {
            hi *= 2.0;
        } else {
            break;
        }
        grid = log_grid(lo, hi, 100);
        vals = grid.iter().map(|&t| f(t)).collect();
        best = argmin(&vals);
    }
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a >= 1e-4 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let candidates = [(f(mid), mid), (vals[best], grid[best]), (f(1.0), 1.0)];
    let pick = candidates
        .iter()
        .fold(candidates[0], |acc, &c| if c.0 < acc.0 { c } else { acc });
    Ok(pick.1)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// NLL and ECE of the temperature-scaled predictions.
pub fn calibrated_metrics(logits: &Tensor, labels: &[usize], tau_star: f64) -> Result<(Nll, f64)> {
    let probs = softmax_temp(logits, tau_star)?;
    Ok((nll(&probs, labels)?, ece(&probs, labels, DEFAULT_ECE_BINS)?))
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()))
        .sum()
}

/// `Σ exp(lp) (lp − lq)` over one row of log-probabilities.
pub fn kl_log(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

/// Mean over samples of `Σ_{i≠j} KL(p_i‖p_j) / (M(M−1))` for per-member
/// probability matrices.
pub fn diversity_probs(probs: &[Tensor]) -> Result<f64> {
    let m = probs.len();
    if m < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two members".into()));
    }
    let n = probs[0].rows();
    if probs.iter().any(|p| p.shape() != probs[0].shape()) {
        return Err(Error::shape("diversity", "member predictions differ in shape"));
    }
    let per_sample = |b: usize| {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += kl(probs[i].row(b), probs[j].row(b));
                }
            }
        }
        s / (m * (m - 1)) as f64
    };
    let total = par::chunked_sum(n, |s, e| (s..e).map(per_sample).sum());
    Ok(total / n as f64)
}

/// Mean pairwise-KL diversity of `members` on `x` (temperature 1), computed
/// from log-probabilities.
pub fn diversity<S: MemberSet + ?Sized>(members: &S, x: &Tensor) -> Result<f64> {
    let m = members.member_count();
    if m < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two members".into()));
    }
    let logp = member_log_probs(members, x)?;
    let k = logp[0].cols();
    let n = x.rows();
    let total = par::chunked_sum(n, |s, e| {
        let mut acc = 0.0;
        for b in s..e {
            let mut row = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        row += kl_log(&logp[i].data()[b * k..(b + 1) * k], &logp[j].data()[b * k..(b + 1) * k]);
                    }
                }
            }
            acc += row / (m * (m - 1)) as f64;
        }
        acc
    });
    Ok(total / n as f64)
}

/// Per-member log-probabilities at temperature 1.
pub fn member_log_probs<S: MemberSet + ?Sized>(members: &S, x: &Tensor) -> Result<Vec<Tensor>> {
    (0..members.member_count())
        .map(|m| {
            let z = members.member_logits(m, x)?;
            Tensor::new(z.shape().to_vec(), log_softmax_rows(z.data(), z.cols(), 1.0))
        })
        .collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    /// `bins + 1` edges over `[0, ln K]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub tag: Split,
    pub mean: f64,
}

pub fn entropy_histogram(probs: &Tensor, bins: usize, tag: Split) -> Result<EntropyHistogram> {
    if bins == 0 || probs.rows() == 0 {
        return Err(Error::InvalidArgument("entropy histogram needs bins and samples".into()));
    }
    let k = probs.cols();
    let top = (k as f64).ln();
    let edges = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    let mut sum = 0.0;
    for i in 0..probs.rows() {
        let h = entropy(probs.row(i));
        sum += h;
        let b = ((h / top * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(EntropyHistogram {
        edges,
        counts,
        tag,
        mean: sum / probs.rows() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nll: f64,
    pub nll_mean: f64,
    pub ece: f64,
    pub tau_star: f64,
    pub cnll: f64,
    pub cnll_mean: f64,
    pub cece: f64,
    pub n: usize,
    pub bins: usize,
    /// Clamp events across the uncalibrated and calibrated NLL.
    pub clamped: usize,
}

/// Metrics of predictive logits on `test` with τ* fitted on `val_logits`.
pub fn report_from_logits(val_logits: &Tensor, val: &Dataset, test_logits: &Tensor, test: &Dataset) -> Result<MetricsReport> {
    let tau_star = fit_temperature(val_logits, &val.y)?;
    let probs = softmax_temp(test_logits, 1.0)?;
    let base = nll(&probs, &test.y)?;
    let (cal, cece) = calibrated_metrics(test_logits, &test.y, tau_star)?;
    Ok(MetricsReport {
        acc: accuracy(&probs, &test.y)?,
        nll: base.sum,
        nll_mean: base.mean,
        ece: ece(&probs, &test.y, DEFAULT_ECE_BINS)?,
        tau_star,
        cnll: cal.sum,
        cnll_mean: cal.mean,
        cece,
        n: test.len(),
        bins: DEFAULT_ECE_BINS,
        clamped: base.clamped + cal.clamped,
    })
}

pub fn evaluate(model: &dyn Classifier, val: &Dataset, test: &Dataset) -> Result<MetricsReport> {
    report_from_logits(&model.predictive_logits(&val.x)?, val, &model.predictive_logits(&test.x)?, test)
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub split: String,
    pub acc: f64,
    pub nll_sum: f64,
    pub nll_mean: f64,
    pub ece: f64,
    pub tau_star: f64,
    pub cnll_mean: f64,
    pub cece: f64,
    pub mean_div: Option<f64>,
}

impl MetricsRow {
    pub fn new(run_id: &str, split: &str, r: &MetricsReport, mean_div: Option<f64>) -> Self {
        Self {
            run_id: run_id.to_string(),
            split: split.to_string(),
            acc: r.acc,
            nll_sum: r.nll,
            nll_mean: r.nll_mean,
            ece: r.ece,
            tau_star: r.tau_star,
            cnll_mean: r.cnll_mean,
            cece: r.cece,
            mean_div,
        }
    }
}

/// One line of the entropy-histogram CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub run_id: String,
    pub tag: Split,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl EntropyHistogram {
    pub fn rows(&self, run_id: &str) -> Vec<HistogramRow> {
        self.counts
            .iter()
            .enumerate()
            .map(|(b, &count)| HistogramRow {
                run_id: run_id.to_string(),
                tag: self.tag,
                bin: b,
                lo: self.edges[b],
                hi: self.edges[b + 1],
                count,
            })
            .collect()
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let p = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&t(&[vec![0.5, 0.5]]), &[0]).unwrap(), 1.0);
        assert!(accuracy(&p, &[]).is_err());
    }

    #[test]
    fn nll_examples() {
        let p = t(&[vec![1.0, 0.0]]);
        assert_eq!(nll(&p, &[0]).unwrap().sum, 0.0);
        let r = nll(&t(&[vec![0.5, 0.5]]), &[1]).unwrap();
        assert!((r.sum - 2f64.ln()).abs() < 1e-15);
        let r = nll(&p, &[1]).unwrap();
        assert_eq!(r.clamped, 1);
        assert!(r.sum.is_finite());
    }

    #[test]
    fn ece_two_sample_case() {
        let p = t(&[vec![0.8, 0.2], vec![0.6, 0.4]]);
        assert!((ece(&p, &[0, 1], 15).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ece_bins_are_right_closed() {
        assert_eq!(ece_bin(0.0, 15), 0);
        assert_eq!(ece_bin(1.0, 15), 14);
        assert_eq!(ece_bin(1.0 / 15.0, 15), 0);
        assert_eq!(ece_bin(2.0 / 15.0, 15), 1);
        assert_eq!(ece_bin(0.5, 2), 0);
        assert_eq!(ece_bin(0.500_000_1, 2), 1);
    }

    #[test]
    fn calibrated_at_unit_temperature() {
        let z = t(&[vec![1.0, 0.0, -1.0], vec![0.2, 0.3, 0.1]]);
        let labels = [0, 2];
        let probs = softmax_temp(&z, 1.0).unwrap();
        let (c, ce) = calibrated_metrics(&z, &labels, 1.0).unwrap();
        assert_eq!(c, nll(&probs, &labels).unwrap());
        assert_eq!(ce, ece(&probs, &labels, 15).unwrap());
    }

    #[test]
    fn temperature_of_calibrated_logits_is_one() {
        let p = [0.5f64, 0.25, 0.25];
        let row: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for y in [0, 0, 1, 2].repeat(25) {
            rows.push(row.clone());
            labels.push(y);
        }
        let z = t(&rows);
        let tau = fit_temperature(&z, &labels).unwrap();
        assert!((tau - 1.0).abs() < 1e-2, "tau* = {tau}");

        let z2 = Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let tau2 = fit_temperature(&z2, &labels).unwrap();
        assert!((tau2 - 2.0 * tau).abs() < 2e-3, "{tau2} vs {tau}");
    }

    #[test]
    fn diversity_pair_case() {
        let a = t(&[vec![0.5, 0.5]]);
        let b = t(&[vec![0.9, 0.1]]);
        let d = diversity_probs(&[a.clone(), b.clone()]).unwrap();
        assert!((d - 0.439_445).abs() < 1e-6);
        assert_eq!(diversity_probs(&[b.clone(), a.clone()]).unwrap(), d);
        assert_eq!(diversity_probs(&[a.clone(), a.clone()]).unwrap(), 0.0);
        assert!(diversity_probs(&[a]).is_err());
    }

    #[test]
    fn entropy_histogram_extremes() {
        let onehot = t(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let h = entropy_histogram(&onehot, 30, Split::Test).unwrap();
        assert_eq!(h.counts[0], 2);
        let third = 1.0 / 3.0;
        let uniform = t(&[vec![third; 3]]);
        let h = entropy_histogram(&uniform, 30, Split::Ood).unwrap();
        assert_eq!(h.counts[29], 1);
        assert_eq!(h.edges.len(), 31);
    }
}
