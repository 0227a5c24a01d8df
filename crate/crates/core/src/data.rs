//! Synthetic Gaussian-mixture classification data, corruptions, shifted
//! out-of-distribution sets, and CSV storage.

use std::fmt;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Free-form description of how the data was produced.
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, split: Split, provenance: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::shape("Dataset::new", format!("{:?} inputs for {} labels", x.shape(), y.len())));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for K = {num_classes}")));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// `[N × K]` indicator matrix of the labels.
    pub fn one_hot(&self) -> Tensor {
        let k = self.num_classes;
        let mut t = Tensor::zeros(&[self.len(), k]);
        for (i, &c) in self.y.iter().enumerate() {
            t.data_mut()[i * k + c] = 1.0;
        }
        t
    }

    /// Rows `idx` as a new dataset with the same tag.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance.clone(),
        })
    }

    /// Population standard deviation of each input dimension.
    pub fn feature_std(&self) -> Vec<f64> {
        moments(&self.x).1
    }

    /// Mean of the per-dimension standard deviations.
    pub fn mean_std(&self) -> f64 {
        let s = self.feature_std();
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// CSV text: header `x0,…,x{D−1},y`, values with 17 significant digits.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (i, &label) in self.y.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii output"))
    }

    /// 64-bit FNV-1a over the CSV serialization.
    pub fn digest(&self) -> Result<u64> {
        let mut h = FnvHasher::default();
        h.write(self.to_csv_string()?.as_bytes());
        Ok(h.finish())
    }
}

fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    #[serde(default = "MixtureConfig::default_k")]
    pub num_classes: usize,
    #[serde(default = "MixtureConfig::default_d")]
    pub dim: usize,
    #[serde(default = "MixtureConfig::default_n")]
    pub n_per_class: usize,
    #[serde(default = "MixtureConfig::default_spread")]
    pub spread: f64,
    /// Radius of the ring carrying the class means, before standardization.
    #[serde(default = "MixtureConfig::default_radius")]
    pub radius: f64,
}

impl MixtureConfig {
    fn default_k() -> usize {
        3
    }
    fn default_d() -> usize {
        2
    }
    fn default_n() -> usize {
        500
    }
    fn default_spread() -> f64 {
        0.6
    }
    fn default_radius() -> f64 {
        1.75
    }
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 2,
            n_per_class: 500,
            spread: 0.6,
            radius: 1.75,
        }
    }
}

/// Train-statistics affine map applied to every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (mean, std) = moments(x);
        let std = std.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.cols() != d {
            return Err(Error::shape("Standardizer::apply", format!("{} columns, expected {d}", x.cols())));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| (v - self.mean[idx % d]) / self.std[idx % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

/// Split sizes for `n` samples: validation `⌊n/10⌋`, test `⌊n/5⌋`, train the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let n_val = n / 10;
    let n_test = n / 5;
    (n - n_val - n_test, n_val, n_test)
}

fn ring_mean(k: usize, num_classes: usize, dim: usize, radius: f64) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
    let mut mu = vec![0.0; dim];
    mu[0] = radius * angle.cos();
    mu[1] = radius * angle.sin();
    mu
}

/// K-class isotropic Gaussian mixture with means on a ring in the first two
/// coordinates, shuffled, split 70/10/20 and standardized with train moments.
pub fn make_mixture(cfg: &MixtureConfig, seed: u64) -> Result<Splits> {
    if cfg.num_classes < 2 || cfg.dim < 2 {
        return Err(Error::InvalidArgument("mixture needs K >= 2 and D >= 2".into()));
    }
    if !(cfg.spread > 0.0 && cfg.spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be > 0, got {}", cfg.spread)));
    }
    if cfg.num_classes * cfg.n_per_class < 10 {
        return Err(Error::InvalidArgument(format!(
            "{} samples leave an empty validation split; need at least 10",
            cfg.num_classes * cfg.n_per_class
        )));
    }
    let mut r = rng::stream(seed, rng::DATA);
    let (k, d) = (cfg.num_classes, cfg.dim);
    let n = k * cfg.n_per_class;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for c in 0..k {
        let mu = ring_mean(c, k, d, cfg.radius);
        for _ in 0..cfg.n_per_class {
            for m in &mu {
                let z: f64 = StandardNormal.sample(&mut r);
                x.push(m + cfg.spread * z);
            }
            y.push(c);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SHUFFLE));
    let all = Dataset::new(Tensor::matrix(n, d, x)?, y, k, Split::Train, "")?;
    let (n_train, n_val, _) = split_sizes(n);
    let provenance = format!(
        "mixture K={k} D={d} n_per_class={} spread={} radius={} seed={seed}",
        cfg.n_per_class, cfg.spread, cfg.radius
    );
    let part = |range: &[usize], split: Split| -> Result<Dataset> {
        let mut ds = all.subset(range)?;
        ds.split = split;
        ds.provenance = provenance.clone();
        Ok(ds)
    };
    let mut train = part(&order[..n_train], Split::Train)?;
    let mut val = part(&order[n_train..n_train + n_val], Split::Val)?;
    let mut test = part(&order[n_train + n_val..], Split::Test)?;
    let standardizer = Standardizer::fit(&train.x);
    train.x = standardizer.apply(&train.x)?;
    val.x = standardizer.apply(&val.x)?;
    test.x = standardizer.apply(&test.x)?;
    Ok(Splits {
        train,
        val,
        test,
        standardizer,
    })
}

/// Adds Gaussian noise with per-dimension scale `0.1 · intensity · std`.
pub fn corrupt(dataset: &Dataset, intensity: u32, seed: u64) -> Result<Dataset> {
    if !(1..=5).contains(&intensity) {
        return Err(Error::InvalidArgument(format!("corruption intensity must be in 1..=5, got {intensity}")));
    }
    let std = dataset.feature_std();
    let d = std.len();
    let mut r = rng::stream(seed ^ u64::from(intensity), rng::NOISE);
    let data = dataset
        .x
        .data()
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let z: f64 = StandardNormal.sample(&mut r);
            v + 0.1 * f64::from(intensity) * std[idx % d] * z
        })
        .collect();
    let mut out = dataset.clone();
    out.x = Tensor::new(dataset.x.shape().to_vec(), data)?;
    out.provenance = format!("{} | corrupt intensity={intensity} seed={seed}", dataset.provenance);
    Ok(out)
}

/// Unit direction whose smallest angle to any class-mean direction is largest
/// among 256 random candidates.
fn ood_direction<R: Rng>(class_means: &[Vec<f64>], dim: usize, r: &mut R) -> Vec<f64> {
    let unit = |v: &[f64]| -> Option<Vec<f64>> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (n > 1e-12).then(|| v.iter().map(|a| a / n).collect())
    };
    let dirs: Vec<Vec<f64>> = class_means.iter().filter_map(|m| unit(m)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..256 {
        let cand: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let Some(u) = unit(&cand) else { continue };
        let max_cos = dirs
            .iter()
            .map(|d| d.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
            .fold(-1.0, f64::max);
        if best.as_ref().is_none_or(|(c, _)| max_cos < *c) {
            best = Some((max_cos, u));
        }
    }
    best.expect("at least one non-zero candidate").1
}

/// Draws a fresh sample from the reference mixture with every class mean
/// moved by `shift · std` along a direction pointing between the classes.
pub fn make_ood(reference: &Dataset, shift: f64, seed: u64) -> Result<Dataset> {
    if !(shift > 0.0 && shift.is_finite()) {
        return Err(Error::InvalidArgument(format!("shift must be > 0, got {shift}")));
    }
    let (k, d) = (reference.num_classes, reference.dim());
    let (global_mean, std) = moments(&reference.x);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in reference.y.iter().enumerate() {
        counts[c] += 1;
        sums[c].iter_mut().zip(reference.x.row(i)).for_each(|(s, v)| *s += v);
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let mut within = vec![0.0; d];
    for (i, &c) in reference.y.iter().enumerate() {
        for (j, v) in reference.x.row(i).iter().enumerate() {
            within[j] += (v - means[c][j]).powi(2);
        }
    }
    let within: Vec<f64> = within.iter().map(|v| (v / reference.len() as f64).sqrt()).collect();

    let mut r = rng::stream(seed, rng::NOISE);
    let centred: Vec<Vec<f64>> = means
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(m, _)| m.iter().zip(&global_mean).map(|(a, b)| a - b).collect())
        .collect();
    let u = ood_direction(&centred, d, &mut r);
    let mut x = Vec::with_capacity(reference.len() * d);
    for &c in &reference.y {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut r);
            x.push(means[c][j] + shift * std[j] * u[j] + within[j] * z);
        }
    }
    Dataset::new(
        Tensor::matrix(reference.len(), d, x)?,
        reference.y.clone(),
        k,
        Split::Ood,
        format!("{} | ood shift={shift} seed={seed}", reference.provenance),
    )
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_csv_string()?).map_err(|e| Error::io(path, e))
}

/// Reads a `x0,…,x{D−1},y` CSV file; errors carry 1-based file line numbers.
pub fn load_csv(path: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    let d = header.len() - 1;
    let expected: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("header must be x0,…,x{{D-1}},y; got {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        for field in rec.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            x.push(v);
        }
        let label = rec[d].trim();
        let c: usize = label
            .parse()
            .map_err(|_| parse_err(line, format!("label {label:?} is not a non-negative integer")))?;
        if c >= num_classes {
            return Err(parse_err(line, format!("label {c} out of range for K = {num_classes}")));
        }
        y.push(c);
    }
    if y.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    Dataset::new(
        Tensor::matrix(y.len(), d, x)?,
        y,
        num_classes,
        split,
        format!("csv {}", path.display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_contract() {
        assert_eq!(split_sizes(1500), (1050, 150, 300));
        assert_eq!(split_sizes(7), (6, 0, 1));
        let s = make_mixture(&MixtureConfig::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1050, 150, 300));
    }

    #[test]
    fn train_split_is_standardized() {
        let s = make_mixture(&MixtureConfig::default(), 1).unwrap();
        let (mean, std) = moments(&s.train.x);
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert!(std.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn same_seed_same_data() {
        let a = make_mixture(&MixtureConfig::default(), 9).unwrap();
        let b = make_mixture(&MixtureConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.digest().unwrap(), b.train.digest().unwrap());
        let c = make_mixture(&MixtureConfig::default(), 10).unwrap();
        assert_ne!(a.train.digest().unwrap(), c.train.digest().unwrap());
    }

    #[test]
    fn rejects_bad_generator_args() {
        let cfg = MixtureConfig {
            spread: 0.0,
            ..MixtureConfig::default()
        };
        assert!(make_mixture(&cfg, 0).is_err());
        let cfg = MixtureConfig {
            dim: 1,
            ..MixtureConfig::default()
        };
        assert!(make_mixture(&cfg, 0).is_err());
    }

    #[test]
    fn corrupt_contract() {
        let s = make_mixture(&MixtureConfig::default(), 2).unwrap();
        assert!(corrupt(&s.test, 0, 1).is_err());
        assert!(corrupt(&s.test, 6, 1).is_err());
        let c = corrupt(&s.test, 3, 1).unwrap();
        assert_eq!(c.y, s.test.y);
        assert_ne!(c.x, s.test.x);
        assert_eq!(c, corrupt(&s.test, 3, 1).unwrap());
    }

    #[test]
    fn ood_contract() {
        let s = make_mixture(&MixtureConfig::default(), 2).unwrap();
        assert!(make_ood(&s.test, 0.0, 1).is_err());
        let a = make_ood(&s.test, 5.0, 1).unwrap();
        assert_eq!(a, make_ood(&s.test, 5.0, 1).unwrap());
        assert_eq!(a.split, Split::Ood);
        let (m, _) = moments(&a.x);
        let shift = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(shift > 3.0, "shifted mean norm {shift}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_mixture(&MixtureConfig::default(), 4).unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&s.val, &p).unwrap();
        let back = load_csv(&p, 3, Split::Val).unwrap();
        assert_eq!(back.x, s.val.x);
        assert_eq!(back.y, s.val.y);

        std::fs::write(&p, "").unwrap();
        assert!(load_csv(&p, 3, Split::Val).is_err());

        let mut text = String::from("x0,x1,y\n");
        for _ in 0..5 {
            text.push_str("0.1,0.2,1\n");
        }
        text.push_str("0.1,2\n");
        std::fs::write(&p, text).unwrap();
        match load_csv(&p, 3, Split::Val) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&p, "x0,x1,y\n0.1,0.2,3\n").unwrap();
        assert!(matches!(load_csv(&p, 3, Split::Val), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "x0,x1,y\n0.1,0.2,1.5\n").unwrap();
        assert!(load_csv(&p, 3, Split::Val).is_err());
    }
}
