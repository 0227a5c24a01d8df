//! Experiment files and data specifications.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use distilab::data::{make_mixture, MixtureConfig, Splits};
use distilab::distill::{AekdConfig, DistillConfig, Method};
use distilab::nets::ModelSpec;
use distilab::optim::OptimConfig;
use distilab::perturb::PerturbationKind;
use serde::{Deserialize, Serialize};

/// Mixture generator parameters plus an optional fixed data seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub radius: f64,
    /// Data seed; the run seed is used when unset.
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        let m = MixtureConfig::default();
        Self {
            num_classes: m.num_classes,
            dim: m.dim,
            n_per_class: m.n_per_class,
            spread: m.spread,
            radius: m.radius,
            seed: None,
        }
    }
}

impl DataSection {
    pub fn mixture(&self) -> MixtureConfig {
        MixtureConfig {
            num_classes: self.num_classes,
            dim: self.dim,
            n_per_class: self.n_per_class,
            spread: self.spread,
            radius: self.radius,
        }
    }

    pub fn seed_for(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default = "RunConfig::default_seeds")]
    pub seeds: Vec<u64>,
    /// Number of teachers.
    #[serde(default = "RunConfig::default_teachers")]
    pub teachers: usize,
    /// Diversity trace period in optimizer steps; once per epoch when 0.
    #[serde(default)]
    pub trace_every: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub aekd: Option<AekdConfig>,
}

impl RunConfig {
    fn default_seeds() -> Vec<u64> {
        vec![0]
    }

    fn default_teachers() -> usize {
        2
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.teachers == 0 {
            bail!("teachers must be >= 1");
        }
        self.mixture_checks()?;
        self.optim.validate()?;
        self.distill.validate()?;
        self.model_spec().validate()?;
        let kind = self.distill.perturbation;
        if kind.needs_student_members() && !self.method.has_be_student() {
            bail!("perturbation {kind} needs a BatchEnsemble student (method be or latentbe)");
        }
        if matches!(kind, PerturbationKind::Tdiv | PerturbationKind::TdivSdiv) && self.teachers < 2 {
            bail!("perturbation {kind} needs at least two teachers");
        }
        if self.method.has_be_student() && self.distill.members != self.teachers {
            bail!(
                "method {} needs one student member per teacher ([distill] members = {}, teachers = {})",
                self.method,
                self.distill.members,
                self.teachers
            );
        }
        if self.method == Method::ProxyEnd2 && self.teachers < 2 {
            bail!("method proxy_end2 needs at least two teachers");
        }
        if self.method == Method::Aekd {
            let c = self.aekd_config().c;
            if !(c <= 1.0 && c >= 1.0 / self.teachers as f64 - 1e-12) {
                bail!("[aekd] c = {c} outside [1/M, 1]");
            }
        }
        Ok(())
    }

    fn mixture_checks(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes < 2 || d.dim < 2 || d.n_per_class == 0 || !(d.spread > 0.0) {
            bail!("[data] needs num_classes >= 2, dim >= 2, n_per_class >= 1, spread > 0");
        }
        Ok(())
    }

    /// Plain teacher/student architecture.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::plain(self.data.dim, self.data.num_classes, self.model.hidden.clone())
    }

    pub fn aekd_config(&self) -> AekdConfig {
        self.aekd.unwrap_or(AekdConfig { c: 1.0 })
    }

    pub fn optim_for(&self, seed: u64) -> OptimConfig {
        OptimConfig { seed, ..self.optim.clone() }
    }

    pub fn splits(&self, seed: u64) -> Result<Splits> {
        Ok(make_mixture(&self.data.mixture(), self.data.seed_for(seed))?)
    }
}

/// Where evaluation data comes from: either `mixture[:key=value,...]` or the
/// path of a run config (its `[data]` section and first seed).
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub data: DataSection,
    pub seed: u64,
}

impl DataSpec {
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(rest) = text.strip_prefix("mixture") {
            let mut data = DataSection::default();
            let mut seed = 0;
            let args = match rest.strip_prefix(':') {
                Some(a) => a,
                None if rest.is_empty() => "",
                None => bail!("malformed data spec {text:?}"),
            };
            for kv in args.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("expected key=value in data spec, got {kv:?}"))?;
                let bad = |e: &dyn std::fmt::Display| anyhow!("data spec {k}={v}: {e}");
                match k.trim() {
                    "seed" => seed = v.parse().map_err(|e| bad(&e))?,
                    "num_classes" | "k" => data.num_classes = v.parse().map_err(|e| bad(&e))?,
                    "dim" | "d" => data.dim = v.parse().map_err(|e| bad(&e))?,
                    "n_per_class" | "n" => data.n_per_class = v.parse().map_err(|e| bad(&e))?,
                    "spread" => data.spread = v.parse().map_err(|e| bad(&e))?,
                    "radius" => data.radius = v.parse().map_err(|e| bad(&e))?,
                    other => bail!("unknown data spec key {other:?}"),
                }
            }
            data.seed = Some(seed);
            return Ok(Self { data, seed });
        }
        let path = Path::new(text);
        if !path.is_file() {
            bail!("data spec {text:?} is neither mixture[:key=value,...] nor a config file");
        }
        let cfg = RunConfig::load(path)?;
        let seed = cfg.data.seed_for(cfg.seeds[0]);
        Ok(Self { data: cfg.data, seed })
    }

    pub fn splits(&self) -> Result<Splits> {
        Ok(make_mixture(&self.data.mixture(), self.seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str("method = \"kd\"").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.distill.tau, 4.0);
        assert_eq!(cfg.distill.alpha, 1.0);
        assert_eq!(cfg.model.hidden, vec![64, 64]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("method = \"kd\"\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("method = \"kd\"\n[optim]\nlr = 1").is_err());
        assert!(toml::from_str::<RunConfig>("method = \"nope\"").is_err());
    }

    #[test]
    fn tdiv_sdiv_needs_be_student() {
        let cfg: RunConfig = toml::from_str("method = \"kd\"\n[distill]\nperturbation = \"tdiv_sdiv\"").unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = toml::from_str("method = \"latentbe\"\n[distill]\nperturbation = \"tdiv_sdiv\"").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn be_members_must_match_teachers() {
        let cfg: RunConfig = toml::from_str("method = \"be\"\nteachers = 3").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn data_spec_inline() {
        let s = DataSpec::parse("mixture:seed=4,n=50,spread=0.5").unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.data.n_per_class, 50);
        assert_eq!(s.data.spread, 0.5);
        assert_eq!(DataSpec::parse("mixture").unwrap().seed, 0);
        assert!(DataSpec::parse("mixture:wat=1").is_err());
        assert!(DataSpec::parse("mixturex").is_err());
        assert!(DataSpec::parse("/no/such/file.toml").is_err());
    }
}
