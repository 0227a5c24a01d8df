use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use distilab::autodiff::softmax_temp;
use distilab::data::{corrupt, make_ood, Dataset, Split, Splits};
use distilab::distill::{
    be_student_spec, distill_aekd, distill_be, distill_kd, distill_latentbe, distill_proxy_end2, DistillConfig, Method,
    RunManifest,
};
use distilab::metrics::{
    diversity, entropy_histogram, evaluate, write_csv, EntropyHistogram, MetricsRow, DEFAULT_ENTROPY_BINS,
};
use distilab::nets::{average_rank_one, checkpoint_load, checkpoint_save, BeMlp, Mlp, Model};
use distilab::optim::train_teachers_logged;
use distilab::perturb::{
    ascent_fraction, diversity_perturb_with, diversity_shift, draw_pairs, perturb_batch, DiagRow, PerturbRngs,
    PerturbationKind,
};
use distilab::subspace::{default_grid, line_scan, DiversityTrace};
use distilab::{par, rng};
use serde::Serialize;

use crate::config::{DataSpec, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const STUDENT: &str = "student.json";
pub const BE_STUDENT: &str = "be_student.json";
pub const TRACE: &str = "trace.csv";

pub fn teacher_file(i: usize) -> String {
    format!("teacher_{i}.json")
}

/// Output directory of one seed.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn manifest(command: &str, seed: u64, train: &Dataset, config: &impl Serialize) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, seed, train, serde_json::to_value(config)?)?;
    m.notes.push(format!("threads={}", crate::threads()));
    Ok(m)
}

fn save_model(model: &Model, dir: &Path, name: &str, outputs: &mut Vec<String>) -> Result<()> {
    checkpoint_save(model, &dir.join(name))?;
    outputs.push(name.to_string());
    Ok(())
}

pub fn train_teachers_cmd(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.model_spec();
    for &seed in &cfg.seeds {
        let splits = cfg.splits(seed)?;
        let ocfg = cfg.optim_for(seed);
        let trained = train_teachers_logged(&spec, &splits.train, cfg.teachers, &ocfg)?;
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        let mut m = manifest("train-teachers", seed, &splits.train, &cfg)?;
        m.inputs.push(config.display().to_string());
        let mut history = Vec::new();
        for (i, t) in trained.into_iter().enumerate() {
            for e in &t.history {
                println!("seed {seed} teacher {i} epoch {} loss {:.6} acc {:.4}", e.epoch, e.loss, e.acc);
                history.push(HistoryRow {
                    teacher: i,
                    epoch: e.epoch,
                    loss: e.loss,
                    acc: e.acc,
                });
            }
            save_model(&Model::Plain(t.model), &dir, &teacher_file(i), &mut m.outputs)?;
        }
        write_csv(&dir.join("history.csv"), &history)?;
        m.outputs.push("history.csv".into());
        m.save(&dir.join(MANIFEST))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    teacher: usize,
    epoch: usize,
    loss: f64,
    acc: f64,
}

/// Teacher directory for `seed`: `root/seed_<seed>` when present, else `root`.
fn teacher_dir(root: &Path, seed: u64) -> PathBuf {
    let nested = seed_dir(root, seed);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Loads `teacher_0.json, teacher_1.json, ...` from `dir`.
pub fn load_teachers(dir: &Path, expected: Option<&distilab::nets::ModelSpec>) -> Result<Vec<Mlp>> {
    let mut teachers = Vec::new();
    loop {
        let path = dir.join(teacher_file(teachers.len()));
        if !path.is_file() {
            break;
        }
        match checkpoint_load(&path, expected)? {
            Model::Plain(m) => teachers.push(m),
            Model::BatchEnsemble(_) => bail!("{} is not a plain teacher checkpoint", path.display()),
        }
    }
    if teachers.is_empty() {
        bail!("no teacher checkpoints (teacher_0.json, ...) in {}", dir.display());
    }
    Ok(teachers)
}

pub fn distill_cmd(config: &Path, teachers_root: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.model_spec();
    for &seed in &cfg.seeds {
        let tdir = teacher_dir(teachers_root, seed);
        let teachers = load_teachers(&tdir, Some(&spec))?;
        if teachers.len() != cfg.teachers {
            bail!(
                "found {} teacher checkpoints in {} but the config expects M = {}",
                teachers.len(),
                tdir.display(),
                cfg.teachers
            );
        }
        let splits = cfg.splits(seed)?;
        let ocfg = cfg.optim_for(seed);
        let dcfg = &cfg.distill;
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        let mut m = manifest("distill", seed, &splits.train, &cfg)?;
        m.inputs.push(config.display().to_string());
        m.inputs.extend((0..teachers.len()).map(|i| tdir.join(teacher_file(i)).display().to_string()));
        match cfg.method {
            Method::Kd => {
                let s = distill_kd(&teachers, &spec, &splits.train, dcfg, &ocfg)?;
                save_model(&Model::Plain(s), &dir, STUDENT, &mut m.outputs)?;
            }
            Method::Aekd => {
                let s = distill_aekd(&teachers, &spec, &splits.train, dcfg, &ocfg, &cfg.aekd_config())?;
                save_model(&Model::Plain(s), &dir, STUDENT, &mut m.outputs)?;
            }
            Method::ProxyEnd2 => {
                let s = distill_proxy_end2(&teachers, &spec, &splits.train, dcfg, &ocfg)?;
                save_model(&Model::Plain(s), &dir, STUDENT, &mut m.outputs)?;
            }
            Method::Be => {
                let be_spec = be_student_spec(&spec, teachers.len());
                let init = BeMlp::init(&be_spec, dcfg.rank_one_init, &mut rng::stream(seed, rng::INIT))?;
                let be = distill_be(&teachers, init, &splits.train, dcfg, &ocfg, None)?;
                save_model(&Model::BatchEnsemble(be), &dir, BE_STUDENT, &mut m.outputs)?;
            }
            Method::Latentbe => {
                let every = if cfg.trace_every == 0 {
                    ocfg.steps_per_epoch(splits.train.len())
                } else {
                    cfg.trace_every
                };
                let mut trace = DiversityTrace::new(every, &splits.train, &splits.test);
                let tracing = teachers.len() == 2;
                let (avg, be) = if tracing {
                    let mut obs = |step: usize, model: &BeMlp| trace.observe(step, model);
                    distill_latentbe(&teachers, &spec, &splits.train, dcfg, &ocfg, Some(&mut obs))?
                } else {
                    distill_latentbe(&teachers, &spec, &splits.train, dcfg, &ocfg, None)?
                };
                save_model(&Model::BatchEnsemble(be), &dir, BE_STUDENT, &mut m.outputs)?;
                save_model(&Model::Plain(avg), &dir, STUDENT, &mut m.outputs)?;
                if tracing {
                    write_csv(&dir.join(TRACE), &trace.points)?;
                    m.outputs.push(TRACE.into());
                }
            }
        }
        m.save(&dir.join(MANIFEST))?;
        println!("seed {seed}: {} student written to {}", cfg.method, dir.display());
    }
    Ok(())
}

pub fn average_cmd(model: &Path, out: &Path) -> Result<()> {
    match checkpoint_load(model, None)? {
        Model::BatchEnsemble(be) => Ok(checkpoint_save(&Model::Plain(average_rank_one(&be)?), out)?),
        Model::Plain(_) => bail!("{} is not a BatchEnsemble checkpoint", model.display()),
    }
}

fn split_of(splits: &Splits, split: Split) -> Result<&Dataset> {
    Ok(match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
        Split::Ood => bail!("use --ood to evaluate shifted data"),
    })
}

fn run_id(model: &Path) -> String {
    model.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn mean_div(model: &Model, data: &Dataset) -> Result<Option<f64>> {
    Ok(match model {
        Model::BatchEnsemble(be) if be.members() >= 2 => Some(diversity(be, &data.x)?),
        _ => None,
    })
}

/// Sibling path of `out` for the entropy histograms.
pub fn histogram_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_entropy.csv"))
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub data: &'a str,
    pub split: Split,
    pub ood: Option<f64>,
    pub corrupt: Option<u32>,
    pub out: &'a Path,
}

pub fn evaluate_cmd(args: &EvalArgs<'_>) -> Result<()> {
    let spec = DataSpec::parse(args.data)?;
    let splits = spec.splits()?;
    let model = checkpoint_load(args.model, None)?;
    let clf = model.as_classifier();
    if clf.input_dim() != splits.train.dim() || clf.num_classes() != splits.train.num_classes {
        bail!(
            "model expects D={}, K={} but the data has D={}, K={}",
            clf.input_dim(),
            clf.num_classes(),
            splits.train.dim(),
            splits.train.num_classes
        );
    }
    let base = split_of(&splits, args.split)?;
    let (data, label) = match args.corrupt {
        Some(c) => (corrupt(base, c, spec.seed)?, format!("{}_c{c}", args.split)),
        None => (base.clone(), args.split.to_string()),
    };
    let id = run_id(args.model);
    let report = evaluate(clf, &splits.val, &data)?;
    let mut rows = vec![MetricsRow::new(&id, &label, &report, mean_div(&model, &data)?)];
    println!(
        "{id} {label}: acc {:.4} nll {:.4} ece {:.4} tau* {:.3} cnll {:.4} cece {:.4}",
        report.acc, report.nll_mean, report.ece, report.tau_star, report.cnll_mean, report.cece
    );
    if let Some(shift) = args.ood {
        let ood = make_ood(&data, shift, spec.seed)?;
        let r = evaluate(clf, &splits.val, &ood)?;
        rows.push(MetricsRow::new(&id, "ood", &r, mean_div(&model, &ood)?));
        let hist = |d: &Dataset, tag: Split| -> Result<EntropyHistogram> {
            let probs = softmax_temp(&clf.predictive_logits(&d.x)?, 1.0)?;
            Ok(entropy_histogram(&probs, DEFAULT_ENTROPY_BINS, tag)?)
        };
        let (in_h, ood_h) = (hist(&data, data.split)?, hist(&ood, Split::Ood)?);
        println!("mean entropy: {label} {:.4} ood {:.4}", in_h.mean, ood_h.mean);
        let mut hrows = in_h.rows(&id);
        hrows.extend(ood_h.rows(&id));
        write_csv(&histogram_path(args.out), &hrows)?;
    }
    write_csv(args.out, &rows)?;
    Ok(())
}

pub fn line_scan_cmd(model: &Path, data: &str, out: &Path) -> Result<()> {
    let be = match checkpoint_load(model, None)? {
        Model::BatchEnsemble(be) if be.members() == 2 => be,
        Model::BatchEnsemble(be) => bail!("line-scan needs M = 2, {} has M = {}", model.display(), be.members()),
        Model::Plain(_) => bail!("{} is not a BatchEnsemble checkpoint", model.display()),
    };
    let splits = DataSpec::parse(data)?.splits()?;
    let scan = line_scan(&be, &splits.train, &splits.test, &default_grid())?;
    write_csv(out, &scan.points)?;
    println!("barrier {:.6}", scan.barrier);
    Ok(())
}

pub struct DiagArgs<'a> {
    pub teachers: &'a Path,
    pub student: &'a Path,
    pub data: &'a str,
    pub kind: &'a str,
    pub gamma: Option<f64>,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn perturb_diag_cmd(args: &DiagArgs<'_>) -> Result<()> {
    let kind: PerturbationKind = args.kind.parse()?;
    if kind == PerturbationKind::None {
        bail!("perturb-diag needs one of gaussian, ods, conf_ods, tdiv, tdiv_sdiv");
    }
    if args.batch_size == 0 {
        bail!("batch size must be >= 1");
    }
    let teachers = load_teachers(args.teachers, None)?;
    let student = match checkpoint_load(args.student, None)? {
        Model::BatchEnsemble(be) => be,
        Model::Plain(_) => bail!("{} is not a BatchEnsemble checkpoint", args.student.display()),
    };
    if student.members() != teachers.len() || teachers.len() < 2 {
        bail!(
            "need matching member counts of at least two (teachers {}, student {})",
            teachers.len(),
            student.members()
        );
    }
    let train = DataSpec::parse(args.data)?.splits()?.train;
    let dcfg = DistillConfig {
        tau: args.tau,
        perturbation: kind,
        gamma: args.gamma,
        ..DistillConfig::default()
    };
    dcfg.validate()?;
    let (tau, gamma) = (dcfg.perturbation_tau(), dcfg.gamma_for(&train));
    let ts = teachers.as_slice();
    let mut rngs = PerturbRngs::new(args.seed);
    let mut rows = Vec::new();
    for (step, (lo, hi)) in par::chunks(train.len(), args.batch_size).into_iter().enumerate() {
        let x = train.x.slice_rows(lo, hi)?;
        let pairs = draw_pairs(ts.len(), x.rows(), &mut rngs.pairs)?;
        // Diversity kinds report ascent of the estimator they follow; the
        // others report the teacher pair estimator under the same pairs.
        let (eps, frac) = match kind {
            PerturbationKind::Tdiv | PerturbationKind::TdivSdiv => {
                let s = (kind == PerturbationKind::TdivSdiv).then_some(&student);
                let eps = diversity_perturb_with(ts, s, &x, &pairs, tau, gamma)?;
                let (frac, _) = ascent_fraction(ts, s, &x, &pairs, tau, &eps, true)?;
                (eps, frac)
            }
            _ => {
                let eps = perturb_batch(kind, ts, Some(&student), &x, tau, gamma, &mut rngs)?;
                let (frac, _) = ascent_fraction(ts, None::<&BeMlp>, &x, &pairs, 1.0, &eps, false)?;
                (eps, frac)
            }
        };
        let (mean_dt, mean_ds) = diversity_shift(ts, &student, &x, &eps)?;
        rows.push(DiagRow {
            step,
            kind,
            mean_dt,
            mean_ds,
            frac_ascent: frac,
        });
    }
    let n = rows.len() as f64;
    println!(
        "{kind}: gamma {gamma:.4e} mean dT {:.6e} mean dS {:.6e} over {} batches",
        rows.iter().map(|r| r.mean_dt).sum::<f64>() / n,
        rows.iter().map(|r| r.mean_ds).sum::<f64>() / n,
        rows.len()
    );
    write_csv(args.out, &rows)?;
    Ok(())
}
