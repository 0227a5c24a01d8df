use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distilab::autodiff::softmax_temp;
use distilab::data::{make_mixture, MixtureConfig};
use distilab::metrics::nll;
use distilab::nets::{checkpoint_load, Model};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distilab"));
    c.env_remove("DISTILAB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn distilab")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"
seeds = [3]
teachers = 2
[data]
n_per_class = 60
[model]
hidden = [12, 12]
[optim]
epochs = 6
warmup_epochs = 1
batch_size = 64
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn small(dir: &Path, name: &str, method: &str, extra: &str) -> PathBuf {
    write_config(dir, name, &format!("method = \"{method}\"\n{SMALL}\n{extra}"))
}

/// Trained teachers for the small config under `dir/teachers`.
fn teachers(dir: &Path) -> PathBuf {
    let cfg = small(dir, "teachers.toml", "kd", "");
    let out = dir.join("teachers");
    ok(&["train-teachers", "--config", p(&cfg), "--out", p(&out)]);
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn single_teacher_run_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "m1.toml", &format!("method = \"kd\"\n{}", SMALL.replace("teachers = 2", "teachers = 1")));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let log = ok(&["train-teachers", "--config", p(&cfg), "--out", p(&a)]);
    assert!(log.contains("teacher 0 epoch 5 loss"));
    ok(&["train-teachers", "--config", p(&cfg), "--out", p(&b)]);
    let seed_dir = a.join("seed_3");
    let ckpts: Vec<_> = std::fs::read_dir(&seed_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("teacher_"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    assert!(seed_dir.join("manifest.json").is_file());
    for f in ["teacher_0.json", "history.csv", "manifest.json"] {
        assert_eq!(read(&seed_dir.join(f)), read(&b.join("seed_3").join(f)), "{f}");
    }
    let before = read(&seed_dir.join("teacher_0.json"));
    ok(&["train-teachers", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(before, read(&seed_dir.join("teacher_0.json")));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&["train-teachers", "--config", "/no/such/config.toml", "--out", p(&out)]), 2);
    let bad = write_config(dir.path(), "bad.toml", "method = \"kd\"\nunknown_key = 1\n");
    assert_eq!(code(&["train-teachers", "--config", p(&bad), "--out", p(&out)]), 2);
    let combo = small(dir.path(), "combo.toml", "kd", "[distill]\nperturbation = \"tdiv_sdiv\"\n");
    assert_eq!(code(&["train-teachers", "--config", p(&combo), "--out", p(&out)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["evaluate", "--model", "x"]), 2);
}

#[test]
fn divergent_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path(), "boom.toml", "kd", "").to_string_lossy().into_owned();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("epochs = 6", "epochs = 6\nbase_lr = 1e12");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(code(&["train-teachers", "--config", &cfg, "--out", p(&dir.path().join("o"))]), 3);
}

#[test]
fn distill_methods_and_outputs() {
    let dir = TempDir::new().unwrap();
    let t = teachers(dir.path());

    let kd = small(dir.path(), "kd.toml", "kd", "");
    let out = dir.path().join("kd");
    ok(&["distill", "--config", p(&kd), "--teachers", p(&t), "--out", p(&out)]);
    assert!(out.join("seed_3/student.json").is_file());
    let manifest: serde_json::Value = serde_json::from_slice(&read(&out.join("seed_3/manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["distill"]["tau"], 4.0);
    assert_eq!(manifest["config"]["distill"]["alpha"], 1.0);
    assert_eq!(manifest["config"]["method"], "kd");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["data_digest"].as_str().unwrap().len(), 16);

    for method in ["aekd", "proxy_end2"] {
        let cfg = small(dir.path(), &format!("{method}.toml"), method, "[aekd]\nc = 0.7\n");
        let out = dir.path().join(method);
        ok(&["distill", "--config", p(&cfg), "--teachers", p(&t), "--out", p(&out)]);
        assert!(out.join("seed_3/student.json").is_file(), "{method}");
    }

    let lbe = small(dir.path(), "lbe.toml", "latentbe", "[distill]\nperturbation = \"tdiv_sdiv\"\n");
    let out = dir.path().join("lbe");
    ok(&["distill", "--config", p(&lbe), "--teachers", p(&t), "--out", p(&out)]);
    let s = out.join("seed_3");
    assert!(matches!(checkpoint_load(&s.join("be_student.json"), None).unwrap(), Model::BatchEnsemble(_)));
    assert!(matches!(checkpoint_load(&s.join("student.json"), None).unwrap(), Model::Plain(_)));
    let (header, rows) = csv_rows(&s.join("trace.csv"));
    assert_eq!(header, ["step", "div_train", "div_test", "avg_test_nll"]);
    assert!(rows.len() >= 6);
    assert_eq!(rows[0][0], "0");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn teacher_count_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    let t = teachers(dir.path());
    let cfg = write_config(
        dir.path(),
        "three.toml",
        &format!("method = \"kd\"\n{}", SMALL.replace("teachers = 2", "teachers = 3")),
    );
    assert_eq!(code(&["distill", "--config", p(&cfg), "--teachers", p(&t), "--out", p(&dir.path().join("o"))]), 2);
}

#[test]
fn be_then_average_matches_latentbe_without_prior() {
    let dir = TempDir::new().unwrap();
    let t = teachers(dir.path());
    let be = small(dir.path(), "be.toml", "be", "[distill]\nrank_one_init = \"ones\"\n");
    let lbe = small(dir.path(), "lbe0.toml", "latentbe", "[distill]\nlambda = 0.0\n");
    let (be_out, lbe_out) = (dir.path().join("be"), dir.path().join("lbe0"));
    ok(&["distill", "--config", p(&be), "--teachers", p(&t), "--out", p(&be_out)]);
    ok(&["distill", "--config", p(&lbe), "--teachers", p(&t), "--out", p(&lbe_out)]);
    assert_eq!(read(&be_out.join("seed_3/be_student.json")), read(&lbe_out.join("seed_3/be_student.json")));
    let avg = dir.path().join("avg.json");
    ok(&["average", "--model", p(&be_out.join("seed_3/be_student.json")), "--out", p(&avg)]);
    assert_eq!(read(&avg), read(&lbe_out.join("seed_3/student.json")));
    assert_eq!(code(&["average", "--model", p(&t.join("seed_3/teacher_0.json")), "--out", p(&avg)]), 2);
}

#[test]
fn evaluate_teacher_on_default_task() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "method = \"kd\"\nteachers = 1\n[optim]\nepochs = 30\nwarmup_epochs = 2\n");
    let t = dir.path().join("t");
    ok(&["train-teachers", "--config", p(&cfg), "--out", p(&t)]);
    let model = t.join("seed_0/teacher_0.json");
    let out = dir.path().join("train.csv");
    ok(&["evaluate", "--model", p(&model), "--data", "mixture:seed=0", "--split", "train", "--out", p(&out)]);
    let (header, rows) = csv_rows(&out);
    assert_eq!(
        header,
        ["run_id", "split", "acc", "nll_sum", "nll_mean", "ece", "tau_star", "cnll_mean", "cece", "mean_div"]
    );
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "train");
    assert!(rows[0][2].parse::<f64>().unwrap() >= 0.95, "train acc {}", rows[0][2]);

    let out = dir.path().join("ood.csv");
    ok(&["evaluate", "--model", p(&model), "--data", p(&cfg), "--corrupt", "2", "--ood", "5", "--out", p(&out)]);
    let (_, rows) = csv_rows(&out);
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["test_c2", "ood"]);
    for r in &rows {
        assert!(r[6].parse::<f64>().unwrap() > 0.0);
    }
    let (hh, hist) = csv_rows(&dir.path().join("ood_entropy.csv"));
    assert_eq!(hh, ["run_id", "tag", "bin", "lo", "hi", "count"]);
    assert_eq!(hist.len(), 60);
    assert!(hist.iter().any(|r| r[1] == "ood") && hist.iter().any(|r| r[1] == "test"));

    let again = dir.path().join("ood2.csv");
    ok(&["evaluate", "--model", p(&model), "--data", p(&cfg), "--corrupt", "2", "--ood", "5", "--out", p(&again)]);
    assert_eq!(read(&out), read(&again));

    assert_eq!(code(&["evaluate", "--model", p(&model), "--data", "mixture", "--corrupt", "6", "--out", p(&out)]), 2);
    assert_eq!(code(&["evaluate", "--model", p(&model), "--data", "mixture:k=4", "--out", p(&out)]), 2);
    assert_eq!(code(&["evaluate", "--model", "/no/model.json", "--data", "mixture", "--out", p(&out)]), 2);
}

#[test]
fn line_scan_matches_member_materialization() {
    let dir = TempDir::new().unwrap();
    let t = teachers(dir.path());
    let cfg = small(dir.path(), "lbe.toml", "latentbe", "");
    let out = dir.path().join("s");
    ok(&["distill", "--config", p(&cfg), "--teachers", p(&t), "--out", p(&out)]);
    let be_path = out.join("seed_3/be_student.json");
    let csv_path = dir.path().join("scan.csv");
    let stdout = ok(&["line-scan", "--model", p(&be_path), "--data", p(&cfg), "--out", p(&csv_path)]);
    let barrier: f64 = stdout.trim().strip_prefix("barrier ").unwrap().parse().unwrap();
    assert!(barrier >= 0.0);

    let (header, rows) = csv_rows(&csv_path);
    assert_eq!(header, ["t", "train_err", "test_err", "test_nll"]);
    let ts: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    for want in [0.0, 0.5, 1.0] {
        assert!(ts.contains(&want), "missing t = {want}");
    }

    let Model::BatchEnsemble(be) = checkpoint_load(&be_path, None).unwrap() else {
        panic!("expected a BE checkpoint")
    };
    let mix = MixtureConfig {
        n_per_class: 60,
        ..MixtureConfig::default()
    };
    let test = make_mixture(&mix, 3).unwrap().test;
    let probs = softmax_temp(&be.materialize_member(0).unwrap().logits(&test.x).unwrap(), 1.0).unwrap();
    let row0 = &rows[ts.iter().position(|&t| t == 0.0).unwrap()];
    assert_eq!(row0[3].parse::<f64>().unwrap(), nll(&probs, &test.y).unwrap().mean);

    let teacher = t.join("seed_3/teacher_0.json");
    assert_eq!(code(&["line-scan", "--model", p(&teacher), "--data", p(&cfg), "--out", p(&csv_path)]), 2);
}

#[test]
fn perturbation_diagnostics() {
    let dir = TempDir::new().unwrap();
    let t = teachers(dir.path());
    let cfg = small(dir.path(), "lbe.toml", "latentbe", "");
    let out = dir.path().join("s");
    ok(&["distill", "--config", p(&cfg), "--teachers", p(&t), "--out", p(&out)]);
    let student = out.join("seed_3/be_student.json");
    let tdir = t.join("seed_3");

    let diag = dir.path().join("diag.csv");
    ok(&[
        "perturb-diag", "--teachers", p(&tdir), "--student", p(&student), "--data", p(&cfg), "--kind", "tdiv_sdiv",
        "--out", p(&diag),
    ]);
    let (header, rows) = csv_rows(&diag);
    assert_eq!(header, ["step", "kind", "mean_dT", "mean_dS", "frac_ascent"]);
    assert!(!rows.is_empty());
    let mean_dt = rows.iter().map(|r| r[2].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!(mean_dt > 0.0, "mean dT {mean_dt}");

    let same = dir.path().join("same");
    std::fs::create_dir(&same).unwrap();
    std::fs::copy(tdir.join("teacher_0.json"), same.join("teacher_0.json")).unwrap();
    std::fs::copy(tdir.join("teacher_0.json"), same.join("teacher_1.json")).unwrap();
    ok(&[
        "perturb-diag", "--teachers", p(&same), "--student", p(&student), "--data", p(&cfg), "--kind", "gaussian",
        "--out", p(&diag),
    ]);
    let (_, rows) = csv_rows(&diag);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));

    for kind in ["none", "bogus"] {
        let args = [
            "perturb-diag", "--teachers", p(&tdir), "--student", p(&student), "--data", p(&cfg), "--kind", kind,
            "--out", p(&diag),
        ];
        assert_eq!(code(&args), 2, "{kind}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path(), "t.toml", "kd", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train-teachers", "--config", p(&cfg), "--out", p(&a)]);
    let out = bin()
        .env("DISTILAB_THREADS", "3")
        .args(["train-teachers", "--config", p(&cfg), "--out", p(&b)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&a.join("seed_3/teacher_1.json")), read(&b.join("seed_3/teacher_1.json")));
}
