use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use krecon::models::{ModelOracle, PublicKernel};
use krecon_cli::commands;
use krecon_cli::config::ExperimentConfig;
use krecon_cli::matrix_file;
use krecon_cli::model_file::{open_oracle, ModelFile};
use nalgebra::DMatrix;
use proptest::prelude::*;
use serde_json::Value;

fn krecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krecon")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = krecon(args);
    assert!(
        out.status.success(),
        "krecon {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn manifest(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join(commands::MANIFEST))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_KRR: &str = "\
[data]
N = 6
d = 3
seed = 5

[model]
kind = krr
gamma = 0.5

[attack]
m = 40
steps = 300
trace_stride = 50
seeds = 0, 1
";

#[test]
fn gen_data_is_reproducible_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "mix.ini",
        "[data]\nsource = two-gaussians\noffset = 2\nN = 10\nd = 2\nseed = 11\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let xa = fs::read(a.join("X.txt")).unwrap();
    assert_eq!(xa, fs::read(b.join("X.txt")).unwrap());
    assert_eq!(matrix_file::read(&a.join("X.txt")).unwrap().shape(), (10, 2));

    let c = dir.path().join("c");
    ok(&["gen-data", "--out", s(&c)]);
    assert_eq!(matrix_file::read(&c.join("X.txt")).unwrap().shape(), (20, 10));
}

#[test]
fn matrix_files_rewrite_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(dir.path())]);
    let path = dir.path().join("X.txt");
    let first = fs::read_to_string(&path).unwrap();
    let copy = dir.path().join("X2.txt");
    matrix_file::write(&copy, &matrix_file::read(&path).unwrap()).unwrap();
    assert_eq!(first, fs::read_to_string(&copy).unwrap());
}

#[test]
fn krr_training_interpolates_and_model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "krr.ini", SMALL_KRR);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    ok(&["train", "--config", s(&cfg), "--out", s(dir.path())]);

    let model_path = dir.path().join("model.txt");
    let text = fs::read_to_string(&model_path).unwrap();
    let parsed = ModelFile::read(&model_path).unwrap();
    assert_eq!(parsed.to_text(), text);

    let x = matrix_file::read(&dir.path().join("X.txt")).unwrap();
    let y = matrix_file::read(&dir.path().join("Y.txt")).unwrap();
    let oracle = open_oracle(&model_path).unwrap();
    assert!((oracle.evaluate(&x).unwrap() - y).amax() < 1e-8);
}

#[test]
fn kde_training_uses_scotts_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "kde.ini",
        "[data]\nsource = two-gaussians\nN = 10\nd = 2\nseed = 2\n[model]\nkind = kde\n",
    );
    ok(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    ok(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    let x = matrix_file::read(&dir.path().join("X.txt")).unwrap();
    let file = ModelFile::read(&dir.path().join("model.txt")).unwrap();
    let krecon::kernels::KernelSpec::BandwidthGaussian { h_diag } = file.model.spec().clone() else {
        panic!("kde model must carry a bandwidth kernel");
    };
    // recomputed here: N^{-1/6} times the sample standard deviation (N - 1 denominator)
    let n = x.nrows() as f64;
    for j in 0..2 {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = n.powf(-1.0 / 6.0) * var.sqrt();
        assert!((h_diag[j] - expected).abs() <= 1e-14 * expected, "{j}: {} vs {expected}", h_diag[j]);
    }
    assert_eq!(open_oracle(&dir.path().join("model.txt")).unwrap().kernel(), PublicKernel::GaussianUnknownBandwidth);
}

#[test]
fn svm_training_lowers_the_hinge_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "svm.ini",
        "[data]\nsource = two-gaussians\noffset = 3\nN = 12\nd = 2\nC = 1\ntargets = pm1\n\
         [model]\nkind = svm\nkernel = rbf\ngamma = 0.5\nsteps = 200\nlr = 0.05\n",
    );
    ok(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    let record = manifest(dir.path()).pop().unwrap();
    let summary = &record["summary"];
    assert!(summary["svm_final_loss"].as_f64().unwrap() < summary["svm_initial_loss"].as_f64().unwrap());
}

#[test]
fn attack_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "krr.ini", SMALL_KRR);
    ok(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    let model = dir.path().join("model.txt");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    ok(&["attack", "--config", s(&cfg), "--model", s(&model), "--out", s(&r1)]);
    ok(&["attack", "--config", s(&cfg), "--model", s(&model), "--out", s(&r2), "--threads", "1"]);

    let (m1, m2) = (manifest(&r1), manifest(&r2));
    assert_eq!(m1.len(), 2);
    for (a, b) in m1.iter().zip(&m2) {
        assert_eq!(a["status"], "ok");
        assert_eq!(a["final_loss"], b["final_loss"]);
        assert_eq!(a["query_count_bound"], 6 * (3 + 2) + 1);
        assert_eq!(a["m"], 40);
        let echoed = ExperimentConfig::parse(a["config"].as_str().unwrap()).unwrap();
        assert_eq!(echoed.attack.steps, 300);
    }
    for name in ["xhat.txt", "ahat.txt", "xhat_canonical.txt", "ahat_canonical.txt", "trace.txt"] {
        assert_eq!(fs::read(r1.join("seed-1").join(name)).unwrap(), fs::read(r2.join("seed-1").join(name)).unwrap());
    }
    let trace = fs::read_to_string(r1.join("seed-0/trace.txt")).unwrap();
    let last = trace.lines().last().unwrap();
    assert!(last.starts_with("300 "), "{last}");
}

#[test]
fn evaluate_identical_sets_reports_full_recovery() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(dir.path())]);
    let x = dir.path().join("X.txt");
    let out = ok(&["evaluate", "--recon", s(&x), "--train", s(&x), "--out", s(dir.path())]);
    let table = String::from_utf8(out.stdout).unwrap();
    let json: Value =
        serde_json::from_str(fs::read_to_string(dir.path().join("evaluate.jsonl")).unwrap().lines().last().unwrap())
            .unwrap();
    assert_eq!(json["recovery_pct"], 100.0);
    assert_eq!(json["l2"]["p50"], 0.0);
    assert!(json.get("dssim").is_none());
    let recovery_line = table.lines().find(|l| l.starts_with("recovery %")).unwrap();
    let shown: f64 = recovery_line.split_whitespace().last().unwrap().parse().unwrap();
    assert_eq!(shown, json["recovery_pct"].as_f64().unwrap());
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(krecon(&["no-such-command"]).status.code(), Some(1));
    let bad = write_config(dir.path(), "bad.ini", "[data]\nN = 3\nfoo = 1\n");
    let out = krecon(&["gen-data", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let missing = dir.path().join("missing.txt");
    assert_eq!(krecon(&["attack", "--model", s(&missing), "--out", s(dir.path())]).status.code(), Some(1));
    let gamma = write_config(dir.path(), "g.ini", "[ablate]\ngammas = 0.1, 0\n");
    assert_eq!(krecon(&["ablate-gamma", "--config", s(&gamma)]).status.code(), Some(1));
}

#[test]
fn failing_verification_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // far too few steps to reach the loss threshold
    let cfg = write_config(dir.path(), "v.ini", "[verify]\nseeds = 0, 1\nsteps = 5\ninstances = 3\n");
    let out = krecon(&["verify-uniqueness", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let too_big = write_config(dir.path(), "big.ini", "[verify]\npoints = 6\n");
    assert_eq!(krecon(&["verify-uniqueness", "--config", s(&too_big), "--out", s(dir.path())]).status.code(), Some(1));
}

#[test]
fn below_bound_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "v.ini", "[verify]\nseeds = 0\nsteps = 50\nm = 5\ninstances = 2\n");
    let out = krecon(&["verify-uniqueness", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("below the bound"));
    let summary = manifest(dir.path()).into_iter().find(|r| r["suite"] == "summary").unwrap();
    assert_eq!(summary["within_hypothesis"], false);
    assert_eq!(summary["query_count_bound"], 7);
}

#[test]
fn query_ablation_records_one_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "krr.ini", SMALL_KRR);
    ok(&["ablate-queries", "--config", s(&cfg), "--m", "20,40", "--out", s(dir.path())]);
    let records = manifest(dir.path());
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["result"]["fingerprint"], records[1]["result"]["fingerprint"]);
    assert_eq!(records[1]["result"]["m"], 40);
}

/// Records every call it forwards.
struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
    rows: Mutex<Vec<usize>>,
}

impl<O: ModelOracle> ModelOracle for CountingOracle<O> {
    fn evaluate(&self, z: &DMatrix<f64>) -> krecon::Result<DMatrix<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.rows.lock().unwrap().push(z.nrows());
        self.inner.evaluate(z)
    }

    fn kernel(&self) -> PublicKernel {
        self.inner.kernel()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
}

#[test]
fn attack_path_queries_the_served_model_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "krr.ini", SMALL_KRR);
    ok(&["train", "--config", s(&cfg_path), "--out", s(dir.path())]);
    let mut cfg = ExperimentConfig::load(&cfg_path).unwrap();
    cfg.attack.seeds = vec![3];
    cfg.out = dir.path().join("counted");
    fs::create_dir_all(&cfg.out).unwrap();
    let counting = CountingOracle {
        inner: open_oracle(&dir.path().join("model.txt")).unwrap(),
        calls: AtomicUsize::new(0),
        rows: Mutex::new(Vec::new()),
    };
    let records = commands::attack(&cfg, &counting, &mut Vec::new()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(counting.calls.load(Ordering::SeqCst), 1);
    assert_eq!(*counting.rows.lock().unwrap(), vec![40]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_text_round_trips_bits(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut state = seed | 1;
        let m = DMatrix::from_fn(rows, cols, |_, _| {
            // xorshift over raw bit patterns, skipping non-finite values
            loop {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let v = f64::from_bits(state);
                if v.is_finite() {
                    return v;
                }
            }
        });
        let text = matrix_file::to_string(&m);
        let back = matrix_file::parse(&text, Path::new("p")).unwrap();
        prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(matrix_file::to_string(&back), text);
    }
}
