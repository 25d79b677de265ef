//! Subcommands. Each one reads an [`ExperimentConfig`], writes its artifacts
//! under the output directory, appends JSON-lines records to
//! `manifest.jsonl` there, and prints a short human-readable summary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use krecon::attack::query_count_bound;
use krecon::attack::theory::{representation_uniqueness, zero_loss_soundness, SoundnessReport, UniquenessReport};
use krecon::metrics::{report, ReconReport, ReportOptions};
use krecon::models::ModelOracle;
use krecon::synthetic::DataSource;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::config::{DataInput, DistanceKind, ExperimentConfig, QueryChoice};
use crate::error::{CliError, CliResult};
use crate::experiments::{self, AblationPoint};
use crate::matrix_file;
use crate::model_file::{open_oracle, ModelKind};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Parser)]
#[command(name = "krecon", version, about = "Train kernel models and reconstruct their training data from queries")]
pub struct Cli {
    /// Experiment config (INI). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the data seed, the attack seeds and the uniqueness instance seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the parallel parts (all cores when omitted).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured training set as X.txt and Y.txt.
    GenData,
    /// Train the configured model and save it as model.txt.
    Train,
    /// Attack a saved model through its query interface.
    Attack {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare reconstructions with training points.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        train: PathBuf,
    },
    /// Two-blob density demo with a hidden bandwidth.
    #[command(name = "demo-kde2d")]
    DemoKde2d,
    /// Attack one trained model with several query counts.
    AblateQueries {
        /// Query counts; overrides `[ablate] m_values`.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Train and attack one model per kernel scale.
    AblateGamma {
        /// Kernel scales; overrides `[ablate] gammas`.
        #[arg(long, value_delimiter = ',')]
        gamma: Vec<f64>,
    },
    /// Zero-loss soundness and Gram-invertibility suites.
    VerifyUniqueness,
}

/// Config for the density demo when no file is given.
pub fn kde_demo_defaults() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.input = DataInput::Synthetic(DataSource::TwoGaussians { offset: 2.0 });
    cfg.data.n = 10;
    cfg.data.d = 2;
    cfg.model.kind = ModelKind::Kde;
    cfg.attack.n = Some(10);
    cfg.attack.m = Some(2500);
    cfg.attack.queries = QueryChoice::Grid { low: -6.0, high: 6.0 };
    cfg.attack.snapshots = vec![0, 500, 2000, 10_000];
    cfg
}

/// Loads the config (or the per-command defaults) and applies the global flags.
pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Command::DemoKde2d) => kde_demo_defaults(),
        (None, _) => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.attack.seeds = vec![seed];
        cfg.verify.uniqueness.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        // fails only if a pool already exists, e.g. when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let cfg = resolve_config(cli)?;
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, stdout),
        Command::Train => train(&cfg, stdout),
        Command::Attack { model } => {
            // only the query interface survives past this line
            let oracle = open_oracle(model)?;
            attack(&cfg, &oracle, stdout).map(|_| ())
        }
        Command::Evaluate { recon, train } => evaluate(&cfg, recon, train, stdout),
        Command::DemoKde2d => demo_kde2d(&cfg, stdout),
        Command::AblateQueries { m } => {
            let mut cfg = cfg;
            if !m.is_empty() {
                cfg.ablate.m_values = m.clone();
            }
            ablate(&cfg, "ablate-queries", stdout).map(|_| ())
        }
        Command::AblateGamma { gamma } => {
            let mut cfg = cfg;
            if !gamma.is_empty() {
                cfg.ablate.gammas = gamma.clone();
                cfg.validate()?;
            }
            ablate(&cfg, "ablate-gamma", stdout).map(|_| ())
        }
        Command::VerifyUniqueness => verify(&cfg, stdout),
    }
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

/// Appends one JSON record to the manifest in `dir`.
pub fn append_manifest(dir: &Path, record: &impl Serialize) -> CliResult<()> {
    let path = dir.join(MANIFEST);
    let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
    let line = serde_json::to_string(record).expect("manifest records serialize");
    writeln!(file, "{line}").map_err(|e| CliError::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn row(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, values.len(), values)
}

fn gen_data(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let inst = experiments::load_instance(&cfg.data)?;
    matrix_file::write(&cfg.out.join("X.txt"), &inst.x)?;
    matrix_file::write(&cfg.out.join("Y.txt"), &inst.y)?;
    append_manifest(
        &cfg.out,
        &json!({
            "command": "gen-data",
            "config": cfg.to_ini(),
            "seed": cfg.data.seed,
            "rows": inst.x.nrows(),
            "dim": inst.x.ncols(),
            "fingerprint": inst.fingerprint(),
            "status": "ok",
        }),
    )?;
    writeln!(stdout, "wrote {}x{} inputs to {}", inst.x.nrows(), inst.x.ncols(), cfg.out.display()).map_err(out_err)
}

fn train(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let inst = experiments::load_instance(&cfg.data)?;
    let (file, summary) = experiments::train(&cfg.model, &inst, None)?;
    let path = cfg.out.join("model.txt");
    file.write(&path)?;
    append_manifest(
        &cfg.out,
        &json!({
            "command": "train",
            "config": cfg.to_ini(),
            "seed": cfg.data.seed,
            "fingerprint": inst.fingerprint(),
            "summary": summary,
            "status": "ok",
        }),
    )?;
    writeln!(stdout, "{}", serde_json::to_string(&summary).expect("summaries serialize")).map_err(out_err)?;
    writeln!(stdout, "model written to {}", path.display()).map_err(out_err)
}

/// One manifest record of an attack run.
#[derive(Debug, Clone, Serialize)]
pub struct AttackRecord {
    pub command: &'static str,
    pub config: String,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub query_count_bound: usize,
    pub status: String,
    pub final_loss: Option<f64>,
    pub canonical_points: Option<usize>,
    pub wall_seconds: f64,
    pub dir: PathBuf,
}

/// The attack pipeline behind the `attack` subcommand, for any oracle.
/// Every configured seed runs; aborted runs are recorded and reported as a
/// numerical failure after the others finish.
pub fn attack(cfg: &ExperimentConfig, oracle: &dyn ModelOracle, stdout: &mut dyn Write) -> CliResult<Vec<AttackRecord>> {
    let d = oracle.input_dim();
    let (n, m) = experiments::resolve_sizes(&cfg.attack, cfg.data.n, d);
    let bound = query_count_bound(n, d);
    let mut records = Vec::new();
    let mut aborted = Vec::new();
    for &seed in &cfg.attack.seeds {
        let dir = cfg.out.join(format!("seed-{seed}"));
        let start = std::time::Instant::now();
        let mut record = AttackRecord {
            command: "attack",
            config: cfg.to_ini(),
            seed,
            n,
            m,
            d,
            query_count_bound: bound,
            status: "ok".into(),
            final_loss: None,
            canonical_points: None,
            wall_seconds: 0.0,
            dir: dir.clone(),
        };
        match experiments::attack_once(oracle, &cfg.attack, n, m, seed) {
            Ok(run) => {
                let p = &run.outcome.params;
                matrix_file::write(&dir.join("xhat.txt"), &p.xhat)?;
                matrix_file::write(&dir.join("ahat.txt"), &p.ahat)?;
                matrix_file::write(&dir.join("xhat_canonical.txt"), &run.canonical.xhat)?;
                matrix_file::write(&dir.join("ahat_canonical.txt"), &run.canonical.ahat)?;
                if let Some(h) = p.bandwidth() {
                    matrix_file::write(&dir.join("bandwidth.txt"), &row(&h))?;
                }
                let trace: String =
                    run.outcome.trace.iter().map(|t| format!("{} {:.16e}\n", t.step, t.loss)).collect();
                write_text(&dir.join("trace.txt"), &trace)?;
                record.final_loss = Some(run.outcome.final_loss);
                record.canonical_points = Some(run.canonical.len());
                record.wall_seconds = run.wall_seconds;
            }
            Err(CliError::Core(krecon::Error::AttackAborted { step, last_finite })) => {
                matrix_file::write(&dir.join("xhat_last_finite.txt"), &last_finite.xhat)?;
                matrix_file::write(&dir.join("ahat_last_finite.txt"), &last_finite.ahat)?;
                record.status = format!("aborted at step {step}: non-finite loss");
                record.wall_seconds = start.elapsed().as_secs_f64();
                aborted.push(seed);
            }
            Err(e) => return Err(e),
        }
        append_manifest(&cfg.out, &record)?;
        writeln!(
            stdout,
            "seed {seed}: n={n} m={m} (bound {bound}) final loss {} canonical points {} [{}]",
            record.final_loss.map_or("-".into(), |l| format!("{l:.3e}")),
            record.canonical_points.map_or("-".into(), |c| c.to_string()),
            record.status
        )
        .map_err(out_err)?;
        records.push(record);
    }
    if !aborted.is_empty() {
        return Err(CliError::Core(krecon::Error::Training(format!("attack aborted for seeds {aborted:?}"))));
    }
    Ok(records)
}

fn report_table(r: &ReconReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<24} {}\n", "training points", r.n_train));
    s.push_str(&format!("{:<24} {}\n", "reconstructions", r.n_recon));
    s.push_str(&format!("{:<24} {}\n", "recovery %", r.recovery_pct));
    if let Some(hq) = r.recovery_pct_high_quality {
        s.push_str(&format!("{:<24} {}\n", "recovery % (DSSIM<0.3)", hq));
    }
    s.push_str(&format!("{:<24} {} / {} / {}\n", "L2 p25/p50/p75", r.l2.p25, r.l2.p50, r.l2.p75));
    if let Some(p) = r.dssim {
        s.push_str(&format!("{:<24} {} / {} / {}\n", "DSSIM p25/p50/p75", p.p25, p.p50, p.p75));
    }
    s
}

fn evaluate(cfg: &ExperimentConfig, recon: &Path, train: &Path, stdout: &mut dyn Write) -> CliResult<()> {
    let recons = matrix_file::read(recon)?;
    let truth = matrix_file::read(train)?;
    let options = ReportOptions {
        shape: match cfg.metrics.distance {
            DistanceKind::Dssim => cfg.metrics.image_shape,
            DistanceKind::L2 => None,
        },
        data_range: cfg.metrics.data_range,
        l2_tol: match (cfg.metrics.distance, cfg.metrics.match_tol) {
            (DistanceKind::L2, krecon::attack::MatchTolerance::Absolute(t)) => Some(t),
            _ => None,
        },
    };
    let r = report(&recons, &truth, &options)?;
    let path = cfg.out.join("evaluate.jsonl");
    let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
    writeln!(file, "{}", serde_json::to_string(&r).expect("reports serialize")).map_err(|e| CliError::io(&path, e))?;
    write!(stdout, "{}", report_table(&r)).map_err(out_err)
}

fn demo_kde2d(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let demo = experiments::kde2d_demo(cfg)?;
    let out = &cfg.out;
    matrix_file::write(&out.join("truth.txt"), &demo.truth)?;
    matrix_file::write(&out.join("init_xhat.txt"), &demo.run.outcome.initial.xhat)?;
    matrix_file::write(&out.join("final_xhat.txt"), &demo.run.outcome.params.xhat)?;
    matrix_file::write(&out.join("final_xhat_canonical.txt"), &demo.run.canonical.xhat)?;
    matrix_file::write(&out.join("final_ahat_canonical.txt"), &demo.run.canonical.ahat)?;
    matrix_file::write(&out.join("bandwidth_true.txt"), &row(&demo.h_true))?;
    matrix_file::write(&out.join("bandwidth_learned.txt"), &row(&demo.h_learned))?;
    matrix_file::write(&out.join("lattice.txt"), &demo.lattice)?;
    matrix_file::write(&out.join("f_true.txt"), &demo.f_true)?;
    for (step, params) in &demo.run.outcome.snapshots {
        matrix_file::write(&out.join(format!("snapshot-{step}-xhat.txt")), &params.xhat)?;
    }
    for (step, grid) in &demo.f_hat {
        matrix_file::write(&out.join(format!("f_hat-{step}.txt")), grid)?;
    }
    let trace: String = demo.run.outcome.trace.iter().map(|t| format!("{} {:.16e}\n", t.step, t.loss)).collect();
    write_text(&out.join("trace.txt"), &trace)?;
    let record = json!({
        "command": "demo-kde2d",
        "config": cfg.to_ini(),
        "seed": demo.run.seed,
        "n": demo.run.n,
        "m": demo.run.m,
        "d": 2,
        "query_count_bound": query_count_bound(demo.run.n, 2),
        "final_loss": demo.run.outcome.final_loss,
        "canonical_points": demo.run.canonical.len(),
        "max_linf": demo.max_linf(),
        "bandwidth_true": demo.h_true,
        "bandwidth_learned": demo.h_learned,
        "bandwidth_relative_error": demo.h_relative_error,
        "final_grid_gap": demo.final_grid_gap(),
        "wall_seconds": demo.run.wall_seconds,
        "status": "ok",
    });
    append_manifest(out, &record)?;
    writeln!(
        stdout,
        "final loss {:.3e}; worst L-inf point error {:.4}; bandwidth relative error {:.4}; grid gap {:.3e}",
        demo.run.outcome.final_loss,
        demo.max_linf(),
        demo.h_relative_error,
        demo.final_grid_gap()
    )
    .map_err(out_err)
}

fn ablate(cfg: &ExperimentConfig, command: &'static str, stdout: &mut dyn Write) -> CliResult<Vec<AblationPoint>> {
    let inst = experiments::load_instance(&cfg.data)?;
    let points = if command == "ablate-gamma" {
        experiments::ablate_gamma(cfg, &inst)?
    } else {
        experiments::ablate_queries(cfg, &inst)?
    };
    writeln!(stdout, "{:>8} {:>12} {:>14} {:>14}", "m", "gamma", "median error", "best matched").map_err(out_err)?;
    for p in &points {
        append_manifest(&cfg.out, &json!({ "command": command, "config": cfg.to_ini(), "result": p, "status": "ok" }))?;
        writeln!(
            stdout,
            "{:>8} {:>12} {:>14.6} {:>14.3}",
            p.m,
            p.gamma.map_or("-".into(), |g| format!("{g:.5}")),
            p.median_error,
            p.best_fraction_matched
        )
        .map_err(out_err)?;
    }
    Ok(points)
}

/// Whether the verification suites passed, with the reason when not.
pub fn verdict(soundness: &SoundnessReport, uniqueness: &UniquenessReport) -> Result<(), String> {
    let mut problems = Vec::new();
    if soundness.within_hypothesis && soundness.violations() > 0 {
        problems.push(format!("{} zero-loss runs did not recover the truth", soundness.violations()));
    }
    if soundness.reached() * 2 < soundness.runs.len() {
        problems.push(format!(
            "optimization: only {} of {} runs reached the loss threshold",
            soundness.reached(),
            soundness.runs.len()
        ));
    }
    let failed = uniqueness.instances.len() - uniqueness.passed();
    if failed > 0 {
        problems.push(format!("{failed} Gram matrices below the eigenvalue threshold"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

fn verify(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let s = &cfg.verify.soundness;
    if s.points > 5 || s.dim > 3 {
        return Err(CliError::Config(format!(
            "verify-uniqueness runs small instances only (points <= 5, dim <= 3), got {} and {}",
            s.points, s.dim
        )));
    }
    let soundness = zero_loss_soundness(s)?;
    let uniqueness = representation_uniqueness(&cfg.verify.uniqueness)?;
    for run in &soundness.runs {
        append_manifest(&cfg.out, &json!({ "command": "verify-uniqueness", "suite": "soundness", "run": run }))?;
    }
    append_manifest(
        &cfg.out,
        &json!({
            "command": "verify-uniqueness",
            "config": cfg.to_ini(),
            "suite": "summary",
            "m": soundness.m,
            "query_count_bound": soundness.bound,
            "within_hypothesis": soundness.within_hypothesis,
            "reached": soundness.reached(),
            "violations": soundness.violations(),
            "unexplained_violations": soundness.unexplained_violations(),
            "uniqueness_passed": uniqueness.passed(),
            "uniqueness_instances": uniqueness.instances.len(),
            "min_eigenvalue": uniqueness.instances.iter().map(|i| i.min_eigenvalue).fold(f64::INFINITY, f64::min),
        }),
    )?;
    let w = |stdout: &mut dyn Write, line: String| writeln!(stdout, "{line}").map_err(out_err);
    w(stdout, format!("soundness: m = {}, bound = {}", soundness.m, soundness.bound))?;
    if !soundness.within_hypothesis {
        w(stdout, "soundness: m is below the bound, outside the identifiability hypothesis".into())?;
    }
    w(
        stdout,
        format!(
            "soundness: {} of {} runs reached the loss threshold, {} of those missed the truth ({} on query layouts flagged degenerate)",
            soundness.reached(),
            soundness.runs.len(),
            soundness.violations(),
            soundness.violations() - soundness.unexplained_violations()
        ),
    )?;
    w(stdout, format!("uniqueness: {} of {} Gram matrices positive definite", uniqueness.passed(), uniqueness.instances.len()))?;
    verdict(&soundness, &uniqueness).map_err(CliError::Verification)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["krecon", "attack", "--model", "m.txt", "--seed", "4", "--threads", "1"]).unwrap();
        assert_eq!(cli.seed, Some(4));
        assert_eq!(cli.threads, Some(1));
        assert!(matches!(cli.command, Command::Attack { .. }));
        let cli = Cli::try_parse_from(["krecon", "ablate-queries", "--m", "50,150"]).unwrap();
        assert!(matches!(cli.command, Command::AblateQueries { ref m } if m == &[50, 150]));
    }

    #[test]
    fn seed_flag_overrides_every_seed() {
        let cli = Cli::try_parse_from(["krecon", "gen-data", "--seed", "9"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.data.seed, cfg.attack.seeds.clone(), cfg.verify.uniqueness.seed), (9, vec![9], 9));
    }

    #[test]
    fn demo_defaults_describe_the_two_blob_setup() {
        let cfg = kde_demo_defaults();
        cfg.validate().unwrap();
        assert_eq!((cfg.data.n, cfg.data.d, cfg.attack.m), (10, 2, Some(2500)));
        assert!(query_count_bound(10, 2) <= 2500);
    }

    #[test]
    fn table_prints_the_report_values() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        let r = report(&x, &x, &ReportOptions::default()).unwrap();
        let table = report_table(&r);
        assert!(table.contains("recovery %               100\n"), "{table}");
        assert!(!table.contains("DSSIM"));
    }
}
