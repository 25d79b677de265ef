//! Experiment pipelines shared by the subcommands and the acceptance suite.

use std::time::Instant;

use krecon::attack::{
    canonicalize, default_tolerances, effective_kernel, match_to_truth, query_count_bound, run_attack, run_attack_pca,
    sample_queries, AttackOutcome, MatchReport, QueryDistribution, ReconstructionParams,
};
use krecon::kernels::KernelSpec;
use krecon::linalg::pca_basis;
use krecon::models::{train_kde, train_krr, train_svm_gd, Dataset, ModelOracle, TrainedKernelModel};
use krecon::optim::OneCycleSchedule;
use krecon::synthetic::{generate_inputs, generate_targets};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AttackSection, DataInput, DataSection, ExperimentConfig, GammaScale, ModelSection};
use crate::error::{CliError, CliResult};
use crate::matrix_file;
use crate::model_file::{ModelFile, ModelKind};

/// Offset mixed into the attack seed for the sample that defines the PCA basis.
const PCA_SEED_SALT: u64 = 0x9CA0_BA5E;

/// A training set. `y` is all zeros for KDE inputs read without targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Instance {
    /// 64-bit FNV-1a over the bit patterns of `X` and `Y`, as hex.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for m in [&self.x, &self.y] {
            feed(m.nrows() as u64);
            feed(m.ncols() as u64);
            m.iter().for_each(|v| feed(v.to_bits()));
        }
        format!("{h:016x}")
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.x.nrows().max(1) as f64;
        self.x.row_iter().map(|r| r.norm()).sum::<f64>() / n
    }
}

/// Draws the synthetic training set or reads it from files.
pub fn load_instance(data: &DataSection) -> CliResult<Instance> {
    match &data.input {
        DataInput::Synthetic(source) => {
            // inputs first, then targets, from one generator
            let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
            let x = generate_inputs(source, data.n, data.d, &mut rng)?;
            let y = generate_targets(data.targets, data.n, data.c, &mut rng)?;
            Ok(Instance { x, y })
        }
        DataInput::Files { x, y } => {
            let xm = matrix_file::read(x)?;
            let ym = match y {
                Some(path) => matrix_file::read(path)?,
                None => DMatrix::zeros(xm.nrows(), 1),
            };
            if ym.nrows() != xm.nrows() {
                return Err(CliError::Config(format!(
                    "x_file has {} rows but y_file has {}",
                    xm.nrows(),
                    ym.nrows()
                )));
            }
            Ok(Instance { x: xm, y: ym })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub kind: String,
    pub kernel: KernelSpec,
    pub points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub krr_relative_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub krr_jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svm_initial_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svm_final_loss: Option<f64>,
}

/// Trains the configured model. `gamma` overrides the configured kernel scale.
pub fn train(model: &ModelSection, inst: &Instance, gamma: Option<f64>) -> CliResult<(ModelFile, TrainSummary)> {
    let (trained, mut summary) = match model.kind {
        ModelKind::Kde => {
            let kde = train_kde(&inst.x)?;
            let trained = kde.to_kernel_model();
            let summary = summary_for(model.kind, &trained);
            (trained, summary)
        }
        ModelKind::Krr => {
            let spec = model.kernel_spec(gamma)?;
            let data = Dataset::new(inst.x.clone(), inst.y.clone())?;
            let (trained, report) = train_krr(&data, &spec, model.lambda)?;
            let mut summary = summary_for(model.kind, &trained);
            summary.krr_relative_residual = Some(report.relative_residual);
            summary.krr_jitter = Some(report.solve.jitter);
            (trained, summary)
        }
        ModelKind::Svm => {
            let spec = model.kernel_spec(gamma)?;
            let data = Dataset::new(inst.x.clone(), inst.y.clone())?;
            let schedule = OneCycleSchedule::new(model.lr, model.steps)?;
            let (trained, trace) = train_svm_gd(&data, &spec, model.steps, &schedule)?;
            let mut summary = summary_for(model.kind, &trained);
            summary.svm_initial_loss = Some(trace.initial());
            summary.svm_final_loss = Some(trace.last());
            (trained, summary)
        }
    };
    summary.points = trained.support().nrows();
    Ok((ModelFile { kind: model.kind, model: trained }, summary))
}

fn summary_for(kind: ModelKind, model: &TrainedKernelModel) -> TrainSummary {
    TrainSummary {
        kind: kind.to_string(),
        kernel: model.spec().clone(),
        points: 0,
        krr_relative_residual: None,
        krr_jitter: None,
        svm_initial_loss: None,
        svm_final_loss: None,
    }
}

/// One finished attack run with its canonical form.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub outcome: AttackOutcome,
    pub canonical: ReconstructionParams,
    pub wall_seconds: f64,
}

/// Attack settings resolved against an oracle.
pub fn resolve_sizes(section: &AttackSection, default_n: usize, d: usize) -> (usize, usize) {
    let n = section.n.unwrap_or(default_n);
    (n, section.m.unwrap_or_else(|| query_count_bound(n, d)))
}

/// Runs one attack. With `pca_rank` set, candidates are confined to the top
/// principal subspace of a separate sample from the query distribution.
pub fn attack_once(
    oracle: &dyn ModelOracle,
    section: &AttackSection,
    n: usize,
    m: usize,
    seed: u64,
) -> CliResult<AttackRun> {
    let config = section.attack_config(n, m, seed)?;
    let start = Instant::now();
    let outcome = match section.pca_rank {
        Some(k) => {
            let sample = match &config.queries {
                QueryDistribution::Points(p) => (**p).clone(),
                dist => sample_queries(dist, m.max(k + 1), oracle.input_dim(), seed ^ PCA_SEED_SALT)?,
            };
            run_attack_pca(oracle, &config, &pca_basis(&sample, k)?)?
        }
        None => run_attack(oracle, &config)?,
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    let (merge_default, coeff_default) = default_tolerances(&outcome.params);
    let canonical = canonicalize(
        &outcome.params,
        section.merge_tol.unwrap_or(merge_default),
        section.coeff_tol.unwrap_or(coeff_default).max(f64::MIN_POSITIVE),
    )?;
    Ok(AttackRun { seed, n, m, outcome, canonical, wall_seconds })
}

/// Per-run numbers reported by the ablations.
#[derive(Debug, Clone, Serialize)]
pub struct RunScore {
    pub seed: u64,
    pub m: usize,
    pub final_loss: f64,
    pub canonical_points: usize,
    pub fraction_matched: f64,
    pub median_distance: f64,
    pub median_relative_distance: f64,
    pub wall_seconds: f64,
}

pub fn score(run: &AttackRun, truth: &DMatrix<f64>, cfg: &ExperimentConfig) -> CliResult<(RunScore, MatchReport)> {
    let report = match_to_truth(&run.canonical, truth, None, cfg.metrics.match_tol)?;
    Ok((
        RunScore {
            seed: run.seed,
            m: run.m,
            final_loss: run.outcome.final_loss,
            canonical_points: run.canonical.len(),
            fraction_matched: report.fraction_matched,
            median_distance: report.median_distance(),
            median_relative_distance: report.median_relative_distance(),
            wall_seconds: run.wall_seconds,
        },
        report,
    ))
}

/// One setting of an ablation, over all configured seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationPoint {
    pub m: usize,
    /// Kernel scale actually used (after any data-norm scaling).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_nominal: Option<f64>,
    pub query_count_bound: usize,
    pub fingerprint: String,
    pub runs: Vec<RunScore>,
    /// Median over seeds of each run's median relative match distance.
    pub median_error: f64,
    pub best_fraction_matched: f64,
}

fn summarize(m: usize, bound: usize, fingerprint: &str, runs: Vec<RunScore>) -> AblationPoint {
    let errors: Vec<f64> = runs.iter().map(|r| r.median_relative_distance).collect();
    AblationPoint {
        m,
        gamma: None,
        gamma_nominal: None,
        query_count_bound: bound,
        fingerprint: fingerprint.to_string(),
        median_error: krecon::metrics::percentile(&errors, 50.0),
        best_fraction_matched: runs.iter().map(|r| r.fraction_matched).fold(0.0, f64::max),
        runs,
    }
}

/// Trains once, then attacks with every `m` in the ablation list and every seed.
pub fn ablate_queries(cfg: &ExperimentConfig, inst: &Instance) -> CliResult<Vec<AblationPoint>> {
    let (file, _) = train(&cfg.model, inst, None)?;
    let oracle = file.into_oracle()?;
    let n = cfg.attack.n.unwrap_or(inst.x.nrows());
    let bound = query_count_bound(n, inst.x.ncols());
    let fingerprint = inst.fingerprint();
    let jobs: Vec<(usize, u64)> =
        cfg.ablate.m_values.iter().flat_map(|&m| cfg.attack.seeds.iter().map(move |&s| (m, s))).collect();
    // results come back in job order whatever the scheduling
    let scores: Vec<RunScore> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let run = attack_once(&oracle, &cfg.attack, n, m, seed)?;
            Ok(score(&run, &inst.x, cfg)?.0)
        })
        .collect::<CliResult<_>>()?;
    let per_m = cfg.attack.seeds.len();
    Ok(cfg
        .ablate
        .m_values
        .iter()
        .zip(scores.chunks(per_m))
        .map(|(&m, runs)| summarize(m, bound, &fingerprint, runs.to_vec()))
        .collect())
}

/// Scale applied to each nominal gamma.
pub fn gamma_factor(cfg: &ExperimentConfig, inst: &Instance) -> f64 {
    match cfg.ablate.gamma_scale {
        GammaScale::None => 1.0,
        GammaScale::DataNorm => inst.mean_norm(),
    }
}

/// Trains one model per gamma on the same data and attacks each with the
/// same budget and seeds.
pub fn ablate_gamma(cfg: &ExperimentConfig, inst: &Instance) -> CliResult<Vec<AblationPoint>> {
    if cfg.model.kind == ModelKind::Kde {
        return Err(CliError::Config("gamma ablation needs a krr or svm model".into()));
    }
    let factor = gamma_factor(cfg, inst);
    let n = cfg.attack.n.unwrap_or(inst.x.nrows());
    let (_, m) = resolve_sizes(&cfg.attack, inst.x.nrows(), inst.x.ncols());
    let bound = query_count_bound(n, inst.x.ncols());
    let fingerprint = inst.fingerprint();
    let oracles = cfg
        .ablate
        .gammas
        .iter()
        .map(|&g| Ok(train(&cfg.model, inst, Some(g * factor))?.0.into_oracle()?))
        .collect::<CliResult<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> =
        (0..oracles.len()).flat_map(|i| cfg.attack.seeds.iter().map(move |&s| (i, s))).collect();
    let scores: Vec<RunScore> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let run = attack_once(&oracles[i], &cfg.attack, n, m, seed)?;
            Ok(score(&run, &inst.x, cfg)?.0)
        })
        .collect::<CliResult<_>>()?;
    Ok(cfg
        .ablate
        .gammas
        .iter()
        .zip(scores.chunks(cfg.attack.seeds.len()))
        .map(|(&g, runs)| {
            let mut p = summarize(m, bound, &fingerprint, runs.to_vec());
            p.gamma = Some(g * factor);
            p.gamma_nominal = Some(g);
            p
        })
        .collect())
}

/// Everything the 2D density demo produces.
#[derive(Debug, Clone)]
pub struct KdeDemo {
    pub truth: DMatrix<f64>,
    pub h_true: Vec<f64>,
    pub h_learned: Vec<f64>,
    pub run: AttackRun,
    /// For each true point, the L∞ distance to the nearest canonical candidate.
    pub linf: Vec<f64>,
    /// `max_j |ĥ_j - h_j| / h_j`.
    pub h_relative_error: f64,
    /// Lattice points, one per row.
    pub lattice: DMatrix<f64>,
    pub f_true: DMatrix<f64>,
    /// `f̂` on the lattice at every snapshot step (final step included).
    pub f_hat: Vec<(usize, DMatrix<f64>)>,
}

impl KdeDemo {
    pub fn max_linf(&self) -> f64 {
        self.linf.iter().copied().fold(0.0, f64::max)
    }

    /// Largest gap between `f` and the final `f̂` on the lattice.
    pub fn final_grid_gap(&self) -> f64 {
        self.f_hat.last().map_or(f64::INFINITY, |(_, g)| (g - &self.f_true).amax())
    }
}

/// Side of the square evaluation lattice exported by the demo.
pub const DEMO_LATTICE_SIDE: usize = 101;

/// Samples the training set, fits a KDE with Scott's rule, and attacks it
/// through a bandwidth-hiding oracle, learning the bandwidth jointly.
pub fn kde2d_demo(cfg: &ExperimentConfig) -> CliResult<KdeDemo> {
    if cfg.data.d != 2 {
        return Err(CliError::Config(format!("the density demo needs d = 2, got {}", cfg.data.d)));
    }
    let inst = load_instance(&cfg.data)?;
    let kde = train_kde(&inst.x)?;
    let h_true = kde.h_diag().to_vec();
    let truth_model = kde.to_kernel_model();
    let oracle = kde.into_oracle();

    let (n, m) = resolve_sizes(&cfg.attack, inst.x.nrows(), 2);
    let mut section = cfg.attack.clone();
    if !section.snapshots.contains(&section.steps) {
        section.snapshots.push(section.steps);
    }
    let run = attack_once(&oracle, &section, n, m, cfg.attack.seeds[0])?;

    let h_learned = run.outcome.params.bandwidth().unwrap_or_default();
    let h_relative_error = h_true
        .iter()
        .zip(&h_learned)
        .map(|(h, hh)| (hh - h).abs() / h)
        .fold(0.0, f64::max);
    let linf = (0..inst.x.nrows())
        .map(|i| {
            (0..run.canonical.len())
                .map(|j| (inst.x.row(i) - run.canonical.xhat.row(j)).amax())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let (low, high) = match cfg.attack.queries {
        crate::config::QueryChoice::Grid { low, high } | crate::config::QueryChoice::Uniform { low, high } => {
            (low, high)
        }
        _ => (-6.0, 6.0),
    };
    let lattice = sample_queries(
        &QueryDistribution::Grid { low, high },
        DEMO_LATTICE_SIDE * DEMO_LATTICE_SIDE,
        2,
        0,
    )?;
    let f_true = truth_model.predict(&lattice)?;
    // the fallback kernel is ignored when the params carry a learned bandwidth
    let fallback = truth_model.spec().clone();
    let f_hat = run
        .outcome
        .snapshots
        .iter()
        .map(|(step, params)| {
            let spec = effective_kernel(params, &fallback)?;
            let model = TrainedKernelModel::new(spec, params.xhat.clone(), params.ahat.clone())?;
            Ok((*step, model.predict(&lattice)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(KdeDemo { truth: inst.x, h_true, h_learned, run, linf, h_relative_error, lattice, f_true, f_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use krecon::synthetic::DataSource;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n = 3;
        cfg.data.d = 2;
        cfg.attack.steps = 200;
        cfg.attack.seeds = vec![0, 1];
        cfg.attack.m = Some(20);
        cfg.ablate.m_values = vec![10, 20];
        cfg.ablate.gammas = vec![0.5, 1.0];
        cfg
    }

    #[test]
    fn synthetic_instances_are_reproducible() {
        let cfg = small();
        let a = load_instance(&cfg.data).unwrap();
        assert_eq!(a, load_instance(&cfg.data).unwrap());
        assert_eq!(a.fingerprint(), load_instance(&cfg.data).unwrap().fingerprint());
        let mut other = cfg.data.clone();
        other.seed = 1;
        assert_ne!(a.fingerprint(), load_instance(&other).unwrap().fingerprint());
    }

    #[test]
    fn query_ablation_shares_one_instance() {
        let cfg = small();
        let inst = load_instance(&cfg.data).unwrap();
        let points = ablate_queries(&cfg, &inst).unwrap();
        assert_eq!(points.iter().map(|p| p.m).collect::<Vec<_>>(), vec![10, 20]);
        assert!(points.iter().all(|p| p.fingerprint == inst.fingerprint() && p.runs.len() == 2));
        assert_eq!(points[0].runs[1].seed, 1);
    }

    #[test]
    fn gamma_ablation_scales_by_data_norm() {
        let mut cfg = small();
        cfg.ablate.gamma_scale = GammaScale::DataNorm;
        let inst = load_instance(&cfg.data).unwrap();
        let points = ablate_gamma(&cfg, &inst).unwrap();
        let norm = inst.mean_norm();
        assert!((points[1].gamma.unwrap() - norm).abs() < 1e-15);
        assert_eq!(points[0].gamma_nominal, Some(0.5));
    }

    #[test]
    fn kde_ablation_is_rejected() {
        let mut cfg = small();
        cfg.model.kind = ModelKind::Kde;
        let inst = load_instance(&cfg.data).unwrap();
        assert!(ablate_gamma(&cfg, &inst).is_err());
    }

    #[test]
    fn demo_exports_initialization_snapshot() {
        let mut cfg = small();
        cfg.data.input = DataInput::Synthetic(DataSource::TwoGaussians { offset: 2.0 });
        cfg.data.n = 4;
        cfg.attack.m = Some(100);
        cfg.attack.steps = 50;
        cfg.attack.queries = crate::config::QueryChoice::Grid { low: -6.0, high: 6.0 };
        cfg.attack.snapshots = vec![0];
        let demo = kde2d_demo(&cfg).unwrap();
        assert_eq!(demo.run.outcome.snapshots[0].1, demo.run.outcome.initial);
        assert_eq!(demo.f_hat.len(), 2);
        assert_eq!(demo.lattice.nrows(), DEMO_LATTICE_SIDE * DEMO_LATTICE_SIDE);
        assert_eq!(demo.linf.len(), 4);
    }
}
