//! Empirical checks of the uniqueness theory behind the attack.
//!
//! * Zero-loss soundness: with more than `n(d + 2)` queries, any exact
//!   minimizer of the reconstruction loss equals the true expansion up to
//!   permutation and merging. Runs that reach (numerically) zero loss must
//!   therefore canonicalize to the truth.
//! * Uniqueness of representation: for a strictly positive-definite kernel
//!   and distinct points `U`, `K_U b = 0` forces `b = 0`; equivalently the
//!   smallest eigenvalue of `K_U` is positive.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{canonicalize, match_to_truth, query_count_bound, run_attack, AttackConfig, MatchTolerance, QueryDistribution};
use crate::error::{Error, Result};
use crate::kernels::{eval_matrix, KernelSpec};
use crate::linalg::min_eigenvalue;
use crate::models::{train_krr, Dataset};
use crate::synthetic::{generate_inputs, generate_targets, DataSource, TargetKind};

/// Settings for [`zero_loss_soundness`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoundnessConfig {
    /// Training-set size; the attack uses the same number of candidates.
    pub points: usize,
    pub dim: usize,
    /// Queries per run; `query_count_bound(points, dim)` when `None`.
    pub m: Option<usize>,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub loss_threshold: f64,
    pub match_tol: f64,
}

impl Default for SoundnessConfig {
    fn default() -> Self {
        SoundnessConfig {
            points: 2,
            dim: 1,
            m: None,
            gamma: 2.0,
            seeds: (0..20).collect(),
            steps: 20_000,
            loss_threshold: 1e-12,
            match_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessRun {
    pub seed: u64,
    pub final_loss: f64,
    pub reached_threshold: bool,
    /// Only meaningful when the threshold was reached.
    pub matches_truth: bool,
    pub canonical_points: usize,
    pub max_point_error: f64,
    pub max_coeff_error: f64,
    /// For `d = 1`: whether the queries leave the truth unidentifiable, see
    /// [`one_dim_degenerate`].
    pub degenerate_queries: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub m: usize,
    pub bound: usize,
    /// Whether `m > n(d + 2)`; outside the hypothesis nothing is guaranteed.
    pub within_hypothesis: bool,
    pub runs: Vec<SoundnessRun>,
}

impl SoundnessReport {
    pub fn reached(&self) -> usize {
        self.runs.iter().filter(|r| r.reached_threshold).count()
    }

    /// Runs that reached zero loss but did not recover the truth.
    pub fn violations(&self) -> usize {
        self.runs.iter().filter(|r| r.reached_threshold && !r.matches_truth).count()
    }

    /// Violations whose query set is not flagged by [`one_dim_degenerate`].
    pub fn unexplained_violations(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.reached_threshold && !r.matches_truth && r.degenerate_queries != Some(true))
            .count()
    }
}

/// In one dimension a Laplace expansion restricted to the queries only sees,
/// per query-free gap, the two sums `Σ α e^{∓γx}` over the points in that gap,
/// and only one of them for the outer gaps. Exact recovery of `N` distinct
/// points therefore needs at least one query left of the smallest point, one
/// right of the largest, and two between each consecutive pair. Returns true
/// when that fails, in which case other expansions fit every query exactly.
pub fn one_dim_degenerate(points: &[f64], queries: &[f64]) -> bool {
    let mut p = points.to_vec();
    p.sort_by(f64::total_cmp);
    let (Some(&lo), Some(&hi)) = (p.first(), p.last()) else {
        return false;
    };
    let count = |a: f64, b: f64| queries.iter().filter(|&&z| z > a && z < b).count();
    if count(f64::NEG_INFINITY, lo) == 0 || count(hi, f64::INFINITY) == 0 {
        return true;
    }
    p.windows(2).any(|w| count(w[0], w[1]) < 2)
}

/// Trains a Laplace KRR model on random data for each seed, attacks it with
/// `n = N`, and checks every run that reaches the loss threshold.
pub fn zero_loss_soundness(config: &SoundnessConfig) -> Result<SoundnessReport> {
    let bound = query_count_bound(config.points, config.dim);
    let m = config.m.unwrap_or(bound);
    let spec = KernelSpec::laplace(config.gamma)?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
        let x = generate_inputs(&DataSource::Gaussian { sigma: 1.0 }, config.points, config.dim, &mut rng)?;
        let y = generate_targets(TargetKind::Normal, config.points, 1, &mut rng)?;
        let (model, _) = train_krr(&Dataset::new(x.clone(), y)?, &spec, 0.0)?;
        let truth_coeffs = model.coeffs().clone();
        let oracle = model.into_oracle();
        let attack = AttackConfig {
            n: config.points,
            m,
            steps: config.steps,
            seed,
            queries: QueryDistribution::StandardNormal { sigma: 1.0 },
            trace_stride: config.steps.max(1),
            ..AttackConfig::default()
        };
        let outcome = run_attack(&oracle, &attack)?;
        let reached = outcome.final_loss < config.loss_threshold;
        let merge_tol = config.match_tol;
        let coeff_tol = 1e-6 * truth_coeffs.amax().max(f64::MIN_POSITIVE);
        let canonical = canonicalize(&outcome.params, merge_tol, coeff_tol)?;
        let report = match_to_truth(&canonical, &x, Some(&truth_coeffs), MatchTolerance::Absolute(config.match_tol))?;
        let max_point_error = report.per_truth.iter().map(|t| t.distance).fold(0.0, f64::max);
        let max_coeff_error = report.max_coeff_error().unwrap_or(f64::INFINITY);
        let degenerate_queries =
            (config.dim == 1).then(|| one_dim_degenerate(x.as_slice(), outcome.queries.z.as_slice()));
        let matches_truth = canonical.len() == config.points
            && report.fraction_matched == 1.0
            && max_coeff_error <= config.match_tol;
        runs.push(SoundnessRun {
            seed,
            final_loss: outcome.final_loss,
            reached_threshold: reached,
            matches_truth,
            canonical_points: canonical.len(),
            max_point_error,
            max_coeff_error,
            degenerate_queries,
        });
    }
    Ok(SoundnessReport { m, bound, within_hypothesis: m >= bound, runs })
}

/// Smallest eigenvalue of the Gram matrix of `points`.
pub fn gram_min_eigenvalue(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<f64> {
    min_eigenvalue(&eval_matrix(spec, points, points)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessConfig {
    pub instances: usize,
    pub max_points: usize,
    pub max_dim: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for UniquenessConfig {
    fn default() -> Self {
        UniquenessConfig { instances: 50, max_points: 10, max_dim: 5, seed: 0, threshold: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessInstance {
    pub kernel: KernelSpec,
    /// Size of `X`; the rest of `U` are candidate points.
    pub truth_points: usize,
    pub union_points: usize,
    pub dim: usize,
    pub min_eigenvalue: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub threshold: f64,
    pub instances: Vec<UniquenessInstance>,
}

impl UniquenessReport {
    pub fn passed(&self) -> usize {
        self.instances.iter().filter(|i| i.passed).count()
    }
}

/// Random instances `U = X ∪ X̂` of distinct points with Laplace or RBF
/// kernels (alternating); each passes when `λ_min(K_U)` exceeds the threshold.
pub fn representation_uniqueness(config: &UniquenessConfig) -> Result<UniquenessReport> {
    if config.max_points < 2 || config.max_dim < 1 {
        return Err(Error::InvalidInput("need max_points >= 2 and max_dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut instances = Vec::with_capacity(config.instances);
    for k in 0..config.instances {
        let union_points = rng.random_range(2..=config.max_points);
        let truth_points = rng.random_range(1..union_points);
        let dim = rng.random_range(1..=config.max_dim);
        let gamma = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let kernel = if k % 2 == 0 { KernelSpec::laplace(gamma)? } else { KernelSpec::rbf(gamma)? };
        let points = generate_inputs(&DataSource::Gaussian { sigma: 1.0 }, union_points, dim, &mut rng)?;
        let min_eigenvalue = gram_min_eigenvalue(&kernel, &points)?;
        instances.push(UniquenessInstance {
            kernel,
            truth_points,
            union_points,
            dim,
            min_eigenvalue,
            passed: min_eigenvalue > config.threshold,
        });
    }
    Ok(UniquenessReport { threshold: config.threshold, instances })
}
