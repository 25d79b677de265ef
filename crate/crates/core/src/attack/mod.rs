//! Query-only reconstruction of a kernel model's training set.
//!
//! The attacker samples `m` queries once, asks the oracle for its outputs,
//! and then fits a candidate expansion `Σ_i α̂_{i,c} k(·, x̂_i)` to those
//! outputs by Adam. When the fit is exact and enough queries were used, the
//! candidate points are (up to permutation and merging of duplicates) the
//! training points.
//!
//! Random numbers for one run come from a single `ChaCha8Rng` seeded with
//! `AttackConfig::seed`, consumed in this order: queries, `x̂` (row-major),
//! `α̂` (row-major), then mini-batch shuffles.

mod canonical;
mod loss;
mod queries;
pub mod theory;

pub use canonical::{
    canonicalize, default_tolerances, match_to_truth, query_count_bound, MatchReport, MatchTolerance, TruthMatch,
};
pub use loss::{effective_kernel, loss_gradients, reconstruction_loss, LossGradients};
pub use queries::{grid_sides, sample_queries, sample_queries_with, QueryDistribution};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{orthonormality_defect, row_major};
use crate::models::{scott_bandwidth, ModelOracle, PublicKernel};
use crate::optim::{AdamState, OneCycleSchedule};
use loss::{Grads, Problem};

/// Largest tolerated `max |UᵀU - I|` for a PCA basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// The optimization variables of the attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionParams {
    /// n × d candidate points.
    pub xhat: DMatrix<f64>,
    /// n × C candidate coefficients.
    pub ahat: DMatrix<f64>,
    /// Log of the diagonal bandwidth, when it is learned.
    pub log_h: Option<Vec<f64>>,
}

impl ReconstructionParams {
    pub fn new(xhat: DMatrix<f64>, ahat: DMatrix<f64>) -> Result<Self> {
        let p = ReconstructionParams { xhat, ahat, log_h: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("coefficient rows", self.xhat.nrows(), self.ahat.nrows())?;
        if let Some(h) = &self.log_h {
            check_dim("bandwidth length", self.xhat.ncols(), h.len())?;
        }
        let finite = self
            .xhat
            .iter()
            .chain(self.ahat.iter())
            .chain(self.log_h.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("reconstruction params must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xhat.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xhat.nrows() == 0
    }

    /// Learned bandwidth `exp(log_h)`, if any.
    pub fn bandwidth(&self) -> Option<Vec<f64>> {
        self.log_h.as_ref().map(|h| h.iter().map(|v| v.exp()).collect())
    }

    /// Permutes candidates: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(perm.len(), m.ncols(), |i, j| m[(perm[i], j)]);
        ReconstructionParams {
            xhat: pick(&self.xhat),
            ahat: pick(&self.ahat),
            log_h: self.log_h.clone(),
        }
    }
}

/// Queries and the oracle's answers to them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub z: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl QuerySet {
    /// Asks the oracle once, on all of `z`.
    pub fn from_oracle(oracle: &dyn ModelOracle, z: DMatrix<f64>) -> Result<Self> {
        let targets = oracle.evaluate(&z)?;
        if targets.nrows() != z.nrows() || targets.ncols() != oracle.output_dim() {
            return Err(Error::InvalidInput(format!(
                "oracle answered with a {}x{} matrix for {} queries",
                targets.nrows(),
                targets.ncols(),
                z.nrows()
            )));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("oracle returned non-finite outputs".into()));
        }
        Ok(QuerySet { z, targets })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// Settings of one attack run. Defaults follow the reference recipe:
/// `x̂ ~ N(0, 0.3²)`, `α̂` entries with variance 0.05, Adam with OneCycle peaks
/// 2e-2 (points) and 1e-2 (coefficients), 15% warmup, div factors 10 and 100.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Number of candidate points; an upper bound on the training-set size.
    pub n: usize,
    /// Number of queries.
    pub m: usize,
    pub steps: usize,
    pub seed: u64,
    pub queries: QueryDistribution,
    pub point_init_std: f64,
    /// Per-entry variance of the initial coefficients.
    pub coeff_init_var: f64,
    /// Mean of the initial coefficients; zero unless the coefficients share a
    /// known sign, as with a density estimate.
    pub coeff_init_mean: f64,
    pub lr_points: f64,
    pub lr_coeffs: f64,
    pub lr_bandwidth: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Queries per step; all of them when `None`.
    pub batch_size: Option<usize>,
    /// Record the loss every this many steps (the first and last are always kept).
    pub trace_stride: usize,
    /// Steps at which to copy the params (before that step's update; `steps` means final).
    pub snapshot_steps: Vec<usize>,
    pub merge_tol: Option<f64>,
    pub coeff_tol: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            n: 1,
            m: 1,
            steps: 20_000,
            seed: 0,
            queries: QueryDistribution::default(),
            point_init_std: 0.3,
            coeff_init_var: 0.05,
            coeff_init_mean: 0.0,
            lr_points: 2e-2,
            lr_coeffs: 1e-2,
            lr_bandwidth: 1e-2,
            pct_start: 0.15,
            div_factor: 10.0,
            final_div_factor: 100.0,
            batch_size: None,
            trace_stride: 1,
            snapshot_steps: Vec::new(),
            merge_tol: None,
            coeff_tol: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidInput("n and m must be >= 1".into()));
        }
        for (name, v) in [
            ("point_init_std", self.point_init_std),
            ("coeff_init_var", self.coeff_init_var),
            ("lr_points", self.lr_points),
            ("lr_coeffs", self.lr_coeffs),
            ("lr_bandwidth", self.lr_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.coeff_init_mean.is_finite() {
            return Err(Error::InvalidInput("coeff_init_mean must be finite".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.trace_stride == 0 {
            return Err(Error::InvalidInput("trace_stride must be >= 1".into()));
        }
        if self.steps > 0 {
            self.schedule(self.lr_points)?;
        }
        Ok(())
    }

    fn schedule(&self, max_lr: f64) -> Result<OneCycleSchedule> {
        let s = OneCycleSchedule {
            max_lr,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
            total_steps: self.steps,
            three_phase: true,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
}

/// Result of [`run_attack`].
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub params: ReconstructionParams,
    pub initial: ReconstructionParams,
    pub queries: QuerySet,
    /// Loss before the update at each recorded step, then the full-batch loss
    /// at the returned params under `step = steps`.
    pub trace: Vec<TracePoint>,
    pub final_loss: f64,
    pub snapshots: Vec<(usize, ReconstructionParams)>,
    /// The kernel the attack fitted with, when it was published by the oracle.
    pub kernel: Option<KernelSpec>,
}

/// Runs the attack in the full input space.
pub fn run_attack(oracle: &dyn ModelOracle, config: &AttackConfig) -> Result<AttackOutcome> {
    attack_impl(oracle, config, None)
}

/// Runs the attack with candidates constrained to `span(U)`: the optimizer
/// keeps full-dimensional variables `v̂_i` and the candidates are `UUᵀ v̂_i`.
pub fn run_attack_pca(oracle: &dyn ModelOracle, config: &AttackConfig, basis: &DMatrix<f64>) -> Result<AttackOutcome> {
    check_dim("basis rows", oracle.input_dim(), basis.nrows())?;
    if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
        return Err(Error::InvalidInput(format!("basis rank {} not in 1..={}", basis.ncols(), basis.nrows())));
    }
    let defect = orthonormality_defect(basis);
    if !(defect <= ORTHONORMAL_TOL) {
        return Err(Error::InvalidInput(format!("basis is not orthonormal (max |UᵀU - I| = {defect:e})")));
    }
    let projection = basis * basis.transpose();
    attack_impl(oracle, config, Some(&projection))
}

/// `out = v P` for row-major `v` (n × d) and symmetric `P` (d × d).
fn project_rows(v: &[f64], projection: &[f64], d: usize, out: &mut [f64]) {
    for (vi, oi) in v.chunks(d).zip(out.chunks_mut(d)) {
        for (c, o) in oi.iter_mut().enumerate() {
            *o = vi.iter().zip(&projection[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
        }
    }
}

fn to_params(n: usize, d: usize, c: usize, x: &[f64], a: &[f64], log_h: Option<&Vec<f64>>) -> ReconstructionParams {
    ReconstructionParams {
        xhat: DMatrix::from_row_slice(n, d, x),
        ahat: DMatrix::from_row_slice(n, c, a),
        log_h: log_h.cloned(),
    }
}

fn attack_impl(oracle: &dyn ModelOracle, config: &AttackConfig, projection: Option<&DMatrix<f64>>) -> Result<AttackOutcome> {
    config.validate()?;
    let (n, m, d, c) = (config.n, config.m, oracle.input_dim(), oracle.output_dim());
    if d == 0 || c == 0 {
        return Err(Error::InvalidInput("oracle reports an empty input or output".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let z = sample_queries_with(&config.queries, m, d, &mut rng)?;
    let queries = QuerySet::from_oracle(oracle, z)?;

    let normal = |rng: &mut ChaCha8Rng, scale: f64| -> f64 {
        let g: f64 = StandardNormal.sample(rng);
        scale * g
    };
    let mut v: Vec<f64> = (0..n * d).map(|_| normal(&mut rng, config.point_init_std)).collect();
    let coeff_std = config.coeff_init_var.sqrt();
    let mut a: Vec<f64> = (0..n * c).map(|_| config.coeff_init_mean + normal(&mut rng, coeff_std)).collect();

    let (fixed_kernel, mut log_h) = match oracle.kernel() {
        PublicKernel::Known(spec) => {
            spec.validate()?;
            if let Some(kd) = spec.fixed_dim() {
                check_dim("kernel bandwidth", d, kd)?;
            }
            (Some(spec), None)
        }
        PublicKernel::GaussianUnknownBandwidth => {
            let h = scott_bandwidth(&queries.z)?;
            (None, Some(h.iter().map(|v| v.ln()).collect::<Vec<f64>>()))
        }
    };
    let prepared_fixed = fixed_kernel.as_ref().map(|s| s.prepare());
    let prepare = |log_h: &Option<Vec<f64>>| -> Result<crate::kernels::PreparedKernel> {
        match (&prepared_fixed, log_h) {
            (Some(k), _) => Ok(k.clone()),
            (None, Some(h)) => Ok(KernelSpec::bandwidth_gaussian(h.iter().map(|v| v.exp()).collect())?.prepare()),
            (None, None) => unreachable!("either a fixed kernel or a learned bandwidth"),
        }
    };

    let p_rows = projection.map(row_major);
    let mut x = vec![0.0; n * d];
    let current_x = |v: &[f64], x: &mut Vec<f64>| match &p_rows {
        Some(p) => project_rows(v, p, d, x),
        None => x.copy_from_slice(v),
    };
    current_x(&v, &mut x);
    let initial = to_params(n, d, c, &x, &a, log_h.as_ref());

    let z_rows = row_major(&queries.z);
    let t_rows = row_major(&queries.targets);
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let wants_snapshot = |t: usize| config.snapshot_steps.contains(&t);

    if config.steps > 0 {
        let sched_x = config.schedule(config.lr_points)?;
        let sched_a = config.schedule(config.lr_coeffs)?;
        let sched_h = config.schedule(config.lr_bandwidth)?;
        let mut adam_x = AdamState::new(n * d);
        let mut adam_a = AdamState::new(n * c);
        let mut adam_h = AdamState::new(d);
        let mut grads = Grads::new(n, d, c);
        let mut grad_v = vec![0.0; n * d];
        let mut order: Vec<usize> = (0..m).collect();
        let batch = config.batch_size.filter(|&b| b < m);
        let mut cursor = m;
        let mut last_good = initial.clone();

        for t in 0..config.steps {
            if wants_snapshot(t) {
                snapshots.push((t, to_params(n, d, c, &x, &a, log_h.as_ref())));
            }
            let batch_rows = match batch {
                Some(b) => {
                    // sampling without replacement; the last batch of an epoch may be short
                    if cursor >= m {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    let end = (cursor + b).min(m);
                    let rows = &order[cursor..end];
                    cursor = end;
                    Some(rows.to_vec())
                }
                None => None,
            };
            let kernel = prepare(&log_h)?;
            let problem = Problem { kernel: &kernel, z: &z_rows, targets: &t_rows, d, outputs: c };
            let loss = problem.evaluate(&x, &a, batch_rows.as_deref(), Some((&mut grads, log_h.is_some())));
            let grads_finite = grads.x.iter().chain(&grads.a).all(|g| g.is_finite())
                && (log_h.is_none() || grads.log_h.iter().all(|g| g.is_finite()));
            if !loss.is_finite() || !grads_finite {
                return Err(Error::AttackAborted { step: t, last_finite: Box::new(last_good) });
            }
            last_good = to_params(n, d, c, &x, &a, log_h.as_ref());
            if t % config.trace_stride == 0 || t + 1 == config.steps {
                trace.push(TracePoint { step: t, loss });
            }
            match &p_rows {
                Some(p) => project_rows(&grads.x, p, d, &mut grad_v),
                None => grad_v.copy_from_slice(&grads.x),
            }
            adam_x.step(&mut v, &grad_v, sched_x.lr(t)?)?;
            adam_a.step(&mut a, &grads.a, sched_a.lr(t)?)?;
            if let Some(h) = log_h.as_mut() {
                adam_h.step(h, &grads.log_h, sched_h.lr(t)?)?;
            }
            current_x(&v, &mut x);
        }
    }

    let kernel = prepare(&log_h)?;
    let problem = Problem { kernel: &kernel, z: &z_rows, targets: &t_rows, d, outputs: c };
    let final_loss = problem.evaluate(&x, &a, None, None);
    let params = to_params(n, d, c, &x, &a, log_h.as_ref());
    if !final_loss.is_finite() {
        return Err(Error::AttackAborted { step: config.steps, last_finite: Box::new(params) });
    }
    trace.push(TracePoint { step: config.steps, loss: final_loss });
    if wants_snapshot(config.steps) {
        snapshots.push((config.steps, params.clone()));
    }
    Ok(AttackOutcome {
        params,
        initial,
        queries,
        trace,
        final_loss,
        snapshots,
        kernel: fixed_kernel,
    })
}
