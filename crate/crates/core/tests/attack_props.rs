use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use krecon::attack::{
    canonicalize, loss_gradients, reconstruction_loss, run_attack, run_attack_pca, AttackConfig, QuerySet,
    ReconstructionParams,
};
use krecon::kernels::KernelSpec;
use krecon::models::{train_krr, Dataset, ModelOracle, PublicKernel};
use krecon::synthetic::{generate_inputs, generate_targets, DataSource, TargetKind};
use krecon::Result;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    generate_inputs(&DataSource::Gaussian { sigma: 1.0 }, rows, cols, rng).unwrap()
}

fn problem(seed: u64, n: usize, m: usize, d: usize, c: usize) -> (ReconstructionParams, QuerySet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ReconstructionParams::new(gaussian(n, d, &mut rng), gaussian(n, c, &mut rng)).unwrap();
    let queries = QuerySet { z: gaussian(m, d, &mut rng), targets: gaussian(m, c, &mut rng) };
    (params, queries)
}

fn fd_check(params: &ReconstructionParams, queries: &QuerySet, spec: &KernelSpec) -> f64 {
    let h = 1e-5;
    let g = loss_gradients(params, queries, spec).unwrap();
    let loss = |p: &ReconstructionParams| reconstruction_loss(p, queries, spec).unwrap();
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, plus: ReconstructionParams, minus: ReconstructionParams| {
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1e-6));
    };
    for idx in 0..params.xhat.len() {
        let (mut p, mut q) = (params.clone(), params.clone());
        p.xhat[idx] += h;
        q.xhat[idx] -= h;
        compare(g.xhat[idx], p, q);
    }
    for idx in 0..params.ahat.len() {
        let (mut p, mut q) = (params.clone(), params.clone());
        p.ahat[idx] += h;
        q.ahat[idx] -= h;
        compare(g.ahat[idx], p, q);
    }
    if let (Some(log_h), Some(gh)) = (&params.log_h, &g.log_h) {
        for j in 0..log_h.len() {
            let (mut p, mut q) = (params.clone(), params.clone());
            p.log_h.as_mut().unwrap()[j] += h;
            q.log_h.as_mut().unwrap()[j] -= h;
            compare(gh[j], p, q);
        }
    }
    worst
}

#[test]
fn loss_gradients_match_central_differences() {
    let specs = [
        KernelSpec::laplace(0.8).unwrap(),
        KernelSpec::rbf(0.5).unwrap(),
        KernelSpec::polynomial(1.0, 0.5, 2).unwrap(),
        KernelSpec::ntk(2).unwrap(),
    ];
    for spec in &specs {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let (params, queries) = problem(seed, 3, 7, 2, 2);
            worst = worst.max(fd_check(&params, &queries, spec));
        }
        assert!(worst < 1e-5, "{}: {worst:e}", spec.family());
    }
    // learned bandwidth; the kernel passed in is ignored in favor of log_h
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (mut params, queries) = problem(seed, 3, 7, 2, 1);
        params.log_h = Some(vec![0.2, -0.3]);
        worst = worst.max(fd_check(&params, &queries, &KernelSpec::bandwidth_gaussian(vec![1.0, 1.0]).unwrap()));
    }
    assert!(worst < 1e-5, "bandwidth: {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_candidate_order(seed in 0u64..10_000, shift in 0usize..4) {
        let (params, queries) = problem(seed, 4, 9, 3, 2);
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let spec = KernelSpec::laplace(0.6).unwrap();
        let a = reconstruction_loss(&params, &queries, &spec).unwrap();
        let b = reconstruction_loss(&params.permuted(&perm), &queries, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn canonical_form_keeps_the_predictor(seed in 0u64..10_000) {
        let (mut params, queries) = problem(seed, 5, 11, 2, 1);
        // duplicate a candidate so the merge has work to do
        let row = params.xhat.row(0).into_owned();
        params.xhat.set_row(3, &row);
        let spec = KernelSpec::rbf(0.7).unwrap();
        let canon = canonicalize(&params, 1e-9, 1e-300).unwrap();
        prop_assert!(canon.len() <= 4);
        let a = reconstruction_loss(&params, &queries, &spec).unwrap();
        let b = reconstruction_loss(&canon, &queries, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }
}

struct Trained {
    x: DMatrix<f64>,
    oracle: krecon::models::KernelOracle,
}

fn trained(seed: u64, n: usize, d: usize) -> Trained {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(n, d, &mut rng);
    let y = generate_targets(TargetKind::Normal, n, 1, &mut rng).unwrap();
    let (model, _) = train_krr(&Dataset::new(x.clone(), y).unwrap(), &KernelSpec::laplace(0.5).unwrap(), 0.0).unwrap();
    Trained { x, oracle: model.into_oracle() }
}

#[test]
fn identity_basis_reproduces_the_plain_trajectory() {
    let t = trained(1, 4, 3);
    let config = AttackConfig { n: 4, m: 40, steps: 300, seed: 9, ..AttackConfig::default() };
    let plain = run_attack(&t.oracle, &config).unwrap();
    let pca = run_attack_pca(&t.oracle, &config, &DMatrix::identity(3, 3)).unwrap();
    assert_eq!(plain.trace.len(), pca.trace.len());
    for (a, b) in plain.trace.iter().zip(&pca.trace) {
        assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.max(1e-300));
    }
    assert!((&plain.params.xhat - &pca.params.xhat).amax() < 1e-12);
}

#[test]
fn subspace_attack_keeps_candidates_in_the_span() {
    let t = trained(2, 4, 3);
    let basis = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let config = AttackConfig { n: 4, m: 30, steps: 200, seed: 3, ..AttackConfig::default() };
    let out = run_attack_pca(&t.oracle, &config, &basis).unwrap();
    assert!(out.params.xhat.column(2).amax() < 1e-15);
    let skewed = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    assert!(run_attack_pca(&t.oracle, &config, &skewed).is_err());
}

#[test]
fn attack_is_deterministic_per_seed() {
    let t = trained(3, 3, 2);
    let config = AttackConfig { n: 3, m: 20, steps: 150, seed: 42, batch_size: Some(7), ..AttackConfig::default() };
    let a = run_attack(&t.oracle, &config).unwrap();
    let b = run_attack(&t.oracle, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
    assert_eq!(t.x.ncols(), a.params.xhat.ncols());
}

/// Wraps an oracle and records every call it receives.
struct CountingOracle<'a> {
    inner: &'a dyn ModelOracle,
    calls: AtomicUsize,
    rows: Mutex<Vec<usize>>,
}

impl ModelOracle for CountingOracle<'_> {
    fn evaluate(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
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
fn attack_queries_the_oracle_once() {
    let t = trained(4, 3, 2);
    let counting = CountingOracle { inner: &t.oracle, calls: AtomicUsize::new(0), rows: Mutex::new(Vec::new()) };
    let config = AttackConfig { n: 3, m: 17, steps: 100, seed: 1, batch_size: Some(5), ..AttackConfig::default() };
    run_attack(&counting, &config).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 1);
    assert_eq!(*counting.rows.lock().unwrap(), vec![17]);
}
