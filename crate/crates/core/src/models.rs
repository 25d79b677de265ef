//! Attacked models: kernel ridge regression, hinge-loss kernel SVM, KDE, and
//! the query-only oracle facade placed in front of them.
//!
//! Every model here is a kernel expansion `f_c(x) = Σ_i α_{i,c} k(x, x_i)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{eval_matrix, KernelSpec};
use crate::linalg::{spd_solve_with_jitter, SolveInfo};
use crate::metrics::ImageShape;
use crate::optim::OneCycleSchedule;

/// Training inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub shape: Option<ImageShape>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidInput("dataset needs at least one row and column".into()));
        }
        check_dim("target rows", x.nrows(), y.nrows())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset inputs must be finite".into()));
        }
        Ok(Dataset { x, y, shape: None })
    }

    pub fn with_shape(mut self, shape: ImageShape) -> Result<Self> {
        check_dim("image shape", shape.len(), self.x.ncols())?;
        self.shape = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// A kernel expansion with its support points and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedKernelModel {
    spec: KernelSpec,
    support: DMatrix<f64>,
    coeffs: DMatrix<f64>,
}

impl TrainedKernelModel {
    pub fn new(spec: KernelSpec, support: DMatrix<f64>, coeffs: DMatrix<f64>) -> Result<Self> {
        spec.validate()?;
        check_dim("coefficient rows", support.nrows(), coeffs.nrows())?;
        if let Some(d) = spec.fixed_dim() {
            check_dim("kernel bandwidth", d, support.ncols())?;
        }
        if support.nrows() == 0 || coeffs.ncols() == 0 {
            return Err(Error::InvalidInput("model needs at least one support point and output".into()));
        }
        if coeffs.iter().chain(support.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("model entries must be finite".into()));
        }
        Ok(TrainedKernelModel {
            spec,
            support,
            coeffs,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn input_dim(&self) -> usize {
        self.support.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.coeffs.ncols()
    }

    /// Row `j` of the result is `f(z_j)`.
    pub fn predict(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("query columns", self.input_dim(), z.ncols())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("query points must be finite".into()));
        }
        Ok(eval_matrix(&self.spec, z, &self.support)? * &self.coeffs)
    }

    /// Wraps the model in a query-only oracle. The kernel is published.
    pub fn into_oracle(self) -> KernelOracle {
        let public = PublicKernel::Known(self.spec.clone());
        KernelOracle { model: self, public }
    }
}

/// `oracle_evaluate`: row `j` is `[Σ_i α_{i,c} k(z_j, x_i)]_c`.
pub fn oracle_evaluate(model: &TrainedKernelModel, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.predict(z)
}

/// What an attacker is told about the kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum PublicKernel {
    /// The family and all of its parameters.
    Known(KernelSpec),
    /// A normalized Gaussian of unknown diagonal bandwidth.
    GaussianUnknownBandwidth,
}

/// Query-only access to a model: evaluation plus public metadata.
///
/// Implementors must not offer any way to read support points or coefficients.
pub trait ModelOracle: Send + Sync {
    /// Evaluates the model on every row of `z`, returning an `m × C` matrix.
    fn evaluate(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    fn kernel(&self) -> PublicKernel;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
}

/// Serving-side oracle around a trained model. Its fields are private and it
/// exposes nothing beyond [`ModelOracle`].
pub struct KernelOracle {
    model: TrainedKernelModel,
    public: PublicKernel,
}

impl ModelOracle for KernelOracle {
    fn evaluate(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.model.predict(z)
    }

    fn kernel(&self) -> PublicKernel {
        self.public.clone()
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.model.output_dim()
    }
}

/// Diagnostics from [`train_krr`].
#[derive(Debug, Clone, PartialEq)]
pub struct KrrReport {
    pub solve: SolveInfo,
    /// `‖(K + NλI)A - Y‖_F / ‖Y‖_F` (absolute norm when `Y = 0`).
    pub relative_residual: f64,
}

fn check_distinct_rows(x: &DMatrix<f64>) -> Result<()> {
    for i in 0..x.nrows() {
        for j in 0..i {
            if x.row(i) == x.row(j) {
                return Err(Error::InvalidInput(format!(
                    "training inputs {j} and {i} are identical"
                )));
            }
        }
    }
    Ok(())
}

/// Kernel ridge regression: coefficients `(K + NλI)^{-1} Y`.
pub fn train_krr(data: &Dataset, spec: &KernelSpec, lambda: f64) -> Result<(TrainedKernelModel, KrrReport)> {
    spec.validate()?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 && !spec.admits_interpolation() {
        return Err(Error::InvalidInput(format!(
            "the {} kernel is not strictly positive definite; use lambda > 0",
            spec.family()
        )));
    }
    if data.y.ncols() == 0 {
        return Err(Error::InvalidInput("regression targets need at least one column".into()));
    }
    check_distinct_rows(&data.x)?;
    let n = data.len();
    let mut system = eval_matrix(spec, &data.x, &data.x)?;
    for i in 0..n {
        system[(i, i)] += n as f64 * lambda;
    }
    let (coeffs, solve) = spd_solve_with_jitter(&system, &data.y)?;
    let residual = (&system * &coeffs - &data.y).norm();
    let y_norm = data.y.norm();
    let relative_residual = if y_norm > 0.0 { residual / y_norm } else { residual };
    let model = TrainedKernelModel::new(spec.clone(), data.x.clone(), coeffs)?;
    Ok((model, KrrReport { solve, relative_residual }))
}

/// Labels for hinge-loss training.
#[derive(Debug, Clone, PartialEq)]
pub enum SvmLabels {
    /// `y_i ∈ {±1}`, one output.
    Binary(Vec<f64>),
    /// 0-based class indices out of `classes`.
    Multiclass { labels: Vec<usize>, classes: usize },
}

impl SvmLabels {
    /// Reads labels from a single-column target matrix: `{±1}` is binary,
    /// integers `1..=C` are classes.
    pub fn from_column(y: &DMatrix<f64>) -> Result<Self> {
        check_dim("label columns", 1, y.ncols())?;
        let values: Vec<f64> = y.iter().copied().collect();
        if values.iter().all(|&v| v == 1.0 || v == -1.0) {
            return Ok(SvmLabels::Binary(values));
        }
        let mut labels = Vec::with_capacity(values.len());
        for &v in &values {
            if v.fract() != 0.0 || v < 1.0 || !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "class labels must be ±1 or integers 1..C, got {v}"
                )));
            }
            labels.push(v as usize - 1);
        }
        let classes = labels.iter().copied().max().unwrap_or(0) + 1;
        if classes < 2 {
            return Err(Error::InvalidInput("multiclass labels need at least two classes".into()));
        }
        Ok(SvmLabels::Multiclass { labels, classes })
    }

    pub fn len(&self) -> usize {
        match self {
            SvmLabels::Binary(y) => y.len(),
            SvmLabels::Multiclass { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outputs(&self) -> usize {
        match self {
            SvmLabels::Binary(_) => 1,
            SvmLabels::Multiclass { classes, .. } => *classes,
        }
    }
}

/// Binary hinge term `max(0, 1 - y f)` and its subgradient in `f`.
/// A margin of exactly 1 counts as inactive.
pub fn hinge_term(margin_target: f64, f: f64) -> (f64, f64) {
    let slack = 1.0 - margin_target * f;
    if slack > 0.0 {
        (slack, -margin_target)
    } else {
        (0.0, 0.0)
    }
}

/// Average hinge objective of the predictions `f` (N × C) and its
/// subgradient with respect to `f`.
pub fn hinge_objective(labels: &SvmLabels, f: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = f.nrows();
    let mut grad = DMatrix::zeros(n, f.ncols());
    let mut total = 0.0;
    match labels {
        SvmLabels::Binary(y) => {
            for i in 0..n {
                let (loss, g) = hinge_term(y[i], f[(i, 0)]);
                total += loss;
                grad[(i, 0)] = g / n as f64;
            }
        }
        SvmLabels::Multiclass { labels, classes } => {
            for (i, &yi) in labels.iter().enumerate() {
                // lowest index wins ties
                let mut rival = usize::MAX;
                for c in 0..*classes {
                    if c != yi && (rival == usize::MAX || f[(i, c)] > f[(i, rival)]) {
                        rival = c;
                    }
                }
                let slack = 1.0 + f[(i, rival)] - f[(i, yi)];
                if slack > 0.0 {
                    total += slack;
                    grad[(i, rival)] += 1.0 / n as f64;
                    grad[(i, yi)] -= 1.0 / n as f64;
                }
            }
        }
    }
    (total / n as f64, grad)
}

/// Objective values recorded by [`train_svm_gd`]: entry `t` is the
/// objective before update `t`, the last entry is at the returned coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmTrace {
    pub losses: Vec<f64>,
}

impl SvmTrace {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("trace is never empty")
    }
}

/// Hinge-loss SVM trained by full-batch subgradient descent directly on the
/// expansion coefficients, starting from zero, with a OneCycle learning rate.
pub fn train_svm_gd(
    data: &Dataset,
    spec: &KernelSpec,
    steps: usize,
    schedule: &OneCycleSchedule,
) -> Result<(TrainedKernelModel, SvmTrace)> {
    spec.validate()?;
    schedule.validate()?;
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be >= 1".into()));
    }
    if schedule.total_steps != steps {
        return Err(Error::InvalidInput(format!(
            "schedule spans {} steps but {steps} were requested",
            schedule.total_steps
        )));
    }
    let labels = SvmLabels::from_column(&data.y)?;
    check_distinct_rows(&data.x)?;
    let gram = eval_matrix(spec, &data.x, &data.x)?;
    let mut coeffs = DMatrix::zeros(data.len(), labels.outputs());
    let mut losses = Vec::with_capacity(steps + 1);
    for t in 0..steps {
        let (loss, grad_f) = hinge_objective(&labels, &(&gram * &coeffs));
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "svm training", step: t });
        }
        losses.push(loss);
        // f = Kα with K symmetric, so ∂/∂α = K ∂/∂f
        let grad = &gram * grad_f;
        coeffs -= grad * schedule.lr(t)?;
    }
    let (loss, _) = hinge_objective(&labels, &(&gram * &coeffs));
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "svm training", step: steps });
    }
    losses.push(loss);
    let model = TrainedKernelModel::new(spec.clone(), data.x.clone(), coeffs)?;
    Ok((model, SvmTrace { losses }))
}

/// Gaussian KDE with a diagonal bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    support: DMatrix<f64>,
    h_diag: Vec<f64>,
}

impl KdeModel {
    pub fn new(support: DMatrix<f64>, h_diag: Vec<f64>) -> Result<Self> {
        KernelSpec::bandwidth_gaussian(h_diag.clone())?;
        check_dim("bandwidth length", support.ncols(), h_diag.len())?;
        if support.nrows() == 0 {
            return Err(Error::InvalidInput("KDE needs at least one point".into()));
        }
        Ok(KdeModel { support, h_diag })
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    /// Diagonal of `H`.
    pub fn h_diag(&self) -> &[f64] {
        &self.h_diag
    }

    pub fn spec(&self) -> KernelSpec {
        KernelSpec::BandwidthGaussian {
            h_diag: self.h_diag.clone(),
        }
    }

    /// The estimator as a kernel expansion with coefficients `1/N`.
    pub fn to_kernel_model(&self) -> TrainedKernelModel {
        let n = self.support.nrows();
        TrainedKernelModel::new(self.spec(), self.support.clone(), DMatrix::from_element(n, 1, 1.0 / n as f64))
            .expect("validated on construction")
    }

    /// Density estimate at every row of `z`.
    pub fn density(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.to_kernel_model().predict(z)
    }

    /// Oracle that hides the bandwidth as well as the points.
    pub fn into_oracle(self) -> KernelOracle {
        KernelOracle {
            model: self.to_kernel_model(),
            public: PublicKernel::GaussianUnknownBandwidth,
        }
    }
}

/// Per-coordinate sample standard deviation (denominator `N - 1`).
pub fn column_std(points: &DMatrix<f64>) -> Vec<f64> {
    let n = points.nrows() as f64;
    points
        .column_iter()
        .map(|col| {
            let mean = col.sum() / n;
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

/// Scott's-rule bandwidth: `H_jj = N^{-1/6} σ̃_j`.
pub fn scott_bandwidth(points: &DMatrix<f64>) -> Result<Vec<f64>> {
    if points.nrows() < 2 {
        return Err(Error::InvalidInput("Scott's rule needs at least two points".into()));
    }
    let factor = (points.nrows() as f64).powf(-1.0 / 6.0);
    column_std(points)
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            if s > 0.0 && s.is_finite() {
                Ok(factor * s)
            } else {
                Err(Error::InvalidInput(format!("coordinate {j} has zero variance")))
            }
        })
        .collect()
}

/// Fits a KDE with Scott's-rule bandwidth.
pub fn train_kde(points: &DMatrix<f64>) -> Result<KdeModel> {
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("KDE points must be finite".into()));
    }
    let h = scott_bandwidth(points)?;
    KdeModel::new(points.clone(), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn krr_single_point() {
        let data = Dataset::new(col(&[0.4]), col(&[3.0])).unwrap();
        let (model, _) = train_krr(&data, &KernelSpec::laplace(1.0).unwrap(), 0.0).unwrap();
        assert_eq!(model.coeffs()[(0, 0)], 3.0);
    }

    #[test]
    fn krr_two_by_two() {
        // RBF with γ = ln 2 at distance 1 gives K = [[1, 0.5], [0.5, 1]]
        let data = Dataset::new(col(&[0.0, 1.0]), col(&[1.0, 0.0])).unwrap();
        let spec = KernelSpec::rbf(std::f64::consts::LN_2).unwrap();
        let (model, report) = train_krr(&data, &spec, 0.0).unwrap();
        assert!((model.coeffs()[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        assert!((model.coeffs()[(1, 0)] + 2.0 / 3.0).abs() < 1e-12);
        assert!(report.relative_residual < 1e-14);
    }

    #[test]
    fn krr_heavy_regularization_bound() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i as f64 * 0.7 + j as f64).sin());
        let y = DMatrix::from_fn(6, 1, |i, _| i as f64 - 2.0);
        let data = Dataset::new(x, y.clone()).unwrap();
        let spec = KernelSpec::laplace(0.5).unwrap();
        let lambda = 1e6;
        let (model, _) = train_krr(&data, &spec, lambda).unwrap();
        let k = eval_matrix(&spec, &data.x, &data.x).unwrap();
        let k_norm = k.clone().symmetric_eigen().eigenvalues.amax();
        let bound = y.norm() / (6.0 * lambda - k_norm);
        assert!(model.coeffs().norm() <= bound);
    }

    #[test]
    fn krr_rejects_duplicates_and_bad_lambda() {
        let data = Dataset::new(col(&[1.0, 1.0]), col(&[0.0, 1.0])).unwrap();
        let spec = KernelSpec::rbf(1.0).unwrap();
        assert!(matches!(train_krr(&data, &spec, 0.0), Err(Error::InvalidInput(_))));
        let ok = Dataset::new(col(&[1.0, 2.0]), col(&[0.0, 1.0])).unwrap();
        assert!(train_krr(&ok, &spec, -1.0).is_err());
        let poly = KernelSpec::polynomial(1.0, 1.0, 3).unwrap();
        assert!(train_krr(&ok, &poly, 0.0).is_err());
        assert!(train_krr(&ok, &poly, 1e-3).is_ok());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_term(1.0, 2.0), (0.0, 0.0));
        assert_eq!(hinge_term(1.0, 0.0), (1.0, -1.0));
        assert_eq!(hinge_term(-1.0, -1.0), (0.0, 0.0));
    }

    #[test]
    fn crammer_singer_ties_pick_lowest_rival() {
        let labels = SvmLabels::Multiclass { labels: vec![2], classes: 3 };
        let f = DMatrix::from_row_slice(1, 3, &[0.5, 0.5, 0.0]);
        let (loss, g) = hinge_objective(&labels, &f);
        assert_eq!(loss, 1.5);
        assert_eq!(g, DMatrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]));
    }

    #[test]
    fn labels_parse() {
        assert!(matches!(SvmLabels::from_column(&col(&[1.0, -1.0])).unwrap(), SvmLabels::Binary(_)));
        match SvmLabels::from_column(&col(&[1.0, 3.0, 2.0])).unwrap() {
            SvmLabels::Multiclass { labels, classes } => {
                assert_eq!(labels, vec![0, 2, 1]);
                assert_eq!(classes, 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(SvmLabels::from_column(&col(&[0.5, 1.0])).is_err());
    }

    #[test]
    fn svm_separates_two_points() {
        let data = Dataset::new(col(&[-1.0, 1.0]), col(&[-1.0, 1.0])).unwrap();
        let spec = KernelSpec::rbf(1.0).unwrap();
        let steps = 10_000;
        let schedule = OneCycleSchedule::new(1e-2, steps).unwrap();
        let (model, trace) = train_svm_gd(&data, &spec, steps, &schedule).unwrap();
        let f = model.predict(&data.x).unwrap();
        assert!(-f[(0, 0)] >= 1.0 - 1e-2 && f[(1, 0)] >= 1.0 - 1e-2);
        assert!(trace.last() <= trace.initial());
        let (recomputed, _) = hinge_objective(&SvmLabels::from_column(&data.y).unwrap(), &f);
        assert_eq!(recomputed, trace.last());
    }

    #[test]
    fn svm_multiclass_descends() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 0.0, 0.2, 0.1, 3.0, 0.0, 3.1, 0.3, 0.0, 3.0, 0.2, 3.2]);
        let y = col(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let data = Dataset::new(x, y).unwrap();
        let spec = KernelSpec::laplace(0.5).unwrap();
        let schedule = OneCycleSchedule::new(1e-2, 5000).unwrap();
        let (model, trace) = train_svm_gd(&data, &spec, 5000, &schedule).unwrap();
        assert_eq!(model.output_dim(), 3);
        assert!(trace.last() < trace.initial());
        assert_eq!(trace.losses.len(), 5001);
    }

    #[test]
    fn scott_rule_factor() {
        // any data with unit sample std per coordinate
        let x = DMatrix::from_fn(10, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let s = column_std(&x)[0];
        let h = scott_bandwidth(&x).unwrap()[0];
        assert!((h / s - 0.681_292_069_057_961).abs() < 1e-12);
    }

    #[test]
    fn kde_rejects_constant_coordinate() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(train_kde(&x).is_err());
        assert!(train_kde(&col(&[1.0])).is_err());
    }

    #[test]
    fn kde_two_point_midpoint() {
        let kde = train_kde(&col(&[-1.0, 1.0])).unwrap();
        let sigma = 2.0f64.sqrt();
        let h = 2.0f64.powf(-1.0 / 6.0) * sigma;
        assert!((kde.h_diag()[0] - h).abs() < 1e-15);
        // H = h is the variance of each bump
        let expected = (2.0 * std::f64::consts::PI * h).powf(-0.5) * (-1.0 / (2.0 * h)).exp();
        let f = kde.density(&col(&[0.0])).unwrap()[(0, 0)];
        assert!((f - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_coefficients_predict_zero() {
        let model = TrainedKernelModel::new(
            KernelSpec::rbf(1.0).unwrap(),
            col(&[0.0, 1.0]),
            DMatrix::zeros(2, 3),
        )
        .unwrap();
        let out = oracle_evaluate(&model, &col(&[0.3, -2.0])).unwrap();
        assert_eq!(out, DMatrix::zeros(2, 3));
        assert!(oracle_evaluate(&model, &DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn kde_oracle_hides_bandwidth() {
        let oracle = train_kde(&col(&[-1.0, 0.5, 2.0])).unwrap().into_oracle();
        assert_eq!(oracle.kernel(), PublicKernel::GaussianUnknownBandwidth);
        assert_eq!((oracle.input_dim(), oracle.output_dim()), (1, 1));
    }
}
