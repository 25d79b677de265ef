//! Closed-form kernels, Gram matrices and gradients in the second argument.
//!
//! Every kernel here is evaluated in `f64`. The gradients are taken with
//! respect to the *second* argument, which is the slot a reconstruction
//! candidate occupies in `k(z, x̂)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::row_major;

/// Default number of rows per Gram tile.
pub const DEFAULT_TILE_ROWS: usize = 4096;

/// Clamp applied to the arc-cosine argument before the derivative of `κ0`.
pub const NTK_DERIVATIVE_CLAMP: f64 = 1e-7;

/// Below this distance the Laplace gradient is replaced by the zero subgradient.
pub const LAPLACE_COINCIDENCE: f64 = 1e-12;

/// A kernel family together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `exp(-γ‖x - x'‖)`
    Laplace { gamma: f64 },
    /// `exp(-γ‖x - x'‖²)`
    Rbf { gamma: f64 },
    /// `(c0 + γ⟨x, x'⟩)^degree`
    Polynomial { c0: f64, gamma: f64, degree: u32 },
    /// Fully connected ReLU NTK of the given depth, extended homogeneously off the sphere.
    Ntk { depth: u32 },
    /// Normalized Gaussian with diagonal covariance `H = diag(h_diag)`.
    BandwidthGaussian { h_diag: Vec<f64> },
}

impl KernelSpec {
    pub fn laplace(gamma: f64) -> Result<Self> {
        let spec = KernelSpec::Laplace { gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rbf(gamma: f64) -> Result<Self> {
        let spec = KernelSpec::Rbf { gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn polynomial(c0: f64, gamma: f64, degree: u32) -> Result<Self> {
        let spec = KernelSpec::Polynomial { c0, gamma, degree };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ntk(depth: u32) -> Result<Self> {
        let spec = KernelSpec::Ntk { depth };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bandwidth_gaussian(h_diag: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec::BandwidthGaussian { h_diag };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that every scale parameter is strictly positive and finite.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} must be a positive finite number, got {v}"
                )))
            }
        };
        match self {
            KernelSpec::Laplace { gamma } | KernelSpec::Rbf { gamma } => positive("gamma", *gamma),
            KernelSpec::Polynomial { c0, gamma, degree } => {
                positive("c0", *c0)?;
                positive("gamma", *gamma)?;
                if *degree == 0 {
                    return Err(Error::InvalidInput("polynomial degree must be >= 1".into()));
                }
                Ok(())
            }
            KernelSpec::Ntk { depth } => {
                if *depth == 0 {
                    return Err(Error::InvalidInput("NTK depth must be >= 1".into()));
                }
                Ok(())
            }
            KernelSpec::BandwidthGaussian { h_diag } => {
                if h_diag.is_empty() {
                    return Err(Error::InvalidInput("bandwidth must have length >= 1".into()));
                }
                h_diag.iter().try_for_each(|&h| positive("bandwidth", h))
            }
        }
    }

    /// The input dimension this kernel is tied to, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::BandwidthGaussian { h_diag } => Some(h_diag.len()),
            _ => None,
        }
    }

    /// Short lowercase family name, as used in model files and configs.
    pub fn family(&self) -> &'static str {
        match self {
            KernelSpec::Laplace { .. } => "laplace",
            KernelSpec::Rbf { .. } => "rbf",
            KernelSpec::Polynomial { .. } => "polynomial",
            KernelSpec::Ntk { .. } => "ntk",
            KernelSpec::BandwidthGaussian { .. } => "bandwidth-gaussian",
        }
    }

    /// Whether Gram matrices over distinct inputs are generically invertible,
    /// so that unregularized regression can interpolate.
    pub fn admits_interpolation(&self) -> bool {
        !matches!(self, KernelSpec::Polynomial { .. })
    }

    /// Precomputes per-spec constants for repeated evaluation.
    pub fn prepare(&self) -> PreparedKernel {
        let (norm, inv_h) = match self {
            KernelSpec::BandwidthGaussian { h_diag } => {
                let d = h_diag.len() as f64;
                let log_det: f64 = h_diag.iter().map(|h| h.ln()).sum();
                let norm = (-0.5 * d * (2.0 * PI).ln() - 0.5 * log_det).exp();
                (norm, h_diag.iter().map(|h| 1.0 / h).collect())
            }
            _ => (1.0, Vec::new()),
        };
        PreparedKernel {
            spec: self.clone(),
            norm,
            inv_h,
        }
    }
}

/// A kernel spec with its constants precomputed. Evaluation skips input checks.
#[derive(Debug, Clone)]
pub struct PreparedKernel {
    spec: KernelSpec,
    norm: f64,
    inv_h: Vec<f64>,
}

impl PreparedKernel {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// `k(x, x2)`. Returns NaN for a zero-norm NTK input.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        match &self.spec {
            KernelSpec::Laplace { gamma } => (-gamma * sq_dist(x, x2).sqrt()).exp(),
            KernelSpec::Rbf { gamma } => (-gamma * sq_dist(x, x2)).exp(),
            KernelSpec::Polynomial { c0, gamma, degree } => {
                (c0 + gamma * dot(x, x2)).powi(*degree as i32)
            }
            KernelSpec::Ntk { depth } => {
                let (nx, nx2) = (norm(x), norm(x2));
                if nx == 0.0 || nx2 == 0.0 {
                    return f64::NAN;
                }
                let u = (dot(x, x2) / (nx * nx2)).clamp(-1.0, 1.0);
                nx * nx2 * ntk_sphere(*depth, u)
            }
            KernelSpec::BandwidthGaussian { .. } => {
                let q: f64 = x
                    .iter()
                    .zip(x2)
                    .zip(&self.inv_h)
                    .map(|((a, b), ih)| (a - b) * (a - b) * ih)
                    .sum();
                self.norm * (-0.5 * q).exp()
            }
        }
    }

    /// Adds `scale · ∂k(z, x̂)/∂x̂` to `out`, given the kernel value `k = k(z, x̂)`.
    pub fn add_grad_second(&self, z: &[f64], xhat: &[f64], k: f64, scale: f64, out: &mut [f64]) {
        match &self.spec {
            KernelSpec::Laplace { gamma } => {
                let r = sq_dist(xhat, z).sqrt();
                if r < LAPLACE_COINCIDENCE {
                    return;
                }
                let c = -scale * gamma * k / r;
                for ((o, a), b) in out.iter_mut().zip(xhat).zip(z) {
                    *o += c * (a - b);
                }
            }
            KernelSpec::Rbf { gamma } => {
                let c = -2.0 * scale * gamma * k;
                for ((o, a), b) in out.iter_mut().zip(xhat).zip(z) {
                    *o += c * (a - b);
                }
            }
            KernelSpec::Polynomial { c0, gamma, degree } => {
                let base = c0 + gamma * dot(z, xhat);
                let c = scale * gamma * f64::from(*degree) * base.powi(*degree as i32 - 1);
                for (o, b) in out.iter_mut().zip(z) {
                    *o += c * b;
                }
            }
            KernelSpec::Ntk { depth } => {
                let (nz, nx) = (norm(z), norm(xhat));
                if nz == 0.0 || nx == 0.0 {
                    out.iter_mut().for_each(|o| *o = f64::NAN);
                    return;
                }
                let u = (dot(z, xhat) / (nz * nx)).clamp(-1.0, 1.0);
                let (g, dg) = ntk_sphere_with_derivative(*depth, u);
                // ∇ = ‖z‖ g(u) x̂/‖x̂‖ + g'(u) (z - u ‖z‖ x̂/‖x̂‖)
                let radial = scale * (nz * g - dg * u * nz) / nx;
                let along_z = scale * dg;
                for ((o, a), b) in out.iter_mut().zip(xhat).zip(z) {
                    *o += radial * a + along_z * b;
                }
            }
            KernelSpec::BandwidthGaussian { .. } => {
                let c = -scale * k;
                for (((o, a), b), ih) in out.iter_mut().zip(xhat).zip(z).zip(&self.inv_h) {
                    *o += c * (a - b) * ih;
                }
            }
        }
    }

    /// For the bandwidth Gaussian: adds `scale · ∂k/∂(log h_j)` to `out[j]`.
    /// No-op for the other families.
    pub fn add_grad_log_bandwidth(
        &self,
        z: &[f64],
        xhat: &[f64],
        k: f64,
        scale: f64,
        out: &mut [f64],
    ) {
        if let KernelSpec::BandwidthGaussian { .. } = &self.spec {
            for (((o, a), b), ih) in out.iter_mut().zip(xhat).zip(z).zip(&self.inv_h) {
                let diff = a - b;
                *o += scale * k * 0.5 * (diff * diff * ih - 1.0);
            }
        }
    }
}

fn check_inputs(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<()> {
    check_dim("kernel arguments", x.len(), x2.len())?;
    if let Some(d) = spec.fixed_dim() {
        check_dim("kernel bandwidth", d, x.len())?;
    }
    if matches!(spec, KernelSpec::Ntk { .. }) && (norm(x) == 0.0 || norm(x2) == 0.0) {
        return Err(Error::ZeroNormInput);
    }
    Ok(())
}

/// Evaluates `k(x, x2)`.
pub fn eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_inputs(spec, x, x2)?;
    Ok(spec.prepare().eval(x, x2))
}

/// Gram matrix between the rows of `a` and the rows of `b`.
pub fn eval_matrix(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    eval_matrix_tiled(spec, a, b, DEFAULT_TILE_ROWS)
}

/// As [`eval_matrix`], assembling at most `tile_rows` rows of `a` per tile.
/// Tiles run in parallel; every entry is computed independently, so the
/// result does not depend on the schedule.
pub fn eval_matrix_tiled(
    spec: &KernelSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tile_rows: usize,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_dim("gram matrix columns", a.ncols(), b.ncols())?;
    if let Some(d) = spec.fixed_dim() {
        check_dim("kernel bandwidth", d, a.ncols())?;
    }
    let d = a.ncols();
    let (ra, rb) = (row_major(a), row_major(b));
    if matches!(spec, KernelSpec::Ntk { .. }) {
        let zero_row = |rows: &[f64]| d > 0 && rows.chunks(d).any(|r| norm(r) == 0.0);
        if d == 0 || zero_row(&ra) || zero_row(&rb) {
            return Err(Error::ZeroNormInput);
        }
    }
    let kernel = spec.prepare();
    let nb = b.nrows();
    let mut out = vec![0.0; a.nrows() * nb];
    if nb == 0 || a.nrows() == 0 {
        return Ok(DMatrix::from_row_slice(a.nrows(), nb, &out));
    }
    let tile = tile_rows.max(1) * nb;
    out.par_chunks_mut(tile).enumerate().for_each(|(t, chunk)| {
        let row0 = t * tile_rows.max(1);
        for (r, out_row) in chunk.chunks_mut(nb).enumerate() {
            let x = &ra[(row0 + r) * d..(row0 + r + 1) * d];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = kernel.eval(x, &rb[j * d..(j + 1) * d]);
            }
        }
    });
    Ok(DMatrix::from_row_slice(a.nrows(), nb, &out))
}

/// Gradient of `k(z, ·)` evaluated at `xhat`.
pub fn grad_second(spec: &KernelSpec, z: &[f64], xhat: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    check_inputs(spec, z, xhat)?;
    let kernel = spec.prepare();
    let k = kernel.eval(z, xhat);
    let mut out = vec![0.0; xhat.len()];
    kernel.add_grad_second(z, xhat, k, 1.0, &mut out);
    Ok(out)
}

fn check_unit_interval(u: f64) -> Result<f64> {
    if !u.is_finite() || u.abs() > 1.0 + NTK_DERIVATIVE_CLAMP {
        return Err(Error::InvalidInput(format!(
            "arc-cosine argument {u} outside [-1, 1]"
        )));
    }
    Ok(u.clamp(-1.0, 1.0))
}

/// `κ0(u) = (π - arccos u)/π`.
pub fn ntk_kappa0(u: f64) -> Result<f64> {
    Ok(kappa0(check_unit_interval(u)?))
}

/// `κ1(u) = (u(π - arccos u) + √(1 - u²))/π`.
pub fn ntk_kappa1(u: f64) -> Result<f64> {
    Ok(kappa1(check_unit_interval(u)?))
}

/// Depth-`depth` NTK with the homogeneous extension `‖x‖‖x2‖ k(x/‖x‖, x2/‖x2‖)`.
pub fn ntk_eval(depth: u32, x: &[f64], x2: &[f64]) -> Result<f64> {
    eval(&KernelSpec::ntk(depth)?, x, x2)
}

fn kappa0(u: f64) -> f64 {
    (PI - u.acos()) / PI
}

fn kappa1(u: f64) -> f64 {
    (u * (PI - u.acos()) + (1.0 - u * u).max(0.0).sqrt()) / PI
}

fn kappa0_derivative(u: f64) -> f64 {
    let u = u.clamp(-1.0 + NTK_DERIVATIVE_CLAMP, 1.0 - NTK_DERIVATIVE_CLAMP);
    1.0 / (PI * (1.0 - u * u).sqrt())
}

/// NTK on the sphere as a function of the cosine `u`.
fn ntk_sphere(depth: u32, u: f64) -> f64 {
    let (mut gpk, mut ntk) = (u, u);
    for _ in 0..depth {
        let next = kappa1(gpk);
        ntk = ntk * kappa0(gpk) + next;
        gpk = next;
    }
    ntk
}

/// NTK on the sphere and its derivative in `u`, by forward accumulation.
/// Uses `κ1' = κ0`.
fn ntk_sphere_with_derivative(depth: u32, u: f64) -> (f64, f64) {
    let (mut gpk, mut d_gpk) = (u, 1.0);
    let (mut ntk, mut d_ntk) = (u, 1.0);
    for _ in 0..depth {
        let k0 = kappa0(gpk);
        let next = kappa1(gpk);
        let d_next = k0 * d_gpk;
        d_ntk = d_ntk * k0 + ntk * kappa0_derivative(gpk) * d_gpk + d_next;
        ntk = ntk * k0 + next;
        gpk = next;
        d_gpk = d_next;
    }
    (ntk, d_ntk)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
