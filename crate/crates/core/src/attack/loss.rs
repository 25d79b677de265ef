//! The reconstruction loss `(1/mC) Σ_j Σ_c (Σ_i α̂_{i,c} k(z_j, x̂_i) - f_c(z_j))²`
//! and its analytic gradients.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{QuerySet, ReconstructionParams};
use crate::error::{check_dim, Error, Result};
use crate::kernels::{KernelSpec, PreparedKernel};
use crate::linalg::row_major;

/// Work (in kernel evaluations times dimension) below which a step runs on one thread.
const PARALLEL_THRESHOLD: usize = 1 << 14;

/// Gradients of the reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    pub xhat: DMatrix<f64>,
    pub ahat: DMatrix<f64>,
    /// Gradient in the log-bandwidth, when the params carry one.
    pub log_h: Option<Vec<f64>>,
}

/// Row-major view of a problem, shared by the public entry points and the attack loop.
pub(crate) struct Problem<'a> {
    pub kernel: &'a PreparedKernel,
    /// m × d, row-major
    pub z: &'a [f64],
    /// m × C, row-major
    pub targets: &'a [f64],
    pub d: usize,
    pub outputs: usize,
}

/// Output buffers for [`Problem::evaluate`].
pub(crate) struct Grads {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub log_h: Vec<f64>,
}

impl Grads {
    pub fn new(n: usize, d: usize, outputs: usize) -> Self {
        Grads {
            x: vec![0.0; n * d],
            a: vec![0.0; n * outputs],
            log_h: vec![0.0; d],
        }
    }
}

impl Problem<'_> {
    /// Loss on the queries listed in `batch` (all queries when `None`), and
    /// optionally its gradients. Every output entry is accumulated by one
    /// sequential loop in a fixed order, so results do not depend on the
    /// number of threads.
    pub fn evaluate(
        &self,
        x: &[f64],
        a: &[f64],
        batch: Option<&[usize]>,
        grads: Option<(&mut Grads, bool)>,
    ) -> f64 {
        let (d, c_out) = (self.d, self.outputs);
        let n = x.len() / d.max(1);
        let m_total = self.targets.len() / c_out;
        let rows: Vec<usize> = match batch {
            Some(b) => b.to_vec(),
            None => (0..m_total).collect(),
        };
        let mb = rows.len();
        let parallel = mb * n * d.max(1) >= PARALLEL_THRESHOLD;

        // kernel values (mb × n) and residuals (mb × C)
        let mut kvals = vec![0.0; mb * n];
        let mut resid = vec![0.0; mb * c_out];
        let fill = |(r, (krow, rrow)): (usize, (&mut [f64], &mut [f64]))| {
            let j = rows[r];
            let zj = &self.z[j * d..(j + 1) * d];
            for (i, kv) in krow.iter_mut().enumerate() {
                *kv = self.kernel.eval(zj, &x[i * d..(i + 1) * d]);
            }
            for (c, rv) in rrow.iter_mut().enumerate() {
                let mut pred = 0.0;
                for (i, kv) in krow.iter().enumerate() {
                    pred += a[i * c_out + c] * kv;
                }
                *rv = pred - self.targets[j * c_out + c];
            }
        };
        if parallel {
            kvals
                .par_chunks_mut(n.max(1))
                .zip(resid.par_chunks_mut(c_out))
                .enumerate()
                .for_each(fill);
        } else {
            kvals
                .chunks_mut(n.max(1))
                .zip(resid.chunks_mut(c_out))
                .enumerate()
                .for_each(fill);
        }
        let norm = (mb * c_out) as f64;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / norm;

        let Some((out, with_bandwidth)) = grads else {
            return loss;
        };
        let scale = 2.0 / norm;
        let per_candidate = |(i, ((gx, ga), gh)): (usize, ((&mut [f64], &mut [f64]), &mut [f64]))| {
            gx.iter_mut().for_each(|v| *v = 0.0);
            ga.iter_mut().for_each(|v| *v = 0.0);
            gh.iter_mut().for_each(|v| *v = 0.0);
            let xi = &x[i * d..(i + 1) * d];
            let ai = &a[i * c_out..(i + 1) * c_out];
            for r in 0..mb {
                let k = kvals[r * n + i];
                let rrow = &resid[r * c_out..(r + 1) * c_out];
                let mut weight = 0.0;
                for c in 0..c_out {
                    ga[c] += scale * rrow[c] * k;
                    weight += rrow[c] * ai[c];
                }
                let zj = &self.z[rows[r] * d..(rows[r] + 1) * d];
                self.kernel.add_grad_second(zj, xi, k, scale * weight, gx);
                if with_bandwidth {
                    self.kernel.add_grad_log_bandwidth(zj, xi, k, scale * weight, gh);
                }
            }
        };
        let dd = d.max(1);
        let mut per_h = vec![0.0; n * dd];
        if parallel {
            out.x
                .par_chunks_mut(dd)
                .zip(out.a.par_chunks_mut(c_out))
                .zip(per_h.par_chunks_mut(dd))
                .enumerate()
                .for_each(per_candidate);
        } else {
            out.x
                .chunks_mut(dd)
                .zip(out.a.chunks_mut(c_out))
                .zip(per_h.chunks_mut(dd))
                .enumerate()
                .for_each(per_candidate);
        }
        out.log_h.iter_mut().for_each(|v| *v = 0.0);
        if with_bandwidth {
            for hi in per_h.chunks(dd) {
                for (o, v) in out.log_h.iter_mut().zip(hi) {
                    *o += v;
                }
            }
        }
        loss
    }
}

/// The kernel the params are evaluated with: the learned bandwidth when the
/// params carry one, `spec` otherwise.
pub fn effective_kernel(params: &ReconstructionParams, spec: &KernelSpec) -> Result<KernelSpec> {
    match &params.log_h {
        Some(log_h) => KernelSpec::bandwidth_gaussian(log_h.iter().map(|v| v.exp()).collect()),
        None => {
            spec.validate()?;
            Ok(spec.clone())
        }
    }
}

fn check_shapes(params: &ReconstructionParams, queries: &QuerySet, spec: &KernelSpec) -> Result<()> {
    params.validate()?;
    check_dim("query dimension", params.xhat.ncols(), queries.z.ncols())?;
    check_dim("output channels", params.ahat.ncols(), queries.targets.ncols())?;
    if let Some(d) = spec.fixed_dim() {
        check_dim("kernel bandwidth", d, params.xhat.ncols())?;
    }
    Ok(())
}

/// Mean squared residual of the candidate expansion over the query set.
pub fn reconstruction_loss(params: &ReconstructionParams, queries: &QuerySet, spec: &KernelSpec) -> Result<f64> {
    let spec = effective_kernel(params, spec)?;
    check_shapes(params, queries, &spec)?;
    let kernel = spec.prepare();
    let (z, t) = (row_major(&queries.z), row_major(&queries.targets));
    let problem = Problem {
        kernel: &kernel,
        z: &z,
        targets: &t,
        d: queries.z.ncols(),
        outputs: queries.targets.ncols(),
    };
    let loss = problem.evaluate(&row_major(&params.xhat), &row_major(&params.ahat), None, None);
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "reconstruction loss", step: 0 });
    }
    Ok(loss)
}

/// Loss and gradients with respect to `x̂`, `α̂` and (when present) `log h`.
pub fn loss_gradients(params: &ReconstructionParams, queries: &QuerySet, spec: &KernelSpec) -> Result<LossGradients> {
    let spec = effective_kernel(params, spec)?;
    check_shapes(params, queries, &spec)?;
    let kernel = spec.prepare();
    let (n, d, c) = (params.xhat.nrows(), params.xhat.ncols(), params.ahat.ncols());
    let (z, t) = (row_major(&queries.z), row_major(&queries.targets));
    let problem = Problem { kernel: &kernel, z: &z, targets: &t, d, outputs: c };
    let mut grads = Grads::new(n, d, c);
    let with_h = params.log_h.is_some();
    let loss = problem.evaluate(
        &row_major(&params.xhat),
        &row_major(&params.ahat),
        None,
        Some((&mut grads, with_h)),
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "reconstruction loss", step: 0 });
    }
    Ok(LossGradients {
        loss,
        xhat: DMatrix::from_row_slice(n, d, &grads.x),
        ahat: DMatrix::from_row_slice(n, c, &grads.a),
        log_h: with_h.then_some(grads.log_h),
    })
}
