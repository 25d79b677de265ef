//! Reconstruction quality: DSSIM, L2, nearest-distance percentiles and
//! mutual-nearest-neighbor dataset recovery.
//!
//! Image vectors are laid out channel-last: entry `(row, col, ch)` lives at
//! index `(row · width + col) · channels + ch`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::row_major;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reconstructions below this DSSIM are conventionally called high quality.
pub const HIGH_QUALITY_DSSIM: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        Ok(ImageShape { height, width, channels })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    (0..SSIM_WINDOW)
        .map(|i| {
            let t = i as f64 - half;
            (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect()
}

/// Mean SSIM over pixels and channels.
///
/// Local statistics use an 11×11 Gaussian window (σ = 1.5); at the image
/// border the window is truncated and renormalized, so images smaller than
/// the window are still handled. `data_range` defaults to the observed
/// `max - min` over both images (1 when both are constant).
pub fn ssim(x: &[f64], x2: &[f64], shape: ImageShape, data_range: Option<f64>) -> Result<f64> {
    check_dim("image length", shape.len(), x.len())?;
    check_dim("image length", shape.len(), x2.len())?;
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("images must be finite".into()));
    }
    let range = match data_range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::InvalidInput(format!("data range must be positive, got {r}"))),
        None => {
            let (lo, hi) = x
                .iter()
                .chain(x2)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let w = gaussian_window();
    let half = (SSIM_WINDOW / 2) as isize;
    let ImageShape { height, width, channels } = shape;
    let at = |img: &[f64], r: usize, c: usize, ch: usize| img[(r * width + c) * channels + ch];

    let mut total = 0.0;
    for ch in 0..channels {
        for r in 0..height {
            for c in 0..width {
                let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dr in -half..=half {
                    let rr = r as isize + dr;
                    if rr < 0 || rr >= height as isize {
                        continue;
                    }
                    for dc in -half..=half {
                        let cc = c as isize + dc;
                        if cc < 0 || cc >= width as isize {
                            continue;
                        }
                        let wt = w[(dr + half) as usize] * w[(dc + half) as usize];
                        let a = at(x, rr as usize, cc as usize, ch);
                        let b = at(x2, rr as usize, cc as usize, ch);
                        sw += wt;
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (mx, my) = (mx / sw, my / sw);
                let vx = sxx / sw - mx * mx;
                let vy = syy / sw - my * my;
                let cov = sxy / sw - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (height * width * channels) as f64)
}

/// `(1 - SSIM)/2`, clamped to `[0, 1]`.
pub fn dssim(x: &[f64], x2: &[f64], shape: ImageShape) -> Result<f64> {
    dssim_with_range(x, x2, shape, None)
}

pub fn dssim_with_range(x: &[f64], x2: &[f64], shape: ImageShape, data_range: Option<f64>) -> Result<f64> {
    Ok(((1.0 - ssim(x, x2, shape, data_range)?) / 2.0).clamp(0.0, 1.0))
}

/// Euclidean distance.
pub fn l2(x: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim("vector length", x.len(), x2.len())?;
    Ok(crate::kernels::sq_dist(x, x2).sqrt())
}

/// Distance used for nearest-neighbor matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    L2,
    Dssim { shape: ImageShape, data_range: Option<f64> },
}

impl Distance {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Distance::L2 => l2(a, b),
            Distance::Dssim { shape, data_range } => dssim_with_range(a, b, *shape, *data_range),
        }
    }
}

/// Distances between every training row (rows of the result) and every
/// reconstruction (columns).
pub fn distance_matrix(train: &DMatrix<f64>, recons: &DMatrix<f64>, distance: Distance) -> Result<DMatrix<f64>> {
    check_dim("reconstruction dimension", train.ncols(), recons.ncols())?;
    let d = train.ncols();
    let (t, r) = (row_major(train), row_major(recons));
    let n = recons.nrows();
    let rows: Vec<Vec<f64>> = (0..train.nrows())
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| distance.eval(&t[i * d..(i + 1) * d], &r[j * d..(j + 1) * d]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(train.nrows(), n, |i, j| rows[i][j]))
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        // strict comparison keeps the lowest index on ties
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// A training point and the reconstruction that are each other's nearest neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub train: usize,
    pub recon: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Matched pairs over training points, in percent.
    pub percentage: f64,
    pub pairs: Vec<MatchedPair>,
}

fn mutual_pairs(dist: &DMatrix<f64>) -> Vec<MatchedPair> {
    let nearest_recon: Vec<usize> = (0..dist.nrows()).map(|i| argmin(dist.row(i).iter().copied())).collect();
    let nearest_train: Vec<usize> = (0..dist.ncols()).map(|j| argmin(dist.column(j).iter().copied())).collect();
    nearest_recon
        .iter()
        .enumerate()
        .filter(|&(i, &j)| nearest_train[j] == i)
        .map(|(i, &j)| MatchedPair { train: i, recon: j, distance: dist[(i, j)] })
        .collect()
}

/// Counts pairs of mutual nearest neighbors between reconstructions and
/// training points. Ties go to the lowest index.
pub fn mutual_nn_recovery(recons: &DMatrix<f64>, train: &DMatrix<f64>, distance: Distance) -> Result<Recovery> {
    if recons.nrows() == 0 || train.nrows() == 0 {
        return Err(Error::InvalidInput("both point sets must be nonempty".into()));
    }
    let dist = distance_matrix(train, recons, distance)?;
    let pairs = mutual_pairs(&dist);
    Ok(Recovery {
        percentage: 100.0 * pairs.len() as f64 / train.nrows() as f64,
        pairs,
    })
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        Percentiles {
            p25: percentile(values, 25.0),
            p50: percentile(values, 50.0),
            p75: percentile(values, 75.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOptions {
    /// Enables DSSIM metrics; recovery is then counted under DSSIM.
    pub shape: Option<ImageShape>,
    pub data_range: Option<f64>,
    /// Without an image shape, only mutual pairs within this L2 distance count.
    pub l2_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub n_train: usize,
    pub n_recon: usize,
    /// Per training point, L2 distance to the nearest reconstruction.
    pub nearest_l2: Vec<f64>,
    pub l2: Percentiles,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nearest_dssim: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dssim: Option<Percentiles>,
    pub recovery_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_pct_high_quality: Option<f64>,
    pub pairs: Vec<MatchedPair>,
}

/// Assembles the nearest-distance percentiles and recovery percentages.
pub fn report(recons: &DMatrix<f64>, train: &DMatrix<f64>, options: &ReportOptions) -> Result<ReconReport> {
    if recons.nrows() == 0 || train.nrows() == 0 {
        return Err(Error::InvalidInput("both point sets must be nonempty".into()));
    }
    let n_train = train.nrows();
    let l2_dist = distance_matrix(train, recons, Distance::L2)?;
    let row_min = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().fold(f64::INFINITY, f64::min)).collect()
    };
    let nearest_l2 = row_min(&l2_dist);
    let (nearest_dssim, pairs, high_quality) = match options.shape {
        Some(shape) => {
            let dd = distance_matrix(train, recons, Distance::Dssim { shape, data_range: options.data_range })?;
            let pairs = mutual_pairs(&dd);
            let hq = pairs.iter().filter(|p| p.distance < HIGH_QUALITY_DSSIM).count();
            (Some(row_min(&dd)), pairs, Some(100.0 * hq as f64 / n_train as f64))
        }
        None => {
            let mut pairs = mutual_pairs(&l2_dist);
            if let Some(tol) = options.l2_tol {
                pairs.retain(|p| p.distance <= tol);
            }
            (None, pairs, None)
        }
    };
    Ok(ReconReport {
        n_train,
        n_recon: recons.nrows(),
        l2: Percentiles::of(&nearest_l2),
        nearest_l2,
        dssim: nearest_dssim.as_deref().map(Percentiles::of),
        nearest_dssim,
        recovery_pct: 100.0 * pairs.len() as f64 / n_train as f64,
        recovery_pct_high_quality: high_quality,
        pairs,
    })
}
