//! Synthetic training sets.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// i.i.d. `N(0, σ² I)`.
    Gaussian { sigma: f64 },
    /// `½ N(-μ, I) + ½ N(μ, I)` with `μ = offset · (1, …, 1)`.
    TwoGaussians { offset: f64 },
    /// `N(0, σ² I_k)` pushed into a random `k`-dimensional subspace.
    Subspace { rank: usize, sigma: f64 },
    /// i.i.d. uniform on `[low, high]^d`.
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// i.i.d. standard normal regression targets.
    Normal,
    /// One-hot rows of random classes, standardized to zero mean and unit variance.
    OneHot,
    /// i.i.d. random signs.
    PlusMinusOne,
    /// One column of random class labels `1..=C`.
    Labels,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random `d × k` matrix with orthonormal columns.
pub fn random_orthonormal(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if k == 0 || k > d {
        return Err(Error::InvalidInput(format!("rank {k} not in 1..={d}")));
    }
    let g = DMatrix::from_fn(d, k, |_, _| gaussian(rng));
    let q = g.qr().q();
    Ok(q.columns(0, k).into_owned())
}

/// Draws `n` inputs in `d` dimensions, row by row.
pub fn generate_inputs(source: &DataSource, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput("need n >= 1 and d >= 1".into()));
    }
    let mut rows = Vec::with_capacity(n * d);
    match source {
        DataSource::Gaussian { sigma } => {
            for _ in 0..n * d {
                rows.push(sigma * gaussian(rng));
            }
        }
        DataSource::TwoGaussians { offset } => {
            for _ in 0..n {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                for _ in 0..d {
                    rows.push(sign * offset + gaussian(rng));
                }
            }
        }
        DataSource::Subspace { rank, sigma } => {
            let basis = random_orthonormal(d, *rank, rng)?;
            let coords = DMatrix::from_fn(*rank, n, |_, _| sigma * gaussian(rng));
            let points = basis * coords;
            return Ok(points.transpose());
        }
        DataSource::Uniform { low, high } => {
            if !(low < high) {
                return Err(Error::InvalidInput(format!("empty box [{low}, {high}]")));
            }
            for _ in 0..n * d {
                rows.push(rng.random_range(*low..*high));
            }
        }
    }
    Ok(DMatrix::from_row_slice(n, d, &rows))
}

/// Draws targets for `n` points with `c` outputs (`c` classes for the
/// class-based kinds).
pub fn generate_targets(kind: TargetKind, n: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if c == 0 {
        return Err(Error::InvalidInput("need at least one output".into()));
    }
    Ok(match kind {
        TargetKind::Normal => DMatrix::from_fn(n, c, |_, _| gaussian(rng)),
        TargetKind::PlusMinusOne => DMatrix::from_fn(n, c, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 }),
        TargetKind::OneHot => {
            if c < 2 {
                return Err(Error::InvalidInput("one-hot targets need at least two classes".into()));
            }
            let p = 1.0 / c as f64;
            let std = (p * (1.0 - p)).sqrt();
            let mut y = DMatrix::from_element(n, c, -p / std);
            for i in 0..n {
                y[(i, rng.random_range(0..c))] = (1.0 - p) / std;
            }
            y
        }
        TargetKind::Labels => {
            if c < 2 {
                return Err(Error::InvalidInput("class labels need at least two classes".into()));
            }
            DMatrix::from_fn(n, 1, |_, _| (rng.random_range(0..c) + 1) as f64)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shapes_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = generate_inputs(&DataSource::Gaussian { sigma: 1.0 }, 20, 10, &mut r1).unwrap();
        let b = generate_inputs(&DataSource::Gaussian { sigma: 1.0 }, 20, 10, &mut r2).unwrap();
        assert_eq!(a.shape(), (20, 10));
        assert_eq!(a, b);
    }

    #[test]
    fn subspace_points_have_the_requested_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = generate_inputs(&DataSource::Subspace { rank: 2, sigma: 1.0 }, 30, 6, &mut rng).unwrap();
        let sv = x.singular_values();
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(sorted[1] > 1e-3 && sorted[2] < 1e-10);
    }

    #[test]
    fn one_hot_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = generate_targets(TargetKind::OneHot, 7, 4, &mut rng).unwrap();
        for row in y.row_iter() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_lie_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = generate_targets(TargetKind::Labels, 50, 3, &mut rng).unwrap();
        assert_eq!(y.ncols(), 1);
        assert!(y.iter().all(|&v| (1.0..=3.0).contains(&v) && v.fract() == 0.0));
    }
}
