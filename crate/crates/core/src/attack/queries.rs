use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;

use crate::error::{Error, Result};

/// Where query points come from.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryDistribution {
    /// i.i.d. `N(0, σ² I)`.
    StandardNormal { sigma: f64 },
    /// i.i.d. uniform on `[low, high]^d`.
    UniformBox { low: f64, high: f64 },
    /// Equal-weight mixture of `N(mean_k, σ² I)`.
    GaussianMixture { means: Vec<Vec<f64>>, sigma: f64 },
    /// Regular lattice on `[low, high]²` (d = 2 only).
    Grid { low: f64, high: f64 },
    /// The first `m` rows of a user-supplied matrix.
    Points(Arc<DMatrix<f64>>),
}

impl Default for QueryDistribution {
    fn default() -> Self {
        QueryDistribution::StandardNormal { sigma: 1.0 }
    }
}

/// Side lengths `(a, b)` with `a · b = m`, `a ≤ b`, and `a` as large as possible.
pub fn grid_sides(m: usize) -> (usize, usize) {
    let mut a = (m as f64).sqrt() as usize;
    while a > 1 && m % a != 0 {
        a -= 1;
    }
    let a = a.max(1);
    (a, m / a)
}

fn linspace(low: f64, high: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (low + high)];
    }
    (0..count)
        .map(|i| low + (high - low) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Samples `m` query points in `d` dimensions from a fresh generator seeded with `seed`.
pub fn sample_queries(dist: &QueryDistribution, m: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_queries_with(dist, m, d, &mut rng)
}

/// As [`sample_queries`], drawing from `rng`. Points are drawn row by row.
pub fn sample_queries_with(dist: &QueryDistribution, m: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidInput("query count and dimension must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(m * d);
    match dist {
        QueryDistribution::StandardNormal { sigma } => {
            positive("sigma", *sigma)?;
            for _ in 0..m * d {
                let g: f64 = StandardNormal.sample(rng);
                rows.push(sigma * g);
            }
        }
        QueryDistribution::UniformBox { low, high } => {
            if !(low < high) || !low.is_finite() || !high.is_finite() {
                return Err(Error::InvalidInput(format!("empty box [{low}, {high}]")));
            }
            for _ in 0..m * d {
                rows.push(rng.random_range(*low..*high));
            }
        }
        QueryDistribution::GaussianMixture { means, sigma } => {
            positive("sigma", *sigma)?;
            if means.is_empty() || means.iter().any(|mu| mu.len() != d) {
                return Err(Error::InvalidInput(format!(
                    "mixture needs at least one mean of dimension {d}"
                )));
            }
            for _ in 0..m {
                let mu = &means[rng.random_range(0..means.len())];
                for &c in mu {
                    let g: f64 = StandardNormal.sample(rng);
                    rows.push(c + sigma * g);
                }
            }
        }
        QueryDistribution::Grid { low, high } => {
            if d != 2 {
                return Err(Error::InvalidInput(format!("grid queries need d = 2, got {d}")));
            }
            if !(low < high) {
                return Err(Error::InvalidInput(format!("empty box [{low}, {high}]")));
            }
            let (a, b) = grid_sides(m);
            let (xs, ys) = (linspace(*low, *high, a), linspace(*low, *high, b));
            for &x in &xs {
                for &y in &ys {
                    rows.extend([x, y]);
                }
            }
        }
        QueryDistribution::Points(points) => {
            if points.ncols() != d {
                return Err(Error::DimensionMismatch {
                    context: "query file columns",
                    expected: d,
                    got: points.ncols(),
                });
            }
            if points.nrows() < m {
                return Err(Error::InvalidInput(format!(
                    "query file has {} rows, {m} requested",
                    points.nrows()
                )));
            }
            return Ok(points.rows(0, m).into_owned());
        }
    }
    Ok(DMatrix::from_row_slice(m, d, &rows))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_grid() {
        let z = sample_queries(&QueryDistribution::Grid { low: -1.0, high: 1.0 }, 4, 2, 0).unwrap();
        assert_eq!(z, DMatrix::from_row_slice(4, 2, &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]));
    }

    #[test]
    fn grid_sides_are_near_square() {
        assert_eq!(grid_sides(2500), (50, 50));
        assert_eq!(grid_sides(12), (3, 4));
        assert_eq!(grid_sides(7), (1, 7));
        assert!(sample_queries(&QueryDistribution::Grid { low: 0.0, high: 1.0 }, 4, 3, 0).is_err());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let dist = QueryDistribution::GaussianMixture {
            means: vec![vec![-2.0, -2.0], vec![2.0, 2.0]],
            sigma: 1.0,
        };
        let a = sample_queries(&dist, 50, 2, 9).unwrap();
        assert_eq!(a, sample_queries(&dist, 50, 2, 9).unwrap());
        assert_ne!(a, sample_queries(&dist, 50, 2, 10).unwrap());
    }

    #[test]
    fn normal_mean_within_standard_error() {
        let m = 10_000;
        let z = sample_queries(&QueryDistribution::default(), m, 1, 3).unwrap();
        assert!(z.mean().abs() < 4.0 / (m as f64).sqrt());
    }

    #[test]
    fn uniform_box_bounds() {
        let z = sample_queries(&QueryDistribution::UniformBox { low: -0.5, high: 2.0 }, 200, 3, 1).unwrap();
        assert!(z.iter().all(|&v| (-0.5..2.0).contains(&v)));
    }

    #[test]
    fn point_source() {
        let pts = Arc::new(DMatrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64));
        let dist = QueryDistribution::Points(pts.clone());
        assert_eq!(sample_queries(&dist, 3, 2, 0).unwrap(), pts.rows(0, 3).into_owned());
        assert!(sample_queries(&dist, 6, 2, 0).is_err());
        assert!(sample_queries(&dist, 2, 3, 0).is_err());
    }
}
