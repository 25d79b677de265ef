//! Reducing candidates to a canonical form and comparing them with the truth.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ReconstructionParams;
use crate::error::{check_dim, Error, Result};
use crate::kernels::{norm, sq_dist};
use crate::linalg::row_major;

/// Least query count `m` with `m > n(d + 2)`.
pub fn query_count_bound(n: usize, d: usize) -> usize {
    n * (d + 2) + 1
}

/// Default `(merge_tol, coeff_tol)`: `1e-3·√d` and `1e-6·max|α̂|`.
pub fn default_tolerances(params: &ReconstructionParams) -> (f64, f64) {
    let d = params.xhat.ncols() as f64;
    let amax = params.ahat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    (1e-3 * d.sqrt(), 1e-6 * amax)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut root = i;
    while parent[root] != root {
        root = parent[root];
    }
    let mut cur = i;
    while parent[cur] != root {
        let next = parent[cur];
        parent[cur] = root;
        cur = next;
    }
    root
}

/// One round of single-linkage merging. Returns `None` if nothing merged.
fn merge_round(x: &DMatrix<f64>, a: &DMatrix<f64>, merge_tol: f64) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, d, c) = (x.nrows(), x.ncols(), a.ncols());
    let rows = row_major(x);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut merged = false;
    let tol2 = merge_tol * merge_tol;
    for i in 0..n {
        for j in 0..i {
            if sq_dist(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]) <= tol2 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                    merged = true;
                }
            }
        }
    }
    if !merged {
        return None;
    }
    // clusters in order of their smallest member
    let mut roots: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        match roots.iter().position(|&q| q == r) {
            Some(k) => members[k].push(i),
            None => {
                roots.push(r);
                members.push(vec![i]);
            }
        }
    }
    let k = members.len();
    let mut nx = DMatrix::zeros(k, d);
    let mut na = DMatrix::zeros(k, c);
    for (ci, group) in members.iter().enumerate() {
        let weights: Vec<f64> = group.iter().map(|&i| a.row(i).iter().map(|v| v.abs()).sum()).collect();
        let total: f64 = weights.iter().sum();
        for (&i, &w) in group.iter().zip(&weights) {
            let w = if total > 0.0 { w / total } else { 1.0 / group.len() as f64 };
            for j in 0..d {
                nx[(ci, j)] += w * x[(i, j)];
            }
            for j in 0..c {
                na[(ci, j)] += a[(i, j)];
            }
        }
    }
    Some((nx, na))
}

/// Merges candidates within `merge_tol` of each other (single linkage,
/// repeated until no pair is that close; merged point is the mean weighted
/// by `Σ_c |α̂_{i,c}|`, coefficients summed), then drops candidates whose
/// coefficients are all below `coeff_tol` in magnitude.
pub fn canonicalize(params: &ReconstructionParams, merge_tol: f64, coeff_tol: f64) -> Result<ReconstructionParams> {
    if !(merge_tol > 0.0 && coeff_tol > 0.0) {
        return Err(Error::InvalidInput("canonicalization tolerances must be positive".into()));
    }
    params.validate()?;
    let mut x = params.xhat.clone();
    let mut a = params.ahat.clone();
    while let Some((nx, na)) = merge_round(&x, &a, merge_tol) {
        x = nx;
        a = na;
    }
    let keep: Vec<usize> = (0..x.nrows())
        .filter(|&i| a.row(i).iter().any(|v| v.abs() >= coeff_tol))
        .collect();
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(keep.len(), m.ncols(), |i, j| m[(keep[i], j)]);
    Ok(ReconstructionParams {
        xhat: pick(&x),
        ahat: pick(&a),
        log_h: params.log_h.clone(),
    })
}

/// How close a candidate must be to count as recovering a training point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchTolerance {
    Absolute(f64),
    /// Relative to the norm of the training point.
    Relative(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMatch {
    pub recon: Option<usize>,
    /// L2 distance to the assigned candidate (infinite when unassigned).
    pub distance: f64,
    pub relative_distance: f64,
    /// Largest coefficient difference on the assigned pair, when truth coefficients are given.
    pub coeff_error: Option<f64>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub per_truth: Vec<TruthMatch>,
    pub fraction_matched: f64,
}

impl MatchReport {
    pub fn median_distance(&self) -> f64 {
        crate::metrics::percentile(&self.per_truth.iter().map(|t| t.distance).collect::<Vec<_>>(), 50.0)
    }

    pub fn median_relative_distance(&self) -> f64 {
        crate::metrics::percentile(&self.per_truth.iter().map(|t| t.relative_distance).collect::<Vec<_>>(), 50.0)
    }

    pub fn max_coeff_error(&self) -> Option<f64> {
        self.per_truth
            .iter()
            .map(|t| t.coeff_error)
            .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
    }
}

/// Greedy one-to-one nearest-neighbor assignment of candidates to training
/// points: pairs are taken in order of increasing L2 distance.
pub fn match_to_truth(
    recon: &ReconstructionParams,
    truth_points: &DMatrix<f64>,
    truth_coeffs: Option<&DMatrix<f64>>,
    tol: MatchTolerance,
) -> Result<MatchReport> {
    check_dim("reconstruction dimension", truth_points.ncols(), recon.xhat.ncols())?;
    if let Some(tc) = truth_coeffs {
        check_dim("truth coefficient rows", truth_points.nrows(), tc.nrows())?;
        check_dim("coefficient channels", tc.ncols(), recon.ahat.ncols())?;
    }
    let (nt, nr, d) = (truth_points.nrows(), recon.xhat.nrows(), truth_points.ncols());
    let (t, r) = (row_major(truth_points), row_major(&recon.xhat));
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(nt * nr);
    for i in 0..nt {
        for j in 0..nr {
            pairs.push((sq_dist(&t[i * d..(i + 1) * d], &r[j * d..(j + 1) * d]).sqrt(), i, j));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let mut assigned: Vec<Option<(usize, f64)>> = vec![None; nt];
    let mut used = vec![false; nr];
    for (dist, i, j) in pairs {
        if assigned[i].is_none() && !used[j] {
            assigned[i] = Some((j, dist));
            used[j] = true;
        }
    }
    let per_truth: Vec<TruthMatch> = assigned
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let scale = norm(&t[i * d..(i + 1) * d]);
            match *a {
                Some((j, distance)) => {
                    let relative_distance = if scale > 0.0 { distance / scale } else { distance };
                    let matched = match tol {
                        MatchTolerance::Absolute(e) => distance <= e,
                        MatchTolerance::Relative(e) => relative_distance <= e,
                    };
                    let coeff_error = truth_coeffs.map(|tc| {
                        (0..tc.ncols()).map(|c| (tc[(i, c)] - recon.ahat[(j, c)]).abs()).fold(0.0, f64::max)
                    });
                    TruthMatch { recon: Some(j), distance, relative_distance, coeff_error, matched }
                }
                None => TruthMatch {
                    recon: None,
                    distance: f64::INFINITY,
                    relative_distance: f64::INFINITY,
                    coeff_error: truth_coeffs.map(|_| f64::INFINITY),
                    matched: false,
                },
            }
        })
        .collect();
    let hits = per_truth.iter().filter(|m| m.matched).count();
    Ok(MatchReport {
        fraction_matched: if nt == 0 { 0.0 } else { hits as f64 / nt as f64 },
        per_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(x: &[f64], d: usize, a: &[f64], c: usize) -> ReconstructionParams {
        ReconstructionParams::new(
            DMatrix::from_row_slice(x.len() / d, d, x),
            DMatrix::from_row_slice(a.len() / c, c, a),
        )
        .unwrap()
    }

    #[test]
    fn bound_examples() {
        assert_eq!(query_count_bound(10, 2), 41);
        assert_eq!(query_count_bound(1, 1), 4);
        assert_eq!(query_count_bound(25, 10), 301);
    }

    #[test]
    fn identical_points_merge_and_sum() {
        let p = params(&[0.5, 0.5], 1, &[0.3, 1.2], 1);
        let q = canonicalize(&p, 1e-6, 1e-9).unwrap();
        assert_eq!(q.len(), 1);
        assert!((q.xhat[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((q.ahat[(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_coefficient_is_dropped() {
        let p = params(&[0.0, 3.0], 1, &[0.0, 1.0], 1);
        let q = canonicalize(&p, 1e-3, 1e-9).unwrap();
        assert_eq!(q.xhat, DMatrix::from_row_slice(1, 1, &[3.0]));
    }

    #[test]
    fn single_linkage_chain() {
        let eps = 0.01;
        let p = params(&[0.0, 0.9 * eps, 2.1 * eps], 1, &[1.0, 1.0, 1.0], 1);
        let q = canonicalize(&p, eps, 1e-9).unwrap();
        assert_eq!(q.len(), 2);
        assert!((q.xhat[(0, 0)] - 0.45 * eps).abs() < 1e-15);
        assert_eq!(q.ahat[(0, 0)], 2.0);
        assert_eq!(q.xhat[(1, 0)], 2.1 * eps);
    }

    #[test]
    fn cancelling_duplicates_vanish() {
        let p = params(&[1.0, 1.0 + 1e-9, 4.0], 1, &[0.7, -0.7, 2.0], 1);
        let q = canonicalize(&p, 1e-6, 1e-6).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q.xhat[(0, 0)], 4.0);
    }

    #[test]
    fn canonicalize_is_idempotent_on_a_fixture() {
        let p = params(&[0.0, 0.0, 0.004, 0.0, 0.009, 0.0, 1.0, 1.0, 1.0, 1.0005], 2, &[1.0, -0.2, 0.5, 1e-12, 0.3], 1);
        let q = canonicalize(&p, 0.005, 1e-6).unwrap();
        assert_eq!(canonicalize(&q, 0.005, 1e-6).unwrap(), q);
    }

    #[test]
    fn empty_result_allowed() {
        let p = params(&[0.0, 1.0], 1, &[0.0, 0.0], 1);
        assert!(canonicalize(&p, 1e-3, 1e-6).unwrap().is_empty());
        assert!(canonicalize(&p, 0.0, 1e-6).is_err());
    }

    #[test]
    fn match_exact_and_empty() {
        let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 2.0]);
        let coeffs = DMatrix::from_row_slice(2, 1, &[0.5, -0.25]);
        let exact = ReconstructionParams::new(truth.clone(), coeffs.clone()).unwrap();
        let r = match_to_truth(&exact.permuted(&[1, 0]), &truth, Some(&coeffs), MatchTolerance::Absolute(1e-9)).unwrap();
        assert_eq!(r.fraction_matched, 1.0);
        assert!(r.per_truth.iter().all(|m| m.distance == 0.0));
        assert_eq!(r.max_coeff_error(), Some(0.0));

        let empty = ReconstructionParams::new(DMatrix::zeros(0, 2), DMatrix::zeros(0, 1)).unwrap();
        let r = match_to_truth(&empty, &truth, None, MatchTolerance::Absolute(1.0)).unwrap();
        assert_eq!(r.fraction_matched, 0.0);
        assert!(r.per_truth.iter().all(|m| m.recon.is_none()));
    }

    #[test]
    fn match_with_bounded_noise() {
        let d = 3;
        let truth = DMatrix::from_row_slice(3, d, &[0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0, 5.0]);
        let delta = 0.01;
        let noise = [1.0, -1.0, 0.5, -0.3, 1.0, -1.0, 0.2, 0.9, -0.7];
        let noisy = DMatrix::from_fn(3, d, |i, j| truth[(i, j)] + delta * noise[i * d + j]);
        let p = ReconstructionParams::new(noisy, DMatrix::zeros(3, 1)).unwrap();
        let r = match_to_truth(&p, &truth, None, MatchTolerance::Absolute(0.05)).unwrap();
        assert_eq!(r.fraction_matched, 1.0);
        let max = r.per_truth.iter().map(|m| m.distance).fold(0.0, f64::max);
        assert!(max <= delta * (d as f64).sqrt());
    }

    #[test]
    fn relative_tolerance_uses_truth_norm() {
        let truth = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let p = ReconstructionParams::new(DMatrix::from_row_slice(1, 2, &[3.0, 4.2]), DMatrix::zeros(1, 1)).unwrap();
        let r = match_to_truth(&p, &truth, None, MatchTolerance::Relative(0.05)).unwrap();
        assert!((r.per_truth[0].relative_distance - 0.04).abs() < 1e-12);
        assert_eq!(r.fraction_matched, 1.0);
    }
}
