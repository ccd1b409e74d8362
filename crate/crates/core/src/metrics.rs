//! Distributional distances between sample sets.

use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::rng::{rng_for, standard_normal_vec, stream};
use crate::score::dot;
use crate::{Error, Result};

pub const DEFAULT_PROJECTIONS: usize = 64;

/// W1 between two empirical measures on the line with uniform weights.
///
/// Both inputs must be sorted.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    // walk the merged quantile grid
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ca, mut cb) = (1.0 / na, 1.0 / nb);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next = ca.min(cb);
        total += (next - prev) * (a[i] - b[j]).abs();
        prev = next;
        if ca <= cb {
            i += 1;
            ca = (i + 1) as f64 / na;
        }
        if cb <= next {
            j += 1;
            cb = (j + 1) as f64 / nb;
        }
    }
    total
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("sample sets must be non-empty"));
    }
    let d = a[0].len();
    for s in a.iter().chain(b) {
        check_dim("sample set", d, s.len())?;
    }
    Ok(d)
}

/// Random unit directions, fixed by `seed`.
pub fn projections(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, &[stream::PROJECTION, dim as u64]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = standard_normal_vec(&mut rng, dim);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Sliced Wasserstein-1 over `n_proj` random directions.
pub fn sliced_w1(a: &[Vec<f64>], b: &[Vec<f64>], n_proj: usize, seed: u64) -> Result<f64> {
    let d = check_sets(a, b)?;
    let dirs = projections(d, n_proj, seed);
    let mut total = 0.0;
    for dir in &dirs {
        let mut pa: Vec<f64> = a.iter().map(|x| dot(x, dir)).collect();
        let mut pb: Vec<f64> = b.iter().map(|x| dot(x, dir)).collect();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += w1_sorted(&pa, &pb);
    }
    Ok(total / dirs.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise distance of the pooled sample (subsampled evenly when
/// large).
fn median_bandwidth(pool: &[&[f64]]) -> f64 {
    const MAX_POINTS: usize = 1000;
    let stride = pool.len().div_ceil(MAX_POINTS).max(1);
    let pts: Vec<&[f64]> = pool.iter().step_by(stride).copied().collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], inv_two_h2: f64) -> f64 {
    let mut acc = 0.0;
    for x in a {
        for y in b {
            acc += (-sq_dist(x, y) * inv_two_h2).exp();
        }
    }
    acc / (a.len() as f64 * b.len() as f64)
}

/// RBF-kernel MMD (biased estimator, square-rooted) with median-heuristic
/// bandwidth.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let pool: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let h = median_bandwidth(&pool);
    let k = 1.0 / (2.0 * h * h);
    let kaa = mean_kernel(a, a, k);
    let kbb = mean_kernel(b, b, k);
    let kab = mean_kernel(a, b, k);
    Ok((kaa + kbb - 2.0 * kab).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleDistances {
    pub sliced_w1: f64,
    pub mmd_rbf: f64,
}

pub fn eval_metrics(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<SampleDistances> {
    Ok(SampleDistances {
        sliced_w1: sliced_w1(a, b, DEFAULT_PROJECTIONS, 0)?,
        mmd_rbf: mmd_rbf(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal};
    use proptest::prelude::*;

    fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, &[]);
        (0..n)
            .map(|_| (0..d).map(|_| shift + standard_normal(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn identical_sets_are_at_zero_distance() {
        let a = gauss(300, 3, 0.0, 1);
        let m = eval_metrics(&a, &a).unwrap();
        assert!(m.sliced_w1.abs() < 1e-12);
        assert!(m.mmd_rbf.abs() < 1e-12);
    }

    #[test]
    fn unit_shift_in_one_dimension() {
        let a = gauss(50_000, 1, 0.0, 2);
        let b = gauss(50_000, 1, 1.0, 3);
        let d = sliced_w1(&a, &b, 64, 0).unwrap();
        assert!((d - 1.0).abs() < 0.02, "{d}");
    }

    #[test]
    fn unequal_sizes() {
        assert!((w1_sorted(&[0.0], &[1.0, 3.0]) - 2.0).abs() < 1e-12);
        assert!((w1_sorted(&[0.0, 1.0, 2.0], &[0.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(eval_metrics(&[], &[vec![1.0]]).is_err());
        assert!(sliced_w1(&[vec![1.0]], &[vec![1.0, 2.0]], 4, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn permutation_invariance(seed in 0u64..1000, rot in 1usize..40) {
            let a = gauss(41, 2, 0.0, seed);
            let b = gauss(37, 2, 0.5, seed + 1);
            let mut ap = a.clone();
            ap.rotate_left(rot);
            let m1 = eval_metrics(&a, &b).unwrap();
            let m2 = eval_metrics(&ap, &b).unwrap();
            prop_assert!((m1.sliced_w1 - m2.sliced_w1).abs() < 1e-12);
            prop_assert!((m1.mmd_rbf - m2.mmd_rbf).abs() < 1e-9);
        }
    }
}
