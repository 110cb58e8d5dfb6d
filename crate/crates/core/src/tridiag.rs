//! Symmetric tridiagonal eigenproblems.
//!
//! Implicit QL with Wilkinson-style shifts. Only one row of the eigenvector
//! matrix is accumulated, which is all the spectral measure of a single site
//! needs and keeps the cost at O(n²) instead of O(n³).

use crate::error::{Error, Result};

/// Eigenvalues plus, optionally, the squared components of every
/// eigenvector at one tracked site.
#[derive(Debug, Clone)]
pub struct TridiagEigen {
    pub values: Vec<f64>,
    /// `weights[j] = v_j(site)²`; empty when no site was tracked.
    pub weights: Vec<f64>,
}

/// Diagonalizes the matrix with diagonal `diag` and off-diagonal `off`
/// (`off[i]` couples `i` and `i+1`). Results are sorted by eigenvalue.
pub fn eigen(diag: &[f64], off: &[f64], track: Option<usize>) -> Result<TridiagEigen> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::InvalidInput("tridiagonal shape mismatch".into()));
    }
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(off);
    let mut row = track.map(|c| {
        let mut z = vec![0.0; n];
        z[c] = 1.0;
        z
    });

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::NonConvergence("tridiagonal QL".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m as isize - 1;
            let mut early = false;
            while i >= l as isize {
                let iu = i as usize;
                let f = s * e[iu];
                let b = c * e[iu];
                r = f.hypot(g);
                e[iu + 1] = r;
                if r == 0.0 {
                    d[iu + 1] -= p;
                    e[m] = 0.0;
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[iu + 1] - p;
                r = (d[iu] - g) * s + 2.0 * c * b;
                p = s * r;
                d[iu + 1] = g + p;
                g = c * r - b;
                if let Some(z) = row.as_mut() {
                    let fz = z[iu + 1];
                    z[iu + 1] = s * z[iu] + c * fz;
                    z[iu] = c * z[iu] - s * fz;
                }
                i -= 1;
            }
            if early {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let values = idx.iter().map(|&j| d[j]).collect();
    let weights = match row {
        Some(z) => idx.iter().map(|&j| z[j] * z[j]).collect(),
        None => Vec::new(),
    };
    Ok(TridiagEigen { values, weights })
}

/// Number of eigenvalues strictly below `x` (Sturm sequence).
pub fn count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (diag[i].abs() + x.abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn free_laplacian_closed_form() {
        let n = 50;
        let d = vec![0.0; n];
        let o = vec![1.0; n - 1];
        let eig = eigen(&d, &o, Some(0)).unwrap();
        for (j, v) in eig.values.iter().enumerate() {
            let exact = -2.0 * (PI * (j + 1) as f64 / (n + 1) as f64).cos();
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
        // v_j(0)² = 2/(n+1) sin²(πj/(n+1))
        for (j, w) in eig.weights.iter().enumerate() {
            let k = n - j; // eigenvalue order is reversed w.r.t. the cosine index
            let exact = 2.0 / (n + 1) as f64 * (PI * k as f64 / (n + 1) as f64).sin().powi(2);
            assert!((w - exact).abs() < 1e-12);
        }
        let total: f64 = eig.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sturm_matches_eigenvalues() {
        let d: Vec<f64> = (0..40).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
        let o = vec![1.0; 39];
        let eig = eigen(&d, &o, None).unwrap();
        for x in [-2.5, -1.0, 0.0, 0.7, 1.9, 3.5] {
            let direct = eig.values.iter().filter(|&&v| v < x).count();
            assert_eq!(count_below(&d, &o, x), direct);
        }
    }
}
