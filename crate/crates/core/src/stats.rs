//! Small regression helpers.

use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; NaN when y has zero variance.
    pub r2: f64,
}

/// Ordinary least squares y = slope·x + intercept.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { f64::NAN } else { sxy * sxy / (sxx * syy) };
    Some(LineFit { slope, intercept, r2 })
}

/// Log-spaced grid of `n` points from `a` to `b` inclusive.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// J₀(x) from (1/π)∫₀^π cos(x sin θ) dθ; the trapezoid rule is spectrally
/// accurate for this periodic integrand.
pub fn bessel_j0(x: f64) -> f64 {
    let n = 64 + 2 * x.abs().ceil() as usize;
    let h = std::f64::consts::PI / n as f64;
    let mut s = 1.0;
    for k in 1..n {
        s += (x * (k as f64 * h).sin()).cos();
    }
    s / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!((f.intercept + 1.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bessel_zeros_and_values() {
        assert!((bessel_j0(0.0) - 1.0).abs() < 1e-15);
        assert!(bessel_j0(2.404_825_557_695_773).abs() < 1e-14);
        // J₀(100) from tables
        assert!((bessel_j0(100.0) - 0.019_985_850_304_223_12).abs() < 1e-13);
    }

    #[test]
    fn grid_endpoints() {
        let g = log_grid(1.0, 1000.0, 4);
        assert!((g[1] - 10.0).abs() < 1e-12 && (g[3] - 1000.0).abs() < 1e-9);
    }
}
