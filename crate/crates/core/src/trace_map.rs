//! Fibonacci trace map, its invariant surfaces and the period-two point.
//!
//! T(x,y,z) = (2xy − z, x, y) preserves x² + y² + z² − 2xyz − 1. On the level
//! set {FV = V²/4} we use the chart (x,z) ↦ (x, y_V(x,z), z) with the lower
//! square-root branch, and study f_V = T² read in that chart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMapPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TraceMapPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn max_abs(&self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

pub fn apply_t(p: TraceMapPoint) -> TraceMapPoint {
    TraceMapPoint::new(2.0 * p.x * p.y - p.z, p.x, p.y)
}

pub fn apply_t_inv(p: TraceMapPoint) -> TraceMapPoint {
    TraceMapPoint::new(p.y, p.z, 2.0 * p.y * p.z - p.x)
}

/// T∘T. Third coordinate is x, as composition gives.
pub fn apply_t2(p: TraceMapPoint) -> TraceMapPoint {
    apply_t(apply_t(p))
}

/// x² + y² + z² − 2xyz − 1.
pub fn fricke_vogt(p: TraceMapPoint) -> f64 {
    p.x * p.x + p.y * p.y + p.z * p.z - 2.0 * p.x * p.y * p.z - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub v: f64,
    pub t_v: f64,
    /// 1 + V²/4
    pub invariant_level: f64,
}

impl SurfaceParams {
    /// p_V = (t, t/(2t−1), t), fixed by T².
    pub fn period_two_point(&self) -> TraceMapPoint {
        let t = self.t_v;
        TraceMapPoint::new(t, t / (2.0 * t - 1.0), t)
    }
}

fn t_relation(t: f64) -> f64 {
    let u = t - 1.0;
    let w = 2.0 * t - 1.0;
    u * u * (4.0 * t * t + 2.0 * t - 1.0) / (w * w)
}

fn t_relation_prime(t: f64) -> f64 {
    let u = t - 1.0;
    let w = 2.0 * t - 1.0;
    let q = 4.0 * t * t + 2.0 * t - 1.0;
    let dq = 8.0 * t + 2.0;
    (2.0 * u * q * w + u * u * dq * w - 4.0 * u * u * q) / (w * w * w)
}

/// Root of (t−1)²(4t²+2t−1)/(2t−1)² = V²/4 in (1, 1.5).
pub fn solve_t_v(v: f64, tol: f64) -> Result<SurfaceParams> {
    if !(v > 0.0 && v <= 1.0) || !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("solve_t_v needs 0 < V <= 1, tol > 0 (V={v}, tol={tol})")));
    }
    let target = v * v / 4.0;
    let (mut lo, mut hi) = (1.0 + 1e-14, 1.5);
    let g = |t: f64| t_relation(t) - target;
    if g(lo) > 0.0 || g(hi) < 0.0 {
        return Err(Error::NoRootInBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t = 0.5 * (lo + hi);
    let d = t_relation_prime(t);
    if d != 0.0 {
        let polished = t - g(t) / d;
        if polished > 1.0 && polished < 1.5 && g(polished).abs() <= g(t).abs() {
            t = polished;
        }
    }
    let res = g(t).abs();
    if res > tol {
        return Err(Error::NonConvergence(format!("t_V residual {res:e} above {tol:e}")));
    }
    Ok(SurfaceParams { v, t_v: t, invariant_level: 1.0 + target })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceChartPoint {
    pub u_x: f64,
    pub u_z: f64,
    pub y_val: f64,
}

impl SurfaceChartPoint {
    pub fn ambient(&self) -> TraceMapPoint {
        TraceMapPoint::new(self.u_x, self.y_val, self.u_z)
    }
}

fn radicand(v: f64, x: f64, z: f64) -> f64 {
    (x * x - 1.0) * (z * z - 1.0) + v * v / 4.0
}

/// y = xz − √((x²−1)(z²−1) + V²/4).
pub fn chart_y(v: f64, u_x: f64, u_z: f64) -> Result<SurfaceChartPoint> {
    let r = radicand(v, u_x, u_z);
    if !(r >= 0.0) {
        return Err(Error::OffChart { x: u_x, z: u_z, radicand: r });
    }
    Ok(SurfaceChartPoint { u_x, u_z, y_val: u_x * u_z - r.sqrt() })
}

/// Partials of a scalar function of two variables up to order three.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Partials3 {
    pub val: f64,
    pub d1: f64,
    pub d2: f64,
    pub d11: f64,
    pub d12: f64,
    pub d22: f64,
    pub d111: f64,
    pub d112: f64,
    pub d122: f64,
    pub d222: f64,
}

impl Partials3 {
    fn second(&self, i: usize, j: usize) -> f64 {
        match i + j {
            0 => self.d11,
            1 => self.d12,
            _ => self.d22,
        }
    }

    fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        match i + j + k {
            0 => self.d111,
            1 => self.d112,
            2 => self.d122,
            _ => self.d222,
        }
    }
}

/// y_V and its partials in (x,z) at an arbitrary chart point, from the closed
/// form. Index 1 is x, index 2 is z.
pub fn y_partials(v: f64, x: f64, z: f64) -> Result<Partials3> {
    let r = radicand(v, x, z);
    if !(r > 0.0) {
        return Err(Error::OffChart { x, z, radicand: r });
    }
    let s = r.sqrt();
    let r1 = [2.0 * x * (z * z - 1.0), 2.0 * z * (x * x - 1.0)];
    let r2 = [[2.0 * (z * z - 1.0), 4.0 * x * z], [4.0 * x * z, 2.0 * (x * x - 1.0)]];
    let r3 = |i: usize, j: usize, k: usize| match i + j + k {
        1 => 4.0 * z,
        2 => 4.0 * x,
        _ => 0.0,
    };
    let (s1, s3, s5) = (s, s * s * s, s * s * s * s * s);
    let ds = |i: usize| r1[i] / (2.0 * s1);
    let dds = |i: usize, j: usize| r2[i][j] / (2.0 * s1) - r1[i] * r1[j] / (4.0 * s3);
    let ddds = |i: usize, j: usize, k: usize| {
        r3(i, j, k) / (2.0 * s1)
            - (r2[i][j] * r1[k] + r2[i][k] * r1[j] + r2[j][k] * r1[i]) / (4.0 * s3)
            + 3.0 * r1[i] * r1[j] * r1[k] / (8.0 * s5)
    };
    Ok(Partials3 {
        val: x * z - s,
        d1: z - ds(0),
        d2: x - ds(1),
        d11: -dds(0, 0),
        d12: 1.0 - dds(0, 1),
        d22: -dds(1, 1),
        d111: -ddds(0, 0, 0),
        d112: -ddds(0, 0, 1),
        d122: -ddds(0, 1, 1),
        d222: -ddds(1, 1, 1),
    })
}

/// Partials of y_V at (t_V, t_V).
pub fn chart_derivatives(v: f64) -> Result<Partials3> {
    if !(v > 0.0 && v <= 0.5) {
        return Err(Error::InvalidInput(format!("chart_derivatives needs 0 < V <= 0.5, got {v}")));
    }
    let sp = solve_t_v(v, 1e-15)?;
    y_partials(v, sp.t_v, sp.t_v)
}

/// f_V(x,z) = ((4x²−1) y_V − 2xz, x): T² in the chart.
pub fn chart_map(v: f64, x: f64, z: f64) -> Result<(f64, f64)> {
    let y = chart_y(v, x, z)?.y_val;
    Ok(((4.0 * x * x - 1.0) * y - 2.0 * x * z, x))
}

/// First component of f_V with partials to order three.
pub fn chart_map_partials(v: f64, x: f64, z: f64) -> Result<Partials3> {
    let y = y_partials(v, x, z)?;
    let a = 4.0 * x * x - 1.0;
    Ok(Partials3 {
        val: a * y.val - 2.0 * x * z,
        d1: 8.0 * x * y.val + a * y.d1 - 2.0 * z,
        d2: a * y.d2 - 2.0 * x,
        d11: 8.0 * y.val + 16.0 * x * y.d1 + a * y.d11,
        d12: 8.0 * x * y.d2 + a * y.d12 - 2.0,
        d22: a * y.d22,
        d111: 24.0 * y.d1 + 24.0 * x * y.d11 + a * y.d111,
        d112: 8.0 * y.d2 + 16.0 * x * y.d12 + a * y.d112,
        d122: 8.0 * x * y.d22 + a * y.d122,
        d222: a * y.d222,
    })
}

/// Partials (val unused) of the two components F, G of the conjugated map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaylorData {
    pub f: Partials3,
    pub g: Partials3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationData {
    pub v: f64,
    pub t_v: f64,
    pub jacobian: [[f64; 2]; 2],
    pub lambda: f64,
    pub mu: f64,
    /// Columns are the eigenvectors (λ,1) and (μ,1).
    pub p: [[f64; 2]; 2],
    pub taylor: TaylorData,
}

impl LinearizationData {
    pub fn det_jacobian(&self) -> f64 {
        let j = &self.jacobian;
        j[0][0] * j[1][1] - j[0][1] * j[1][0]
    }
}

/// Jacobian of f_V at (t_V,t_V), its eigenbasis, and the partials up to
/// order three of P⁻¹ f_V(p_V + P(X,Y)).
pub fn linearize_at_pv(v: f64) -> Result<LinearizationData> {
    if !(v > 0.0 && v <= 0.5) {
        return Err(Error::InvalidInput(format!("linearize_at_pv needs 0 < V <= 0.5, got {v}")));
    }
    let sp = solve_t_v(v, 1e-15)?;
    let t = sp.t_v;
    let h = chart_map_partials(v, t, t)?;
    let jac = [[h.d1, h.d2], [1.0, 0.0]];
    let tr = jac[0][0] + jac[1][1];
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let disc = tr * tr - 4.0 * det;
    if !(disc > 1e-12 * tr * tr) {
        let d = disc.max(0.0).sqrt();
        return Err(Error::DegenerateSpectrum((tr + d) / 2.0, (tr - d) / 2.0));
    }
    let lambda = (tr + disc.sqrt()) / 2.0;
    let mu = det / lambda;
    let p = [[lambda, mu], [1.0, 1.0]];
    let pdet = lambda - mu;
    let pinv = [[1.0 / pdet, -mu / pdet], [-1.0 / pdet, lambda / pdet]];

    // Only the first chart component is nonlinear; the second is x.
    let col = [[p[0][0], p[1][0]], [p[0][1], p[1][1]]];
    let d2 = |a: usize, b: usize| {
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                acc += h.second(i, j) * col[a][i] * col[b][j];
            }
        }
        acc
    };
    let d3 = |a: usize, b: usize, c: usize| {
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    acc += h.third(i, j, k) * col[a][i] * col[b][j] * col[c][k];
                }
            }
        }
        acc
    };
    let d1 = |a: usize| h.d1 * col[a][0] + h.d2 * col[a][1];
    let lin = |a: usize| col[a][0]; // derivative of the x component
    let comp = |row: usize| Partials3 {
        val: 0.0,
        d1: pinv[row][0] * d1(0) + pinv[row][1] * lin(0),
        d2: pinv[row][0] * d1(1) + pinv[row][1] * lin(1),
        d11: pinv[row][0] * d2(0, 0),
        d12: pinv[row][0] * d2(0, 1),
        d22: pinv[row][0] * d2(1, 1),
        d111: pinv[row][0] * d3(0, 0, 0),
        d112: pinv[row][0] * d3(0, 0, 1),
        d122: pinv[row][0] * d3(0, 1, 1),
        d222: pinv[row][0] * d3(1, 1, 1),
    };
    Ok(LinearizationData {
        v,
        t_v: t,
        jacobian: jac,
        lambda,
        mu,
        p,
        taylor: TaylorData { f: comp(0), g: comp(1) },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CocycleValue {
    pub value: f64,
    pub v: f64,
}

/// ∂³_XYY G/μ − ∂²_XY F ∂²_XY G/(λ−1) − ∂²_XX G ∂²_YY F/(1−μ³) − ∂²_XY G ∂²_YY G/μ².
pub fn cocycle_from_taylor(t: &TaylorData, lambda: f64, mu: f64) -> f64 {
    t.g.d122 / mu
        - t.f.d12 * t.g.d12 / (lambda - 1.0)
        - t.g.d11 * t.f.d22 / (1.0 - mu * mu * mu)
        - t.g.d12 * t.g.d22 / (mu * mu)
}

pub fn anosov_cocycle(v: f64) -> Result<CocycleValue> {
    if !(v > 0.0 && v <= 0.2) {
        return Err(Error::InvalidInput(format!("anosov_cocycle needs 0 < V <= 0.2, got {v}")));
    }
    let lin = linearize_at_pv(v)?;
    Ok(CocycleValue { value: cocycle_from_taylor(&lin.taylor, lin.lambda, lin.mu), v })
}
