//! Temporal distance Δ, holonomy distortion and the stable derivative of Δ⁺.

use serde::Serialize;

use super::manifold::{bracket_point, extend_along, site_diff, Kind, Traced};
use super::system::{tangent_unit, SurfaceMap, V3};
use crate::error::{Error, Result};
use crate::stats::linear_fit;

/// τ_f = ln|df·e_u| along the orbit of `t` for n ∈ [−n_neg, n_pos], with
/// e_u pushed forward from the far end of the backward segment.
pub fn tau_along(sys: &dyn SurfaceMap, t: &Traced, n_neg: usize, n_pos: usize) -> Vec<f64> {
    let mb = t.bwd.len() - 1;
    assert!(n_neg <= mb && n_pos < t.fwd.len());
    let mut out = Vec::with_capacity(n_neg + n_pos + 1);
    let mut v = t.e_u_far;
    for j in (1..=mb).rev() {
        let x = t.bwd[j].point();
        let w = sys.jac(&x) * v;
        if j <= n_neg {
            out.push(w.norm().ln());
        }
        v = tangent_unit(sys, &t.bwd[j - 1].point(), &w);
    }
    for k in 0..=n_pos {
        let x = t.fwd[k].point();
        let w = sys.jac(&x) * v;
        out.push(w.norm().ln());
        if k < n_pos {
            v = tangent_unit(sys, &t.fwd[k + 1].point(), &w);
        }
    }
    out
}

/// Geometric tail of Σ_{n>N} C·d_n given the measured contraction of d.
fn tail_after(d: &[f64], c: f64, n: usize) -> f64 {
    if n + 1 >= d.len() || d[n] == 0.0 {
        return if d.get(n).map_or(true, |x| *x == 0.0) { 0.0 } else { f64::INFINITY };
    }
    let lo = n / 2;
    let mut rho: f64 = 0.0;
    for k in lo..n {
        if d[k] > 0.0 {
            rho = rho.max(d[k + 1] / d[k]);
        }
    }
    if rho >= 1.0 {
        return f64::INFINITY;
    }
    c * d[n] * rho / (1.0 - rho)
}

/// Per-term bound constant C with |T_n| ≤ C·d_n on the computed range.
fn term_constant(terms: &[f64], d: &[f64]) -> f64 {
    let mut c: f64 = 1.0;
    for (t, x) in terms.iter().zip(d) {
        if *x > 1e-300 {
            c = c.max(t.abs() / x);
        }
    }
    c
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaValue {
    pub p: V3,
    pub q: V3,
    pub value: f64,
    /// Σ over n ≥ 0 and n < 0 separately.
    pub plus: f64,
    pub minus: f64,
    pub truncation: usize,
    pub tail_bound: f64,
    pub bracket_residual: f64,
    /// T_n for n = −truncation..=truncation.
    pub terms: Vec<f64>,
}

struct Corners {
    s: Traced,
    r: Traced,
    residual: f64,
}

fn corners(sys: &dyn SurfaceMap, p: &Traced, q: &Traced, radius: f64) -> Result<Corners> {
    let d = (p.point() - q.point()).norm();
    if !(d <= radius) {
        return Err(Error::NoIntersection(radius));
    }
    let s = bracket_point(sys, p, q, radius)?;
    let r = bracket_point(sys, q, p, radius)?;
    Ok(Corners { residual: s.residual.max(r.residual), s: s.traced, r: r.traced })
}

/// Δ(p, q) = Σ_n τ(fⁿp) − τ(fⁿ[p,q]) − τ(fⁿ[q,p]) + τ(fⁿq), truncated at the
/// smallest N whose geometric tail bound is below `tol`.
pub fn delta(sys: &dyn SurfaceMap, p: &Traced, q: &Traced, radius: f64, tol: f64) -> Result<DeltaValue> {
    let c = corners(sys, p, q, radius)?;
    let m_pos = (p.fwd.len().min(q.fwd.len())) - 1;
    let m_neg = (p.bwd.len().min(q.bwd.len())) - 1;
    let m = m_pos.min(m_neg);
    let tp = tau_along(sys, p, m, m);
    let tq = tau_along(sys, q, m, m);
    let ts = tau_along(sys, &c.s, m, m);
    let tr = tau_along(sys, &c.r, m, m);
    let terms: Vec<f64> = (0..=2 * m).map(|i| (tp[i] - ts[i]) + (tq[i] - tr[i])).collect();
    // corner separations on each side
    let d_pos: Vec<f64> = (0..=m)
        .map(|n| site_diff(&c.s.fwd[n], &p.fwd[n]).norm() + site_diff(&c.r.fwd[n], &q.fwd[n]).norm())
        .collect();
    let d_neg: Vec<f64> = (0..=m)
        .map(|n| site_diff(&c.r.bwd[n], &p.bwd[n]).norm() + site_diff(&c.s.bwd[n], &q.bwd[n]).norm())
        .collect();
    let t_pos: Vec<f64> = terms[m..].to_vec();
    let t_neg: Vec<f64> = terms[..=m].iter().rev().cloned().collect();
    let cst = term_constant(&t_pos, &d_pos).max(term_constant(&t_neg, &d_neg));
    let mut chosen = None;
    for n in 2..m {
        let tail = tail_after(&d_pos, cst, n) + tail_after(&d_neg, cst, n);
        if tail < tol {
            chosen = Some((n, tail));
            break;
        }
    }
    let Some((n, tail)) = chosen else {
        return Err(Error::NonConvergence(format!("Δ tail bound above {tol:e} at depth {m}")));
    };
    let plus: f64 = t_pos[..=n].iter().sum();
    let minus: f64 = t_neg[1..=n].iter().sum();
    Ok(DeltaValue {
        p: p.point(),
        q: q.point(),
        value: plus + minus,
        plus,
        minus,
        truncation: n,
        tail_bound: tail,
        bracket_residual: c.residual,
        terms: terms[m - n..=m + n].to_vec(),
    })
}

/// Δ⁺_p(x) = Σ_{n≥0} T_n(p, x). Only forward segments of x are needed, so x
/// may carry a short backward segment.
pub fn delta_plus(sys: &dyn SurfaceMap, p: &Traced, x: &Traced, radius: f64, tol: f64) -> Result<(f64, f64)> {
    let c = corners(sys, p, x, radius)?;
    let m = (p.fwd.len().min(x.fwd.len())) - 1;
    let tp = tau_along(sys, p, 0, m);
    let tx = tau_along(sys, x, 0, m);
    let ts = tau_along(sys, &c.s, 0, m);
    let tr = tau_along(sys, &c.r, 0, m);
    let terms: Vec<f64> = (0..=m).map(|i| (tp[i] - ts[i]) + (tx[i] - tr[i])).collect();
    let d: Vec<f64> = (0..=m)
        .map(|n| site_diff(&c.s.fwd[n], &p.fwd[n]).norm() + site_diff(&c.r.fwd[n], &x.fwd[n]).norm())
        .collect();
    let cst = term_constant(&terms, &d);
    for n in 2..m {
        let tail = tail_after(&d, cst, n);
        if tail < tol {
            return Ok((terms[..=n].iter().sum(), tail));
        }
    }
    Err(Error::NonConvergence(format!("Δ⁺ tail bound above {tol:e} at depth {m}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolonomyValue {
    /// ln ∂_u π_{p,s}(r) from the series.
    pub series: f64,
    pub tail_bound: f64,
    /// ln of the finite-difference derivative of r ↦ [r, s] along W^u(p).
    pub finite_difference: f64,
}

/// Stable holonomy π_{p,s}: W^u(p) → W^u(s), r ↦ [r, s] = W^s(r) ∩ W^u(s), and
/// ln ∂_u π_{p,s}(r) = Σ_{n≥0} τ(fⁿr) − τ(fⁿ[r,s]).
pub fn holonomy_distortion(
    sys: &dyn SurfaceMap,
    s: &Traced,
    r: &Traced,
    radius: f64,
    tol: f64,
) -> Result<HolonomyValue> {
    let w = bracket_point(sys, r, s, radius)?.traced;
    let m = (r.fwd.len().min(w.fwd.len())) - 1;
    let tr = tau_along(sys, r, 0, m);
    let tw = tau_along(sys, &w, 0, m);
    let terms: Vec<f64> = (0..=m).map(|i| tr[i] - tw[i]).collect();
    let d: Vec<f64> = (0..=m).map(|n| site_diff(&w.fwd[n], &r.fwd[n]).norm()).collect();
    let cst = term_constant(&terms, &d);
    let mut found = None;
    for n in 2..m {
        let tail = tail_after(&d, cst, n);
        if tail < tol {
            found = Some((terms[..=n].iter().sum::<f64>(), tail));
            break;
        }
    }
    let Some((series, tail_bound)) = found else {
        return Err(Error::NonConvergence(format!("holonomy tail above {tol:e} at depth {m}")));
    };
    // composed holonomy on a short symmetric stencil along W^u(r) = W^u(p)
    let h = 1e-6;
    let rp = extend_along(sys, r, Kind::Unstable, h);
    let rm = extend_along(sys, r, Kind::Unstable, -h);
    let ip = bracket_point(sys, &rp, s, radius)?.traced.point();
    let im = bracket_point(sys, &rm, s, radius)?.traced.point();
    let fd = ((ip - im).norm() / (rp.point() - rm.point()).norm()).ln();
    Ok(HolonomyValue { series, tail_bound, finite_difference: fd })
}

#[derive(Debug, Clone, Serialize)]
pub struct StableDerivative {
    pub value: f64,
    /// (h, central difference of Δ⁺_p along W^s(r) at step h).
    pub table: Vec<(f64, f64)>,
    /// Backward depth of the extended orbits at each h.
    pub depths: Vec<usize>,
    /// Order-2 extrapolations of neighbouring steps at equal depth (NaN across
    /// a depth change).
    pub richardson: Vec<f64>,
    /// Gap between the estimates of the two deepest levels.
    pub consistency: f64,
}

/// Dyadic arclength steps 2⁻⁶..2⁻¹⁶.
pub fn default_h_grid() -> Vec<f64> {
    (6..=16).map(|k| 2f64.powi(-k)).collect()
}

/// ∂_s Δ⁺_p at r ∈ W^u(p), by central differences of h ↦ Δ⁺_p(point at
/// arclength h on W^s(r)).
///
/// Points off the stable leaf of r have no backward history of their own, so
/// their backward orbit is continued from r's only as far as it stays close
/// (see `extend_along`). The difference quotient is smooth in h at a fixed
/// continuation depth and jumps when the depth changes, so extrapolation is
/// done within a depth level and the deepest level wins.
pub fn stable_derivative_delta_plus(
    sys: &dyn SurfaceMap,
    p: &Traced,
    r: &Traced,
    h_grid: &[f64],
    radius: f64,
) -> Result<StableDerivative> {
    if h_grid.len() < 3 || h_grid.windows(2).any(|w| (w[1] * 2.0 - w[0]).abs() > 1e-12 * w[0]) {
        return Err(Error::InvalidInput("h_grid must be dyadic, decreasing, with at least 3 steps".into()));
    }
    let mut table = Vec::with_capacity(h_grid.len());
    let mut depths = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let xp = extend_along(sys, r, Kind::Stable, h);
        let xm = extend_along(sys, r, Kind::Stable, -h);
        let a = delta_plus(sys, p, &xp, radius, 1e-14)?.0;
        let b = delta_plus(sys, p, &xm, radius, 1e-14)?.0;
        table.push((h, (a - b) / (2.0 * h)));
        depths.push(xp.bwd.len().min(xm.bwd.len()) - 1);
    }
    let rich: Vec<f64> = (0..table.len() - 1)
        .map(|j| {
            if depths[j] == depths[j + 1] {
                (4.0 * table[j + 1].1 - table[j].1) / 3.0
            } else {
                f64::NAN
            }
        })
        .collect();
    let scale = table.iter().map(|t| t.1.abs()).fold(0.0, f64::max);
    if scale <= 1e-9 {
        // flat to the noise floor
        return Ok(StableDerivative { value: 0.0, table, depths, richardson: rich, consistency: scale });
    }
    // within a level the differences between successive extrapolations must
    // shrink; growth means round-off has taken over
    let n = table.len();
    for j in 1..rich.len() {
        if j + 1 < rich.len() && !rich[j - 1].is_nan() && !rich[j].is_nan() && !rich[j + 1].is_nan() {
            let (e0, e1) = ((rich[j] - rich[j - 1]).abs(), (rich[j + 1] - rich[j]).abs());
            if e1 > 4.0 * e0 && e1 > 1e-10 * scale {
                return Err(Error::StepTooSmall);
            }
        }
    }
    let level_estimate = |k: usize| -> Option<f64> {
        let last = (0..n).rev().find(|&j| depths[j] == k)?;
        Some(if last >= 1 && depths[last - 1] == k { rich[last - 1] } else { table[last].1 })
    };
    let deepest = depths[n - 1].max(*depths.iter().max().unwrap());
    let value = level_estimate(deepest).unwrap();
    let below = depths.iter().filter(|&&k| k < deepest).max().and_then(|&k| level_estimate(k));
    let consistency = below.map_or(f64::NAN, |b| (value - b).abs());
    Ok(StableDerivative { value, table, depths, richardson: rich, consistency })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModulusScan {
    /// (distance bin centre, largest |Δ∂| seen in the bin)
    pub bins: Vec<(f64, f64)>,
    pub exponent: f64,
    pub r2: f64,
}

/// Fits |∂(r_i) − ∂(r_j)| ≲ d(r_i, r_j)^α over dyadic distance bins.
pub fn modulus_of_continuity(points: &[V3], values: &[f64]) -> Option<ModulusScan> {
    let mut best: Vec<(i32, f64)> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i] - points[j]).norm();
            if d <= 0.0 {
                continue;
            }
            let k = d.log2().floor() as i32;
            let diff = (values[i] - values[j]).abs();
            match best.iter_mut().find(|b| b.0 == k) {
                Some(b) => b.1 = b.1.max(diff),
                None => best.push((k, diff)),
            }
        }
    }
    best.sort_by_key(|b| b.0);
    let bins: Vec<(f64, f64)> = best.iter().filter(|b| b.1 > 0.0).map(|b| (2f64.powf(b.0 as f64 + 0.5), b.1)).collect();
    let x: Vec<f64> = bins.iter().map(|b| b.0.ln()).collect();
    let y: Vec<f64> = bins.iter().map(|b| b.1.ln()).collect();
    let fit = linear_fit(&x, &y)?;
    Some(ModulusScan { bins, exponent: fit.slope, r2: fit.r2 })
}
