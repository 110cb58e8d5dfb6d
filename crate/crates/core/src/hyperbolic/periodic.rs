//! Periodic orbits of T² on S_V by continuation from the Cayley cubic.
//!
//! At V = 0 the bounded part of S_0 is the image of the torus under
//! Φ(α,β) = (cos α, cos β, cos(α−β)), and T∘Φ = Φ∘M with M = [[1,1],[1,0]].
//! Fixed points of T^N therefore come from {v : M^N v = ±v mod 1}. Each orbit
//! representative is continued in V with Gauss–Newton on (T^N x − x, FV − V²/4).

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix4x3, Vector4};
use rand::Rng;
use serde::Serialize;

use super::system::{fv, fv_gradient, t_fwd, t_jac, tangent_unit, SurfaceMap, TraceSurface, M3, V3};
use crate::error::{Error, Result};
use crate::par::{map_indexed, task_rng, Workers};
use crate::trace_map::solve_t_v;

type Mat2 = [[i128; 2]; 2];

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Smith form of a nonsingular 2×2 integer matrix: returns (d1, d2, W) with
/// U·A·W = diag(d1, d2), d1 | d2, both positive, U and W unimodular.
pub fn smith_2x2(a: Mat2) -> (i128, i128, Mat2) {
    let mut a = a;
    let mut w: Mat2 = [[1, 0], [0, 1]];
    let swap_cols = |a: &mut Mat2, w: &mut Mat2| {
        for r in 0..2 {
            a[r].swap(0, 1);
            w[r].swap(0, 1);
        }
    };
    loop {
        // pivot: smallest nonzero magnitude to (0,0)
        let mut best = None;
        for i in 0..2 {
            for j in 0..2 {
                if a[i][j] != 0 && best.map_or(true, |(_, _, m)| a[i][j].abs() < m) {
                    best = Some((i, j, a[i][j].abs()));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        if i == 1 {
            a.swap(0, 1);
        }
        if j == 1 {
            swap_cols(&mut a, &mut w);
        }
        let p = a[0][0];
        let q = a[0][1].div_euclid(p);
        for r in 0..2 {
            a[r][1] -= q * a[r][0];
            w[r][1] -= q * w[r][0];
        }
        let q = a[1][0].div_euclid(p);
        for c in 0..2 {
            a[1][c] -= q * a[0][c];
        }
        if a[0][1] != 0 || a[1][0] != 0 {
            continue;
        }
        if a[1][1] % p != 0 {
            // fold row 1 into row 0 and keep reducing
            a[0][1] += a[1][1];
            continue;
        }
        break;
    }
    (a[0][0].abs(), a[1][1].abs(), w)
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// One torus point per orbit of v ↦ Mv on {M^N v = ±v}/±, skipping the
/// 2-torsion points (they map to the singular points of S_0). Returns
/// (denominator, representatives with their T-orbit length).
pub fn torus_orbits(n_t: usize) -> (i128, Vec<([i128; 2], usize)>) {
    let m: Mat2 = [[1, 1], [1, 0]];
    let mut mn: Mat2 = [[1, 0], [0, 1]];
    for _ in 0..n_t {
        mn = mat_mul(&mn, &m);
    }
    let mut parts = Vec::new();
    for s in [1i128, -1] {
        let b = [[mn[0][0] - s, mn[0][1]], [mn[1][0], mn[1][1] - s]];
        let (d1, d2, w) = smith_2x2(b);
        parts.push((d1, d2, w));
    }
    let den = parts.iter().fold(1i128, |acc, &(_, d2, _)| acc / gcd(acc, d2) * d2);
    let norm = |v: [i128; 2]| -> [i128; 2] {
        let a = [v[0].rem_euclid(den), v[1].rem_euclid(den)];
        let b = [(-v[0]).rem_euclid(den), (-v[1]).rem_euclid(den)];
        a.min(b)
    };
    let mut points = BTreeSet::new();
    for &(d1, d2, w) in &parts {
        let scale = den / d2;
        for i in 0..d1 {
            for j in 0..d2 {
                let c = [i * (d2 / d1) * scale, j * scale];
                let v = [w[0][0] * c[0] + w[0][1] * c[1], w[1][0] * c[0] + w[1][1] * c[1]];
                let v = norm(v);
                if (2 * v[0]) % den == 0 && (2 * v[1]) % den == 0 {
                    continue;
                }
                points.insert(v);
            }
        }
    }
    let mut seen = HashSet::new();
    let mut reps = Vec::new();
    for &v in &points {
        if seen.contains(&v) {
            continue;
        }
        let mut w = v;
        let mut len = 0;
        loop {
            seen.insert(w);
            len += 1;
            w = norm([w[0] + w[1], w[0]]);
            if w == v {
                break;
            }
        }
        reps.push((v, len));
    }
    (den, reps)
}

/// Φ at the torus point v/den.
pub fn cayley_point(v: [i128; 2], den: i128) -> V3 {
    let a = 2.0 * PI * (v[0] as f64 / den as f64);
    let b = 2.0 * PI * (v[1] as f64 / den as f64);
    V3::new(a.cos(), b.cos(), (a - b).cos())
}

fn t_power(x: &V3, n: usize) -> (V3, M3) {
    let mut p = *x;
    let mut j = M3::identity();
    for _ in 0..n {
        j = t_jac(&p) * j;
        p = t_fwd(&p);
    }
    (p, j)
}

/// Gauss–Newton for T^n x = x on {FV = level}. Returns the refined point.
fn newton_fixed(x0: &V3, n: usize, level: f64, max_iter: usize) -> Option<V3> {
    let mut x = *x0;
    for _ in 0..max_iter {
        if x.amax() > 4.0 {
            return None;
        }
        let (y, j) = t_power(&x, n);
        // nalgebra's SVD does not terminate on non-finite input
        if !y.iter().chain(j.iter()).all(|c| c.is_finite()) {
            return None;
        }
        let g = fv_gradient(&x);
        let a = j - M3::identity();
        let jac = Matrix4x3::new(
            a[(0, 0)], a[(0, 1)], a[(0, 2)],
            a[(1, 0)], a[(1, 1)], a[(1, 2)],
            a[(2, 0)], a[(2, 1)], a[(2, 2)],
            g.x, g.y, g.z,
        );
        let r = y - x;
        let rhs = -Vector4::new(r.x, r.y, r.z, fv(&x) - level);
        let svd = jac.svd(true, true);
        let dx = svd.solve(&rhs, 1e-300).ok()?;
        x += dx;
        if dx.norm() <= 1e-14 * (1.0 + x.norm()) {
            return Some(x);
        }
    }
    // accept a stalled iterate only if the residual is at the noise floor
    let (y, _) = t_power(&x, n);
    let scale = 1e-15 * 4f64.powi(n as i32).min(1e12);
    if (y - x).norm() <= scale.max(1e-12) && (fv(&x) - level).abs() <= 1e-12 {
        Some(x)
    } else {
        None
    }
}

/// Continues a fixed point of T^n from V = 0 to `v`.
pub fn continue_point(start: &V3, n: usize, v: f64) -> Option<V3> {
    let mut x = *start;
    let mut x_prev: Option<(V3, f64)> = None;
    let mut cur = 0.0;
    let mut dv = (v / 16.0).min(0.05);
    while cur < v {
        let step = dv.min(v - cur);
        let next = cur + step;
        // secant predictor once two points are known
        let pred = match x_prev {
            Some((xp, vp)) if cur > vp => x + (x - xp) * (step / (cur - vp)),
            _ => x,
        };
        match newton_fixed(&pred, n, next * next / 4.0, 30) {
            Some(y) if (y - pred).norm() <= 0.25 * step.sqrt().max(step) + 1e-9 => {
                x_prev = Some((x, cur));
                x = y;
                cur = next;
                dv = (dv * 1.5).min(0.05);
            }
            _ => {
                dv *= 0.5;
                if dv < 1e-7 {
                    return None;
                }
            }
        }
    }
    Some(x)
}

/// A periodic orbit of f = T²: points[i+1] = f(points[i]) cyclically, with
/// unit tangent frames along the orbit.
#[derive(Debug, Clone, Serialize)]
pub struct PeriodicOrbit {
    pub points: Vec<V3>,
    pub e_u: Vec<V3>,
    pub e_s: Vec<V3>,
    /// ln of the unstable multiplier of f^period.
    pub log_multiplier: f64,
}

impl PeriodicOrbit {
    pub fn period(&self) -> usize {
        self.points.len()
    }

    pub fn index(&self, i: isize) -> usize {
        i.rem_euclid(self.points.len() as isize) as usize
    }

    /// Builds frames by power iteration around the cycle.
    pub fn with_frames(sys: &dyn SurfaceMap, points: Vec<V3>) -> Self {
        let n = points.len();
        let warm = 64usize.div_ceil(n) * n;
        let mut v = tangent_unit(sys, &points[0], &V3::new(1.0, 0.37, -0.21));
        for k in 0..warm {
            let p = &points[k % n];
            v = tangent_unit(sys, &points[(k + 1) % n], &(sys.jac(p) * v));
        }
        let mut e_u = vec![V3::zeros(); n];
        let mut log_multiplier = 0.0;
        for k in 0..n {
            e_u[k] = v;
            let w = sys.jac(&points[k]) * v;
            log_multiplier += w.norm().ln();
            v = tangent_unit(sys, &points[(k + 1) % n], &w);
        }
        let mut v = tangent_unit(sys, &points[0], &V3::new(-0.29, 1.0, 0.53));
        for k in 0..warm {
            let i = (n - k % n) % n;
            let j = (i + n - 1) % n;
            v = tangent_unit(sys, &points[j], &(sys.jac_inv(&points[i]) * v));
        }
        let mut e_s = vec![V3::zeros(); n];
        for k in 0..n {
            let i = (n - k % n) % n;
            e_s[i] = v;
            let j = (i + n - 1) % n;
            v = tangent_unit(sys, &points[j], &(sys.jac_inv(&points[i]) * v));
        }
        Self { points, e_u, e_s, log_multiplier }
    }
}

/// Fixed points of f^n = T^{2n} on S_V grouped into f-orbits.
#[derive(Debug, Clone)]
pub struct PeriodicSet {
    pub v: f64,
    pub n: usize,
    pub orbits: Vec<Arc<PeriodicOrbit>>,
    pub failures: usize,
}

impl PeriodicSet {
    pub fn n_points(&self) -> usize {
        self.orbits.iter().map(|o| o.period()).sum()
    }
}

fn split_t_orbit(t_orbit: &[V3]) -> Vec<Vec<V3>> {
    let l = t_orbit.len();
    if l % 2 == 1 {
        vec![(0..l).map(|k| t_orbit[(2 * k) % l]).collect()]
    } else {
        vec![
            (0..l / 2).map(|k| t_orbit[2 * k]).collect(),
            (0..l / 2).map(|k| t_orbit[2 * k + 1]).collect(),
        ]
    }
}

fn refine_t_orbit(x0: &V3, len: usize, level: f64) -> Option<Vec<V3>> {
    let mut pts = Vec::with_capacity(len);
    let mut x = newton_fixed(x0, len, level, 8)?;
    for k in 0..len {
        pts.push(x);
        if k + 1 < len {
            x = newton_fixed(&t_fwd(&x), len, level, 8)?;
        }
    }
    Some(pts)
}

/// Minimal T-period of a fixed point of T^n, or None if the orbit does not close.
fn minimal_period(x: &V3, n: usize) -> Option<usize> {
    let mut y = *x;
    for k in 1..=n {
        y = t_fwd(&y);
        if n % k == 0 && (y - x).norm() <= 1e-7 {
            return Some(k);
        }
    }
    None
}

/// All f-periodic points of period dividing `n` at parameter `v`.
pub fn periodic_points(v: f64, n: usize, workers: Workers) -> Result<PeriodicSet> {
    if !(v > 0.0 && v <= 1.0) || n == 0 || n > 20 {
        return Err(Error::InvalidInput(format!("periodic_points needs 0 < V <= 1 and 1 <= n <= 20 (V={v}, n={n})")));
    }
    let n_t = 2 * n;
    let (den, reps) = torus_orbits(n_t);
    let sys = TraceSurface { v };
    let level = v * v / 4.0;
    let found = map_indexed(workers, reps.len(), |i| {
        let (rep, _) = reps[i];
        let x0 = cayley_point(rep, den);
        let x = continue_point(&x0, n_t, v)?;
        let len = minimal_period(&x, n_t)?;
        let pts = refine_t_orbit(&x, len, level)?;
        if pts.iter().any(|p| p.amax() > sys.escape_radius()) {
            return None;
        }
        Some(pts)
    });
    // The singular points of S_0 open up into p_V and its sign-change images,
    // which the torus seeds cannot reach.
    let t = solve_t_v(v, 1e-15)?.t_v;
    let pv = V3::new(t, t / (2.0 * t - 1.0), t);
    let mut found = found;
    for s in [V3::new(1.0, 1.0, 1.0), V3::new(-1.0, -1.0, 1.0), V3::new(-1.0, 1.0, -1.0), V3::new(1.0, -1.0, -1.0)] {
        let x = pv.component_mul(&s);
        if let Some(len) = minimal_period(&x, n_t) {
            found.push(refine_t_orbit(&x, len, level));
        }
    }
    let mut failures = 0;
    let mut keys = HashSet::new();
    let mut orbits = Vec::new();
    for t_orbit in found {
        let Some(t_orbit) = t_orbit else {
            failures += 1;
            continue;
        };
        // distinct torus orbits must give distinct orbits on S_V
        let key = t_orbit
            .iter()
            .map(|p| [(p.x * 1e8).round() as i64, (p.y * 1e8).round() as i64, (p.z * 1e8).round() as i64])
            .min()
            .unwrap();
        if !keys.insert(key) {
            continue;
        }
        for pts in split_t_orbit(&t_orbit) {
            orbits.push(Arc::new(PeriodicOrbit::with_frames(&sys, pts)));
        }
    }
    Ok(PeriodicSet { v, n, orbits, failures })
}

/// A sampled periodic point: orbit and position on it.
#[derive(Debug, Clone)]
pub struct PeriodicPoint {
    pub orbit: Arc<PeriodicOrbit>,
    pub idx: usize,
}

impl PeriodicPoint {
    pub fn point(&self) -> V3 {
        self.orbit.points[self.idx]
    }
}

/// Uniform measure on Fix(f^period_cap), the periodic approximation of the
/// measure of maximal entropy.
#[derive(Debug, Clone)]
pub struct MmeSampler {
    pub set: PeriodicSet,
    pub seed: u64,
    index: Vec<(u32, u32)>,
}

impl MmeSampler {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, i: usize) -> PeriodicPoint {
        let (o, k) = self.index[i];
        PeriodicPoint { orbit: self.set.orbits[o as usize].clone(), idx: k as usize }
    }

    pub fn points(&self) -> Vec<V3> {
        (0..self.len()).map(|i| self.get(i).point()).collect()
    }

    /// The `count` first draws of the seeded stream (with replacement).
    pub fn stream(&self, count: usize) -> Vec<PeriodicPoint> {
        let mut rng = task_rng(self.seed, 0);
        (0..count).map(|_| self.get(rng.gen_range(0..self.len()))).collect()
    }
}

pub fn mme_sampler(v: f64, period_cap: usize, seed: u64, workers: Workers) -> Result<MmeSampler> {
    let set = periodic_points(v, period_cap, workers)?;
    let mut index = Vec::new();
    for (o, orb) in set.orbits.iter().enumerate() {
        for k in 0..orb.period() {
            index.push((o as u32, k as u32));
        }
    }
    if index.is_empty() {
        return Err(Error::ContinuationFailed(set.failures));
    }
    Ok(MmeSampler { set, seed, index })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lucas(n: usize) -> i128 {
        let (mut a, mut b) = (2i128, 1i128);
        for _ in 0..n {
            (a, b) = (b, a + b);
        }
        a
    }

    #[test]
    fn smith_form_of_small_matrices() {
        let (d1, d2, _) = smith_2x2([[2, 4], [6, 8]]);
        assert_eq!((d1, d2), (2, 4));
        let (d1, d2, _) = smith_2x2([[3, 1], [1, 2]]);
        assert_eq!((d1, d2), (1, 5));
    }

    #[test]
    fn torus_point_counts_follow_lucas_numbers() {
        for n_t in [2usize, 4, 6, 8, 10] {
            let (_, reps) = torus_orbits(n_t);
            let pts: usize = reps.iter().map(|r| r.1).sum();
            // |Fix(M^N)| + |Fix(−M^N)| = 2 L_N for even N, halved by ±, minus torsion
            let expect = lucas(n_t) as usize;
            assert!(pts.abs_diff(expect) <= 4, "N={n_t}: {pts} vs {expect}");
        }
    }

    #[test]
    fn semiconjugacy_holds_on_the_cubic() {
        let (den, reps) = torus_orbits(6);
        for (v, _) in reps {
            let p = cayley_point(v, den);
            assert!(fv(&p).abs() < 1e-13);
            let q = cayley_point([v[0] + v[1], v[0]], den);
            assert!((t_fwd(&p) - q).norm() < 1e-13);
        }
    }

    #[test]
    fn period_one_orbit_is_p_v() {
        let v = 0.5;
        let set = periodic_points(v, 1, Workers(1)).unwrap();
        let t = solve_t_v(v, 1e-15).unwrap().t_v;
        let pv = V3::new(t, t / (2.0 * t - 1.0), t);
        let best = set
            .orbits
            .iter()
            .map(|o| (o.points[0] - pv).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-10, "closest period-one point is {best} away");
        assert_eq!(set.failures, 0);
    }

    #[test]
    fn orbits_are_periodic_and_frames_invariant() {
        let sys = TraceSurface { v: 0.5 };
        let set = periodic_points(0.5, 4, Workers(1)).unwrap();
        assert!(set.n_points() > 0);
        for o in &set.orbits {
            let n = o.period();
            for k in 0..n {
                let p = o.points[k];
                assert!((sys.step(&p) - o.points[(k + 1) % n]).norm() < 1e-10);
                assert!((fv(&p) - 0.0625).abs() < 1e-12);
                let w = tangent_unit(&sys, &o.points[(k + 1) % n], &(sys.jac(&p) * o.e_u[k]));
                assert!(w.cross(&o.e_u[(k + 1) % n]).norm() < 1e-10);
                assert!((sys.jac(&p) * o.e_s[k]).norm() < 1.0);
            }
            assert!(o.log_multiplier > 0.0);
        }
    }
}
