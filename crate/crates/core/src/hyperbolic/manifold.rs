//! Frames, local stable/unstable curves and brackets.
//!
//! Every orbit is stored as a reference orbit plus a displacement. Curve
//! points are obtained by seeding a displacement far out along the orbit and
//! carrying it back with the exact difference maps, so points at distance
//! 10⁻³⁰ from the reference keep full relative precision.

use serde::Serialize;

use super::periodic::PeriodicPoint;
use super::system::{tangent_unit, SurfaceMap, V3};
use crate::error::{Error, Result};

/// Smallest admissible |sin| of the angle between e_u and e_s.
pub const ANGLE_MARGIN: f64 = 1e-3;
/// Orbit length stored for periodic points.
pub const PERIODIC_DEPTH: usize = 40;
/// Orbit length for points known only through iteration.
pub const FREE_DEPTH: usize = 18;
/// Extra iterates used to converge frames at free points.
pub const FREE_WARMUP: usize = 4;
/// Extended orbits stop once they are this far from the orbit they follow.
pub const EXTENSION_RADIUS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Site {
    pub base: V3,
    pub disp: V3,
}

impl Site {
    pub fn plain(base: V3) -> Self {
        Self { base, disp: V3::zeros() }
    }
    pub fn point(&self) -> V3 {
        self.base + self.disp
    }
}

/// Difference a − b of two sites, exact when they share a base.
pub fn site_diff(a: &Site, b: &Site) -> V3 {
    (a.base - b.base) + (a.disp - b.disp)
}

/// A point with stored forward (fwd[j] = f^j x) and backward (bwd[j] = f^{−j} x)
/// orbit segments and unit frame vectors at the far ends.
#[derive(Debug, Clone)]
pub struct Traced {
    pub fwd: Vec<Site>,
    pub bwd: Vec<Site>,
    /// Unstable direction at bwd.last().
    pub e_u_far: V3,
    /// Stable direction at fwd.last().
    pub e_s_far: V3,
}

fn escaped(sys: &dyn SurfaceMap, p: &V3) -> bool {
    !(p.amax() <= sys.escape_radius())
}

impl Traced {
    pub fn point(&self) -> V3 {
        self.fwd[0].point()
    }

    pub fn depth(&self) -> usize {
        (self.fwd.len() - 1).min(self.bwd.len() - 1)
    }

    pub fn from_periodic(pp: &PeriodicPoint, depth: usize) -> Self {
        let o = &pp.orbit;
        let i = pp.idx as isize;
        let fwd = (0..=depth as isize).map(|j| Site::plain(o.points[o.index(i + j)])).collect();
        let bwd = (0..=depth as isize).map(|j| Site::plain(o.points[o.index(i - j)])).collect();
        Self {
            fwd,
            bwd,
            e_u_far: o.e_u[o.index(i - depth as isize)],
            e_s_far: o.e_s[o.index(i + depth as isize)],
        }
    }

    /// Orbit by direct iteration; frames by power iteration over `warmup`
    /// further steps.
    pub fn from_point(sys: &dyn SurfaceMap, x: V3, depth: usize, warmup: usize) -> Result<Self> {
        let total = depth + warmup;
        let mut fwd = vec![x];
        let mut bwd = vec![x];
        for k in 0..total {
            let a = sys.step(&fwd[k]);
            let b = sys.step_inv(&bwd[k]);
            if escaped(sys, &a) || escaped(sys, &b) {
                return Err(Error::OrbitEscaped(k + 1));
            }
            fwd.push(a);
            bwd.push(b);
        }
        let mut u = tangent_unit(sys, &bwd[total], &V3::new(1.0, 0.37, -0.21));
        for k in (depth + 1..=total).rev() {
            u = tangent_unit(sys, &bwd[k - 1], &(sys.jac(&bwd[k]) * u));
        }
        let mut s = tangent_unit(sys, &fwd[total], &V3::new(-0.29, 1.0, 0.53));
        for k in (depth + 1..=total).rev() {
            s = tangent_unit(sys, &fwd[k - 1], &(sys.jac_inv(&fwd[k]) * s));
        }
        fwd.truncate(depth + 1);
        bwd.truncate(depth + 1);
        Ok(Self {
            fwd: fwd.into_iter().map(Site::plain).collect(),
            bwd: bwd.into_iter().map(Site::plain).collect(),
            e_u_far: u,
            e_s_far: s,
        })
    }

    /// Unit unstable vectors along bwd, index j ↔ f^{−j}x, pushed from the far end.
    pub fn unstable_along_bwd(&self, sys: &dyn SurfaceMap) -> Vec<V3> {
        let m = self.bwd.len() - 1;
        let mut out = vec![V3::zeros(); m + 1];
        let mut u = self.e_u_far;
        out[m] = u;
        for j in (1..=m).rev() {
            u = tangent_unit(sys, &self.bwd[j - 1].point(), &(sys.jac(&self.bwd[j].point()) * u));
            out[j - 1] = u;
        }
        out
    }

    /// Unit stable vectors along fwd, pulled back from the far end.
    pub fn stable_along_fwd(&self, sys: &dyn SurfaceMap) -> Vec<V3> {
        let m = self.fwd.len() - 1;
        let mut out = vec![V3::zeros(); m + 1];
        let mut s = self.e_s_far;
        out[m] = s;
        for j in (1..=m).rev() {
            s = tangent_unit(sys, &self.fwd[j - 1].point(), &(sys.jac_inv(&self.fwd[j].point()) * s));
            out[j - 1] = s;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Stable,
    Unstable,
}

/// Local stable (unstable) curve through a traced point, parametrized by
/// t ≈ arclength at the point.
#[derive(Debug, Clone)]
pub struct Leaf {
    pub kind: Kind,
    /// fwd (stable) or bwd (unstable) sites of the owner; index 0 is the point.
    sites: Vec<Site>,
    dir: V3,
    scale: f64,
}

/// Leaf point at one parameter: its orbit segment and d(point)/dt at index 0.
#[derive(Debug, Clone)]
pub struct LeafPoint {
    pub chain: Vec<Site>,
    pub tangent: V3,
}

impl Leaf {
    pub fn new(sys: &dyn SurfaceMap, owner: &Traced, kind: Kind) -> Self {
        let (sites, dir) = match kind {
            Kind::Stable => (owner.fwd.clone(), owner.e_s_far),
            Kind::Unstable => (owner.bwd.clone(), owner.e_u_far),
        };
        let mut leaf = Self { kind, sites, dir, scale: 1.0 };
        let l = leaf.eval(sys, 0.0).tangent.norm();
        leaf.scale = 1.0 / l;
        leaf
    }

    pub fn depth(&self) -> usize {
        self.sites.len() - 1
    }

    pub fn eval(&self, sys: &dyn SurfaceMap, t: f64) -> LeafPoint {
        let m = self.depth();
        let far = &self.sites[m];
        let mut e = far.disp + self.dir * (t * self.scale);
        // back onto the level set of the owner, which the frame vector at the
        // reference point only touches to first order
        let target = sys.level_delta(&far.base, &far.disp);
        for _ in 0..3 {
            let defect = sys.level_delta(&far.base, &e) - target;
            if defect == 0.0 {
                break;
            }
            let g = sys.level_gradient(&(far.base + e));
            e -= g * (defect / g.norm_squared());
        }
        let mut tan = self.dir * self.scale;
        let mut chain = vec![Site::plain(V3::zeros()); m + 1];
        chain[m] = Site { base: self.sites[m].base, disp: e };
        for j in (1..=m).rev() {
            let b = &self.sites[j].base;
            let x = b + e;
            match self.kind {
                Kind::Stable => {
                    tan = sys.jac_inv(&x) * tan;
                    e = sys.step_inv_delta(b, &e);
                }
                Kind::Unstable => {
                    tan = sys.jac(&x) * tan;
                    e = sys.step_delta(b, &e);
                }
            }
            chain[j - 1] = Site { base: self.sites[j - 1].base, disp: e };
        }
        LeafPoint { chain, tangent: tan }
    }

    pub fn point(&self, sys: &dyn SurfaceMap, t: f64) -> V3 {
        self.eval(sys, t).chain[0].point()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HyperbolicFrame {
    pub point: V3,
    pub e_u: V3,
    pub e_s: V3,
    /// |sin| of the angle between df·e and the independently computed frame
    /// vector at the image point (worst of the two directions).
    pub quality: f64,
}

impl HyperbolicFrame {
    pub fn sin_angle(&self) -> f64 {
        self.e_u.cross(&self.e_s).norm()
    }

    /// (x, z) components, renormalized: the chart picture of the frame.
    pub fn chart_vectors(&self) -> ([f64; 2], [f64; 2]) {
        let c = |v: &V3| {
            let n = v.x.hypot(v.z);
            [v.x / n, v.z / n]
        };
        (c(&self.e_u), c(&self.e_s))
    }
}

fn sin_between(a: &V3, b: &V3) -> f64 {
    a.cross(b).norm() / (a.norm() * b.norm())
}

fn frame_from_orbit(sys: &dyn SurfaceMap, bwd: &[V3], fwd: &[V3], depth: usize) -> Result<HyperbolicFrame> {
    // bwd[j] = f^{-j}p for j ≤ depth, fwd[j] = f^j p for j ≤ depth + 1
    let push = |start: usize| {
        let mut u = tangent_unit(sys, &bwd[start], &V3::new(1.0, 0.37, -0.21));
        for j in (1..=start).rev() {
            u = tangent_unit(sys, &bwd[j - 1], &(sys.jac(&bwd[j]) * u));
        }
        u
    };
    let pull = |pts: &[V3], start: usize| {
        let mut s = tangent_unit(sys, &pts[start], &V3::new(-0.29, 1.0, 0.53));
        for j in (1..=start).rev() {
            s = tangent_unit(sys, &pts[j - 1], &(sys.jac_inv(&pts[j]) * s));
        }
        s
    };
    let e_u = push(depth);
    let e_s = pull(fwd, depth);
    let p = bwd[0];
    let fp = fwd[1];
    // independent frame at f(p): unstable from f^{-depth}(fp) = bwd[depth-1]
    let u_img = push(depth - 1);
    let u_img = tangent_unit(sys, &fp, &(sys.jac(&p) * u_img));
    let s_img = pull(&fwd[1..], depth);
    let q_u = sin_between(&(sys.jac(&p) * e_u), &u_img);
    let q_s = sin_between(&(sys.jac(&p) * e_s), &s_img);
    let frame = HyperbolicFrame { point: p, e_u, e_s, quality: q_u.max(q_s) };
    let a = frame.sin_angle();
    if !(a >= ANGLE_MARGIN) {
        return Err(Error::IllConditioned(a));
    }
    Ok(frame)
}

/// Frame by power iteration of the Jacobian cocycle along the iterated orbit.
pub fn oseledets_frame(sys: &dyn SurfaceMap, p: V3, depth: usize) -> Result<HyperbolicFrame> {
    if depth < 2 {
        return Err(Error::InvalidInput("frame depth must be at least 2".into()));
    }
    let mut fwd = vec![p];
    let mut bwd = vec![p];
    for k in 0..=depth {
        let a = sys.step(&fwd[k]);
        if escaped(sys, &a) {
            return Err(Error::OrbitEscaped(k + 1));
        }
        fwd.push(a);
        if k < depth {
            let b = sys.step_inv(&bwd[k]);
            if escaped(sys, &b) {
                return Err(Error::OrbitEscaped(k + 1));
            }
            bwd.push(b);
        }
    }
    frame_from_orbit(sys, &bwd, &fwd, depth)
}

/// Same construction on the exact cycle of a periodic point.
pub fn periodic_frame(sys: &dyn SurfaceMap, pp: &PeriodicPoint, depth: usize) -> Result<HyperbolicFrame> {
    if depth < 2 {
        return Err(Error::InvalidInput("frame depth must be at least 2".into()));
    }
    let o = &pp.orbit;
    let i = pp.idx as isize;
    let fwd: Vec<V3> = (0..=depth as isize + 1).map(|j| o.points[o.index(i + j)]).collect();
    let bwd: Vec<V3> = (0..=depth as isize).map(|j| o.points[o.index(i - j)]).collect();
    frame_from_orbit(sys, &bwd, &fwd, depth)
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifoldCurve {
    pub base: V3,
    pub kind: Kind,
    /// Arclength from the base, increasing.
    pub arclength: Vec<f64>,
    pub samples: Vec<V3>,
    pub half_length: f64,
    /// Worst ratio |displacement at the far end| / |displacement at the base|
    /// over the samples; below one means the expected contraction holds.
    pub contraction: f64,
}

/// Samples the local curve at `n_samples` parameters in [−h, h].
pub fn trace_manifold(
    sys: &dyn SurfaceMap,
    owner: &Traced,
    kind: Kind,
    half_length: f64,
    n_samples: usize,
) -> Result<ManifoldCurve> {
    if !(half_length > 0.0) || n_samples < 3 {
        return Err(Error::InvalidInput("trace_manifold needs half_length > 0 and at least 3 samples".into()));
    }
    let leaf = Leaf::new(sys, owner, kind);
    let m = leaf.depth();
    let mut samples = Vec::with_capacity(n_samples);
    let mut contraction: f64 = 0.0;
    for i in 0..n_samples {
        let t = -half_length + 2.0 * half_length * i as f64 / (n_samples - 1) as f64;
        let lp = leaf.eval(sys, t);
        let p = lp.chain[0].point();
        if escaped(sys, &p) {
            return Err(Error::OrbitEscaped(0));
        }
        let d0 = (lp.chain[0].disp - leaf.sites[0].disp).norm();
        let dm = (lp.chain[m].disp - leaf.sites[m].disp).norm();
        if d0 > 0.0 {
            contraction = contraction.max(dm / d0);
        }
        samples.push(p);
    }
    let mut arclength = vec![0.0; n_samples];
    for i in 1..n_samples {
        let step = samples[i] - samples[i - 1];
        if i >= 2 && step.dot(&(samples[i - 1] - samples[i - 2])) <= 0.0 {
            return Err(Error::SegmentFolded);
        }
        arclength[i] = arclength[i - 1] + step.norm();
    }
    // arclength measured from the base point
    let mid = leaf.point(sys, 0.0);
    let (k, _) = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, (s - mid).norm()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let offset = arclength[k];
    for s in arclength.iter_mut() {
        *s -= offset;
    }
    Ok(ManifoldCurve { base: owner.point(), kind, arclength, samples, half_length, contraction })
}

/// [x, y] = W^s_loc(x) ∩ W^u_loc(y) with its orbit segments.
#[derive(Debug, Clone)]
pub struct BracketPoint {
    pub traced: Traced,
    /// Parameter on the stable leaf of x and on the unstable leaf of y.
    pub t_stable: f64,
    pub t_unstable: f64,
    pub residual: f64,
}

/// Newton on the two exact leaf parametrizations.
pub fn bracket_point(sys: &dyn SurfaceMap, x: &Traced, y: &Traced, radius: f64) -> Result<BracketPoint> {
    let ls = Leaf::new(sys, x, Kind::Stable);
    let lu = Leaf::new(sys, y, Kind::Unstable);
    let gap = site_diff(&x.fwd[0], &y.bwd[0]);
    let cap = 4.0 * radius + 1e-12;
    let mut a = 0.0;
    let mut b = 0.0;
    let mut best: Option<(f64, LeafPoint, LeafPoint, f64, f64)> = None;
    for _ in 0..40 {
        let ps = ls.eval(sys, a);
        let pu = lu.eval(sys, b);
        // G = x_0 + E^s − (y_0 + E^u), grouped to keep small terms small
        let g = gap + (ps.chain[0].disp - x.fwd[0].disp) - (pu.chain[0].disp - y.bwd[0].disp);
        let r = g.norm();
        if !r.is_finite() {
            break;
        }
        let improved = best.as_ref().map_or(true, |bst| r < bst.0);
        if improved {
            best = Some((r, ps.clone(), pu.clone(), a, b));
        } else if r > 2.0 * best.as_ref().unwrap().0 && r > 1e-13 {
            break;
        }
        if r == 0.0 {
            break;
        }
        // least squares for G + a'·Ts − b'·Tu = 0
        let (ts, tu) = (ps.tangent, -pu.tangent);
        let (s11, s12, s22) = (ts.dot(&ts), ts.dot(&tu), tu.dot(&tu));
        let (r1, r2) = (-ts.dot(&g), -tu.dot(&g));
        let det = s11 * s22 - s12 * s12;
        if !(det.abs() > 1e-300) {
            break;
        }
        let da = (r1 * s22 - r2 * s12) / det;
        let db = (s11 * r2 - s12 * r1) / det;
        a += da;
        b += db;
        if a.abs() > cap || b.abs() > cap {
            return Err(Error::NoIntersection(radius));
        }
        if da.abs() <= 1e-17 * (1.0 + a.abs()) && db.abs() <= 1e-17 * (1.0 + b.abs()) {
            let ps = ls.eval(sys, a);
            let pu = lu.eval(sys, b);
            let g = gap + (ps.chain[0].disp - x.fwd[0].disp) - (pu.chain[0].disp - y.bwd[0].disp);
            if g.norm() < best.as_ref().unwrap().0 {
                best = Some((g.norm(), ps, pu, a, b));
            }
            break;
        }
    }
    let Some((residual, ps, pu, a, b)) = best else {
        return Err(Error::NoIntersection(radius));
    };
    if !(residual <= 1e-10) || a.abs() > cap || b.abs() > cap {
        return Err(Error::NoIntersection(radius));
    }
    Ok(BracketPoint {
        traced: Traced { fwd: ps.chain, bwd: pu.chain, e_u_far: y.e_u_far, e_s_far: x.e_s_far },
        t_stable: a,
        t_unstable: b,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketResult {
    pub p: V3,
    pub q: V3,
    pub bracket_pq: V3,
    pub bracket_qp: V3,
    pub residual: f64,
}

pub fn bracket(sys: &dyn SurfaceMap, p: &Traced, q: &Traced, radius: f64) -> Result<(BracketResult, BracketPoint, BracketPoint)> {
    let d = (p.point() - q.point()).norm();
    if !(d <= radius) {
        return Err(Error::NoIntersection(radius));
    }
    let pq = bracket_point(sys, p, q, radius)?;
    let qp = bracket_point(sys, q, p, radius)?;
    let res = BracketResult {
        p: p.point(),
        q: q.point(),
        bracket_pq: pq.traced.point(),
        bracket_qp: qp.traced.point(),
        residual: pq.residual.max(qp.residual),
    };
    Ok((res, pq, qp))
}

/// The point at parameter t on a leaf of `owner`, with the other half of its
/// orbit continued from the owner's orbit while the displacement stays below
/// EXTENSION_RADIUS.
pub fn extend_along(sys: &dyn SurfaceMap, owner: &Traced, kind: Kind, t: f64) -> Traced {
    let leaf = Leaf::new(sys, owner, kind);
    let lp = leaf.eval(sys, t);
    let here = lp.chain[0];
    let (other, far_dirs) = match kind {
        Kind::Stable => (&owner.bwd, owner.unstable_along_bwd(sys)),
        Kind::Unstable => (&owner.fwd, owner.stable_along_fwd(sys)),
    };
    let mut e = site_diff(&here, &Site::plain(other[0].base));
    let mut sites = vec![Site { base: other[0].base, disp: e }];
    for j in 0..other.len() - 1 {
        let b = &other[j].base;
        let next = match kind {
            Kind::Stable => sys.step_inv_delta(b, &e),
            Kind::Unstable => sys.step_delta(b, &e),
        };
        if !((next - other[j + 1].disp).norm() <= EXTENSION_RADIUS) {
            break;
        }
        e = next;
        sites.push(Site { base: other[j + 1].base, disp: e });
    }
    let far = far_dirs[sites.len() - 1];
    match kind {
        Kind::Stable => Traced { fwd: lp.chain, bwd: sites, e_u_far: far, e_s_far: owner.e_s_far },
        Kind::Unstable => Traced { fwd: sites, bwd: lp.chain, e_u_far: owner.e_u_far, e_s_far: far },
    }
}
