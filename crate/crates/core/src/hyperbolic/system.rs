//! Surface diffeomorphisms in ambient coordinates.
//!
//! Points live in R³ and tangent vectors are ambient vectors tangent to the
//! invariant surface. The trace surface uses f = T²; the linear control is
//! the cat matrix acting on the plane z = 0 (lifted, no reduction mod 1).

use nalgebra::{Matrix3, Vector3};

pub type V3 = Vector3<f64>;
pub type M3 = Matrix3<f64>;

pub trait SurfaceMap: Send + Sync {
    fn name(&self) -> String;
    fn step(&self, p: &V3) -> V3;
    fn step_inv(&self, p: &V3) -> V3;
    /// f(b + d) − f(b), evaluated without cancellation.
    fn step_delta(&self, b: &V3, d: &V3) -> V3;
    /// f⁻¹(b + d) − f⁻¹(b).
    fn step_inv_delta(&self, b: &V3, d: &V3) -> V3;
    fn jac(&self, p: &V3) -> M3;
    fn jac_inv(&self, p: &V3) -> M3;
    /// Unit normal of the invariant surface through p.
    fn normal(&self, p: &V3) -> V3;
    /// Gradient of the conserved function defining the surface.
    fn level_gradient(&self, p: &V3) -> V3;
    /// Conserved function at b + d minus its value at b.
    fn level_delta(&self, b: &V3, d: &V3) -> f64;
    /// Orbits leaving this sup-norm ball count as escaped.
    fn escape_radius(&self) -> f64;
    fn is_linear(&self) -> bool {
        false
    }
}

/// Removes the normal component and renormalizes.
pub fn tangent_unit(sys: &dyn SurfaceMap, p: &V3, v: &V3) -> V3 {
    let n = sys.normal(p);
    let w = v - n * n.dot(v);
    w / w.norm()
}

pub fn t_fwd(p: &V3) -> V3 {
    V3::new(2.0 * p.x * p.y - p.z, p.x, p.y)
}

pub fn t_inv(p: &V3) -> V3 {
    V3::new(p.y, p.z, 2.0 * p.y * p.z - p.x)
}

fn t_fwd_delta(b: &V3, d: &V3) -> V3 {
    V3::new(2.0 * (b.x * d.y + b.y * d.x + d.x * d.y) - d.z, d.x, d.y)
}

fn t_inv_delta(b: &V3, d: &V3) -> V3 {
    V3::new(d.y, d.z, 2.0 * (b.y * d.z + b.z * d.y + d.y * d.z) - d.x)
}

pub fn t_jac(p: &V3) -> M3 {
    M3::new(2.0 * p.y, 2.0 * p.x, -1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

pub fn t_jac_inv(p: &V3) -> M3 {
    M3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0, 2.0 * p.z, 2.0 * p.y)
}

/// Gradient of x² + y² + z² − 2xyz − 1.
pub fn fv_gradient(p: &V3) -> V3 {
    V3::new(
        2.0 * (p.x - p.y * p.z),
        2.0 * (p.y - p.x * p.z),
        2.0 * (p.z - p.x * p.y),
    )
}

pub fn fv(p: &V3) -> f64 {
    p.x * p.x + p.y * p.y + p.z * p.z - 2.0 * p.x * p.y * p.z - 1.0
}

/// f = T² on S_V.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSurface {
    pub v: f64,
}

impl SurfaceMap for TraceSurface {
    fn name(&self) -> String {
        format!("trace-map(V={})", self.v)
    }
    fn step(&self, p: &V3) -> V3 {
        t_fwd(&t_fwd(p))
    }
    fn step_inv(&self, p: &V3) -> V3 {
        t_inv(&t_inv(p))
    }
    fn step_delta(&self, b: &V3, d: &V3) -> V3 {
        let d1 = t_fwd_delta(b, d);
        t_fwd_delta(&t_fwd(b), &d1)
    }
    fn step_inv_delta(&self, b: &V3, d: &V3) -> V3 {
        let d1 = t_inv_delta(b, d);
        t_inv_delta(&t_inv(b), &d1)
    }
    fn jac(&self, p: &V3) -> M3 {
        t_jac(&t_fwd(p)) * t_jac(p)
    }
    fn jac_inv(&self, p: &V3) -> M3 {
        t_jac_inv(&t_inv(p)) * t_jac_inv(p)
    }
    fn normal(&self, p: &V3) -> V3 {
        let g = fv_gradient(p);
        g / g.norm()
    }
    fn level_gradient(&self, p: &V3) -> V3 {
        fv_gradient(p)
    }
    fn level_delta(&self, b: &V3, d: &V3) -> f64 {
        let cross = d.x * b.y * b.z + b.x * d.y * b.z + b.x * b.y * d.z
            + d.x * d.y * b.z + d.x * b.y * d.z + b.x * d.y * d.z
            + d.x * d.y * d.z;
        2.0 * b.dot(d) + d.norm_squared() - 2.0 * cross
    }
    fn escape_radius(&self) -> f64 {
        // bounded orbits of the trace map stay below 1 + V/2 + margin
        2.0 + self.v
    }
}

/// [[2,1],[1,1]] on the plane z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CatMap;

impl CatMap {
    fn apply(p: &V3) -> V3 {
        V3::new(2.0 * p.x + p.y, p.x + p.y, 0.0)
    }
    fn apply_inv(p: &V3) -> V3 {
        V3::new(p.x - p.y, -p.x + 2.0 * p.y, 0.0)
    }
}

impl SurfaceMap for CatMap {
    fn name(&self) -> String {
        "linear-test".into()
    }
    fn step(&self, p: &V3) -> V3 {
        Self::apply(p)
    }
    fn step_inv(&self, p: &V3) -> V3 {
        Self::apply_inv(p)
    }
    fn step_delta(&self, _b: &V3, d: &V3) -> V3 {
        Self::apply(d)
    }
    fn step_inv_delta(&self, _b: &V3, d: &V3) -> V3 {
        Self::apply_inv(d)
    }
    fn jac(&self, _p: &V3) -> M3 {
        M3::new(2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    }
    fn jac_inv(&self, _p: &V3) -> M3 {
        M3::new(1.0, -1.0, 0.0, -1.0, 2.0, 0.0, 0.0, 0.0, 0.0)
    }
    fn normal(&self, _p: &V3) -> V3 {
        V3::new(0.0, 0.0, 1.0)
    }
    fn level_gradient(&self, _p: &V3) -> V3 {
        V3::new(0.0, 0.0, 1.0)
    }
    fn level_delta(&self, _b: &V3, d: &V3) -> f64 {
        d.z
    }
    fn escape_radius(&self) -> f64 {
        // lifted orbits grow like λⁿ; only overflow matters
        1e150
    }
    fn is_linear(&self) -> bool {
        true
    }
}
