//! Hyperbolic geometry on S_V: frames, curves, brackets, Δ and friends.

use nalgebra::{Matrix3, Vector3};
use quasitrace::hyperbolic::delta::*;
use quasitrace::hyperbolic::manifold::*;
use quasitrace::hyperbolic::periodic::*;
use quasitrace::hyperbolic::qnl::*;
use quasitrace::hyperbolic::system::*;
use quasitrace::par::Workers;
use quasitrace::stats::linear_fit;
use quasitrace::trace_map::{linearize_at_pv, solve_t_v};
use std::sync::OnceLock;

const V: f64 = 0.5;

fn sampler8() -> &'static MmeSampler {
    static S: OnceLock<MmeSampler> = OnceLock::new();
    S.get_or_init(|| mme_sampler(V, 8, 3, Workers(1)).unwrap())
}

fn sampler10() -> &'static MmeSampler {
    static S: OnceLock<MmeSampler> = OnceLock::new();
    S.get_or_init(|| mme_sampler(V, 10, 3, Workers(1)).unwrap())
}

fn pv_point() -> PeriodicPoint {
    let set = periodic_points(V, 1, Workers(1)).unwrap();
    let t = solve_t_v(V, 1e-15).unwrap().t_v;
    let pv = V3::new(t, t / (2.0 * t - 1.0), t);
    let o = set
        .orbits
        .iter()
        .min_by(|a, b| (a.points[0] - pv).norm().total_cmp(&(b.points[0] - pv).norm()))
        .unwrap();
    PeriodicPoint { orbit: o.clone(), idx: 0 }
}

/// Close ordered pairs (i, j) of the cap-8 sampler, every `step`-th one.
fn close_pairs(radius: f64, step: usize) -> Vec<(usize, usize)> {
    let pts = sampler8().points();
    let mut out = vec![];
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i != j && (pts[i] - pts[j]).norm() <= radius {
                out.push((i, j));
            }
        }
    }
    out.into_iter().step_by(step).collect()
}

fn traced(i: usize) -> Traced {
    Traced::from_periodic(&sampler8().get(i), PERIODIC_DEPTH)
}

fn sin2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] * b[1] - a[1] * b[0]).abs() / (a[0].hypot(a[1]) * b[0].hypot(b[1]))
}

#[test]
fn frame_at_fixed_point_is_the_eigenbasis() {
    let sys = TraceSurface { v: V };
    let lin = linearize_at_pv(V).unwrap();
    let pp = pv_point();
    for frame in [oseledets_frame(&sys, pp.point(), 40), periodic_frame(&sys, &pp, 40)] {
        let frame = frame.unwrap();
        let (u, s) = frame.chart_vectors();
        // chart coordinates are (x, z); eigenvectors (λ, 1) and (μ, 1)
        assert!(sin2(u, [lin.lambda, 1.0]) < 1e-8, "e_u off by {}", sin2(u, [lin.lambda, 1.0]));
        assert!(sin2(s, [lin.mu, 1.0]) < 1e-8, "e_s off by {}", sin2(s, [lin.mu, 1.0]));
    }
}

#[test]
fn frame_quality_does_not_degrade_with_depth() {
    let sys = TraceSurface { v: V };
    for pp in sampler8().stream(100) {
        let a = periodic_frame(&sys, &pp, 30).unwrap();
        let b = periodic_frame(&sys, &pp, 60).unwrap();
        assert!(b.quality <= a.quality + 1e-13, "{} > {}", b.quality, a.quality);
        assert!(b.sin_angle() >= ANGLE_MARGIN);
        // one step contracts e_s
        assert!((sys.jac(&pp.point()) * b.e_s).norm() < 1.0);
        assert!((b.e_u.norm() - 1.0).abs() < 1e-14 && (b.e_s.norm() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn frames_are_equivariant() {
    let sys = TraceSurface { v: V };
    for pp in sampler8().stream(40) {
        let a = periodic_frame(&sys, &pp, 40).unwrap();
        let next = PeriodicPoint { orbit: pp.orbit.clone(), idx: pp.orbit.index(pp.idx as isize + 1) };
        let b = periodic_frame(&sys, &next, 40).unwrap();
        let pushed = tangent_unit(&sys, &next.point(), &(sys.jac(&pp.point()) * a.e_u));
        assert!(pushed.cross(&b.e_u).norm() <= 1e-6);
        let pulled = tangent_unit(&sys, &pp.point(), &(sys.jac_inv(&next.point()) * b.e_s));
        assert!(pulled.cross(&a.e_s).norm() <= 1e-6);
    }
}

#[test]
fn frames_fail_for_escaping_orbits() {
    let sys = TraceSurface { v: V };
    // a point far from the horseshoe leaves the bounded region quickly
    let p = V3::new(1.9, 1.9, 1.9);
    assert!(matches!(oseledets_frame(&sys, p, 30), Err(quasitrace::Error::OrbitEscaped(_))));
}

#[test]
fn log_expansion_is_a_coboundary_on_periodic_orbits() {
    let sys = TraceSurface { v: V };
    for o in sampler8().set.orbits.iter().step_by(7) {
        let n = o.period();
        let mut sum = 0.0;
        for k in 0..n {
            let j = sys.jac(&o.points[k]);
            sum += (j * o.e_u[k]).norm().ln() + (j * o.e_s[k]).norm().ln();
        }
        assert!(sum.abs() <= 1e-8, "period {n}: {sum}");
    }
}

/// Second-order unstable manifold of f = T² at p_V by the parametrization
/// method in ambient coordinates: W(s) = p + a₁s + a₂s², f∘W = W(λ·).
fn parametrized_unstable(p: V3) -> (V3, V3) {
    let (x, y, z) = (p.x, p.y, p.z);
    // f(x,y,z) = (4x²y − 2xz − y, 2xy − z, x)
    let df = Matrix3::new(8.0 * x * y - 2.0 * z, 4.0 * x * x - 1.0, -2.0 * x, 2.0 * y, 2.0 * x, -1.0, 1.0, 0.0, 0.0);
    let eig = df.complex_eigenvalues();
    let lambda = eig.iter().map(|c| c.re).fold(0.0, f64::max);
    let a1 = (df - Matrix3::identity() * lambda).svd(true, true).v_t.unwrap().row(2).transpose();
    let a1 = a1 / a1.norm();
    let hess = |a: &V3| Vector3::new(8.0 * y * a.x * a.x + 16.0 * x * a.x * a.y - 4.0 * a.x * a.z, 4.0 * a.x * a.y, 0.0);
    let a2 = (Matrix3::identity() * (lambda * lambda) - df).try_inverse().unwrap() * (hess(&a1) * 0.5);
    (a1, a2)
}

#[test]
fn unstable_curve_at_fixed_point_matches_second_order_parametrization() {
    let sys = TraceSurface { v: V };
    let pp = pv_point();
    let p = pp.point();
    let (a1, a2) = parametrized_unstable(p);
    assert!((sys.step(&(p + a1 * 1e-7)) - p - sys.jac(&p) * a1 * 1e-7).norm() < 1e-12);
    let owner = Traced::from_periodic(&pp, PERIODIC_DEPTH);
    let curve = trace_manifold(&sys, &owner, Kind::Unstable, 2e-3, 41).unwrap();
    assert!(curve.contraction < 1.0);
    let bend = a2 - a1 * a2.dot(&a1);
    for x in &curve.samples {
        let d = x - p;
        let s = d.dot(&a1);
        if s.abs() < 5e-4 {
            continue;
        }
        let normal = d - a1 * s;
        // O(s³) remainder relative to the s² term
        let err = (normal - bend * (s * s)).norm() / (bend.norm() * s * s);
        assert!(err < 0.02, "s={s} relative bend error {err}");
    }
    // tangent at the base
    let i = curve.arclength.iter().position(|a| *a == 0.0).unwrap();
    let t = curve.samples[i + 1] - curve.samples[i - 1];
    assert!(t.cross(&a1).norm() / t.norm() < 1e-6);
}

#[test]
fn unstable_curves_expand_at_the_multiplier_rate() {
    let sys = TraceSurface { v: V };
    for pp in sampler8().stream(10) {
        let owner = Traced::from_periodic(&pp, PERIODIC_DEPTH);
        let leaf = Leaf::new(&sys, &owner, Kind::Unstable);
        let o = &pp.orbit;
        for s in [1e-6, 1e-5, 1e-4] {
            let mut x = leaf.point(&sys, s);
            let mut p = pp.point();
            let mut logd = 0.0;
            let mut k = pp.idx;
            for _ in 0..3 {
                logd += (sys.jac(&p) * o.e_u[k]).norm().ln();
                x = sys.step(&x);
                p = sys.step(&p);
                k = o.index(k as isize + 1);
            }
            let ratio = (x - p).norm() / (s * logd.exp());
            assert!((ratio - 1.0).abs() < 0.2, "s={s} ratio {ratio}");
        }
    }
}

#[test]
fn stable_and_unstable_curves_cross_transversally() {
    let sys = TraceSurface { v: V };
    for pp in sampler8().stream(20) {
        let owner = Traced::from_periodic(&pp, PERIODIC_DEPTH);
        let a = Leaf::new(&sys, &owner, Kind::Stable).eval(&sys, 0.0).tangent;
        let b = Leaf::new(&sys, &owner, Kind::Unstable).eval(&sys, 0.0).tangent;
        assert!(a.cross(&b).norm() / (a.norm() * b.norm()) >= ANGLE_MARGIN);
        let c = trace_manifold(&sys, &owner, Kind::Stable, 1e-2, 21).unwrap();
        assert!(c.arclength.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn bracket_of_a_point_with_itself() {
    let sys = TraceSurface { v: V };
    let p = traced(5);
    let (res, _, _) = bracket(&sys, &p, &p, 1e-2).unwrap();
    assert_eq!(res.bracket_pq, p.point());
    assert_eq!(res.bracket_qp, p.point());
    assert_eq!(res.residual, 0.0);
}

#[test]
fn bracket_with_a_point_on_the_unstable_leaf_is_degenerate() {
    let sys = TraceSurface { v: V };
    for (i, j) in close_pairs(0.05, 97).into_iter().take(10) {
        let p = traced(i);
        // r ∈ W^u(p) with full orbit segments
        let r = bracket_point(&sys, &traced(j), &p, 0.1).unwrap().traced;
        let (res, _, _) = bracket(&sys, &p, &r, 0.1).unwrap();
        assert!((res.bracket_pq - p.point()).norm() <= 1e-10);
        assert!((res.bracket_qp - r.point()).norm() <= 1e-10);
        assert!(res.residual <= 1e-10);
    }
}

#[test]
fn bracket_commutes_with_the_map() {
    let sys = TraceSurface { v: V };
    for (i, j) in close_pairs(0.1, 211).into_iter().take(40) {
        let (a, b) = (sampler8().get(i), sampler8().get(j));
        let x = bracket_point(&sys, &traced(i), &traced(j), 0.1).unwrap();
        assert!(x.residual <= 1e-10);
        let fa = PeriodicPoint { orbit: a.orbit.clone(), idx: a.orbit.index(a.idx as isize + 1) };
        let fb = PeriodicPoint { orbit: b.orbit.clone(), idx: b.orbit.index(b.idx as isize + 1) };
        let fp = Traced::from_periodic(&fa, PERIODIC_DEPTH);
        let fq = Traced::from_periodic(&fb, PERIODIC_DEPTH);
        let y = bracket_point(&sys, &fp, &fq, 1.0).unwrap();
        assert!((sys.step(&x.traced.point()) - y.traced.point()).norm() <= 1e-8);
    }
}

#[test]
fn far_pairs_are_rejected() {
    let sys = TraceSurface { v: V };
    let (p, q) = (traced(0), traced(1));
    let d = (p.point() - q.point()).norm();
    assert!(matches!(delta(&sys, &p, &q, d / 2.0, 1e-10), Err(quasitrace::Error::NoIntersection(_))));
}

#[test]
fn delta_vanishes_on_the_diagonal_and_unstable_leaves() {
    let sys = TraceSurface { v: V };
    let p = traced(11);
    let d = delta(&sys, &p, &p, 1e-2, 1e-12).unwrap();
    assert_eq!(d.value, 0.0);
    for (i, j) in close_pairs(0.05, 89).into_iter().take(10) {
        let p = traced(i);
        let r = bracket_point(&sys, &traced(j), &p, 0.1).unwrap().traced;
        let d = delta(&sys, &p, &r, 0.1, 1e-12).unwrap();
        assert!(d.value.abs() <= 1e-12, "{}", d.value);
    }
}

#[test]
fn delta_vanishes_for_the_cat_map() {
    let sys = CatMap;
    for k in 0..20 {
        let a = V3::new(0.1 + 0.037 * k as f64, 0.6 - 0.021 * k as f64, 0.0);
        let b = a + V3::new(0.004 * (k as f64 - 9.5), 0.003, 0.0);
        let p = Traced::from_point(&sys, a, 48, 8).unwrap();
        let q = Traced::from_point(&sys, b, 48, 8).unwrap();
        let d = delta(&sys, &p, &q, 0.1, 1e-8).unwrap();
        assert!(d.value.abs() <= 1e-8, "{}", d.value);
    }
}

#[test]
fn delta_is_symmetric_and_the_tail_bound_holds() {
    let sys = TraceSurface { v: V };
    for (i, j) in close_pairs(0.1, 53).into_iter().take(150) {
        let (p, q) = (traced(i), traced(j));
        let a = delta(&sys, &p, &q, 0.1, 1e-10).unwrap();
        let b = delta(&sys, &q, &p, 0.1, 1e-10).unwrap();
        assert!((a.value - b.value).abs() <= 1e-10);
        let fine = delta(&sys, &p, &q, 0.1, 1e-14).unwrap();
        assert!(fine.truncation >= a.truncation);
        assert!((fine.value - a.value).abs() <= a.tail_bound + 1e-14, "{} vs {}", (fine.value - a.value).abs(), a.tail_bound);
        assert_eq!(a.terms.len(), 2 * a.truncation + 1);
    }
}

/// (p, s, r) with s ∈ W^s(p), r ∈ W^u(p), all with full orbit segments.
fn triples(count: usize) -> Vec<(Traced, Traced, Traced)> {
    let sys = TraceSurface { v: V };
    let pairs = close_pairs(0.1, 1);
    let mut out = vec![];
    for &(i, j) in pairs.iter().step_by(131) {
        let Some(&(_, k)) = pairs.iter().find(|x| x.0 == i && x.1 != j) else { continue };
        let p = traced(i);
        let (Ok(s), Ok(r)) = (bracket_point(&sys, &p, &traced(j), 0.1), bracket_point(&sys, &traced(k), &p, 0.1)) else {
            continue;
        };
        out.push((p, s.traced, r.traced));
        if out.len() == count {
            break;
        }
    }
    out
}

#[test]
fn holonomy_is_trivial_at_the_base_point() {
    let sys = TraceSurface { v: V };
    let p = traced(3);
    let h = holonomy_distortion(&sys, &p, &p, 0.1, 1e-12).unwrap();
    assert_eq!(h.series, 0.0);
    assert!(h.finite_difference.abs() <= 1e-6);
}

#[test]
fn holonomy_series_matches_delta_plus_and_finite_differences() {
    let sys = TraceSurface { v: V };
    let ts = triples(20);
    assert!(ts.len() >= 10);
    for (p, s, r) in ts {
        let hp = holonomy_distortion(&sys, &s, &p, 0.2, 1e-12).unwrap();
        let hr = holonomy_distortion(&sys, &s, &r, 0.2, 1e-12).unwrap();
        assert!((hr.series - hr.finite_difference).abs() <= 1e-4 * (1.0 + hr.series.abs()));
        let w = bracket_point(&sys, &r, &s, 0.2).unwrap();
        let q = Traced::from_point(&sys, w.traced.point(), FREE_DEPTH, FREE_WARMUP).unwrap();
        let (dp, _) = delta_plus(&sys, &p, &q, 0.4, 1e-8).unwrap();
        assert!((dp - (hp.series - hr.series)).abs() <= 1e-6, "{dp} vs {}", hp.series - hr.series);
    }
}

#[test]
fn holonomy_is_trivial_for_the_cat_map() {
    let sys = CatMap;
    let p = Traced::from_point(&sys, V3::new(0.3, 0.4, 0.0), 48, 8).unwrap();
    let q = Traced::from_point(&sys, V3::new(0.31, 0.41, 0.0), 48, 8).unwrap();
    let s = bracket_point(&sys, &p, &q, 0.1).unwrap().traced;
    let r = bracket_point(&sys, &q, &p, 0.1).unwrap().traced;
    let h = holonomy_distortion(&sys, &s, &r, 0.1, 1e-8).unwrap();
    assert!(h.series.abs() <= 1e-12 && h.finite_difference.abs() <= 1e-6);
}

#[test]
fn stable_derivative_vanishes_at_the_base_and_for_the_cat_map() {
    let sys = TraceSurface { v: V };
    let p = traced(17);
    let d = stable_derivative_delta_plus(&sys, &p, &p, &default_h_grid(), 0.2).unwrap();
    assert!(d.value.abs() <= 1e-8, "{}", d.value);
    let cat = CatMap;
    let a = Traced::from_point(&cat, V3::new(0.3, 0.4, 0.0), 48, 8).unwrap();
    let b = Traced::from_point(&cat, V3::new(0.31, 0.41, 0.0), 48, 8).unwrap();
    let r = bracket_point(&cat, &b, &a, 0.1).unwrap().traced;
    assert_eq!(stable_derivative_delta_plus(&cat, &a, &r, &default_h_grid(), 0.2).unwrap().value, 0.0);
}

#[test]
fn stable_derivative_matches_quotients_along_the_horseshoe() {
    // Δ⁺_p([r, s]) / d(r, [r, s]) for s ∈ W^s(p) on the horseshoe itself
    let sys = TraceSurface { v: V };
    let smp = sampler10();
    let tr = |i: usize| Traced::from_periodic(&smp.get(i), PERIODIC_DEPTH);
    let pts = smp.points();
    let i0 = 17;
    let p = tr(i0);
    let mut close: Vec<(f64, usize)> =
        (0..pts.len()).filter(|&j| j != i0).map(|j| ((pts[j] - pts[i0]).norm(), j)).filter(|x| x.0 < 0.08).collect();
    close.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut checked = 0;
    for &(_, j) in close.iter().rev().take(4) {
        let r = bracket_point(&sys, &tr(j), &p, 0.1).unwrap().traced;
        let sd = stable_derivative_delta_plus(&sys, &p, &r, &default_h_grid(), 0.2).unwrap();
        let orient = extend_along(&sys, &r, Kind::Stable, 1e-6).point() - r.point();
        let mut best: Option<(f64, f64)> = None;
        for &(_, k) in &close {
            let Ok(s) = bracket_point(&sys, &p, &tr(k), 0.1) else { continue };
            let Ok(x) = bracket_point(&sys, &r, &s.traced, 0.2) else { continue };
            let dx = x.traced.point() - r.point();
            let dist = dx.norm();
            if dist < 1e-7 || best.is_some_and(|b| b.0 <= dist) {
                continue;
            }
            let (dp, _) = delta_plus(&sys, &p, &x.traced, 0.2, 1e-13).unwrap();
            best = Some((dist, dp / (dx.dot(&orient).signum() * dist)));
        }
        let (dist, quot) = best.unwrap();
        // the quotient carries an O(dist) bias
        assert!((sd.value - quot).abs() <= 1e-3 * sd.value.abs() + dist, "{} vs {quot} at {dist}", sd.value);
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn stable_derivative_modulus_is_reported() {
    let sys = TraceSurface { v: V };
    let pts = sampler8().points();
    let i0 = 17;
    let p = traced(i0);
    let mut rs = vec![];
    let mut vals = vec![];
    for j in 0..pts.len() {
        if j == i0 || (pts[j] - pts[i0]).norm() > 0.05 {
            continue;
        }
        let Ok(r) = bracket_point(&sys, &traced(j), &p, 0.1) else { continue };
        let sd = stable_derivative_delta_plus(&sys, &p, &r.traced, &default_h_grid(), 0.2).unwrap();
        rs.push(r.traced.point());
        vals.push(sd.value);
    }
    assert!(rs.len() >= 10);
    let m = modulus_of_continuity(&rs, &vals).unwrap();
    assert!(m.exponent.is_finite() && m.exponent < 1.0, "exponent {}", m.exponent);
}

#[test]
fn bad_step_grids_are_rejected() {
    let sys = TraceSurface { v: V };
    let p = traced(2);
    assert!(stable_derivative_delta_plus(&sys, &p, &p, &[1e-2, 3e-3, 1e-3], 0.2).is_err());
}

#[test]
fn periodic_counts_grow_exponentially() {
    let mut x = vec![];
    let mut y = vec![];
    for n in 2..=8 {
        let set = periodic_points(V, n, Workers(1)).unwrap();
        x.push(n as f64);
        y.push((set.n_points() as f64).ln());
    }
    let fit = linear_fit(&x, &y).unwrap();
    // f = T² doubles the golden-mean entropy
    assert!(fit.slope > 0.0);
    assert!((fit.slope - 2.0 * ((1.0 + 5f64.sqrt()) / 2.0).ln()).abs() < 0.1, "h_top {}", fit.slope);
}

#[test]
fn tau_averages_agree_across_caps() {
    let avg = |cap: usize| {
        let s = mme_sampler(V, cap, 1, Workers(1)).unwrap();
        let sum: f64 = s.set.orbits.iter().map(|o| o.log_multiplier).sum();
        sum / s.len() as f64
    };
    let (a, b) = (avg(8), avg(10));
    assert!((a - b).abs() <= 0.05 * a.abs(), "{a} vs {b}");
}

#[test]
fn sampler_is_deterministic() {
    let a = mme_sampler(V, 6, 9, Workers(1)).unwrap();
    let b = mme_sampler(V, 6, 9, Workers(4)).unwrap();
    assert_eq!(a.points(), b.points());
    let sa: Vec<V3> = a.stream(50).iter().map(|p| p.point()).collect();
    let sb: Vec<V3> = b.stream(50).iter().map(|p| p.point()).collect();
    assert_eq!(sa, sb);
}

#[test]
fn qnl_linear_control_is_degenerate() {
    let opts = QnlOptions::default();
    let (h, _) = qnl_exponent(QnlSystem::LinearTest, 1000, &default_sigma_grid(), 5, &opts, Workers(1)).unwrap();
    assert!(h.mass.iter().all(|m| *m == 1.0));
    assert!(h.degenerate && h.gamma_hat.is_none());
}

#[test]
fn qnl_of_a_uniform_variable_is_linear() {
    let opts = QnlOptions::default();
    let sigma: Vec<f64> = (1..=8).map(|k| 2f64.powi(-k)).collect();
    let (h, _) = qnl_exponent(QnlSystem::SyntheticUniform, 100_000, &sigma, 5, &opts, Workers(1)).unwrap();
    let g = h.gamma_hat.unwrap();
    assert!((g - 1.0).abs() <= 0.1, "{g}");
    assert!(h.mass.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn qnl_needs_pairs_in_the_smallest_bin() {
    let opts = QnlOptions::default();
    let sigma = vec![1e-3, 1e-9];
    let r = qnl_exponent(QnlSystem::SyntheticUniform, 1000, &sigma, 5, &opts, Workers(1));
    assert!(matches!(r, Err(quasitrace::Error::InsufficientPairs { .. })));
}

#[test]
fn qnl_on_the_trace_map_decays() {
    let opts = QnlOptions { period_cap: 8, ..Default::default() };
    let sigma: Vec<f64> = (4..=10).map(|k| 2f64.powi(-k)).collect();
    let (h, pairs) = qnl_exponent(QnlSystem::TraceMap { v: V }, 3000, &sigma, 2, &opts, Workers(1)).unwrap();
    assert_eq!(pairs.len(), 3000);
    assert!(pairs.iter().all(|p| p.distance <= opts.radius && p.distance > 0.0));
    assert!(h.gamma_hat.unwrap() > 0.0);
    assert!(h.mass.windows(2).all(|w| w[1] <= w[0]));
}
