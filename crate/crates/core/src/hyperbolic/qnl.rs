//! Empirical non-concentration of Δ: the μ⊗μ mass of {|Δ| ≤ σ} on a grid of
//! scales, with a log–log fit of the decay exponent.

use rand::Rng;
use serde::Serialize;

use super::delta::delta;
use super::manifold::{Traced, PERIODIC_DEPTH};
use super::periodic::{mme_sampler, MmeSampler};
use super::system::{CatMap, TraceSurface, V3};
use crate::error::{Error, Result};
use crate::par::{map_indexed, task_rng, Workers};
use crate::stats::linear_fit;

/// Orbit length for the linear control, whose points are not periodic.
const LINEAR_DEPTH: usize = 48;
/// Candidate pairs evaluated per batch.
const BATCH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum QnlSystem {
    /// Trace map on S_V, pairs from the periodic-orbit sampler.
    TraceMap { v: f64 },
    /// Cat map on the plane, pairs uniform in the unit square.
    LinearTest,
    /// Δ replaced by a uniform variable on [−1, 1].
    SyntheticUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QnlOptions {
    pub period_cap: usize,
    /// Pairs farther apart than this are rejected.
    pub radius: f64,
    /// Tail tolerance for each Δ.
    pub tol: f64,
    /// Pairs required with |Δ| below the smallest σ.
    pub min_smallest_bin: usize,
    /// Rejection draws allowed per requested pair.
    pub max_draws_per_pair: usize,
}

impl Default for QnlOptions {
    fn default() -> Self {
        Self { period_cap: 12, radius: 0.1, tol: 1e-10, min_smallest_bin: 100, max_draws_per_pair: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairDelta {
    pub p: V3,
    pub q: V3,
    pub distance: f64,
    pub delta: f64,
    pub tail_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QnlHistogram {
    pub system: QnlSystem,
    pub seed: u64,
    pub n_pairs: usize,
    pub radius: f64,
    pub sigma: Vec<f64>,
    pub mass: Vec<f64>,
    /// None when fewer than two non-saturated masses remain.
    pub gamma_hat: Option<f64>,
    pub r2: Option<f64>,
    pub degenerate: bool,
    /// Grid points entering the fit (0 < mass < 1).
    pub fit_points: usize,
    /// Pairs within the radius whose Δ failed (bracket or tail).
    pub failures: usize,
}

/// σ = 2⁻⁴, …, 2⁻¹⁴.
pub fn default_sigma_grid() -> Vec<f64> {
    (4..=14).map(|k| 2f64.powi(-k)).collect()
}

/// Masses on a decreasing σ grid and the fit over non-saturated entries.
pub fn histogram(system: QnlSystem, seed: u64, radius: f64, sigma: &[f64], deltas: &[f64], failures: usize) -> QnlHistogram {
    let n = deltas.len();
    let mass: Vec<f64> = sigma
        .iter()
        .map(|s| deltas.iter().filter(|d| d.abs() <= *s).count() as f64 / n.max(1) as f64)
        .collect();
    let fit: Vec<(f64, f64)> = sigma
        .iter()
        .zip(&mass)
        .filter(|(_, m)| **m > 0.0 && **m < 1.0)
        .map(|(s, m)| (s.ln(), m.ln()))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = fit.iter().cloned().unzip();
    let line = linear_fit(&x, &y).filter(|l| l.r2.is_finite());
    QnlHistogram {
        system,
        seed,
        n_pairs: n,
        radius,
        sigma: sigma.to_vec(),
        mass,
        gamma_hat: line.map(|l| l.slope),
        r2: line.map(|l| l.r2),
        degenerate: line.is_none(),
        fit_points: fit.len(),
        failures,
    }
}

fn check_grid(sigma: &[f64]) -> Result<()> {
    if sigma.is_empty() || sigma.iter().any(|s| !(*s > 0.0)) || sigma.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("sigma grid must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// Evaluates candidates in index-ordered batches until `n_pairs` succeed.
/// `draw(i)` returns the i-th candidate or None if it is rejected.
fn collect<D, E>(n_pairs: usize, max_draws: usize, workers: Workers, draw: D, eval: E) -> Result<(Vec<PairDelta>, usize)>
where
    D: Fn(usize) -> Option<(V3, V3, usize, usize)> + Sync + Send,
    E: Fn(usize, usize) -> Result<PairDelta> + Sync + Send,
{
    let mut out = Vec::with_capacity(n_pairs);
    let mut failures = 0;
    let mut next = 0;
    let mut seen = 0;
    while out.len() < n_pairs {
        if seen >= max_draws {
            return Err(Error::InsufficientPairs { found: out.len(), needed: n_pairs });
        }
        let res = map_indexed(workers, BATCH, |k| {
            let (_, _, i, j) = draw(next + k)?;
            Some(eval(i, j))
        });
        next += BATCH;
        seen += BATCH;
        for r in res.into_iter().flatten() {
            if out.len() == n_pairs {
                break;
            }
            match r {
                Ok(x) => out.push(x),
                Err(_) => failures += 1,
            }
        }
    }
    Ok((out, failures))
}

/// Δ over `n_pairs` pairs of the periodic sampler within `opts.radius`.
pub fn trace_map_pairs(
    sampler: &MmeSampler,
    n_pairs: usize,
    seed: u64,
    opts: &QnlOptions,
    workers: Workers,
) -> Result<(Vec<PairDelta>, usize)> {
    let sys = TraceSurface { v: sampler.set.v };
    let pts = sampler.points();
    let m = pts.len();
    let radius = opts.radius;
    let draw = |i: usize| {
        let mut rng = task_rng(seed, i as u64);
        let a = rng.gen_range(0..m);
        let b = rng.gen_range(0..m);
        // the diagonal atom is an artefact of the periodic approximation
        let d = (pts[a] - pts[b]).norm();
        (a != b && d <= radius).then_some((pts[a], pts[b], a, b))
    };
    let eval = |a: usize, b: usize| {
        let p = Traced::from_periodic(&sampler.get(a), PERIODIC_DEPTH);
        let q = Traced::from_periodic(&sampler.get(b), PERIODIC_DEPTH);
        let dv = delta(&sys, &p, &q, radius, opts.tol)?;
        Ok(PairDelta { p: dv.p, q: dv.q, distance: (dv.p - dv.q).norm(), delta: dv.value, tail_bound: dv.tail_bound })
    };
    collect(n_pairs, n_pairs.saturating_mul(opts.max_draws_per_pair), workers, draw, eval)
}

/// Cat-map pairs: p uniform in the unit square, q uniform in the disc of
/// radius `opts.radius` around p.
pub fn linear_pairs(n_pairs: usize, seed: u64, opts: &QnlOptions, workers: Workers) -> Result<(Vec<PairDelta>, usize)> {
    let sys = CatMap;
    let radius = opts.radius;
    let point = |i: usize| {
        let mut rng = task_rng(seed, i as u64);
        let p = V3::new(rng.gen::<f64>(), rng.gen::<f64>(), 0.0);
        let (r, a): (f64, f64) = (radius * rng.gen::<f64>().sqrt(), std::f64::consts::TAU * rng.gen::<f64>());
        (p, p + V3::new(r * a.cos(), r * a.sin(), 0.0))
    };
    let draw = |i: usize| {
        let (p, q) = point(i);
        Some((p, q, i, i))
    };
    let eval = |i: usize, _: usize| {
        let (a, b) = point(i);
        let p = Traced::from_point(&sys, a, LINEAR_DEPTH, 8)?;
        let q = Traced::from_point(&sys, b, LINEAR_DEPTH, 8)?;
        let dv = delta(&sys, &p, &q, radius, opts.tol)?;
        Ok(PairDelta { p: a, q: b, distance: (a - b).norm(), delta: dv.value, tail_bound: dv.tail_bound })
    };
    collect(n_pairs, n_pairs.saturating_mul(4), workers, draw, eval)
}

/// QNL histogram for `system`. Fails with InsufficientPairs when fewer than
/// `opts.min_smallest_bin` pairs land below the smallest σ.
pub fn qnl_exponent(
    system: QnlSystem,
    n_pairs: usize,
    sigma: &[f64],
    seed: u64,
    opts: &QnlOptions,
    workers: Workers,
) -> Result<(QnlHistogram, Vec<PairDelta>)> {
    check_grid(sigma)?;
    if n_pairs == 0 {
        return Err(Error::InvalidInput("n_pairs must be positive".into()));
    }
    let (pairs, failures) = match system {
        QnlSystem::TraceMap { v } => {
            let s = mme_sampler(v, opts.period_cap, seed, workers)?;
            trace_map_pairs(&s, n_pairs, seed, opts, workers)?
        }
        QnlSystem::LinearTest => linear_pairs(n_pairs, seed, opts, workers)?,
        QnlSystem::SyntheticUniform => {
            let pairs = (0..n_pairs)
                .map(|i| {
                    let x = task_rng(seed, i as u64).gen_range(-1.0..=1.0);
                    PairDelta { p: V3::zeros(), q: V3::zeros(), distance: 0.0, delta: x, tail_bound: 0.0 }
                })
                .collect();
            (pairs, 0)
        }
    };
    let deltas: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
    let smallest = sigma[sigma.len() - 1];
    let found = deltas.iter().filter(|d| d.abs() <= smallest).count();
    if found < opts.min_smallest_bin {
        return Err(Error::InsufficientPairs { found, needed: opts.min_smallest_bin });
    }
    Ok((histogram(system, seed, opts.radius, sigma, &deltas, failures), pairs))
}
