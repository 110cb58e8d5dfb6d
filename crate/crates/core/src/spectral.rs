//! Fibonacci Hamiltonian: spectrum via the trace recursion, density of
//! states, phase-averaged return amplitudes and power-law decay fits.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, task_rng, Workers};
use crate::stats::linear_fit;
use crate::trace_map::{apply_t, TraceMapPoint};
use crate::tridiag;

/// (√5 − 1)/2
pub const ALPHA0: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub v: f64,
    pub omega: f64,
    pub alpha0: f64,
    pub n_sites: usize,
}

impl HamiltonianSpec {
    pub fn new(v: f64, omega: f64, n_sites: usize) -> Self {
        Self { v, omega, alpha0: ALPHA0, n_sites }
    }

    /// V·χ[1−α, 1)(nα + ω mod 1) at lattice site `n`.
    pub fn potential(&self, n: i64) -> f64 {
        let s = (n as f64 * self.alpha0 + self.omega).rem_euclid(1.0);
        if s >= 1.0 - self.alpha0 {
            self.v
        } else {
            0.0
        }
    }

    /// Lattice site of matrix row 0; row `n_sites/2` is the origin.
    pub fn first_site(&self) -> i64 {
        -((self.n_sites / 2) as i64)
    }

    pub fn center(&self) -> usize {
        self.n_sites / 2
    }

    /// Dirichlet truncation as (diagonal, off-diagonal).
    pub fn tridiagonal(&self) -> (Vec<f64>, Vec<f64>) {
        let n0 = self.first_site();
        let d = (0..self.n_sites).map(|i| self.potential(n0 + i as i64)).collect();
        (d, vec![1.0; self.n_sites.saturating_sub(1)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeParams {
    pub radius: f64,
    pub max_iter: usize,
}

impl Default for EscapeParams {
    fn default() -> Self {
        Self { radius: 10.0, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrbitClass {
    Bounded,
    Escaped { at: usize },
}

/// Runs T from ((E−V)/2, E/2, 1). Escape means some coordinate left the
/// radius while the max-coordinate kept growing three steps in a row.
pub fn trace_orbit(e: f64, v: f64, max_iter: usize, radius: f64) -> OrbitClass {
    let mut p = TraceMapPoint::new((e - v) / 2.0, e / 2.0, 1.0);
    let mut prev = p.max_abs();
    let mut rising = 0;
    for k in 1..=max_iter {
        p = apply_t(p);
        let m = p.max_abs();
        if !m.is_finite() {
            return OrbitClass::Escaped { at: k };
        }
        rising = if m > prev { rising + 1 } else { 0 };
        prev = m;
        if m > radius && rising >= 3 {
            return OrbitClass::Escaped { at: k };
        }
    }
    OrbitClass::Bounded
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCover {
    pub v: f64,
    pub intervals: Vec<[f64; 2]>,
    pub resolution: f64,
    pub escape_params: EscapeParams,
}

impl SpectrumCover {
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|[a, b]| b - a).sum()
    }

    pub fn contains(&self, e: f64, pad: f64) -> bool {
        let i = self.intervals.partition_point(|iv| iv[1] + pad < e);
        i < self.intervals.len() && self.intervals[i][0] - pad <= e
    }

    pub fn distance(&self, e: f64) -> f64 {
        let i = self.intervals.partition_point(|iv| iv[1] < e);
        let mut d = f64::INFINITY;
        if i < self.intervals.len() {
            d = d.min((self.intervals[i][0] - e).max(0.0));
        }
        if i > 0 {
            d = d.min(e - self.intervals[i - 1][1]);
        }
        d
    }
}

// Closed interval with a few ulps of outward slack per operation.
#[derive(Clone, Copy)]
struct Iv(f64, f64);

impl Iv {
    fn widen(lo: f64, hi: f64) -> Iv {
        let s = 4.0 * f64::EPSILON;
        Iv(lo - s * lo.abs() - f64::MIN_POSITIVE, hi + s * hi.abs() + f64::MIN_POSITIVE)
    }
    fn point(x: f64) -> Iv {
        Iv::widen(x, x)
    }
    fn add(self, o: Iv) -> Iv {
        Iv::widen(self.0 + o.0, self.1 + o.1)
    }
    fn sub(self, o: Iv) -> Iv {
        Iv::widen(self.0 - o.1, self.1 - o.0)
    }
    fn mul(self, o: Iv) -> Iv {
        let c = [self.0 * o.0, self.0 * o.1, self.1 * o.0, self.1 * o.1];
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Iv::widen(lo, hi)
    }
    fn twice(self) -> Iv {
        Iv(2.0 * self.0, 2.0 * self.1)
    }
    fn meet(self, o: Iv) -> Iv {
        Iv(self.0.max(o.0), self.1.min(o.1))
    }
    fn mig(self) -> f64 {
        if self.0 > 0.0 {
            self.0
        } else if self.1 < 0.0 {
            -self.1
        } else {
            0.0
        }
    }
    fn width(self) -> f64 {
        self.1 - self.0
    }
}

/// True when every energy in [lo, hi] provably lies in a gap: two
/// consecutive half-traces exceed 1 in modulus, which forces escape.
///
/// Half-traces are enclosed by the naive interval extension intersected with
/// the mean-value form around the midpoint, which stays tight much longer.
fn certified_gap(lo: f64, hi: f64, v: f64, max_iter: usize) -> bool {
    let m = 0.5 * (lo + hi);
    let rad = Iv(-(0.5 * (hi - lo)), 0.5 * (hi - lo));
    // (x_{k-2}, x_{k-1}, x_k): enclosure, derivative enclosure, value at m
    let mut z = (Iv(1.0, 1.0), Iv(0.0, 0.0), Iv(1.0, 1.0));
    let mut y = (Iv::widen(lo / 2.0, hi / 2.0), Iv(0.5, 0.5), Iv::point(m / 2.0));
    let mut x = (Iv::widen((lo - v) / 2.0, (hi - v) / 2.0), Iv(0.5, 0.5), Iv::point((m - v) / 2.0));
    if y.0.mig() > 1.0 && x.0.mig() > 1.0 {
        return true;
    }
    for _ in 0..max_iter {
        let naive = x.0.mul(y.0).twice().sub(z.0);
        let d = x.1.mul(y.0).add(x.0.mul(y.1)).twice().sub(z.1);
        let c = x.2.mul(y.2).twice().sub(z.2);
        let enc = naive.meet(c.add(d.mul(rad)));
        z = y;
        y = x;
        x = (enc, d, c);
        if x.0.mig() > 1.0 && y.0.mig() > 1.0 {
            return true;
        }
        if x.0.width() > 1e6 || !x.0.width().is_finite() {
            return false;
        }
    }
    false
}

pub const DEFAULT_COVER_NODE_CAP: usize = 5_000_000;

/// Adaptive bisection of [−2−V, 2+V]. Subintervals certified to lie in a gap
/// are dropped; the rest are split down to `resolution` and kept.
pub fn spectrum_cover(v: f64, resolution: f64, escape: EscapeParams) -> Result<SpectrumCover> {
    spectrum_cover_capped(v, resolution, escape, DEFAULT_COVER_NODE_CAP)
}

pub fn spectrum_cover_capped(
    v: f64,
    resolution: f64,
    escape: EscapeParams,
    node_cap: usize,
) -> Result<SpectrumCover> {
    if !(resolution > 0.0) || !(v >= 0.0) {
        return Err(Error::InvalidInput("cover needs resolution > 0 and V >= 0".into()));
    }
    let mut stack = vec![(-2.0 - v, 2.0 + v)];
    let mut kept: Vec<[f64; 2]> = Vec::new();
    let mut nodes = 0usize;
    while let Some((a, b)) = stack.pop() {
        nodes += 1;
        if nodes > node_cap {
            return Err(Error::BudgetExceeded { what: "spectrum cover nodes", needed: nodes, cap: node_cap });
        }
        if certified_gap(a, b, v, escape.max_iter) {
            continue;
        }
        if b - a <= resolution {
            kept.push([a, b]);
            continue;
        }
        let m = 0.5 * (a + b);
        // right half first so the left one is popped next
        stack.push((m, b));
        stack.push((a, m));
    }
    let mut merged: Vec<[f64; 2]> = Vec::with_capacity(kept.len());
    for iv in kept {
        match merged.last_mut() {
            Some(last) if last[1] >= iv[0] => last[1] = last[1].max(iv[1]),
            _ => merged.push(iv),
        }
    }
    Ok(SpectrumCover { v, intervals: merged, resolution, escape_params: escape })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DosMethod {
    Eigencount,
    TraceMapCover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosHistogram {
    pub v: f64,
    pub bin_edges: Vec<f64>,
    pub masses: Vec<f64>,
    pub method: DosMethod,
}

impl DosHistogram {
    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Equispaced phases with one seed-derived offset.
pub fn phase_grid(n_phases: usize, seed: u64) -> Vec<f64> {
    let jitter: f64 = task_rng(seed, 0).gen();
    (0..n_phases).map(|j| (j as f64 + jitter) / n_phases as f64).collect()
}

pub fn dos_histogram(
    v: f64,
    n_sites: usize,
    n_phases: usize,
    bins: usize,
    seed: u64,
    workers: Workers,
) -> Result<DosHistogram> {
    if n_sites < 64 || n_phases == 0 || bins == 0 {
        return Err(Error::InvalidInput("dos needs n_sites >= 64, n_phases >= 1, bins >= 1".into()));
    }
    let (lo, hi) = (-2.0 - v, 2.0 + v);
    let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let phases = phase_grid(n_phases, seed);
    let counts = map_indexed(workers, n_phases, |j| {
        let (d, o) = HamiltonianSpec::new(v, phases[j], n_sites).tridiagonal();
        let mut c = Vec::with_capacity(bins + 1);
        c.push(0usize);
        for e in &edges[1..bins] {
            c.push(tridiag::count_below(&d, &o, *e));
        }
        c.push(n_sites);
        c
    });
    let mut masses = vec![0.0; bins];
    let norm = 1.0 / (n_sites as f64 * n_phases as f64);
    for c in &counts {
        for b in 0..bins {
            masses[b] += (c[b + 1] - c[b]) as f64 * norm;
        }
    }
    Ok(DosHistogram { v, bin_edges: edges, masses, method: DosMethod::Eigencount })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub times: Vec<f64>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub n_phases: usize,
}

impl CorrelationSeries {
    pub fn modulus(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn value(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }
}

fn is_uniform(times: &[f64]) -> Option<f64> {
    if times.len() < 3 {
        return None;
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return None;
    }
    let ok = times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt + 8.0 * f64::EPSILON * w[1].abs());
    ok.then_some(dt)
}

/// Σ_j w_j e^{−i t E_j} on the grid. Uniform grids use a phasor recurrence
/// re-anchored every 256 steps.
pub fn spectral_sum(energies: &[f64], weights: &[f64], times: &[f64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); times.len()];
    if let Some(dt) = is_uniform(times) {
        let t0 = times[0];
        for (e, w) in energies.iter().zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let step = Complex64::from_polar(1.0, -e * dt);
            let mut cur = Complex64::from_polar(*w, -e * t0);
            for (k, slot) in out.iter_mut().enumerate() {
                if k % 256 == 0 && k > 0 {
                    cur = Complex64::from_polar(*w, -e * (t0 + k as f64 * dt));
                }
                *slot += cur;
                cur *= step;
            }
        }
    } else {
        for (e, w) in energies.iter().zip(weights) {
            for (slot, t) in out.iter_mut().zip(times) {
                *slot += Complex64::from_polar(*w, -e * t);
            }
        }
    }
    out
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("times must be sorted and nonnegative".into()));
    }
    Ok(())
}

/// ⟨δ₀, e^{−itH} δ₀⟩ averaged over the given phases.
pub fn correlation_over_phases(
    v: f64,
    times: &[f64],
    n_sites: usize,
    phases: &[f64],
    workers: Workers,
) -> Result<CorrelationSeries> {
    check_times(times)?;
    let t_max = *times.last().unwrap();
    if (n_sites as f64) < 4.0 * t_max + 64.0 {
        return Err(Error::TruncationTooSmall { n_sites, t_max });
    }
    if phases.is_empty() {
        return Err(Error::InvalidInput("need at least one phase".into()));
    }
    let per_phase = map_indexed(workers, phases.len(), |j| -> Result<Vec<Complex64>> {
        let h = HamiltonianSpec::new(v, phases[j], n_sites);
        let (d, o) = h.tridiagonal();
        let eig = tridiag::eigen(&d, &o, Some(h.center()))?;
        Ok(spectral_sum(&eig.values, &eig.weights, times))
    });
    let mut acc = vec![Complex64::new(0.0, 0.0); times.len()];
    for r in per_phase {
        for (a, b) in acc.iter_mut().zip(r?) {
            *a += b;
        }
    }
    let k = 1.0 / phases.len() as f64;
    Ok(CorrelationSeries {
        times: times.to_vec(),
        re: acc.iter().map(|c| c.re * k).collect(),
        im: acc.iter().map(|c| c.im * k).collect(),
        n_phases: phases.len(),
    })
}

pub fn phase_averaged_correlation(
    v: f64,
    times: &[f64],
    n_sites: usize,
    n_phases: usize,
    seed: u64,
    workers: Workers,
) -> Result<CorrelationSeries> {
    if n_phases == 0 {
        return Err(Error::InvalidInput("n_phases must be positive".into()));
    }
    correlation_over_phases(v, times, n_sites, &phase_grid(n_phases, seed), workers)
}

/// Σ_b mass_b e^{−itE_b} over bin centers.
pub fn fourier_of_dos(dos: &DosHistogram, times: &[f64]) -> CorrelationSeries {
    let vals = spectral_sum(&dos.centers(), &dos.masses, times);
    CorrelationSeries {
        times: times.to_vec(),
        re: vals.iter().map(|c| c.re).collect(),
        im: vals.iter().map(|c| c.im).collect(),
        n_phases: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rho_hat: f64,
    pub c_hat: f64,
    pub fit_window: [f64; 2],
    pub r2: f64,
    pub n_points: usize,
}

pub const MIN_ENVELOPE_POINTS: usize = 20;

/// Envelope points: local maxima of |value| in the window that also exceed
/// every later value in the window.
pub fn envelope_points(series: &CorrelationSeries, window: [f64; 2]) -> Vec<(f64, f64)> {
    let m = series.modulus();
    let idx: Vec<usize> =
        (0..m.len()).filter(|&i| series.times[i] >= window[0] && series.times[i] <= window[1]).collect();
    let mut pts = Vec::new();
    let mut running = f64::NEG_INFINITY;
    for w in (1..idx.len().saturating_sub(1)).rev() {
        let (a, b, c) = (m[idx[w - 1]], m[idx[w]], m[idx[w + 1]]);
        running = running.max(c);
        if b >= a && b > c && b > running && b > 0.0 {
            pts.push((series.times[idx[w]], b));
        }
        running = running.max(b);
    }
    pts.reverse();
    pts
}

/// Least squares of ln|envelope| against ln t.
pub fn fit_decay(series: &CorrelationSeries, window: [f64; 2]) -> Result<DecayFit> {
    if !(window[0] > 0.0 && window[1] > window[0]) {
        return Err(Error::InvalidInput("fit window must satisfy 0 < t_min < t_max".into()));
    }
    let (first, last) = (series.times.first(), series.times.last());
    if first.is_none() || window[0] < *first.unwrap() || window[1] > *last.unwrap() {
        return Err(Error::InvalidInput("fit window outside the series".into()));
    }
    let pts = envelope_points(series, window);
    if pts.len() < MIN_ENVELOPE_POINTS {
        return Err(Error::InsufficientEnvelope { found: pts.len(), needed: MIN_ENVELOPE_POINTS });
    }
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let fit = linear_fit(&lx, &ly).ok_or_else(|| Error::NonConvergence("degenerate envelope".into()))?;
    Ok(DecayFit { rho_hat: -fit.slope, c_hat: fit.intercept.exp(), fit_window: window, r2: fit.r2, n_points: pts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fib_word(len: usize) -> Vec<u8> {
        let mut w = vec![1u8];
        while w.len() < len {
            w = w.iter().flat_map(|&c| if c == 1 { vec![1, 0] } else { vec![1] }).collect();
        }
        w.truncate(len);
        w
    }

    #[test]
    fn potential_is_the_substitution_word() {
        let h = HamiltonianSpec::new(1.0, 0.0, 64);
        let w = fib_word(987);
        for (n, c) in w.iter().enumerate() {
            assert_eq!(h.potential(n as i64 + 1), *c as f64, "site {}", n + 1);
        }
    }

    #[test]
    fn trace_orbit_free_case() {
        assert_eq!(trace_orbit(0.0, 0.0, 10_000, 10.0), OrbitClass::Bounded);
        assert!(matches!(trace_orbit(3.0, 0.0, 10_000, 10.0), OrbitClass::Escaped { .. }));
    }

    #[test]
    fn free_cover_is_one_interval() {
        let c = spectrum_cover(0.0, 1e-3, EscapeParams::default()).unwrap();
        assert_eq!(c.intervals.len(), 1);
        assert!((c.intervals[0][0] + 2.0).abs() <= 1e-3);
        assert!((c.intervals[0][1] - 2.0).abs() <= 1e-3);
    }

    #[test]
    fn cover_budget() {
        let r = spectrum_cover_capped(0.5, 1e-6, EscapeParams::default(), 100);
        assert!(matches!(r, Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn fourier_trivial_cases() {
        let point = DosHistogram { v: 0.0, bin_edges: vec![-0.5, 0.5], masses: vec![1.0], method: DosMethod::Eigencount };
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.3).collect();
        let s = fourier_of_dos(&point, &times);
        for i in 0..times.len() {
            assert_relative_eq!(s.re[i], 1.0, epsilon = 1e-12);
            assert!(s.im[i].abs() < 1e-12);
        }
        let two = DosHistogram {
            v: 0.0,
            bin_edges: vec![-1.5, -0.5, 0.5, 1.5],
            masses: vec![0.5, 0.0, 0.5],
            method: DosMethod::Eigencount,
        };
        let s = fourier_of_dos(&two, &times);
        for (i, t) in times.iter().enumerate() {
            assert_relative_eq!(s.re[i], t.cos(), epsilon = 1e-12);
            assert!(s.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn recurrence_matches_direct_sum() {
        let e = [-1.7, 0.3, 1.1];
        let w = [0.2, 0.5, 0.3];
        let uniform: Vec<f64> = (0..2000).map(|i| i as f64 * 0.37).collect();
        let mut jittered = uniform.clone();
        jittered[5] += 1e-3;
        let a = spectral_sum(&e, &w, &uniform);
        let b = spectral_sum(&e, &w, &jittered);
        for i in (0..2000).filter(|&i| i != 5) {
            assert!((a[i] - b[i]).norm() < 1e-11);
        }
    }

    #[test]
    fn synthetic_power_law() {
        let times: Vec<f64> = (1..=20_000).map(|i| i as f64 * 0.05).collect();
        let re: Vec<f64> = times.iter().map(|t| 2.0 * t.powf(-0.5) * (3.0 * t).cos()).collect();
        let im: Vec<f64> = times.iter().map(|t| 2.0 * t.powf(-0.5) * (3.0 * t).sin()).collect();
        let mut s = CorrelationSeries { times, re, im, n_phases: 1 };
        // pure modulus has no local maxima; add a ripple to create them
        for i in 0..s.re.len() {
            let r = 1.0 + 1e-3 * (7.0 * s.times[i]).cos();
            s.re[i] *= r;
            s.im[i] *= r;
        }
        let fit = fit_decay(&s, [10.0, 900.0]).unwrap();
        assert!((fit.rho_hat - 0.5).abs() < 1e-3, "{}", fit.rho_hat);
        assert!((fit.c_hat - 2.002).abs() < 1e-2);
    }

    #[test]
    fn too_few_maxima() {
        let times: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let re: Vec<f64> = times.iter().map(|t| 1.0 / t).collect();
        let s = CorrelationSeries { im: vec![0.0; 100], times, re, n_phases: 1 };
        assert!(matches!(fit_decay(&s, [2.0, 90.0]), Err(Error::InsufficientEnvelope { .. })));
    }

    #[test]
    fn light_cone_guard() {
        let r = phase_averaged_correlation(0.0, &[0.0, 100.0], 256, 1, 0, Workers(1));
        assert!(matches!(r, Err(Error::TruncationTooSmall { .. })));
    }

    #[test]
    fn dos_mass_is_one() {
        let d = dos_histogram(0.3, 256, 3, 40, 7, Workers(1)).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-12);
    }
}
