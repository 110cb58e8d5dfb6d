//! Transfer operators for coded expanding interval maps.
//!
//! A system is a finite alphabet of disjoint intervals I_a with expanding
//! branches F_a : I_a → ∪ I_b, an adjacency matrix and a potential. Words
//! a₁…a_{n+1} are admissible when consecutive symbols are, and the cylinder
//! U_a = g_{a₁}∘…∘g_{a_n}(I_{a_{n+1}}) uses the inverse branches g_a = F_a⁻¹.
//!
//! Eigenfunctions are stored as node values on a uniform grid per symbol and
//! read back with piecewise cubic interpolation.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::linear_fit;

pub type Map1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// φ(a, b, y) for y in the two-cylinder [ab] ⊂ I_a.
pub type Potential = Arc<dyn Fn(usize, usize, f64) -> f64 + Send + Sync>;

pub const GRID_POINTS: usize = 257;
pub const DEFAULT_WORD_CAP: usize = 1 << 24;

#[derive(Clone)]
pub struct Branch {
    pub interval: [f64; 2],
    pub forward: Map1,
    pub dforward: Map1,
    /// F_a⁻¹, defined on the union of the images.
    pub inverse: Map1,
}

impl Branch {
    pub fn linear(interval: [f64; 2], slope: f64) -> Self {
        let lo = interval[0];
        Branch {
            interval,
            forward: Arc::new(move |x| slope * (x - lo)),
            dforward: Arc::new(move |_| slope),
            inverse: Arc::new(move |y| lo + y / slope),
        }
    }

    /// Inverse by safeguarded Newton on a monotone forward map.
    pub fn from_forward(interval: [f64; 2], forward: Map1, dforward: Map1) -> Self {
        let (f, df) = (forward.clone(), dforward.clone());
        let inverse: Map1 = Arc::new(move |y| invert_monotone(&*f, &*df, interval, y));
        Branch { interval, forward, dforward, inverse }
    }
}

fn invert_monotone(f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> f64, iv: [f64; 2], y: f64) -> f64 {
    let (mut lo, mut hi) = (iv[0], iv[1]);
    let increasing = f(hi) > f(lo);
    let span = hi - lo;
    let mut u = lo + span * ((y - f(lo)) / (f(hi) - f(lo))).clamp(0.0, 1.0);
    for _ in 0..100 {
        let r = f(u) - y;
        if r == 0.0 {
            return u;
        }
        if (r > 0.0) == increasing {
            hi = hi.min(u);
        } else {
            lo = lo.max(u);
        }
        let step = r / df(u);
        let next = u - step;
        let next = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if (next - u).abs() <= 1e-16 * span.max(u.abs()) {
            return next;
        }
        u = next;
    }
    u
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    lo: f64,
    hi: f64,
    n: usize,
}

impl Grid {
    fn node(&self, j: usize) -> f64 {
        self.lo + (self.hi - self.lo) * j as f64 / (self.n - 1) as f64
    }

    /// Four-point Lagrange stencil around x.
    fn stencil(&self, x: f64) -> (usize, [f64; 4]) {
        let h = (self.hi - self.lo) / (self.n - 1) as f64;
        let s = (x - self.lo) / h;
        let i = (s.floor() as isize).clamp(1, self.n as isize - 3) as usize;
        let t = s - (i - 1) as f64;
        let w = [
            -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0,
            t * (t - 2.0) * (t - 3.0) / 2.0,
            -t * (t - 1.0) * (t - 3.0) / 2.0,
            t * (t - 1.0) * (t - 2.0) / 6.0,
        ];
        (i - 1, w)
    }

    fn eval(&self, vals: &[f64], x: f64) -> f64 {
        let (s, w) = self.stencil(x);
        w[0] * vals[s] + w[1] * vals[s + 1] + w[2] * vals[s + 2] + w[3] * vals[s + 3]
    }
}

/// Perron data of the operator a system was normalized from, plus the
/// invariant measure as quadrature weights on the symbol grids.
pub struct Normalization {
    pub rho: f64,
    grids: Vec<Grid>,
    pub h: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
}

impl Normalization {
    pub fn nodes(&self, a: usize) -> Vec<f64> {
        (0..self.grids[a].n).map(|j| self.grids[a].node(j)).collect()
    }

    pub fn eigenfunction(&self, a: usize, x: f64) -> f64 {
        self.grids[a].eval(&self.h[a], x)
    }
}

#[derive(Clone)]
pub struct MarkovSystem {
    pub name: String,
    pub branches: Vec<Branch>,
    pub adjacency: Vec<Vec<bool>>,
    pub potential: Potential,
    pub normalization: Option<Arc<Normalization>>,
}

impl std::fmt::Debug for MarkovSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarkovSystem")
            .field("name", &self.name)
            .field("intervals", &self.branches.iter().map(|b| b.interval).collect::<Vec<_>>())
            .field("adjacency", &self.adjacency)
            .field("normalized", &self.normalization.is_some())
            .finish()
    }
}

impl MarkovSystem {
    pub fn new(name: &str, branches: Vec<Branch>, adjacency: Vec<Vec<bool>>, potential: Potential) -> Result<Self> {
        let k = branches.len();
        if k == 0 || adjacency.len() != k || adjacency.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("adjacency must be square and match the alphabet".into()));
        }
        let sys = MarkovSystem { name: name.into(), branches, adjacency, potential, normalization: None };
        if !sys.is_mixing() {
            return Err(Error::InvalidInput("adjacency is not topologically mixing".into()));
        }
        if !(sys.kappa() < 1.0) {
            return Err(Error::InvalidInput("inverse branches must contract".into()));
        }
        Ok(sys)
    }

    pub fn n_symbols(&self) -> usize {
        self.branches.len()
    }

    pub fn interval(&self, a: usize) -> [f64; 2] {
        self.branches[a].interval
    }

    pub fn center(&self, a: usize) -> f64 {
        let [l, h] = self.interval(a);
        0.5 * (l + h)
    }

    pub fn g(&self, a: usize, x: f64) -> f64 {
        (self.branches[a].inverse)(x)
    }

    /// ln|F_a′(y)|
    pub fn tau(&self, a: usize, y: f64) -> f64 {
        (self.branches[a].dforward)(y).abs().ln()
    }

    pub fn phi(&self, a: usize, b: usize, y: f64) -> f64 {
        (self.potential)(a, b, y)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn is_mixing(&self) -> bool {
        let k = self.n_symbols();
        let mut p = self.adjacency.clone();
        for _ in 0..(k * k + 1) {
            if p.iter().all(|r| r.iter().all(|&v| v)) {
                return true;
            }
            let mut q = vec![vec![false; k]; k];
            for i in 0..k {
                for j in 0..k {
                    q[i][j] = (0..k).any(|m| p[i][m] && self.adjacency[m][j]);
                }
            }
            p = q;
        }
        false
    }

    /// sup |g_a′| over all branches, sampled.
    pub fn kappa(&self) -> f64 {
        let mut k: f64 = 0.0;
        for b in &self.branches {
            let [lo, hi] = b.interval;
            for i in 0..=512 {
                let x = lo + (hi - lo) * i as f64 / 512.0;
                k = k.max(1.0 / (b.dforward)(x).abs());
            }
        }
        k
    }

    /// Same dynamics with a new potential (drops any normalization).
    pub fn with_potential(&self, name: &str, potential: Potential) -> Self {
        MarkovSystem { name: name.into(), potential, normalization: None, ..self.clone() }
    }

    /// Potential −t·τ_F.
    pub fn with_geometric_potential(&self, t: f64) -> Self {
        let br = self.branches.clone();
        self.with_potential(
            &format!("{}[-{t}tau]", self.name),
            Arc::new(move |a, _b, y| -t * (br[a].dforward)(y).abs().ln()),
        )
    }

    pub fn word_count(&self, len: usize) -> usize {
        let k = self.n_symbols();
        let mut v = vec![1usize; k];
        for _ in 1..len {
            v = (0..k).map(|a| (0..k).filter(|&b| self.adjacency[a][b]).map(|b| v[b]).sum()).collect();
        }
        v.iter().sum()
    }
}

fn zero_potential() -> Potential {
    Arc::new(|_, _, _| 0.0)
}

/// Middle-thirds Cantor: x ↦ 3x on [0,1/3], 3x−2 on [2/3,1].
pub fn triadic() -> MarkovSystem {
    let b = vec![Branch::linear([0.0, 1.0 / 3.0], 3.0), Branch::linear([2.0 / 3.0, 1.0], 3.0)];
    MarkovSystem::new("triadic", b, vec![vec![true; 2]; 2], zero_potential()).unwrap()
}

/// Doubling map split at 1/2.
pub fn full_two_shift() -> MarkovSystem {
    let b = vec![Branch::linear([0.0, 0.5], 2.0), Branch::linear([0.5, 1.0], 2.0)];
    MarkovSystem::new("full-2-shift", b, vec![vec![true; 2]; 2], zero_potential()).unwrap()
}

/// Golden-mean shift: 0 → {0,1}, 1 → {0}, slopes equal to the golden ratio.
pub fn golden_mean() -> MarkovSystem {
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let b = vec![Branch::linear([0.0, 1.0 / g], g), Branch::linear([1.0 / g, 1.0], g)];
    MarkovSystem::new("golden-mean", b, vec![vec![true, true], vec![true, false]], zero_potential()).unwrap()
}

pub const COOKIE_EPS: f64 = 0.3;

/// Two full branches with F′ = 3 + ε sin(2πx), onto [0,1].
pub fn nonlinear_cookie_cutter(eps: f64) -> MarkovSystem {
    let c = eps / (2.0 * PI);
    let f0 = move |x: f64| 3.0 * x + c * (1.0 - (2.0 * PI * x).cos());
    let f1 = move |x: f64| 1.0 - 3.0 * (1.0 - x) - c * ((2.0 * PI * x).cos() - 1.0);
    let df = move |x: f64| 3.0 + eps * (2.0 * PI * x).sin();
    let a0 = invert_monotone(&f0, &df, [0.0, 0.5], 1.0);
    let b1 = invert_monotone(&f1, &df, [0.5, 1.0], 0.0);
    let b = vec![
        Branch::from_forward([0.0, a0], Arc::new(f0), Arc::new(df)),
        Branch::from_forward([b1, 1.0], Arc::new(f1), Arc::new(df)),
    ];
    MarkovSystem::new("nonlinear", b, vec![vec![true; 2]; 2], zero_potential()).unwrap()
}

pub fn builtin(name: &str) -> Result<MarkovSystem> {
    match name {
        "triadic" => Ok(triadic()),
        "full-2-shift" => Ok(full_two_shift()),
        "golden-mean" => Ok(golden_mean()),
        "nonlinear" => Ok(nonlinear_cookie_cutter(COOKIE_EPS)),
        _ => Err(Error::InvalidInput(format!("unknown system '{name}'"))),
    }
}

/// L^n h at (b, x): Σ over admissible a→b of e^{φ(a,b,g_a x)} (L^{n−1}h)(a, g_a x).
pub fn transfer_eval(sys: &MarkovSystem, h: &dyn Fn(usize, f64) -> f64, n: usize, b: usize, x: f64) -> f64 {
    if n == 0 {
        return h(b, x);
    }
    let mut acc = 0.0;
    for a in 0..sys.n_symbols() {
        if sys.adjacency[a][b] {
            let y = sys.g(a, x);
            acc += sys.phi(a, b, y).exp() * transfer_eval(sys, h, n - 1, a, y);
        }
    }
    acc
}

pub fn transfer_apply<'a>(
    sys: &'a MarkovSystem,
    h: &'a (dyn Fn(usize, f64) -> f64 + 'a),
    n: usize,
) -> impl Fn(usize, f64) -> f64 + 'a {
    move |b, x| transfer_eval(sys, h, n, b, x)
}

struct Discretized {
    grids: Vec<Grid>,
    // (row, col, value) with flat indices symbol·N + node
    entries: Vec<(usize, usize, f64)>,
    size: usize,
}

fn discretize(sys: &MarkovSystem, pot: &Potential, n: usize) -> Discretized {
    let k = sys.n_symbols();
    let grids: Vec<Grid> = (0..k).map(|a| Grid { lo: sys.interval(a)[0], hi: sys.interval(a)[1], n }).collect();
    let mut entries = Vec::with_capacity(k * n * 8);
    for b in 0..k {
        for j in 0..n {
            let x = grids[b].node(j);
            for a in 0..k {
                if !sys.adjacency[a][b] {
                    continue;
                }
                let y = sys.g(a, x);
                let e = pot(a, b, y).exp();
                let (s, w) = grids[a].stencil(y);
                for (m, wm) in w.iter().enumerate() {
                    entries.push((b * n + j, a * n + s + m, e * wm));
                }
            }
        }
    }
    Discretized { grids, entries, size: k * n }
}

fn power_iterate(d: &Discretized, transpose: bool, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    let mut v = vec![1.0; d.size];
    let mut rho = 0.0;
    for _ in 0..max_iter {
        let mut w = vec![0.0; d.size];
        for &(r, c, x) in &d.entries {
            if transpose {
                w[c] += x * v[r];
            } else {
                w[r] += x * v[c];
            }
        }
        let norm = w.iter().cloned().fold(0.0, f64::max);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NonConvergence("transfer operator lost positivity".into()));
        }
        let prev_norm = v.iter().cloned().fold(0.0, f64::max);
        let new_rho = norm / prev_norm;
        for x in w.iter_mut() {
            *x /= norm;
        }
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        let settled = (new_rho - rho).abs() <= 1e-15 * new_rho;
        rho = new_rho;
        if diff <= 1e-14 && settled {
            return Ok((rho, v));
        }
    }
    Err(Error::NonConvergence(format!("power iteration did not settle in {max_iter} steps")))
}

pub const POWER_MAX_ITER: usize = 20_000;

/// Leading eigenvalue of the transfer operator for `pot`.
pub fn spectral_radius(sys: &MarkovSystem, pot: &Potential) -> Result<f64> {
    let d = discretize(sys, pot, GRID_POINTS);
    Ok(power_iterate(&d, false, POWER_MAX_ITER)?.0)
}

/// P(−t·τ_F) = ln of the leading eigenvalue of L_{−tτ}.
pub fn pressure(sys: &MarkovSystem, t: f64) -> Result<f64> {
    Ok(spectral_radius(sys, &sys.with_geometric_potential(t).potential)?.ln())
}

/// φ + ln h − ln h∘F − ln ρ, with (ρ, h) the Perron data of L_φ.
pub fn normalize_potential(sys: &MarkovSystem) -> Result<MarkovSystem> {
    if !sys.is_mixing() {
        return Err(Error::InvalidInput("normalization needs a mixing adjacency".into()));
    }
    let d = discretize(sys, &sys.potential, GRID_POINTS);
    let (rho, h) = power_iterate(&d, false, POWER_MAX_ITER)?;
    let (_, q) = power_iterate(&d, true, POWER_MAX_ITER)?;
    let n = GRID_POINTS;
    let k = sys.n_symbols();
    if h.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NonConvergence("eigenfunction not positive".into()));
    }
    let mut nu: Vec<f64> = q.iter().zip(&h).map(|(a, b)| a * b).collect();
    let tot: f64 = nu.iter().sum();
    for x in nu.iter_mut() {
        *x /= tot;
    }
    let norm = Arc::new(Normalization {
        rho,
        grids: d.grids.clone(),
        h: (0..k).map(|a| h[a * n..(a + 1) * n].to_vec()).collect(),
        nu: (0..k).map(|a| nu[a * n..(a + 1) * n].to_vec()).collect(),
    });
    let base = sys.potential.clone();
    let nn = norm.clone();
    let fwd: Vec<Map1> = sys.branches.iter().map(|b| b.forward.clone()).collect();
    let ln_rho = rho.ln();
    let potential: Potential = Arc::new(move |a, b, y| {
        let x = fwd[a](y);
        base(a, b, y) + nn.eigenfunction(a, y).ln() - nn.eigenfunction(b, x).ln() - ln_rho
    });
    Ok(MarkovSystem { name: sys.name.clone(), potential, normalization: Some(norm), ..sys.clone() })
}

/// g_w(x) and ln|g_w′(x)| for an admissible word w (its last symbol only
/// names the domain of x).
pub fn compose(sys: &MarkovSystem, symbols: &[usize], x: f64) -> (f64, f64) {
    let mut y = x;
    let mut ld = 0.0;
    for &a in symbols[..symbols.len().saturating_sub(1)].iter().rev() {
        y = sys.g(a, y);
        ld -= sys.tau(a, y);
    }
    (y, ld)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub symbols: Vec<usize>,
    /// g_a(center of the last symbol's interval)
    pub attach: f64,
    /// ln|g_a′| at the same reference point
    pub log_deriv: f64,
}

impl Word {
    pub fn first(&self) -> usize {
        self.symbols[0]
    }
    pub fn last(&self) -> usize {
        *self.symbols.last().unwrap()
    }
}

// Depth-first over admissible words of length `len`, built from the last
// symbol backwards. Every word carries a vector of points (seeded per
// terminal symbol) pushed through the inverse branches, the running Birkhoff
// sum of φ at each point and ln|g_a′| at each point.
fn walk_words(
    sys: &MarkovSystem,
    len: usize,
    cap: usize,
    seeds: &dyn Fn(usize) -> Vec<f64>,
    visit: &mut dyn FnMut(&[usize], &[f64], &[f64], &[f64]),
) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidInput("word length must be positive".into()));
    }
    let count = sys.word_count(len);
    if count > cap {
        return Err(Error::BudgetExceeded { what: "admissible words", needed: count, cap });
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        sys: &MarkovSystem,
        left: usize,
        rev: &mut Vec<usize>,
        ys: &[f64],
        ls: &[f64],
        ld: &[f64],
        visit: &mut dyn FnMut(&[usize], &[f64], &[f64], &[f64]),
    ) {
        if left == 0 {
            let fwd: Vec<usize> = rev.iter().rev().cloned().collect();
            visit(&fwd, ys, ls, ld);
            return;
        }
        let b = *rev.last().unwrap();
        for a in 0..sys.n_symbols() {
            if !sys.adjacency[a][b] {
                continue;
            }
            let br = &sys.branches[a];
            let ny: Vec<f64> = ys.iter().map(|&x| (br.inverse)(x)).collect();
            let nl: Vec<f64> = ny.iter().zip(ls).map(|(&y, l)| l + sys.phi(a, b, y)).collect();
            let nd: Vec<f64> = ny.iter().zip(ld).map(|(&y, d)| d - (br.dforward)(y).abs().ln()).collect();
            rev.push(a);
            rec(sys, left - 1, rev, &ny, &nl, &nd, visit);
            rev.pop();
        }
    }
    for b in 0..sys.n_symbols() {
        let ys = seeds(b);
        let z = vec![0.0; ys.len()];
        let mut rev = vec![b];
        rec(sys, len - 1, &mut rev, &ys, &z, &z, visit);
    }
    Ok(())
}

/// Admissible words of length n+1, lexicographic.
pub fn enumerate_words(sys: &MarkovSystem, n: usize) -> Result<Vec<Word>> {
    enumerate_words_capped(sys, n, DEFAULT_WORD_CAP)
}

pub fn enumerate_words_capped(sys: &MarkovSystem, n: usize, cap: usize) -> Result<Vec<Word>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let mut out = Vec::new();
    walk_words(sys, n + 1, cap, &|b| vec![sys.center(b)], &mut |s, ys, _, ld| {
        out.push(Word { symbols: s.to_vec(), attach: ys[0], log_deriv: ld[0] })
    })?;
    out.sort_by(|a, b| a.symbols.cmp(&b.symbols));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsWeight {
    pub word: Word,
    /// exp(S φ(g_a x)) at the reference point
    pub weight: f64,
    pub measure_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsTable {
    pub n: usize,
    pub entries: Vec<GibbsWeight>,
    /// Smallest C with C⁻¹w ≤ mass ≤ Cw over the table.
    pub c0: f64,
    pub total_mass: f64,
}

fn require_normalized(sys: &MarkovSystem) -> Result<&Normalization> {
    sys.normalization
        .as_deref()
        .ok_or_else(|| Error::InvalidInput(format!("system '{}' is not normalized", sys.name)))
}

/// Gibbs weights and invariant masses of the cylinders of words of length n.
pub fn equilibrium_masses(sys: &MarkovSystem, n: usize) -> Result<GibbsTable> {
    let norm = require_normalized(sys)?;
    let mut entries = Vec::new();
    let seeds = |b: usize| {
        let mut v = norm.nodes(b);
        v.push(sys.center(b));
        v
    };
    walk_words(sys, n, DEFAULT_WORD_CAP, &seeds, &mut |s, ys, ls, ld| {
        let b = s[s.len() - 1];
        let m = ys.len() - 1;
        let mass: f64 = norm.nu[b].iter().zip(&ls[..m]).map(|(w, l)| w * l.exp()).sum();
        entries.push(GibbsWeight {
            word: Word { symbols: s.to_vec(), attach: ys[m], log_deriv: ld[m] },
            weight: ls[m].exp(),
            measure_mass: mass,
        });
    })?;
    entries.sort_by(|a, b| a.word.symbols.cmp(&b.word.symbols));
    let c0 = entries
        .iter()
        .map(|e| (e.measure_mass / e.weight).max(e.weight / e.measure_mass))
        .fold(1.0, f64::max);
    let total_mass = entries.iter().map(|e| e.measure_mass).sum();
    Ok(GibbsTable { n, entries, c0, total_mass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermoConstants {
    pub lambda: f64,
    pub delta: f64,
    /// root of t ↦ P(−tτ_F)
    pub bowen_root: f64,
    pub pressure_samples: Vec<[f64; 2]>,
    pub n_quad: usize,
}

/// Bisection root of P(−tτ_F) = 0.
pub fn bowen_root(sys: &MarkovSystem, tol: f64) -> Result<f64> {
    let mut lo = 0.0;
    if pressure(sys, lo)? <= 0.0 {
        return Err(Error::NoRootInBracket { lo, hi: lo });
    }
    let mut hi = 1.0;
    let mut tries = 0;
    while pressure(sys, hi)? > 0.0 {
        lo = hi;
        hi *= 2.0;
        tries += 1;
        if tries > 10 {
            return Err(Error::NoRootInBracket { lo: 0.0, hi });
        }
    }
    while hi - lo > tol {
        let m = 0.5 * (lo + hi);
        if pressure(sys, m)? > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn thermo_constants(sys: &MarkovSystem, n_quad: usize) -> Result<ThermoConstants> {
    if n_quad < 2 {
        return Err(Error::InvalidInput("n_quad must be at least 2".into()));
    }
    let table = equilibrium_masses(sys, n_quad)?;
    let mut lambda = 0.0;
    let mut int_phi = 0.0;
    for e in &table.entries {
        let s = &e.word.symbols;
        lambda += e.measure_mass * sys.tau(s[0], e.word.attach);
        int_phi += e.measure_mass * sys.phi(s[0], s[1], e.word.attach);
    }
    let root = bowen_root(sys, 1e-12)?;
    let pressure_samples = (0..=8)
        .map(|i| {
            let t = i as f64 * 0.25;
            pressure(sys, t).map(|p| [t, p])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ThermoConstants { lambda, delta: -int_phi / lambda, bowen_root: root, pressure_samples, n_quad })
}

pub const REGULAR_BETA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularWords {
    pub n: usize,
    pub eps: f64,
    pub beta: f64,
    pub words: Vec<Word>,
    pub masses: Vec<f64>,
    pub kept_fraction: f64,
    pub discarded_mass: f64,
    pub total_words: usize,
}

/// Words of length n+1 whose contraction and mass sit within e^{±εβn} of
/// e^{−nλ} and e^{−δλn}. Masses are taken relative to the terminal symbol's
/// interval so that exactly self-similar systems keep every word.
pub fn regular_words(sys: &MarkovSystem, n: usize, eps: f64, c: &ThermoConstants) -> Result<RegularWords> {
    let norm = require_normalized(sys)?;
    let table = equilibrium_masses(sys, n + 1)?;
    let base: Vec<f64> = norm.nu.iter().map(|v| v.iter().sum()).collect();
    let slack = eps * REGULAR_BETA * n as f64;
    let nf = n as f64;
    let mut words = Vec::new();
    let mut masses = Vec::new();
    let mut discarded = 0.0;
    for e in &table.entries {
        let rel = e.measure_mass / base[e.word.last()];
        let ok_d = (e.word.log_deriv + nf * c.lambda).abs() <= slack;
        let ok_m = (rel.ln() + c.delta * c.lambda * nf).abs() <= slack;
        if ok_d && ok_m {
            words.push(e.word.clone());
            masses.push(e.measure_mass);
        } else {
            discarded += e.measure_mass;
        }
    }
    let total = table.entries.len();
    Ok(RegularWords {
        n,
        eps,
        beta: REGULAR_BETA,
        kept_fraction: words.len() as f64 / total as f64,
        words,
        masses,
        discarded_mass: discarded,
        total_words: total,
    })
}

/// Depth n with 2π|ξ|·κⁿ·(longest interval) ≤ tol.
fn fourier_depth(sys: &MarkovSystem, xi: f64, tol: f64) -> usize {
    let kappa = sys.kappa();
    let len = sys.branches.iter().map(|b| b.interval[1] - b.interval[0]).fold(0.0, f64::max);
    let mut n = 1;
    let mut d = len * kappa;
    while 2.0 * PI * xi.abs() * d > tol && n < 60 {
        n += 1;
        d *= kappa;
    }
    n
}

// (weight, point) pairs of Lⁿ applied at the center of symbol 0.
fn cylinder_atoms(sys: &MarkovSystem, depth: usize) -> Result<Vec<(f64, f64)>> {
    let mut atoms = Vec::new();
    let b0 = 0;
    let seeds = |b: usize| if b == b0 { vec![sys.center(b0)] } else { Vec::new() };
    walk_words(sys, depth + 1, DEFAULT_WORD_CAP, &seeds, &mut |_, ys, ls, _| {
        if !ys.is_empty() {
            atoms.push((ls[0].exp(), ys[0]));
        }
    })?;
    Ok(atoms)
}

/// ν̂(ξ) = ∫ e^{−2πiξx} dν(x), computed as Lⁿ(e_ξ) at a reference point with
/// depth chosen so that each cylinder spans a phase of at most `phase_tol`.
pub fn fourier_transform(sys: &MarkovSystem, xi: f64, phase_tol: f64) -> Result<Complex64> {
    require_normalized(sys)?;
    let atoms = cylinder_atoms(sys, fourier_depth(sys, xi, phase_tol))?;
    Ok(atoms.iter().map(|(w, x)| Complex64::from_polar(*w, -2.0 * PI * xi * x)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierEnvelope {
    pub k: Vec<u32>,
    /// max |ν̂(ξ)| over ξ ∈ [2^k, 2^{k+1}) sampled at spacing 1/oversample
    pub envelope: Vec<f64>,
    pub oversample: u32,
    pub decay_slope: Option<f64>,
}

/// Dyadic-block maxima of |ν̂| on a frequency grid of spacing 1/oversample.
pub fn fourier_envelope(
    sys: &MarkovSystem,
    ks: std::ops::RangeInclusive<u32>,
    oversample: u32,
    phase_tol: f64,
) -> Result<FourierEnvelope> {
    require_normalized(sys)?;
    if oversample == 0 {
        return Err(Error::InvalidInput("oversample must be positive".into()));
    }
    let os = oversample as u64;
    let dxi = 1.0 / oversample as f64;
    let mut k_out = Vec::new();
    let mut env = Vec::new();
    for k in ks {
        let start = (1u64 << k) * os;
        let end = (1u64 << (k + 1)) * os;
        let atoms = cylinder_atoms(sys, fourier_depth(sys, (end / os) as f64, phase_tol))?;
        let steps: Vec<Complex64> = atoms.iter().map(|(_, x)| Complex64::from_polar(1.0, -2.0 * PI * dxi * x)).collect();
        let mut cur: Vec<Complex64> = Vec::new();
        let mut best: f64 = 0.0;
        for (i, xi) in (start..end).enumerate() {
            if i % 256 == 0 {
                let f = xi as f64 * dxi;
                cur = atoms.iter().map(|(w, x)| Complex64::from_polar(*w, -2.0 * PI * f * x)).collect();
            }
            let s: Complex64 = cur.iter().sum();
            best = best.max(s.norm());
            for (c, z) in cur.iter_mut().zip(&steps) {
                *c *= z;
            }
        }
        k_out.push(k);
        env.push(best);
    }
    let lx: Vec<f64> = k_out.iter().map(|&k| k as f64 * 2f64.ln()).collect();
    let ly: Vec<f64> = env.iter().map(|e| e.ln()).collect();
    let decay_slope = linear_fit(&lx, &ly).map(|f| f.slope);
    Ok(FourierEnvelope { k: k_out, envelope: env, oversample, decay_slope })
}
