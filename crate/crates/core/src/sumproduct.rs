//! Multiplicative exponential sums over regular words and the pair counters
//! that measure how concentrated their phase values are.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use wide::f64x4;

use crate::error::{Error, Result};
use crate::par::{map_indexed, task_rng, task_seed, Workers};
use crate::stats::{linear_fit, log_grid};
use crate::thermo::{self, compose, MarkovSystem, RegularWords, ThermoConstants, Word};

pub const DEFAULT_TERM_BUDGET: usize = 100_000_000;
pub const DEFAULT_ETA_POINTS: usize = 32;
/// Hölder exponent stand-in used for the default window constant.
pub const HOLDER_STAND_IN: f64 = 0.5;

/// ε₀ = α|ln κ|/8.
pub fn default_eps0(sys: &MarkovSystem) -> f64 {
    HOLDER_STAND_IN * sys.kappa().ln().abs() / 8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSumConfig {
    pub n: usize,
    pub k: usize,
    pub eps0: f64,
    pub eta_grid: Vec<f64>,
    pub term_budget: usize,
}

impl ExpSumConfig {
    /// `points` log-spaced η in J_n = [e^{ε₀n/2}, e^{2ε₀n}].
    pub fn new(n: usize, k: usize, eps0: f64, points: usize) -> Result<Self> {
        if k == 0 || points == 0 || !(eps0 > 0.0) {
            return Err(Error::InvalidInput("need k ≥ 1, eps0 > 0 and at least one η".into()));
        }
        let nf = n as f64;
        let eta_grid = log_grid((eps0 * nf / 2.0).exp(), (2.0 * eps0 * nf).exp(), points);
        Ok(ExpSumConfig { n, k, eps0, eta_grid, term_budget: DEFAULT_TERM_BUDGET })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaSlot {
    pub words: Vec<Vec<usize>>,
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaTable {
    pub n: usize,
    pub block: Vec<Vec<usize>>,
    pub slots: Vec<ZetaSlot>,
}

impl ZetaTable {
    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn term_count(&self) -> usize {
        self.slots.iter().fold(1usize, |acc, s| acc.saturating_mul(s.zeta.len()))
    }

    /// Table made directly from ζ values, for witnesses and tests.
    pub fn from_values(n: usize, values: Vec<Vec<f64>>) -> Self {
        let slots = values
            .into_iter()
            .map(|z| ZetaSlot { words: vec![Vec::new(); z.len()], zeta: z })
            .collect();
        ZetaTable { n, block: Vec::new(), slots }
    }
}

/// Random block a₀…a_k of regular words such that every slot has a
/// regular b with a_{j−1} ⇝ b ⇝ a_j.
pub fn choose_block(regular: &RegularWords, k: usize, seed: u64) -> Result<Vec<Word>> {
    if regular.words.is_empty() {
        return Err(Error::EmptySlot(0));
    }
    let pairs: std::collections::BTreeSet<(usize, usize)> =
        regular.words.iter().map(|w| (w.first(), w.last())).collect();
    let mut rng = task_rng(seed, 0);
    let mut block = vec![regular.words[rng.gen_range(0..regular.words.len())].clone()];
    for j in 1..=k {
        let prev = block[j - 1].last();
        let cands: Vec<&Word> = regular.words.iter().filter(|w| pairs.contains(&(prev, w.first()))).collect();
        let pick = cands.choose(&mut rng).ok_or(Error::EmptySlot(j))?;
        block.push((*pick).clone());
    }
    Ok(block)
}

/// ζ_j(b) = e^{2λn}|g′_{a′_{j−1}b}(x_{a_j})| over regular b with a_{j−1} ⇝ b ⇝ a_j.
pub fn build_zeta(
    sys: &MarkovSystem,
    block: &[Word],
    regular: &RegularWords,
    consts: &ThermoConstants,
    n: usize,
) -> Result<ZetaTable> {
    if block.len() < 2 {
        return Err(Error::InvalidInput("block needs at least two words".into()));
    }
    let scale = 2.0 * consts.lambda * n as f64;
    let mut slots = Vec::new();
    for j in 1..block.len() {
        let (prev, next) = (&block[j - 1], &block[j]);
        let mut words = Vec::new();
        let mut zeta = Vec::new();
        for b in regular.words.iter().filter(|b| b.first() == prev.last() && b.last() == next.first()) {
            let mut w = prev.symbols[..prev.symbols.len() - 1].to_vec();
            w.extend_from_slice(&b.symbols);
            let (_, ld) = compose(sys, &w, next.attach);
            words.push(b.symbols.clone());
            zeta.push((scale + ld).exp());
        }
        if zeta.is_empty() {
            return Err(Error::EmptySlot(j));
        }
        slots.push(ZetaSlot { words, zeta });
    }
    Ok(ZetaTable { n, block: block.iter().map(|w| w.symbols.clone()).collect(), slots })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSumResult {
    pub eta: Vec<f64>,
    pub modulus: Vec<f64>,
    pub sup_modulus: f64,
    pub eta_at_sup: f64,
    pub terms: usize,
}

const CHUNK: usize = 1024;

// Σ_z e^{i(f·z − r)}, four lanes at a time.
fn phase_sum(zs: &[f64], f: f64, r: f64) -> Complex64 {
    let (fv, rv) = (f64x4::splat(f), f64x4::splat(r));
    let mut re = f64x4::splat(0.0);
    let mut im = f64x4::splat(0.0);
    let mut it = zs.chunks_exact(4);
    for c in &mut it {
        let (sn, cs) = (fv * f64x4::from([c[0], c[1], c[2], c[3]]) - rv).sin_cos();
        re += cs;
        im += sn;
    }
    let (re, im) = (re.to_array(), im.to_array());
    let mut out = Complex64::new((re[0] + re[1]) + (re[2] + re[3]), (im[0] + im[1]) + (im[2] + im[3]));
    for z in it.remainder() {
        let (sn, cs) = (f * z - r).sin_cos();
        out += Complex64::new(cs, sn);
    }
    out
}

/// |Σ e^{iηζ₁(b₁)…ζ_k(b_k)}| / ∏|𝒵_j| on the η grid, summed in slot order.
pub fn exp_sum(table: &ZetaTable, cfg: &ExpSumConfig, workers: Workers) -> Result<ExpSumResult> {
    if table.k() == 0 {
        return Err(Error::InvalidInput("empty table".into()));
    }
    let terms = table.term_count();
    if terms > cfg.term_budget {
        return Err(Error::BudgetExceeded { what: "exponential-sum terms", needed: terms, cap: cfg.term_budget });
    }
    // products over all but the last slot, in lexicographic slot order
    let mut prefix = vec![1.0];
    for s in &table.slots[..table.k() - 1] {
        let mut next = Vec::with_capacity(prefix.len() * s.zeta.len());
        for p in &prefix {
            for z in &s.zeta {
                next.push(p * z);
            }
        }
        prefix = next;
    }
    let last = &table.slots[table.k() - 1].zeta;
    // phases are taken relative to the first tuple so coinciding phases add
    // up to exactly the term count
    let first: f64 = table.slots.iter().map(|s| s.zeta[0]).product();
    let ne = cfg.eta_grid.len();
    let chunks = prefix.len().div_ceil(CHUNK);
    let partial = map_indexed(workers, chunks, |c| {
        let mut acc = vec![Complex64::new(0.0, 0.0); ne];
        for p in &prefix[c * CHUNK..((c + 1) * CHUNK).min(prefix.len())] {
            for (e, eta) in cfg.eta_grid.iter().enumerate() {
                acc[e] += phase_sum(last, eta * p, eta * first);
            }
        }
        acc
    });
    let mut total = vec![Complex64::new(0.0, 0.0); ne];
    for acc in partial {
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
    }
    let modulus: Vec<f64> = total.iter().map(|t| (t.norm() / terms as f64).min(1.0)).collect();
    let (mut sup, mut at) = (0.0, cfg.eta_grid[0]);
    for (m, e) in modulus.iter().zip(&cfg.eta_grid) {
        if *m > sup {
            sup = *m;
            at = *e;
        }
    }
    Ok(ExpSumResult { eta: cfg.eta_grid.clone(), modulus, sup_modulus: sup, eta_at_sup: at, terms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcCounter {
    pub slot: usize,
    pub sigma: f64,
    /// ordered pairs, diagonal included
    pub pair_count: u64,
    pub slot_size: usize,
    pub bound_ratio: f64,
}

/// Ordered pairs within distance σ for each σ, by one sort and a sweep.
pub fn pair_counts(values: &[f64], sigma_grid: &[f64]) -> Vec<u64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    sigma_grid
        .iter()
        .map(|&s| {
            let mut j = 0;
            let mut off = 0u64;
            for i in 0..m {
                if j < i + 1 {
                    j = i + 1;
                }
                while j < m && v[j] - v[i] <= s {
                    j += 1;
                }
                off += (j - i - 1) as u64;
            }
            2 * off + m as u64
        })
        .collect()
}

pub fn nc_counter(table: &ZetaTable, sigma_grid: &[f64], gamma: f64) -> Vec<NcCounter> {
    let mut out = Vec::new();
    for (j, s) in table.slots.iter().enumerate() {
        let n = s.zeta.len();
        for (sigma, c) in sigma_grid.iter().zip(pair_counts(&s.zeta, sigma_grid)) {
            out.push(NcCounter {
                slot: j + 1,
                sigma: *sigma,
                pair_count: c,
                slot_size: n,
                bound_ratio: c as f64 / ((n * n) as f64 * sigma.powf(gamma)),
            });
        }
    }
    out
}

/// Slope of ln(pairs/N²) against ln σ, pooled over slots.
pub fn fit_gamma(counters: &[NcCounter]) -> Option<f64> {
    let x: Vec<f64> = counters.iter().map(|c| c.sigma.ln()).collect();
    let y: Vec<f64> = counters
        .iter()
        .map(|c| (c.pair_count as f64 / (c.slot_size * c.slot_size) as f64).ln())
        .collect();
    linear_fit(&x, &y).map(|f| f.slope)
}

/// σ ∈ [e^{−4ε₀n}, e^{−ε₀ε₁n/2}].
pub fn nc_window(eps0: f64, eps1: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    ((-4.0 * eps0 * nf).exp(), (-eps0 * eps1 * nf / 2.0).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeProfile {
    pub n: usize,
    pub sigma: Vec<f64>,
    pub mass: Vec<f64>,
    pub n_samples: usize,
    pub gamma_hat: Option<f64>,
}

/// S_nτ(g_b x) − S_nτ(g_b y) − S_nτ(g_c x) + S_nτ(g_c y).
pub fn four_term(sys: &MarkovSystem, b: &[usize], c: &[usize], x: f64, y: f64) -> f64 {
    // S_nτ_F(g_w x) = −ln|g_w′(x)|
    let l = |w: &[usize], p: f64| compose(sys, w, p).1;
    -l(b, x) + l(b, y) + l(c, x) - l(c, y)
}

/// Small-scale mass profile of the four-term Birkhoff expression over
/// ν-sampled words b, c ending in a common symbol d and points x, y ∈ U_d.
pub fn delta_nc_bridge(
    sys: &MarkovSystem,
    n: usize,
    sigma_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<BridgeProfile> {
    let table = thermo::equilibrium_masses(sys, n + 1)?;
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, filter: &dyn Fn(&Word) -> bool| -> Option<Word> {
        let pool: Vec<&thermo::GibbsWeight> = table.entries.iter().filter(|e| filter(&e.word)).collect();
        let tot: f64 = pool.iter().map(|e| e.measure_mass).sum();
        let mut u = rng.gen::<f64>() * tot;
        for e in &pool {
            u -= e.measure_mass;
            if u <= 0.0 {
                return Some(e.word.clone());
            }
        }
        pool.last().map(|e| e.word.clone())
    };
    let mut vals = Vec::with_capacity(n_samples);
    let mut rng = task_rng(seed, 0);
    for _ in 0..n_samples {
        let b = pick(&mut rng, &|_| true).ok_or(Error::EmptySlot(0))?;
        let d = b.last();
        let c = pick(&mut rng, &|w| w.last() == d).ok_or(Error::EmptySlot(0))?;
        let x = pick(&mut rng, &|w| w.first() == d).ok_or(Error::EmptySlot(0))?.attach;
        let y = pick(&mut rng, &|w| w.first() == d).ok_or(Error::EmptySlot(0))?.attach;
        vals.push(four_term(sys, &b.symbols, &c.symbols, x, y).abs());
    }
    vals.sort_by(f64::total_cmp);
    let mass: Vec<f64> = sigma_grid
        .iter()
        .map(|s| vals.partition_point(|v| v <= s) as f64 / n_samples as f64)
        .collect();
    let pts: Vec<(f64, f64)> = sigma_grid
        .iter()
        .zip(&mass)
        .filter(|(_, m)| **m > 0.0)
        .map(|(s, m)| (s.ln(), m.ln()))
        .collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let gamma_hat = linear_fit(&lx, &ly).map(|f| f.slope);
    Ok(BridgeProfile { n, sigma: sigma_grid.to_vec(), mass, n_samples, gamma_hat })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumProductParams {
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    pub eps0: Option<f64>,
    pub eps1: f64,
    pub eta_points: usize,
    pub sigma_points: usize,
    pub term_budget: usize,
    pub n_quad: usize,
    /// independent random blocks averaged in the report
    pub n_blocks: usize,
    pub seed: u64,
}

impl Default for SumProductParams {
    fn default() -> Self {
        SumProductParams {
            n: 8,
            k: 3,
            eps: 0.1,
            eps0: None,
            eps1: 1.0,
            eta_points: DEFAULT_ETA_POINTS,
            sigma_points: 12,
            term_budget: DEFAULT_TERM_BUDGET,
            n_quad: 8,
            n_blocks: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumProductReport {
    pub system: String,
    pub n: usize,
    pub k: usize,
    pub eps0: f64,
    pub eta: Vec<f64>,
    /// block-averaged modulus per η
    pub modulus: Vec<f64>,
    /// mean over blocks of each block's sup over the η grid
    pub sup_modulus: f64,
    pub block_sup: Vec<f64>,
    pub zeta_range: [f64; 2],
    pub gamma_fit: Option<f64>,
    pub counters: Vec<NcCounter>,
}

/// Regular words, then for each of `n_blocks` seeded blocks the ζ table,
/// exponential sum and pair counters, for a normalized system.
pub fn run(sys: &MarkovSystem, p: &SumProductParams, workers: Workers) -> Result<SumProductReport> {
    if p.n_blocks == 0 {
        return Err(Error::InvalidInput("need at least one block".into()));
    }
    let consts = thermo::thermo_constants(sys, p.n_quad)?;
    let regular = thermo::regular_words(sys, p.n, p.eps, &consts)?;
    let eps0 = p.eps0.unwrap_or_else(|| default_eps0(sys));
    let mut cfg = ExpSumConfig::new(p.n, p.k, eps0, p.eta_points)?;
    cfg.term_budget = p.term_budget;
    let (lo, hi) = nc_window(eps0, p.eps1, p.n);
    let sigma = log_grid(lo, hi, p.sigma_points);
    let mut modulus = vec![0.0; cfg.eta_grid.len()];
    let mut block_sup = Vec::with_capacity(p.n_blocks);
    let mut counters = Vec::new();
    let mut zeta_range = [f64::INFINITY, f64::NEG_INFINITY];
    for b in 0..p.n_blocks {
        let block = choose_block(&regular, p.k, task_seed(p.seed, b as u64))?;
        let table = build_zeta(sys, &block, &regular, &consts, p.n)?;
        let res = exp_sum(&table, &cfg, workers)?;
        for (m, r) in modulus.iter_mut().zip(&res.modulus) {
            *m += r / p.n_blocks as f64;
        }
        block_sup.push(res.sup_modulus);
        counters.extend(nc_counter(&table, &sigma, 1.0));
        for z in table.slots.iter().flat_map(|s| s.zeta.iter()) {
            zeta_range = [zeta_range[0].min(*z), zeta_range[1].max(*z)];
        }
    }
    Ok(SumProductReport {
        system: sys.name.clone(),
        n: p.n,
        k: p.k,
        eps0,
        eta: cfg.eta_grid,
        modulus,
        sup_modulus: block_sup.iter().sum::<f64>() / p.n_blocks as f64,
        block_sup,
        zeta_range,
        gamma_fit: fit_gamma(&counters),
        counters,
    })
}
