//! The `quasitrace` command line: one subcommand per module operation, JSON or
//! CSV artifacts, and a manifest next to each artifact.
//!
//! Parameters come from flags, then the optional `--config` JSON object
//! (snake_case keys), then defaults. The resolved parameters and the seed are
//! echoed into the artifact and hashed; the hash is stored in every artifact.
//! Wall time lives only in the `.manifest.json` file so that artifacts stay
//! byte-identical across runs and worker counts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::hyperbolic::manifold::{periodic_frame, PERIODIC_DEPTH};
use crate::hyperbolic::periodic::mme_sampler;
use crate::hyperbolic::qnl::{qnl_exponent, trace_map_pairs, QnlOptions, QnlSystem};
use crate::hyperbolic::system::TraceSurface;
use crate::par::{map_indexed, Workers};
use crate::spectral::{self, CorrelationSeries, DosHistogram, EscapeParams};
use crate::sumproduct::{self, SumProductParams};
use crate::thermo::{self, MarkovSystem};
use crate::trace_map;
use crate::verify::{self, Suite};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Module(Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Module(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Module(e) => write!(f, "module error: {e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    // precondition failures are configuration problems
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(m) => CliError::Config(m),
            e => CliError::Module(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "quasitrace", version, about = "Trace-map, spectral, thermodynamic and temporal-distance experiments")]
pub struct Cli {
    /// JSON object of parameters; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long, global = true, env = "QUASITRACE_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true, env = "QUASITRACE_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    TraceMap(TraceMapCmd),
    #[command(subcommand)]
    Spectrum(SpectrumCmd),
    #[command(subcommand)]
    Thermo(ThermoCmd),
    #[command(subcommand)]
    Hyperbolic(HyperbolicCmd),
    #[command(subcommand)]
    Sumproduct(SumProductCmd),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Subcommand)]
pub enum TraceMapCmd {
    /// t_V and the period-two point p_V.
    FixedPoint(VArgs),
    /// Anosov cocycle at p_V.
    Cocycle(VArgs),
    /// Linearization at p_V and the chart partials of y_V.
    Taylor(VArgs),
}

#[derive(Debug, Subcommand)]
pub enum SpectrumCmd {
    Cover(CoverArgs),
    Dos(DosArgs),
    Correlate(CorrelateArgs),
    /// Decay exponent of a correlate or dos artifact.
    FitDecay(FitDecayArgs),
}

#[derive(Debug, Subcommand)]
pub enum ThermoCmd {
    /// Gibbs weights and masses of cylinder words.
    Words(WordsArgs),
    Constants(ConstantsArgs),
    Regular(RegularArgs),
}

#[derive(Debug, Subcommand)]
pub enum HyperbolicCmd {
    Frame(FrameArgs),
    Delta(DeltaArgs),
    Qnl(QnlArgs),
    Holonomy(HolonomyArgs),
}

#[derive(Debug, Subcommand)]
pub enum SumProductCmd {
    /// ζ table of one seeded block.
    Zeta(BlockArgs),
    /// Exponential sums averaged over seeded blocks.
    Sum(SumArgs),
    /// Pair counters of one seeded block.
    Nc(NcArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VArgs {
    #[arg(long)]
    pub v: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverArgs {
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long)]
    pub escape_radius: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DosArgs {
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub phases: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub phases: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDecayArgs {
    /// A correlate or dos artifact.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Time step for transforming a dos input.
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordsArgs {
    /// triadic, golden-mean, full-2-shift or nonlinear
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n_quad: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub n_quad: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameArgs {
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub period_cap: Option<usize>,
    /// Sampler index of the base point.
    #[arg(long)]
    pub index: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaArgs {
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub period_cap: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QnlKind {
    TraceMap,
    LinearTest,
    SyntheticUniform,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QnlArgs {
    #[arg(long, value_enum)]
    pub system: Option<QnlKind>,
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub period_cap: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// σ grid is 2^-k for k in sigma_k_min..=sigma_k_max.
    #[arg(long)]
    pub sigma_k_min: Option<i32>,
    #[arg(long)]
    pub sigma_k_max: Option<i32>,
    #[arg(long)]
    pub min_smallest_bin: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolonomyArgs {
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub period_cap: Option<usize>,
    #[arg(long)]
    pub triples: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub n_quad: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SumArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub eta_points: Option<usize>,
    #[arg(long)]
    pub term_budget: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub eps1: Option<f64>,
    #[arg(long)]
    pub sigma_points: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    #[arg(long, conflicts_with = "full")]
    pub fast: bool,
    #[arg(long)]
    pub full: bool,
}

/// Plot-ready rows; every CSV gets a trailing manifest_hash column.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

struct Output {
    config: Value,
    result: Value,
    table: Table,
    checks: Option<BTreeMap<String, bool>>,
    failed: bool,
}

impl Output {
    fn new(config: Value, result: Value, table: Table) -> Self {
        Output { config, result, table, checks: None, failed: false }
    }
}

struct Ctx {
    seed: u64,
    workers: Workers,
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serializable")
}

/// Config entries overlaid by the non-null flags, read back into `T`.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: &Map<String, Value>) -> CliResult<T> {
    let mut m = config.clone();
    if let Value::Object(f) = to_value(flags) {
        for (k, v) in f {
            if !v.is_null() {
                m.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(m)).map_err(|e| CliError::Config(e.to_string()))
}

fn positive(name: &str, x: f64) -> CliResult<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {x}")))
    }
}

fn at_least(name: &str, x: usize, lo: usize) -> CliResult<usize> {
    if x >= lo {
        Ok(x)
    } else {
        Err(CliError::Config(format!("{name} must be at least {lo}, got {x}")))
    }
}

fn normalized(name: &str) -> CliResult<MarkovSystem> {
    Ok(thermo::normalize_potential(&thermo::builtin(name)?)?)
}

fn fixed_point(a: VArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.1);
    let sp = trace_map::solve_t_v(v, 1e-15)?;
    let p = sp.period_two_point();
    let scaled = (sp.t_v - 1.0) * 2.0 * 5f64.sqrt() / v;
    let mut t = Table::new(&["v", "t_v", "p_x", "p_y", "p_z", "scaled_offset"]);
    t.push(vec![num(v), num(sp.t_v), num(p.x), num(p.y), num(p.z), num(scaled)]);
    let result = json!({ "surface": sp, "p_v": p, "scaled_offset": scaled });
    Ok(Output::new(json!({ "v": v, "seed": ctx.seed }), result, t))
}

fn cocycle(a: VArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.01);
    let c = trace_map::anosov_cocycle(v)?;
    let scaled = c.value * v * v;
    let mut t = Table::new(&["v", "value", "value_v2"]);
    t.push(vec![num(v), num(c.value), num(scaled)]);
    let result = json!({ "v": v, "value": c.value, "value_v2": scaled, "reference_v2": verify::COCYCLE_LIMIT });
    Ok(Output::new(json!({ "v": v, "seed": ctx.seed }), result, t))
}

fn taylor(a: VArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.01);
    let lin = trace_map::linearize_at_pv(v)?;
    let y = trace_map::chart_derivatives(v)?;
    let mut t = Table::new(&["function", "partial", "value"]);
    for (name, p) in [("F", &lin.taylor.f), ("G", &lin.taylor.g), ("y_V", &y)] {
        if let Value::Object(m) = to_value(p) {
            for (k, x) in m {
                t.push(vec![name.into(), k, x.to_string()]);
            }
        }
    }
    let result = json!({ "linearization": lin, "y_partials": y });
    Ok(Output::new(json!({ "v": v, "seed": ctx.seed }), result, t))
}

fn cover(a: CoverArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.5);
    let res = positive("resolution", a.resolution.unwrap_or(1e-3))?;
    let d = EscapeParams::default();
    let esc = EscapeParams { radius: a.escape_radius.unwrap_or(d.radius), max_iter: a.max_iter.unwrap_or(d.max_iter) };
    if !(esc.radius > 1.0 + v * v / 4.0) || esc.max_iter == 0 {
        return Err(CliError::Config("escape radius must exceed 1 + V²/4 and max_iter must be positive".into()));
    }
    let c = spectral::spectrum_cover(v, res, esc)?;
    let mut t = Table::new(&["e_lo", "e_hi"]);
    for [lo, hi] in &c.intervals {
        t.push(vec![num(*lo), num(*hi)]);
    }
    let config = json!({ "v": v, "resolution": res, "escape_radius": esc.radius, "max_iter": esc.max_iter, "seed": ctx.seed });
    let result = json!({ "cover": c, "measure": c.measure() });
    Ok(Output::new(config, result, t))
}

fn dos(a: DosArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.5);
    let sites = at_least("sites", a.sites.unwrap_or(2048), 64)?;
    let phases = at_least("phases", a.phases.unwrap_or(if v == 0.0 { 1 } else { 16 }), 1)?;
    let bins = at_least("bins", a.bins.unwrap_or(128), 1)?;
    let d = spectral::dos_histogram(v, sites, phases, bins, ctx.seed, ctx.workers)?;
    let mut t = Table::new(&["e_lo", "e_hi", "mass"]);
    for (w, m) in d.bin_edges.windows(2).zip(&d.masses) {
        t.push(vec![num(w[0]), num(w[1]), num(*m)]);
    }
    let config = json!({ "v": v, "sites": sites, "phases": phases, "bins": bins, "seed": ctx.seed });
    Ok(Output::new(config, to_value(&d), t))
}

fn series_table(s: &CorrelationSeries) -> Table {
    let mut t = Table::new(&["t", "re", "im", "modulus"]);
    for (i, m) in s.modulus().iter().enumerate() {
        t.push(vec![num(s.times[i]), num(s.re[i]), num(s.im[i]), num(*m)]);
    }
    t
}

fn time_grid(dt: f64, t_max: f64) -> CliResult<Vec<f64>> {
    positive("dt", dt)?;
    positive("t_max", t_max)?;
    let n = (t_max / dt).round() as usize;
    Ok((0..=n).map(|i| i as f64 * dt).collect())
}

fn correlate(a: CorrelateArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.1);
    let sites = at_least("sites", a.sites.unwrap_or(4096), 64)?;
    let phases = at_least("phases", a.phases.unwrap_or(if v == 0.0 { 1 } else { 16 }), 1)?;
    let dt = a.dt.unwrap_or(0.1);
    let t_max = a.t_max.unwrap_or(200.0);
    let times = time_grid(dt, t_max)?;
    let s = spectral::phase_averaged_correlation(v, &times, sites, phases, ctx.seed, ctx.workers)?;
    let config = json!({ "v": v, "sites": sites, "phases": phases, "dt": dt, "t_max": t_max, "seed": ctx.seed });
    let t = series_table(&s);
    Ok(Output::new(config, json!({ "v": v, "series": s }), t))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn fit_decay(a: FitDecayArgs, ctx: &Ctx) -> CliResult<Output> {
    let input = a.input.ok_or_else(|| CliError::Config("fit-decay needs --input".into()))?;
    let art = read_json(&input)?;
    let body = art.get("result").unwrap_or(&art);
    let input_hash = art.get("manifest_hash").cloned().unwrap_or(Value::Null);
    let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", input.display()));
    let dt = a.dt.unwrap_or(0.1);
    let (series, default_window) = if body.get("bin_edges").is_some() {
        let d: DosHistogram = serde_json::from_value(body.clone()).map_err(bad)?;
        let w = d.bin_edges.get(1).zip(d.bin_edges.first()).map_or(1.0, |(b, a)| b - a);
        // the bin-center transform holds while the phase error w·t/2 stays below 1/2
        let t_hi = 1.0 / w;
        let times = time_grid(dt, a.t_max.unwrap_or(t_hi))?;
        (spectral::fourier_of_dos(&d, &times), [1.0, t_hi])
    } else {
        let s = body.get("series").unwrap_or(body);
        let s: CorrelationSeries = serde_json::from_value(s.clone()).map_err(bad)?;
        let last = s.times.last().copied().unwrap_or(0.0);
        (s, [10.0, last])
    };
    let window = [a.t_min.unwrap_or(default_window[0]), a.t_max.unwrap_or(default_window[1])];
    let fit = spectral::fit_decay(&series, window)?;
    let mut t = Table::new(&["t_min", "t_max", "rho_hat", "c_hat", "r2", "n_points"]);
    t.push(vec![num(window[0]), num(window[1]), num(fit.rho_hat), num(fit.c_hat), num(fit.r2), fit.n_points.to_string()]);
    let config = json!({
        "input": input.display().to_string(),
        "input_manifest_hash": input_hash,
        "t_min": window[0],
        "t_max": window[1],
        "dt": dt,
        "seed": ctx.seed,
    });
    Ok(Output::new(config, to_value(&fit), t))
}

fn words(a: WordsArgs, ctx: &Ctx) -> CliResult<Output> {
    let name = a.system.unwrap_or_else(|| "nonlinear".into());
    let n = at_least("n", a.n.unwrap_or(6), 1)?;
    let sys = normalized(&name)?;
    let g = thermo::equilibrium_masses(&sys, n)?;
    let mut t = Table::new(&["word", "attach", "log_deriv", "weight", "mass"]);
    for e in &g.entries {
        let w: Vec<String> = e.word.symbols.iter().map(|s| s.to_string()).collect();
        t.push(vec![w.join(""), num(e.word.attach), num(e.word.log_deriv), num(e.weight), num(e.measure_mass)]);
    }
    Ok(Output::new(json!({ "system": name, "n": n, "seed": ctx.seed }), to_value(&g), t))
}

fn constants(a: ConstantsArgs, ctx: &Ctx) -> CliResult<Output> {
    let name = a.system.unwrap_or_else(|| "nonlinear".into());
    let n_quad = at_least("n_quad", a.n_quad.unwrap_or(8), 2)?;
    let sys = normalized(&name)?;
    let c = thermo::thermo_constants(&sys, n_quad)?;
    let rho = sys.normalization.as_ref().map_or(f64::NAN, |n| n.rho);
    let mut t = Table::new(&["t", "pressure"]);
    for [x, p] in &c.pressure_samples {
        t.push(vec![num(*x), num(*p)]);
    }
    let result = json!({ "constants": c, "perron_root": rho });
    Ok(Output::new(json!({ "system": name, "n_quad": n_quad, "seed": ctx.seed }), result, t))
}

fn regular(a: RegularArgs, ctx: &Ctx) -> CliResult<Output> {
    let name = a.system.unwrap_or_else(|| "nonlinear".into());
    let n = at_least("n", a.n.unwrap_or(8), 1)?;
    let eps = positive("eps", a.eps.unwrap_or(0.1))?;
    let n_quad = at_least("n_quad", a.n_quad.unwrap_or(8), 2)?;
    let sys = normalized(&name)?;
    let c = thermo::thermo_constants(&sys, n_quad)?;
    let r = thermo::regular_words(&sys, n, eps, &c)?;
    let mut t = Table::new(&["word", "attach", "log_deriv", "mass"]);
    for (w, m) in r.words.iter().zip(&r.masses) {
        let s: Vec<String> = w.symbols.iter().map(|s| s.to_string()).collect();
        t.push(vec![s.join(""), num(w.attach), num(w.log_deriv), num(*m)]);
    }
    let config = json!({ "system": name, "n": n, "eps": eps, "n_quad": n_quad, "seed": ctx.seed });
    Ok(Output::new(config, to_value(&r), t))
}

fn frame(a: FrameArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.5);
    let cap = at_least("period_cap", a.period_cap.unwrap_or(8), 1)?;
    let index = a.index.unwrap_or(0);
    let s = mme_sampler(v, cap, ctx.seed, ctx.workers)?;
    if index >= s.len() {
        return Err(CliError::Config(format!("index {index} out of range, sampler has {} points", s.len())));
    }
    let pp = s.get(index);
    let f = periodic_frame(&TraceSurface { v }, &pp, PERIODIC_DEPTH)?;
    let (cu, cs) = f.chart_vectors();
    let mut t = Table::new(&["x", "y", "z", "eu_x", "eu_y", "eu_z", "es_x", "es_y", "es_z", "sin_angle", "quality"]);
    let mut row: Vec<String> = f.point.iter().chain(f.e_u.iter()).chain(f.e_s.iter()).map(|x| num(*x)).collect();
    row.extend([num(f.sin_angle()), num(f.quality)]);
    t.push(row);
    let result = json!({
        "frame": f,
        "sin_angle": f.sin_angle(),
        "chart_e_u": cu,
        "chart_e_s": cs,
        "period": pp.orbit.period(),
        "sampler_size": s.len(),
    });
    let config = json!({ "v": v, "period_cap": cap, "index": index, "seed": ctx.seed });
    Ok(Output::new(config, result, t))
}

fn delta_cmd(a: DeltaArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.5);
    let cap = at_least("period_cap", a.period_cap.unwrap_or(8), 1)?;
    let n = at_least("pairs", a.pairs.unwrap_or(100), 1)?;
    let opts = QnlOptions {
        period_cap: cap,
        radius: positive("radius", a.radius.unwrap_or(0.1))?,
        tol: positive("tol", a.tol.unwrap_or(1e-10))?,
        ..Default::default()
    };
    let s = mme_sampler(v, cap, ctx.seed, ctx.workers)?;
    let (pairs, failures) = trace_map_pairs(&s, n, ctx.seed, &opts, ctx.workers)?;
    let mut t = Table::new(&["p_x", "p_y", "p_z", "q_x", "q_y", "q_z", "distance", "delta", "tail_bound"]);
    for d in &pairs {
        let mut row: Vec<String> = d.p.iter().chain(d.q.iter()).map(|x| num(*x)).collect();
        row.extend([num(d.distance), num(d.delta), num(d.tail_bound)]);
        t.push(row);
    }
    let config = json!({ "v": v, "period_cap": cap, "pairs": n, "radius": opts.radius, "tol": opts.tol, "seed": ctx.seed });
    Ok(Output::new(config, json!({ "pairs": pairs, "failures": failures }), t))
}

fn qnl(a: QnlArgs, ctx: &Ctx) -> CliResult<Output> {
    let kind = a.system.unwrap_or(QnlKind::TraceMap);
    let v = a.v.unwrap_or(0.5);
    let system = match kind {
        QnlKind::TraceMap => QnlSystem::TraceMap { v },
        QnlKind::LinearTest => QnlSystem::LinearTest,
        QnlKind::SyntheticUniform => QnlSystem::SyntheticUniform,
    };
    let d = QnlOptions::default();
    let opts = QnlOptions {
        period_cap: at_least("period_cap", a.period_cap.unwrap_or(d.period_cap), 1)?,
        radius: positive("radius", a.radius.unwrap_or(d.radius))?,
        tol: positive("tol", a.tol.unwrap_or(d.tol))?,
        min_smallest_bin: a.min_smallest_bin.unwrap_or(d.min_smallest_bin),
        ..d
    };
    let n = at_least("pairs", a.pairs.unwrap_or(10_000), 1)?;
    let (k0, k1) = (a.sigma_k_min.unwrap_or(4), a.sigma_k_max.unwrap_or(14));
    if k1 < k0 {
        return Err(CliError::Config("sigma_k_max must be at least sigma_k_min".into()));
    }
    let sigma: Vec<f64> = (k0..=k1).map(|k| 2f64.powi(-k)).collect();
    let (h, _) = qnl_exponent(system, n, &sigma, ctx.seed, &opts, ctx.workers)?;
    let mut t = Table::new(&["sigma", "mass"]);
    for (s, m) in h.sigma.iter().zip(&h.mass) {
        t.push(vec![num(*s), num(*m)]);
    }
    let config = json!({
        "system": kind,
        "v": if kind == QnlKind::TraceMap { json!(v) } else { Value::Null },
        "pairs": n,
        "options": opts,
        "sigma_k_min": k0,
        "sigma_k_max": k1,
        "seed": ctx.seed,
    });
    Ok(Output::new(config, to_value(&h), t))
}

fn holonomy(a: HolonomyArgs, ctx: &Ctx) -> CliResult<Output> {
    let v = a.v.unwrap_or(0.5);
    let cap = at_least("period_cap", a.period_cap.unwrap_or(8), 1)?;
    let count = at_least("triples", a.triples.unwrap_or(20), 1)?;
    let s = mme_sampler(v, cap, ctx.seed, ctx.workers)?;
    let sys = TraceSurface { v };
    let triples = verify::holonomy_triples(&s, count);
    let checks = map_indexed(ctx.workers, triples.len(), |k| {
        let (p, s, r) = &triples[k];
        verify::triple_check(&sys, p, s, r).map(|c| (p.point(), c))
    });
    let mut t = Table::new(&["p_x", "p_y", "p_z", "delta_plus", "holonomy_difference", "mismatch", "fd_mismatch"]);
    let mut rows = Vec::new();
    let mut failures = 0;
    for c in checks {
        match c {
            Ok((p, c)) => {
                let mut row: Vec<String> = p.iter().map(|x| num(*x)).collect();
                row.extend([num(c.delta_plus), num(c.holonomy_difference), num(c.mismatch()), num(c.fd_mismatch)]);
                t.push(row);
                rows.push(c);
            }
            Err(_) => failures += 1,
        }
    }
    let worst = rows.iter().map(|c| c.mismatch()).fold(0.0, f64::max);
    let config = json!({ "v": v, "period_cap": cap, "triples": count, "seed": ctx.seed });
    Ok(Output::new(config, json!({ "checks": rows, "failures": failures, "max_mismatch": worst }), t))
}

struct Block {
    sys: MarkovSystem,
    table: sumproduct::ZetaTable,
    eps0: f64,
}

fn block(name: &str, n: usize, k: usize, eps: f64, n_quad: usize, seed: u64) -> CliResult<Block> {
    let sys = normalized(name)?;
    let c = thermo::thermo_constants(&sys, n_quad)?;
    let r = thermo::regular_words(&sys, n, eps, &c)?;
    let words = sumproduct::choose_block(&r, k, seed)?;
    let table = sumproduct::build_zeta(&sys, &words, &r, &c, n)?;
    let eps0 = sumproduct::default_eps0(&sys);
    Ok(Block { sys, table, eps0 })
}

fn zeta(a: BlockArgs, ctx: &Ctx) -> CliResult<Output> {
    let name = a.system.unwrap_or_else(|| "nonlinear".into());
    let n = at_least("n", a.n.unwrap_or(6), 1)?;
    let k = at_least("k", a.k.unwrap_or(3), 1)?;
    let eps = positive("eps", a.eps.unwrap_or(0.1))?;
    let n_quad = at_least("n_quad", a.n_quad.unwrap_or(8), 2)?;
    let b = block(&name, n, k, eps, n_quad, ctx.seed)?;
    let mut t = Table::new(&["slot", "word", "zeta"]);
    for (j, s) in b.table.slots.iter().enumerate() {
        for (w, z) in s.words.iter().zip(&s.zeta) {
            let w: Vec<String> = w.iter().map(|x| x.to_string()).collect();
            t.push(vec![(j + 1).to_string(), w.join(""), num(*z)]);
        }
    }
    let config = json!({ "system": name, "n": n, "k": k, "eps": eps, "n_quad": n_quad, "seed": ctx.seed });
    Ok(Output::new(config, to_value(&b.table), t))
}

fn sum(a: SumArgs, ctx: &Ctx) -> CliResult<Output> {
    let name = a.system.unwrap_or_else(|| "nonlinear".into());
    let d = SumProductParams::default();
    let p = SumProductParams {
        n: at_least("n", a.n.unwrap_or(d.n), 1)?,
        k: at_least("k", a.k.unwrap_or(d.k), 1)?,
        eps: positive("eps", a.eps.unwrap_or(d.eps))?,
        eps0: a.eps0.map(|e| positive("eps0", e)).transpose()?,
        n_blocks: at_least("blocks", a.blocks.unwrap_or(d.n_blocks), 1)?,
        eta_points: at_least("eta_points", a.eta_points.unwrap_or(d.eta_points), 1)?,
        term_budget: a.term_budget.unwrap_or(d.term_budget),
        seed: ctx.seed,
        ..d
    };
    let sys = normalized(&name)?;
    let r = sumproduct::run(&sys, &p, ctx.workers)?;
    let mut t = Table::new(&["eta", "modulus"]);
    for (e, m) in r.eta.iter().zip(&r.modulus) {
        t.push(vec![num(*e), num(*m)]);
    }
    Ok(Output::new(json!({ "system": name, "params": p, "seed": ctx.seed }), to_value(&r), t))
}

fn nc(a: NcArgs, ctx: &Ctx) -> CliResult<Output> {
    let name = a.system.unwrap_or_else(|| "nonlinear".into());
    let n = at_least("n", a.n.unwrap_or(6), 1)?;
    let k = at_least("k", a.k.unwrap_or(3), 1)?;
    let eps = positive("eps", a.eps.unwrap_or(0.1))?;
    let eps1 = positive("eps1", a.eps1.unwrap_or(1.0))?;
    let points = at_least("sigma_points", a.sigma_points.unwrap_or(12), 2)?;
    let b = block(&name, n, k, eps, 8, ctx.seed)?;
    let (lo, hi) = sumproduct::nc_window(b.eps0, eps1, n);
    let sigma = crate::stats::log_grid(lo, hi, points);
    let counters = sumproduct::nc_counter(&b.table, &sigma, 1.0);
    let gamma = sumproduct::fit_gamma(&counters);
    let mut t = Table::new(&["slot", "sigma", "pair_count", "slot_size", "bound_ratio"]);
    for c in &counters {
        t.push(vec![c.slot.to_string(), num(c.sigma), c.pair_count.to_string(), c.slot_size.to_string(), num(c.bound_ratio)]);
    }
    let _ = &b.sys;
    let config = json!({ "system": name, "n": n, "k": k, "eps": eps, "eps1": eps1, "sigma_points": points, "seed": ctx.seed });
    Ok(Output::new(config, json!({ "counters": counters, "gamma_fit": gamma, "eps0": b.eps0 }), t))
}

fn verify_cmd(a: VerifyArgs, ctx: &Ctx) -> CliResult<Output> {
    let suite = if a.full { Suite::Full } else { Suite::Fast };
    let r = verify::run_suite(suite, ctx.workers);
    let mut t = Table::new(&["id", "name", "passed", "error"]);
    let mut checks = BTreeMap::new();
    for c in &r.criteria {
        println!("c{:02} {} {}", c.id, if c.passed { "PASS" } else { "FAIL" }, c.name);
        t.push(vec![c.id.to_string(), c.name.clone(), c.passed.to_string(), c.error.clone().unwrap_or_default()]);
        checks.insert(format!("c{:02}", c.id), c.passed);
    }
    let failed = !r.all_passed();
    let mut out = Output::new(json!({ "suite": suite, "seed": r.seed }), to_value(&r), t);
    out.checks = Some(checks);
    out.failed = failed;
    Ok(out)
}

/// Leaf names accepted without their group, e.g. `quasitrace cocycle --v 0.01`.
const LEAVES: [(&str, &str); 17] = [
    ("fixed-point", "trace-map"),
    ("cocycle", "trace-map"),
    ("taylor", "trace-map"),
    ("cover", "spectrum"),
    ("dos", "spectrum"),
    ("correlate", "spectrum"),
    ("fit-decay", "spectrum"),
    ("words", "thermo"),
    ("constants", "thermo"),
    ("regular", "thermo"),
    ("frame", "hyperbolic"),
    ("delta", "hyperbolic"),
    ("qnl", "hyperbolic"),
    ("holonomy", "hyperbolic"),
    ("zeta", "sumproduct"),
    ("sum", "sumproduct"),
    ("nc", "sumproduct"),
];

const VALUE_FLAGS: [&str; 5] = ["--config", "--out", "--workers", "--format", "--seed"];

fn expand_shorthand(args: Vec<OsString>) -> Vec<OsString> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if VALUE_FLAGS.contains(&a.as_ref()) {
            i += 2;
            continue;
        }
        if a.starts_with('-') {
            i += 1;
            continue;
        }
        if let Some((_, group)) = LEAVES.iter().find(|(leaf, _)| *leaf == a) {
            let mut out = args.clone();
            out.insert(i, (*group).into());
            return out;
        }
        break;
    }
    args
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::TraceMap(TraceMapCmd::FixedPoint(_)) => "trace-map fixed-point",
        Command::TraceMap(TraceMapCmd::Cocycle(_)) => "trace-map cocycle",
        Command::TraceMap(TraceMapCmd::Taylor(_)) => "trace-map taylor",
        Command::Spectrum(SpectrumCmd::Cover(_)) => "spectrum cover",
        Command::Spectrum(SpectrumCmd::Dos(_)) => "spectrum dos",
        Command::Spectrum(SpectrumCmd::Correlate(_)) => "spectrum correlate",
        Command::Spectrum(SpectrumCmd::FitDecay(_)) => "spectrum fit-decay",
        Command::Thermo(ThermoCmd::Words(_)) => "thermo words",
        Command::Thermo(ThermoCmd::Constants(_)) => "thermo constants",
        Command::Thermo(ThermoCmd::Regular(_)) => "thermo regular",
        Command::Hyperbolic(HyperbolicCmd::Frame(_)) => "hyperbolic frame",
        Command::Hyperbolic(HyperbolicCmd::Delta(_)) => "hyperbolic delta",
        Command::Hyperbolic(HyperbolicCmd::Qnl(_)) => "hyperbolic qnl",
        Command::Hyperbolic(HyperbolicCmd::Holonomy(_)) => "hyperbolic holonomy",
        Command::Sumproduct(SumProductCmd::Zeta(_)) => "sumproduct zeta",
        Command::Sumproduct(SumProductCmd::Sum(_)) => "sumproduct sum",
        Command::Sumproduct(SumProductCmd::Nc(_)) => "sumproduct nc",
        Command::Verify(_) => "verify",
    }
}

fn dispatch(c: Command, cfg: &Map<String, Value>, ctx: &Ctx) -> CliResult<Output> {
    match c {
        Command::TraceMap(TraceMapCmd::FixedPoint(a)) => fixed_point(merge(&a, cfg)?, ctx),
        Command::TraceMap(TraceMapCmd::Cocycle(a)) => cocycle(merge(&a, cfg)?, ctx),
        Command::TraceMap(TraceMapCmd::Taylor(a)) => taylor(merge(&a, cfg)?, ctx),
        Command::Spectrum(SpectrumCmd::Cover(a)) => cover(merge(&a, cfg)?, ctx),
        Command::Spectrum(SpectrumCmd::Dos(a)) => dos(merge(&a, cfg)?, ctx),
        Command::Spectrum(SpectrumCmd::Correlate(a)) => correlate(merge(&a, cfg)?, ctx),
        Command::Spectrum(SpectrumCmd::FitDecay(a)) => fit_decay(merge(&a, cfg)?, ctx),
        Command::Thermo(ThermoCmd::Words(a)) => words(merge(&a, cfg)?, ctx),
        Command::Thermo(ThermoCmd::Constants(a)) => constants(merge(&a, cfg)?, ctx),
        Command::Thermo(ThermoCmd::Regular(a)) => regular(merge(&a, cfg)?, ctx),
        Command::Hyperbolic(HyperbolicCmd::Frame(a)) => frame(merge(&a, cfg)?, ctx),
        Command::Hyperbolic(HyperbolicCmd::Delta(a)) => delta_cmd(merge(&a, cfg)?, ctx),
        Command::Hyperbolic(HyperbolicCmd::Qnl(a)) => qnl(merge(&a, cfg)?, ctx),
        Command::Hyperbolic(HyperbolicCmd::Holonomy(a)) => holonomy(merge(&a, cfg)?, ctx),
        Command::Sumproduct(SumProductCmd::Zeta(a)) => zeta(merge(&a, cfg)?, ctx),
        Command::Sumproduct(SumProductCmd::Sum(a)) => sum(merge(&a, cfg)?, ctx),
        Command::Sumproduct(SumProductCmd::Nc(a)) => nc(merge(&a, cfg)?, ctx),
        Command::Verify(a) => {
            // flags win over the config; `--fast` clears a configured full suite
            let mut a = merge(&a, cfg)?;
            if a.fast {
                a.full = false;
            }
            verify_cmd(a, ctx)
        }
    }
}

/// SHA-256 of the canonical (sorted-key) JSON of command, config and version.
pub fn manifest_hash(command: &str, config: &Value) -> String {
    let canon = json!({ "command": command, "config": config, "version": env!("CARGO_PKG_VERSION") });
    let digest = Sha256::digest(serde_json::to_vec(&canon).expect("serializable"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, t: &Table, hash: &str) -> CliResult<()> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<&str> = t.header.clone();
    header.push("manifest_hash");
    w.write_record(&header).map_err(io)?;
    for row in &t.rows {
        w.write_record(row.iter().map(|s| s.as_str()).chain([hash])).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn take_global<T: DeserializeOwned>(cfg: &mut Map<String, Value>, key: &str) -> CliResult<Option<T>> {
    match cfg.remove(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| CliError::Config(format!("{key}: {e}"))),
    }
}

/// Parses, runs and writes artifacts; returns the artifact path and whether
/// the run reported failed checks.
pub fn run(cli: Cli) -> CliResult<(PathBuf, bool)> {
    let start = Instant::now();
    let mut cfg = match &cli.config {
        None => Map::new(),
        Some(p) => match read_json(p)? {
            Value::Object(m) => m,
            _ => return Err(CliError::Config(format!("{}: expected a JSON object", p.display()))),
        },
    };
    let seed = cli.seed.or(take_global(&mut cfg, "seed")?).unwrap_or(0);
    let out_dir = cli.out.clone().or(take_global(&mut cfg, "out")?).unwrap_or_else(|| PathBuf::from("out"));
    let format = cli.format.or(take_global(&mut cfg, "format")?).unwrap_or(Format::Json);
    let workers = Workers(cli.workers.unwrap_or(0));
    let name = command_name(&cli.command);
    let ctx = Ctx { seed, workers };
    let out = dispatch(cli.command, &cfg, &ctx)?;

    let hash = manifest_hash(name, &out.config);
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let stem = name.replace(' ', "-");
    let path = match format {
        Format::Json => {
            let p = out_dir.join(format!("{stem}.json"));
            let art = json!({ "manifest_hash": hash, "command": name, "config": out.config, "result": out.result });
            let mut bytes = serde_json::to_vec_pretty(&art).expect("serializable");
            bytes.push(b'\n');
            write_file(&p, &bytes)?;
            p
        }
        Format::Csv => {
            let p = out_dir.join(format!("{stem}.csv"));
            write_csv(&p, &out.table, &hash)?;
            p
        }
    };
    let manifest = json!({
        "manifest_hash": hash,
        "command": name,
        "config": out.config,
        "artifact": path.file_name().map(|f| f.to_string_lossy().to_string()),
        "versions": { "quasitrace": env!("CARGO_PKG_VERSION") },
        "workers": workers.0,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "checks": out.checks,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
    bytes.push(b'\n');
    write_file(&out_dir.join(format!("{stem}.manifest.json")), &bytes)?;
    Ok((path, out.failed))
}

/// Process entry point; returns the exit status.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(expand_shorthand(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok((path, failed)) => {
            println!("{}", path.display());
            i32::from(failed)
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    #[test]
    fn shorthand_inserts_the_group() {
        let a = expand_shorthand(args("quasitrace --seed 3 cocycle --v 0.01"));
        assert_eq!(a, args("quasitrace --seed 3 trace-map cocycle --v 0.01"));
        let b = expand_shorthand(args("quasitrace trace-map cocycle"));
        assert_eq!(b, args("quasitrace trace-map cocycle"));
    }

    #[test]
    fn flags_override_config() {
        let cfg: Map<String, Value> = serde_json::from_str(r#"{"v": 0.2, "sites": 512}"#).unwrap();
        let a = DosArgs { v: Some(0.3), sites: None, phases: None, bins: None };
        let m = merge(&a, &cfg).unwrap();
        assert_eq!(m.v, Some(0.3));
        assert_eq!(m.sites, Some(512));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let cfg: Map<String, Value> = serde_json::from_str(r#"{"vv": 0.2}"#).unwrap();
        let a = VArgs { v: None };
        assert!(matches!(merge(&a, &cfg), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_depends_on_config_only() {
        let a = manifest_hash("x", &json!({ "v": 1.0, "seed": 0 }));
        let b = manifest_hash("x", &json!({ "seed": 0, "v": 1.0 }));
        let c = manifest_hash("x", &json!({ "seed": 1, "v": 1.0 }));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn error_families_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::InvalidInput("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::StepTooSmall).exit_code(), 3);
        assert_eq!(CliError::Io("x".into()).exit_code(), 4);
    }
}
