//! Batch runner behind the `recollide` binary.
//!
//! Every parameter can come from a flag, from a `key=value` file given by
//! `--config`, or from a built-in default, in that order of precedence. The
//! seed additionally falls back to `RECOLLIDE_SEED`. Exit codes: 0 success,
//! 1 estimator or I/O failure, 2 invalid configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::estimators::{
    classifier_sweep, dispersive_sweep, estimate_exit_tv, estimate_lambda_tail, estimate_mu_tails, fit_loglog_slope,
    indirect_prob_mc, indirect_prob_quadrature, EstimatorError, Regime,
};
use crate::geom3::{UnitVec3, Vec3};
use crate::lorentz::{run_coupled, GasConfig, GasError, Mechanisms, Path};
use crate::sampling::{
    cross_decomposition, cross_norm_cdf, domain, sample_exp_unit_conditioned, sample_unit_sphere, RngStream,
};
use crate::stats::{chi_square_uniform_pvalue, ks_critical_1pct, ks_statistic, mean_stderr, EqualAreaBins};
use crate::two_scatterer::{
    classify_recollision, classify_shadowing, simulate_bounce, LineMode, RecollisionEvent, DEFAULT_N_MAX,
};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const SEED_ENV: &str = "RECOLLIDE_SEED";
const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "recollide", version = VERSION, about = "Recollision experiments for the hard-sphere Lorentz gas")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// 64-bit seed (falls back to RECOLLIDE_SEED, then 1)
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Sample budget; accepts forms like 2e6
    #[arg(long, global = true)]
    budget: Option<String>,
    /// Output file (stdout when absent)
    #[arg(long, global = true)]
    out: Option<String>,
    /// csv or json
    #[arg(long, global = true)]
    format: Option<String>,
    /// Worker threads
    #[arg(long, global = true)]
    threads: Option<String>,
    /// File of key=value lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collision trace of one two-scatterer event
    Bounce {
        #[command(flatten)]
        common: Common,
        /// Outgoing velocity after the first collision, "x,y,z"
        #[arg(long, allow_hyphen_values = true)]
        u: Option<String>,
        /// Flight time between the first two collisions
        #[arg(long)]
        xi: Option<String>,
        /// Outgoing velocity after the second collision, "x,y,z"
        #[arg(long, allow_hyphen_values = true)]
        v: Option<String>,
        #[arg(long)]
        r: Option<String>,
        #[arg(long)]
        n_max: Option<String>,
    },
    /// Tail masses and fitted power-law exponent for one regime
    Tails {
        #[command(flatten)]
        common: Common,
        /// short, long-n3, long-n4plus, trap-n3 or trap-n4plus
        #[arg(long)]
        regime: Option<String>,
        /// Threshold grid, comma separated
        #[arg(long)]
        s: Option<String>,
        /// lambda (unit radius) or mu (radius --r)
        #[arg(long)]
        measure: Option<String>,
        #[arg(long)]
        r: Option<String>,
    },
    /// Total-variation distance of the conditional exit law from uniform
    ExitDist {
        #[command(flatten)]
        common: Common,
        /// Conditioning thresholds, comma separated
        #[arg(long)]
        r_grid: Option<String>,
        #[arg(long)]
        bins: Option<String>,
        /// Reference direction for the cosine statistic, "x,y,z"
        #[arg(long, allow_hyphen_values = true)]
        nu: Option<String>,
    },
    /// Indirect recollision probability by quadrature and Monte Carlo
    Indirect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps_grid: Option<String>,
    },
    /// Coupled X/Y/Z gas paths
    Gas {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        horizon: Option<String>,
        #[arg(long)]
        n_paths: Option<String>,
        /// Number of evenly spaced MSD sample times
        #[arg(long)]
        msd_points: Option<String>,
        /// CSV of the path knots
        #[arg(long)]
        dump_paths: Option<String>,
        /// Disable the shadowing and recollision rules of Z
        #[arg(long)]
        no_classifiers: bool,
        /// Disable capsule rejection in X
        #[arg(long)]
        no_thinning: bool,
        /// Disable collisions with revealed scatterers in X
        #[arg(long)]
        no_placed: bool,
    },
    /// Invariant and sampler checks
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

/// Invalid configuration (exit code 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Lambda,
    Mu,
}

#[derive(Debug, Clone)]
pub enum Job {
    Bounce { u: UnitVec3, xi: f64, v: UnitVec3, r: f64, n_max: usize },
    Tails { regime: Regime, s_grid: Vec<f64>, measure: Measure, r: f64 },
    ExitDist { r_grid: Vec<f64>, bins: usize, nu: UnitVec3 },
    Indirect { eps_grid: Vec<f64> },
    Gas { gas: GasConfig, msd_points: usize, dump_paths: Option<PathBuf> },
    Selftest,
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub job: Job,
    pub seed: u64,
    pub budget: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub threads: Option<usize>,
    /// The merged parameters as given, echoed into the output.
    pub effective: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn subcommand(&self) -> &'static str {
        match self.job {
            Job::Bounce { .. } => "bounce",
            Job::Tails { .. } => "tails",
            Job::ExitDist { .. } => "exit-dist",
            Job::Indirect { .. } => "indirect",
            Job::Gas { .. } => "gas",
            Job::Selftest => "selftest",
        }
    }
}

fn read_config_file(path: &FsPath) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

/// Layered parameter lookup: flags over file values.
struct Params {
    map: BTreeMap<String, String>,
    used: Vec<&'static str>,
}

impl Params {
    fn set(&mut self, key: &str, flag: &Option<String>) {
        if let Some(v) = flag {
            self.map.insert(key.to_string(), v.clone());
        }
    }

    fn get(&mut self, key: &'static str) -> Option<String> {
        self.used.push(key);
        self.map.get(key).cloned()
    }

    fn parsed<T>(&mut self, key: &'static str, default: T, mut parse: impl FnMut(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => parse(&s).map_err(|e| ConfigError(format!("--{}: {e}", key.replace('_', "-")))),
        }
    }

    fn required<T>(&mut self, key: &'static str, mut parse: impl FnMut(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        let flag = key.replace('_', "-");
        let s = self.get(key).ok_or_else(|| ConfigError(format!("missing required --{flag}")))?;
        parse(&s).map_err(|e| ConfigError(format!("--{flag}: {e}")))
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let x: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !x.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(x)
}

fn positive(s: &str) -> Result<f64, String> {
    let x = parse_f64(s)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("must be positive, got {x}"))
    }
}

/// Non-negative integer, also written as `2e6`.
fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(n) = s.trim().parse::<u64>() {
        return Ok(n);
    }
    let x = parse_f64(s)?;
    if x < 0.0 || x.fract() != 0.0 || x > u64::MAX as f64 {
        return Err(format!("'{s}' is not a non-negative integer"));
    }
    Ok(x as u64)
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s.split(',').map(positive).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("empty list".into());
    }
    Ok(v)
}

fn parse_increasing(s: &str) -> Result<Vec<f64>, String> {
    let v = parse_list(s)?;
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err("values must increase".into());
    }
    Ok(v)
}

/// A comma-separated triple, normalized; the flag name goes into the warning.
fn parse_direction(s: &str, warnings: &mut Vec<String>, name: &str) -> Result<UnitVec3, String> {
    let parts: Vec<f64> = s.split(',').map(parse_f64).collect::<Result<_, _>>()?;
    let [x, y, z] = parts[..] else {
        return Err(format!("expected three comma-separated components, got {}", parts.len()));
    };
    let v = Vec3::new(x, y, z);
    let n = v.norm();
    if !(n > 0.0) {
        return Err("zero vector".into());
    }
    if (n - 1.0).abs() > 1e-6 {
        warnings.push(format!("--{name} has norm {n}; normalized"));
    }
    UnitVec3::new(v / n).map_err(|e| e.to_string())
}

fn env_seed() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => parse_count(&s).map(Some).map_err(|e| ConfigError(format!("{SEED_ENV}: {e}"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Merges flags, config file, environment and defaults, and validates.
    pub fn from_cli(cli: Cli) -> Result<RunConfig, ConfigError> {
        let common = match &cli.command {
            Command::Bounce { common, .. }
            | Command::Tails { common, .. }
            | Command::ExitDist { common, .. }
            | Command::Indirect { common, .. }
            | Command::Gas { common, .. }
            | Command::Selftest { common } => common.clone(),
        };
        let map = match &common.config {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        let mut p = Params { map, used: Vec::new() };
        p.set("seed", &common.seed);
        p.set("budget", &common.budget);
        p.set("out", &common.out);
        p.set("format", &common.format);
        p.set("threads", &common.threads);
        let mut warnings = Vec::new();
        let (job, default_budget, default_format) = match &cli.command {
            Command::Bounce { u, xi, v, r, n_max, .. } => {
                for (k, f) in [("u", u), ("xi", xi), ("v", v), ("r", r), ("n_max", n_max)] {
                    p.set(k, f);
                }
                let u = p.required("u", |s| parse_direction(s, &mut warnings, "u"))?;
                let v = p.required("v", |s| parse_direction(s, &mut warnings, "v"))?;
                let xi = p.required("xi", positive)?;
                let r = p.parsed("r", 1.0, positive)?;
                let n_max = p.parsed("n_max", DEFAULT_N_MAX as u64, parse_count)? as usize;
                if n_max < 2 {
                    return Err(ConfigError("--n-max must be at least 2".into()));
                }
                RecollisionEvent::new(u, xi, v, r).map_err(|e| ConfigError(format!("invalid event: {e}")))?;
                (Job::Bounce { u, xi, v, r, n_max }, 0, Format::Csv)
            }
            Command::Tails { regime, s, measure, r, .. } => {
                for (k, f) in [("regime", regime), ("s", s), ("measure", measure), ("r", r)] {
                    p.set(k, f);
                }
                let regime = p.parsed("regime", Regime::TrapN3, |s| s.parse())?;
                let s_grid = p.parsed("s", vec![20.0, 40.0, 80.0, 160.0], parse_increasing)?;
                let measure = p.parsed("measure", Measure::Lambda, |s| match s {
                    "lambda" => Ok(Measure::Lambda),
                    "mu" => Ok(Measure::Mu),
                    _ => Err(format!("unknown measure '{s}' (expected lambda or mu)")),
                })?;
                let r = p.parsed("r", 0.05, positive)?;
                if measure == Measure::Mu && r > 0.1 {
                    return Err(ConfigError(format!("--r must lie in (0, 0.1], got {r}")));
                }
                if s_grid.len() < 4 {
                    return Err(ConfigError("--s needs at least 4 thresholds for a slope fit".into()));
                }
                (Job::Tails { regime, s_grid, measure, r }, 1_000_000, Format::Json)
            }
            Command::ExitDist { r_grid, bins, nu, .. } => {
                for (k, f) in [("r_grid", r_grid), ("bins", bins), ("nu", nu)] {
                    p.set(k, f);
                }
                let r_grid = p.parsed("r_grid", vec![10.0, 20.0, 40.0, 80.0], parse_increasing)?;
                let bins = p.parsed("bins", 192, parse_count)? as usize;
                EqualAreaBins::new(bins).map_err(|e| ConfigError(format!("--bins: {e}")))?;
                let nu = p.parsed("nu", UnitVec3::e3(), |s| parse_direction(s, &mut warnings, "nu"))?;
                (Job::ExitDist { r_grid, bins, nu }, 1_000_000, Format::Json)
            }
            Command::Indirect { eps_grid, .. } => {
                p.set("eps_grid", eps_grid);
                let eps_grid = p.parsed("eps_grid", vec![0.1, 0.03, 0.01], parse_list)?;
                if eps_grid.iter().any(|e| *e >= 1.0) {
                    return Err(ConfigError("--eps-grid values must lie in (0, 1)".into()));
                }
                (Job::Indirect { eps_grid }, 1_000_000, Format::Json)
            }
            Command::Gas { eps, horizon, n_paths, msd_points, dump_paths, no_classifiers, no_thinning, no_placed, .. } => {
                for (k, f) in
                    [("eps", eps), ("horizon", horizon), ("n_paths", n_paths), ("msd_points", msd_points), ("dump_paths", dump_paths)]
                {
                    p.set(k, f);
                }
                for (k, f) in [("no_classifiers", no_classifiers), ("no_thinning", no_thinning), ("no_placed", no_placed)] {
                    if *f {
                        p.map.insert(k.into(), "true".into());
                    }
                }
                let eps = p.parsed("eps", 0.05, positive)?;
                let horizon = p.parsed("horizon", 100.0, positive)?;
                let n_paths = p.parsed("n_paths", 1000, parse_count)? as usize;
                let msd_points = p.parsed("msd_points", 10, parse_count)? as usize;
                let dump_paths = p.get("dump_paths").map(PathBuf::from);
                let flag = |s: &str| s.parse::<bool>().map_err(|_| format!("'{s}' is not true or false"));
                let mechanisms = Mechanisms {
                    classifiers: !p.parsed("no_classifiers", false, flag)?,
                    thinning: !p.parsed("no_thinning", false, flag)?,
                    placed: !p.parsed("no_placed", false, flag)?,
                };
                if n_paths == 0 || msd_points == 0 {
                    return Err(ConfigError("--n-paths and --msd-points must be positive".into()));
                }
                let mut gas = GasConfig::new(eps, horizon, 0, n_paths).map_err(|e| ConfigError(e.to_string()))?;
                gas.mechanisms = mechanisms;
                (Job::Gas { gas, msd_points, dump_paths }, 0, Format::Json)
            }
            Command::Selftest { .. } => (Job::Selftest, 100_000, Format::Json),
        };
        let seed = match p.get("seed") {
            Some(s) => parse_count(&s).map_err(|e| ConfigError(format!("--seed: {e}")))?,
            None => env_seed()?.unwrap_or(DEFAULT_SEED),
        };
        let budget = p.parsed("budget", default_budget, parse_count)?;
        if default_budget > 0 && budget < 2 {
            return Err(ConfigError("--budget must be at least 2".into()));
        }
        let format = p.parsed("format", default_format, |s| match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format '{s}' (expected csv or json)")),
        })?;
        let threads = match p.get("threads") {
            None => None,
            Some(s) => match parse_count(&s) {
                Ok(n) if n > 0 => Some(n as usize),
                _ => return Err(ConfigError(format!("--threads: '{s}' is not a positive integer"))),
            },
        };
        let out = p.get("out").map(PathBuf::from);
        if let Some(k) = p.map.keys().find(|k| !p.used.contains(&k.as_str())) {
            return Err(ConfigError(format!("unknown parameter '{k}' for this subcommand")));
        }
        let mut effective = p.map;
        // Results do not depend on the pool size, so it stays out of the echo.
        effective.remove("threads");
        effective.insert("seed".into(), seed.to_string());
        if default_budget > 0 {
            effective.insert("budget".into(), budget.to_string());
        }
        let mut job = job;
        if let Job::Gas { gas, .. } = &mut job {
            gas.seed = seed;
        }
        Ok(RunConfig { job, seed, budget, out, format, threads, effective, warnings })
    }
}

/// Estimator or output failure (exit code 1).
#[derive(Debug)]
pub enum RunError {
    Estimator(EstimatorError),
    Gas(GasError),
    Io(io::Error),
    Failed(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Estimator(e) => write!(f, "estimator failed: {e}"),
            RunError::Gas(e) => write!(f, "gas simulation failed: {e}"),
            RunError::Io(e) => write!(f, "output failed: {e}"),
            RunError::Failed(s) => f.write_str(s),
        }
    }
}

impl From<EstimatorError> for RunError {
    fn from(e: EstimatorError) -> Self {
        RunError::Estimator(e)
    }
}

impl From<GasError> for RunError {
    fn from(e: GasError) -> Self {
        RunError::Gas(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

/// Either a JSON object or CSV rows.
enum Payload {
    Json(Map<String, Value>),
    Csv { header: Vec<String>, rows: Vec<Vec<String>> },
}

/// Writes `{:.16e}` doubles, i.e. 17 significant digits.
struct Precise(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for Precise {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` with 17 significant digits per double.
pub fn to_json_string(value: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Precise(serde_json::ser::PrettyFormatter::new()));
    serde::Serialize::serialize(value, &mut ser).expect("in-memory serialization");
    String::from_utf8(buf).expect("json is utf-8")
}

fn render(cfg: &RunConfig, payload: Payload, wall: f64) -> Result<Vec<u8>, RunError> {
    match payload {
        Payload::Json(mut obj) => {
            obj.insert("subcommand".into(), json!(cfg.subcommand()));
            obj.insert("seed".into(), json!(cfg.seed));
            obj.insert("version".into(), json!(VERSION));
            obj.insert("config".into(), json!(cfg.effective));
            // Kept last so it occupies the final line.
            let mut text = to_json_string(&Value::Object(obj));
            text.truncate(text.len() - 2);
            text.push_str(&format!(",\n  \"wall_time_s\": {wall:.16e}\n}}\n"));
            Ok(text.into_bytes())
        }
        Payload::Csv { header, rows } => {
            let mut buf = format!("# recollide {VERSION} subcommand={} seed={} wall_time_s={wall:.6}\n", cfg.subcommand(), cfg.seed)
                .into_bytes();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(&header).map_err(|e| RunError::Failed(e.to_string()))?;
                for r in &rows {
                    w.write_record(r).map_err(|e| RunError::Failed(e.to_string()))?;
                }
                w.flush()?;
            }
            Ok(buf)
        }
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &FsPath, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => FsPath::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn run_bounce(cfg: &RunConfig, u: UnitVec3, xi: f64, v: UnitVec3, r: f64, n_max: usize) -> Result<Payload, RunError> {
    let event = RecollisionEvent::new(u, xi, v, r).map_err(|e| RunError::Failed(e.to_string()))?;
    let trace = simulate_bounce(&event, n_max).map_err(|e| RunError::Failed(e.to_string()))?;
    let rows: Vec<Vec<String>> = (1..=trace.n)
        .map(|k| {
            let p = trace.points[k - 1];
            let w = trace.w[k];
            vec![
                k.to_string(),
                f(trace.tau[k - 1]),
                f(p.x),
                f(p.y),
                f(p.z),
                f(w.x()),
                f(w.y()),
                f(w.z()),
                trace.sphere[k - 1].id().to_string(),
            ]
        })
        .collect();
    Ok(match cfg.format {
        Format::Csv => Payload::Csv {
            header: ["k", "tau", "x", "y", "z", "wx", "wy", "wz", "sphere_id"].map(String::from).to_vec(),
            rows,
        },
        Format::Json => {
            let mut o = Map::new();
            o.insert("n".into(), json!(trace.n));
            o.insert("beta".into(), json!(trace.beta));
            o.insert("w_exit".into(), json!([trace.w_exit.x(), trace.w_exit.y(), trace.w_exit.z()]));
            o.insert("truncated".into(), json!(trace.truncated));
            o.insert("shadowing".into(), json!(classify_shadowing(&event, LineMode::Full)));
            o.insert(
                "recollision".into(),
                json!(classify_recollision(&event, LineMode::Full).map_err(|e| RunError::Failed(e.to_string()))?),
            );
            o.insert("tau".into(), json!(trace.tau));
            o.insert("points".into(), json!(trace.points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>()));
            o.insert("sphere_id".into(), json!(trace.sphere.iter().map(|s| s.id()).collect::<Vec<_>>()));
            Payload::Json(o)
        }
    })
}

fn run_tails(cfg: &RunConfig, regime: Regime, s_grid: &[f64], measure: Measure, r: f64) -> Result<Payload, RunError> {
    let est = match measure {
        Measure::Lambda => estimate_lambda_tail(regime, s_grid, cfg.budget, cfg.seed)?,
        Measure::Mu => estimate_mu_tails(r, regime, s_grid, cfg.budget, cfg.seed)?,
    };
    Ok(match cfg.format {
        Format::Csv => Payload::Csv {
            header: ["s", "p_hat", "stderr", "n_effective"].map(String::from).to_vec(),
            rows: (0..est.s_values.len())
                .map(|i| vec![f(est.s_values[i]), f(est.p_hat[i]), f(est.stderr[i]), est.n_effective[i].to_string()])
                .collect(),
        },
        Format::Json => {
            let mut o = Map::new();
            o.insert("regime".into(), json!(regime.name()));
            o.insert("measure".into(), json!(if measure == Measure::Lambda { "lambda" } else { "mu" }));
            if measure == Measure::Mu {
                o.insert("r".into(), json!(r));
            }
            o.insert("s_values".into(), json!(est.s_values));
            o.insert("p_hat".into(), json!(est.p_hat));
            o.insert("stderr".into(), json!(est.stderr));
            o.insert("n_effective".into(), json!(est.n_effective));
            o.insert("slope".into(), json!(est.slope));
            o.insert("slope_ci_lo".into(), json!(est.slope_ci.0));
            o.insert("slope_ci_hi".into(), json!(est.slope_ci.1));
            o.insert("dropped".into(), json!(est.dropped));
            o.insert("truncated".into(), json!(est.truncated));
            o.insert("degenerate".into(), json!(est.degenerate));
            o.insert("tail_bound".into(), json!(est.tail_bound));
            o.insert("budget".into(), json!(est.budget));
            Payload::Json(o)
        }
    })
}

fn run_exit_dist(cfg: &RunConfig, r_grid: &[f64], bins: usize, nu: &UnitVec3) -> Result<Payload, RunError> {
    let ests = r_grid
        .iter()
        .map(|&r| estimate_exit_tv(r, nu, cfg.budget, bins, cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let col = |g: fn(&crate::estimators::TvEstimate) -> f64| ests.iter().map(g).collect::<Vec<f64>>();
    Ok(match cfg.format {
        Format::Csv => Payload::Csv {
            header: ["r_cond", "tv_hat", "stderr", "bias", "tv_corrected", "n_conditioned", "ks_costheta", "ks_pvalue"]
                .map(String::from)
                .to_vec(),
            rows: ests
                .iter()
                .map(|e| {
                    vec![
                        f(e.r_cond),
                        f(e.tv_hat),
                        f(e.stderr),
                        f(e.bias),
                        f(e.corrected()),
                        e.n_conditioned.to_string(),
                        f(e.ks_costheta),
                        f(e.ks_pvalue),
                    ]
                })
                .collect(),
        },
        Format::Json => {
            let mut o = Map::new();
            o.insert("r_values".into(), json!(r_grid));
            o.insert("bins".into(), json!(bins));
            o.insert("tv_hat".into(), json!(col(|e| e.tv_hat)));
            o.insert("stderr".into(), json!(col(|e| e.stderr)));
            o.insert("bias".into(), json!(col(|e| e.bias)));
            o.insert("tv_corrected".into(), json!(col(|e| e.corrected())));
            o.insert("n_conditioned".into(), json!(ests.iter().map(|e| e.n_conditioned).collect::<Vec<_>>()));
            o.insert("ks_costheta".into(), json!(col(|e| e.ks_costheta)));
            o.insert("ks_pvalue".into(), json!(col(|e| e.ks_pvalue)));
            if r_grid.len() >= 4 {
                let fit = fit_loglog_slope(r_grid, &col(|e| e.tv_hat), &col(|e| e.stderr));
                if let Ok((slope, (lo, hi))) = fit {
                    o.insert("slope".into(), json!(slope));
                    o.insert("slope_ci_lo".into(), json!(lo));
                    o.insert("slope_ci_hi".into(), json!(hi));
                }
            }
            Payload::Json(o)
        }
    })
}

fn run_indirect(cfg: &RunConfig, eps_grid: &[f64]) -> Result<Payload, RunError> {
    let rows: Vec<(f64, f64, f64, u64, f64)> = eps_grid
        .iter()
        .map(|&e| {
            let (p, se, hits) = indirect_prob_mc(e, cfg.budget, cfg.seed);
            (e, p, se, hits, indirect_prob_quadrature(e))
        })
        .collect();
    Ok(match cfg.format {
        Format::Csv => Payload::Csv {
            header: ["eps", "p_mc", "stderr", "hits", "p_quadrature"].map(String::from).to_vec(),
            rows: rows.iter().map(|r| vec![f(r.0), f(r.1), f(r.2), r.3.to_string(), f(r.4)]).collect(),
        },
        Format::Json => {
            let mut o = Map::new();
            o.insert("eps".into(), json!(rows.iter().map(|r| r.0).collect::<Vec<_>>()));
            o.insert("p_mc".into(), json!(rows.iter().map(|r| r.1).collect::<Vec<_>>()));
            o.insert("stderr".into(), json!(rows.iter().map(|r| r.2).collect::<Vec<_>>()));
            o.insert("hits".into(), json!(rows.iter().map(|r| r.3).collect::<Vec<_>>()));
            o.insert("p_quadrature".into(), json!(rows.iter().map(|r| r.4).collect::<Vec<_>>()));
            o.insert(
                "scaled_quadrature".into(),
                json!(rows.iter().map(|r| r.4 / (r.0 * r.0)).collect::<Vec<_>>()),
            );
            o.insert("budget".into(), json!(cfg.budget));
            Payload::Json(o)
        }
    })
}

#[derive(Default)]
struct GasPathStats {
    sq: [Vec<f64>; 3],
    mismatch: Option<f64>,
    legs: u64,
    shadowing: u64,
    recollision: u64,
    rejections: u64,
    placed_hits: u64,
    private_fresh: u64,
    bounce_n: Vec<usize>,
}

fn run_gas(cfg: &RunConfig, gas: &GasConfig, msd_points: usize, dump: Option<&FsPath>) -> Result<Payload, RunError> {
    let times: Vec<f64> = (1..=msd_points).map(|i| gas.horizon * i as f64 / msd_points as f64).collect();
    let results: Vec<Result<(GasPathStats, Option<[Path; 3]>), GasError>> = (0..gas.n_paths)
        .into_par_iter()
        .map(|i| {
            let c = run_coupled(gas, i)?;
            let paths = [&c.x.path, &c.y, &c.z.path];
            let mut s = GasPathStats {
                mismatch: c.mismatch_time,
                legs: c.legs_before_mismatch,
                shadowing: c.z.flags.iter().filter(|f| f.shadowing).count() as u64,
                recollision: c.z.flags.iter().filter(|f| f.recollision).count() as u64,
                rejections: c.x.counters.rejections,
                placed_hits: c.x.counters.placed_hits,
                private_fresh: c.x.counters.private_fresh,
                bounce_n: c.z.bounces.iter().map(|b| b.2).collect(),
                ..Default::default()
            };
            for (k, p) in paths.iter().enumerate() {
                s.sq[k] = times.iter().map(|&t| p.position(t).norm_squared()).collect();
            }
            let keep = dump.is_some().then(|| [c.x.path.clone(), c.y.clone(), c.z.path.clone()]);
            Ok((s, keep))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if let Some(path) = dump {
        let mut buf = format!("# recollide {VERSION} subcommand=gas seed={}\n", cfg.seed).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["path_id", "process", "t", "x", "y", "z"]).map_err(|e| RunError::Failed(e.to_string()))?;
            for (i, (_, paths)) in results.iter().enumerate() {
                for (name, p) in ["X", "Y", "Z"].iter().zip(paths.as_ref().expect("kept for dump")) {
                    let ends = p.knots.iter().map(|k| (k.t, k.pos)).chain(std::iter::once((p.horizon, p.end())));
                    for (t, x) in ends {
                        w.write_record([i.to_string(), name.to_string(), f(t), f(x.x), f(x.y), f(x.z)])
                            .map_err(|e| RunError::Failed(e.to_string()))?;
                    }
                }
            }
            w.flush()?;
        }
        write_atomic(path, &buf)?;
    }
    let stats: Vec<&GasPathStats> = results.iter().map(|r| &r.0).collect();
    let sum = |g: fn(&GasPathStats) -> u64| stats.iter().map(|s| g(s)).sum::<u64>();
    let mismatches = stats.iter().filter(|s| s.mismatch.is_some()).count() as u64;
    let legs = sum(|s| s.legs);
    let per_leg = mismatches as f64 / legs as f64;
    let mut msd = Map::new();
    let mut msd_rows = Vec::new();
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        let mut m = Vec::new();
        let mut se = Vec::new();
        for j in 0..times.len() {
            let xs: Vec<f64> = stats.iter().map(|s| s.sq[k][j]).collect();
            let (a, b) = mean_stderr(&xs);
            m.push(a);
            se.push(if xs.len() > 1 { b } else { 0.0 });
            msd_rows.push(vec![name.to_string(), f(times[j]), f(a), f(*se.last().expect("pushed"))]);
        }
        msd.insert(format!("msd_{name}"), json!(m));
        msd.insert(format!("msd_{name}_stderr"), json!(se));
    }
    let mut hist = BTreeMap::<usize, u64>::new();
    for s in &stats {
        for n in &s.bounce_n {
            *hist.entry(*n).or_default() += 1;
        }
    }
    Ok(match cfg.format {
        Format::Csv => Payload::Csv { header: ["process", "t", "msd", "stderr"].map(String::from).to_vec(), rows: msd_rows },
        Format::Json => {
            let mut o = Map::new();
            o.insert("eps".into(), json!(gas.eps));
            o.insert("rho".into(), json!(gas.rho));
            o.insert("horizon".into(), json!(gas.horizon));
            o.insert("n_paths".into(), json!(gas.n_paths));
            o.insert("mismatch_paths".into(), json!(mismatches));
            o.insert("legs_before_mismatch".into(), json!(legs));
            o.insert("mismatch_rate".into(), json!(per_leg));
            o.insert("mismatch_rate_stderr".into(), json!((mismatches as f64).sqrt() / legs as f64));
            let tm: Vec<f64> = stats.iter().filter_map(|s| s.mismatch).collect();
            if !tm.is_empty() {
                o.insert("mean_mismatch_time".into(), json!(mean_stderr(&tm).0));
            }
            o.insert("msd_t".into(), json!(times));
            o.extend(msd);
            o.insert("flag_shadowing".into(), json!(sum(|s| s.shadowing)));
            o.insert("flag_recollision".into(), json!(sum(|s| s.recollision)));
            o.insert("x_rejections".into(), json!(sum(|s| s.rejections)));
            o.insert("x_placed_hits".into(), json!(sum(|s| s.placed_hits)));
            o.insert("x_private_fresh".into(), json!(sum(|s| s.private_fresh)));
            o.insert(
                "bounce_n_histogram".into(),
                json!(hist.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>()),
            );
            Payload::Json(o)
        }
    })
}

/// One named check of the self-test.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Geometry invariants and sampler laws at a small budget.
pub fn selftest_checks(seed: u64, budget: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, passed: bool, detail: String| out.push(Check { name, passed, detail });

    let e = |x, y, z| UnitVec3::from_xyz(x, y, z).expect("unit");
    let ev = RecollisionEvent::new(e(0.0, 1.0, 0.0), 10.0, e(1.0, 0.0, 0.0), 1.0).expect("valid");
    let t = simulate_bounce(&ev, DEFAULT_N_MAX);
    check("two_collision_example", matches!(&t, Ok(t) if t.n == 2), format!("{:?}", t.as_ref().map(|t| t.n)));

    let ev = RecollisionEvent::new(e(0.0, 1.0, 0.0), 10.0, e(0.0, -1.0, 0.0), 1.0).expect("valid");
    let t = simulate_bounce(&ev, DEFAULT_N_MAX);
    check("head_on_return", matches!(&t, Ok(t) if t.n >= 3), format!("{:?}", t.as_ref().map(|t| t.n)));

    let cs = classifier_sweep(budget, seed);
    check(
        "classifier_matches_simulation",
        cs.disagreements == 0 && cs.prime_violations == 0,
        format!("disagreements={} cone_violations={} events={}", cs.disagreements, cs.prime_violations, cs.events),
    );

    let ds = dispersive_sweep(budget / 10, seed);
    check(
        "dispersive_heights",
        ds.height == 0 && ds.monotone == 0 && ds.vertical == 0 && ds.proof_interior == 0,
        format!(
            "height={} monotone={} vertical={} proof_interior={} events={}",
            ds.height, ds.monotone, ds.vertical, ds.proof_interior, ds.events
        ),
    );

    let n = budget as usize;
    let mut rng = RngStream::for_item(seed, domain::SELFTEST, 0);
    let xs: Vec<f64> = (0..n).map(|_| sample_exp_unit_conditioned(&mut rng)).collect();
    let (m, se) = mean_stderr(&xs);
    let exact = (std::f64::consts::E - 2.0) / (std::f64::consts::E - 1.0);
    check("exp_conditioned_mean", (m - exact).abs() < 4.0 * se, format!("mean={m} exact={exact} se={se}"));

    let bins = EqualAreaBins::new(48).expect("valid");
    let mut counts = vec![0u64; 48];
    let mut thetas = Vec::with_capacity(n);
    let mut rng = RngStream::for_item(seed, domain::SELFTEST, 1);
    while thetas.len() < n {
        let u = sample_unit_sphere(&mut rng);
        let v = sample_unit_sphere(&mut rng);
        if let Ok((w, th)) = cross_decomposition(&u, &v) {
            counts[bins.index(&w)] += 1;
            thetas.push(th);
        }
    }
    let d = ks_statistic(thetas, cross_norm_cdf);
    check("cross_norm_law", d < ks_critical_1pct(n), format!("ks={d} critical={}", ks_critical_1pct(n)));
    let p = chi_square_uniform_pvalue(&counts);
    check("cross_direction_uniform", p > 0.01, format!("chi2_pvalue={p}"));

    let p = crate::lorentz::scattering_kernel_check(budget, seed);
    check("scattering_kernel_isotropic", p > 0.01, format!("chi2_pvalue={p}"));
    out
}

fn run_selftest(cfg: &RunConfig) -> Result<(Payload, bool), RunError> {
    let checks = selftest_checks(cfg.seed, cfg.budget);
    let ok = checks.iter().all(|c| c.passed);
    let payload = match cfg.format {
        Format::Csv => Payload::Csv {
            header: ["check", "passed", "detail"].map(String::from).to_vec(),
            rows: checks.iter().map(|c| vec![c.name.to_string(), c.passed.to_string(), c.detail.clone()]).collect(),
        },
        Format::Json => {
            let mut o = Map::new();
            for c in &checks {
                o.insert(format!("{}_passed", c.name), json!(c.passed));
                o.insert(format!("{}_detail", c.name), json!(c.detail));
            }
            o.insert("all_passed".into(), json!(ok));
            Payload::Json(o)
        }
    };
    Ok((payload, ok))
}

fn execute(cfg: &RunConfig) -> Result<(Payload, bool), RunError> {
    Ok(match &cfg.job {
        Job::Bounce { u, xi, v, r, n_max } => (run_bounce(cfg, *u, *xi, *v, *r, *n_max)?, true),
        Job::Tails { regime, s_grid, measure, r } => (run_tails(cfg, *regime, s_grid, *measure, *r)?, true),
        Job::ExitDist { r_grid, bins, nu } => (run_exit_dist(cfg, r_grid, *bins, nu)?, true),
        Job::Indirect { eps_grid } => (run_indirect(cfg, eps_grid)?, true),
        Job::Gas { gas, msd_points, dump_paths } => (run_gas(cfg, gas, *msd_points, dump_paths.as_deref())?, true),
        Job::Selftest => run_selftest(cfg)?,
    })
}

/// Runs a validated configuration and returns the process exit code.
pub fn run(cfg: &RunConfig) -> i32 {
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    let start = Instant::now();
    let work = || -> Result<bool, RunError> {
        let (payload, ok) = execute(cfg)?;
        let bytes = render(cfg, payload, start.elapsed().as_secs_f64())?;
        match &cfg.out {
            Some(p) => write_atomic(p, &bytes)?,
            None => io::stdout().lock().write_all(&bytes)?,
        }
        Ok(ok)
    };
    let result = match cfg.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(work),
            Err(e) => Err(RunError::Failed(format!("cannot build thread pool: {e}"))),
        },
        None => work(),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: self-test failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Parses `args` and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{line}");
            return 2;
        }
    };
    match RunConfig::from_cli(cli) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(args: &[&str]) -> Result<RunConfig, ConfigError> {
        let mut full = vec!["recollide"];
        full.extend_from_slice(args);
        RunConfig::from_cli(Cli::try_parse_from(full).expect("parses"))
    }

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("2e6"), Ok(2_000_000));
        assert_eq!(parse_count("17"), Ok(17));
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-3").is_err());
    }

    #[test]
    fn directions_are_normalized_with_warning() {
        let mut w = Vec::new();
        let v = parse_direction("0,2,0", &mut w, "u").unwrap();
        assert_eq!(v.y(), 1.0);
        assert_eq!(w.len(), 1);
        assert!(parse_direction("1,0", &mut w, "u").is_err());
        assert!(parse_direction("0,0,0", &mut w, "u").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "# comment\nbudget = 5000\nregime=long-n3\ns=1,2,3,4\n").unwrap();
        let c = cfg(&["tails", "--config", file.to_str().unwrap(), "--regime", "trap-n4plus", "--seed", "9"]).unwrap();
        assert_eq!(c.budget, 5000);
        assert_eq!(c.seed, 9);
        assert!(matches!(c.job, Job::Tails { regime: Regime::TrapN4Plus, .. }));
        assert_eq!(c.effective["regime"], "trap-n4plus");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(cfg(&["tails", "--regime", "medium"]).is_err());
        assert!(cfg(&["tails", "--s", "5,4,3,2"]).is_err());
        assert!(cfg(&["bounce", "--u", "1,0,0", "--xi", "1", "--v", "0,1,0"]).is_err());
        assert!(cfg(&["bounce", "--xi", "1", "--v", "0,1,0"]).is_err());
        assert!(cfg(&["gas", "--eps", "0.7"]).is_err());
        assert!(cfg(&["exit-dist", "--bins", "50"]).is_err());
        assert!(cfg(&["indirect", "--threads", "0"]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "horizon=5\n").unwrap();
        assert!(cfg(&["tails", "--config", file.to_str().unwrap()]).is_err());
    }

    #[test]
    fn json_doubles_carry_17_digits() {
        let s = to_json_string(&json!({ "a": 0.1, "n": 3 }));
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("\"n\": 3"));
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn selftest_passes() {
        let checks = selftest_checks(1, 20_000);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
