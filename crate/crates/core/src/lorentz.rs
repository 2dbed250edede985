//! Coupled gas processes.
//!
//! * `Y`, the Markov flight process: independent `Exp(1)` flights and
//!   uniform directions.
//! * `Z`, which remembers the last scatterer only: it ignores a new
//!   scatterer that would have blocked the path into the last one, and
//!   replays the full two-obstacle bounce when the new outgoing ray returns
//!   to the last one.
//! * `X`, the exploration process: the random environment is revealed along
//!   the way, fresh scatterers that would overlap the explored tube are
//!   thinned away, and revealed scatterers are hit mechanically.
//!
//! All three read the same shared stream of `(ξ, v)` draws. With the
//! intensity `ρ = 1/(πε²)` the free-flight rate is exactly 1.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geom3::{point_segment_distance, ray_sphere_first_hit, reflect, Ray, Rotation, Sphere, UnitVec3, Vec3};
use crate::sampling::{domain, sample_unit_sphere, RngStream};
use crate::stats::{chi_square_uniform_pvalue, ks_pvalue, ks_statistic, normal_cdf, pairwise_sum, EqualAreaBins};
use crate::two_scatterer::{
    classify_recollision, classify_shadowing, simulate_bounce, BounceError, LineMode, RecollisionEvent,
    DEFAULT_N_MAX,
};

/// Positions further apart than this count as a mismatch.
pub const MISMATCH_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GasError {
    #[error("invalid gas configuration: {0}")]
    BadConfig(String),
    #[error("accepted scatterer at {center:?} lies inside an explored capsule")]
    CapsuleInconsistency { center: [f64; 3] },
    #[error(transparent)]
    Bounce(#[from] BounceError),
}

/// Switches for the mechanisms that make the processes differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Mechanisms {
    /// Shadowing and recollision rules of `Z`.
    pub classifiers: bool,
    /// Capsule rejection of fresh scatterers in `X`.
    pub thinning: bool,
    /// Mechanical collisions with revealed scatterers in `X`.
    pub placed: bool,
}

impl Mechanisms {
    pub const ALL: Mechanisms = Mechanisms { classifiers: true, thinning: true, placed: true };
    pub const NONE: Mechanisms = Mechanisms { classifiers: false, thinning: false, placed: false };
}

#[derive(Debug, Clone, Serialize)]
pub struct GasConfig {
    pub eps: f64,
    pub rho: f64,
    pub horizon: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub mechanisms: Mechanisms,
}

impl GasConfig {
    pub fn new(eps: f64, horizon: f64, seed: u64, n_paths: usize) -> Result<Self, GasError> {
        let c = GasConfig { eps, rho: 1.0 / (PI * eps * eps), horizon, seed, n_paths, mechanisms: Mechanisms::ALL };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), GasError> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(GasError::BadConfig(format!("eps must lie in (0, 0.5), got {}", self.eps)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(GasError::BadConfig(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(GasError::BadConfig(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// Fresh-collision rate `ρπε²`.
    pub fn rate(&self) -> f64 {
        self.rho * PI * self.eps * self.eps
    }

    fn shared_stream(&self, path: usize) -> RngStream {
        RngStream::for_item(self.seed, domain::GAS_SHARED, path as u64)
    }

    fn private_stream(&self, path: usize) -> RngStream {
        RngStream::for_item(self.seed, domain::GAS_PRIVATE, path as u64)
    }
}

#[inline]
fn advance(p: &Vec3, w: &UnitVec3, dt: f64) -> Vec3 {
    p + w.as_vec() * dt
}

/// Center of the scatterer that turns velocity `w` into `v` at contact point `q`.
#[inline]
fn scatterer_center(q: &Vec3, w: &UnitVec3, v: &UnitVec3, eps: f64) -> Vec3 {
    let d = w.as_vec() - v.as_vec();
    q + d * (eps / d.norm())
}

/// The shared source of `(flight, direction)` draws.
#[derive(Debug, Clone)]
pub struct SharedDraws {
    rng: RngStream,
    scale: f64,
    consumed: u64,
}

impl SharedDraws {
    fn new(rng: RngStream, rate: f64) -> Self {
        SharedDraws { rng, scale: 1.0 / rate, consumed: 0 }
    }

    fn initial_velocity(&mut self) -> UnitVec3 {
        sample_unit_sphere(&mut self.rng)
    }

    fn next(&mut self) -> (f64, UnitVec3) {
        self.consumed += 1;
        let xi = self.rng.exp1() * self.scale;
        (xi, sample_unit_sphere(&mut self.rng))
    }
}

/// A velocity change: from time `t` on the tracer sits at `pos` and moves with `vel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knot {
    pub t: f64,
    pub pos: Vec3,
    pub vel: UnitVec3,
}

/// Piecewise-linear unit-speed path from time 0 to the horizon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Path {
    pub knots: Vec<Knot>,
    pub horizon: f64,
}

impl Path {
    fn start(vel: UnitVec3, horizon: f64) -> Self {
        Path { knots: vec![Knot { t: 0.0, pos: Vec3::zeros(), vel }], horizon }
    }

    fn push(&mut self, t: f64, pos: Vec3, vel: UnitVec3) {
        self.knots.push(Knot { t, pos, vel });
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let i = self.knots.partition_point(|k| k.t <= t).saturating_sub(1);
        let k = &self.knots[i];
        advance(&k.pos, &k.vel, t - k.t)
    }

    pub fn end(&self) -> Vec3 {
        self.position(self.horizon)
    }

    /// Number of velocity changes.
    pub fn legs(&self) -> usize {
        self.knots.len() - 1
    }
}

/// `(flight_length, new_velocity)` for one step of the flight process.
pub fn y_step(rng: &mut RngStream) -> (f64, UnitVec3) {
    (rng.exp1(), sample_unit_sphere(rng))
}

fn run_y(draws: &mut SharedDraws, horizon: f64) -> Path {
    let w0 = draws.initial_velocity();
    let mut path = Path::start(w0, horizon);
    let (mut t, mut p, mut w) = (0.0, Vec3::zeros(), w0);
    loop {
        let (xi, v) = draws.next();
        if t + xi >= horizon {
            return path;
        }
        p = advance(&p, &w, xi);
        t += xi;
        w = v;
        path.push(t, p, w);
    }
}

/// Per-leg bookkeeping of `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LegFlag {
    pub t: f64,
    /// The new scatterer was ignored as shadowing.
    pub shadowing: bool,
    /// The new outgoing ray returned to the last scatterer.
    pub recollision: bool,
}

#[derive(Debug, Clone, Copy)]
struct Memory {
    w_in: UnitVec3,
    anchor: Vec3,
    t_anchor: f64,
    /// Flight already covered from `anchor` past ignored scatterers.
    acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ZRun {
    pub path: Path,
    pub flags: Vec<LegFlag>,
    pub legs: u64,
    pub degenerate: u64,
    pub truncated_bounces: u64,
    /// Flight time and trapping time (`β̃`, measured from the first of the two
    /// collisions) of every replayed bounce.
    pub bounces: Vec<(f64, f64, usize)>,
}

/// Runs `Z` to the horizon.
pub fn run_z(draws: &mut SharedDraws, cfg: &GasConfig) -> Result<ZRun, GasError> {
    let horizon = cfg.horizon;
    let eps = cfg.eps;
    let w0 = draws.initial_velocity();
    let mut run = ZRun { path: Path::start(w0, horizon), ..Default::default() };
    let mut w = w0;
    let mut mem = Memory { w_in: w0, anchor: Vec3::zeros(), t_anchor: 0.0, acc: 0.0 };
    let mut has_memory = false;
    loop {
        let (xi, v) = draws.next();
        run.legs += 1;
        let xi_tot = mem.acc + xi;
        if mem.t_anchor + xi_tot >= horizon {
            return Ok(run);
        }
        if has_memory && cfg.mechanisms.classifiers {
            let rot = Rotation::aligning(&mem.w_in, &UnitVec3::e1());
            let event = match RecollisionEvent::new(rot.apply_unit(&w), xi_tot, rot.apply_unit(&v), eps) {
                Ok(e) => e,
                Err(_) => {
                    run.degenerate += 1;
                    continue;
                }
            };
            if classify_shadowing(&event, LineMode::Half) {
                run.flags.push(LegFlag { t: mem.t_anchor + xi_tot, shadowing: true, recollision: false });
                mem.acc = xi_tot;
                continue;
            }
            if classify_recollision(&event, LineMode::Half)? {
                run.flags.push(LegFlag { t: mem.t_anchor + xi_tot, shadowing: false, recollision: true });
                let trace = simulate_bounce(&event, DEFAULT_N_MAX)?;
                run.truncated_bounces += trace.truncated as u64;
                run.bounces.push((xi_tot / eps, trace.beta / eps, trace.n));
                let to_world = |x: &Vec3| mem.anchor + rot.apply_inverse(x);
                for k in 2..=trace.n {
                    let t = mem.t_anchor + trace.tau[k - 1];
                    if t >= horizon {
                        return Ok(run);
                    }
                    run.path.push(t, to_world(&trace.points[k - 1]), rot.apply_inverse_unit(&trace.w[k]));
                }
                let last = run.path.knots.last().expect("bounce recorded");
                w = last.vel;
                mem = Memory {
                    w_in: rot.apply_inverse_unit(&trace.w[trace.n - 1]),
                    anchor: last.pos,
                    t_anchor: last.t,
                    acc: 0.0,
                };
                continue;
            }
        }
        let q = advance(&mem.anchor, &w, xi_tot);
        let t = mem.t_anchor + xi_tot;
        mem = Memory { w_in: w, anchor: q, t_anchor: t, acc: 0.0 };
        has_memory = true;
        w = v;
        run.path.push(t, q, w);
    }
}

/// Straight segment of explored path, with its bounding box grown by `ε`.
#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: Vec3,
    b: Vec3,
    lo: Vec3,
    hi: Vec3,
}

/// The revealed environment and explored tube of `X`.
#[derive(Debug, Clone)]
pub struct ExplorationState {
    pub pos: Vec3,
    pub vel: UnitVec3,
    pub time: f64,
    pub placed: Vec<Vec3>,
    /// Capsule count at the time each scatterer was placed.
    pub placed_after: Vec<usize>,
    capsules: Vec<Capsule>,
    seg_start: Vec3,
    eps: f64,
    rng: RngStream,
}

impl ExplorationState {
    fn new(vel: UnitVec3, eps: f64, rng: RngStream) -> Self {
        ExplorationState {
            pos: Vec3::zeros(),
            vel,
            time: 0.0,
            placed: Vec::new(),
            placed_after: Vec::new(),
            capsules: Vec::new(),
            seg_start: Vec3::zeros(),
            eps,
            rng,
        }
    }

    pub fn capsule_segments(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.capsules.iter().map(|c| (c.a, c.b))
    }

    fn close_segment(&mut self, end: Vec3) {
        let e = Vec3::repeat(self.eps);
        let a = self.seg_start;
        self.capsules.push(Capsule { a, b: end, lo: a.inf(&end) - e, hi: a.sup(&end) + e });
        self.seg_start = end;
    }

    /// Whether `c` lies strictly within `ε` of the explored path.
    fn in_capsules(&self, c: &Vec3) -> bool {
        self.capsules.iter().any(|k| {
            c.x > k.lo.x
                && c.x < k.hi.x
                && c.y > k.lo.y
                && c.y < k.hi.y
                && c.z > k.lo.z
                && c.z < k.hi.z
                && point_segment_distance(c, &k.a, &k.b) < self.eps
        })
    }

    fn in_capsules_exhaustive(&self, c: &Vec3) -> bool {
        self.capsules.iter().any(|k| point_segment_distance(c, &k.a, &k.b) < self.eps)
    }

    fn first_placed_hit(&self) -> Option<(f64, usize)> {
        let ray = Ray::new(self.pos, self.vel);
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in self.placed.iter().enumerate() {
            let s = Sphere { center: *c, radius: self.eps };
            if let Ok(Some(t)) = ray_sphere_first_hit(&ray, &s, 0.0) {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    fn place(&mut self, q: Vec3, center: Vec3, v: UnitVec3, t: f64) {
        self.close_segment(q);
        self.placed.push(center);
        self.placed_after.push(self.capsules.len());
        self.pos = q;
        self.vel = v;
        self.time = t;
    }
}

/// What one call of [`x_step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XEvent {
    /// Collision with a freshly revealed scatterer; `shared` tells whether
    /// the shared stream supplied it.
    Fresh { shared: bool },
    /// Mechanical collision with a revealed scatterer.
    Placed,
    /// Straight flight to the horizon.
    Horizon,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct XCounters {
    pub rejections: u64,
    pub rejection_times: Vec<f64>,
    pub placed_hits: u64,
    pub private_fresh: u64,
    /// Times at which a revealed scatterer lay ahead on the current ray.
    pub revealed_ahead_times: Vec<f64>,
}

/// Advances `X` to its next collision (or to the horizon).
pub fn x_step(
    state: &mut ExplorationState,
    draws: &mut SharedDraws,
    cfg: &GasConfig,
    counters: &mut XCounters,
) -> Result<XEvent, GasError> {
    let eps = cfg.eps;
    let mech = cfg.mechanisms;
    let hit = if mech.placed { state.first_placed_hit() } else { None };
    let Some((d, idx)) = hit else {
        loop {
            let (xi, v) = draws.next();
            if state.time + xi >= cfg.horizon {
                return Ok(XEvent::Horizon);
            }
            let q = advance(&state.pos, &state.vel, xi);
            let t = state.time + xi;
            let c = scatterer_center(&q, &state.vel, &v, eps);
            if mech.thinning && state.in_capsules(&c) {
                counters.rejections += 1;
                counters.rejection_times.push(t);
                state.pos = q;
                state.time = t;
                continue;
            }
            if mech.thinning && state.in_capsules_exhaustive(&c) {
                return Err(GasError::CapsuleInconsistency { center: [c.x, c.y, c.z] });
            }
            state.place(q, c, v, t);
            return Ok(XEvent::Fresh { shared: true });
        }
    };
    counters.revealed_ahead_times.push(state.time);
    // Fresh scatterers may still intervene before the revealed one.
    let scale = 1.0 / cfg.rate();
    let mut ell = state.rng.exp1() * scale;
    while ell < d {
        if state.time + ell >= cfg.horizon {
            return Ok(XEvent::Horizon);
        }
        let v = sample_unit_sphere(&mut state.rng);
        let q = advance(&state.pos, &state.vel, ell);
        let c = scatterer_center(&q, &state.vel, &v, eps);
        if mech.thinning && state.in_capsules(&c) {
            counters.rejections += 1;
            counters.rejection_times.push(state.time + ell);
            ell += state.rng.exp1() * scale;
            continue;
        }
        if mech.thinning && state.in_capsules_exhaustive(&c) {
            return Err(GasError::CapsuleInconsistency { center: [c.x, c.y, c.z] });
        }
        counters.private_fresh += 1;
        let t = state.time + ell;
        state.place(q, c, v, t);
        return Ok(XEvent::Fresh { shared: false });
    }
    if state.time + d >= cfg.horizon {
        return Ok(XEvent::Horizon);
    }
    let q = advance(&state.pos, &state.vel, d);
    let radial = q - state.placed[idx];
    let normal = UnitVec3::renormalized(radial / radial.norm());
    let w = reflect(&state.vel, &normal).unwrap_or(state.vel);
    counters.placed_hits += 1;
    state.close_segment(q);
    state.pos = q;
    state.vel = w;
    state.time += d;
    Ok(XEvent::Placed)
}

#[derive(Debug, Clone)]
pub struct XRun {
    pub path: Path,
    pub counters: XCounters,
    pub state: ExplorationState,
}

pub fn run_x(draws: &mut SharedDraws, private: RngStream, cfg: &GasConfig) -> Result<XRun, GasError> {
    let w0 = draws.initial_velocity();
    let mut state = ExplorationState::new(w0, cfg.eps, private);
    let mut path = Path::start(w0, cfg.horizon);
    let mut counters = XCounters::default();
    loop {
        match x_step(&mut state, draws, cfg, &mut counters)? {
            XEvent::Horizon => return Ok(XRun { path, counters, state }),
            _ => path.push(state.time, state.pos, state.vel),
        }
    }
}

/// First time in `[0, horizon]` at which the two paths are more than `tol` apart.
pub fn first_divergence(a: &Path, b: &Path, tol: f64) -> Option<f64> {
    let mut times: Vec<f64> = a.knots.iter().chain(&b.knots).map(|k| k.t).collect();
    times.push(a.horizon.min(b.horizon));
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut ia, mut ib) = (0, 0);
    for win in times.windows(2) {
        let (t0, t1) = (win[0], win[1]);
        while ia + 1 < a.knots.len() && a.knots[ia + 1].t <= t0 {
            ia += 1;
        }
        while ib + 1 < b.knots.len() && b.knots[ib + 1].t <= t0 {
            ib += 1;
        }
        let (ka, kb) = (&a.knots[ia], &b.knots[ib]);
        let d0 = advance(&ka.pos, &ka.vel, t0 - ka.t) - advance(&kb.pos, &kb.vel, t0 - kb.t);
        if d0.norm() > tol {
            return Some(t0);
        }
        let dv = ka.vel.as_vec() - kb.vel.as_vec();
        // |d0 + s·dv|² = tol² on s ∈ (0, t1 − t0].
        let qa = dv.norm_squared();
        if qa == 0.0 {
            continue;
        }
        let qb = d0.dot(&dv);
        let qc = d0.norm_squared() - tol * tol;
        let disc = qb * qb - qa * qc;
        let s = (-qb + disc.max(0.0).sqrt()) / qa;
        if s <= t1 - t0 {
            return Some(t0 + s.max(0.0));
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct CoupledPaths {
    pub x: XRun,
    pub y: Path,
    pub z: ZRun,
    pub mismatch_time: Option<f64>,
    /// `Z` legs up to the mismatch (or the horizon).
    pub legs_before_mismatch: u64,
    /// Whether a flag, rejection or revealed-scatterer hit precedes the mismatch.
    pub mismatch_explained: bool,
}

/// Runs `X`, `Y` and `Z` for path `path_id` on shared randomness.
pub fn run_coupled(cfg: &GasConfig, path_id: usize) -> Result<CoupledPaths, GasError> {
    cfg.validate()?;
    let shared = SharedDraws::new(cfg.shared_stream(path_id), cfg.rate());
    let x = run_x(&mut shared.clone(), cfg.private_stream(path_id), cfg)?;
    let y = run_y(&mut shared.clone(), cfg.horizon);
    let z = run_z(&mut shared.clone(), cfg)?;
    let mismatch_time = first_divergence(&x.path, &z.path, MISMATCH_TOL);
    let legs_before_mismatch = match mismatch_time {
        Some(tm) => z.path.knots.iter().skip(1).filter(|k| k.t <= tm).count() as u64 + 1,
        None => z.path.legs() as u64 + 1,
    };
    let mismatch_explained = mismatch_time.is_none_or(|tm| {
        z.flags.iter().any(|f| f.t <= tm + MISMATCH_TOL)
            || x.counters.rejection_times.iter().any(|&t| t <= tm + MISMATCH_TOL)
            || x.counters.revealed_ahead_times.iter().any(|&t| t <= tm + MISMATCH_TOL)
    });
    Ok(CoupledPaths { x, y, z, mismatch_time, legs_before_mismatch, mismatch_explained })
}

#[derive(Debug, Clone, Serialize)]
pub struct MismatchSummary {
    pub eps: f64,
    pub paths: u64,
    pub legs: u64,
    pub mismatches: u64,
    pub per_leg: f64,
    pub stderr: f64,
    pub shadowing_legs: u64,
    pub recollision_legs: u64,
    pub rejections: u64,
    pub unexplained: u64,
    pub capsule_inconsistencies: u64,
}

/// Per-leg X/Z mismatch hazard over `cfg.n_paths` coupled paths.
pub fn mismatch_rate(cfg: &GasConfig) -> Result<MismatchSummary, GasError> {
    cfg.validate()?;
    let runs: Vec<Result<(u64, bool, bool, u64, u64, u64), GasError>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let c = run_coupled(cfg, i)?;
            let sh = c.z.flags.iter().filter(|f| f.shadowing).count() as u64;
            let rc = c.z.flags.iter().filter(|f| f.recollision).count() as u64;
            Ok((c.legs_before_mismatch, c.mismatch_time.is_some(), c.mismatch_explained, sh, rc, c.x.counters.rejections))
        })
        .collect();
    let mut s = MismatchSummary {
        eps: cfg.eps,
        paths: cfg.n_paths as u64,
        legs: 0,
        mismatches: 0,
        per_leg: 0.0,
        stderr: 0.0,
        shadowing_legs: 0,
        recollision_legs: 0,
        rejections: 0,
        unexplained: 0,
        capsule_inconsistencies: 0,
    };
    for r in runs {
        match r {
            Ok((legs, mm, explained, sh, rc, rej)) => {
                s.legs += legs;
                s.mismatches += mm as u64;
                s.unexplained += !explained as u64;
                s.shadowing_legs += sh;
                s.recollision_legs += rc;
                s.rejections += rej;
            }
            Err(GasError::CapsuleInconsistency { .. }) => s.capsule_inconsistencies += 1,
            Err(e) => return Err(e),
        }
    }
    s.per_leg = s.mismatches as f64 / s.legs as f64;
    s.stderr = (s.mismatches as f64).sqrt() / s.legs as f64;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Process {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Process {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" | "X" => Ok(Process::X),
            "y" | "Y" => Ok(Process::Y),
            "z" | "Z" => Ok(Process::Z),
            _ => Err(format!("unknown process '{s}' (expected x, y or z)")),
        }
    }
}

/// Path `i` of `Z` with its leg flags and bounce records.
pub fn run_process_z(cfg: &GasConfig, i: usize) -> Result<ZRun, GasError> {
    run_z(&mut SharedDraws::new(cfg.shared_stream(i), cfg.rate()), cfg)
}

/// Path `i` of a single process.
pub fn run_process(process: Process, cfg: &GasConfig, i: usize) -> Result<Path, GasError> {
    let mut shared = SharedDraws::new(cfg.shared_stream(i), cfg.rate());
    Ok(match process {
        Process::X => run_x(&mut shared, cfg.private_stream(i), cfg)?.path,
        Process::Y => run_y(&mut shared, cfg.horizon),
        Process::Z => run_z(&mut shared, cfg)?.path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MsdPoint {
    pub t: f64,
    pub msd: f64,
    pub stderr: f64,
}

/// Mean squared displacement on `t_grid` over `cfg.n_paths` paths.
pub fn msd_curve(process: Process, t_grid: &[f64], cfg: &GasConfig) -> Result<Vec<MsdPoint>, GasError> {
    if t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid.iter().any(|t| *t < 0.0 || *t > cfg.horizon) {
        return Err(GasError::BadConfig("time grid must increase within [0, horizon]".into()));
    }
    let rows: Vec<Result<Vec<f64>, GasError>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let p = run_process(process, cfg, i)?;
            Ok(t_grid.iter().map(|&t| p.position(t).norm_squared()).collect())
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(t_grid
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let xs: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (m, se) = crate::stats::mean_stderr(&xs);
            MsdPoint { t, msd: m, stderr: if xs.len() > 1 { se } else { 0.0 } }
        })
        .collect())
}

/// `2(t − 1 + e^{−t})`, the mean squared displacement of the flight process.
pub fn msd_flight_exact(t: f64) -> f64 {
    2.0 * (t + (-t).exp_m1())
}

#[derive(Debug, Clone, Serialize)]
pub struct Gaussianity {
    pub ks: [f64; 3],
    pub pvalues: [f64; 3],
    /// Sample correlations of the component pairs (xy, xz, yz).
    pub correlations: [f64; 3],
    pub n: usize,
}

/// KS statistics of the components of `P(T)/√(MSD(T)/3)` against N(0, 1).
pub fn increment_gaussianity(process: Process, cfg: &GasConfig) -> Result<Gaussianity, GasError> {
    if cfg.horizon < 100.0 {
        return Err(GasError::BadConfig("gaussianity needs a horizon of at least 100".into()));
    }
    let ends: Vec<Result<Vec3, GasError>> =
        (0..cfg.n_paths).into_par_iter().map(|i| Ok(run_process(process, cfg, i)?.end())).collect();
    let ends = ends.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = ends.len();
    let msd = pairwise_sum(&ends.iter().map(|e| e.norm_squared()).collect::<Vec<_>>()) / n as f64;
    let scale = (msd / 3.0).sqrt();
    let mut ks = [0.0; 3];
    let mut pvalues = [0.0; 3];
    for k in 0..3 {
        ks[k] = ks_statistic(ends.iter().map(|e| e[k] / scale).collect(), normal_cdf);
        pvalues[k] = ks_pvalue(ks[k], n);
    }
    let corr = |a: usize, b: usize| {
        let m = |k: usize| ends.iter().map(|e| e[k]).sum::<f64>() / n as f64;
        let (ma, mb) = (m(a), m(b));
        let cov = ends.iter().map(|e| (e[a] - ma) * (e[b] - mb)).sum::<f64>();
        let va = ends.iter().map(|e| (e[a] - ma).powi(2)).sum::<f64>();
        let vb = ends.iter().map(|e| (e[b] - mb).powi(2)).sum::<f64>();
        cov / (va * vb).sqrt()
    };
    Ok(Gaussianity { ks, pvalues, correlations: [corr(0, 1), corr(0, 2), corr(1, 2)], n })
}

/// Scatters `e` off hard spheres hit at uniformly distributed impact
/// parameters and returns the χ² p-value of the outgoing directions over 48
/// equal-area bins.
pub fn scattering_kernel_check(budget: u64, seed: u64) -> f64 {
    let bins = EqualAreaBins::new(48).expect("valid bin count");
    let counts = (0..budget.div_ceil(1 << 16))
        .into_par_iter()
        .map(|i| {
            let len = (1u64 << 16).min(budget - i * (1 << 16));
            let mut rng = RngStream::for_item(seed, domain::KERNEL, i);
            let mut c = vec![0u64; 48];
            for _ in 0..len {
                let w = reflect(&UnitVec3::e1(), &impact_normal(&mut rng)).expect("front hemisphere");
                c[bins.index(&w)] += 1;
            }
            c
        })
        .reduce(|| vec![0u64; 48], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    chi_square_uniform_pvalue(&counts)
}

/// Outward normal at the impact point for incoming direction `e` and an
/// impact parameter uniform on the unit disk: cosine-weighted on the
/// hemisphere facing `−e`.
pub fn impact_normal(rng: &mut RngStream) -> UnitVec3 {
    let rho2 = rng.uniform();
    let phi = 2.0 * PI * rng.uniform();
    let s = rho2.sqrt();
    let c = (1.0 - rho2).sqrt();
    UnitVec3::renormalized(Vec3::new(-c, s * phi.cos(), s * phi.sin()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;
    use crate::stats::mean_stderr;

    fn cfg(eps: f64, horizon: f64, n: usize) -> GasConfig {
        GasConfig::new(eps, horizon, 17, n).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GasConfig::new(0.6, 10.0, 1, 1).is_err());
        assert!(GasConfig::new(0.1, 0.0, 1, 1).is_err());
        assert!((cfg(0.05, 1.0, 1).rate() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn y_step_moments() {
        let mut rng = RngStream::new(1, 0);
        let n = 1_000_000;
        let mut flights = Vec::with_capacity(n);
        let mut prev = sample_unit_sphere(&mut rng);
        let mut dots = 0.0;
        let bins = EqualAreaBins::new(48).unwrap();
        let mut counts = vec![0u64; 48];
        for _ in 0..n {
            let (l, v) = y_step(&mut rng);
            flights.push(l);
            dots += prev.dot(&v);
            counts[bins.index(&v)] += 1;
            prev = v;
        }
        let (m, _) = mean_stderr(&flights);
        assert!((m - 1.0).abs() < 4.0 / (n as f64).sqrt());
        assert!((dots / n as f64).abs() < 4e-3);
        assert!(chi_square_uniform_pvalue(&counts) > 0.01);
    }

    #[test]
    fn kernel_is_isotropic() {
        assert!(scattering_kernel_check(1_000_000, 2) > 0.01);
    }

    #[test]
    fn kernel_symmetries() {
        let mut rng = RngStream::new(3, 0);
        let n = 200_000;
        let mut az = Vec::with_capacity(n);
        let mut polar = Vec::with_capacity(n);
        for _ in 0..n {
            let nrm = impact_normal(&mut rng);
            let w = reflect(&UnitVec3::e1(), &nrm).unwrap();
            az.push(w.z().atan2(w.y()));
            // Momentum transfer is along the normal; its polar angle from −e.
            polar.push(nrm.angle_to(&-UnitVec3::e1()));
        }
        let d = ks_statistic(az, |a| (a + PI) / (2.0 * PI));
        assert!(d < crate::stats::ks_critical_1pct(n));
        // Density 2 cos θ sin θ on [0, π/2] has CDF sin² θ.
        let d = ks_statistic(polar, |t| t.sin().powi(2));
        assert!(d < crate::stats::ks_critical_1pct(n));
    }

    #[test]
    fn exact_msd_formula_matches_quadrature() {
        for t in [0.5, 3.0, 100.0] {
            let q = 2.0 * integrate(|s: f64| (t - s) * (-s).exp(), 0.0, t, 1e-13).value;
            assert!((q - msd_flight_exact(t)).abs() < 1e-9 * q.max(1.0));
        }
        assert!((msd_flight_exact(100.0) - 198.0).abs() < 1e-12);
        assert_eq!(msd_flight_exact(0.0), 0.0);
    }

    #[test]
    fn mechanism_free_processes_coincide() {
        let mut c = cfg(0.1, 50.0, 1);
        c.mechanisms = Mechanisms::NONE;
        for i in 0..50 {
            let run = run_coupled(&c, i).unwrap();
            assert_eq!(run.x.path, run.y);
            assert_eq!(run.z.path, run.y);
            assert!(run.mismatch_time.is_none());
        }
    }

    #[test]
    fn fresh_flights_have_unit_mean_without_thinning() {
        let mut c = cfg(0.05, 1e6, 1);
        c.mechanisms = Mechanisms { classifiers: true, thinning: false, placed: false };
        let mut shared = SharedDraws::new(c.shared_stream(0), c.rate());
        let mut lens = Vec::new();
        let mut state = ExplorationState::new(shared.initial_velocity(), c.eps, c.private_stream(0));
        let mut counters = XCounters::default();
        let mut last = 0.0;
        for _ in 0..100_000 {
            x_step(&mut state, &mut shared, &c, &mut counters).unwrap();
            lens.push(state.time - last);
            last = state.time;
        }
        let (m, se) = mean_stderr(&lens);
        assert!((m - 1.0).abs() < 4.0 * se);
    }

    #[test]
    fn revealed_centers_avoid_earlier_capsules() {
        let c = cfg(0.1, 200.0, 1);
        let mut rejections = 0;
        for i in 0..20 {
            let run = run_x(&mut SharedDraws::new(c.shared_stream(i), 1.0), c.private_stream(i), &c).unwrap();
            rejections += run.counters.rejections;
            let caps: Vec<(Vec3, Vec3)> = run.state.capsule_segments().collect();
            for (center, &before) in run.state.placed.iter().zip(&run.state.placed_after) {
                // The capsule closed at placement ends at the contact point.
                for (a, b) in &caps[..before - 1] {
                    assert!(point_segment_distance(center, a, b) >= c.eps);
                }
            }
        }
        assert!(rejections > 0);
    }

    #[test]
    fn divergence_of_crossing_paths() {
        let e = UnitVec3::e1();
        let mut a = Path::start(e, 10.0);
        let mut b = Path::start(e, 10.0);
        assert_eq!(first_divergence(&a, &b, 1e-9), None);
        a.push(2.0, Vec3::new(2.0, 0.0, 0.0), UnitVec3::e2());
        b.push(2.0, Vec3::new(2.0, 0.0, 0.0), UnitVec3::e1());
        let t = first_divergence(&a, &b, 1e-3).unwrap();
        assert!((t - 2.0 - 1e-3 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mismatches_follow_flagged_legs() {
        let c = cfg(0.1, 30.0, 1);
        let mut mismatches = 0;
        for i in 0..300 {
            let run = run_coupled(&c, i).unwrap();
            assert!(run.mismatch_explained, "path {i}");
            mismatches += run.mismatch_time.is_some() as usize;
            for k in run.x.path.knots.iter().chain(&run.z.path.knots) {
                assert!((k.vel.as_vec().norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(mismatches > 0);
    }

    #[test]
    fn event_free_run_is_identical() {
        // At tiny ε nothing interacts over a short horizon.
        let c = GasConfig::new(1e-6, 20.0, 5, 1).unwrap();
        for i in 0..20 {
            let run = run_coupled(&c, i).unwrap();
            assert!(run.mismatch_time.is_none());
            assert!(run.z.flags.is_empty());
            assert_eq!(run.x.counters.rejections, 0);
        }
    }

    #[test]
    fn z_recollision_frequency_matches_direct_sampling() {
        let eps = 0.05;
        let c = GasConfig::new(eps, 200.0, 23, 200).unwrap();
        let (mut legs, mut hits) = (0u64, 0u64);
        for i in 0..c.n_paths {
            let z = run_z(&mut SharedDraws::new(c.shared_stream(i), 1.0), &c).unwrap();
            // The first leg has no memory; the last draw ends at the horizon.
            legs += z.legs - 2;
            hits += z.flags.iter().filter(|f| f.recollision).count() as u64;
        }
        let mut rng = RngStream::new(29, 0);
        let n = 2_000_000;
        let mut direct = 0u64;
        for _ in 0..n {
            let u = sample_unit_sphere(&mut rng);
            let xi = rng.exp1();
            let v = sample_unit_sphere(&mut rng);
            let Ok(ev) = RecollisionEvent::new(u, xi, v, eps) else { continue };
            if !classify_shadowing(&ev, LineMode::Half) && classify_recollision(&ev, LineMode::Half).unwrap() {
                direct += 1;
            }
        }
        let p_direct = direct as f64 / n as f64;
        let p_z = hits as f64 / legs as f64;
        let se = (p_z / legs as f64 + p_direct / n as f64).sqrt();
        assert!((p_z - p_direct).abs() < 3.0 * se + 0.1 * p_direct, "Z {p_z} direct {p_direct}");
    }
}
