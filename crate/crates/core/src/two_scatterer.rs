//! The two-scatterer bounce process.
//!
//! A tracer arrives at the origin with velocity `e = (1, 0, 0)`, is deflected
//! into `u` by a sphere centered at `a`, flies for time `ξ`, is deflected into
//! `v` by a second sphere centered at `b`, and from then on bounces between
//! the two until it escapes.

use thiserror::Error;

use crate::geom3::{
    angle_between, point_line_distance, ray_sphere_first_hit, reflect, GeomError, Ray, Sphere, UnitVec3, Vec3,
};

/// Angular tolerance below which `u = e` or `u = v` is treated as degenerate.
pub const DEGENERATE_ANGLE: f64 = 1e-12;
pub const DEFAULT_N_MAX: usize = 10_000;
/// Margins below `-MARGIN_TOL` count as violations.
pub const MARGIN_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BounceError {
    #[error("degenerate event: {0}")]
    Degenerate(&'static str),
    #[error("mechanically inconsistent start: {0}")]
    MechanicallyInconsistent(GeomError),
    #[error("0, a and b are collinear; the plane normal is undefined")]
    CollinearFrame,
    #[error("precondition violated: {0}")]
    PreconditionViolated(&'static str),
    #[error("n_max must be at least 3, got {0}")]
    BadNMax(usize),
}

/// The data `(u, ξ, v)` of a recollision event together with the radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecollisionEvent {
    u: UnitVec3,
    xi: f64,
    v: UnitVec3,
    r: f64,
}

impl RecollisionEvent {
    pub fn new(u: UnitVec3, xi: f64, v: UnitVec3, r: f64) -> Result<Self, BounceError> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(BounceError::Degenerate("flight time must be positive"));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(BounceError::Degenerate("radius must be positive"));
        }
        if u.angle_to(&UnitVec3::e1()) < DEGENERATE_ANGLE {
            return Err(BounceError::Degenerate("u = e"));
        }
        if u.angle_to(&v) < DEGENERATE_ANGLE {
            return Err(BounceError::Degenerate("u = v"));
        }
        Ok(RecollisionEvent { u, xi, v, r })
    }

    pub fn u(&self) -> UnitVec3 {
        self.u
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn v(&self) -> UnitVec3 {
        self.v
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

/// Centers `a = r(e − u)/|e − u|` and `b = ξu + r(u − v)/|u − v|`.
pub fn build_centers(event: &RecollisionEvent) -> (Vec3, Vec3) {
    let (u, v) = (event.u.as_vec(), event.v.as_vec());
    let emu = Vec3::x() - u;
    let umv = u - v;
    let a = emu * (event.r / emu.norm());
    let b = u * event.xi + umv * (event.r / umv.norm());
    (a, b)
}

/// Which obstacle a collision happened at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Obstacle {
    A,
    B,
}

impl Obstacle {
    pub fn id(self) -> u8 {
        match self {
            Obstacle::A => 0,
            Obstacle::B => 1,
        }
    }

    fn other(self) -> Obstacle {
        match self {
            Obstacle::A => Obstacle::B,
            Obstacle::B => Obstacle::A,
        }
    }
}

/// The full mechanical record of one bounce sequence.
///
/// Index `i` of `tau`, `points` and `sphere` refers to collision `k = i + 1`;
/// `w[k]` is the velocity after collision `k`, with `w[0] = e`.
#[derive(Debug, Clone, PartialEq)]
pub struct BounceTrace {
    pub event: RecollisionEvent,
    pub a: Vec3,
    pub b: Vec3,
    pub tau: Vec<f64>,
    pub w: Vec<UnitVec3>,
    pub points: Vec<Vec3>,
    pub sphere: Vec<Obstacle>,
    pub n: usize,
    pub beta: f64,
    pub w_exit: UnitVec3,
    pub truncated: bool,
}

impl BounceTrace {
    /// `T_k = τ_k − τ_{k−1}` for `k ≥ 2`.
    pub fn flight_time(&self, k: usize) -> f64 {
        self.tau[k - 1] - self.tau[k - 2]
    }

    /// `F_k = T_k w_{k−1}`, the displacement flown into collision `k`.
    pub fn flight(&self, k: usize) -> Vec3 {
        self.w[k - 1].as_vec() * self.flight_time(k)
    }

    /// Outward unit normal `V_k` of the obstacle at collision `k`.
    pub fn impact_normal(&self, k: usize) -> UnitVec3 {
        let c = match self.sphere[k - 1] {
            Obstacle::A => self.a,
            Obstacle::B => self.b,
        };
        let radial = self.points[k - 1] - c;
        UnitVec3::renormalized(radial / radial.norm())
    }
}

/// Summary of a bounce without the per-collision record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BounceOutcome {
    pub n: usize,
    pub beta: f64,
    pub w_exit: UnitVec3,
    pub truncated: bool,
}

fn bounce_core<F>(event: &RecollisionEvent, n_max: usize, mut on_hit: F) -> Result<BounceOutcome, BounceError>
where
    F: FnMut(f64, Vec3, UnitVec3, Obstacle),
{
    if n_max < 3 {
        return Err(BounceError::BadNMax(n_max));
    }
    let (a, b) = build_centers(event);
    let sa = Sphere { center: a, radius: event.r };
    let sb = Sphere { center: b, radius: event.r };
    if sb.contains_strictly(&Vec3::zeros()) {
        return Err(BounceError::MechanicallyInconsistent(GeomError::InsideSphere {
            distance: b.norm(),
            radius: event.r,
        }));
    }
    let mut pos = event.u.as_vec() * event.xi;
    if sa.contains_strictly(&pos) {
        return Err(BounceError::MechanicallyInconsistent(GeomError::InsideSphere {
            distance: (pos - a).norm(),
            radius: event.r,
        }));
    }
    on_hit(0.0, Vec3::zeros(), event.u, Obstacle::A);
    on_hit(event.xi, pos, event.v, Obstacle::B);
    let mut t = event.xi;
    let mut w = event.v;
    let mut last = Obstacle::B;
    let mut n = 2;
    while n < n_max {
        let target = last.other();
        let sphere = match target {
            Obstacle::A => &sa,
            Obstacle::B => &sb,
        };
        let hit = ray_sphere_first_hit(&Ray::new(pos, w), sphere, 0.0).map_err(BounceError::MechanicallyInconsistent)?;
        let Some(dt) = hit else {
            return Ok(BounceOutcome { n, beta: t, w_exit: w, truncated: false });
        };
        let p = pos + w.as_vec() * dt;
        let radial = p - sphere.center;
        let normal = UnitVec3::renormalized(radial / radial.norm());
        let Ok(w_new) = reflect(&w, &normal) else {
            // Numerically grazing: no momentum transfer.
            return Ok(BounceOutcome { n, beta: t, w_exit: w, truncated: false });
        };
        t += dt;
        pos = p;
        w = w_new;
        last = target;
        n += 1;
        on_hit(t, pos, w, target);
    }
    Ok(BounceOutcome { n, beta: t, w_exit: w, truncated: true })
}

/// Runs the bounce process from `ξu` with velocity `v` until escape or until
/// `n_max` collisions have occurred.
pub fn simulate_bounce(event: &RecollisionEvent, n_max: usize) -> Result<BounceTrace, BounceError> {
    let (a, b) = build_centers(event);
    let mut tau = Vec::with_capacity(4);
    let mut w = vec![UnitVec3::e1()];
    let mut points = Vec::with_capacity(4);
    let mut sphere = Vec::with_capacity(4);
    let out = bounce_core(event, n_max, |t, p, wk, s| {
        tau.push(t);
        points.push(p);
        w.push(wk);
        sphere.push(s);
    })?;
    Ok(BounceTrace {
        event: *event,
        a,
        b,
        tau,
        w,
        points,
        sphere,
        n: out.n,
        beta: out.beta,
        w_exit: out.w_exit,
        truncated: out.truncated,
    })
}

/// [`simulate_bounce`] without recording the trajectory.
pub fn bounce_outcome(event: &RecollisionEvent, n_max: usize) -> Result<BounceOutcome, BounceError> {
    bounce_core(event, n_max, |_, _, _, _| {})
}

/// Which part of a line a membership test looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineMode {
    /// The whole line, as in the literal set definition.
    #[default]
    Full,
    /// Only the physically traversed half: the incoming path for shadowing,
    /// the forward ray for recollision.
    Half,
}

/// Does the second obstacle block the incoming path `{t e}`?
pub fn classify_shadowing(event: &RecollisionEvent, mode: LineMode) -> bool {
    let (_, b) = build_centers(event);
    let dist = match mode {
        LineMode::Full => point_line_distance(&b, &UnitVec3::e1()),
        // Incoming half-line {t e : t ≤ 0}.
        LineMode::Half if b.x <= 0.0 => point_line_distance(&b, &UnitVec3::e1()),
        LineMode::Half => b.norm(),
    };
    dist < event.r
}

/// Does the tracer return to the first obstacle after leaving the second?
/// `LineMode::Half` (the forward ray) is the physical reading.
pub fn classify_recollision(event: &RecollisionEvent, mode: LineMode) -> Result<bool, BounceError> {
    let (a, _) = build_centers(event);
    let start = event.u.as_vec() * event.xi;
    match mode {
        LineMode::Half => {
            let sa = Sphere { center: a, radius: event.r };
            let hit = ray_sphere_first_hit(&Ray::new(start, event.v), &sa, 0.0)
                .map_err(BounceError::MechanicallyInconsistent)?;
            Ok(hit.is_some())
        }
        LineMode::Full => Ok(point_line_distance(&(a - start), &event.v) < event.r),
    }
}

/// Membership in the backscatter cone `∠(−u, v) ≤ 2r/ξ`, which contains
/// every recollision event.
pub fn classify_prime(event: &RecollisionEvent) -> bool {
    angle_between(&-event.u.as_vec(), event.v.as_vec()) <= 2.0 * event.r / event.xi
}

/// The forward-cone variant `∠(u, v) ≤ 2r/ξ`.
pub fn classify_prime_forward(event: &RecollisionEvent) -> bool {
    event.u.angle_to(&event.v) <= 2.0 * event.r / event.xi
}

/// Plane normal of `0, a, b` with the out-of-plane coordinates of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalFrame {
    pub n: UnitVec3,
    /// `n_seq[k] = w_k · n` for `0 ≤ k ≤ N`.
    pub n_seq: Vec<f64>,
    /// `h_seq[k] = Z̃(τ_k) · n` for `1 ≤ k ≤ N`; `h_seq[0]` is the position
    /// at time 0, which is also 0.
    pub h_seq: Vec<f64>,
}

pub fn normal_frame(trace: &BounceTrace) -> Result<NormalFrame, BounceError> {
    let c = trace.a.cross(&trace.b);
    if c.norm() <= 1e-10 * trace.a.norm() * trace.b.norm() {
        return Err(BounceError::CollinearFrame);
    }
    let mut n = UnitVec3::renormalized(c / c.norm());
    if n.dot(&trace.event.u) < 0.0 {
        n = -n;
    }
    let n_seq = trace.w.iter().map(|w| w.dot(&n)).collect();
    let mut h_seq = vec![0.0];
    h_seq.extend(trace.points.iter().map(|p| p.dot(n.as_vec())));
    Ok(NormalFrame { n, n_seq, h_seq })
}

/// Margins (left side minus right side) of the dispersive recursions at
/// step `k`, for `1 ≤ k ≤ N − 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersiveStep {
    pub k: usize,
    /// `h_{k+1} − h_k − ½ ξ n_k`.
    pub height: f64,
    /// `n_{k+1} − n_k − ½ h_{k+1}`.
    pub slope_displayed: f64,
    /// `n_{k+1} − n_k − ½ h_k`.
    pub slope_proof: f64,
    /// Whether `k + 1 = N`, i.e. the step ends at the final collision.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispersiveReport {
    pub steps: Vec<DispersiveStep>,
    /// `n_ℓ − (ξ/4)^{ℓ−2} |e·(u×v)|` for `2 ≤ ℓ ≤ N`.
    pub chained: Vec<(usize, f64)>,
}

impl DispersiveReport {
    pub fn height_violations(&self) -> usize {
        self.steps.iter().filter(|s| s.height < -MARGIN_TOL).count()
    }

    pub fn proof_violations(&self) -> usize {
        self.steps.iter().filter(|s| s.slope_proof < -MARGIN_TOL).count()
    }

    pub fn proof_violations_interior(&self) -> usize {
        self.steps.iter().filter(|s| !s.terminal && s.slope_proof < -MARGIN_TOL).count()
    }

    pub fn displayed_violations(&self) -> usize {
        self.steps.iter().filter(|s| s.slope_displayed < -MARGIN_TOL).count()
    }

    pub fn chained_violations(&self) -> usize {
        self.chained.iter().filter(|(_, m)| *m < -MARGIN_TOL).count()
    }
}

/// Evaluates the dispersive recursions along a trace with `r = 1`,
/// `ξ ≥ 10` and `n₁ ≥ 0`.
pub fn check_dispersive(trace: &BounceTrace, frame: &NormalFrame) -> Result<DispersiveReport, BounceError> {
    let ev = &trace.event;
    if (ev.r - 1.0).abs() > 1e-12 {
        return Err(BounceError::PreconditionViolated("radius must be 1"));
    }
    if ev.xi < 10.0 {
        return Err(BounceError::PreconditionViolated("flight time must be at least 10"));
    }
    if frame.n_seq[1] < 0.0 {
        return Err(BounceError::PreconditionViolated("n_1 must be non-negative"));
    }
    let nn = trace.n;
    if nn < 3 {
        return Ok(DispersiveReport::default());
    }
    let (n, h) = (&frame.n_seq, &frame.h_seq);
    let steps = (1..nn)
        .map(|k| DispersiveStep {
            k,
            height: h[k + 1] - h[k] - 0.5 * ev.xi * n[k],
            slope_displayed: n[k + 1] - n[k] - 0.5 * h[k + 1],
            slope_proof: n[k + 1] - n[k] - 0.5 * h[k],
            terminal: k + 1 == nn,
        })
        .collect();
    let ecross = ev.u.as_vec().cross(ev.v.as_vec()).x.abs();
    let chained = (2..=nn).map(|l| (l, n[l] - (ev.xi / 4.0).powi(l as i32 - 2) * ecross)).collect();
    Ok(DispersiveReport { steps, chained })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LemmaReport {
    /// `n_k − n_{k−1}` for `1 ≤ k ≤ N`.
    pub monotone: Vec<f64>,
    /// `∠(−e, w_j) − (π/2 − ∠(n, w_j))` for `1 ≤ j ≤ N`.
    pub angle: Vec<f64>,
    /// `|n₂| − ½|e·(u×v)|`.
    pub vertical: f64,
    /// `ξ + 1 − β̃`; diagnostic only.
    pub trap_unit: f64,
    /// `ξ + 1/|n₁| − β̃`; diagnostic only.
    pub trap_normal: f64,
}

impl LemmaReport {
    pub fn monotone_violations(&self) -> usize {
        self.monotone.iter().filter(|m| **m < -MARGIN_TOL).count()
    }

    pub fn angle_violations(&self) -> usize {
        self.angle.iter().filter(|m| **m < -MARGIN_TOL).count()
    }

    pub fn vertical_violated(&self) -> bool {
        self.vertical < -MARGIN_TOL
    }
}

/// Monotonicity, angle and vertical bounds, plus both readings of the
/// trapping-time bound.
pub fn check_lemma_basic(trace: &BounceTrace, frame: &NormalFrame) -> LemmaReport {
    let ev = &trace.event;
    let n = &frame.n_seq;
    let nn = trace.n;
    let e = Vec3::x();
    let monotone = if n[1] >= 0.0 && nn >= 3 { (1..=nn).map(|k| n[k] - n[k - 1]).collect() } else { Vec::new() };
    let angle = (1..=nn)
        .map(|j| {
            let w = trace.w[j].as_vec();
            angle_between(&-e, w) - (std::f64::consts::FRAC_PI_2 - angle_between(frame.n.as_vec(), w))
        })
        .collect();
    let ecross = ev.u.as_vec().cross(ev.v.as_vec()).x.abs();
    LemmaReport {
        monotone,
        angle,
        vertical: n[2].abs() - 0.5 * ecross,
        trap_unit: ev.xi + 1.0 - trace.beta,
        trap_normal: ev.xi + 1.0 / n[1].abs() - trace.beta,
    }
}

/// `(u, ξ/factor, v, r/factor)`: the same event seen at a different length scale.
pub fn rescale(event: &RecollisionEvent, factor: f64) -> RecollisionEvent {
    assert!(factor > 0.0, "rescale factor must be positive");
    RecollisionEvent { xi: event.xi / factor, r: event.r / factor, ..*event }
}

/// `∠(−e, w̃)`.
pub fn exit_angle(w_exit: &UnitVec3) -> f64 {
    angle_between(&-Vec3::x(), w_exit.as_vec())
}
