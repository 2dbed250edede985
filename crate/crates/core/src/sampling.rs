//! Random sources: counter-based streams and the samplers for the event
//! measures.
//!
//! Every stream is a ChaCha8 keystream addressed by `(seed, stream_id,
//! counter)`. Work items get their own stream id, so results do not depend on
//! how work is scheduled across threads.

use std::f64::consts::{PI, TAU};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::geom3::{UnitVec3, Vec3};
use crate::two_scatterer::RecollisionEvent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("bad h-range: need 0 < h_min < h_max, got ({0}, {1})")]
    BadRange(f64, f64),
    #[error("cone half-angle must lie in (0, π], got {0}")]
    BadAngle(f64),
    #[error("vectors are parallel; cross product direction undefined")]
    Parallel,
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
}

/// Stream domains. The high 16 bits of a stream id name the consumer so that
/// different estimators never share keystream.
pub mod domain {
    pub const MISC: u16 = 0;
    pub const TAILS: u16 = 1;
    pub const MU_TAILS: u16 = 2;
    pub const EXIT_TV: u16 = 3;
    pub const INDIRECT: u16 = 4;
    pub const GAS_SHARED: u16 = 5;
    pub const GAS_PRIVATE: u16 = 6;
    pub const SWEEP: u16 = 7;
    pub const KERNEL: u16 = 8;
    pub const SELFTEST: u16 = 9;
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream { seed, stream_id, inner }
    }

    /// Stream for work item `index` of consumer `domain`.
    pub fn for_item(seed: u64, domain: u16, index: u64) -> Self {
        debug_assert!(index < 1 << 48);
        Self::new(seed, ((domain as u64) << 48) | index)
    }

    /// Position the stream at an absolute 32-bit word counter.
    pub fn at_counter(mut self, counter: u64) -> Self {
        self.inner.set_word_pos(counter as u128);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `(0, 1]`.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    #[inline]
    pub fn exp1(&mut self) -> f64 {
        self.inner.sample(Exp1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Uniform direction: `cos θ` uniform on `[−1, 1]`, azimuth uniform.
pub fn sample_unit_sphere(rng: &mut RngStream) -> UnitVec3 {
    let z = 2.0 * rng.uniform() - 1.0;
    let phi = TAU * rng.uniform();
    let s = (1.0 - z * z).max(0.0).sqrt();
    UnitVec3::renormalized(Vec3::new(s * phi.cos(), s * phi.sin(), z))
}

/// Unit exponential conditioned to `(0, 1]`, by inverse CDF.
pub fn sample_exp_unit_conditioned(rng: &mut RngStream) -> f64 {
    let p = rng.uniform_open0();
    -(-p * (-(-1.0f64).exp_m1())).ln_1p()
}

/// CDF of the unit exponential conditioned to `[0, 1]`.
pub fn exp_unit_conditioned_cdf(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    (-x).exp_m1() / (-1.0f64).exp_m1()
}

/// One draw from `Uni(S²) × EXP(1|1) × Uni(S²)` at radius `r`.
#[derive(Debug, Clone, Copy)]
pub struct MuSample {
    pub event: RecollisionEvent,
    /// Degenerate `(u, v)` draws discarded before this one.
    pub degenerate_rejections: u32,
}

pub fn sample_mu(rng: &mut RngStream, r: f64) -> Result<MuSample, SamplingError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(SamplingError::BadRadius(r));
    }
    let mut rejected = 0;
    loop {
        let u = sample_unit_sphere(rng);
        let xi = sample_exp_unit_conditioned(rng);
        let v = sample_unit_sphere(rng);
        match RecollisionEvent::new(u, xi, v, r) {
            Ok(event) => return Ok(MuSample { event, degenerate_rejections: rejected }),
            Err(_) => rejected += 1,
        }
    }
}

/// `(1 − cos θ)/2`, the normalized area of a spherical cap of half-angle θ.
#[inline]
pub fn cap_fraction(half_angle: f64) -> f64 {
    let s = (0.5 * half_angle.min(PI)).sin();
    s * s
}

/// Uniform direction in the cap `{∠(v, axis) ≤ half_angle}` and the cap's
/// normalized area.
pub fn sample_cone(rng: &mut RngStream, axis: &UnitVec3, half_angle: f64) -> Result<(UnitVec3, f64), SamplingError> {
    if !(half_angle > 0.0 && half_angle <= PI) {
        return Err(SamplingError::BadAngle(half_angle));
    }
    let cap = cap_fraction(half_angle);
    // 1 − cos θ uniform on [0, 2·cap].
    let one_minus_cos = 2.0 * cap * rng.uniform();
    let cos_t = 1.0 - one_minus_cos;
    let sin_t = (one_minus_cos * (2.0 - one_minus_cos)).max(0.0).sqrt();
    let phi = TAU * rng.uniform();
    let t1 = axis.any_orthogonal();
    let t2 = axis.as_vec().cross(t1.as_vec());
    let v = axis.as_vec() * cos_t + (t1.as_vec() * phi.cos() + t2 * phi.sin()) * sin_t;
    Ok((UnitVec3::renormalized(v), cap))
}

/// `w = (u × v)/|u × v|` and `ϑ = |u × v|`.
pub fn cross_decomposition(u: &UnitVec3, v: &UnitVec3) -> Result<(UnitVec3, f64), SamplingError> {
    let c = u.as_vec().cross(v.as_vec());
    let theta = c.norm();
    if theta < 1e-12 {
        return Err(SamplingError::Parallel);
    }
    Ok((UnitVec3::renormalized(c / theta), theta.min(1.0)))
}

/// CDF of `ϑ = |u × v|` for independent uniform `u, v`: `1 − √(1 − t²)`.
pub fn cross_norm_cdf(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    1.0 - (1.0 - t * t).sqrt()
}

/// Half-angle of the backscatter cone around `−u` that contains every
/// recollision direction at flight time `xi` and radius `r`.
#[inline]
pub fn recollision_cone_half_angle(xi: f64, r: f64) -> f64 {
    (2.0 * r / xi).min(PI)
}

/// Proposal on `(h_min, h_max)` with density proportional to `min(1, (2/h)²)`.
/// `h_max` may be infinite.
#[derive(Debug, Clone, Copy)]
pub struct ImportanceProposal {
    h_min: f64,
    h_max: f64,
    flat_mass: f64,
    total_mass: f64,
}

impl ImportanceProposal {
    pub fn new(h_min: f64, h_max: f64) -> Result<Self, SamplingError> {
        if !(h_min > 0.0 && h_max > h_min) || h_min.is_nan() {
            return Err(SamplingError::BadRange(h_min, h_max));
        }
        let flat_mass = (h_max.min(2.0) - h_min).max(0.0);
        let tail_lo = h_min.max(2.0);
        let tail_mass = if h_max > tail_lo { 4.0 * (1.0 / tail_lo - 1.0 / h_max) } else { 0.0 };
        Ok(ImportanceProposal { h_min, h_max, flat_mass, total_mass: flat_mass + tail_mass })
    }

    pub fn h_min(&self) -> f64 {
        self.h_min
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn density(&self, h: f64) -> f64 {
        if h < self.h_min || h > self.h_max {
            return 0.0;
        }
        (4.0 / (h * h)).min(1.0) / self.total_mass
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let m = rng.uniform() * self.total_mass;
        if m < self.flat_mass {
            return self.h_min + m;
        }
        let lo = self.h_min.max(2.0);
        let rest = m - self.flat_mass;
        let inv = 1.0 / lo - rest / 4.0;
        if inv <= 0.0 {
            self.h_max
        } else {
            (1.0 / inv).min(self.h_max)
        }
    }
}

/// One importance draw from `λ` restricted to the backscatter cone: an event
/// together with its weight, so that `E[weight · 1_A] = λ(A)` for every
/// event set `A` inside the recollision cone.
#[derive(Debug, Clone, Copy)]
pub struct WeightedDraw {
    pub u: UnitVec3,
    pub h: f64,
    pub v: UnitVec3,
    pub weight: f64,
}

/// Axis of an extra sampling cap for `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FocusAxis {
    /// `−u`, around which exit directions close to `−e` concentrate.
    Backscatter,
    /// From `h u` towards the center of the first obstacle; near-head-on
    /// returns lead to further collisions.
    FirstCenter,
}

/// A cap of half-angle `scale · h^{−power}` around `axis`, drawn with
/// probability `share`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Focus {
    pub axis: FocusAxis,
    pub scale: f64,
    pub power: i32,
    pub share: f64,
}

/// Mixture proposal for `λ` at `r = 1`: flight times from a mixture of
/// [`ImportanceProposal`]s, `u` uniform, and `v` from a mixture of the
/// backscatter cone with optional focus caps. The backscatter cone always
/// keeps positive share, so the weights are unbiased on every event set
/// inside it.
#[derive(Debug, Clone)]
pub struct LambdaProposal {
    flights: Vec<(ImportanceProposal, f64)>,
    cone_share: f64,
    focus: Vec<Focus>,
}

impl LambdaProposal {
    pub fn new(flight: ImportanceProposal) -> Self {
        LambdaProposal { flights: vec![(flight, 1.0)], cone_share: 1.0, focus: Vec::new() }
    }

    /// Adds a flight-time component drawn with probability `share`.
    pub fn with_flight(mut self, flight: ImportanceProposal, share: f64) -> Self {
        assert!(share > 0.0 && share < 1.0);
        for f in &mut self.flights {
            f.1 *= 1.0 - share;
        }
        self.flights.push((flight, share));
        self
    }

    /// Adds a focus cap; existing shares shrink proportionally.
    pub fn with_focus(mut self, focus: Focus) -> Self {
        assert!(focus.share > 0.0 && focus.share < 1.0 && focus.scale > 0.0);
        let keep = 1.0 - focus.share;
        self.cone_share *= keep;
        for f in &mut self.focus {
            f.share *= keep;
        }
        self.focus.push(focus);
        self
    }

    pub fn flight_density(&self, h: f64) -> f64 {
        self.flights.iter().map(|(p, w)| w * p.density(h)).sum()
    }

    pub fn sample(&self, rng: &mut RngStream) -> WeightedDraw {
        let pick = rng.uniform();
        let mut acc = 0.0;
        let mut comp = &self.flights[self.flights.len() - 1].0;
        for (p, w) in &self.flights {
            acc += w;
            if pick < acc {
                comp = p;
                break;
            }
        }
        let h = comp.sample(rng);
        let u = sample_unit_sphere(rng);
        let mut caps = Vec::with_capacity(1 + self.focus.len());
        caps.push((-u, recollision_cone_half_angle(h, 1.0), self.cone_share));
        for f in &self.focus {
            let axis = match f.axis {
                FocusAxis::Backscatter => -u,
                FocusAxis::FirstCenter => {
                    let a = (Vec3::x() - u.as_vec()).normalize();
                    UnitVec3::renormalized((a - u.as_vec() * h).normalize())
                }
            };
            caps.push((axis, (f.scale * h.powi(-f.power)).min(PI), f.share));
        }
        let pick = rng.uniform();
        let mut acc = 0.0;
        let mut chosen = caps.len() - 1;
        for (i, c) in caps.iter().enumerate() {
            acc += c.2;
            if pick < acc {
                chosen = i;
                break;
            }
        }
        let (v, _) = sample_cone(rng, &caps[chosen].0, caps[chosen].1).expect("half-angle in (0, π]");
        // Density of v relative to the uniform law on S².
        let rel: f64 = caps
            .iter()
            .enumerate()
            .filter(|(i, c)| *i == chosen || v.angle_to(&c.0) <= c.1)
            .map(|(_, c)| c.2 / cap_fraction(c.1))
            .sum();
        WeightedDraw { u, h, v, weight: 1.0 / (self.flight_density(h) * rel) }
    }
}

/// Draw with `v` from the backscatter cone only.
pub fn sample_lambda_cone(rng: &mut RngStream, proposal: &ImportanceProposal) -> WeightedDraw {
    let h = proposal.sample(rng);
    let u = sample_unit_sphere(rng);
    let (v, cap) = sample_cone(rng, &-u, recollision_cone_half_angle(h, 1.0)).expect("half-angle in (0, π]");
    WeightedDraw { u, h, v, weight: cap / proposal.density(h) }
}

/// Exact draw from `λ` restricted to `{h ≥ h_min}` and the backscatter cone,
/// normalized to a probability law (`r = 1`). Requires `h_min ≥ 2/π`.
pub fn sample_conditioned_long(rng: &mut RngStream, h_min: f64) -> (UnitVec3, f64, UnitVec3) {
    assert!(h_min >= 2.0 / PI);
    // Pareto envelope 1/h² ≥ cap(2/h).
    let h = loop {
        let h = h_min / rng.uniform_open0();
        if rng.uniform() * h.recip().powi(2) < cap_fraction(2.0 / h) {
            break h;
        }
    };
    let u = sample_unit_sphere(rng);
    let (v, _) = sample_cone(rng, &-u, recollision_cone_half_angle(h, 1.0)).expect("valid cone");
    (u, h, v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrataMode {
    /// Log-spaced nodes with trapezoidal weights on `[h_min, h_max]`.
    Grid { nodes: usize },
    /// Independent draws from [`ImportanceProposal`] on `(h_min, ∞)`.
    Importance { draws: usize },
}

/// A flight-time stratum with a batch of `(u, v)` pairs drawn uniformly for
/// `u` and from the backscatter cone for `v`.
#[derive(Debug, Clone)]
pub struct LambdaStratum {
    pub h: f64,
    pub weight: f64,
    pub cap_weight: f64,
    pub events: Vec<(UnitVec3, UnitVec3)>,
}

#[derive(Debug, Clone)]
pub struct LambdaStrata {
    pub mode: StrataMode,
    pub h_min: f64,
    pub h_max: f64,
    pub strata: Vec<LambdaStratum>,
}

/// Builds the strata realizing `λ(A) = ∫ P_{u,v}(A | h) dh`.
pub fn lambda_strata(
    h_min: f64,
    h_max: f64,
    mode: StrataMode,
    batch: usize,
    rng: &mut RngStream,
) -> Result<LambdaStrata, SamplingError> {
    if !(h_min > 0.0 && h_max > h_min && h_max.is_finite()) {
        return Err(SamplingError::BadRange(h_min, h_max));
    }
    let hs_weights: Vec<(f64, f64)> = match mode {
        StrataMode::Grid { nodes } => {
            let nodes = nodes.max(2);
            let (la, lb) = (h_min.ln(), h_max.ln());
            let hs: Vec<f64> = (0..nodes)
                .map(|i| {
                    if i == nodes - 1 {
                        h_max
                    } else {
                        (la + (lb - la) * i as f64 / (nodes - 1) as f64).exp()
                    }
                })
                .collect();
            (0..nodes)
                .map(|i| {
                    let left = if i > 0 { hs[i] - hs[i - 1] } else { 0.0 };
                    let right = if i + 1 < nodes { hs[i + 1] - hs[i] } else { 0.0 };
                    (hs[i], 0.5 * (left + right))
                })
                .collect()
        }
        StrataMode::Importance { draws } => {
            let proposal = ImportanceProposal::new(h_min, f64::INFINITY)?;
            (0..draws)
                .map(|_| {
                    let h = proposal.sample(rng);
                    (h, 1.0 / proposal.density(h))
                })
                .collect()
        }
    };
    let strata = hs_weights
        .into_iter()
        .map(|(h, weight)| {
            let half = recollision_cone_half_angle(h, 1.0);
            let events = (0..batch)
                .map(|_| {
                    let u = sample_unit_sphere(rng);
                    let (v, _) = sample_cone(rng, &-u, half).expect("valid cone");
                    (u, v)
                })
                .collect();
            LambdaStratum { h, weight, cap_weight: cap_fraction(half), events }
        })
        .collect();
    Ok(LambdaStrata { mode, h_min, h_max, strata })
}

impl LambdaStrata {
    /// Estimate of `λ(A)` and its standard error for an indicator (or any
    /// bounded function) supported inside the backscatter cone.
    pub fn estimate<F>(&self, mut f: F) -> (f64, f64)
    where
        F: FnMut(&UnitVec3, f64, &UnitVec3) -> f64,
    {
        let per_stratum: Vec<(f64, f64, f64)> = self
            .strata
            .iter()
            .map(|s| {
                let n = s.events.len().max(1) as f64;
                let vals: Vec<f64> = s.events.iter().map(|(u, v)| f(u, s.h, v)).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = if vals.len() > 1 {
                    vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (s.weight * s.cap_weight, mean, var / n)
            })
            .collect();
        match self.mode {
            StrataMode::Grid { .. } => {
                let est = per_stratum.iter().map(|(w, m, _)| w * m).sum();
                let var: f64 = per_stratum.iter().map(|(w, _, v)| w * w * v).sum();
                (est, var.sqrt())
            }
            StrataMode::Importance { .. } => {
                let xs: Vec<f64> = per_stratum.iter().map(|(w, m, _)| w * m).collect();
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                (mean, (var / n).sqrt())
            }
        }
    }

    /// Analytic bound on the λ-mass left out of the declared range, using
    /// `P(∠(−u, v) ≤ 2/h) ≤ min(1, 1/h²)`.
    pub fn tail_bound(&self) -> f64 {
        let below = self.h_min;
        let above = match self.mode {
            StrataMode::Grid { .. } => 1.0 / self.h_max,
            StrataMode::Importance { .. } => 0.0,
        };
        below + above
    }
}
