//! Exact 3D primitives: unit vectors, rays, spheres, ray/sphere hits and
//! specular reflection.
//!
//! Everything here is a pure function of its inputs. Hit times come from a
//! cancellation-stable quadratic; angles use `atan2(|x × y|, x · y)`.

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tolerance on `|v| = 1` accepted for unit vectors.
pub const UNIT_TOL: f64 = 1e-12;

/// Points closer than `radius - INSIDE_TOL` to a center are strictly inside.
pub const INSIDE_TOL: f64 = 1e-12;

/// Relative size of the discriminant below which a contact is tangential.
pub const GRAZING_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("vector has zero or non-finite length")]
    ZeroVector,
    #[error("ray origin lies strictly inside the sphere (distance {distance}, radius {radius})")]
    InsideSphere { distance: f64, radius: f64 },
    #[error("reflection normal does not oppose the velocity (V·w = {dot})")]
    NonIncoming { dot: f64 },
    #[error("sphere radius must be positive, got {0}")]
    BadRadius(f64),
}

/// A direction on S².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    /// Normalizes `v`; fails for zero or non-finite input.
    pub fn new(v: Vec3) -> Result<Self, GeomError> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeomError::ZeroVector);
        }
        Ok(UnitVec3(v / n))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        Self::new(Vec3::new(x, y, z))
    }

    /// Wraps a vector the caller already knows to be unit, renormalizing it.
    pub(crate) fn renormalized(v: Vec3) -> Self {
        let n = v.norm();
        debug_assert!((n - 1.0).abs() < 1e-6, "renormalizing far-from-unit vector |v| = {n}");
        UnitVec3(v / n)
    }

    pub fn e1() -> Self {
        UnitVec3(Vec3::new(1.0, 0.0, 0.0))
    }

    pub fn e2() -> Self {
        UnitVec3(Vec3::new(0.0, 1.0, 0.0))
    }

    pub fn e3() -> Self {
        UnitVec3(Vec3::new(0.0, 0.0, 1.0))
    }

    #[inline]
    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    #[inline]
    pub fn into_vec(self) -> Vec3 {
        self.0
    }

    #[inline]
    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.0.dot(&other.0)
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0.x
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.0.y
    }

    #[inline]
    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn neg(&self) -> UnitVec3 {
        UnitVec3(-self.0)
    }

    /// Angle to `other` in `[0, π]`.
    pub fn angle_to(&self, other: &UnitVec3) -> f64 {
        angle_between(&self.0, &other.0)
    }

    /// Some unit vector orthogonal to `self`.
    pub fn any_orthogonal(&self) -> UnitVec3 {
        let v = &self.0;
        let helper = if v.x.abs() < 0.6 {
            Vec3::x()
        } else if v.y.abs() < 0.6 {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let c = v.cross(&helper);
        UnitVec3(c / c.norm())
    }
}

impl std::ops::Neg for UnitVec3 {
    type Output = UnitVec3;
    fn neg(self) -> UnitVec3 {
        UnitVec3(-self.0)
    }
}

/// Angle between two non-zero vectors, `atan2(|x × y|, x · y)`.
#[inline]
pub fn angle_between(x: &Vec3, y: &Vec3) -> f64 {
    x.cross(y).norm().atan2(x.dot(y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: UnitVec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: UnitVec3) -> Self {
        Ray { origin, direction }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction.as_vec() * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    pub fn new(center: Vec3, radius: f64) -> Result<Self, GeomError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeomError::BadRadius(radius));
        }
        Ok(Sphere { center, radius })
    }

    pub fn contains_strictly(&self, p: &Vec3) -> bool {
        (p - self.center).norm() < self.radius - INSIDE_TOL
    }
}

/// Smallest `t > t_min` at which the ray meets the sphere surface.
///
/// Tangential contacts return `None`. A ray starting on the surface only
/// reports a later hit if it starts strictly outside; a departing or
/// grazing-in contact at the origin is not a new collision.
pub fn ray_sphere_first_hit(ray: &Ray, sphere: &Sphere, t_min: f64) -> Result<Option<f64>, GeomError> {
    debug_assert!(t_min >= 0.0);
    let oc = ray.origin - sphere.center;
    let dist = oc.norm();
    if dist < sphere.radius - INSIDE_TOL {
        return Err(GeomError::InsideSphere { distance: dist, radius: sphere.radius });
    }
    // |d| = 1, so the quadratic is t² + 2·hb·t + c = 0. Its discriminant is
    // taken from the perpendicular offset to avoid cancelling two O(|oc|²) terms.
    let hb = ray.direction.as_vec().dot(&oc);
    let c = (dist - sphere.radius) * (dist + sphere.radius);
    let perp = oc - ray.direction.as_vec() * hb;
    let disc = (sphere.radius - perp.norm()) * (sphere.radius + perp.norm());
    let scale = sphere.radius * (sphere.radius + hb.abs());
    if disc <= GRAZING_TOL * scale {
        return Ok(None);
    }
    let sq = disc.sqrt();
    let q = if hb >= 0.0 { -(hb + sq) } else { -(hb - sq) };
    let (r1, r2) = (q, c / q);
    let (t_lo, t_hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    if t_lo > t_min {
        return Ok(Some(t_lo));
    }
    // The origin is on the surface: whatever happens next is not a fresh hit.
    if dist <= sphere.radius + INSIDE_TOL {
        return Ok(None);
    }
    if t_hi > t_min {
        Ok(Some(t_hi))
    } else {
        Ok(None)
    }
}

/// Specular reflection `w' = w − 2(V·w)V` off a surface with outward normal `normal`.
pub fn reflect(w: &UnitVec3, normal: &UnitVec3) -> Result<UnitVec3, GeomError> {
    let d = normal.dot(w);
    if d >= 0.0 {
        return Err(GeomError::NonIncoming { dot: d });
    }
    Ok(UnitVec3::renormalized(w.as_vec() - normal.as_vec() * (2.0 * d)))
}

/// Distance from `p` to the line through the origin with direction `d`.
pub fn point_line_distance(p: &Vec3, d: &UnitVec3) -> f64 {
    p.cross(d.as_vec()).norm()
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Rotation that takes `from` onto `to` (Rodrigues form).
#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    m: nalgebra::Matrix3<f64>,
}

impl Rotation {
    pub fn aligning(from: &UnitVec3, to: &UnitVec3) -> Rotation {
        let rot = nalgebra::Rotation3::rotation_between(from.as_vec(), to.as_vec()).unwrap_or_else(|| {
            // Antiparallel: half turn about any orthogonal axis.
            let axis = nalgebra::Unit::new_normalize(*from.any_orthogonal().as_vec());
            nalgebra::Rotation3::from_axis_angle(&axis, std::f64::consts::PI)
        });
        Rotation { m: *rot.matrix() }
    }

    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.m * v
    }

    #[inline]
    pub fn apply_inverse(&self, v: &Vec3) -> Vec3 {
        self.m.transpose() * v
    }

    pub fn apply_unit(&self, v: &UnitVec3) -> UnitVec3 {
        UnitVec3::renormalized(self.apply(v.as_vec()))
    }

    pub fn apply_inverse_unit(&self, v: &UnitVec3) -> UnitVec3 {
        UnitVec3::renormalized(self.apply_inverse(v.as_vec()))
    }
}
