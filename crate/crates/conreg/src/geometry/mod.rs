//! Grids and differential-geometric primitives for the interval and the
//! unit sphere: uniform 1D grids with trapezoid quadrature, icosphere
//! construction and point location, exponential/log maps, parallel
//! transport, and coordinate conversions.

mod icosphere;
pub mod vec3;

pub use icosphere::{Icosphere, Location};

use crate::error::{Error, Result};
use vec3::Vec3;

pub const ANTIPODAL_TOL: f64 = 1e-8;

/// Uniform grid on [0,1] with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid1D {
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Validation(format!("grid needs >= 2 points, got {n}")));
        }
        let h = 1.0 / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        // i*h need not hit 1 exactly in floating point; the endpoint must
        points[n - 1] = 1.0;
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Ok(Grid1D { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.len() - 1) as f64
    }

    /// Trapezoid quadrature of samples on this grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint(Vec3);

impl SpherePoint {
    /// Wraps a vector that is already unit norm (tolerance 1e-12).
    pub fn from_unit(v: Vec3) -> Result<Self> {
        let n = vec3::norm(v);
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("not a unit vector, |v| = {n}")));
        }
        Ok(SpherePoint(v))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn normalize(v: Vec3) -> Result<Self> {
        let n = vec3::norm(v);
        if n < 1e-300 {
            return Err(Error::Domain("cannot normalize the zero vector".into()));
        }
        Ok(SpherePoint(vec3::scale(v, 1.0 / n)))
    }

    pub fn coords(&self) -> Vec3 {
        self.0
    }

    pub fn dot(&self, other: &SpherePoint) -> f64 {
        vec3::dot(self.0, other.0)
    }

    /// Geodesic (great-circle) distance to another point.
    pub fn distance(&self, other: &SpherePoint) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    pub fn antipodal_to(&self, other: &SpherePoint) -> bool {
        self.dot(other) <= -1.0 + ANTIPODAL_TOL
    }

    pub fn north_pole() -> Self {
        SpherePoint([0.0, 0.0, 1.0])
    }
}

/// A tangent vector at a point of the sphere.
#[derive(Debug, Clone, Copy)]
pub struct SphereTangent {
    pub base: SpherePoint,
    pub vec: Vec3,
}

impl SphereTangent {
    /// Projects `vec` onto the tangent plane at `base` and wraps it.
    pub fn project(base: SpherePoint, vec: Vec3) -> Self {
        let b = base.coords();
        let v = vec3::sub(vec, vec3::scale(b, vec3::dot(vec, b)));
        SphereTangent { base, vec: v }
    }

    pub fn zero(base: SpherePoint) -> Self {
        SphereTangent { base, vec: [0.0; 3] }
    }

    pub fn norm(&self) -> f64 {
        vec3::norm(self.vec)
    }

    pub fn scale(&self, s: f64) -> Self {
        SphereTangent { base: self.base, vec: vec3::scale(self.vec, s) }
    }
}

/// Geodesic step from `x` along the tangent vector `v`.
pub fn sphere_exp(x: &SpherePoint, v: &SphereTangent) -> SpherePoint {
    let t = v.norm();
    if t < 1e-12 {
        return *x;
    }
    let dir = vec3::scale(v.vec, 1.0 / t);
    let p = vec3::add(vec3::scale(x.coords(), t.cos()), vec3::scale(dir, t.sin()));
    // renormalize to absorb floating point drift
    SpherePoint::normalize(p).expect("exp of a finite tangent is nonzero")
}

/// Inverse of the exponential map: the tangent at `x` pointing to `y`
/// with norm equal to the geodesic distance.
pub fn sphere_log(x: &SpherePoint, y: &SpherePoint) -> Result<SphereTangent> {
    if x.antipodal_to(y) {
        return Err(Error::Domain("log map undefined for antipodal points".into()));
    }
    let c = x.dot(y).clamp(-1.0, 1.0);
    let theta = c.acos();
    let u = vec3::sub(y.coords(), vec3::scale(x.coords(), c));
    let un = vec3::norm(u);
    if un < 1e-14 {
        return Ok(SphereTangent::zero(*x));
    }
    Ok(SphereTangent { base: *x, vec: vec3::scale(u, theta / un) })
}

/// Parallel transport of `v` from `x` to `y` along the connecting great
/// circle. An isometry of the tangent spaces.
pub fn parallel_transport(
    x: &SpherePoint,
    y: &SpherePoint,
    v: &SphereTangent,
) -> Result<SphereTangent> {
    if x.antipodal_to(y) {
        return Err(Error::Domain("parallel transport undefined for antipodal points".into()));
    }
    let e = sphere_log(x, y)?;
    let theta = e.norm();
    if theta < 1e-14 {
        return Ok(SphereTangent { base: *y, vec: v.vec });
    }
    let u = vec3::scale(e.vec, 1.0 / theta);
    let a = vec3::dot(v.vec, u);
    let perp = vec3::sub(v.vec, vec3::scale(u, a));
    // the component along the geodesic rotates in the (u, x) plane
    let rotated = vec3::sub(vec3::scale(u, theta.cos()), vec3::scale(x.coords(), theta.sin()));
    let out = vec3::add(perp, vec3::scale(rotated, a));
    Ok(SphereTangent::project(*y, out))
}

/// (θ, φ) -> unit vector, θ ∈ [0,π] measured from the north pole,
/// φ ∈ [0,2π).
pub fn spherical_to_cartesian(theta: f64, phi: f64) -> SpherePoint {
    SpherePoint([theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()])
}

/// Inverse conversion. At the poles φ is not recoverable; 0 is returned
/// together with a pole flag.
pub fn cartesian_to_spherical(p: &SpherePoint) -> (f64, f64, bool) {
    let [x, y, z] = p.coords();
    let theta = z.clamp(-1.0, 1.0).acos();
    let at_pole = x == 0.0 && y == 0.0;
    let phi = if at_pole {
        0.0
    } else {
        let a = y.atan2(x);
        if a < 0.0 {
            a + 2.0 * std::f64::consts::PI
        } else {
            a
        }
    };
    (theta, phi, at_pole)
}

/// Orthonormal tangent frame (w_θ, w_φ) at `p`, derived from the
/// spherical-coordinate directions. At the two poles, where φ is
/// arbitrary, the φ=0 limit is used, which is the frame aligned with the
/// x and y axes.
pub fn tangent_frame(p: &SpherePoint) -> (SphereTangent, SphereTangent) {
    let (theta, phi, _) = cartesian_to_spherical(p);
    let (st, ct) = (theta.sin(), theta.cos());
    let (sp, cp) = (phi.sin(), phi.cos());
    let w_theta = [ct * cp, ct * sp, -st];
    let w_phi = [-sp, cp, 0.0];
    (
        SphereTangent { base: *p, vec: w_theta },
        SphereTangent { base: *p, vec: w_phi },
    )
}
