//! Finite bases for warp velocity fields.
//!
//! On the interval: the orthonormal sine family b_k(x) = √2 sin(kπx),
//! which vanishes at both endpoints so generated warps keep them fixed.
//!
//! On the sphere: tangent vector fields derived from real spherical
//! harmonics — the normalized surface gradient of each non-constant
//! harmonic together with its in-plane 90° rotation. The two families
//! have closed-form divergences (−√(l(l+1))·ψ and 0), which the
//! gradient of the registration cost needs.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::vec3::{self, Vec3};
use crate::geometry::{Grid1D, SpherePoint, SphereTangent};

/// Sine functions b_k(x) = √2 sin(kπx), k = 1..=count, sampled with
/// their derivatives on a grid.
#[derive(Debug, Clone)]
pub struct SineBasis {
    count: usize,
    /// values[k][i] = b_{k+1}(x_i)
    values: Vec<Vec<f64>>,
    /// derivatives[k][i] = b'_{k+1}(x_i)
    derivatives: Vec<Vec<f64>>,
}

impl SineBasis {
    pub fn new(grid: &Grid1D, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Validation("sine basis needs at least one element".into()));
        }
        let mut values = Vec::with_capacity(count);
        let mut derivatives = Vec::with_capacity(count);
        for k in 1..=count {
            values.push(grid.points().iter().map(|&x| sine_value(k, x)).collect());
            derivatives.push(grid.points().iter().map(|&x| sine_derivative(k, x)).collect());
        }
        Ok(SineBasis { count, values, derivatives })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn values(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn derivatives(&self, k: usize) -> &[f64] {
        &self.derivatives[k]
    }
}

pub fn sine_value(k: usize, x: f64) -> f64 {
    2.0_f64.sqrt() * (k as f64 * PI * x).sin()
}

pub fn sine_derivative(k: usize, x: f64) -> f64 {
    2.0_f64.sqrt() * k as f64 * PI * (k as f64 * PI * x).cos()
}

/// (degree, order, kind) of the harmonic at a flat index. Layout per
/// degree l: m = 0, then (cos, sin) pairs for m = 1..=l.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarmonicKind {
    Zonal,
    Cosine,
    Sine,
}

pub fn harmonic_index(l: u32, m: u32, kind: HarmonicKind) -> usize {
    let base = (l * l) as usize;
    match kind {
        HarmonicKind::Zonal => base,
        HarmonicKind::Cosine => base + 2 * m as usize - 1,
        HarmonicKind::Sine => base + 2 * m as usize,
    }
}

pub fn harmonic_label(index: usize) -> (u32, u32, HarmonicKind) {
    let l = (index as f64).sqrt() as u32;
    let off = index - (l * l) as usize;
    if off == 0 {
        (l, 0, HarmonicKind::Zonal)
    } else {
        let m = ((off + 1) / 2) as u32;
        if off % 2 == 1 {
            (l, m, HarmonicKind::Cosine)
        } else {
            (l, m, HarmonicKind::Sine)
        }
    }
}

pub fn harmonic_count(lmax: u32) -> usize {
    ((lmax + 1) * (lmax + 1)) as usize
}

/// Scaled associated Legendre values T_l^m(z) = P_l^m(z) / (1−z²)^{m/2}
/// with derivatives, for all l in m..=lmax. Polynomials in z, so they
/// stay finite at z = ±1 — this is what makes pole evaluation stable.
fn scaled_legendre(lmax: u32, m: u32, z: f64) -> Vec<(f64, f64)> {
    let mf = m as f64;
    let mut out = Vec::with_capacity((lmax - m + 1) as usize);
    // T_m^m = (2m−1)!!, no Condon–Shortley phase
    let mut tmm = 1.0;
    for k in 1..=m {
        tmm *= 2.0 * k as f64 - 1.0;
    }
    out.push((tmm, 0.0));
    if lmax == m {
        return out;
    }
    out.push(((2.0 * mf + 1.0) * z * tmm, (2.0 * mf + 1.0) * tmm));
    for l in (m + 2)..=lmax {
        let lf = l as f64;
        let (t1, d1) = out[out.len() - 1];
        let (t2, d2) = out[out.len() - 2];
        let a = (2.0 * lf - 1.0) / (lf - mf);
        let b = (lf + mf - 1.0) / (lf - mf);
        out.push((a * z * t1 - b * t2, a * (t1 + z * d1) - b * d2));
    }
    out
}

/// All real orthonormal spherical harmonics through degree `lmax` at a
/// point, together with their surface (tangential) gradients. Unit L²
/// norm with respect to the area measure: ∫ψ² dA = 1.
pub fn real_spherical_harmonics(
    p: &SpherePoint,
    lmax: u32,
) -> (Vec<f64>, Vec<SphereTangent>) {
    let [x, y, z] = p.coords();
    let count = harmonic_count(lmax);
    let mut values = vec![0.0; count];
    let mut gradients = vec![[0.0_f64; 3]; count];

    // powers of (x + iy) and their planar derivatives:
    // d/dx (x+iy)^m = m (x+iy)^{m−1}, d/dy = i m (x+iy)^{m−1}
    let mut re_pow = vec![1.0; lmax as usize + 1];
    let mut im_pow = vec![0.0; lmax as usize + 1];
    for m in 1..=lmax as usize {
        re_pow[m] = re_pow[m - 1] * x - im_pow[m - 1] * y;
        im_pow[m] = re_pow[m - 1] * y + im_pow[m - 1] * x;
    }

    for m in 0..=lmax {
        let t = scaled_legendre(lmax, m, z);
        for l in m..=lmax {
            let (tv, td) = t[(l - m) as usize];
            let norm = harmonic_norm(l, m);
            if m == 0 {
                let idx = harmonic_index(l, 0, HarmonicKind::Zonal);
                values[idx] = norm * tv;
                gradients[idx] = [0.0, 0.0, norm * td];
            } else {
                let mu = m as usize;
                let (re, im) = (re_pow[mu], im_pow[mu]);
                let (re1, im1) = (re_pow[mu - 1], im_pow[mu - 1]);
                let mf = m as f64;
                let ci = harmonic_index(l, m, HarmonicKind::Cosine);
                let si = harmonic_index(l, m, HarmonicKind::Sine);
                values[ci] = norm * tv * re;
                values[si] = norm * tv * im;
                // ambient gradient of the polynomial extension
                gradients[ci] = [
                    norm * tv * mf * re1,
                    norm * tv * (-mf * im1),
                    norm * td * re,
                ];
                gradients[si] = [
                    norm * tv * mf * im1,
                    norm * tv * mf * re1,
                    norm * td * im,
                ];
            }
        }
    }
    let tangents = gradients
        .into_iter()
        .map(|g| SphereTangent::project(*p, g))
        .collect();
    (values, tangents)
}

fn harmonic_norm(l: u32, m: u32) -> f64 {
    let mut ratio = 1.0; // (l−m)! / (l+m)!
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    let n = ((2.0 * l as f64 + 1.0) / (4.0 * PI) * ratio).sqrt();
    if m == 0 {
        n
    } else {
        2.0_f64.sqrt() * n
    }
}

/// One element of the sphere warp-velocity basis.
#[derive(Debug, Clone, Copy)]
pub struct TangentField {
    /// flat harmonic index of the generating ψ (1-based past the
    /// constant, which generates no field)
    pub harmonic: usize,
    pub degree: u32,
    /// false: normalized gradient ∇ψ/√(l(l+1)); true: its in-plane
    /// 90° rotation n × ∇ψ/√(l(l+1))
    pub rotated: bool,
}

/// The tangent basis through harmonic degree `lmax`:
/// 2·((lmax+1)² − 1) orthonormal fields.
#[derive(Debug, Clone)]
pub struct HarmonicTangentBasis {
    lmax: u32,
    fields: Vec<TangentField>,
}

impl HarmonicTangentBasis {
    pub fn new(lmax: u32) -> Result<Self> {
        if lmax == 0 {
            return Err(Error::Validation(
                "tangent basis needs harmonic degree >= 1".into(),
            ));
        }
        let mut fields = Vec::new();
        for idx in 1..harmonic_count(lmax) {
            let (l, _, _) = harmonic_label(idx);
            for rotated in [false, true] {
                fields.push(TangentField { harmonic: idx, degree: l, rotated });
            }
        }
        Ok(HarmonicTangentBasis { lmax, fields })
    }

    pub fn lmax(&self) -> u32 {
        self.lmax
    }

    pub fn count(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[TangentField] {
        &self.fields
    }

    /// All basis fields and their divergences at one point. The
    /// divergence of the gradient field is −√(l(l+1))·ψ (scaled surface
    /// Laplacian); rotated fields are divergence-free.
    pub fn evaluate(&self, p: &SpherePoint) -> (Vec<SphereTangent>, Vec<f64>) {
        let (psi, grad) = real_spherical_harmonics(p, self.lmax);
        let n = p.coords();
        let mut vecs = Vec::with_capacity(self.fields.len());
        let mut divs = Vec::with_capacity(self.fields.len());
        for f in &self.fields {
            let scale = 1.0 / (f.degree as f64 * (f.degree as f64 + 1.0)).sqrt();
            let g = vec3::scale(grad[f.harmonic].vec, scale);
            if f.rotated {
                vecs.push(SphereTangent { base: *p, vec: vec3::cross(n, g) });
                divs.push(0.0);
            } else {
                vecs.push(SphereTangent { base: *p, vec: g });
                divs.push(-(f.degree as f64 * (f.degree as f64 + 1.0)).sqrt() * psi[f.harmonic]);
            }
        }
        (vecs, divs)
    }

    /// A single field at one point (convenience for tests and small
    /// evaluations; batch work should use [`evaluate`](Self::evaluate)).
    pub fn field_at(&self, k: usize, p: &SpherePoint) -> SphereTangent {
        self.evaluate(p).0[k]
    }

    pub fn divergence_at(&self, k: usize, p: &SpherePoint) -> f64 {
        self.evaluate(p).1[k]
    }
}

/// Builds a tangent vector field from basis coefficients at one point.
pub fn combine_fields(fields: &[SphereTangent], coeffs: &[f64], p: &SpherePoint) -> SphereTangent {
    let mut v: Vec3 = [0.0; 3];
    for (f, &c) in fields.iter().zip(coeffs) {
        v = vec3::add(v, vec3::scale(f.vec, c));
    }
    SphereTangent { base: *p, vec: v }
}
