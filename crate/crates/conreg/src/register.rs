//! Pairwise registration: gradient descent over warp coefficients that
//! minimizes the ambient L² mismatch ‖q₁ − q₂*γ‖², with the incremental
//! warp composed into a running total each accepted step. A
//! coarse-to-fine basis ramp keeps the search out of high-frequency
//! local minima; a backtracking line search keeps the cost trace
//! strictly decreasing and the warp a diffeomorphism.

use std::sync::Arc;

use rayon::prelude::*;

use crate::basis::{HarmonicTangentBasis, SineBasis};
use crate::density::{
    alignment_cost, warp_half_density_1d, warp_half_density_dual, warp_half_density_sphere,
    DomainKind, HalfDensity, SphereWarp, SquareMatrix, Warp1D,
};
use crate::error::{Error, Result};
use crate::geometry::vec3;
use crate::geometry::{sphere_exp, tangent_frame, Grid1D, Icosphere, SphereTangent};
use crate::interp::Pchip;

const MIN_DERIVATIVE: f64 = 1e-12;
/// Forward-difference step for spatial derivatives of sphere samples.
const SPHERE_SPATIAL_EPS: f64 = 1e-3;

/// Step-size schedule and stopping rules shared by all domains.
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    /// initial step size, restored at the start of every stage
    pub sigma: f64,
    /// stop a stage when the L² norm of the update field drops below this
    pub grad_tol: f64,
    /// maximum step halvings per line search
    pub max_backoff: u32,
    /// step growth after a step accepted without backtracking
    pub sigma_growth: f64,
    pub sigma_max: f64,
    /// coarse-to-fine schedule: (basis size, iteration cap) per stage.
    /// Basis sizes select a prefix of the ordered basis.
    pub stages: Vec<(usize, usize)>,
}

impl RegistrationConfig {
    /// Defaults for interval registration with the 30-element sine basis.
    pub fn interval() -> Self {
        RegistrationConfig {
            sigma: 0.5,
            grad_tol: 1e-5,
            max_backoff: 20,
            sigma_growth: 1.5,
            sigma_max: 5.0,
            stages: vec![(10, 120), (20, 120), (30, 400)],
        }
    }

    /// A cheaper schedule for the inner loops of template estimation.
    pub fn interval_quick() -> Self {
        RegistrationConfig {
            stages: vec![(10, 60), (20, 60), (30, 100)],
            ..Self::interval()
        }
    }

    /// Defaults for sphere registration with harmonic degree 6
    /// (96 fields). Stage sizes are the field counts of degrees 2, 4, 6.
    pub fn sphere() -> Self {
        RegistrationConfig {
            sigma: 0.1,
            grad_tol: 1e-5,
            max_backoff: 20,
            sigma_growth: 1.5,
            sigma_max: 2.0,
            stages: vec![(16, 30), (48, 30), (96, 60)],
        }
    }

    fn validate(&self, basis_len: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation("registration needs at least one stage".into()));
        }
        for &(m, _) in &self.stages {
            if m == 0 || m > basis_len {
                return Err(Error::Validation(format!(
                    "stage basis size {m} outside 1..={basis_len}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a 1D registration.
#[derive(Debug, Clone)]
pub struct Registration1D {
    pub warp: Warp1D,
    /// strictly decreasing trace of accepted costs, starting with the
    /// unwarped cost
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    /// whether the final stage exited on the gradient tolerance rather
    /// than its iteration cap or a stalled line search
    pub converged: bool,
}

/// γ_outer ∘ γ_inner on a shared grid.
pub fn compose_warps(outer: &Warp1D, inner: &Warp1D) -> Result<Warp1D> {
    if outer.grid().len() != inner.grid().len() {
        return Err(Error::Validation("warp grids differ".into()));
    }
    let p = Pchip::new(outer.grid().points(), outer.values());
    let (values, derivative) = compose_raw(&p, inner.values(), inner.derivative());
    Warp1D::new(outer.grid().clone(), values, derivative)
}

fn compose_raw(outer: &Pchip, inner_vals: &[f64], inner_ders: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = inner_vals.len();
    let mut values = Vec::with_capacity(n);
    let mut ders = Vec::with_capacity(n);
    for i in 0..n {
        values.push(outer.eval(inner_vals[i]));
        ders.push((outer.eval_derivative(inner_vals[i]) * inner_ders[i]).max(MIN_DERIVATIVE));
    }
    enforce_strict(&mut values);
    (values, ders)
}

/// Pins the endpoints and nudges interior samples apart where the
/// interpolant produced exactly equal neighbours (flat segments of a
/// monotone interpolant near the boundary), so the result stays a
/// strictly increasing warp.
pub(crate) fn enforce_strict(values: &mut [f64]) {
    let n = values.len();
    values[0] = 0.0;
    for i in 1..n {
        if values[i] <= values[i - 1] {
            values[i] = values[i - 1] + 1e-14;
        }
    }
    values[n - 1] = 1.0;
    for i in (1..n - 1).rev() {
        if values[i] >= values[i + 1] {
            values[i] = values[i + 1] - 1e-14;
        }
    }
}

/// γ⁻¹ on the same grid, via interpolation of the reflected graph.
pub fn invert_warp(warp: &Warp1D) -> Result<Warp1D> {
    let xs = warp.grid().points();
    let p = Pchip::new(warp.values(), xs);
    let mut values = p.eval_many(xs);
    enforce_strict(&mut values);
    let forward = Pchip::new(xs, warp.values());
    let derivative: Vec<f64> = values
        .iter()
        .map(|&y| (1.0 / forward.eval_derivative(y).max(MIN_DERIVATIVE)).min(1.0 / MIN_DERIVATIVE))
        .collect();
    Warp1D::new(warp.grid().clone(), values, derivative)
}

/// Central-difference derivative of matrix samples along rows (axis 0)
/// on a uniform grid.
fn matrix_gradient_rows(q: &SquareMatrix, h: f64) -> SquareMatrix {
    let n = q.size();
    let mut out = SquareMatrix::zeros(n);
    for j in 0..n {
        out.set(0, j, (q.get(1, j) - q.get(0, j)) / h);
        out.set(n - 1, j, (q.get(n - 1, j) - q.get(n - 2, j)) / h);
    }
    for i in 1..n - 1 {
        for j in 0..n {
            out.set(i, j, (q.get(i + 1, j) - q.get(i - 1, j)) / (2.0 * h));
        }
    }
    out
}

/// Differential of the warp action at the identity along the velocity
/// field b: dΦ(b)(x,y) = ∂ₓq·b(x) + ∂ᵧq·b(y) + q·(ḃ(x) + ḃ(y))/2.
/// Exposed for the finite-difference oracles in the tests.
pub fn dphi_1d(q: &HalfDensity, b_values: &[f64], b_derivs: &[f64]) -> Result<SquareMatrix> {
    let grid = q
        .domain()
        .grid()
        .ok_or_else(|| Error::Validation("dphi_1d requires an interval domain".into()))?;
    let n = grid.len();
    if b_values.len() != n || b_derivs.len() != n {
        return Err(Error::Validation("field sample count does not match grid".into()));
    }
    let h = grid.spacing();
    let dqx = matrix_gradient_rows(q.values(), h);
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            // ∂ᵧq(i,j) = ∂ₓq(j,i) by symmetry of q
            let v = dqx.get(i, j) * b_values[i]
                + dqx.get(j, i) * b_values[j]
                + 0.5 * q.values().get(i, j) * (b_derivs[i] + b_derivs[j]);
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Cost-gradient coefficients over the first `m` sine basis elements:
/// coef_k = −2⟨q₁ − q₂ʷ, dΦ(b_k)⟩.
pub fn gradient_coefficients_1d(
    q1: &HalfDensity,
    q2w: &SquareMatrix,
    grid: &Grid1D,
    basis: &SineBasis,
    m: usize,
) -> Vec<f64> {
    let n = grid.len();
    let w = grid.weights();
    let h = grid.spacing();
    let dqx = matrix_gradient_rows_of(q2w, h, n);
    // row-contracted residual sums; the y-axis terms mirror the x-axis
    // ones through the symmetry of residual and q
    let mut u = vec![0.0; n]; // Σ_j r_ij ∂ₓq(i,j)
    let mut t = vec![0.0; n]; // Σ_j r_ij q(i,j)
    for i in 0..n {
        let mut ui = 0.0;
        let mut ti = 0.0;
        for j in 0..n {
            let r = w[i] * w[j] * (q1.values().get(i, j) - q2w.get(i, j));
            ui += r * dqx.get(i, j);
            ti += r * q2w.get(i, j);
        }
        u[i] = ui;
        t[i] = ti;
    }
    (0..m)
        .map(|k| {
            let bv = basis.values(k);
            let bd = basis.derivatives(k);
            let mut acc = 0.0;
            for i in 0..n {
                acc += 2.0 * bv[i] * u[i] + bd[i] * t[i];
            }
            -2.0 * acc
        })
        .collect()
}

fn matrix_gradient_rows_of(q: &SquareMatrix, h: f64, _n: usize) -> SquareMatrix {
    matrix_gradient_rows(q, h)
}

/// Registers q₂ onto q₁ over the interval: finds γ minimizing
/// ‖q₁ − q₂*γ‖². `basis` must cover the largest stage size.
pub fn register_pair_1d(
    q1: &HalfDensity,
    q2: &HalfDensity,
    basis: &SineBasis,
    config: &RegistrationConfig,
) -> Result<Registration1D> {
    register_pair_1d_warm(q1, q2, basis, config, None)
}

/// [`register_pair_1d`] continued from an initial warp instead of the
/// identity, so repeated alignments to a slowly moving target can reuse
/// the previous solution.
pub fn register_pair_1d_warm(
    q1: &HalfDensity,
    q2: &HalfDensity,
    basis: &SineBasis,
    config: &RegistrationConfig,
    init: Option<&Warp1D>,
) -> Result<Registration1D> {
    if !q1.domain().same_as(q2.domain()) {
        return Err(Error::Validation("half-densities live on different domains".into()));
    }
    let grid = q1
        .domain()
        .grid()
        .ok_or_else(|| Error::Validation("register_pair_1d requires an interval domain".into()))?
        .clone();
    config.validate(basis.count())?;
    let n = grid.len();
    let xs = grid.points();

    let (mut total_vals, mut total_ders, mut q2w, mut cost) = match init {
        Some(w) => {
            if w.grid().len() != n {
                return Err(Error::Validation("initial warp grid differs".into()));
            }
            let moved = warp_half_density_1d(q2, w)?;
            let cost = alignment_cost(q1, &moved)?;
            (
                w.values().to_vec(),
                w.derivative().to_vec(),
                moved.values().clone(),
                cost,
            )
        }
        None => (
            xs.to_vec(),
            vec![1.0; n],
            q2.values().clone(),
            alignment_cost(q1, q2)?,
        ),
    };
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut converged = false;

    for &(m, iter_cap) in &config.stages {
        let mut sigma = config.sigma;
        converged = false;
        for _ in 0..iter_cap {
            let coef = gradient_coefficients_1d(q1, &q2w, &grid, basis, m);
            // update field g = Σ coef_k b_k and its derivative
            let mut g = vec![0.0; n];
            let mut gd = vec![0.0; n];
            for (k, &c) in coef.iter().enumerate() {
                let bv = basis.values(k);
                let bd = basis.derivatives(k);
                for i in 0..n {
                    g[i] += c * bv[i];
                    gd[i] += c * bd[i];
                }
            }
            let gnorm = grid
                .integrate(&g.iter().map(|v| v * v).collect::<Vec<_>>())
                .sqrt();
            if gnorm <= config.grad_tol {
                converged = true;
                break;
            }
            // backtracking: γ_inc = id − σg must stay a diffeomorphism
            // and decrease the cost
            let mut accepted = false;
            let mut clean = false;
            for backoff in 0..config.max_backoff {
                let mut ok = true;
                let mut inc_vals = Vec::with_capacity(n);
                let mut inc_ders = Vec::with_capacity(n);
                for i in 0..n {
                    let d = 1.0 - sigma * gd[i];
                    if d <= 1e-6 {
                        ok = false;
                        break;
                    }
                    inc_vals.push(xs[i] - sigma * g[i]);
                    inc_ders.push(d);
                }
                if ok {
                    let p = Pchip::new(xs, &total_vals);
                    let (new_vals, new_ders) = compose_raw(&p, &inc_vals, &inc_ders);
                    let warp = Warp1D::new(grid.clone(), new_vals, new_ders)?;
                    let q2_new = warp_half_density_1d(q2, &warp)?;
                    let new_cost = alignment_cost(q1, &q2_new)?;
                    if new_cost < cost {
                        total_vals = warp.values().to_vec();
                        total_ders = warp.derivative().to_vec();
                        q2w = q2_new.values().clone();
                        cost = new_cost;
                        trace.push(cost);
                        accepted = true;
                        clean = backoff == 0;
                        break;
                    }
                }
                sigma *= 0.5;
            }
            if !accepted {
                break;
            }
            iterations += 1;
            if clean {
                sigma = (sigma * config.sigma_growth).min(config.sigma_max);
            }
        }
    }

    Ok(Registration1D {
        warp: Warp1D::new(grid, total_vals, total_ders)?,
        cost_trace: trace,
        iterations,
        converged,
    })
}

// ---- sphere ----

/// Per-vertex tables for the harmonic tangent basis on an icosphere:
/// frame coefficients of every field, divergences, and interpolation
/// stencils for the forward spatial-derivative probes.
pub struct SphereBasisTables {
    ico: Arc<Icosphere>,
    basis: HarmonicTangentBasis,
    /// frames[i] = (w1, w2) at vertex i
    frames: Vec<(SphereTangent, SphereTangent)>,
    /// b1[k][i], b2[k][i]: frame coefficients of field k at vertex i
    b1: Vec<Vec<f64>>,
    b2: Vec<Vec<f64>>,
    div: Vec<Vec<f64>>,
    /// stencils of exp_{v_i}(ε w1) and exp_{v_i}(ε w2)
    probe1: Vec<crate::density::Stencil>,
    probe2: Vec<crate::density::Stencil>,
}

impl SphereBasisTables {
    pub fn new(ico: Arc<Icosphere>, lmax: u32) -> Result<Self> {
        let basis = HarmonicTangentBasis::new(lmax)?;
        let nv = ico.vertex_count();
        let nk = basis.count();
        let mut frames = Vec::with_capacity(nv);
        let mut b1 = vec![vec![0.0; nv]; nk];
        let mut b2 = vec![vec![0.0; nv]; nk];
        let mut div = vec![vec![0.0; nv]; nk];
        let mut probe1 = Vec::with_capacity(nv);
        let mut probe2 = Vec::with_capacity(nv);
        for (i, v) in ico.vertices().iter().enumerate() {
            let (w1, w2) = tangent_frame(v);
            let (fields, divs) = basis.evaluate(v);
            for k in 0..nk {
                b1[k][i] = vec3::dot(fields[k].vec, w1.vec);
                b2[k][i] = vec3::dot(fields[k].vec, w2.vec);
                div[k][i] = divs[k];
            }
            for (w, probes) in [(&w1, &mut probe1), (&w2, &mut probe2)] {
                let p = sphere_exp(v, &w.scale(SPHERE_SPATIAL_EPS));
                let loc = ico.locate(&p);
                probes.push(crate::density::Stencil {
                    nodes: ico.faces()[loc.face],
                    weights: loc.bary,
                });
            }
            frames.push((w1, w2));
        }
        Ok(SphereBasisTables { ico, basis, frames, b1, b2, div, probe1, probe2 })
    }

    pub fn icosphere(&self) -> &Arc<Icosphere> {
        &self.ico
    }

    pub fn basis(&self) -> &HarmonicTangentBasis {
        &self.basis
    }

    pub fn field_count(&self) -> usize {
        self.basis.count()
    }

    /// Gradient coefficients over the first `m` fields for the residual
    /// q₁ − q₂ʷ, plus the update field itself. `node_offset` and
    /// `node_total` address the hemisphere's rows inside a dual matrix
    /// (0 and the full size for a single sphere).
    pub fn gradient(
        &self,
        q1: &SquareMatrix,
        q2w: &SquareMatrix,
        weights: &[f64],
        m: usize,
        node_offset: usize,
    ) -> (Vec<f64>, Vec<SphereTangent>) {
        let nv = self.ico.vertex_count();
        let total = q1.size();
        let eps = SPHERE_SPATIAL_EPS;
        // u1/u2: residual-contracted forward-difference spatial
        // derivatives along the frame; t: residual-contracted q
        let sums: Vec<(f64, f64, f64)> = (0..nv)
            .into_par_iter()
            .map(|i| {
                let gi = node_offset + i;
                let s1 = &self.probe1[i];
                let s2 = &self.probe2[i];
                let rows1: [&[f64]; 3] = [
                    q2w.row(node_offset + s1.nodes[0]),
                    q2w.row(node_offset + s1.nodes[1]),
                    q2w.row(node_offset + s1.nodes[2]),
                ];
                let rows2: [&[f64]; 3] = [
                    q2w.row(node_offset + s2.nodes[0]),
                    q2w.row(node_offset + s2.nodes[1]),
                    q2w.row(node_offset + s2.nodes[2]),
                ];
                let qrow = q2w.row(gi);
                let q1row = q1.row(gi);
                let wi = weights[gi];
                let (mut u1, mut u2, mut t) = (0.0, 0.0, 0.0);
                for j in 0..total {
                    let r = wi * weights[j] * (q1row[j] - qrow[j]);
                    let p1 = s1.weights[0] * rows1[0][j]
                        + s1.weights[1] * rows1[1][j]
                        + s1.weights[2] * rows1[2][j];
                    let p2 = s2.weights[0] * rows2[0][j]
                        + s2.weights[1] * rows2[1][j]
                        + s2.weights[2] * rows2[2][j];
                    u1 += r * (p1 - qrow[j]) / eps;
                    u2 += r * (p2 - qrow[j]) / eps;
                    t += r * qrow[j];
                }
                (u1, u2, t)
            })
            .collect();
        let coef: Vec<f64> = (0..m)
            .map(|k| {
                let mut acc = 0.0;
                for i in 0..nv {
                    let (u1, u2, t) = sums[i];
                    acc += 2.0 * (self.b1[k][i] * u1 + self.b2[k][i] * u2)
                        + self.div[k][i] * t;
                }
                -2.0 * acc
            })
            .collect();
        let field: Vec<SphereTangent> = (0..nv)
            .map(|i| {
                let (w1, w2) = &self.frames[i];
                let (mut a1, mut a2) = (0.0, 0.0);
                for (k, &c) in coef.iter().enumerate() {
                    a1 += c * self.b1[k][i];
                    a2 += c * self.b2[k][i];
                }
                SphereTangent {
                    base: self.ico.vertices()[i],
                    vec: vec3::add(vec3::scale(w1.vec, a1), vec3::scale(w2.vec, a2)),
                }
            })
            .collect();
        (coef, field)
    }
}

/// Outcome of a sphere registration.
#[derive(Debug, Clone)]
pub struct RegistrationSphere {
    pub warp: SphereWarp,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// norm drift absorbed by renormalization in the final warp action
    pub final_raw_norm: f64,
}

/// Registers q₂ onto q₁ over the sphere.
pub fn register_pair_sphere(
    q1: &HalfDensity,
    q2: &HalfDensity,
    tables: &SphereBasisTables,
    config: &RegistrationConfig,
) -> Result<RegistrationSphere> {
    register_pair_sphere_warm(q1, q2, tables, config, None)
}

/// [`register_pair_sphere`] continued from an initial warp.
pub fn register_pair_sphere_warm(
    q1: &HalfDensity,
    q2: &HalfDensity,
    tables: &SphereBasisTables,
    config: &RegistrationConfig,
    init: Option<&SphereWarp>,
) -> Result<RegistrationSphere> {
    if !q1.domain().same_as(q2.domain()) {
        return Err(Error::Validation("half-densities live on different domains".into()));
    }
    let ico = match q1.domain().kind() {
        DomainKind::Sphere(ico) => ico.clone(),
        _ => {
            return Err(Error::Validation(
                "register_pair_sphere requires a sphere domain".into(),
            ))
        }
    };
    if ico.level() != tables.ico.level() {
        return Err(Error::Validation("basis tables built for a different grid".into()));
    }
    config.validate(tables.field_count())?;
    let weights = q1.domain().weights().to_vec();

    let (mut warp, mut q2w, mut raw_norm, mut cost) = match init {
        Some(w) => {
            if w.icosphere().level() != ico.level() {
                return Err(Error::Validation("initial warp grid differs".into()));
            }
            let moved = warp_half_density_sphere(q2, w)?;
            let cost = alignment_cost(q1, &moved.half_density)?;
            (
                w.clone(),
                moved.half_density.values().clone(),
                moved.raw_norm,
                cost,
            )
        }
        None => (
            SphereWarp::identity(ico.clone()),
            q2.values().clone(),
            1.0,
            alignment_cost(q1, q2)?,
        ),
    };
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut converged = false;

    for &(m, iter_cap) in &config.stages {
        let mut sigma = config.sigma;
        converged = false;
        for _ in 0..iter_cap {
            let (coef, field) = tables.gradient(q1.values(), &q2w, &weights, m, 0);
            let gnorm = coef.iter().map(|c| c * c).sum::<f64>().sqrt();
            if gnorm <= config.grad_tol {
                converged = true;
                break;
            }
            let mut accepted = false;
            let mut clean = false;
            for backoff in 0..config.max_backoff {
                match try_sphere_step(q1, q2, &warp, &field, sigma) {
                    Ok(Some((new_warp, new_q2w, new_raw, new_cost))) if new_cost < cost => {
                        warp = new_warp;
                        q2w = new_q2w;
                        raw_norm = new_raw;
                        cost = new_cost;
                        trace.push(cost);
                        accepted = true;
                        clean = backoff == 0;
                        break;
                    }
                    Ok(_) => {}
                    Err(Error::Diffeomorphism(_)) | Err(Error::Domain(_)) => {}
                    Err(e) => return Err(e),
                }
                sigma *= 0.5;
            }
            if !accepted {
                break;
            }
            iterations += 1;
            if clean {
                sigma = (sigma * config.sigma_growth).min(config.sigma_max);
            }
        }
    }

    Ok(RegistrationSphere {
        warp,
        cost_trace: trace,
        iterations,
        converged,
        final_raw_norm: raw_norm,
    })
}

type SphereStep = (SphereWarp, SquareMatrix, f64, f64);

/// One trial step: compose the current warp with exp(−σ·field), check
/// the Jacobians, re-warp and price it. `Ok(None)` flags a fold.
fn try_sphere_step(
    q1: &HalfDensity,
    q2: &HalfDensity,
    warp: &SphereWarp,
    field: &[SphereTangent],
    sigma: f64,
) -> Result<Option<SphereStep>> {
    let ico = warp.icosphere();
    let mut targets = Vec::with_capacity(field.len());
    for (i, f) in field.iter().enumerate() {
        let moved = sphere_exp(&ico.vertices()[i], &f.scale(-sigma));
        targets.push(warp.warp_point(&moved)?);
    }
    let new_warp = SphereWarp::new(ico.clone(), targets)?;
    match new_warp.jacobians() {
        Ok(_) => {}
        Err(Error::Diffeomorphism(_)) => return Ok(None),
        Err(e) => return Err(e),
    }
    let warped = warp_half_density_sphere(q2, &new_warp)?;
    let new_cost = alignment_cost(q1, &warped.half_density)?;
    Ok(Some((
        new_warp,
        warped.half_density.values().clone(),
        warped.raw_norm,
        new_cost,
    )))
}

/// Outcome of a dual-hemisphere registration.
#[derive(Debug, Clone)]
pub struct RegistrationDual {
    pub warp1: SphereWarp,
    pub warp2: SphereWarp,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_raw_norm: f64,
}

/// Registers q₂ onto q₁ over two hemispheres, alternating which
/// hemisphere's warp is updated each iteration. The gradient of each
/// hemisphere sees the full residual: its warp moves the within-block
/// and cross-block values, while the other hemisphere's block is
/// untouched.
pub fn register_pair_dual(
    q1: &HalfDensity,
    q2: &HalfDensity,
    tables1: &SphereBasisTables,
    tables2: &SphereBasisTables,
    config: &RegistrationConfig,
) -> Result<RegistrationDual> {
    if !q1.domain().same_as(q2.domain()) {
        return Err(Error::Validation("half-densities live on different domains".into()));
    }
    let (ico1, ico2) = match q1.domain().kind() {
        DomainKind::DualSphere(a, b) => (a.clone(), b.clone()),
        _ => {
            return Err(Error::Validation(
                "register_pair_dual requires a dual-sphere domain".into(),
            ))
        }
    };
    if ico1.level() != tables1.ico.level() || ico2.level() != tables2.ico.level() {
        return Err(Error::Validation("basis tables built for a different grid".into()));
    }
    config.validate(tables1.field_count().min(tables2.field_count()))?;
    let weights = q1.domain().weights().to_vec();
    let v1 = ico1.vertex_count();

    let mut warp1 = SphereWarp::identity(ico1.clone());
    let mut warp2 = SphereWarp::identity(ico2.clone());
    let mut q2w = q2.values().clone();
    let mut raw_norm = 1.0;
    let mut cost = alignment_cost(q1, q2)?;
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut converged = false;

    for &(m, iter_cap) in &config.stages {
        let mut sigma = config.sigma;
        let mut stalled = [false, false];
        let mut small_grad = [false, false];
        for it in 0..iter_cap {
            let side = it % 2;
            if stalled[side] {
                if stalled[1 - side] {
                    break;
                }
                continue;
            }
            let (tables, offset) = if side == 0 {
                (tables1, 0)
            } else {
                (tables2, v1)
            };
            let (coef, field) = tables.gradient(q1.values(), &q2w, &weights, m, offset);
            let gnorm = coef.iter().map(|c| c * c).sum::<f64>().sqrt();
            if gnorm <= config.grad_tol {
                small_grad[side] = true;
                stalled[side] = true;
                if stalled[1 - side] {
                    break;
                }
                continue;
            }
            let mut accepted = false;
            let mut clean = false;
            for backoff in 0..config.max_backoff {
                let trial = if side == 0 {
                    try_dual_step(q1, q2, &warp1, &warp2, &field, sigma, true)
                } else {
                    try_dual_step(q1, q2, &warp1, &warp2, &field, sigma, false)
                };
                match trial {
                    Ok(Some((w1n, w2n, new_q2w, new_raw, new_cost))) if new_cost < cost => {
                        warp1 = w1n;
                        warp2 = w2n;
                        q2w = new_q2w;
                        raw_norm = new_raw;
                        cost = new_cost;
                        trace.push(cost);
                        accepted = true;
                        clean = backoff == 0;
                        break;
                    }
                    Ok(_) => {}
                    Err(Error::Diffeomorphism(_)) | Err(Error::Domain(_)) => {}
                    Err(e) => return Err(e),
                }
                sigma *= 0.5;
            }
            if !accepted {
                stalled[side] = true;
                if stalled[1 - side] {
                    break;
                }
                continue;
            }
            iterations += 1;
            if clean {
                sigma = (sigma * config.sigma_growth).min(config.sigma_max);
            }
        }
        converged = small_grad[0] && small_grad[1];
    }

    Ok(RegistrationDual {
        warp1,
        warp2,
        cost_trace: trace,
        iterations,
        converged,
        final_raw_norm: raw_norm,
    })
}

type DualStep = (SphereWarp, SphereWarp, SquareMatrix, f64, f64);

fn try_dual_step(
    q1: &HalfDensity,
    q2: &HalfDensity,
    warp1: &SphereWarp,
    warp2: &SphereWarp,
    field: &[SphereTangent],
    sigma: f64,
    first: bool,
) -> Result<Option<DualStep>> {
    let moving = if first { warp1 } else { warp2 };
    let ico = moving.icosphere();
    let mut targets = Vec::with_capacity(field.len());
    for (i, f) in field.iter().enumerate() {
        let moved = sphere_exp(&ico.vertices()[i], &f.scale(-sigma));
        targets.push(moving.warp_point(&moved)?);
    }
    let new_moving = SphereWarp::new(ico.clone(), targets)?;
    match new_moving.jacobians() {
        Ok(_) => {}
        Err(Error::Diffeomorphism(_)) => return Ok(None),
        Err(e) => return Err(e),
    }
    let (w1, w2) = if first {
        (new_moving, warp2.clone())
    } else {
        (warp1.clone(), new_moving)
    };
    let warped = warp_half_density_dual(q2, &w1, &w2)?;
    let new_cost = alignment_cost(q1, &warped.half_density)?;
    Ok(Some((
        w1,
        w2,
        warped.half_density.values().clone(),
        warped.raw_norm,
        new_cost,
    )))
}

#[cfg(test)]
mod tests;
