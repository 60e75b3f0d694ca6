//! Connectivity density fields and half-densities on Ω×Ω, the square-root
//! transform, warping group actions with derivative/Jacobian factors,
//! bivariate interpolation, and the distances driving registration.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::vec3;
use crate::geometry::{
    cartesian_to_spherical, parallel_transport, sphere_exp, sphere_log, tangent_frame, Grid1D,
    Icosphere, SpherePoint, SphereTangent,
};
use crate::interp::Pchip;

/// Finite-difference step (radians) for sphere-warp Jacobians.
pub const JACOBIAN_FD_STEP: f64 = 1e-3;
/// Finite-difference step (radians) for spatial derivatives of q.
pub const SPATIAL_FD_STEP: f64 = 1e-3;

/// Dense square matrix of per-node-pair samples, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Validation(format!(
                "matrix data length {} does not match {n}x{n}",
                data.len()
            )));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            for j in 0..i {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SquareMatrix {
        SquareMatrix { n: self.n, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// The discretized domain Ω together with its quadrature weights.
#[derive(Debug, Clone)]
pub enum DomainKind {
    Interval(Grid1D),
    Sphere(Arc<Icosphere>),
    /// Two disjoint hemispheres, each its own sphere grid. Node indices
    /// `0..V` belong to the first, `V..2V` to the second.
    DualSphere(Arc<Icosphere>, Arc<Icosphere>),
}

#[derive(Debug, Clone)]
pub struct DomainSpec {
    kind: DomainKind,
    weights: Vec<f64>,
}

impl DomainSpec {
    pub fn interval(grid: Grid1D) -> Self {
        let weights = grid.weights().to_vec();
        DomainSpec { kind: DomainKind::Interval(grid), weights }
    }

    pub fn sphere(ico: Arc<Icosphere>) -> Self {
        let weights = ico.vertex_weights().to_vec();
        DomainSpec { kind: DomainKind::Sphere(ico), weights }
    }

    pub fn dual_sphere(first: Arc<Icosphere>, second: Arc<Icosphere>) -> Self {
        let mut weights = first.vertex_weights().to_vec();
        weights.extend_from_slice(second.vertex_weights());
        DomainSpec { kind: DomainKind::DualSphere(first, second), weights }
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// For dual domains: does node `idx` live on the second hemisphere?
    pub fn in_second_hemisphere(&self, idx: usize) -> bool {
        match &self.kind {
            DomainKind::DualSphere(first, _) => idx >= first.vertex_count(),
            _ => false,
        }
    }

    pub fn grid(&self) -> Option<&Grid1D> {
        match &self.kind {
            DomainKind::Interval(g) => Some(g),
            _ => None,
        }
    }

    pub fn icosphere(&self) -> Option<&Arc<Icosphere>> {
        match &self.kind {
            DomainKind::Sphere(ico) => Some(ico),
            _ => None,
        }
    }

    /// Structural equality: same domain family and same grids.
    pub fn same_as(&self, other: &DomainSpec) -> bool {
        match (&self.kind, &other.kind) {
            (DomainKind::Interval(a), DomainKind::Interval(b)) => a.len() == b.len(),
            (DomainKind::Sphere(a), DomainKind::Sphere(b)) => a.level() == b.level(),
            (DomainKind::DualSphere(a1, a2), DomainKind::DualSphere(b1, b2)) => {
                a1.level() == b1.level() && a2.level() == b2.level()
            }
            _ => false,
        }
    }

    /// Quadrature double integral Σᵢⱼ wᵢwⱼ m[i][j], fixed summation order.
    pub fn double_integral(&self, m: &SquareMatrix) -> f64 {
        let w = &self.weights;
        let mut total = 0.0;
        for i in 0..m.size() {
            let row = m.row(i);
            let mut acc = 0.0;
            for j in 0..row.len() {
                acc += w[j] * row[j];
            }
            total += w[i] * acc;
        }
        total
    }
}

/// Symmetric nonnegative density with unit quadrature double integral.
#[derive(Debug, Clone)]
pub struct DensityField {
    domain: DomainSpec,
    values: SquareMatrix,
}

impl DensityField {
    pub fn new(domain: DomainSpec, values: SquareMatrix) -> Result<Self> {
        if values.size() != domain.node_count() {
            return Err(Error::Validation(format!(
                "value matrix size {} does not match domain node count {}",
                values.size(),
                domain.node_count()
            )));
        }
        if !values.is_symmetric() {
            return Err(Error::Validation("density matrix is not symmetric".into()));
        }
        if values.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Validation("density has negative values".into()));
        }
        let integral = domain.double_integral(&values);
        if (integral - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "density integral {integral} deviates from 1 by more than 1e-6"
            )));
        }
        Ok(DensityField { domain, values })
    }

    /// Builds from raw nonnegative symmetric samples, rescaling to unit
    /// integral.
    pub fn from_unnormalized(domain: DomainSpec, values: SquareMatrix) -> Result<Self> {
        let integral = domain.double_integral(&values);
        if integral <= 0.0 {
            return Err(Error::Validation("density integrates to zero".into()));
        }
        let scaled = values.map(|v| v / integral);
        DensityField::new(domain, scaled)
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn values(&self) -> &SquareMatrix {
        &self.values
    }

    pub fn integral(&self) -> f64 {
        self.domain.double_integral(&self.values)
    }
}

/// Square-root transformed density: symmetric with unit quadrature L² norm.
#[derive(Debug, Clone)]
pub struct HalfDensity {
    domain: DomainSpec,
    values: SquareMatrix,
}

impl HalfDensity {
    pub fn new(domain: DomainSpec, values: SquareMatrix) -> Result<Self> {
        if values.size() != domain.node_count() {
            return Err(Error::Validation(format!(
                "value matrix size {} does not match domain node count {}",
                values.size(),
                domain.node_count()
            )));
        }
        if !values.is_symmetric() {
            return Err(Error::Validation("half-density matrix is not symmetric".into()));
        }
        let sq = values.map(|v| v * v);
        let norm2 = domain.double_integral(&sq);
        if (norm2 - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "half-density squared norm {norm2} deviates from 1 by more than 1e-6"
            )));
        }
        Ok(HalfDensity { domain, values })
    }

    /// Wraps values without the unit-norm check. For intermediate states
    /// whose norm drift is tracked explicitly.
    pub(crate) fn new_unchecked(domain: DomainSpec, values: SquareMatrix) -> Self {
        HalfDensity { domain, values }
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn values(&self) -> &SquareMatrix {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.domain.double_integral(&self.values.map(|v| v * v)).sqrt()
    }

    /// Rescales to unit L² norm, returning the norm that was removed.
    pub fn renormalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            for v in self.values.data_mut() {
                *v /= n;
            }
        }
        n
    }
}

/// Boundary-preserving monotone warp of [0,1], sampled on a grid.
#[derive(Debug, Clone)]
pub struct Warp1D {
    grid: Grid1D,
    values: Vec<f64>,
    derivative: Vec<f64>,
}

impl Warp1D {
    pub fn new(grid: Grid1D, values: Vec<f64>, derivative: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() || derivative.len() != grid.len() {
            return Err(Error::Validation("warp sample count does not match grid".into()));
        }
        if values[0] != 0.0 || *values.last().unwrap() != 1.0 {
            return Err(Error::Validation("warp must fix the endpoints 0 and 1".into()));
        }
        if values.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Diffeomorphism("warp values are not strictly increasing".into()));
        }
        if derivative.iter().any(|&d| d <= 0.0) {
            return Err(Error::Diffeomorphism("warp derivative must be positive".into()));
        }
        Ok(Warp1D { grid, values, derivative })
    }

    pub fn identity(grid: Grid1D) -> Self {
        let values = grid.points().to_vec();
        let derivative = vec![1.0; grid.len()];
        Warp1D { grid, values, derivative }
    }

    /// Densifies warp knots onto `grid` by monotone cubic interpolation.
    pub fn from_knots(grid: Grid1D, knot_x: &[f64], knot_y: &[f64]) -> Result<Self> {
        let p = Pchip::new(knot_x, knot_y);
        let mut values: Vec<f64> = grid.points().iter().map(|&x| p.eval(x)).collect();
        let derivative: Vec<f64> =
            grid.points().iter().map(|&x| p.eval_derivative(x).max(1e-12)).collect();
        let n = values.len();
        values[0] = 0.0;
        values[n - 1] = 1.0;
        Warp1D::new(grid, values, derivative)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn derivative(&self) -> &[f64] {
        &self.derivative
    }
}

/// Diffeomorphism of the sphere, stored as per-vertex target points.
#[derive(Debug, Clone)]
pub struct SphereWarp {
    ico: Arc<Icosphere>,
    targets: Vec<SpherePoint>,
    jacobians: OnceLock<Vec<f64>>,
}

impl SphereWarp {
    pub fn new(ico: Arc<Icosphere>, targets: Vec<SpherePoint>) -> Result<Self> {
        if targets.len() != ico.vertex_count() {
            return Err(Error::Validation("target count does not match vertex count".into()));
        }
        Ok(SphereWarp { ico, targets, jacobians: OnceLock::new() })
    }

    pub fn identity(ico: Arc<Icosphere>) -> Self {
        let targets = ico.vertices().to_vec();
        SphereWarp { ico, targets, jacobians: OnceLock::new() }
    }

    pub fn icosphere(&self) -> &Arc<Icosphere> {
        &self.ico
    }

    pub fn targets(&self) -> &[SpherePoint] {
        &self.targets
    }

    pub fn target(&self, vertex: usize) -> SpherePoint {
        self.targets[vertex]
    }

    /// Evaluates the warp at an arbitrary point: corner displacements are
    /// parallel-transported to the query before barycentric averaging,
    /// keeping the blended displacement in the tangent plane.
    pub fn warp_point(&self, p: &SpherePoint) -> Result<SpherePoint> {
        let loc = self.ico.locate(p);
        let face = self.ico.faces()[loc.face];
        let mut blended = [0.0; 3];
        for (slot, &corner) in face.iter().enumerate() {
            let w = loc.bary[slot];
            if w == 0.0 {
                continue;
            }
            let base = self.ico.vertices()[corner];
            let disp = sphere_log(&base, &self.targets[corner])?;
            let moved = parallel_transport(&base, p, &disp)?;
            blended = vec3::add(blended, vec3::scale(moved.vec, w));
        }
        Ok(sphere_exp(p, &SphereTangent::project(*p, blended)))
    }

    /// Jacobian determinants at every vertex, cached after first use.
    pub fn jacobians(&self) -> Result<&[f64]> {
        if let Some(j) = self.jacobians.get() {
            return Ok(j);
        }
        let mut out = Vec::with_capacity(self.targets.len());
        for v in 0..self.targets.len() {
            out.push(jacobian_det(self, v, JACOBIAN_FD_STEP)?);
        }
        let _ = self.jacobians.set(out);
        Ok(self.jacobians.get().unwrap())
    }

    /// Quadrature-weighted mean of |J|; 1 for exact diffeomorphisms.
    pub fn mean_jacobian(&self) -> Result<f64> {
        let j = self.jacobians()?;
        let total: f64 = 4.0 * std::f64::consts::PI;
        Ok(self.ico.integrate(j) / total)
    }
}

/// Signed square root: √s for s ≥ 0, −√(−s) otherwise.
#[inline]
pub fn signed_sqrt(s: f64) -> f64 {
    if s >= 0.0 {
        s.sqrt()
    } else {
        -(-s).sqrt()
    }
}

/// Square-root transform of a density.
pub fn q_map(f: &DensityField) -> HalfDensity {
    let values = f.values().map(signed_sqrt);
    HalfDensity { domain: f.domain().clone(), values }
}

/// Inverse transform: pointwise signed square.
pub fn q_unmap(q: &HalfDensity) -> Result<DensityField> {
    let values = q.values().map(|s| s * s.abs());
    DensityField::new(q.domain().clone(), values)
}

fn interval_grid<'a>(domain: &'a DomainSpec, what: &str) -> Result<&'a Grid1D> {
    domain.grid().ok_or_else(|| Error::Validation(format!("{what} requires an interval domain")))
}

/// Warps matrix samples through γ along both axes by monotone cubic
/// interpolation: out[i][j] = m(γ(xᵢ), γ(xⱼ)), symmetrized exactly.
fn warp_matrix_1d(grid: &Grid1D, m: &SquareMatrix, gamma: &[f64]) -> SquareMatrix {
    let n = m.size();
    let xs = grid.points();
    // rows first: a[i][j] = m(x_i, gamma(x_j))
    let mut a = SquareMatrix::zeros(n);
    for i in 0..n {
        let p = Pchip::new(xs, m.row(i));
        for j in 0..n {
            a.set(i, j, p.eval(gamma[j]));
        }
    }
    // then columns: out[i][j] = a(gamma(x_i), j)
    let mut out = SquareMatrix::zeros(n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = a.get(i, j);
        }
        let p = Pchip::new(xs, &col);
        for i in 0..n {
            out.set(i, j, p.eval(gamma[i]));
        }
    }
    // the action preserves symmetry analytically; make it exact
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out.get(i, j) + out.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Group action (f*γ) = (f∘γ̃)·γ̇(x)·γ̇(y) on interval densities.
pub fn warp_density_1d(f: &DensityField, warp: &Warp1D) -> Result<DensityField> {
    let grid = interval_grid(f.domain(), "warp_density_1d")?;
    if grid.len() != warp.grid().len() {
        return Err(Error::Validation("density and warp grids differ".into()));
    }
    let mut out = warp_matrix_1d(grid, f.values(), warp.values());
    let d = warp.derivative();
    let n = out.size();
    for i in 0..n {
        for j in 0..=i {
            let v = (out.get(i, j) * d[i] * d[j]).max(0.0);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    // unit integral up to quadrature error; re-validate through the
    // normalizing constructor
    DensityField::from_unnormalized(f.domain().clone(), out)
}

/// Group action (q*γ) = (q∘γ̃)·√γ̇(x)·√γ̇(y) on interval half-densities.
pub fn warp_half_density_1d(q: &HalfDensity, warp: &Warp1D) -> Result<HalfDensity> {
    let grid = interval_grid(q.domain(), "warp_half_density_1d")?;
    if grid.len() != warp.grid().len() {
        return Err(Error::Validation("half-density and warp grids differ".into()));
    }
    let mut out = warp_matrix_1d(grid, q.values(), warp.values());
    let sqrt_d: Vec<f64> = warp.derivative().iter().map(|&d| d.sqrt()).collect();
    let n = out.size();
    for i in 0..n {
        for j in 0..=i {
            let v = out.get(i, j) * sqrt_d[i] * sqrt_d[j];
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(HalfDensity::new_unchecked(q.domain().clone(), out))
}

/// Two-stage barycentric interpolation of sphere half-density samples at
/// an arbitrary point pair: A_yᵀ B A_x with corner-value matrix B.
pub fn interpolate_bivariate(q: &HalfDensity, x: &SpherePoint, y: &SpherePoint) -> Result<f64> {
    let ico = q
        .domain()
        .icosphere()
        .ok_or_else(|| Error::Validation("interpolate_bivariate requires a sphere domain".into()))?;
    let lx = ico.locate(x);
    let ly = ico.locate(y);
    let fx = ico.faces()[lx.face];
    let fy = ico.faces()[ly.face];
    let mut acc = 0.0;
    for (a, &vx) in fx.iter().enumerate() {
        for (b, &vy) in fy.iter().enumerate() {
            acc += lx.bary[a] * ly.bary[b] * q.values().get(vx, vy);
        }
    }
    Ok(acc)
}

/// Jacobian determinant of a sphere warp at a grid vertex via central
/// differences of step `delta` along an orthonormal tangent frame.
///
/// The determinant is evaluated frame-free: the two finite-difference
/// columns are taken in the tangent space at γ(v) through the log map,
/// and their cross product against the outward normal gives the area
/// scaling. Away from the coordinate poles this equals the
/// spherical-coordinate expression sin θ̃ · det(∂(θ̃,φ̃)/∂(θ,φ)) used by
/// [`jacobian_det_spherical`]; unlike it, the frame-free form stays
/// defined when either the source or the warped point sits at a pole.
pub fn jacobian_det(warp: &SphereWarp, vertex: usize, delta: f64) -> Result<f64> {
    let v = warp.icosphere().vertices()[vertex];
    let target = warp.target(vertex);
    let (w1, w2) = tangent_frame(&v);
    let mut cols = [[0.0; 3]; 2];
    for (k, w) in [w1, w2].iter().enumerate() {
        let plus = warp.warp_point(&sphere_exp(&v, &w.scale(delta)))?;
        let minus = warp.warp_point(&sphere_exp(&v, &w.scale(-delta)))?;
        let lp = sphere_log(&target, &plus)?;
        let lm = sphere_log(&target, &minus)?;
        cols[k] = vec3::scale(vec3::sub(lp.vec, lm.vec), 1.0 / (2.0 * delta));
    }
    let det = vec3::dot(vec3::cross(cols[0], cols[1]), target.coords());
    if det <= 0.0 {
        return Err(Error::Diffeomorphism(format!(
            "nonpositive Jacobian {det} at vertex {vertex}"
        )));
    }
    Ok(det)
}

/// The spherical-coordinate route to the same determinant:
/// sin θ̃ · det of the finite-difference matrix of (θ̃, φ̃) along the
/// (w_θ, w_φ) frame. Undefined at the poles; kept as an independent
/// cross-check of [`jacobian_det`].
pub fn jacobian_det_spherical(warp: &SphereWarp, vertex: usize, delta: f64) -> Result<f64> {
    let v = warp.icosphere().vertices()[vertex];
    let (theta_t, _, pole) = cartesian_to_spherical(&warp.target(vertex));
    if pole {
        return Err(Error::Domain("warped point at a coordinate pole".into()));
    }
    let (w_theta, w_phi) = tangent_frame(&v);
    let mut m = [[0.0; 2]; 2];
    for (k, w) in [w_theta, w_phi].iter().enumerate() {
        let plus = warp.warp_point(&sphere_exp(&v, &w.scale(delta)))?;
        let minus = warp.warp_point(&sphere_exp(&v, &w.scale(-delta)))?;
        let (tp, pp, _) = cartesian_to_spherical(&plus);
        let (tm, pm, _) = cartesian_to_spherical(&minus);
        let mut dphi = pp - pm;
        if dphi > std::f64::consts::PI {
            dphi -= 2.0 * std::f64::consts::PI;
        } else if dphi < -std::f64::consts::PI {
            dphi += 2.0 * std::f64::consts::PI;
        }
        m[0][k] = (tp - tm) / (2.0 * delta);
        m[1][k] = dphi / (2.0 * delta);
    }
    Ok(theta_t.sin() * (m[0][0] * m[1][1] - m[0][1] * m[1][0]))
}

/// Result of a sphere warp action: the renormalized half-density together
/// with the raw norm before renormalization (discretization drift).
#[derive(Debug, Clone)]
pub struct WarpedHalfDensity {
    pub half_density: HalfDensity,
    pub raw_norm: f64,
}

/// Group action (q*γ) = (q∘γ̃)·√|J_γ(x)|·√|J_γ(y)| on a single sphere.
pub fn warp_half_density_sphere(q: &HalfDensity, warp: &SphereWarp) -> Result<WarpedHalfDensity> {
    let ico = q.domain().icosphere().ok_or_else(|| {
        Error::Validation("warp_half_density_sphere requires a sphere domain".into())
    })?;
    if ico.level() != warp.icosphere().level() {
        return Err(Error::Validation("half-density and warp grids differ".into()));
    }
    let jac = warp.jacobians()?;
    let stencil = warp_stencil(warp)?;
    let n = ico.vertex_count();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        let si = jac[i].sqrt();
        for j in 0..=i {
            let v = stencil_eval(q.values(), &stencil[i], &stencil[j]) * si * jac[j].sqrt();
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    let mut hd = HalfDensity::new_unchecked(q.domain().clone(), out);
    let raw_norm = hd.renormalize();
    Ok(WarpedHalfDensity { half_density: hd, raw_norm })
}

/// Four-case dual-hemisphere action with the warp pair (γ¹, γ²): within-
/// hemisphere blocks use their own warp on both axes, cross blocks mix.
pub fn warp_half_density_dual(
    q: &HalfDensity,
    warp1: &SphereWarp,
    warp2: &SphereWarp,
) -> Result<WarpedHalfDensity> {
    let (first, second) = match q.domain().kind() {
        DomainKind::DualSphere(a, b) => (a.clone(), b.clone()),
        _ => {
            return Err(Error::Validation(
                "warp_half_density_dual requires a dual-sphere domain".into(),
            ))
        }
    };
    if first.level() != warp1.icosphere().level() || second.level() != warp2.icosphere().level() {
        return Err(Error::Validation("half-density and warp grids differ".into()));
    }
    let v1 = first.vertex_count();
    let n = q.domain().node_count();
    let jac1 = warp1.jacobians()?;
    let jac2 = warp2.jacobians()?;
    let st1 = warp_stencil(warp1)?;
    let st2 = warp_stencil(warp2)?;
    // per-node stencil/Jacobian with global node indices
    let stencil: Vec<Stencil> = (0..n)
        .map(|i| {
            if i < v1 {
                st1[i].clone()
            } else {
                let mut s = st2[i - v1].clone();
                for idx in &mut s.nodes {
                    *idx += v1;
                }
                s
            }
        })
        .collect();
    let sqrt_jac: Vec<f64> = (0..n)
        .map(|i| if i < v1 { jac1[i].sqrt() } else { jac2[i - v1].sqrt() })
        .collect();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let v = stencil_eval(q.values(), &stencil[i], &stencil[j]) * sqrt_jac[i] * sqrt_jac[j];
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    let mut hd = HalfDensity::new_unchecked(q.domain().clone(), out);
    let raw_norm = hd.renormalize();
    Ok(WarpedHalfDensity { half_density: hd, raw_norm })
}

/// Interpolation stencil of a warped vertex: the three corner nodes of
/// the face containing γ(v) and their barycentric weights.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub nodes: [usize; 3],
    pub weights: [f64; 3],
}

/// Per-vertex stencils for evaluating (q∘γ̃) at grid nodes.
pub fn warp_stencil(warp: &SphereWarp) -> Result<Vec<Stencil>> {
    let ico = warp.icosphere();
    Ok((0..ico.vertex_count())
        .map(|i| {
            let loc = ico.locate(&warp.target(i));
            Stencil { nodes: ico.faces()[loc.face], weights: loc.bary }
        })
        .collect())
}

#[inline]
fn stencil_eval(q: &SquareMatrix, si: &Stencil, sj: &Stencil) -> f64 {
    let mut acc = 0.0;
    for a in 0..3 {
        let wa = si.weights[a];
        if wa == 0.0 {
            continue;
        }
        let row = q.row(si.nodes[a]);
        let mut inner = 0.0;
        for b in 0..3 {
            inner += sj.weights[b] * row[sj.nodes[b]];
        }
        acc += wa * inner;
    }
    acc
}

/// Intrinsic (arc-length) distance on the unit Hilbert sphere:
/// arccos of the quadrature inner product.
pub fn riemannian_distance(q1: &HalfDensity, q2: &HalfDensity) -> Result<f64> {
    check_same_domain(q1, q2)?;
    let w = q1.domain().weights();
    let mut ip = 0.0;
    for i in 0..q1.values().size() {
        let r1 = q1.values().row(i);
        let r2 = q2.values().row(i);
        let mut acc = 0.0;
        for j in 0..r1.len() {
            acc += w[j] * r1[j] * r2[j];
        }
        ip += w[i] * acc;
    }
    Ok(ip.clamp(-1.0, 1.0).acos())
}

/// Ambient squared L² distance ‖q₁ − q₂‖², the registration cost.
pub fn alignment_cost(q1: &HalfDensity, q2: &HalfDensity) -> Result<f64> {
    check_same_domain(q1, q2)?;
    let w = q1.domain().weights();
    let mut total = 0.0;
    for i in 0..q1.values().size() {
        let r1 = q1.values().row(i);
        let r2 = q2.values().row(i);
        let mut acc = 0.0;
        for j in 0..r1.len() {
            let d = r1[j] - r2[j];
            acc += w[j] * d * d;
        }
        total += w[i] * acc;
    }
    Ok(total)
}

fn check_same_domain(q1: &HalfDensity, q2: &HalfDensity) -> Result<()> {
    if !q1.domain().same_as(q2.domain()) {
        return Err(Error::Validation("half-densities live on different domains".into()));
    }
    Ok(())
}

/// Directional derivative of q(x,y) along tangent vectors (bx, by):
/// forward differences of the bivariate interpolant along geodesics in
/// the orthonormal frame directions, contracted with the frame
/// coefficients of bx and by.
pub fn spatial_derivative(
    q: &HalfDensity,
    x: &SpherePoint,
    y: &SpherePoint,
    bx: &SphereTangent,
    by: &SphereTangent,
    eps: f64,
) -> Result<f64> {
    let base = interpolate_bivariate(q, x, y)?;
    let mut total = 0.0;
    let (wx1, wx2) = tangent_frame(x);
    for w in [wx1, wx2] {
        let a = vec3::dot(bx.vec, w.vec);
        if a != 0.0 {
            let xp = sphere_exp(x, &w.scale(eps));
            total += (interpolate_bivariate(q, &xp, y)? - base) / eps * a;
        }
    }
    let (wy1, wy2) = tangent_frame(y);
    for w in [wy1, wy2] {
        let a = vec3::dot(by.vec, w.vec);
        if a != 0.0 {
            let yp = sphere_exp(y, &w.scale(eps));
            total += (interpolate_bivariate(q, x, &yp)? - base) / eps * a;
        }
    }
    Ok(total)
}

/// Connection strength between two node-index regions:
/// Σ_{i∈E1, j∈E2} wᵢwⱼ f[i][j].
pub fn region_connectivity(f: &DensityField, e1: &[usize], e2: &[usize]) -> f64 {
    let w = f.domain().weights();
    let mut total = 0.0;
    for &i in e1 {
        let mut acc = 0.0;
        for &j in e2 {
            acc += w[j] * f.values().get(i, j);
        }
        total += w[i] * acc;
    }
    total
}
