//! Population templates: the Karcher mean of the subjects' orbits on the
//! unit Hilbert sphere, re-centered so that the subject warps it induces
//! average to the identity, and the end-to-end pipeline producing the
//! template, per-subject warps, and aligned densities.

use rayon::prelude::*;

use crate::basis::SineBasis;
use crate::density::{
    alignment_cost, q_unmap, riemannian_distance, warp_half_density_1d,
    warp_half_density_sphere, DensityField, DomainKind, HalfDensity, SphereWarp, SquareMatrix,
    Warp1D,
};
use crate::error::{Error, Result};
use crate::geometry::{sphere_exp, sphere_log, Icosphere, SphereTangent};
use crate::register::{
    invert_warp, register_pair_1d_warm, register_pair_sphere_warm, RegistrationConfig,
    SphereBasisTables,
};

/// Which central tendency the template uses. The median of orbits is a
/// documented variant that is not implemented; requesting it fails
/// cleanly rather than silently falling back to the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemplateStatistic {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone)]
pub struct TemplateConfig {
    /// stop the outer loop when ‖v̄‖ falls below this
    pub eps1: f64,
    /// fraction of the mean tangent applied per update
    pub eps2: f64,
    pub max_outer: usize,
    pub statistic: TemplateStatistic,
    /// alignment schedule for the first outer iteration
    pub registration: RegistrationConfig,
    /// continuation schedule for warm-started later iterations
    pub refinement: RegistrationConfig,
    /// schedule for the centering and final subject registrations
    pub final_registration: RegistrationConfig,
}

impl TemplateConfig {
    pub fn interval() -> Self {
        let mut refinement = RegistrationConfig::interval_quick();
        refinement.stages = vec![(30, 40)];
        TemplateConfig {
            eps1: 1e-3,
            eps2: 0.3,
            max_outer: 50,
            statistic: TemplateStatistic::Mean,
            registration: RegistrationConfig::interval_quick(),
            refinement,
            final_registration: RegistrationConfig::interval(),
        }
    }

    pub fn sphere() -> Self {
        let mut refinement = RegistrationConfig::sphere();
        refinement.stages = vec![(96, 20)];
        TemplateConfig {
            eps1: 1e-3,
            eps2: 0.3,
            max_outer: 50,
            statistic: TemplateStatistic::Mean,
            registration: RegistrationConfig::sphere(),
            refinement,
            final_registration: RegistrationConfig::sphere(),
        }
    }

    fn check_statistic(&self) -> Result<()> {
        if self.statistic == TemplateStatistic::Median {
            return Err(Error::Validation(
                "the median template statistic is a documented variant that is not implemented"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of the orbit-mean iteration.
#[derive(Debug, Clone)]
pub struct KarcherResult {
    pub mean: HalfDensity,
    /// ‖v̄‖ per outer iteration
    pub update_trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
}

/// Geodesic step on the unit Hilbert sphere:
/// exp_μ(t·v) = cos(t‖v‖)μ + sin(t‖v‖)v/‖v‖.
pub fn hilbert_sphere_exp(mu: &HalfDensity, v: &SquareMatrix, t: f64) -> Result<HalfDensity> {
    if v.size() != mu.values().size() {
        return Err(Error::Validation("tangent size does not match the base point".into()));
    }
    let nv = mu.domain().double_integral(&v.map(|x| x * x)).sqrt();
    if t.abs() * nv < 1e-15 {
        return Ok(mu.clone());
    }
    let (s, c) = (t * nv).sin_cos();
    let n = v.size();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, c * mu.values().get(i, j) + s * v.get(i, j) / nv);
        }
    }
    let mut hd = HalfDensity::new_unchecked(mu.domain().clone(), out);
    hd.renormalize();
    Ok(hd)
}

/// Inverse of the geodesic step: the tangent at μ pointing to q with
/// norm d_R(μ, q).
pub fn hilbert_sphere_log(mu: &HalfDensity, q: &HalfDensity) -> Result<SquareMatrix> {
    let theta = riemannian_distance(mu, q)?;
    let n = mu.values().size();
    if theta < 1e-10 {
        return Ok(SquareMatrix::zeros(n));
    }
    if theta > std::f64::consts::PI - 1e-3 {
        return Err(Error::Domain("log map undefined for antipodal half-densities".into()));
    }
    let scale = theta / theta.sin();
    let c = theta.cos();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, scale * (q.values().get(i, j) - c * mu.values().get(i, j)));
        }
    }
    Ok(out)
}

fn medoid_index(qs: &[HalfDensity]) -> Result<usize> {
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for i in 0..qs.len() {
        let mut sum = 0.0;
        for j in 0..qs.len() {
            sum += alignment_cost(&qs[i], &qs[j])?;
        }
        if sum < best_sum {
            best_sum = sum;
            best = i;
        }
    }
    Ok(best)
}

fn check_inputs(qs: &[HalfDensity]) -> Result<()> {
    if qs.len() < 2 {
        return Err(Error::Validation("template construction needs at least 2 inputs".into()));
    }
    for q in &qs[1..] {
        if !q.domain().same_as(qs[0].domain()) {
            return Err(Error::Validation("template inputs live on different domains".into()));
        }
    }
    Ok(())
}

/// Karcher mean of the orbits of interval half-densities: each outer
/// iteration aligns every subject to the current mean (warm-starting
/// from its previous warp), averages the log maps of the aligned
/// subjects, and steps the mean along the average.
pub fn karcher_mean_orbits(
    qs: &[HalfDensity],
    basis: &SineBasis,
    cfg: &TemplateConfig,
) -> Result<KarcherResult> {
    check_inputs(qs)?;
    cfg.check_statistic()?;
    let mut mu = qs[medoid_index(qs)?].clone();
    let mut warps: Vec<Option<Warp1D>> = vec![None; qs.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    while outer < cfg.max_outer {
        let reg_cfg = if outer == 0 { &cfg.registration } else { &cfg.refinement };
        let aligned: Vec<Result<(Warp1D, HalfDensity)>> = qs
            .par_iter()
            .zip(&warps)
            .map(|(q, warm)| {
                let reg = register_pair_1d_warm(&mu, q, basis, reg_cfg, warm.as_ref())?;
                let mut moved = warp_half_density_1d(q, &reg.warp)?;
                moved.renormalize();
                Ok((reg.warp, moved))
            })
            .collect();
        let mut vbar = SquareMatrix::zeros(mu.values().size());
        for (j, item) in aligned.into_iter().enumerate() {
            let (warp, moved) = item?;
            let v = hilbert_sphere_log(&mu, &moved)?;
            for (acc, x) in vbar.data_mut().iter_mut().zip(v.data()) {
                *acc += x / qs.len() as f64;
            }
            warps[j] = Some(warp);
        }
        let nv = mu.domain().double_integral(&vbar.map(|x| x * x)).sqrt();
        trace.push(nv);
        outer += 1;
        if nv <= cfg.eps1 {
            converged = true;
            break;
        }
        mu = hilbert_sphere_exp(&mu, &vbar, cfg.eps2)?;
    }
    Ok(KarcherResult { mean: mu, update_trace: trace, converged, outer_iterations: outer })
}

/// Sphere-domain analogue of [`karcher_mean_orbits`].
pub fn karcher_mean_orbits_sphere(
    qs: &[HalfDensity],
    tables: &SphereBasisTables,
    cfg: &TemplateConfig,
) -> Result<KarcherResult> {
    check_inputs(qs)?;
    cfg.check_statistic()?;
    let mut mu = qs[medoid_index(qs)?].clone();
    let mut warps: Vec<Option<SphereWarp>> = vec![None; qs.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    while outer < cfg.max_outer {
        let reg_cfg = if outer == 0 { &cfg.registration } else { &cfg.refinement };
        let aligned: Vec<Result<(SphereWarp, HalfDensity)>> = qs
            .iter()
            .zip(&warps)
            .map(|(q, warm)| {
                let reg = register_pair_sphere_warm(&mu, q, tables, reg_cfg, warm.as_ref())?;
                let moved = warp_half_density_sphere(q, &reg.warp)?.half_density;
                Ok((reg.warp, moved))
            })
            .collect();
        let mut vbar = SquareMatrix::zeros(mu.values().size());
        for (j, item) in aligned.into_iter().enumerate() {
            let (warp, moved) = item?;
            let v = hilbert_sphere_log(&mu, &moved)?;
            for (acc, x) in vbar.data_mut().iter_mut().zip(v.data()) {
                *acc += x / qs.len() as f64;
            }
            warps[j] = Some(warp);
        }
        let nv = mu.domain().double_integral(&vbar.map(|x| x * x)).sqrt();
        trace.push(nv);
        outer += 1;
        if nv <= cfg.eps1 {
            converged = true;
            break;
        }
        mu = hilbert_sphere_exp(&mu, &vbar, cfg.eps2)?;
    }
    Ok(KarcherResult { mean: mu, update_trace: trace, converged, outer_iterations: outer })
}

/// Karcher mean of interval warps under the flat structure: pointwise
/// averaging of values and derivatives, then re-validation.
pub fn karcher_mean_warps(warps: &[Warp1D]) -> Result<Warp1D> {
    if warps.is_empty() {
        return Err(Error::Validation("warp mean of an empty set".into()));
    }
    let n = warps[0].grid().len();
    for w in &warps[1..] {
        if w.grid().len() != n {
            return Err(Error::Validation("warp grids differ".into()));
        }
    }
    let count = warps.len() as f64;
    let mut values = vec![0.0; n];
    let mut ders = vec![0.0; n];
    for w in warps {
        for i in 0..n {
            values[i] += w.values()[i] / count;
            ders[i] += w.derivative()[i] / count;
        }
    }
    crate::register::enforce_strict(&mut values);
    Warp1D::new(warps[0].grid().clone(), values, ders)
}

/// Karcher mean of sphere warps: the per-vertex intrinsic mean of the
/// target points, by iterated log/exp started at the identity.
pub fn karcher_mean_sphere_warps(warps: &[SphereWarp]) -> Result<SphereWarp> {
    if warps.is_empty() {
        return Err(Error::Validation("warp mean of an empty set".into()));
    }
    let ico = warps[0].icosphere().clone();
    for w in &warps[1..] {
        if w.icosphere().level() != ico.level() {
            return Err(Error::Validation("warp grids differ".into()));
        }
    }
    let count = warps.len() as f64;
    let mut targets = Vec::with_capacity(ico.vertex_count());
    for (i, v) in ico.vertices().iter().enumerate() {
        let mut p = *v;
        for _ in 0..100 {
            let mut vbar = [0.0; 3];
            for w in warps {
                let l = sphere_log(&p, &w.target(i))?;
                vbar = crate::geometry::vec3::add(vbar, l.vec);
            }
            let step = SphereTangent {
                base: p,
                vec: crate::geometry::vec3::scale(vbar, 1.0 / count),
            };
            p = sphere_exp(&p, &step);
            if step.norm() <= 1e-12 {
                break;
            }
        }
        targets.push(p);
    }
    let mean = SphereWarp::new(ico, targets)?;
    mean.jacobians()?; // surfaces folding as a diffeomorphism error
    Ok(mean)
}

/// Inverse of a sphere warp by per-vertex fixed-point iteration: finds p
/// with γ(p) = v for every grid vertex v.
pub fn invert_sphere_warp(warp: &SphereWarp) -> Result<SphereWarp> {
    let ico = warp.icosphere().clone();
    let mut targets = Vec::with_capacity(ico.vertex_count());
    for v in ico.vertices() {
        let mut p = *v;
        let mut done = false;
        for _ in 0..100 {
            let image = warp.warp_point(&p)?;
            let err = sphere_log(&image, v)?;
            if err.norm() <= 1e-12 {
                done = true;
                break;
            }
            // pull the mismatch back to p along the connecting geodesic
            let pulled = crate::geometry::parallel_transport(&image, &p, &err)?;
            p = sphere_exp(&p, &pulled);
        }
        if !done {
            // the iteration contracts for moderate warps; report instead
            // of silently returning a bad inverse
            let image = warp.warp_point(&p)?;
            if image.distance(v) > 1e-6 {
                return Err(Error::Convergence(format!(
                    "sphere warp inversion stalled at residual {}",
                    image.distance(v)
                )));
            }
            done = true;
        }
        let _ = done;
        targets.push(p);
    }
    SphereWarp::new(ico, targets)
}

/// Re-centers an orbit mean so the subject warps average to identity:
/// registers every subject to μ, takes the Karcher mean γ̄ of the warps,
/// and returns μ * γ̄⁻¹.
pub fn center_of_orbit(
    mu: &HalfDensity,
    qs: &[HalfDensity],
    basis: &SineBasis,
    cfg: &TemplateConfig,
) -> Result<HalfDensity> {
    check_inputs(qs)?;
    let warps: Vec<Result<Warp1D>> = qs
        .par_iter()
        .map(|q| Ok(register_pair_1d_warm(mu, q, basis, &cfg.final_registration, None)?.warp))
        .collect();
    let warps: Result<Vec<Warp1D>> = warps.into_iter().collect();
    let gbar = karcher_mean_warps(&warps?)?;
    let mut centered = warp_half_density_1d(mu, &invert_warp(&gbar)?)?;
    centered.renormalize();
    Ok(centered)
}

/// Sphere-domain analogue of [`center_of_orbit`].
pub fn center_of_orbit_sphere(
    mu: &HalfDensity,
    qs: &[HalfDensity],
    tables: &SphereBasisTables,
    cfg: &TemplateConfig,
) -> Result<HalfDensity> {
    check_inputs(qs)?;
    let mut warps = Vec::with_capacity(qs.len());
    for q in qs {
        warps.push(register_pair_sphere_warm(mu, q, tables, &cfg.final_registration, None)?.warp);
    }
    let gbar = karcher_mean_sphere_warps(&warps)?;
    Ok(warp_half_density_sphere(mu, &invert_sphere_warp(&gbar)?)?.half_density)
}

/// Everything the pipeline produces.
#[derive(Debug, Clone)]
pub struct TemplateResult {
    pub template: HalfDensity,
    /// per-subject warps aligning each input to the template
    pub warps: Vec<Warp1D>,
    pub aligned: Vec<DensityField>,
    pub update_trace: Vec<f64>,
    pub converged: bool,
    /// subjects whose final registration failed, with the reason; their
    /// warp is the identity and their aligned density the input
    pub failures: Vec<(usize, String)>,
}

/// Full interval pipeline: Q-map, orbit Karcher mean, centering, final
/// registration of every subject, and aligned densities.
pub fn full_pipeline(
    fs: &[DensityField],
    basis: &SineBasis,
    cfg: &TemplateConfig,
) -> Result<TemplateResult> {
    let qs: Vec<HalfDensity> = fs.iter().map(crate::density::q_map).collect();
    check_inputs(&qs)?;
    let karcher = karcher_mean_orbits(&qs, basis, cfg)?;
    let template = center_of_orbit(&karcher.mean, &qs, basis, cfg)?;

    let grid = fs[0].domain().grid().expect("interval pipeline").clone();
    let outcomes: Vec<std::result::Result<(Warp1D, DensityField), String>> = qs
        .par_iter()
        .zip(fs)
        .map(|(q, f)| {
            let run = || -> Result<(Warp1D, DensityField)> {
                let reg = register_pair_1d_warm(&template, q, basis, &cfg.final_registration, None)?;
                let aligned = crate::density::warp_density_1d(f, &reg.warp)?;
                Ok((reg.warp, aligned))
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let mut warps = Vec::with_capacity(fs.len());
    let mut aligned = Vec::with_capacity(fs.len());
    let mut failures = Vec::new();
    for (j, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((w, a)) => {
                warps.push(w);
                aligned.push(a);
            }
            Err(reason) => {
                failures.push((j, reason));
                warps.push(Warp1D::identity(grid.clone()));
                aligned.push(fs[j].clone());
            }
        }
    }
    Ok(TemplateResult {
        template,
        warps,
        aligned,
        update_trace: karcher.update_trace,
        converged: karcher.converged,
        failures,
    })
}

/// Sphere-domain pipeline counterpart.
pub struct SphereTemplateResult {
    pub template: HalfDensity,
    pub warps: Vec<SphereWarp>,
    pub aligned: Vec<DensityField>,
    pub update_trace: Vec<f64>,
    pub converged: bool,
    pub failures: Vec<(usize, String)>,
}

pub fn full_pipeline_sphere(
    fs: &[DensityField],
    tables: &SphereBasisTables,
    cfg: &TemplateConfig,
) -> Result<SphereTemplateResult> {
    let qs: Vec<HalfDensity> = fs.iter().map(crate::density::q_map).collect();
    check_inputs(&qs)?;
    let ico: &std::sync::Arc<Icosphere> = match fs[0].domain().kind() {
        DomainKind::Sphere(ico) => ico,
        _ => {
            return Err(Error::Validation(
                "full_pipeline_sphere requires sphere-domain inputs".into(),
            ))
        }
    };
    let karcher = karcher_mean_orbits_sphere(&qs, tables, cfg)?;
    let template = center_of_orbit_sphere(&karcher.mean, &qs, tables, cfg)?;

    let mut warps = Vec::with_capacity(fs.len());
    let mut aligned = Vec::with_capacity(fs.len());
    let mut failures = Vec::new();
    for (j, (q, _f)) in qs.iter().zip(fs).enumerate() {
        let run = || -> Result<(SphereWarp, DensityField)> {
            let reg = register_pair_sphere_warm(&template, q, tables, &cfg.final_registration, None)?;
            let moved = warp_half_density_sphere(q, &reg.warp)?.half_density;
            Ok((reg.warp, q_unmap(&moved)?))
        };
        match run() {
            Ok((w, a)) => {
                warps.push(w);
                aligned.push(a);
            }
            Err(e) => {
                failures.push((j, e.to_string()));
                warps.push(SphereWarp::identity(ico.clone()));
                aligned.push(fs[j].clone());
            }
        }
    }
    Ok(SphereTemplateResult {
        template,
        warps,
        aligned,
        update_trace: karcher.update_trace,
        converged: karcher.converged,
        failures,
    })
}

/// Helper used by examples and tests: a single extra mean iteration to
/// verify the fixed-point property of a converged Karcher mean.
pub fn karcher_residual(
    mu: &HalfDensity,
    qs: &[HalfDensity],
    basis: &SineBasis,
    reg_cfg: &RegistrationConfig,
) -> Result<f64> {
    let mut vbar = SquareMatrix::zeros(mu.values().size());
    for q in qs {
        let reg = register_pair_1d_warm(mu, q, basis, reg_cfg, None)?;
        let mut moved = warp_half_density_1d(q, &reg.warp)?;
        moved.renormalize();
        let v = hilbert_sphere_log(mu, &moved)?;
        for (acc, x) in vbar.data_mut().iter_mut().zip(v.data()) {
            *acc += x / qs.len() as f64;
        }
    }
    Ok(mu.domain().double_integral(&vbar.map(|x| x * x)).sqrt())
}
