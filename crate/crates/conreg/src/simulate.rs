//! Simulation harness: random boundary-preserving warps, endpoint-pair
//! sampling from a truncated-normal mixture, kernel density estimation
//! of connectivity densities, and the population recovery experiment
//! that measures how well the pipeline's warps undo simulated ones.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SineBasis;
use crate::density::{warp_density_1d, DensityField, DomainSpec, SquareMatrix, Warp1D};
use crate::error::{Error, Result};
use crate::geometry::Grid1D;
use crate::register::{compose_warps, invert_warp, register_pair_1d};
use crate::template::{full_pipeline, TemplateConfig};

/// Default kernel bandwidth for the 20k-pair connectivity densities.
pub const DEFAULT_BANDWIDTH: f64 = 0.02;
/// Default slope-knot count per warp draw.
pub const DEFAULT_WARP_KNOTS: usize = 3;
/// Default number of composed draws per simulated warp.
pub const DEFAULT_WARP_ROUNDS: usize = 4;

/// One random warp: `knots` slopes drawn Uniform(0,1), turned into a
/// monotone function by normalized cumulative summation and
/// shape-preserving cubic interpolation. `rounds` independent draws are
/// composed so the family has the intended magnitude
/// (E[L²(γ, id)] ≈ 0.23 at the defaults).
pub fn simulate_warp_1d(
    grid: &Grid1D,
    knots: usize,
    rounds: usize,
    rng: &mut impl Rng,
) -> Result<Warp1D> {
    if knots < 3 {
        return Err(Error::Validation("warp simulation needs at least 3 knots".into()));
    }
    if rounds == 0 {
        return Err(Error::Validation("warp simulation needs at least one round".into()));
    }
    let mut warp = single_warp_draw(grid, knots, rng)?;
    for _ in 1..rounds {
        let next = single_warp_draw(grid, knots, rng)?;
        warp = compose_warps(&warp, &next)?;
    }
    Ok(warp)
}

fn single_warp_draw(grid: &Grid1D, knots: usize, rng: &mut impl Rng) -> Result<Warp1D> {
    loop {
        let slopes: Vec<f64> = (0..knots).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = slopes.iter().sum();
        // a degenerate draw (all slopes ~0) cannot be normalized; resample
        if total < 1e-6 {
            continue;
        }
        let mut ys = Vec::with_capacity(knots + 1);
        ys.push(0.0);
        let mut acc = 0.0;
        for s in &slopes {
            acc += s;
            ys.push(acc / total);
        }
        ys[knots] = 1.0;
        let xs: Vec<f64> = (0..=knots).map(|i| i as f64 / knots as f64).collect();
        return Warp1D::from_knots(grid.clone(), &xs, &ys);
    }
}

/// One truncated-normal component of the endpoint generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EndpointComponent {
    pub pairs: usize,
    pub mean1: f64,
    pub mean2: f64,
    /// variance of both coordinates before truncation to [0,1]
    pub variance: f64,
}

/// Endpoint generator: a mixture of bivariate normal components, each
/// rejection-sampled to [0,1]².
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointParams {
    pub components: Vec<EndpointComponent>,
    /// nominal parcel count of the generated connectome
    pub parcels: usize,
}

impl EndpointParams {
    /// The six-component generator used throughout the recovery
    /// experiments: 20 000 pairs over 200 parcels.
    pub fn connectome() -> Self {
        let rows: [(usize, f64, f64, f64); 6] = [
            (2500, 0.1, 0.9, 0.5),
            (2500, 0.1, 0.3, 0.5),
            (2500, 0.5, 0.6, 0.4),
            (2500, 0.2, 0.6, 0.2),
            (8000, 0.55, 0.95, 0.3),
            (2000, 0.4, 0.8, 0.6),
        ];
        EndpointParams {
            components: rows
                .iter()
                .map(|&(pairs, mean1, mean2, variance)| EndpointComponent {
                    pairs,
                    mean1,
                    mean2,
                    variance,
                })
                .collect(),
            parcels: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Validation("endpoint generator has no components".into()));
        }
        for c in &self.components {
            if c.pairs == 0 {
                return Err(Error::Validation("endpoint component with zero pairs".into()));
            }
            if !(0.0..=1.0).contains(&c.mean1) || !(0.0..=1.0).contains(&c.mean2) {
                return Err(Error::Validation("endpoint component mean outside [0,1]".into()));
            }
            if c.variance <= 0.0 {
                return Err(Error::Validation("endpoint component variance must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn total_pairs(&self) -> usize {
        self.components.iter().map(|c| c.pairs).sum()
    }

    /// The same mixture rescaled to roughly `total` pairs, preserving
    /// the component proportions.
    pub fn scaled(&self, total: usize) -> Self {
        let current = self.total_pairs() as f64;
        let mut out = self.clone();
        for c in &mut out.components {
            c.pairs = ((c.pairs as f64 / current * total as f64).round() as usize).max(1);
        }
        out
    }
}

/// Sampled fiber endpoints (u_j, v_j) ∈ [0,1]².
#[derive(Debug, Clone)]
pub struct EndpointSet {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl EndpointSet {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Draws endpoint pairs from each component; coordinates outside [0,1]
/// are rejected and redrawn, so the support has no boundary atoms.
pub fn simulate_endpoints(params: &EndpointParams, rng: &mut impl Rng) -> Result<EndpointSet> {
    params.validate()?;
    let total = params.total_pairs();
    let mut u = Vec::with_capacity(total);
    let mut v = Vec::with_capacity(total);
    for c in &params.components {
        let sd = c.variance.sqrt();
        let d1 = Normal::new(c.mean1, sd)
            .map_err(|e| Error::Validation(format!("bad normal parameters: {e}")))?;
        let d2 = Normal::new(c.mean2, sd)
            .map_err(|e| Error::Validation(format!("bad normal parameters: {e}")))?;
        let mut got = 0;
        while got < c.pairs {
            let x = d1.sample(rng);
            let y = d2.sample(rng);
            if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                u.push(x);
                v.push(y);
                got += 1;
            }
        }
    }
    Ok(EndpointSet { u, v })
}

/// Bivariate Gaussian kernel estimate of the connectivity density on
/// the grid, symmetrized pair-wise and renormalized to unit integral.
pub fn estimate_density(
    pts: &EndpointSet,
    grid: &Grid1D,
    bandwidth: f64,
) -> Result<DensityField> {
    if pts.is_empty() {
        return Err(Error::Validation("density estimation needs at least one pair".into()));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Validation("kernel bandwidth must be positive".into()));
    }
    let n = grid.len();
    let npts = pts.len();
    let kernel = |centers: &[f64]| -> Vec<f64> {
        let mut k = Vec::with_capacity(n * npts);
        for &x in grid.points() {
            for &c in centers {
                let z = (x - c) / bandwidth;
                k.push((-0.5 * z * z).exp());
            }
        }
        k
    };
    let ku = kernel(&pts.u);
    let kv = kernel(&pts.v);
    // F_ij = Σ_k Ku[i,k] Kv[j,k]; the symmetrized F + Fᵀ credits each
    // pair in both orders
    let f: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let kui = &ku[i * npts..(i + 1) * npts];
            let mut row = vec![0.0; n];
            for (j, r) in row.iter_mut().enumerate() {
                let kvj = &kv[j * npts..(j + 1) * npts];
                let mut acc = 0.0;
                for k in 0..npts {
                    acc += kui[k] * kvj[k];
                }
                *r = acc;
            }
            row
        })
        .collect();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, f[i][j] + f[j][i]);
        }
    }
    DensityField::from_unnormalized(DomainSpec::interval(grid.clone()), m)
}

/// The analytic density the endpoint sampler draws from: a mixture of
/// truncated-normal products, symmetrized. Reference for the
/// consistency checks of [`estimate_density`].
pub fn mixture_density(params: &EndpointParams, grid: &Grid1D) -> Result<DensityField> {
    params.validate()?;
    let n = grid.len();
    let total = params.total_pairs() as f64;
    let mut m = SquareMatrix::zeros(n);
    for c in &params.components {
        let sd = c.variance.sqrt();
        let weight = c.pairs as f64 / total;
        let g1: Vec<f64> = grid
            .points()
            .iter()
            .map(|&x| {
                let z = (x - c.mean1) / sd;
                (-0.5 * z * z).exp()
            })
            .collect();
        let g2: Vec<f64> = grid
            .points()
            .iter()
            .map(|&x| {
                let z = (x - c.mean2) / sd;
                (-0.5 * z * z).exp()
            })
            .collect();
        // normalize the truncated product on the grid so components mix
        // with their pair-count weights
        let mut comp = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                comp.set(i, j, g1[i] * g2[j] + g1[j] * g2[i]);
            }
        }
        let z = DomainSpec::interval(grid.clone()).double_integral(&comp);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, m.get(i, j) + weight * comp.get(i, j) / z);
            }
        }
    }
    DensityField::from_unnormalized(DomainSpec::interval(grid.clone()), m)
}

/// √∫₀¹ (γ(t) − γ̂(t))² dt by trapezoid quadrature on the shared grid.
pub fn l2_warp_error(a: &Warp1D, b: &Warp1D) -> Result<f64> {
    if a.grid().len() != b.grid().len() {
        return Err(Error::Validation("warps live on different grids".into()));
    }
    let sq: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    Ok(a.grid().integrate(&sq).sqrt())
}

/// Configuration of the population recovery experiment.
#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub subjects: usize,
    pub grid_size: usize,
    pub endpoints: EndpointParams,
    pub bandwidth: f64,
    pub warp_knots: usize,
    pub warp_rounds: usize,
    pub basis_size: usize,
    pub template: TemplateConfig,
    pub seed: u64,
}

impl RecoveryConfig {
    pub fn new(subjects: usize, seed: u64) -> Self {
        RecoveryConfig {
            subjects,
            grid_size: 200,
            endpoints: EndpointParams::connectome(),
            bandwidth: DEFAULT_BANDWIDTH,
            warp_knots: DEFAULT_WARP_KNOTS,
            warp_rounds: DEFAULT_WARP_ROUNDS,
            basis_size: 30,
            template: TemplateConfig::interval(),
            seed,
        }
    }
}

/// Per-subject outcome of the recovery experiment.
#[derive(Debug, Clone, Serialize)]
pub struct SubjectOutcome {
    /// L² distance between the simulated warp and the inverse of the
    /// pipeline's warp for this subject (row A)
    pub recovery_error: f64,
    /// L² distance between the simulated warp and the identity (row B)
    pub warp_magnitude: f64,
    pub failure: Option<String>,
}

/// Population summary of the recovery experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryResult {
    pub mean_recovery: f64,
    pub sd_recovery: f64,
    pub mean_magnitude: f64,
    pub sd_magnitude: f64,
    pub subjects: Vec<SubjectOutcome>,
    pub template_converged: bool,
    pub template_trace: Vec<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// RNG for one subject: an independent stream of the master seed, so
/// subjects can be generated concurrently and reproducibly.
pub fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

/// Simulates a population of connectivity densities, warps each by a
/// random diffeomorphism, runs the full template + registration
/// pipeline on the warped set, and measures how close the inverses of
/// the estimated warps come to the simulated ones.
pub fn run_recovery_experiment(cfg: &RecoveryConfig) -> Result<RecoveryResult> {
    if cfg.subjects < 2 {
        return Err(Error::Validation("recovery experiment needs at least 2 subjects".into()));
    }
    let grid = Grid1D::uniform(cfg.grid_size)?;
    let basis = SineBasis::new(&grid, cfg.basis_size)?;

    let generated: Vec<Result<(Warp1D, DensityField)>> = (0..cfg.subjects)
        .into_par_iter()
        .map(|j| {
            let mut rng = subject_rng(cfg.seed, j);
            let pts = simulate_endpoints(&cfg.endpoints, &mut rng)?;
            let f = estimate_density(&pts, &grid, cfg.bandwidth)?;
            let warp = simulate_warp_1d(&grid, cfg.warp_knots, cfg.warp_rounds, &mut rng)?;
            let observed = warp_density_1d(&f, &warp)?;
            Ok((warp, observed))
        })
        .collect();
    let mut true_warps = Vec::with_capacity(cfg.subjects);
    let mut observed = Vec::with_capacity(cfg.subjects);
    for item in generated {
        let (w, f) = item?;
        true_warps.push(w);
        observed.push(f);
    }

    let pipeline = full_pipeline(&observed, &basis, &cfg.template)?;

    let identity = Warp1D::identity(grid.clone());
    let mut subjects = Vec::with_capacity(cfg.subjects);
    let mut recovery = Vec::new();
    let mut magnitude = Vec::new();
    for j in 0..cfg.subjects {
        let warp_magnitude = l2_warp_error(&true_warps[j], &identity)?;
        let failure = pipeline
            .failures
            .iter()
            .find(|(idx, _)| *idx == j)
            .map(|(_, reason)| reason.clone());
        let recovery_error = if failure.is_none() {
            let estimated = invert_warp(&pipeline.warps[j])?;
            let err = l2_warp_error(&true_warps[j], &estimated)?;
            recovery.push(err);
            magnitude.push(warp_magnitude);
            err
        } else {
            f64::NAN
        };
        subjects.push(SubjectOutcome { recovery_error, warp_magnitude, failure });
    }
    let (mean_recovery, sd_recovery) = mean_sd(&recovery);
    let (mean_magnitude, sd_magnitude) = mean_sd(&magnitude);
    Ok(RecoveryResult {
        mean_recovery,
        sd_recovery,
        mean_magnitude,
        sd_magnitude,
        subjects,
        template_converged: pipeline.converged,
        template_trace: pipeline.update_trace,
    })
}

/// Single-pair recovery check used by the sanity property: simulate a
/// density and a warp, register the warped copy back, and compare
/// against the truth.
pub fn single_pair_recovery(
    grid: &Grid1D,
    basis: &SineBasis,
    endpoints: &EndpointParams,
    bandwidth: f64,
    config: &crate::register::RegistrationConfig,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let pts = simulate_endpoints(endpoints, rng)?;
    let f = estimate_density(&pts, grid, bandwidth)?;
    let warp = simulate_warp_1d(grid, DEFAULT_WARP_KNOTS, DEFAULT_WARP_ROUNDS, rng)?;
    let observed = warp_density_1d(&f, &warp)?;
    let q1 = crate::density::q_map(&f);
    let q2 = crate::density::q_map(&observed);
    let reg = register_pair_1d(&q1, &q2, basis, config)?;
    let estimated = invert_warp(&reg.warp)?;
    let identity = Warp1D::identity(grid.clone());
    Ok((
        l2_warp_error(&warp, &estimated)?,
        l2_warp_error(&warp, &identity)?,
    ))
}
