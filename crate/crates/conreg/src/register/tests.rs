use super::*;
use crate::density::{q_map, DensityField, DomainSpec};
use approx::assert_abs_diff_eq;
use crate::geometry::SpherePoint;
use proptest::prelude::*;
use std::sync::Arc;

fn grid(n: usize) -> Grid1D {
    Grid1D::uniform(n).unwrap()
}

fn bump_half_density(n: usize) -> HalfDensity {
    let g = grid(n);
    let xs = g.points().to_vec();
    let mut m = SquareMatrix::zeros(n);
    let bump = |x: f64, y: f64, cx: f64, cy: f64, s: f64| {
        (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
    };
    for i in 0..n {
        for j in 0..=i {
            let (x, y) = (xs[i], xs[j]);
            let v = bump(x, y, 0.25, 0.75, 0.1)
                + bump(x, y, 0.75, 0.25, 0.1)
                + 0.6 * bump(x, y, 0.55, 0.55, 0.18);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    q_map(&DensityField::from_unnormalized(DomainSpec::interval(g), m).unwrap())
}

fn l2(g: &Grid1D, a: &[f64], b: &[f64]) -> f64 {
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    g.integrate(&sq).sqrt()
}

#[test]
fn compose_with_inverse_is_identity() {
    let g = grid(200);
    let warp = Warp1D::from_knots(
        g.clone(),
        &[0.0, 0.2, 0.5, 0.8, 1.0],
        &[0.0, 0.35, 0.55, 0.7, 1.0],
    )
    .unwrap();
    let inv = invert_warp(&warp).unwrap();
    let id1 = compose_warps(&warp, &inv).unwrap();
    let id2 = compose_warps(&inv, &warp).unwrap();
    assert!(l2(&g, id1.values(), g.points()) <= 2e-3);
    assert!(l2(&g, id2.values(), g.points()) <= 2e-3);
}

#[test]
fn invert_identity_is_identity() {
    let g = grid(100);
    let inv = invert_warp(&Warp1D::identity(g.clone())).unwrap();
    for (a, b) in inv.values().iter().zip(g.points()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn dphi_matches_action_finite_difference() {
    let n = 200;
    let q = bump_half_density(n);
    let g = grid(n);
    let basis = SineBasis::new(&g, 5).unwrap();
    let tau = 1e-4;
    for k in [0usize, 2, 4] {
        let bv = basis.values(k);
        let bd = basis.derivatives(k);
        let dphi = dphi_1d(&q, bv, bd).unwrap();
        // warp id + τ·b applied through the group action
        let vals: Vec<f64> = g.points().iter().zip(bv).map(|(&x, &b)| x + tau * b).collect();
        let ders: Vec<f64> = bd.iter().map(|&d| 1.0 + tau * d).collect();
        let warp = Warp1D::new(g.clone(), vals, ders).unwrap();
        let warped = warp_half_density_1d(&q, &warp).unwrap();
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        let w = g.weights();
        for i in 0..n {
            for j in 0..n {
                let fd = (warped.values().get(i, j) - q.values().get(i, j)) / tau;
                let d = fd - dphi.get(i, j);
                err2 += w[i] * w[j] * d * d;
                ref2 += w[i] * w[j] * dphi.get(i, j) * dphi.get(i, j);
            }
        }
        let rel = (err2 / ref2).sqrt();
        assert!(rel <= 0.05, "dphi mismatch for element {k}: relative {rel}");
    }
}

#[test]
fn gradient_coefficients_match_cost_finite_difference() {
    let n = 200;
    let q1 = bump_half_density(n);
    let g = grid(n);
    let warp0 = Warp1D::from_knots(g.clone(), &[0.0, 0.5, 1.0], &[0.0, 0.42, 1.0]).unwrap();
    let q2 = warp_half_density_1d(&q1, &warp0).unwrap();
    let basis = SineBasis::new(&g, 6).unwrap();
    let tau = 1e-5;
    // private path exercised through one descent iteration is awkward;
    // recompute the coefficient directly from its definition
    let dq = super::matrix_gradient_rows(q2.values(), g.spacing());
    let w = g.weights();
    for k in [0usize, 1, 3, 5] {
        let bv = basis.values(k);
        let bd = basis.derivatives(k);
        let mut coef = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r = w[i] * w[j] * (q1.values().get(i, j) - q2.values().get(i, j));
                let dphi = dq.get(i, j) * bv[i]
                    + dq.get(j, i) * bv[j]
                    + 0.5 * q2.values().get(i, j) * (bd[i] + bd[j]);
                coef += r * dphi;
            }
        }
        coef *= -2.0;
        // central difference of the cost along the basis direction
        let mut costs = [0.0; 2];
        for (s, t) in [(0usize, tau), (1usize, -tau)] {
            let vals: Vec<f64> =
                g.points().iter().zip(bv).map(|(&x, &b)| x + t * b).collect();
            let ders: Vec<f64> = bd.iter().map(|&d| 1.0 + t * d).collect();
            let warp = Warp1D::new(g.clone(), vals, ders).unwrap();
            let moved = warp_half_density_1d(&q2, &warp).unwrap();
            costs[s] = alignment_cost(&q1, &moved).unwrap();
        }
        let fd = (costs[0] - costs[1]) / (2.0 * tau);
        assert!(
            (coef - fd).abs() <= 0.05 * fd.abs().max(1e-3),
            "coefficient {k}: analytic {coef} vs fd {fd}"
        );
    }
}

#[test]
fn registration_recovers_known_warp_1d() {
    let n = 200;
    let q = bump_half_density(n);
    let g = grid(n);
    let truth = Warp1D::from_knots(
        g.clone(),
        &[0.0, 0.3, 0.6, 1.0],
        &[0.0, 0.42, 0.68, 1.0],
    )
    .unwrap();
    let q2 = warp_half_density_1d(&q, &truth).unwrap();
    let basis = SineBasis::new(&g, 30).unwrap();
    let result =
        register_pair_1d(&q, &q2, &basis, &RegistrationConfig::interval_quick()).unwrap();
    // the recovered warp is the inverse of the applied one
    let want = invert_warp(&truth).unwrap();
    let err = l2(&g, result.warp.values(), want.values());
    assert!(err <= 0.02, "recovery error {err}");
    assert!(result.cost_trace.windows(2).all(|p| p[1] < p[0]));
    assert!(*result.cost_trace.last().unwrap() < 1e-2 * result.cost_trace[0]);
}

#[test]
fn registration_of_identical_inputs_stays_near_identity() {
    let n = 150;
    let q = bump_half_density(n);
    let g = grid(n);
    let basis = SineBasis::new(&g, 30).unwrap();
    let result =
        register_pair_1d(&q, &q, &basis, &RegistrationConfig::interval_quick()).unwrap();
    assert!(l2(&g, result.warp.values(), g.points()) <= 1e-3);
}

#[test]
fn config_validation() {
    let n = 100;
    let q = bump_half_density(n);
    let g = grid(n);
    let basis = SineBasis::new(&g, 10).unwrap();
    let mut config = RegistrationConfig::interval();
    config.stages = vec![(30, 10)]; // larger than the basis
    assert!(register_pair_1d(&q, &q, &basis, &config).is_err());
    config.stages.clear();
    assert!(register_pair_1d(&q, &q, &basis, &config).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random warps stay diffeomorphisms under inversion and
    /// composition, and invert correctly.
    #[test]
    fn prop_warp_compose_invert(slopes in proptest::collection::vec(0.05f64..1.0, 3..7)) {
        let g = grid(120);
        let total: f64 = slopes.iter().sum();
        let mut ys = vec![0.0];
        for s in &slopes {
            ys.push(ys.last().unwrap() + s / total);
        }
        let n = ys.len();
        ys[n - 1] = 1.0;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let warp = Warp1D::from_knots(g.clone(), &xs, &ys).unwrap();
        let inv = invert_warp(&warp).unwrap();
        prop_assert!(inv.values().windows(2).all(|p| p[1] > p[0]));
        let id = compose_warps(&warp, &inv).unwrap();
        prop_assert!(l2(&g, id.values(), g.points()) <= 5e-3);
    }
}

// ---- sphere ----

use crate::geometry::sphere_log;

fn sphere_setup(level: u32) -> (DomainSpec, Arc<Icosphere>, HalfDensity) {
    let ico = Arc::new(Icosphere::build(level).unwrap());
    let domain = DomainSpec::sphere(ico.clone());
    let n = ico.vertex_count();
    let mut m = SquareMatrix::zeros(n);
    let k = |p: &SpherePoint, mu: [f64; 3]| (2.0 * vec3::dot(p.coords(), mu)).exp();
    let mu1 = [0.0, 0.6, 0.8];
    let mu2 = [0.8, -0.6, 0.0];
    for i in 0..n {
        let (a1, a2) = (k(&ico.vertices()[i], mu1), k(&ico.vertices()[i], mu2));
        for j in 0..=i {
            let (b1, b2) = (k(&ico.vertices()[j], mu1), k(&ico.vertices()[j], mu2));
            let v = a1 * b1 + a2 * b2 + 0.1;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let f = DensityField::from_unnormalized(domain.clone(), m).unwrap();
    (domain.clone(), ico, q_map(&f))
}

/// Warp from a fixed basis coefficient vector, for ground truth.
fn basis_warp(tables: &SphereBasisTables, coeffs: &[f64]) -> SphereWarp {
    let ico = tables.icosphere();
    let targets = ico
        .vertices()
        .iter()
        .map(|v| {
            let (fields, _) = tables.basis().evaluate(v);
            let mut vec = [0.0; 3];
            for (f, &c) in fields.iter().zip(coeffs) {
                vec = vec3::add(vec, vec3::scale(f.vec, c));
            }
            sphere_exp(v, &SphereTangent { base: *v, vec })
        })
        .collect();
    SphereWarp::new(ico.clone(), targets).unwrap()
}

#[test]
fn sphere_gradient_matches_cost_finite_difference() {
    let (_, ico, q1) = sphere_setup(2);
    let tables = SphereBasisTables::new(ico.clone(), 2).unwrap();
    // displaced second input
    let mut coeffs = vec![0.0; tables.field_count()];
    coeffs[3] = 0.12;
    coeffs[8] = -0.1;
    let warp0 = basis_warp(&tables, &coeffs);
    let q2 = warp_half_density_sphere(&q1, &warp0).unwrap().half_density;
    let weights = q1.domain().weights().to_vec();
    let (coef, _) = tables.gradient(q1.values(), q2.values(), &weights, tables.field_count(), 0);
    let tau = 1e-4;
    for k in [0usize, 3, 7, 12] {
        let mut probe = vec![0.0; tables.field_count()];
        let mut costs = [0.0; 2];
        for (s, t) in [(0usize, tau), (1usize, -tau)] {
            probe[k] = t;
            let warp = basis_warp(&tables, &probe);
            let moved = warp_half_density_sphere(&q2, &warp).unwrap().half_density;
            costs[s] = alignment_cost(&q1, &moved).unwrap();
        }
        let fd = (costs[0] - costs[1]) / (2.0 * tau);
        assert!(
            (coef[k] - fd).abs() <= 0.05 * fd.abs().max(0.02),
            "sphere coefficient {k}: analytic {} vs fd {fd}",
            coef[k]
        );
    }
}

#[test]
fn sphere_registration_reduces_cost_and_recovers_warp() {
    let (_, ico, q1) = sphere_setup(2);
    let tables = SphereBasisTables::new(ico.clone(), 3).unwrap();
    let mut coeffs = vec![0.0; tables.field_count()];
    coeffs[1] = 0.15;
    coeffs[4] = -0.12;
    coeffs[9] = 0.1;
    let truth = basis_warp(&tables, &coeffs);
    let q2 = warp_half_density_sphere(&q1, &truth).unwrap().half_density;
    let mut config = RegistrationConfig::sphere();
    config.stages = vec![(16, 40), (30, 60)];
    let result = register_pair_sphere(&q1, &q2, &tables, &config).unwrap();
    assert!(result.cost_trace.windows(2).all(|p| p[1] < p[0]));
    let c0 = result.cost_trace[0];
    let c1 = *result.cost_trace.last().unwrap();
    assert!(c1 <= 0.05 * c0, "cost only fell {c0} -> {c1}");
    // γ̂(γ(v)) ≈ v on average
    let mut total = 0.0;
    for (i, v) in ico.vertices().iter().enumerate() {
        let roundtrip = result.warp.warp_point(&truth.target(i)).unwrap();
        total += roundtrip.distance(v);
    }
    let mean = total / ico.vertex_count() as f64;
    assert!(mean <= 0.03, "mean roundtrip displacement {mean}");
}

#[test]
fn dual_gradient_ignores_other_hemisphere_block() {
    // residuals confined to the Ω₂×Ω₂ block must produce a zero
    // gradient for the first hemisphere's warp
    let ico = Arc::new(Icosphere::build(1).unwrap());
    let domain = DomainSpec::dual_sphere(ico.clone(), ico.clone());
    let v1 = ico.vertex_count();
    let n = domain.node_count();
    let base = 1.0 / domain.double_integral(&SquareMatrix::zeros(n).map(|_| 1.0)).sqrt();
    let q1 = HalfDensity::new(domain.clone(), SquareMatrix::zeros(n).map(|_| base)).unwrap();
    let mut m2 = SquareMatrix::zeros(n).map(|_| base);
    for i in v1..n {
        for j in v1..n {
            let z1 = ico.vertices()[i - v1].coords()[2];
            let z2 = ico.vertices()[j - v1].coords()[2];
            m2.set(i, j, base * (1.0 + 0.3 * z1 * z2));
        }
    }
    let mut q2 = HalfDensity::new_unchecked(domain.clone(), m2);
    q2.renormalize();
    let tables = SphereBasisTables::new(ico.clone(), 2).unwrap();
    let weights = domain.weights().to_vec();
    let (coef1, _) = tables.gradient(q1.values(), q2.values(), &weights, tables.field_count(), 0);
    for c in &coef1 {
        assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-12);
    }
    // while the second hemisphere sees a nonzero gradient
    let (coef2, _) =
        tables.gradient(q1.values(), q2.values(), &weights, tables.field_count(), v1);
    assert!(coef2.iter().any(|c| c.abs() > 1e-6));
}

#[test]
fn dual_registration_moves_only_what_it_should() {
    let ico = Arc::new(Icosphere::build(2).unwrap());
    let domain = DomainSpec::dual_sphere(ico.clone(), ico.clone());
    let v1 = ico.vertex_count();
    let n = domain.node_count();
    // symmetric density with cross-hemisphere structure
    let mut m = SquareMatrix::zeros(n);
    let point = |i: usize| {
        if i < v1 {
            ico.vertices()[i]
        } else {
            ico.vertices()[i - v1]
        }
    };
    for i in 0..n {
        for j in 0..=i {
            let a = point(i).coords();
            let b = point(j).coords();
            let v = (1.2 * (a[0] + b[0])).exp() + 0.5 * (a[2] * b[2]).exp();
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let f = DensityField::from_unnormalized(domain.clone(), m).unwrap();
    let q1 = q_map(&f);
    let tables = SphereBasisTables::new(ico.clone(), 2).unwrap();
    let mut coeffs = vec![0.0; tables.field_count()];
    coeffs[2] = 0.15;
    coeffs[6] = -0.1;
    let truth1 = basis_warp(&tables, &coeffs);
    let id2 = SphereWarp::identity(ico.clone());
    let q2 = warp_half_density_dual(&q1, &truth1, &id2).unwrap().half_density;
    let mut config = RegistrationConfig::sphere();
    config.stages = vec![(16, 60)];
    let result = register_pair_dual(&q1, &q2, &tables, &tables, &config).unwrap();
    assert!(result.cost_trace.windows(2).all(|p| p[1] < p[0]));
    let c0 = result.cost_trace[0];
    let c1 = *result.cost_trace.last().unwrap();
    assert!(c1 <= 0.2 * c0, "dual cost only fell {c0} -> {c1}");
    // hemisphere 1 roundtrips toward identity
    let mut mean1 = 0.0;
    for (i, v) in ico.vertices().iter().enumerate() {
        mean1 += result.warp1.warp_point(&truth1.target(i)).unwrap().distance(v);
    }
    mean1 /= v1 as f64;
    // hemisphere 2 stays closer to identity than hemisphere 1 moved
    let mut drift2 = 0.0;
    for (i, v) in ico.vertices().iter().enumerate() {
        drift2 += result.warp2.target(i).distance(v);
    }
    drift2 /= v1 as f64;
    let mut applied = 0.0;
    for (i, v) in ico.vertices().iter().enumerate() {
        applied += truth1.target(i).distance(v);
    }
    applied /= v1 as f64;
    assert!(mean1 <= 0.5 * applied, "hemisphere 1 misaligned: {mean1} vs applied {applied}");
    assert!(drift2 <= 0.5 * applied, "hemisphere 2 drifted {drift2}");
}

#[test]
fn sphere_warp_log_sanity() {
    // exp/log consistency for the small steps taken during descent
    let ico = Arc::new(Icosphere::build(1).unwrap());
    let warp = SphereWarp::identity(ico.clone());
    for v in ico.vertices() {
        let t = SphereTangent::project(*v, [0.01, -0.02, 0.015]);
        let stepped = sphere_exp(v, &t);
        let back = sphere_log(v, &stepped).unwrap();
        assert!(vec3::norm(vec3::sub(back.vec, t.vec)) <= 1e-10);
    }
    let _ = warp;
}
