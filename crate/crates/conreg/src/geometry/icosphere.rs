//! Icosphere grids: recursive icosahedron subdivision with nested vertex
//! sets, lumped-mass quadrature weights, and point location.

use std::collections::HashMap;

use super::vec3::{self, Vec3};
use super::SpherePoint;
use crate::error::{Error, Result};

pub const MAX_LEVEL: u32 = 8;

/// Triangulated sphere grid from `level` recursive subdivisions of an
/// icosahedron. Level G has 10·4^G + 2 vertices, and the vertices of
/// level G are a prefix of the vertices of level G+1.
#[derive(Debug, Clone)]
pub struct Icosphere {
    level: u32,
    vertices: Vec<SpherePoint>,
    faces: Vec<[usize; 3]>,
    vertex_weights: Vec<f64>,
    face_adjacency: Vec<[usize; 3]>,
    /// Face lists of every level up to `level`; children of face `i` at
    /// one level are faces `4i..4i+4` at the next. Drives hierarchical
    /// point location.
    level_faces: Vec<Vec<[usize; 3]>>,
}

/// Result of point location: containing face, barycentric coordinates
/// with respect to its three vertices, and whether the query had to be
/// normalized onto the sphere first.
#[derive(Debug, Clone, Copy)]
pub struct Location {
    pub face: usize,
    pub bary: [f64; 3],
    pub normalized_input: bool,
}

impl Icosphere {
    pub fn build(level: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::Resource(format!(
                "icosphere level {level} exceeds maximum {MAX_LEVEL}"
            )));
        }
        let (mut vertices, mut faces) = base_icosahedron();
        for v in &mut vertices {
            *v = vec3::scale(*v, 1.0 / vec3::norm(*v));
        }
        let mut level_faces = vec![faces.clone()];
        for _ in 0..level {
            faces = subdivide(&mut vertices, &faces);
            level_faces.push(faces.clone());
        }
        let points: Vec<SpherePoint> = vertices
            .into_iter()
            .map(|v| SpherePoint::normalize(v).expect("icosphere vertices are nonzero"))
            .collect();
        let vertex_weights = lumped_vertex_weights(&points, &faces);
        let face_adjacency = face_adjacency(&faces);
        Ok(Icosphere {
            level,
            vertices: points,
            faces,
            vertex_weights,
            face_adjacency,
            level_faces,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[SpherePoint] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Per-vertex quadrature weights: one third of the summed spherical
    /// areas of the incident triangles. Sum to 4π.
    pub fn vertex_weights(&self) -> &[f64] {
        &self.vertex_weights
    }

    /// For each face, the indices of the three edge-sharing neighbors.
    pub fn face_adjacency(&self) -> &[[usize; 3]] {
        &self.face_adjacency
    }

    /// Quadrature of per-vertex samples over the sphere.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.vertex_weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Finds the face whose spherical triangle contains `p` and the
    /// barycentric coordinates of `p` in it (computed in the plane of
    /// the face after gnomonic projection).
    pub fn locate(&self, p: &SpherePoint) -> Location {
        let q = p.coords();
        let n = vec3::norm(q);
        let (q, normalized_input) = if (n - 1.0).abs() > 1e-12 {
            (vec3::scale(q, 1.0 / n), true)
        } else {
            (q, false)
        };

        // brute force at the base level, hierarchical descent afterwards
        let mut face = best_face(&self.vertices, &self.level_faces[0], 0, 20, q);
        for lvl in 1..self.level_faces.len() {
            face = best_face(&self.vertices, &self.level_faces[lvl], 4 * face, 4, q);
        }
        let bary = gnomonic_barycentric(&self.vertices, self.faces[face], q);
        Location { face, bary, normalized_input }
    }

    /// Evaluates per-vertex samples at an arbitrary point by barycentric
    /// interpolation.
    pub fn interpolate(&self, values: &[f64], p: &SpherePoint) -> f64 {
        let loc = self.locate(p);
        let [a, b, c] = self.faces[loc.face];
        loc.bary[0] * values[a] + loc.bary[1] * values[b] + loc.bary[2] * values[c]
    }
}

fn base_icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let vertices = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    // counter-clockwise seen from outside
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (vertices, faces)
}

/// Splits every face into four. New midpoint vertices are appended after
/// the existing ones, so lower-level vertices keep their indices. The
/// four children of face `i` occupy output slots `4i..4i+4`.
fn subdivide(vertices: &mut Vec<Vec3>, faces: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out = Vec::with_capacity(faces.len() * 4);
    let mut midpoint = |i: usize, j: usize, vertices: &mut Vec<Vec3>| -> usize {
        let key = if i < j { (i, j) } else { (j, i) };
        *midpoints.entry(key).or_insert_with(|| {
            let m = vec3::scale(vec3::add(vertices[i], vertices[j]), 0.5);
            let m = vec3::scale(m, 1.0 / vec3::norm(m));
            vertices.push(m);
            vertices.len() - 1
        })
    };
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, vertices);
        let bc = midpoint(b, c, vertices);
        let ca = midpoint(c, a, vertices);
        out.push([a, ab, ca]);
        out.push([b, bc, ab]);
        out.push([c, ca, bc]);
        out.push([ab, bc, ca]);
    }
    out
}

/// Spherical triangle area via van Oosterom–Strackee.
pub fn spherical_triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let num = vec3::triple(a, b, c);
    let den = 1.0 + vec3::dot(a, b) + vec3::dot(b, c) + vec3::dot(c, a);
    2.0 * num.atan2(den).abs()
}

fn lumped_vertex_weights(vertices: &[SpherePoint], faces: &[[usize; 3]]) -> Vec<f64> {
    let mut w = vec![0.0; vertices.len()];
    for &[a, b, c] in faces {
        let area = spherical_triangle_area(
            vertices[a].coords(),
            vertices[b].coords(),
            vertices[c].coords(),
        );
        let third = area / 3.0;
        w[a] += third;
        w[b] += third;
        w[c] += third;
    }
    w
}

fn face_adjacency(faces: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let mut edge_to_faces: HashMap<(usize, usize), [usize; 2]> = HashMap::new();
    for (fi, &[a, b, c]) in faces.iter().enumerate() {
        for (i, j) in [(a, b), (b, c), (c, a)] {
            let key = if i < j { (i, j) } else { (j, i) };
            let entry = edge_to_faces.entry(key).or_insert([usize::MAX; 2]);
            if entry[0] == usize::MAX {
                entry[0] = fi;
            } else {
                entry[1] = fi;
            }
        }
    }
    let mut adj = vec![[usize::MAX; 3]; faces.len()];
    for (fi, &[a, b, c]) in faces.iter().enumerate() {
        for (slot, (i, j)) in [(a, b), (b, c), (c, a)].into_iter().enumerate() {
            let key = if i < j { (i, j) } else { (j, i) };
            let pair = edge_to_faces[&key];
            adj[fi][slot] = if pair[0] == fi { pair[1] } else { pair[0] };
        }
    }
    adj
}

/// Among `count` candidate faces starting at `start`, picks the one that
/// contains `q`, measured by the worst signed edge determinant. Ties
/// resolve to the lower index.
fn best_face(
    vertices: &[SpherePoint],
    faces: &[[usize; 3]],
    start: usize,
    count: usize,
    q: Vec3,
) -> usize {
    let mut best = start;
    let mut best_score = f64::NEG_INFINITY;
    for fi in start..start + count {
        let [a, b, c] = faces[fi];
        let (va, vb, vc) = (vertices[a].coords(), vertices[b].coords(), vertices[c].coords());
        let s = vec3::triple(q, va, vb)
            .min(vec3::triple(q, vb, vc))
            .min(vec3::triple(q, vc, va));
        if s > best_score {
            best_score = s;
            best = fi;
        }
    }
    best
}

/// Barycentric coordinates of the gnomonic (radial) projection of `q`
/// onto the plane of the face. Nonnegative and summing to one for
/// contained points; tiny negatives from roundoff are clamped.
fn gnomonic_barycentric(vertices: &[SpherePoint], face: [usize; 3], q: Vec3) -> [f64; 3] {
    let (a, b, c) = (
        vertices[face[0]].coords(),
        vertices[face[1]].coords(),
        vertices[face[2]].coords(),
    );
    // solve q = l0 a + l1 b + l2 c by Cramer's rule; the radial scale
    // cancels when normalizing to sum one
    let det = vec3::triple(a, b, c);
    let l0 = vec3::triple(q, b, c) / det;
    let l1 = vec3::triple(a, q, c) / det;
    let l2 = vec3::triple(a, b, q) / det;
    let mut l = [l0.max(0.0), l1.max(0.0), l2.max(0.0)];
    let s = l[0] + l[1] + l[2];
    for v in &mut l {
        *v /= s;
    }
    l
}
