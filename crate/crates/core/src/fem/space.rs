//! Discrete spaces over a subdomain mesh or an interface trace partition:
//! degree-of-freedom layout and interpolation of smooth fields.
//!
//! Layouts (all zero-based, deterministic in mesh numbering):
//! - BDM1 vector: edge `e` owns dofs `2e` (moment against the Lagrange
//!   function at its lower-index endpoint) and `2e + 1`, both taken against
//!   the fixed global edge normal.
//! - BDM1 tensor (two BDM1 rows): row `r` of the tensor occupies the vector
//!   layout offset by `r * 2 * n_edges`.
//! - P0 scalar/skew: one dof per cell. P0 vector: `2t + component`.
//! - Continuous P1 vector: `2v + component` per vertex.
//! - Trace P1 scalar: one dof per breakpoint; vector: `2b + component`.
//!
//! The skew space stores the off-diagonal entry c of the tensor
//! [[0, c], [-c, 0]].

use super::bdm::Bdm1CellBasis;
use super::quadrature::{gauss1d, triangle_quadrature};
use crate::mesh::{TraceMesh, TriangleMesh};
use crate::{Mat2, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    Bdm1Vector,
    Bdm1Tensor,
    P0Scalar,
    P0Vector,
    P0Skew,
    P1Vector,
    TraceP1Scalar,
    TraceP1Vector,
}

impl SpaceKind {
    pub fn n_dofs_on_mesh(self, mesh: &TriangleMesh) -> usize {
        match self {
            SpaceKind::Bdm1Vector => 2 * mesh.n_edges(),
            SpaceKind::Bdm1Tensor => 4 * mesh.n_edges(),
            SpaceKind::P0Scalar | SpaceKind::P0Skew => mesh.n_cells(),
            SpaceKind::P0Vector => 2 * mesh.n_cells(),
            SpaceKind::P1Vector => 2 * mesh.n_vertices(),
            _ => panic!("trace space sized by a trace partition, not a mesh"),
        }
    }

    pub fn n_dofs_on_trace(self, trace: &TraceMesh) -> usize {
        match self {
            SpaceKind::TraceP1Scalar => trace.n_breakpoints(),
            SpaceKind::TraceP1Vector => 2 * trace.n_breakpoints(),
            _ => panic!("subdomain space sized by a mesh, not a trace"),
        }
    }
}

/// Global dofs of `cell` in local order (see module docs).
pub fn cell_dofs(kind: SpaceKind, mesh: &TriangleMesh, cell: usize) -> Vec<usize> {
    match kind {
        SpaceKind::Bdm1Vector => {
            let mut dofs = Vec::with_capacity(6);
            for i in 0..3 {
                let e = mesh.cell_edges[cell][i];
                dofs.push(2 * e);
                dofs.push(2 * e + 1);
            }
            dofs
        }
        SpaceKind::Bdm1Tensor => {
            let offset = 2 * mesh.n_edges();
            let vector = cell_dofs(SpaceKind::Bdm1Vector, mesh, cell);
            let mut dofs = Vec::with_capacity(12);
            for r in 0..2 {
                dofs.extend(vector.iter().map(|d| r * offset + d));
            }
            dofs
        }
        SpaceKind::P0Scalar | SpaceKind::P0Skew => vec![cell],
        SpaceKind::P0Vector => vec![2 * cell, 2 * cell + 1],
        SpaceKind::P1Vector => {
            let tri = mesh.triangles[cell];
            let mut dofs = Vec::with_capacity(6);
            for &v in &tri {
                dofs.push(2 * v);
                dofs.push(2 * v + 1);
            }
            dofs
        }
        _ => panic!("trace spaces have per-segment dofs"),
    }
}

/// Global dofs of trace segment `k`: the two breakpoint values (per
/// component for the vector space).
pub fn segment_dofs(kind: SpaceKind, k: usize) -> Vec<usize> {
    match kind {
        SpaceKind::TraceP1Scalar => vec![k, k + 1],
        SpaceKind::TraceP1Vector => vec![2 * k, 2 * k + 1, 2 * k + 2, 2 * k + 3],
        _ => panic!("subdomain spaces have per-cell dofs"),
    }
}

/// Barycentric (P1 Lagrange) values at a reference point.
pub fn p1_values(p: [f64; 2]) -> [f64; 3] {
    [1.0 - p[0] - p[1], p[0], p[1]]
}

/// Physical gradients of the three P1 Lagrange functions on a cell.
pub fn p1_gradients(mesh: &TriangleMesh, cell: usize) -> [Vec2; 3] {
    let [a, b, c] = mesh.cell_vertices(cell);
    let area2 = 2.0 * mesh.cell_area(cell);
    // grad of the barycentric coordinate of each vertex: the opposite edge,
    // rotated a quarter turn into the triangle, over twice the area.
    let perp = |from: Vec2, to: Vec2| Vec2::new(from.y - to.y, to.x - from.x) / area2;
    [perp(b, c), perp(c, a), perp(a, b)]
}

/// Moments of a scalar flux density on edge `e` against the two Lagrange
/// functions (lower-index endpoint first).
pub fn scalar_flux_moments(mesh: &TriangleMesh, e: usize, flux: impl Fn(Vec2) -> f64) -> [f64; 2] {
    let [a, b] = mesh.edges[e].vertices;
    let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
    let len = mesh.edge_length(e);
    let rule = gauss1d(5).unwrap();
    let mut m = [0.0; 2];
    for (&t, &w) in rule.points.iter().zip(&rule.weights) {
        let q = flux(pa + t * (pb - pa)) * w * len;
        m[0] += q * (1.0 - t);
        m[1] += q * t;
    }
    m
}

/// Moments of a smooth vector field on edge `e` against the two Lagrange
/// functions (lower-index endpoint first), taken with the global edge normal.
/// These are the two BDM1 dofs of the field on that edge.
pub fn bdm_edge_moments(mesh: &TriangleMesh, e: usize, f: impl Fn(Vec2) -> Vec2) -> [f64; 2] {
    let n = mesh.edge_normal(e);
    scalar_flux_moments(mesh, e, |p| f(p).dot(&n))
}

pub fn interpolate_bdm1_vector(mesh: &TriangleMesh, f: impl Fn(Vec2) -> Vec2) -> Vec<f64> {
    let mut coeffs = vec![0.0; 2 * mesh.n_edges()];
    for e in 0..mesh.n_edges() {
        let m = bdm_edge_moments(mesh, e, &f);
        coeffs[2 * e] = m[0];
        coeffs[2 * e + 1] = m[1];
    }
    coeffs
}

/// Interpolates a tensor field row-wise: row `r` of the tensor becomes a
/// BDM1 vector field.
pub fn interpolate_bdm1_tensor(mesh: &TriangleMesh, f: impl Fn(Vec2) -> Mat2) -> Vec<f64> {
    let offset = 2 * mesh.n_edges();
    let mut coeffs = vec![0.0; 2 * offset];
    for r in 0..2 {
        let row = interpolate_bdm1_vector(mesh, |p| f(p).row(r).transpose());
        coeffs[r * offset..(r + 1) * offset].copy_from_slice(&row);
    }
    coeffs
}

/// Cell means of a smooth scalar.
pub fn interpolate_p0_scalar(mesh: &TriangleMesh, f: impl Fn(Vec2) -> f64) -> Vec<f64> {
    let rule = triangle_quadrature(4).unwrap();
    (0..mesh.n_cells())
        .map(|t| {
            let map = super::bdm::CellMap::new(mesh.cell_vertices(t));
            let mut mean = 0.0;
            for (p, &w) in rule.points.iter().zip(&rule.weights) {
                mean += w * f(map.to_physical(*p));
            }
            // Reference weights sum to 1/2, so doubling the weighted sum
            // gives the cell mean; the Jacobian cancels against the area.
            2.0 * mean
        })
        .collect()
}

pub fn interpolate_p0_vector(mesh: &TriangleMesh, f: impl Fn(Vec2) -> Vec2) -> Vec<f64> {
    let x = interpolate_p0_scalar(mesh, |p| f(p).x);
    let y = interpolate_p0_scalar(mesh, |p| f(p).y);
    let mut coeffs = vec![0.0; 2 * mesh.n_cells()];
    for t in 0..mesh.n_cells() {
        coeffs[2 * t] = x[t];
        coeffs[2 * t + 1] = y[t];
    }
    coeffs
}

/// Cell means of the off-diagonal entry of a skew tensor field.
pub fn interpolate_p0_skew(mesh: &TriangleMesh, f: impl Fn(Vec2) -> f64) -> Vec<f64> {
    interpolate_p0_scalar(mesh, f)
}

/// Vertex values of a smooth vector field.
pub fn interpolate_p1_vector(mesh: &TriangleMesh, f: impl Fn(Vec2) -> Vec2) -> Vec<f64> {
    let mut coeffs = vec![0.0; 2 * mesh.n_vertices()];
    for (v, p) in mesh.vertices.iter().enumerate() {
        let val = f(*p);
        coeffs[2 * v] = val.x;
        coeffs[2 * v + 1] = val.y;
    }
    coeffs
}

/// Breakpoint values of a scalar along the trace, by arc-length position.
pub fn interpolate_trace_scalar(trace: &TraceMesh, f: impl Fn(Vec2) -> f64) -> Vec<f64> {
    trace.points.iter().map(|p| f(*p)).collect()
}

pub fn interpolate_trace_vector(trace: &TraceMesh, f: impl Fn(Vec2) -> Vec2) -> Vec<f64> {
    let mut coeffs = vec![0.0; 2 * trace.n_breakpoints()];
    for (b, p) in trace.points.iter().enumerate() {
        let val = f(*p);
        coeffs[2 * b] = val.x;
        coeffs[2 * b + 1] = val.y;
    }
    coeffs
}

/// Evaluates a BDM1 vector field (given by global coefficients) on a cell at
/// a reference point; also returns the (cellwise constant) divergence.
pub fn eval_bdm1_vector(
    mesh: &TriangleMesh,
    coeffs: &[f64],
    cell: usize,
    p: [f64; 2],
) -> (Vec2, f64) {
    let basis = Bdm1CellBasis::new(mesh, cell);
    let dofs = cell_dofs(SpaceKind::Bdm1Vector, mesh, cell);
    let (values, divs) = basis.eval(p);
    let mut v = Vec2::zeros();
    let mut d = 0.0;
    for j in 0..6 {
        v += coeffs[dofs[j]] * values[j];
        d += coeffs[dofs[j]] * divs[j];
    }
    (v, d)
}

/// Evaluates a BDM1 tensor field on a cell; returns the tensor and the
/// row-wise divergence vector.
pub fn eval_bdm1_tensor(
    mesh: &TriangleMesh,
    coeffs: &[f64],
    cell: usize,
    p: [f64; 2],
) -> (Mat2, Vec2) {
    let offset = 2 * mesh.n_edges();
    let (r0, d0) = eval_bdm1_vector(mesh, &coeffs[..offset], cell, p);
    let (r1, d1) = eval_bdm1_vector(mesh, &coeffs[offset..], cell, p);
    (
        Mat2::new(r0.x, r0.y, r1.x, r1.y),
        Vec2::new(d0, d1),
    )
}

/// Evaluates a continuous P1 vector field on a cell at a reference point.
pub fn eval_p1_vector(mesh: &TriangleMesh, coeffs: &[f64], cell: usize, p: [f64; 2]) -> Vec2 {
    let lambda = p1_values(p);
    let tri = mesh.triangles[cell];
    let mut v = Vec2::zeros();
    for i in 0..3 {
        v += lambda[i] * Vec2::new(coeffs[2 * tri[i]], coeffs[2 * tri[i] + 1]);
    }
    v
}

/// Gradient (constant per cell) of a continuous P1 vector field, as the
/// Jacobian matrix with rows grad of each component.
pub fn grad_p1_vector(mesh: &TriangleMesh, coeffs: &[f64], cell: usize) -> Mat2 {
    let grads = p1_gradients(mesh, cell);
    let tri = mesh.triangles[cell];
    let mut g = Mat2::zeros();
    for i in 0..3 {
        let vx = coeffs[2 * tri[i]];
        let vy = coeffs[2 * tri[i] + 1];
        g.m11 += vx * grads[i].x;
        g.m12 += vx * grads[i].y;
        g.m21 += vy * grads[i].x;
        g.m22 += vy * grads[i].y;
    }
    g
}
