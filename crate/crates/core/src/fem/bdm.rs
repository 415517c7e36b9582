//! Lowest-order Brezzi-Douglas-Marini element (full [P1]^2) on triangles:
//! reference basis dual to edge moments, the contravariant Piola map, and the
//! per-cell basis resolved against global edge orientations.

use crate::mesh::TriangleMesh;
use crate::{Mat2, Vec2};

/// Reference triangle vertices (0,0), (1,0), (0,1); edge `i` is opposite
/// vertex `i` with endpoints ordered by local vertex index.
pub const REF_EDGE_VERTICES: [[usize; 2]; 3] = [[1, 2], [0, 2], [0, 1]];

/// Values and divergences of the six reference basis functions at a
/// reference point. Basis `2 i + k` is dual to the moment of the outward
/// normal trace against the linear Lagrange function on edge `i` that peaks
/// at the edge's first (`k = 0`) or second (`k = 1`) endpoint:
/// the moment of basis `j` on dof `j'` is the Kronecker delta.
pub fn reference_bdm1_basis(p: [f64; 2]) -> ([Vec2; 6], [f64; 6]) {
    let [x, y] = p;
    let values = [
        Vec2::new(4.0 * x, -2.0 * y),
        Vec2::new(-2.0 * x, 4.0 * y),
        Vec2::new(-4.0 + 4.0 * x + 6.0 * y, -2.0 * y),
        Vec2::new(2.0 - 2.0 * x - 6.0 * y, 4.0 * y),
        Vec2::new(-2.0 * x, -4.0 + 6.0 * x + 4.0 * y),
        Vec2::new(4.0 * x, 2.0 - 6.0 * x - 2.0 * y),
    ];
    // Every dual basis function carries unit total flux through one edge, so
    // its (constant) divergence is 1 / |T_ref| = 2.
    (values, [2.0; 6])
}

/// Affine map from the reference triangle onto a physical triangle, with the
/// contravariant (flux-preserving) Piola transform.
#[derive(Debug, Clone)]
pub struct CellMap {
    pub origin: Vec2,
    pub jacobian: Mat2,
    pub det: f64,
    inv_t: Mat2,
}

impl CellMap {
    pub fn new(vertices: [Vec2; 3]) -> Self {
        let jacobian = Mat2::from_columns(&[vertices[1] - vertices[0], vertices[2] - vertices[0]]);
        let det = jacobian.determinant();
        debug_assert!(det > 0.0, "cells must be counterclockwise");
        let inv_t = jacobian
            .try_inverse()
            .expect("nondegenerate cell")
            .transpose();
        CellMap {
            origin: vertices[0],
            jacobian,
            det,
            inv_t,
        }
    }

    pub fn to_physical(&self, p: [f64; 2]) -> Vec2 {
        self.origin + self.jacobian * Vec2::new(p[0], p[1])
    }

    /// Contravariant Piola transform of a vector value: v = J v_ref / det J.
    /// Preserves edge moments of the normal trace, hence H(div) conformity.
    pub fn piola_vector(&self, v: Vec2) -> Vec2 {
        self.jacobian * v / self.det
    }

    /// Divergence transforms as div v = (div v_ref) / det J.
    pub fn piola_divergence(&self, div: f64) -> f64 {
        div / self.det
    }

    /// Gradient of a scalar whose reference gradient is `g`.
    pub fn gradient(&self, g: Vec2) -> Vec2 {
        self.inv_t * g
    }
}

/// Piola-maps reference basis values and divergences onto a physical cell.
pub fn piola_map(map: &CellMap, ref_values: &[Vec2; 6], ref_divs: &[f64; 6]) -> ([Vec2; 6], [f64; 6]) {
    let mut values = [Vec2::zeros(); 6];
    let mut divs = [0.0; 6];
    for i in 0..6 {
        values[i] = map.piola_vector(ref_values[i]);
        divs[i] = map.piola_divergence(ref_divs[i]);
    }
    (values, divs)
}

/// Basis of one cell's BDM space expressed against global dofs. Local dof
/// `2 i + k` pairs with global dof `2 * cell_edges[i] + k`, where `k` orders
/// the two edge moments by global endpoint index and the moments are taken
/// against the globally fixed edge normal.
#[derive(Debug, Clone)]
pub struct Bdm1CellBasis {
    pub map: CellMap,
    /// Reference dof feeding each local dof (permutes the two moments of an
    /// edge when global and local endpoint orders disagree).
    select: [usize; 6],
    /// -1 where the global edge normal points into the cell.
    sign: [f64; 6],
}

impl Bdm1CellBasis {
    pub fn new(mesh: &TriangleMesh, cell: usize) -> Self {
        let tri = mesh.triangles[cell];
        let map = CellMap::new(mesh.cell_vertices(cell));
        let mut select = [0usize; 6];
        let mut sign = [0.0; 6];
        for i in 0..3 {
            let [la, lb] = REF_EDGE_VERTICES[i];
            let local_order_is_global = tri[la] < tri[lb];
            let s = mesh.cell_edge_signs[cell][i];
            for k in 0..2 {
                let ref_k = if local_order_is_global { k } else { 1 - k };
                select[2 * i + k] = 2 * i + ref_k;
                sign[2 * i + k] = s;
            }
        }
        Bdm1CellBasis { map, select, sign }
    }

    /// Values and divergences of the six local basis functions at a reference
    /// point, in local dof order.
    pub fn eval(&self, p: [f64; 2]) -> ([Vec2; 6], [f64; 6]) {
        let (ref_values, ref_divs) = reference_bdm1_basis(p);
        let (phys_values, phys_divs) = piola_map(&self.map, &ref_values, &ref_divs);
        let mut values = [Vec2::zeros(); 6];
        let mut divs = [0.0; 6];
        for j in 0..6 {
            values[j] = self.sign[j] * phys_values[self.select[j]];
            divs[j] = self.sign[j] * phys_divs[self.select[j]];
        }
        (values, divs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::quadrature::gauss1d;
    use crate::mesh::{build_rectangle_mesh, Diagonal, Subdomain};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const REF_VERTICES: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

    /// Outward-normal moment of `f` against the Lagrange function peaking at
    /// endpoint `k` of reference edge `i`, integrated with arc length.
    fn ref_edge_moment(i: usize, k: usize, f: impl Fn([f64; 2]) -> Vec2) -> f64 {
        let [a, b] = REF_EDGE_VERTICES[i];
        let pa = Vec2::new(REF_VERTICES[a][0], REF_VERTICES[a][1]);
        let pb = Vec2::new(REF_VERTICES[b][0], REF_VERTICES[b][1]);
        let tangent = pb - pa;
        let len = tangent.norm();
        let normal = Vec2::new(tangent.y, -tangent.x) / len;
        // Reference outward normals: rotating a counterclockwise traversal
        // clockwise points outward; edge 1 runs opposite to the traversal.
        let outward = if i == 1 { -normal } else { normal };
        let rule = gauss1d(5).unwrap();
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&t, &w)| {
                let p = pa + t * tangent;
                let hat = if k == 0 { 1.0 - t } else { t };
                w * len * f([p.x, p.y]).dot(&outward) * hat
            })
            .sum()
    }

    #[test]
    fn reference_basis_is_dual_to_edge_moments() {
        for j in 0..6 {
            for i in 0..3 {
                for k in 0..2 {
                    let moment =
                        ref_edge_moment(i, k, |p| reference_bdm1_basis(p).0[j]);
                    let expect = if 2 * i + k == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(moment, expect, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn reference_divergences_match_total_flux() {
        // Divergence is constant, and its integral over the reference
        // triangle (area 1/2) must equal the total boundary flux, which is 1
        // for every dual basis function.
        let (_, divs) = reference_bdm1_basis([0.3, 0.2]);
        for d in divs {
            assert_relative_eq!(d * 0.5, 1.0);
        }
    }

    #[test]
    fn piola_preserves_edge_moments() {
        // Map the reference basis onto a skewed cell: moments against the
        // mapped edges (outward normal, local endpoint order) stay Kronecker.
        let cell = [
            Vec2::new(0.2, -0.1),
            Vec2::new(1.4, 0.3),
            Vec2::new(0.4, 1.1),
        ];
        let map = CellMap::new(cell);
        let rule = gauss1d(5).unwrap();
        for j in 0..6 {
            for i in 0..3 {
                let [a, b] = REF_EDGE_VERTICES[i];
                let (pa, pb) = (cell[a], cell[b]);
                let tangent = pb - pa;
                let len = tangent.norm();
                let normal = Vec2::new(tangent.y, -tangent.x) / len;
                let centroid = (cell[0] + cell[1] + cell[2]) / 3.0;
                let mid = 0.5 * (pa + pb);
                let outward = if normal.dot(&(mid - centroid)) > 0.0 {
                    normal
                } else {
                    -normal
                };
                for k in 0..2 {
                    let moment: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(&t, &w)| {
                            let ref_a = REF_VERTICES[a];
                            let ref_b = REF_VERTICES[b];
                            let ref_p = [
                                ref_a[0] + t * (ref_b[0] - ref_a[0]),
                                ref_a[1] + t * (ref_b[1] - ref_a[1]),
                            ];
                            let v = map.piola_vector(reference_bdm1_basis(ref_p).0[j]);
                            let hat = if k == 0 { 1.0 - t } else { t };
                            w * len * v.dot(&outward) * hat
                        })
                        .sum();
                    let expect = if 2 * i + k == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(moment, expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn divergence_scales_by_inverse_jacobian_determinant() {
        let map = CellMap::new([
            Vec2::new(0.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(0.0, 2.0),
        ]);
        assert_relative_eq!(map.det, 4.0);
        assert_relative_eq!(map.piola_divergence(2.0), 0.5);
    }

    proptest! {
        /// Cell basis duality on arbitrary structured meshes: the moment of
        /// local basis j against the global dof functional j' (global edge
        /// normal, global endpoint order) is Kronecker.
        #[test]
        fn cell_basis_is_dual_to_global_dofs(
            nx in 1usize..4,
            ny in 1usize..4,
            cell_seed in 0usize..100,
            diag in prop_oneof![
                Just(Diagonal::Left),
                Just(Diagonal::Right),
                Just(Diagonal::Crisscross)
            ],
        ) {
            let mesh = build_rectangle_mesh(
                Subdomain::Fluid,
                Vec2::new(-0.3, 0.4),
                Vec2::new(1.1, 1.9),
                nx,
                ny,
                diag,
            ).unwrap();
            let cell = cell_seed % mesh.n_cells();
            let basis = Bdm1CellBasis::new(&mesh, cell);
            let rule = gauss1d(5).unwrap();
            for j in 0..6 {
                for i in 0..3 {
                    let e = mesh.cell_edges[cell][i];
                    let [ga, gb] = mesh.edges[e].vertices;
                    let (pa, pb) = (mesh.vertices[ga], mesh.vertices[gb]);
                    let n = mesh.edge_normal(e);
                    for k in 0..2 {
                        let moment: f64 = rule.points.iter().zip(&rule.weights).map(|(&t, &w)| {
                            let phys = pa + t * (pb - pa);
                            // Invert the affine map to evaluate the basis.
                            let d = phys - basis.map.origin;
                            let ref_p = basis.map.jacobian.try_inverse().unwrap() * d;
                            let v = basis.eval([ref_p.x, ref_p.y]).0[j];
                            let hat = if k == 0 { 1.0 - t } else { t };
                            w * mesh.edge_length(e) * v.dot(&n) * hat
                        }).sum();
                        let expect = if 2 * i + k == j { 1.0 } else { 0.0 };
                        prop_assert!((moment - expect).abs() < 1e-11,
                            "cell {cell} local dof {j} vs edge {i} moment {k}: {moment}");
                    }
                }
            }
        }
    }
}
