//! Physical parameters and assembly of the variational operators.
//!
//! Every operator is assembled as a [`Block`]: a triplet list tied to a
//! (row space, column space) pair. The caller composes them into the
//! residual and Jacobian. Volume operators live on one subdomain mesh;
//! interface operators couple subdomain traces with the multiplier
//! partitions through the merged interface partition, so nothing here
//! assumes the two grids match on the interface.

use crate::fem::{gauss1d, triangle_quadrature, Bdm1CellBasis, SpaceKind};
use crate::fem::space::{p1_gradients, p1_values, scalar_flux_moments, segment_dofs};
use crate::mesh::{BoundaryTag, TraceMesh, TriangleMesh};
use crate::{Error, Mat2, Result, Vec2};

/// Coefficients of the coupled free-flow/poroelastic model.
///
/// `convection` switches the quadratic momentum terms (and the interface
/// inertia correction) on; with it off the model is the linear Stokes
/// limit.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Fluid viscosity, shared by the free-flow stress and the Darcy drag.
    pub mu: f64,
    /// Fluid density.
    pub rho_f: f64,
    /// Saturated solid density.
    pub rho_p: f64,
    /// Skeleton Lame coefficients.
    pub mu_p: f64,
    pub lambda_p: f64,
    /// Specific storage.
    pub s0: f64,
    /// Pressure-dilation coupling coefficient.
    pub alpha: f64,
    /// Slip-friction coefficient on the interface.
    pub alpha_bjs: f64,
    /// Permeability tensor (symmetric positive definite).
    pub k: Mat2,
    pub convection: bool,
}

impl ModelParams {
    /// Unit coefficients with identity permeability; the default for
    /// verification runs.
    pub fn unit() -> Self {
        ModelParams {
            mu: 1.0,
            rho_f: 1.0,
            rho_p: 1.0,
            mu_p: 1.0,
            lambda_p: 1.0,
            s0: 1.0,
            alpha: 1.0,
            alpha_bjs: 1.0,
            k: Mat2::identity(),
            convection: true,
        }
    }

    pub fn k_inv(&self) -> Mat2 {
        self.k.try_inverse().expect("permeability must be invertible")
    }
}

/// A sparse operator block in triplet form. Duplicate entries add up.
#[derive(Debug, Clone)]
pub struct Block {
    pub n_rows: usize,
    pub n_cols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl Block {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Block { n_rows, n_cols, triplets: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        self.triplets.push((row, col, value));
    }

    /// y += scale * A x
    pub fn apply(&self, x: &[f64], y: &mut [f64], scale: f64) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for &(r, c, v) in &self.triplets {
            y[r] += scale * v * x[c];
        }
    }

    /// y += scale * Aᵀ x
    pub fn apply_transposed(&self, x: &[f64], y: &mut [f64], scale: f64) {
        debug_assert_eq!(x.len(), self.n_rows);
        debug_assert_eq!(y.len(), self.n_cols);
        for &(r, c, v) in &self.triplets {
            y[c] += scale * v * x[r];
        }
    }

    /// xᵀ A y
    pub fn quadratic(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_rows);
        debug_assert_eq!(y.len(), self.n_cols);
        self.triplets.iter().map(|&(r, c, v)| x[r] * v * y[c]).sum()
    }

    /// Entries summed by position, for comparisons in tests.
    pub fn entry_map(&self) -> std::collections::BTreeMap<(usize, usize), f64> {
        let mut m = std::collections::BTreeMap::new();
        for &(r, c, v) in &self.triplets {
            *m.entry((r, c)).or_insert(0.0) += v;
        }
        m
    }
}

/// The time-independent volume operators of both subdomains.
pub struct SubdomainForms {
    /// Deviatoric stress pairing (1/2mu)(sig^d, tau^d) on the fluid tensor space.
    pub a_f: Block,
    /// (div tau, v): rows fluid tensor, columns fluid P0 vector.
    pub b_f: Block,
    /// (tau, chi): rows fluid tensor, columns fluid P0 skew.
    pub b_sk: Block,
    /// Fluid P0 vector mass.
    pub m_uf: Block,
    /// Darcy drag mu (K^-1 u, v) on the poro flux space.
    pub a_dp: Block,
    /// -(div v, w): rows poro flux, columns poro P0 scalar.
    pub b_p: Block,
    /// Poro P0 scalar mass.
    pub m_pp: Block,
    /// Elasticity 2mu_p (e(eta), e(xi)) + lambda_p (div eta, div xi).
    pub a_ep: Block,
    /// -(div xi, w): rows displacement, columns poro P0 scalar.
    pub b_ps: Block,
    /// Displacement (vector P1) mass.
    pub m_eta: Block,
}

pub fn assemble_subdomain_forms(
    params: &ModelParams,
    mesh_f: &TriangleMesh,
    mesh_p: &TriangleMesh,
) -> SubdomainForms {
    let rule = triangle_quadrature(4).unwrap();
    let two_e = 2 * mesh_f.n_edges();

    let n_tensor = SpaceKind::Bdm1Tensor.n_dofs_on_mesh(mesh_f);
    let mut a_f = Block::new(n_tensor, n_tensor);
    let mut b_f = Block::new(n_tensor, SpaceKind::P0Vector.n_dofs_on_mesh(mesh_f));
    let mut b_sk = Block::new(n_tensor, SpaceKind::P0Skew.n_dofs_on_mesh(mesh_f));
    let mut m_uf = Block::new(2 * mesh_f.n_cells(), 2 * mesh_f.n_cells());

    for cell in 0..mesh_f.n_cells() {
        let basis = Bdm1CellBasis::new(mesh_f, cell);
        let vdofs = crate::fem::space::cell_dofs(SpaceKind::Bdm1Vector, mesh_f, cell);
        let area = mesh_f.cell_area(cell);
        let det = basis.map.det;

        let mut dev = [[0.0; 12]; 12];
        let mut int_v = [Vec2::zeros(); 6];
        let mut divs = [0.0; 6];
        for (q, &w) in rule.weights.iter().enumerate() {
            let (vals, dv) = basis.eval(rule.points[q]);
            divs = dv;
            for j in 0..6 {
                int_v[j] += w * det * vals[j];
            }
            for r1 in 0..2 {
                for j1 in 0..6 {
                    for r2 in 0..2 {
                        for j2 in 0..6 {
                            let mut s = -0.5 * vals[j1][r1] * vals[j2][r2];
                            if r1 == r2 {
                                s += vals[j1].dot(&vals[j2]);
                            }
                            dev[r1 * 6 + j1][r2 * 6 + j2] += w * det * s;
                        }
                    }
                }
            }
        }
        for r1 in 0..2 {
            for j1 in 0..6 {
                let row = r1 * two_e + vdofs[j1];
                for r2 in 0..2 {
                    for j2 in 0..6 {
                        a_f.push(
                            row,
                            r2 * two_e + vdofs[j2],
                            dev[r1 * 6 + j1][r2 * 6 + j2] / (2.0 * params.mu),
                        );
                    }
                }
                b_f.push(row, 2 * cell + r1, divs[j1] * area);
                let sk = if r1 == 0 { int_v[j1].y } else { -int_v[j1].x };
                b_sk.push(row, cell, sk);
            }
        }
        for a in 0..2 {
            m_uf.push(2 * cell + a, 2 * cell + a, area);
        }
    }

    let n_flux = SpaceKind::Bdm1Vector.n_dofs_on_mesh(mesh_p);
    let n_disp = SpaceKind::P1Vector.n_dofs_on_mesh(mesh_p);
    let mut a_dp = Block::new(n_flux, n_flux);
    let mut b_p = Block::new(n_flux, mesh_p.n_cells());
    let mut m_pp = Block::new(mesh_p.n_cells(), mesh_p.n_cells());
    let mut a_ep = Block::new(n_disp, n_disp);
    let mut b_ps = Block::new(n_disp, mesh_p.n_cells());
    let mut m_eta = Block::new(n_disp, n_disp);
    let k_inv = params.k_inv();

    for cell in 0..mesh_p.n_cells() {
        let basis = Bdm1CellBasis::new(mesh_p, cell);
        let vdofs = crate::fem::space::cell_dofs(SpaceKind::Bdm1Vector, mesh_p, cell);
        let area = mesh_p.cell_area(cell);
        let det = basis.map.det;

        let mut drag = [[0.0; 6]; 6];
        let mut divs = [0.0; 6];
        for (q, &w) in rule.weights.iter().enumerate() {
            let (vals, dv) = basis.eval(rule.points[q]);
            divs = dv;
            for j1 in 0..6 {
                let kv = k_inv * vals[j1];
                for j2 in 0..6 {
                    drag[j1][j2] += w * det * params.mu * kv.dot(&vals[j2]);
                }
            }
        }
        for j1 in 0..6 {
            for j2 in 0..6 {
                a_dp.push(vdofs[j1], vdofs[j2], drag[j1][j2]);
            }
            b_p.push(vdofs[j1], cell, -divs[j1] * area);
        }
        m_pp.push(cell, cell, area);

        let grads = p1_gradients(mesh_p, cell);
        let tri = mesh_p.triangles[cell];
        for lv1 in 0..3 {
            for a1 in 0..2 {
                let row = 2 * tri[lv1] + a1;
                // strain of the basis displacement lambda_{lv1} e_{a1}
                let e1 = sym_outer(a1, grads[lv1]);
                let d1 = grads[lv1][a1];
                for lv2 in 0..3 {
                    for a2 in 0..2 {
                        let e2 = sym_outer(a2, grads[lv2]);
                        let frob = (e1 * e2.transpose()).trace();
                        let val = (2.0 * params.mu_p * frob
                            + params.lambda_p * d1 * grads[lv2][a2])
                            * area;
                        a_ep.push(row, 2 * tri[lv2] + a2, val);
                        if a1 == a2 {
                            let mass = area / 12.0 * if lv1 == lv2 { 2.0 } else { 1.0 };
                            m_eta.push(row, 2 * tri[lv2] + a2, mass);
                        }
                    }
                }
                b_ps.push(row, cell, -d1 * area);
            }
        }
    }

    SubdomainForms { a_f, b_f, b_sk, m_uf, a_dp, b_p, m_pp, a_ep, b_ps, m_eta }
}

fn sym_outer(comp: usize, g: Vec2) -> Mat2 {
    let mut m = Mat2::zeros();
    m[(comp, 0)] = g.x;
    m[(comp, 1)] = g.y;
    0.5 * (m + m.transpose())
}

/// Convection pairing against a frozen transport field `w` (P0 vector
/// coefficients): rows fluid tensor, columns fluid P0 vector, entries
/// (rho/2mu)((w x u)^d, tau).
pub fn convective_block(params: &ModelParams, mesh: &TriangleMesh, w: &[f64]) -> Block {
    convective_like(params, mesh, w, false)
}

/// Derivative of the convection pairing with respect to the transport
/// slot: same shape, entries (rho/2mu)((u x w)^d, tau) acting on u.
pub fn convective_adjoint_block(params: &ModelParams, mesh: &TriangleMesh, w: &[f64]) -> Block {
    convective_like(params, mesh, w, true)
}

fn convective_like(params: &ModelParams, mesh: &TriangleMesh, w: &[f64], adjoint: bool) -> Block {
    let rule = triangle_quadrature(4).unwrap();
    let two_e = 2 * mesh.n_edges();
    let scale = params.rho_f / (2.0 * params.mu);
    let mut out = Block::new(SpaceKind::Bdm1Tensor.n_dofs_on_mesh(mesh), 2 * mesh.n_cells());
    for cell in 0..mesh.n_cells() {
        let basis = Bdm1CellBasis::new(mesh, cell);
        let vdofs = crate::fem::space::cell_dofs(SpaceKind::Bdm1Vector, mesh, cell);
        let det = basis.map.det;
        let wc = Vec2::new(w[2 * cell], w[2 * cell + 1]);
        let mut loc = [[0.0; 2]; 12];
        for (q, &wq) in rule.weights.iter().enumerate() {
            let (vals, _) = basis.eval(rule.points[q]);
            for r in 0..2 {
                for j in 0..6 {
                    let v = vals[j];
                    for k in 0..2 {
                        let s = if adjoint {
                            let mut s = -0.5 * wc[k] * v[r];
                            if k == r {
                                s += wc.dot(&v);
                            }
                            s
                        } else {
                            wc[r] * v[k] - 0.5 * wc[k] * v[r]
                        };
                        loc[r * 6 + j][k] += wq * det * scale * s;
                    }
                }
            }
        }
        for r in 0..2 {
            for j in 0..6 {
                for k in 0..2 {
                    out.push(r * two_e + vdofs[j], 2 * cell + k, loc[r * 6 + j][k]);
                }
            }
        }
    }
    out
}

/// Geometry of one merged-partition interface segment.
pub(crate) struct SegmentGeom {
    pub(crate) edge_f: usize,
    pub(crate) edge_p: usize,
    pub(crate) seg_f: usize,
    pub(crate) seg_p: usize,
    pub(crate) sign_f: f64,
    pub(crate) sign_p: f64,
    pub(crate) n_f: Vec2,
    pub(crate) n_p: Vec2,
    pub(crate) tangent: Vec2,
    pub(crate) sqrt_kj_inv: f64,
}

/// One quadrature point on a merged segment, with every shape value the
/// interface pairings need.
pub(crate) struct SegQp {
    /// Physical weight (line weight times segment length).
    pub(crate) w: f64,
    /// Lagrange values of the fluid-trace segment endpoints.
    pub(crate) hat_phi: [f64; 2],
    /// Lagrange values of the poro-trace segment endpoints.
    pub(crate) hat_lam: [f64; 2],
    /// Lagrange values of the poro edge endpoints (displacement trace).
    pub(crate) hat_eta: [f64; 2],
    /// Normal-trace shapes of the two flux dofs on the fluid edge.
    pub(crate) nk_f: [f64; 2],
    /// Normal-trace shapes of the two flux dofs on the poro edge.
    pub(crate) nk_p: [f64; 2],
}

/// The interface glue: merged-segment geometry plus assembly of every
/// pairing that lives on the interface.
pub struct Interface<'a> {
    pub params: ModelParams,
    pub mesh_f: &'a TriangleMesh,
    pub mesh_p: &'a TriangleMesh,
    pub trace_f: &'a TraceMesh,
    pub trace_p: &'a TraceMesh,
    pub merged: &'a TraceMesh,
    pub(crate) segs: Vec<SegmentGeom>,
}

/// The time-independent interface operators.
pub struct InterfaceForms {
    /// -<tau n_f, psi>: rows fluid tensor, columns fluid-trace vector.
    pub b_nf: Block,
    /// <v . n_p, xi>: rows poro flux, columns poro-trace scalar.
    pub b_np: Block,
    /// Slip friction <c (phi . t), (psi . t)> on the fluid-trace vector space.
    pub g_pp: Block,
    /// Slip friction rows fluid-trace vector, columns displacement.
    pub g_pe: Block,
    /// Slip friction rows displacement, columns fluid-trace vector.
    pub g_ep: Block,
    /// Slip friction on the displacement space.
    pub g_ee: Block,
    /// <xi . n_p, lambda>: rows displacement, columns poro-trace scalar.
    pub n_el: Block,
    /// <psi . n_f, lambda>: rows fluid-trace vector, columns poro-trace scalar.
    pub n_pl: Block,
}

impl<'a> Interface<'a> {
    pub fn new(
        params: &ModelParams,
        mesh_f: &'a TriangleMesh,
        mesh_p: &'a TriangleMesh,
        trace_f: &'a TraceMesh,
        trace_p: &'a TraceMesh,
        merged: &'a TraceMesh,
    ) -> Result<Self> {
        let fluid_edges = merged
            .fluid_edges
            .as_ref()
            .ok_or_else(|| Error::Mesh("merged trace lacks fluid parent edges".into()))?;
        let poro_edges = merged
            .poro_edges
            .as_ref()
            .ok_or_else(|| Error::Mesh("merged trace lacks poro parent edges".into()))?;

        let boundary_normal = |mesh: &TriangleMesh, e: usize| -> Result<(f64, Vec2)> {
            let edge = &mesh.edges[e];
            if edge.cells[1].is_some() {
                return Err(Error::Mesh(format!("interface edge {e} is not a boundary edge")));
            }
            let owner = edge.cells[0]
                .ok_or_else(|| Error::Mesh(format!("interface edge {e} has no cell")))?;
            let sign = mesh.sign_in_cell(owner, e);
            Ok((sign, sign * mesh.edge_normal(e)))
        };

        let mut segs = Vec::with_capacity(merged.n_segments());
        for k in 0..merged.n_segments() {
            let edge_f = fluid_edges[k];
            let edge_p = poro_edges[k];
            let (sign_f, n_f) = boundary_normal(mesh_f, edge_f)?;
            let (sign_p, n_p) = boundary_normal(mesh_p, edge_p)?;
            if (n_f + n_p).norm() > 1e-9 {
                return Err(Error::Mesh(format!(
                    "interface normals are not opposite on segment {k}: \
                     ({:.3}, {:.3}) vs ({:.3}, {:.3})",
                    n_f.x, n_f.y, n_p.x, n_p.y
                )));
            }
            let tangent = Vec2::new(-n_f.y, n_f.x);
            let kj = (params.k * tangent).dot(&tangent);
            if kj <= 0.0 {
                return Err(Error::Mesh("permeability is not positive along the interface".into()));
            }
            let s_mid = 0.5 * (merged.arc[k] + merged.arc[k + 1]);
            segs.push(SegmentGeom {
                edge_f,
                edge_p,
                seg_f: trace_f.segment_of(s_mid),
                seg_p: trace_p.segment_of(s_mid),
                sign_f,
                sign_p,
                n_f,
                n_p,
                tangent,
                sqrt_kj_inv: 1.0 / kj.sqrt(),
            });
        }

        Ok(Interface {
            params: params.clone(),
            mesh_f,
            mesh_p,
            trace_f,
            trace_p,
            merged,
            segs,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.segs.len()
    }

    /// Quadrature points of merged segment `k` with all trace shapes
    /// evaluated. Exact for the polynomial degrees the pairings produce.
    pub(crate) fn segment_quadrature(&self, k: usize) -> Vec<SegQp> {
        let rule = gauss1d(5).unwrap();
        let seg = &self.segs[k];
        let (s0, s1) = (self.merged.arc[k], self.merged.arc[k + 1]);
        let len = s1 - s0;

        let edge_local = |mesh: &TriangleMesh, e: usize, p: Vec2| -> (f64, f64) {
            let [a, b] = mesh.edges[e].vertices;
            let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
            let l = (pb - pa).norm();
            ((p - pa).dot(&(pb - pa)) / (l * l), l)
        };
        let trace_local = |trace: &TraceMesh, seg_idx: usize, s: f64| -> f64 {
            (s - trace.arc[seg_idx]) / (trace.arc[seg_idx + 1] - trace.arc[seg_idx])
        };

        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&t, &w)| {
                let s = s0 + t * len;
                let p = self.merged.point_at(s);
                let tf = trace_local(self.trace_f, seg.seg_f, s);
                let tp = trace_local(self.trace_p, seg.seg_p, s);
                let (tef, lf) = edge_local(self.mesh_f, seg.edge_f, p);
                let (tep, lp) = edge_local(self.mesh_p, seg.edge_p, p);
                SegQp {
                    w: w * len,
                    hat_phi: [1.0 - tf, tf],
                    hat_lam: [1.0 - tp, tp],
                    hat_eta: [1.0 - tep, tep],
                    nk_f: [(4.0 - 6.0 * tef) / lf, (-2.0 + 6.0 * tef) / lf],
                    nk_p: [(4.0 - 6.0 * tep) / lp, (-2.0 + 6.0 * tep) / lp],
                }
            })
            .collect()
    }

    pub fn constant_forms(&self) -> InterfaceForms {
        let two_e = 2 * self.mesh_f.n_edges();
        let n_tensor = SpaceKind::Bdm1Tensor.n_dofs_on_mesh(self.mesh_f);
        let n_flux = SpaceKind::Bdm1Vector.n_dofs_on_mesh(self.mesh_p);
        let n_disp = SpaceKind::P1Vector.n_dofs_on_mesh(self.mesh_p);
        let n_phi = SpaceKind::TraceP1Vector.n_dofs_on_trace(self.trace_f);
        let n_lam = SpaceKind::TraceP1Scalar.n_dofs_on_trace(self.trace_p);

        let mut b_nf = Block::new(n_tensor, n_phi);
        let mut b_np = Block::new(n_flux, n_lam);
        let mut g_pp = Block::new(n_phi, n_phi);
        let mut g_pe = Block::new(n_phi, n_disp);
        let mut g_ep = Block::new(n_disp, n_phi);
        let mut g_ee = Block::new(n_disp, n_disp);
        let mut n_el = Block::new(n_disp, n_lam);
        let mut n_pl = Block::new(n_phi, n_lam);

        let bjs = self.params.mu * self.params.alpha_bjs;

        for (k, seg) in self.segs.iter().enumerate() {
            let qps = self.segment_quadrature(k);
            let phi_dofs = segment_dofs(SpaceKind::TraceP1Vector, seg.seg_f);
            let lam_dofs = segment_dofs(SpaceKind::TraceP1Scalar, seg.seg_p);
            let everts = self.mesh_p.edges[seg.edge_p].vertices;
            let c = bjs * seg.sqrt_kj_inv;
            let t = seg.tangent;

            for qp in &qps {
                // -<tau n_f, psi>
                for kk in 0..2 {
                    let tn = seg.sign_f * qp.nk_f[kk];
                    for r in 0..2 {
                        let row = r * two_e + 2 * seg.edge_f + kk;
                        for lb in 0..2 {
                            b_nf.push(row, phi_dofs[2 * lb + r], -qp.w * tn * qp.hat_phi[lb]);
                        }
                    }
                    // <v . n_p, lambda>
                    let vn = seg.sign_p * qp.nk_p[kk];
                    for lb in 0..2 {
                        b_np.push(2 * seg.edge_p + kk, lam_dofs[lb], qp.w * vn * qp.hat_lam[lb]);
                    }
                }
                for lb2 in 0..2 {
                    for a2 in 0..2 {
                        let psi_t = qp.hat_phi[lb2] * t[a2];
                        let psi_n = qp.hat_phi[lb2] * seg.n_f[a2];
                        let row = phi_dofs[2 * lb2 + a2];
                        for lb1 in 0..2 {
                            for a1 in 0..2 {
                                let phi_t = qp.hat_phi[lb1] * t[a1];
                                g_pp.push(row, phi_dofs[2 * lb1 + a1], qp.w * c * phi_t * psi_t);
                                let eta_t = qp.hat_eta[lb1] * t[a1];
                                g_pe.push(row, 2 * everts[lb1] + a1, qp.w * c * eta_t * psi_t);
                            }
                            n_pl.push(row, lam_dofs[lb1], qp.w * psi_n * qp.hat_lam[lb1]);
                        }
                    }
                }
                for lv2 in 0..2 {
                    for a2 in 0..2 {
                        let xi_t = qp.hat_eta[lv2] * t[a2];
                        let xi_n = qp.hat_eta[lv2] * seg.n_p[a2];
                        let row = 2 * everts[lv2] + a2;
                        for lb1 in 0..2 {
                            for a1 in 0..2 {
                                let phi_t = qp.hat_phi[lb1] * t[a1];
                                g_ep.push(row, phi_dofs[2 * lb1 + a1], qp.w * c * phi_t * xi_t);
                                let eta_t = qp.hat_eta[lb1] * t[a1];
                                g_ee.push(row, 2 * everts[lb1] + a1, qp.w * c * eta_t * xi_t);
                            }
                            n_el.push(row, lam_dofs[lb1], qp.w * xi_n * qp.hat_lam[lb1]);
                        }
                    }
                }
            }
        }

        InterfaceForms { b_nf, b_np, g_pp, g_pe, g_ep, g_ee, n_el, n_pl }
    }

    /// Evaluate a fluid-trace vector field at a quadrature point of
    /// merged segment `k`.
    fn trace_vector_at(&self, k: usize, zeta: &[f64], qp: &SegQp) -> Vec2 {
        let dofs = segment_dofs(SpaceKind::TraceP1Vector, self.segs[k].seg_f);
        let mut v = Vec2::zeros();
        for lb in 0..2 {
            for a in 0..2 {
                v[a] += zeta[dofs[2 * lb + a]] * qp.hat_phi[lb];
            }
        }
        v
    }

    /// rho_f <zeta . n_f, phi . psi> with the transport trace `zeta`
    /// frozen; acts on phi.
    pub fn inertia_block(&self, zeta: &[f64]) -> Block {
        let n_phi = SpaceKind::TraceP1Vector.n_dofs_on_trace(self.trace_f);
        let mut out = Block::new(n_phi, n_phi);
        for (k, seg) in self.segs.iter().enumerate() {
            let dofs = segment_dofs(SpaceKind::TraceP1Vector, seg.seg_f);
            for qp in &self.segment_quadrature(k) {
                let zn = self.trace_vector_at(k, zeta, qp).dot(&seg.n_f);
                for lb2 in 0..2 {
                    for lb1 in 0..2 {
                        let v = self.params.rho_f * qp.w * zn * qp.hat_phi[lb1] * qp.hat_phi[lb2];
                        for a in 0..2 {
                            out.push(dofs[2 * lb2 + a], dofs[2 * lb1 + a], v);
                        }
                    }
                }
            }
        }
        out
    }

    /// Derivative of the inertia pairing with respect to the transport
    /// slot: rho_f <phi . n_f, zeta . psi> acting on phi.
    pub fn inertia_adjoint_block(&self, zeta: &[f64]) -> Block {
        let n_phi = SpaceKind::TraceP1Vector.n_dofs_on_trace(self.trace_f);
        let mut out = Block::new(n_phi, n_phi);
        for (k, seg) in self.segs.iter().enumerate() {
            let dofs = segment_dofs(SpaceKind::TraceP1Vector, seg.seg_f);
            for qp in &self.segment_quadrature(k) {
                let z = self.trace_vector_at(k, zeta, qp);
                for lb2 in 0..2 {
                    for a2 in 0..2 {
                        let row = dofs[2 * lb2 + a2];
                        for lb1 in 0..2 {
                            for a1 in 0..2 {
                                let v = self.params.rho_f
                                    * qp.w
                                    * qp.hat_phi[lb1]
                                    * seg.n_f[a1]
                                    * z[a2]
                                    * qp.hat_phi[lb2];
                                out.push(row, dofs[2 * lb1 + a1], v);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// (f, v) over the P0 vector space.
pub fn load_p0_vector(mesh: &TriangleMesh, f: impl Fn(Vec2) -> Vec2) -> Vec<f64> {
    let rule = triangle_quadrature(4).unwrap();
    let mut out = vec![0.0; 2 * mesh.n_cells()];
    for cell in 0..mesh.n_cells() {
        let basis = Bdm1CellBasis::new(mesh, cell);
        for (q, &w) in rule.weights.iter().enumerate() {
            let fv = f(basis.map.to_physical(rule.points[q]));
            out[2 * cell] += w * basis.map.det * fv.x;
            out[2 * cell + 1] += w * basis.map.det * fv.y;
        }
    }
    out
}

/// (f, w) over the P0 scalar space.
pub fn load_p0_scalar(mesh: &TriangleMesh, f: impl Fn(Vec2) -> f64) -> Vec<f64> {
    let rule = triangle_quadrature(4).unwrap();
    let mut out = vec![0.0; mesh.n_cells()];
    for cell in 0..mesh.n_cells() {
        let basis = Bdm1CellBasis::new(mesh, cell);
        for (q, &w) in rule.weights.iter().enumerate() {
            out[cell] += w * basis.map.det * f(basis.map.to_physical(rule.points[q]));
        }
    }
    out
}

/// (f, xi) over the vector P1 space.
pub fn load_p1_vector(mesh: &TriangleMesh, f: impl Fn(Vec2) -> Vec2) -> Vec<f64> {
    let rule = triangle_quadrature(4).unwrap();
    let mut out = vec![0.0; SpaceKind::P1Vector.n_dofs_on_mesh(mesh)];
    for cell in 0..mesh.n_cells() {
        let basis = Bdm1CellBasis::new(mesh, cell);
        let tri = mesh.triangles[cell];
        for (q, &w) in rule.weights.iter().enumerate() {
            let p = rule.points[q];
            let fv = f(basis.map.to_physical(p));
            let hats = p1_values(p);
            for lv in 0..3 {
                out[2 * tri[lv]] += w * basis.map.det * fv.x * hats[lv];
                out[2 * tri[lv] + 1] += w * basis.map.det * fv.y * hats[lv];
            }
        }
    }
    out
}

/// (q, tr tau) over the fluid tensor space.
pub fn load_tensor_trace(mesh: &TriangleMesh, qf: impl Fn(Vec2) -> f64) -> Vec<f64> {
    let rule = triangle_quadrature(4).unwrap();
    let two_e = 2 * mesh.n_edges();
    let mut out = vec![0.0; SpaceKind::Bdm1Tensor.n_dofs_on_mesh(mesh)];
    for cell in 0..mesh.n_cells() {
        let basis = Bdm1CellBasis::new(mesh, cell);
        let vdofs = crate::fem::space::cell_dofs(SpaceKind::Bdm1Vector, mesh, cell);
        for (q, &w) in rule.weights.iter().enumerate() {
            let (vals, _) = basis.eval(rule.points[q]);
            let qv = qf(basis.map.to_physical(rule.points[q]));
            for r in 0..2 {
                for j in 0..6 {
                    out[r * two_e + vdofs[j]] += w * basis.map.det * qv * vals[j][r];
                }
            }
        }
    }
    out
}

/// Moments of a scalar boundary datum against the two flux shapes of an
/// edge, oriented by the owning cell's outward normal.
fn outward_flux_pairing(mesh: &TriangleMesh, e: usize, g: impl Fn(Vec2) -> f64) -> [f64; 2] {
    let owner = mesh.edges[e].cells[0].expect("boundary edge must have an owner cell");
    let sign = mesh.sign_in_cell(owner, e);
    let l = mesh.edge_length(e);
    let m = scalar_flux_moments(mesh, e, g);
    [
        sign * (4.0 * m[0] - 2.0 * m[1]) / l,
        sign * (-2.0 * m[0] + 4.0 * m[1]) / l,
    ]
}

/// <tau n, g> over edges with the given tag, on the fluid tensor space.
pub fn load_fluid_traction(
    mesh: &TriangleMesh,
    tag: BoundaryTag,
    g: impl Fn(Vec2) -> Vec2,
) -> Vec<f64> {
    let two_e = 2 * mesh.n_edges();
    let mut out = vec![0.0; SpaceKind::Bdm1Tensor.n_dofs_on_mesh(mesh)];
    let edges: Vec<usize> = mesh.tagged_edges(tag).collect();
    for e in edges {
        for r in 0..2 {
            let m = outward_flux_pairing(mesh, e, |p| g(p)[r]);
            out[r * two_e + 2 * e] += m[0];
            out[r * two_e + 2 * e + 1] += m[1];
        }
    }
    out
}

/// <v . n, g> over edges with the given tag, on the flux space.
pub fn load_poro_flux(mesh: &TriangleMesh, tag: BoundaryTag, g: impl Fn(Vec2) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; SpaceKind::Bdm1Vector.n_dofs_on_mesh(mesh)];
    let edges: Vec<usize> = mesh.tagged_edges(tag).collect();
    for e in edges {
        let m = outward_flux_pairing(mesh, e, &g);
        out[2 * e] += m[0];
        out[2 * e + 1] += m[1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::space::{
        interpolate_bdm1_tensor, interpolate_bdm1_vector, interpolate_p0_vector,
        interpolate_trace_scalar, interpolate_trace_vector,
    };
    use crate::mesh::{build_rectangle_mesh, merge_trace_partitions, Diagonal, Subdomain};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn fluid_mesh(n: usize) -> TriangleMesh {
        let mut mesh = build_rectangle_mesh(
            Subdomain::Fluid,
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            n,
            n,
            Diagonal::Left,
        )
        .unwrap();
        mesh.tag_boundaries(&[
            (&|p: Vec2| p.y == 0.0, BoundaryTag::Interface),
            (&|p: Vec2| p.y == 1.0, BoundaryTag::FluidDirichlet),
            (&|p: Vec2| p.x == 0.0 || p.x == 1.0, BoundaryTag::FluidNeumann),
        ])
        .unwrap();
        mesh
    }

    fn poro_mesh(n: usize) -> TriangleMesh {
        let mut mesh = build_rectangle_mesh(
            Subdomain::Poro,
            Vec2::new(0.0, -1.0),
            Vec2::new(1.0, 0.0),
            n,
            n,
            Diagonal::Crisscross,
        )
        .unwrap();
        mesh.tag_boundaries(&[
            (&|p: Vec2| p.y == 0.0, BoundaryTag::Interface),
            (&|p: Vec2| p.y == -1.0, BoundaryTag::PoroDirichlet),
            (&|p: Vec2| p.x == 0.0 || p.x == 1.0, BoundaryTag::PoroNeumann),
        ])
        .unwrap();
        mesh
    }

    struct Setup {
        mesh_f: TriangleMesh,
        mesh_p: TriangleMesh,
        trace_f: TraceMesh,
        trace_p: TraceMesh,
        merged: TraceMesh,
    }

    fn setup(nf: usize, np: usize) -> Setup {
        let mesh_f = fluid_mesh(nf);
        let mesh_p = poro_mesh(np);
        let trace_f = mesh_f.extract_trace_mesh().unwrap();
        let trace_p = mesh_p.extract_trace_mesh().unwrap();
        let merged = merge_trace_partitions(&trace_f, &trace_p).unwrap();
        Setup { mesh_f, mesh_p, trace_f, trace_p, merged }
    }

    fn interface<'a>(params: &ModelParams, s: &'a Setup) -> Interface<'a> {
        Interface::new(params, &s.mesh_f, &s.mesh_p, &s.trace_f, &s.trace_p, &s.merged).unwrap()
    }

    #[test]
    fn block_apply_and_transpose() {
        let mut b = Block::new(2, 3);
        b.push(0, 1, 2.0);
        b.push(1, 2, -1.0);
        b.push(0, 1, 0.5);
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 2];
        b.apply(&x, &mut y, 1.0);
        assert_eq!(y, [5.0, -3.0]);
        let mut z = [0.0; 3];
        b.apply_transposed(&[1.0, 1.0], &mut z, 2.0);
        assert_eq!(z, [0.0, 5.0, -2.0]);
        assert_relative_eq!(b.quadratic(&[1.0, 1.0], &x), 2.0);
    }

    #[test]
    fn deviatoric_pairing_kills_isotropic_tensors() {
        let mesh = fluid_mesh(3);
        let params = ModelParams::unit();
        let forms = assemble_subdomain_forms(&params, &mesh, &poro_mesh(2));
        let iso = interpolate_bdm1_tensor(&mesh, |_| Mat2::identity());
        let mut y = vec![0.0; iso.len()];
        forms.a_f.apply(&iso, &mut y, 1.0);
        let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-12, "A_f applied to an isotropic field gave norm {norm}");
    }

    #[test]
    fn deviatoric_pairing_matches_hand_value() {
        let mesh = fluid_mesh(2);
        let mut params = ModelParams::unit();
        params.mu = 0.7;
        let forms = assemble_subdomain_forms(&params, &mesh, &poro_mesh(2));
        let m = Mat2::new(2.0, 1.0, 0.0, -1.0);
        let x = interpolate_bdm1_tensor(&mesh, |_| m);
        // deviatoric part [[1.5, 1], [0, -1.5]], squared Frobenius norm 5.5
        assert_relative_eq!(forms.a_f.quadratic(&x, &x), 5.5 / (2.0 * 0.7), max_relative = 1e-12);
    }

    #[test]
    fn darcy_drag_matches_direct_quadrature() {
        let mesh = poro_mesh(3);
        let mut params = ModelParams::unit();
        params.mu = 2.5;
        params.k = Mat2::new(2.0, 0.5, 0.5, 1.0);
        let forms = assemble_subdomain_forms(&params, &fluid_mesh(2), &mesh);

        let mut rng = StdRng::seed_from_u64(7);
        let x: Vec<f64> = (0..SpaceKind::Bdm1Vector.n_dofs_on_mesh(&mesh))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        let rule = triangle_quadrature(4).unwrap();
        let k_inv = params.k_inv();
        let mut direct = 0.0;
        for cell in 0..mesh.n_cells() {
            let map = Bdm1CellBasis::new(&mesh, cell).map;
            for (q, &w) in rule.weights.iter().enumerate() {
                let (v, _) = crate::fem::space::eval_bdm1_vector(&mesh, &x, cell, rule.points[q]);
                direct += w * map.det * params.mu * (k_inv * v).dot(&v);
            }
        }
        assert_relative_eq!(forms.a_dp.quadratic(&x, &x), direct, max_relative = 1e-12);
    }

    #[test]
    fn divergence_pairing_on_a_single_cell_follows_orientations() {
        let mesh = build_rectangle_mesh(
            Subdomain::Poro,
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            1,
            1,
            Diagonal::Left,
        )
        .unwrap();
        let forms = assemble_subdomain_forms(&ModelParams::unit(), &fluid_mesh(2), &mesh);
        let entries = forms.b_p.entry_map();
        for cell in 0..mesh.n_cells() {
            for i in 0..3 {
                let e = mesh.cell_edges[cell][i];
                let sign = mesh.cell_edge_signs[cell][i];
                for k in 0..2 {
                    assert_relative_eq!(entries[&(2 * e + k, cell)], -sign, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn interface_flux_pairing_hat_oracle() {
        let s = setup(3, 3);
        let params = ModelParams::unit();
        let forms = interface(&params, &s).constant_forms();
        // v = (0, 1) has v . n_p = 1 on the horizontal interface, so pairing
        // with a multiplier hat integrates the hat itself.
        let v = interpolate_bdm1_vector(&s.mesh_p, |_| Vec2::new(0.0, 1.0));
        let mut y = vec![0.0; s.trace_p.n_breakpoints()];
        forms.b_np.apply_transposed(&v, &mut y, 1.0);
        assert_relative_eq!(y[1], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(y[2], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(y[0], 1.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(y[3], 1.0 / 6.0, max_relative = 1e-12);
        let total: f64 = y.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn stress_trace_pairing_constant_oracle() {
        let s = setup(4, 3);
        let params = ModelParams::unit();
        let forms = interface(&params, &s).constant_forms();
        let m = Mat2::new(1.0, 2.0, 3.0, 4.0);
        let x = interpolate_bdm1_tensor(&s.mesh_f, |_| m);
        let c = Vec2::new(5.0, 7.0);
        let psi = interpolate_trace_vector(&s.trace_f, |_| c);
        // n_f = (0, -1) on the interface: -<M n_f, c> over unit length.
        let expect = -(m * Vec2::new(0.0, -1.0)).dot(&c);
        assert_relative_eq!(forms.b_nf.quadratic(&x, &psi), expect, max_relative = 1e-12);
    }

    #[test]
    fn multiplier_pairings_constant_oracle() {
        let s = setup(4, 3);
        let params = ModelParams::unit();
        let forms = interface(&params, &s).constant_forms();
        let lam = interpolate_trace_scalar(&s.trace_p, |_| 1.0);
        let c = Vec2::new(2.0, -3.0);
        let psi = interpolate_trace_vector(&s.trace_f, |_| c);
        // <psi . n_f, lambda> with n_f = (0, -1): integrand 3 over unit length.
        assert_relative_eq!(forms.n_pl.quadratic(&psi, &lam), 3.0, max_relative = 1e-12);

        let xi = crate::fem::space::interpolate_p1_vector(&s.mesh_p, |_| c);
        // <xi . n_p, lambda> with n_p = (0, 1).
        assert_relative_eq!(forms.n_el.quadratic(&xi, &lam), -3.0, max_relative = 1e-12);
    }

    #[test]
    fn interface_inertia_hat_oracle() {
        let s = setup(3, 3);
        let mut params = ModelParams::unit();
        params.rho_f = 1.3;
        let iface = interface(&params, &s);
        // zeta . n_f = 1 everywhere.
        let zeta = interpolate_trace_vector(&s.trace_f, |_| Vec2::new(0.0, -1.0));
        let l = iface.inertia_block(&zeta);
        let entries = l.entry_map();
        // interior breakpoint hat squared over two segments of length 1/3
        let h = 1.0 / 3.0;
        for a in 0..2 {
            assert_relative_eq!(
                entries[&(2 + a, 2 + a)],
                1.3 * 2.0 * h / 3.0,
                max_relative = 1e-12
            );
            assert!(entries.get(&(2 + a, 3 - a)).copied().unwrap_or(0.0).abs() < 1e-14);
        }
    }

    #[test]
    fn convective_pairing_vanishes_without_transport() {
        let mesh = fluid_mesh(2);
        let params = ModelParams::unit();
        let w = vec![0.0; 2 * mesh.n_cells()];
        let k = convective_block(&params, &mesh, &w);
        assert!(k.triplets.iter().all(|&(_, _, v)| v == 0.0));
        // pattern is kept for reuse of the sparsity
        assert!(!k.triplets.is_empty());
    }

    #[test]
    fn convective_pairing_constant_oracle() {
        let mesh = fluid_mesh(3);
        let mut params = ModelParams::unit();
        params.rho_f = 1.7;
        params.mu = 0.9;
        let w = interpolate_p0_vector(&mesh, |_| Vec2::new(1.0, 0.0));
        let tau = interpolate_bdm1_tensor(&mesh, |_| Mat2::new(1.0, 0.0, 0.0, -1.0));
        let k = convective_block(&params, &mesh, &w);
        // ((w x u)^d : tau) = (diag(1,0) - I/2) : diag(1,-1) = 1 on the unit square
        let expect = 1.7 / (2.0 * 0.9);
        assert_relative_eq!(k.quadratic(&tau, &w), expect, max_relative = 1e-12);

        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let k2 = convective_block(&params, &mesh, &w2);
        assert_relative_eq!(k2.quadratic(&tau, &w2), 4.0 * expect, max_relative = 1e-12);
    }

    #[test]
    fn convective_jacobian_is_exact_for_the_quadratic_term() {
        let mesh = fluid_mesh(2);
        let params = ModelParams::unit();
        let mut rng = StdRng::seed_from_u64(3);
        let n = 2 * mesh.n_cells();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nt = SpaceKind::Bdm1Tensor.n_dofs_on_mesh(&mesh);

        let eps = 1e-3;
        let up: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
        let mut r0 = vec![0.0; nt];
        convective_block(&params, &mesh, &u).apply(&u, &mut r0, 1.0);
        let mut r1 = vec![0.0; nt];
        convective_block(&params, &mesh, &up).apply(&up, &mut r1, 1.0);

        let mut jd = vec![0.0; nt];
        convective_block(&params, &mesh, &u).apply(&d, &mut jd, eps);
        convective_adjoint_block(&params, &mesh, &u).apply(&d, &mut jd, eps);
        // the remainder of the quadratic expansion, exactly
        convective_block(&params, &mesh, &d).apply(&d, &mut jd, eps * eps);

        for i in 0..nt {
            assert_relative_eq!(r1[i] - r0[i], jd[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn inertia_jacobian_is_exact_for_the_quadratic_term() {
        let s = setup(3, 3);
        let params = ModelParams::unit();
        let iface = interface(&params, &s);
        let n = SpaceKind::TraceP1Vector.n_dofs_on_trace(&s.trace_f);
        let mut rng = StdRng::seed_from_u64(11);
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eps = 1e-3;
        let pp: Vec<f64> = phi.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
        let mut r0 = vec![0.0; n];
        iface.inertia_block(&phi).apply(&phi, &mut r0, 1.0);
        let mut r1 = vec![0.0; n];
        iface.inertia_block(&pp).apply(&pp, &mut r1, 1.0);

        let mut jd = vec![0.0; n];
        iface.inertia_block(&phi).apply(&d, &mut jd, eps);
        iface.inertia_adjoint_block(&phi).apply(&d, &mut jd, eps);
        iface.inertia_block(&d).apply(&d, &mut jd, eps * eps);

        for i in 0..n {
            assert_relative_eq!(r1[i] - r0[i], jd[i], epsilon = 1e-13);
        }
    }

    fn assert_block_symmetric(b: &Block, tol: f64) {
        let entries = b.entry_map();
        for (&(r, c), &v) in &entries {
            let vt = entries.get(&(c, r)).copied().unwrap_or(0.0);
            assert!((v - vt).abs() <= tol, "asymmetry at ({r}, {c}): {v} vs {vt}");
        }
    }

    #[test]
    fn symmetric_operators_are_symmetric() {
        let s = setup(4, 3);
        let mut params = ModelParams::unit();
        params.k = Mat2::new(2.0, 0.5, 0.5, 1.0);
        params.mu_p = 3.0;
        params.lambda_p = 10.0;
        let forms = assemble_subdomain_forms(&params, &s.mesh_f, &s.mesh_p);
        assert_block_symmetric(&forms.a_f, 1e-12);
        assert_block_symmetric(&forms.a_dp, 1e-12);
        assert_block_symmetric(&forms.a_ep, 1e-12);
        assert_block_symmetric(&forms.m_eta, 1e-12);

        let iforms = interface(&params, &s).constant_forms();
        assert_block_symmetric(&iforms.g_pp, 1e-12);
        assert_block_symmetric(&iforms.g_ee, 1e-12);
        let pe = iforms.g_pe.entry_map();
        let ep = iforms.g_ep.entry_map();
        assert_eq!(pe.len(), ep.len());
        for (&(r, c), &v) in &pe {
            assert_relative_eq!(ep[&(c, r)], v, epsilon = 1e-13);
        }
    }

    #[test]
    fn energy_pairings_are_nonnegative() {
        let s = setup(3, 3);
        let mut params = ModelParams::unit();
        params.k = Mat2::new(2.0, 0.5, 0.5, 1.0);
        let forms = assemble_subdomain_forms(&params, &s.mesh_f, &s.mesh_p);
        let iforms = interface(&params, &s).constant_forms();

        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..20 {
            let x: Vec<f64> = (0..forms.a_f.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(forms.a_f.quadratic(&x, &x) >= -1e-12);
            let y: Vec<f64> = (0..forms.a_dp.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(forms.a_dp.quadratic(&y, &y) >= -1e-12);
            let z: Vec<f64> = (0..forms.a_ep.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(forms.a_ep.quadratic(&z, &z) >= -1e-12);

            // slip friction of the pair (phi, eta) is a weighted square of
            // the relative tangential trace
            let phi: Vec<f64> =
                (0..iforms.g_pp.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eta: Vec<f64> =
                (0..iforms.g_ee.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = iforms.g_pp.quadratic(&phi, &phi) - iforms.g_pe.quadratic(&phi, &eta)
                - iforms.g_ep.quadratic(&eta, &phi)
                + iforms.g_ee.quadratic(&eta, &eta);
            assert!(q >= -1e-12, "slip friction energy went negative: {q}");
        }
    }

    #[test]
    fn elasticity_is_positive_on_clamped_fields() {
        let s = setup(3, 3);
        let params = ModelParams::unit();
        let forms = assemble_subdomain_forms(&params, &s.mesh_f, &s.mesh_p);
        let boundary: std::collections::BTreeSet<usize> = s
            .mesh_p
            .boundary_edges()
            .flat_map(|e| s.mesh_p.edges[e].vertices)
            .collect();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..5 {
            let mut x: Vec<f64> =
                (0..forms.a_ep.n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            for &v in &boundary {
                x[2 * v] = 0.0;
                x[2 * v + 1] = 0.0;
            }
            assert!(forms.a_ep.quadratic(&x, &x) > 1e-8);
        }
    }

    #[test]
    fn weak_symmetry_pairing_annihilates_symmetric_fields() {
        let mesh = fluid_mesh(3);
        let forms = assemble_subdomain_forms(&ModelParams::unit(), &mesh, &poro_mesh(2));
        // a linear symmetric tensor field is reproduced exactly
        let x = interpolate_bdm1_tensor(&mesh, |p| {
            Mat2::new(p.x, p.y + 2.0 * p.x, p.y + 2.0 * p.x, 2.0 * p.x - p.y)
        });
        let mut y = vec![0.0; mesh.n_cells()];
        forms.b_sk.apply_transposed(&x, &mut y, 1.0);
        for v in y {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn matching_grids_assemble_identically_through_the_merge() {
        let s = setup(3, 3);
        let params = ModelParams::unit();
        let merged_forms = interface(&params, &s).constant_forms();

        // with matching grids the fluid trace already carries both parents
        let mut direct_trace = s.trace_f.clone();
        let poro_parents: Vec<usize> = (0..s.trace_f.n_segments())
            .map(|k| {
                let mid = 0.5 * (s.trace_f.arc[k] + s.trace_f.arc[k + 1]);
                s.trace_p.poro_edges.as_ref().unwrap()[s.trace_p.segment_of(mid)]
            })
            .collect();
        direct_trace.poro_edges = Some(poro_parents);
        let direct = Interface::new(
            &params,
            &s.mesh_f,
            &s.mesh_p,
            &s.trace_f,
            &s.trace_p,
            &direct_trace,
        )
        .unwrap()
        .constant_forms();

        let pairs = [
            (&merged_forms.b_nf, &direct.b_nf),
            (&merged_forms.b_np, &direct.b_np),
            (&merged_forms.g_pp, &direct.g_pp),
            (&merged_forms.g_pe, &direct.g_pe),
            (&merged_forms.g_ep, &direct.g_ep),
            (&merged_forms.g_ee, &direct.g_ee),
            (&merged_forms.n_el, &direct.n_el),
            (&merged_forms.n_pl, &direct.n_pl),
        ];
        for (a, b) in pairs {
            let ea = a.entry_map();
            let eb = b.entry_map();
            for (&(r, c), &v) in &ea {
                let vb = eb.get(&(r, c)).copied().unwrap_or(0.0);
                assert!((v - vb).abs() < 1e-12, "mismatch at ({r}, {c}): {v} vs {vb}");
            }
            for (&(r, c), &v) in &eb {
                assert!(
                    (v - ea.get(&(r, c)).copied().unwrap_or(0.0)).abs() < 1e-12,
                    "extra entry at ({r}, {c}): {v}"
                );
            }
        }
    }

    #[test]
    fn nonmatching_partitions_merge_into_the_refinement() {
        let s = setup(4, 3);
        let params = ModelParams::unit();
        let iface = interface(&params, &s);
        assert_eq!(iface.n_segments(), 6);
        assert_relative_eq!(s.merged.total_length(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn load_vectors_match_hand_values() {
        let mesh = fluid_mesh(3);
        let f = load_p0_vector(&mesh, |_| Vec2::new(1.0, 0.0));
        for cell in 0..mesh.n_cells() {
            assert_relative_eq!(f[2 * cell], mesh.cell_area(cell), max_relative = 1e-12);
            assert!(f[2 * cell + 1].abs() < 1e-15);
        }

        let q = load_p0_scalar(&mesh, |p| p.x);
        let total: f64 = q.iter().sum();
        assert_relative_eq!(total, 0.5, max_relative = 1e-12);

        let l = load_p1_vector(&mesh, |_| Vec2::new(0.0, 2.0));
        let total_y: f64 = l.iter().skip(1).step_by(2).sum();
        assert_relative_eq!(total_y, 2.0, max_relative = 1e-12);
        let total_x: f64 = l.iter().step_by(2).sum();
        assert!(total_x.abs() < 1e-14);

        let tr = load_tensor_trace(&mesh, |_| 1.0);
        let iso = interpolate_bdm1_tensor(&mesh, |_| Mat2::identity());
        let dot: f64 = tr.iter().zip(&iso).map(|(a, b)| a * b).sum();
        assert_relative_eq!(dot, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn boundary_traction_load_matches_closed_form() {
        let mesh = fluid_mesh(4);
        let m = Mat2::new(1.0, 2.0, 3.0, 4.0);
        let x = interpolate_bdm1_tensor(&mesh, |_| m);
        let load = load_fluid_traction(&mesh, BoundaryTag::FluidDirichlet, |p| {
            Vec2::new(p.y, p.x)
        });
        // top edge y = 1, n = (0, 1): integrand (M n) . (y, x) = 2 + 4x
        let dot: f64 = load.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_relative_eq!(dot, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn boundary_flux_load_matches_closed_form() {
        let mesh = poro_mesh(3);
        let c = Vec2::new(2.0, -3.0);
        let x = interpolate_bdm1_vector(&mesh, |_| c);
        let load = load_poro_flux(&mesh, BoundaryTag::PoroDirichlet, |p| p.x);
        // bottom edge y = -1, n = (0, -1): integrand (v . n) x = 3x
        let dot: f64 = load.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_relative_eq!(dot, 1.5, max_relative = 1e-12);
    }
}
