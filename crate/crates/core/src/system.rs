//! Coupled system assembly, Newton iteration, and time stepping.
//!
//! The monolithic unknown vector is laid out in blocks, one per field,
//! in the order of [`Field`]. A backward Euler step solves the coupled
//! nonlinear system for all fields at once; the solid acceleration uses
//! the second difference of the displacement history.

use crate::fem::space::{scalar_flux_moments, segment_dofs};
use crate::fem::{triangle_quadrature, SpaceKind};
use crate::forms::{
    assemble_subdomain_forms, convective_adjoint_block, convective_block, load_fluid_traction,
    load_p0_scalar, load_p0_vector, load_p1_vector, load_poro_flux, load_tensor_trace, Block,
    Interface, InterfaceForms, ModelParams, SubdomainForms,
};
use crate::mesh::{BoundaryTag, TraceMesh, TriangleMesh};
use crate::{Error, Result, Vec2};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};

/// The eight coupled fields, in unknown-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    /// Fluid pseudostress (flux tensor).
    SigmaF,
    /// Darcy flux.
    UP,
    /// Skeleton displacement.
    EtaP,
    /// Fluid velocity.
    UF,
    /// Darcy pressure.
    PP,
    /// Fluid vorticity (skew multiplier for weak stress symmetry).
    GammaF,
    /// Interface fluid velocity trace.
    Phi,
    /// Interface Darcy pressure trace.
    Lambda,
}

pub const FIELDS: [Field; 8] = [
    Field::SigmaF,
    Field::UP,
    Field::EtaP,
    Field::UF,
    Field::PP,
    Field::GammaF,
    Field::Phi,
    Field::Lambda,
];

/// Offsets of each field's block inside the monolithic vector.
#[derive(Debug, Clone)]
pub struct BlockIndexMap {
    offsets: [usize; 9],
}

impl BlockIndexMap {
    pub fn new(
        mesh_f: &TriangleMesh,
        mesh_p: &TriangleMesh,
        trace_f: &TraceMesh,
        trace_p: &TraceMesh,
    ) -> Self {
        let sizes = [
            SpaceKind::Bdm1Tensor.n_dofs_on_mesh(mesh_f),
            SpaceKind::Bdm1Vector.n_dofs_on_mesh(mesh_p),
            SpaceKind::P1Vector.n_dofs_on_mesh(mesh_p),
            SpaceKind::P0Vector.n_dofs_on_mesh(mesh_f),
            SpaceKind::P0Scalar.n_dofs_on_mesh(mesh_p),
            SpaceKind::P0Skew.n_dofs_on_mesh(mesh_f),
            SpaceKind::TraceP1Vector.n_dofs_on_trace(trace_f),
            SpaceKind::TraceP1Scalar.n_dofs_on_trace(trace_p),
        ];
        let mut offsets = [0usize; 9];
        for i in 0..8 {
            offsets[i + 1] = offsets[i] + sizes[i];
        }
        BlockIndexMap { offsets }
    }

    pub fn offset(&self, f: Field) -> usize {
        self.offsets[f as usize]
    }

    pub fn len(&self, f: Field) -> usize {
        self.offsets[f as usize + 1] - self.offsets[f as usize]
    }

    pub fn total(&self) -> usize {
        self.offsets[8]
    }

    pub fn range(&self, f: Field) -> std::ops::Range<usize> {
        self.offsets[f as usize]..self.offsets[f as usize + 1]
    }

    pub fn slice<'x>(&self, x: &'x [f64], f: Field) -> &'x [f64] {
        &x[self.range(f)]
    }
}

/// Source terms and boundary data of a concrete problem, all as functions
/// of time and position.
pub struct ProblemData {
    /// Fluid momentum source.
    pub f_f: Box<dyn Fn(f64, Vec2) -> Vec2>,
    /// Solid momentum source.
    pub f_p: Box<dyn Fn(f64, Vec2) -> Vec2>,
    /// Darcy mass source.
    pub q_p: Box<dyn Fn(f64, Vec2) -> f64>,
    /// Spatially uniform fluid mass source; switches on the pseudostress
    /// trace load and the velocity mass correction that keep the
    /// formulation consistent when div u does not vanish.
    pub q_f: Option<Box<dyn Fn(f64) -> f64>>,
    /// Velocity datum on the natural fluid boundary.
    pub fluid_velocity: Box<dyn Fn(f64, Vec2) -> Vec2>,
    /// Pressure datum on the natural poro boundary.
    pub poro_pressure: Box<dyn Fn(f64, Vec2) -> f64>,
    /// Traction datum on the essential fluid boundary, given the outward
    /// normal.
    pub traction: Box<dyn Fn(f64, Vec2, Vec2) -> Vec2>,
    /// Normal flux datum on the essential poro boundary, given the
    /// outward normal.
    pub normal_flux: Box<dyn Fn(f64, Vec2, Vec2) -> f64>,
    /// Displacement datum on the external poro boundary.
    pub displacement: Box<dyn Fn(f64, Vec2) -> Vec2>,
}

impl ProblemData {
    pub fn zero() -> Self {
        ProblemData {
            f_f: Box::new(|_, _| Vec2::zeros()),
            f_p: Box::new(|_, _| Vec2::zeros()),
            q_p: Box::new(|_, _| 0.0),
            q_f: None,
            fluid_velocity: Box::new(|_, _| Vec2::zeros()),
            poro_pressure: Box::new(|_, _| 0.0),
            traction: Box::new(|_, _, _| Vec2::zeros()),
            normal_flux: Box::new(|_, _, _| 0.0),
            displacement: Box::new(|_, _| Vec2::zeros()),
        }
    }
}

/// Everything a time step needs: meshes, assembled constant operators,
/// block layout, boundary data, and the step size.
pub struct CoupledSystem<'a> {
    pub params: ModelParams,
    pub dt: f64,
    /// Continuation scale on the quadratic momentum terms. The physical
    /// system has 1; a step solver may walk it up from a smaller value to
    /// reach a root that plain warm starting cannot.
    pub conv_theta: f64,
    pub mesh_f: &'a TriangleMesh,
    pub mesh_p: &'a TriangleMesh,
    pub iface: Interface<'a>,
    pub forms: SubdomainForms,
    pub iforms: InterfaceForms,
    pub map: BlockIndexMap,
    pub data: ProblemData,
    constrained: Vec<bool>,
    unit_tensor_trace: Vec<f64>,
}

impl<'a> CoupledSystem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: ModelParams,
        dt: f64,
        mesh_f: &'a TriangleMesh,
        mesh_p: &'a TriangleMesh,
        trace_f: &'a TraceMesh,
        trace_p: &'a TraceMesh,
        merged: &'a TraceMesh,
        data: ProblemData,
    ) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::Config("time step must be positive".into()));
        }
        let iface = Interface::new(&params, mesh_f, mesh_p, trace_f, trace_p, merged)?;
        let forms = assemble_subdomain_forms(&params, mesh_f, mesh_p);
        let iforms = iface.constant_forms();
        let map = BlockIndexMap::new(mesh_f, mesh_p, trace_f, trace_p);

        let mut constrained = vec![false; map.total()];
        let two_e = 2 * mesh_f.n_edges();
        for e in mesh_f.tagged_edges(BoundaryTag::FluidNeumann) {
            for r in 0..2 {
                for k in 0..2 {
                    constrained[map.offset(Field::SigmaF) + r * two_e + 2 * e + k] = true;
                }
            }
        }
        for e in mesh_p.tagged_edges(BoundaryTag::PoroNeumann) {
            for k in 0..2 {
                constrained[map.offset(Field::UP) + 2 * e + k] = true;
            }
        }
        for e in mesh_p.boundary_edges().collect::<Vec<_>>() {
            if mesh_p.boundary_tags[e] == Some(BoundaryTag::Interface) {
                continue;
            }
            for v in mesh_p.edges[e].vertices {
                constrained[map.offset(Field::EtaP) + 2 * v] = true;
                constrained[map.offset(Field::EtaP) + 2 * v + 1] = true;
            }
        }

        let unit_tensor_trace = load_tensor_trace(mesh_f, |_| 1.0);

        Ok(CoupledSystem {
            params,
            dt,
            conv_theta: 1.0,
            mesh_f,
            mesh_p,
            iface,
            forms,
            iforms,
            map,
            data,
            constrained,
            unit_tensor_trace,
        })
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.constrained[dof]
    }

    /// The essential boundary values at time `t`, as (global dof, value).
    pub fn essential_values(&self, t: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let two_e = 2 * self.mesh_f.n_edges();
        let off_s = self.map.offset(Field::SigmaF);
        for e in self.mesh_f.tagged_edges(BoundaryTag::FluidNeumann).collect::<Vec<_>>() {
            let owner = self.mesh_f.edges[e].cells[0].expect("boundary edge owner");
            let sign = self.mesh_f.sign_in_cell(owner, e);
            let n_out = sign * self.mesh_f.edge_normal(e);
            for r in 0..2 {
                let m =
                    scalar_flux_moments(self.mesh_f, e, |p| (self.data.traction)(t, p, n_out)[r]);
                for k in 0..2 {
                    out.push((off_s + r * two_e + 2 * e + k, sign * m[k]));
                }
            }
        }
        let off_up = self.map.offset(Field::UP);
        for e in self.mesh_p.tagged_edges(BoundaryTag::PoroNeumann).collect::<Vec<_>>() {
            let owner = self.mesh_p.edges[e].cells[0].expect("boundary edge owner");
            let sign = self.mesh_p.sign_in_cell(owner, e);
            let n_out = sign * self.mesh_p.edge_normal(e);
            let m = scalar_flux_moments(self.mesh_p, e, |p| (self.data.normal_flux)(t, p, n_out));
            for k in 0..2 {
                out.push((off_up + 2 * e + k, sign * m[k]));
            }
        }
        let off_eta = self.map.offset(Field::EtaP);
        let mut seen = vec![false; self.mesh_p.n_vertices()];
        for e in self.mesh_p.boundary_edges().collect::<Vec<_>>() {
            if self.mesh_p.boundary_tags[e] == Some(BoundaryTag::Interface) {
                continue;
            }
            for v in self.mesh_p.edges[e].vertices {
                if !seen[v] {
                    seen[v] = true;
                    let g = (self.data.displacement)(t, self.mesh_p.vertices[v]);
                    out.push((off_eta + 2 * v, g.x));
                    out.push((off_eta + 2 * v + 1, g.y));
                }
            }
        }
        out
    }

    pub fn apply_essential(&self, x: &mut [f64], t: f64) {
        for (i, g) in self.essential_values(t) {
            x[i] = g;
        }
    }

    /// The solution-independent residual contributions of the step ending
    /// at time `t`: source loads, natural boundary loads, and the history
    /// terms of the time derivatives.
    pub fn step_loads(&self, t: f64, hist: &SystemState) -> Vec<f64> {
        let m = &self.map;
        let mut l = vec![0.0; m.total()];
        let dt = self.dt;
        let p = &self.params;

        let off_s = m.offset(Field::SigmaF);
        if let Some(qf) = &self.data.q_f {
            let q = qf(t);
            for (i, v) in self.unit_tensor_trace.iter().enumerate() {
                l[off_s + i] += 0.5 * q * v;
            }
        }
        let traction_load = load_fluid_traction(self.mesh_f, BoundaryTag::FluidDirichlet, |pt| {
            (self.data.fluid_velocity)(t, pt)
        });
        for (i, v) in traction_load.iter().enumerate() {
            l[off_s + i] -= v;
        }

        let off_u = m.offset(Field::UF);
        apply_into(&self.forms.m_uf, &hist.u_prev, 0, &mut l, off_u, -p.rho_f / dt);
        let ff = load_p0_vector(self.mesh_f, |pt| (self.data.f_f)(t, pt));
        for (i, v) in ff.iter().enumerate() {
            l[off_u + i] -= v;
        }

        let off_e = m.offset(Field::EtaP);
        let eta_hist: Vec<f64> = hist
            .eta_prev
            .iter()
            .zip(&hist.eta_prev2)
            .map(|(a, b)| -2.0 * a + b)
            .collect();
        apply_into(&self.forms.m_eta, &eta_hist, 0, &mut l, off_e, p.rho_p / (dt * dt));
        apply_into(&self.iforms.g_ee, &hist.eta_prev, 0, &mut l, off_e, -1.0 / dt);
        let fp = load_p1_vector(self.mesh_p, |pt| (self.data.f_p)(t, pt));
        for (i, v) in fp.iter().enumerate() {
            l[off_e + i] -= v;
        }

        let off_vp = m.offset(Field::UP);
        let gp = load_poro_flux(self.mesh_p, BoundaryTag::PoroDirichlet, |pt| {
            (self.data.poro_pressure)(t, pt)
        });
        for (i, v) in gp.iter().enumerate() {
            l[off_vp + i] += v;
        }

        let off_w = m.offset(Field::PP);
        apply_into(&self.forms.m_pp, &hist.p_prev, 0, &mut l, off_w, -p.s0 / dt);
        apply_t_into(&self.forms.b_ps, &hist.eta_prev, 0, &mut l, off_w, p.alpha / dt);
        let qp = load_p0_scalar(self.mesh_p, |pt| (self.data.q_p)(t, pt));
        for (i, v) in qp.iter().enumerate() {
            l[off_w + i] -= v;
        }

        let off_phi = m.offset(Field::Phi);
        apply_into(&self.iforms.g_pe, &hist.eta_prev, 0, &mut l, off_phi, 1.0 / dt);

        let off_lam = m.offset(Field::Lambda);
        apply_t_into(&self.iforms.n_el, &hist.eta_prev, 0, &mut l, off_lam, 1.0 / dt);

        l
    }

    /// The nonlinear residual at iterate `x`, with `loads` precomputed by
    /// [`Self::step_loads`] for the step's end time `t`.
    pub fn residual(&self, x: &[f64], loads: &[f64], t: f64) -> Vec<f64> {
        let m = &self.map;
        let mut r = loads.to_vec();
        let p = &self.params;
        let dt = self.dt;
        let (os, ovp, oe, ou, ow, og, oph, ol) = (
            m.offset(Field::SigmaF),
            m.offset(Field::UP),
            m.offset(Field::EtaP),
            m.offset(Field::UF),
            m.offset(Field::PP),
            m.offset(Field::GammaF),
            m.offset(Field::Phi),
            m.offset(Field::Lambda),
        );

        apply_into(&self.forms.a_f, x, os, &mut r, os, 1.0);
        apply_into(&self.iforms.b_nf, x, oph, &mut r, os, 1.0);
        apply_into(&self.forms.b_f, x, ou, &mut r, os, 1.0);
        apply_into(&self.forms.b_sk, x, og, &mut r, os, 1.0);
        if p.convection {
            let u = m.slice(x, Field::UF);
            let k = convective_block(p, self.mesh_f, u);
            apply_into(&k, x, ou, &mut r, os, self.conv_theta);
        }

        let q_f = self.data.q_f.as_ref().map(|f| f(t)).unwrap_or(0.0);
        apply_into(&self.forms.m_uf, x, ou, &mut r, ou, p.rho_f * (1.0 / dt - q_f));
        apply_t_into(&self.forms.b_f, x, os, &mut r, ou, -1.0);

        apply_t_into(&self.forms.b_sk, x, os, &mut r, og, -1.0);

        apply_into(&self.forms.m_eta, x, oe, &mut r, oe, p.rho_p / (dt * dt));
        apply_into(&self.forms.a_ep, x, oe, &mut r, oe, 1.0);
        apply_into(&self.forms.b_ps, x, ow, &mut r, oe, p.alpha);
        apply_into(&self.iforms.g_ee, x, oe, &mut r, oe, 1.0 / dt);
        apply_into(&self.iforms.g_ep, x, oph, &mut r, oe, -1.0);
        apply_into(&self.iforms.n_el, x, ol, &mut r, oe, 1.0);

        apply_into(&self.forms.a_dp, x, ovp, &mut r, ovp, 1.0);
        apply_into(&self.forms.b_p, x, ow, &mut r, ovp, 1.0);
        apply_into(&self.iforms.b_np, x, ol, &mut r, ovp, 1.0);

        apply_into(&self.forms.m_pp, x, ow, &mut r, ow, p.s0 / dt);
        apply_t_into(&self.forms.b_ps, x, oe, &mut r, ow, -p.alpha / dt);
        apply_t_into(&self.forms.b_p, x, ovp, &mut r, ow, -1.0);

        apply_t_into(&self.iforms.b_nf, x, os, &mut r, oph, -1.0);
        apply_into(&self.iforms.g_pp, x, oph, &mut r, oph, 1.0);
        apply_into(&self.iforms.g_pe, x, oe, &mut r, oph, -1.0 / dt);
        apply_into(&self.iforms.n_pl, x, ol, &mut r, oph, 1.0);
        if p.convection {
            let phi = m.slice(x, Field::Phi);
            let lmat = self.iface.inertia_block(phi);
            apply_into(&lmat, x, oph, &mut r, oph, self.conv_theta);
        }

        apply_t_into(&self.iforms.n_el, x, oe, &mut r, ol, -1.0 / dt);
        apply_t_into(&self.iforms.n_pl, x, oph, &mut r, ol, -1.0);
        apply_t_into(&self.iforms.b_np, x, ovp, &mut r, ol, -1.0);

        for (i, c) in self.constrained.iter().enumerate() {
            if *c {
                r[i] = 0.0;
            }
        }
        r
    }

    /// Jacobian triplets at iterate `x`. Constrained rows are replaced by
    /// identity rows.
    pub fn jacobian_triplets(&self, x: &[f64], t: f64) -> Vec<Triplet<usize, usize, f64>> {
        let m = &self.map;
        let p = &self.params;
        let dt = self.dt;
        let con = &self.constrained;
        let (os, ovp, oe, ou, ow, og, oph, ol) = (
            m.offset(Field::SigmaF),
            m.offset(Field::UP),
            m.offset(Field::EtaP),
            m.offset(Field::UF),
            m.offset(Field::PP),
            m.offset(Field::GammaF),
            m.offset(Field::Phi),
            m.offset(Field::Lambda),
        );

        let mut tris: Vec<Triplet<usize, usize, f64>> = Vec::new();
        let add = |tris: &mut Vec<Triplet<usize, usize, f64>>,
                       b: &Block,
                       roff: usize,
                       coff: usize,
                       scale: f64,
                       transpose: bool| {
            for &(i, j, v) in &b.triplets {
                let (row, col) = if transpose { (coff + j, roff + i) } else { (roff + i, coff + j) };
                if !con[row] {
                    tris.push(Triplet::new(row, col, scale * v));
                }
            }
        };

        add(&mut tris, &self.forms.a_f, os, os, 1.0, false);
        add(&mut tris, &self.iforms.b_nf, os, oph, 1.0, false);
        add(&mut tris, &self.forms.b_f, os, ou, 1.0, false);
        add(&mut tris, &self.forms.b_sk, os, og, 1.0, false);
        if p.convection {
            let u = m.slice(x, Field::UF);
            let k = convective_block(p, self.mesh_f, u);
            let k2 = convective_adjoint_block(p, self.mesh_f, u);
            add(&mut tris, &k, os, ou, self.conv_theta, false);
            add(&mut tris, &k2, os, ou, self.conv_theta, false);
        }

        let q_f = self.data.q_f.as_ref().map(|f| f(t)).unwrap_or(0.0);
        add(&mut tris, &self.forms.m_uf, ou, ou, p.rho_f * (1.0 / dt - q_f), false);
        add(&mut tris, &self.forms.b_f, os, ou, -1.0, true);

        add(&mut tris, &self.forms.b_sk, os, og, -1.0, true);

        add(&mut tris, &self.forms.m_eta, oe, oe, p.rho_p / (dt * dt), false);
        add(&mut tris, &self.forms.a_ep, oe, oe, 1.0, false);
        add(&mut tris, &self.forms.b_ps, oe, ow, p.alpha, false);
        add(&mut tris, &self.iforms.g_ee, oe, oe, 1.0 / dt, false);
        add(&mut tris, &self.iforms.g_ep, oe, oph, -1.0, false);
        add(&mut tris, &self.iforms.n_el, oe, ol, 1.0, false);

        add(&mut tris, &self.forms.a_dp, ovp, ovp, 1.0, false);
        add(&mut tris, &self.forms.b_p, ovp, ow, 1.0, false);
        add(&mut tris, &self.iforms.b_np, ovp, ol, 1.0, false);

        add(&mut tris, &self.forms.m_pp, ow, ow, p.s0 / dt, false);
        add(&mut tris, &self.forms.b_ps, oe, ow, -p.alpha / dt, true);
        add(&mut tris, &self.forms.b_p, ovp, ow, -1.0, true);

        add(&mut tris, &self.iforms.b_nf, os, oph, -1.0, true);
        add(&mut tris, &self.iforms.g_pp, oph, oph, 1.0, false);
        add(&mut tris, &self.iforms.g_pe, oph, oe, -1.0 / dt, false);
        add(&mut tris, &self.iforms.n_pl, oph, ol, 1.0, false);
        if p.convection {
            let phi = m.slice(x, Field::Phi);
            let lmat = self.iface.inertia_block(phi);
            let l2 = self.iface.inertia_adjoint_block(phi);
            add(&mut tris, &lmat, oph, oph, self.conv_theta, false);
            add(&mut tris, &l2, oph, oph, self.conv_theta, false);
        }

        add(&mut tris, &self.iforms.n_el, oe, ol, -1.0 / dt, true);
        add(&mut tris, &self.iforms.n_pl, oph, ol, -1.0, true);
        add(&mut tris, &self.iforms.b_np, ovp, ol, -1.0, true);

        for (i, c) in con.iter().enumerate() {
            if *c {
                tris.push(Triplet::new(i, i, 1.0));
            }
        }
        tris
    }

    /// Cellwise mean of the recovered fluid pressure.
    pub fn recover_fluid_pressure(&self, x: &[f64], t: f64) -> Vec<f64> {
        let rule = triangle_quadrature(2).unwrap();
        let sigma = self.map.slice(x, Field::SigmaF);
        let u = self.map.slice(x, Field::UF);
        let q_f = self.data.q_f.as_ref().map(|f| f(t)).unwrap_or(0.0);
        let mut out = vec![0.0; self.mesh_f.n_cells()];
        for cell in 0..self.mesh_f.n_cells() {
            let mut mean_tr = 0.0;
            for (q, &w) in rule.weights.iter().enumerate() {
                let (s, _) =
                    crate::fem::space::eval_bdm1_tensor(self.mesh_f, sigma, cell, rule.points[q]);
                mean_tr += 2.0 * w * s.trace();
            }
            let uc = Vec2::new(u[2 * cell], u[2 * cell + 1]);
            let conv = if self.params.convection {
                self.conv_theta * self.params.rho_f * uc.norm_squared()
            } else {
                0.0
            };
            out[cell] = -0.5 * (mean_tr + conv - 2.0 * self.params.mu * q_f);
        }
        out
    }

    /// The discrete mechanical energy of a state: kinetic fluid energy,
    /// pressure storage, strain energy, and solid kinetic energy.
    pub fn energy(&self, u: &[f64], pp: &[f64], eta: &[f64], eta_dot: &[f64]) -> f64 {
        0.5 * (self.params.rho_f * self.forms.m_uf.quadratic(u, u)
            + self.params.s0 * self.forms.m_pp.quadratic(pp, pp)
            + self.forms.a_ep.quadratic(eta, eta)
            + self.params.rho_p * self.forms.m_eta.quadratic(eta_dot, eta_dot))
    }
}

fn apply_into(b: &Block, x: &[f64], xoff: usize, r: &mut [f64], roff: usize, scale: f64) {
    for &(i, j, v) in &b.triplets {
        r[roff + i] += scale * v * x[xoff + j];
    }
}

fn apply_t_into(b: &Block, x: &[f64], xoff: usize, r: &mut [f64], roff: usize, scale: f64) {
    for &(i, j, v) in &b.triplets {
        r[roff + j] += scale * v * x[xoff + i];
    }
}

/// Solution and history carried from step to step.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub t: f64,
    pub x: Vec<f64>,
    pub eta_prev: Vec<f64>,
    pub eta_prev2: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub p_prev: Vec<f64>,
}

impl SystemState {
    /// Seeds the histories from an initial full vector and the initial
    /// solid velocity (the displacement history is extrapolated one step
    /// back so the first second difference sees the right velocity).
    pub fn new(map: &BlockIndexMap, x0: Vec<f64>, solid_velocity0: &[f64], dt: f64) -> Self {
        let eta_prev = map.slice(&x0, Field::EtaP).to_vec();
        let eta_prev2: Vec<f64> = eta_prev
            .iter()
            .zip(solid_velocity0)
            .map(|(e, v)| e - dt * v)
            .collect();
        let u_prev = map.slice(&x0, Field::UF).to_vec();
        let p_prev = map.slice(&x0, Field::PP).to_vec();
        SystemState { t: 0.0, x: x0, eta_prev, eta_prev2, u_prev, p_prev }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Smallest fraction of the Newton direction the line search may take
    /// before giving up on the step.
    pub min_damping: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { abs_tol: 1e-10, rel_tol: 1e-8, max_iter: 20, min_damping: 1e-3 }
    }
}

/// Bounds for the adaptive Levenberg shift on the equilibrated Jacobian.
/// The matrix is scaled to unit peak entries, so these are absolute.
const RIDGE_MIN: f64 = 1e-8;
const RIDGE_MAX: f64 = 1e2;

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
    pub scaled_residual: f64,
}

/// Newton driver with reusable symbolic factorization. One instance per
/// problem; the sparsity pattern must not change between calls.
pub struct NewtonSolver {
    pub config: NewtonConfig,
    symbolic: Option<SymbolicLu<usize>>,
    cached: Option<Factorization>,
    ridge: f64,
}

struct Factorization {
    lu: Lu<usize, f64>,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
    tris: Vec<Triplet<usize, usize, f64>>,
}

impl NewtonSolver {
    pub fn new(config: NewtonConfig) -> Self {
        faer::set_global_parallelism(faer::Par::Seq);
        NewtonSolver { config, symbolic: None, cached: None, ridge: 0.0 }
    }

    /// Advances the state by one time step, solving the coupled system at
    /// `state.t + dt` and rotating the histories on success.
    pub fn step(&mut self, sys: &CoupledSystem, state: &mut SystemState) -> Result<NewtonReport> {
        let t_new = state.t + sys.dt;
        let loads = sys.step_loads(t_new, state);
        let mut x = state.x.clone();
        sys.apply_essential(&mut x, t_new);
        let mut r = sys.residual(&x, &loads, t_new);

        let scales = block_scales(&sys.map, &r, self.config.abs_tol);
        let reusable = !sys.params.convection && sys.data.q_f.is_none();
        let mut iterations = 0;
        loop {
            let raw = l2(&r);
            let scaled = scaled_measure(&sys.map, &r, &scales);
            if std::env::var_os("NEWTON_TRACE").is_some() {
                eprintln!("t = {t_new}, iter {iterations}: raw {raw:.3e} scaled {scaled:.3e}");
                for (i, &f) in FIELDS.iter().enumerate() {
                    let b = l2(&r[sys.map.range(f)]);
                    eprintln!("    {f:?}: r = {b:.3e}  scale = {:.3e}", scales[i]);
                }
            }
            let mut converged = raw <= self.config.abs_tol || scaled <= self.config.rel_tol;

            let mut pre = None;
            if !converged {
                let tris: &[Triplet<usize, usize, f64>] = match &self.cached {
                    Some(fac) if reusable => &fac.tris,
                    _ => pre.insert(sys.jacobian_triplets(&x, t_new)),
                };
                converged = residual_at_rounding_floor(&sys.map, &r, tris, &x, &loads);
            }
            if converged {
                if std::env::var_os("NEWTON_TRACE").is_some() {
                    let u = sys.map.slice(&x, Field::UF);
                    let p = sys.map.slice(&x, Field::PP);
                    let du = l2(&u
                        .iter()
                        .zip(&state.u_prev)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>());
                    let dp = l2(&p
                        .iter()
                        .zip(&state.p_prev)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>());
                    eprintln!(
                        "    accept t = {t_new}: |du| = {du:.3e} (|u| = {:.3e}), |dp| = {dp:.3e} (|p| = {:.3e})",
                        l2(u),
                        l2(p)
                    );
                }
                state.eta_prev2 = std::mem::take(&mut state.eta_prev);
                state.eta_prev = sys.map.slice(&x, Field::EtaP).to_vec();
                state.u_prev = sys.map.slice(&x, Field::UF).to_vec();
                state.p_prev = sys.map.slice(&x, Field::PP).to_vec();
                state.x = x;
                state.t = t_new;
                return Ok(NewtonReport { iterations, residual: raw, scaled_residual: scaled });
            }
            if iterations >= self.config.max_iter {
                return Err(Error::Nonconvergence(format!(
                    "Newton stalled at t = {t_new}: residual {raw:.3e} (scaled {scaled:.3e}) \
                     after {iterations} iterations"
                )));
            }

            let min_damping = self.config.min_damping;
            let x_norm = l2(&x);
            let mut pre = pre;

            // Direction plus backtracking, with a Levenberg shift held in
            // reserve. Convection-dominated states can make the Jacobian
            // nearly singular along a stress/rotation mode that no damping
            // of the exact Newton direction survives; shifting the scaled
            // diagonal suppresses that mode while the true residual keeps
            // the fixed point where it was.
            let step_taken = loop {
                let ridge = self.ridge;
                let fac = self.factorize(sys, &x, t_new, pre.take(), ridge)?;
                let delta = solve_with(fac, &r);
                let d0 = l2(&delta);
                if std::env::var_os("NEWTON_TRACE").is_some() {
                    eprintln!("      ridge {ridge:.1e}, |delta| = {d0:.3e}");
                    for f in FIELDS {
                        let b = l2(&delta[sys.map.range(f)]);
                        eprintln!("      delta {f:?}: {b:.3e}");
                    }
                }

                // A direction this long is never a usable step for fields
                // of this size; skip the doomed backtracking sweep.
                let hopeless = d0 > 1e5 * (1.0 + x_norm);

                // Backtracking on the Newton-direction length of the new
                // residual: affine invariant, so the strongly scaled stress
                // block cannot veto a step that the flow genuinely needs.
                let mut lambda = 1.0f64;
                let accepted = loop {
                    if hopeless {
                        break None;
                    }
                    let x_try: Vec<f64> =
                        x.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
                    let r_try = sys.residual(&x_try, &loads, t_new);
                    if d0 == 0.0
                        || l2(&solve_with(fac, &r_try)) <= (1.0 - 0.5 * lambda) * d0
                    {
                        break Some((x_try, r_try));
                    }
                    if std::env::var_os("NEWTON_TRACE").is_some() {
                        eprintln!(
                            "      reject lambda {lambda:.4}: |r_try| = {:.3e}",
                            l2(&r_try)
                        );
                    }
                    lambda *= 0.5;
                    if lambda < min_damping {
                        break None;
                    }
                };
                match accepted {
                    Some(ok) => break ok,
                    None => {
                        if self.ridge >= RIDGE_MAX {
                            return Err(Error::Nonconvergence(format!(
                                "Newton line search failed at t = {t_new}: no admissible \
                                 step above damping {min_damping:.1e}"
                            )));
                        }
                        self.ridge = if self.ridge == 0.0 {
                            RIDGE_MIN
                        } else {
                            (self.ridge * 100.0).min(RIDGE_MAX)
                        };
                        self.cached = None;
                    }
                }
            };
            x = step_taken.0;
            r = step_taken.1;
            if self.ridge > 0.0 {
                self.ridge *= 0.1;
                if self.ridge < RIDGE_MIN {
                    self.ridge = 0.0;
                }
            }
            iterations += 1;
        }
    }

    fn factorize(
        &mut self,
        sys: &CoupledSystem,
        x: &[f64],
        t: f64,
        pre: Option<Vec<Triplet<usize, usize, f64>>>,
        ridge: f64,
    ) -> Result<&Factorization> {
        let reusable = !sys.params.convection && sys.data.q_f.is_none();
        if reusable && self.cached.is_some() {
            return Ok(self.cached.as_ref().unwrap());
        }
        let n = sys.map.total();
        let mut tris = pre.unwrap_or_else(|| sys.jacobian_triplets(x, t));
        // Keep the diagonal in the sparsity pattern whether or not the
        // shift is active, so the symbolic factorization stays reusable.
        tris.extend((0..n).map(|i| Triplet::new(i, i, 0.0)));
        let mut mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &tris)
            .map_err(|e| Error::Solver(format!("building the Jacobian failed: {e:?}")))?;
        let (row_scale, col_scale) = equilibrate(&mut mat);
        if ridge > 0.0 {
            let (sym, val) = mat.parts_mut();
            for j in 0..n {
                for p in sym.col_range(j) {
                    if sym.row_idx()[p] == j {
                        val[p] += ridge;
                    }
                }
            }
        }
        let symbolic = match &self.symbolic {
            Some(s) => s.clone(),
            None => {
                let s = SymbolicLu::try_new(mat.symbolic())
                    .map_err(|e| Error::Solver(format!("symbolic factorization failed: {e:?}")))?;
                self.symbolic = Some(s.clone());
                s
            }
        };
        let lu = Lu::try_new_with_symbolic(symbolic, mat.as_ref())
            .map_err(|e| Error::Solver(format!("LU factorization failed: {e:?}")))?;
        self.cached = Some(Factorization { lu, row_scale, col_scale, tris });
        Ok(self.cached.as_ref().unwrap())
    }
}

/// True when every block's residual sits at the rounding floor of its own
/// terms. With strongly scaled physical parameters a converged iterate
/// leaves leftover residuals of size eps times the term magnitudes, and a
/// warm start from it makes the frozen relative scales demand more digits
/// than floating point holds; this test certifies such an iterate instead
/// of letting the iteration chase noise.
fn residual_at_rounding_floor(
    map: &BlockIndexMap,
    r: &[f64],
    tris: &[Triplet<usize, usize, f64>],
    x: &[f64],
    loads: &[f64],
) -> bool {
    let mut mag = vec![0.0f64; r.len()];
    for t in tris {
        mag[t.row] += t.val.abs() * x[t.col].abs();
    }
    for (m, l) in mag.iter_mut().zip(loads) {
        *m += l.abs();
    }
    let floor = 4.0 * f64::EPSILON;
    if std::env::var_os("NEWTON_TRACE").is_some() {
        for f in FIELDS {
            let rng = map.range(f);
            eprintln!(
                "      floor {f:?}: r = {:.3e} vs {:.3e}",
                l2(&r[rng.clone()]),
                floor * l2(&mag[rng])
            );
        }
    }
    FIELDS.iter().all(|&f| {
        let rng = map.range(f);
        l2(&r[rng.clone()]) <= floor * l2(&mag[rng])
    })
}

fn solve_with(fac: &Factorization, r: &[f64]) -> Vec<f64> {
    let n = r.len();
    let mut b = faer::Mat::<f64>::from_fn(n, 1, |i, _| -r[i] * fac.row_scale[i]);
    fac.lu.solve_in_place(b.as_mut());
    (0..n).map(|i| fac.col_scale[i] * b[(i, 0)]).collect()
}

/// Rescales rows and then columns to unit peak magnitude, in place. The
/// scales are powers of two, so applying and undoing them is exact. Without
/// this the physical parameter spread between the subdomains puts the
/// Jacobian's conditioning beyond what partial pivoting can absorb, and
/// Newton stalls at the resulting increment noise.
fn equilibrate(mat: &mut SparseColMat<usize, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = mat.nrows();
    let pow2 = |m: f64| -> f64 {
        if m == 0.0 {
            1.0
        } else {
            f64::exp2(-m.log2().round())
        }
    };

    let mut row_max = vec![0.0f64; n];
    let (sym, val) = mat.parts_mut();
    for j in 0..n {
        for p in sym.col_range(j) {
            let i = sym.row_idx()[p];
            row_max[i] = row_max[i].max(val[p].abs());
        }
    }
    let row_scale: Vec<f64> = row_max.into_iter().map(pow2).collect();

    let mut col_scale = vec![0.0f64; n];
    for j in 0..n {
        let mut m = 0.0f64;
        for p in sym.col_range(j) {
            m = m.max((row_scale[sym.row_idx()[p]] * val[p]).abs());
        }
        col_scale[j] = pow2(m);
    }
    for j in 0..n {
        for p in sym.col_range(j) {
            val[p] *= row_scale[sym.row_idx()[p]] * col_scale[j];
        }
    }
    (row_scale, col_scale)
}

fn l2(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-field residual scales frozen at the start of a step. Fields whose
/// initial residual is negligible are measured against the largest field
/// instead of their own noise level.
fn block_scales(map: &BlockIndexMap, r0: &[f64], floor: f64) -> [f64; 8] {
    let norms: Vec<f64> = FIELDS.iter().map(|&f| l2(&r0[map.range(f)])).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let mut scales = [0.0; 8];
    for (i, &n) in norms.iter().enumerate() {
        scales[i] = n.max(1e-3 * max).max(floor);
    }
    scales
}

fn scaled_measure(map: &BlockIndexMap, r: &[f64], scales: &[f64; 8]) -> f64 {
    FIELDS
        .iter()
        .enumerate()
        .map(|(i, &f)| l2(&r[map.range(f)]) / scales[i])
        .fold(0.0, f64::max)
}

/// Worst-case violations of the discrete balance laws, each evaluated
/// independently of the assembled operators.
#[derive(Debug, Clone)]
pub struct ConservationReport {
    /// Cellwise Darcy mass balance.
    pub darcy_mass: f64,
    /// Cellwise fluid momentum balance.
    pub fluid_momentum: f64,
    /// Interface mass balance against each pressure-trace hat.
    pub interface_mass: f64,
    /// Cellwise weak stress symmetry.
    pub weak_symmetry: f64,
}

/// Evaluates the discrete balance laws for the step that produced
/// `state` (so `state.t` is the step's end time and the histories hold
/// the previous step).
pub fn check_conservation(
    sys: &CoupledSystem,
    state: &SystemState,
    prev_p: &[f64],
    prev_eta: &[f64],
    prev_u: &[f64],
) -> ConservationReport {
    let t = state.t;
    let dt = sys.dt;
    let p = &sys.params;
    let x = &state.x;
    let rule = triangle_quadrature(4).unwrap();

    let pp = sys.map.slice(x, Field::PP);
    let up = sys.map.slice(x, Field::UP);
    let eta = sys.map.slice(x, Field::EtaP);
    let mut darcy: f64 = 0.0;
    for cell in 0..sys.mesh_p.n_cells() {
        let area = sys.mesh_p.cell_area(cell);
        let (_, div_up) = crate::fem::space::eval_bdm1_vector(sys.mesh_p, up, cell, [1.0 / 3.0; 2]);
        let div_eta = crate::fem::space::grad_p1_vector(sys.mesh_p, eta, cell).trace();
        let div_eta_prev = crate::fem::space::grad_p1_vector(sys.mesh_p, prev_eta, cell).trace();
        let map = crate::fem::CellMap::new(sys.mesh_p.cell_vertices(cell));
        let mut q_int = 0.0;
        for (q, &w) in rule.weights.iter().enumerate() {
            q_int += w * map.det * (sys.data.q_p)(t, map.to_physical(rule.points[q]));
        }
        let r = p.s0 * (pp[cell] - prev_p[cell]) / dt * area
            + p.alpha * (div_eta - div_eta_prev) / dt * area
            + div_up * area
            - q_int;
        darcy = darcy.max(r.abs());
    }

    let sigma = sys.map.slice(x, Field::SigmaF);
    let u = sys.map.slice(x, Field::UF);
    let q_f = sys.data.q_f.as_ref().map(|f| f(t)).unwrap_or(0.0);
    let mut momentum: f64 = 0.0;
    let mut symmetry: f64 = 0.0;
    for cell in 0..sys.mesh_f.n_cells() {
        let area = sys.mesh_f.cell_area(cell);
        let map = crate::fem::CellMap::new(sys.mesh_f.cell_vertices(cell));
        let (s_mid, div_sigma) =
            crate::fem::space::eval_bdm1_tensor(sys.mesh_f, sigma, cell, [1.0 / 3.0; 2]);
        let mut f_int = Vec2::zeros();
        for (q, &w) in rule.weights.iter().enumerate() {
            f_int += w * map.det * (sys.data.f_f)(t, map.to_physical(rule.points[q]));
        }
        for comp in 0..2 {
            let uc = u[2 * cell + comp];
            let ucp = prev_u[2 * cell + comp];
            let r = p.rho_f * (uc - ucp) / dt * area
                - div_sigma[comp] * area
                - f_int[comp]
                - p.rho_f * q_f * uc * area;
            momentum = momentum.max(r.abs());
        }
        symmetry = symmetry.max(((s_mid[(0, 1)] - s_mid[(1, 0)]) * area).abs());
    }

    let phi = sys.map.slice(x, Field::Phi);
    let mut mass = vec![0.0; sys.map.len(Field::Lambda)];
    for (k, seg) in sys.iface.segs.iter().enumerate() {
        let lam_dofs = segment_dofs(SpaceKind::TraceP1Scalar, seg.seg_p);
        let phi_dofs = segment_dofs(SpaceKind::TraceP1Vector, seg.seg_f);
        let everts = sys.mesh_p.edges[seg.edge_p].vertices;
        for qp in sys.iface.segment_quadrature(k) {
            let mut phi_v = Vec2::zeros();
            let mut deta = Vec2::zeros();
            for lb in 0..2 {
                for a in 0..2 {
                    phi_v[a] += phi[phi_dofs[2 * lb + a]] * qp.hat_phi[lb];
                    let v = everts[lb];
                    deta[a] +=
                        (eta[2 * v + a] - prev_eta[2 * v + a]) / dt * qp.hat_eta[lb];
                }
            }
            let up_n = seg.sign_p
                * (up[2 * seg.edge_p] * qp.nk_p[0] + up[2 * seg.edge_p + 1] * qp.nk_p[1]);
            let jump = phi_v.dot(&seg.n_f) + deta.dot(&seg.n_p) + up_n;
            for lb in 0..2 {
                mass[lam_dofs[lb]] += qp.w * jump * qp.hat_lam[lb];
            }
        }
    }
    let interface_mass = mass.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    ConservationReport { darcy_mass: darcy, fluid_momentum: momentum, interface_mass, weak_symmetry: symmetry }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::space::{interpolate_p0_scalar, interpolate_p1_vector};
    use crate::mesh::{build_rectangle_mesh, merge_trace_partitions, Diagonal, Subdomain};
    use crate::mms::ExactSolution;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    struct Setup {
        mesh_f: TriangleMesh,
        mesh_p: TriangleMesh,
        trace_f: TraceMesh,
        trace_p: TraceMesh,
        merged: TraceMesh,
    }

    fn setup(nf: usize, np: usize, diag_p: Diagonal) -> Setup {
        let mut mesh_f = build_rectangle_mesh(
            Subdomain::Fluid,
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            nf,
            nf,
            Diagonal::Left,
        )
        .unwrap();
        mesh_f
            .tag_boundaries(&[
                (&|p: Vec2| p.y == 0.0, BoundaryTag::Interface),
                (&|p: Vec2| p.y == 1.0, BoundaryTag::FluidDirichlet),
                (&|p: Vec2| p.x == 0.0 || p.x == 1.0, BoundaryTag::FluidNeumann),
            ])
            .unwrap();
        let mut mesh_p = build_rectangle_mesh(
            Subdomain::Poro,
            Vec2::new(0.0, -1.0),
            Vec2::new(1.0, 0.0),
            np,
            np,
            diag_p,
        )
        .unwrap();
        mesh_p
            .tag_boundaries(&[
                (&|p: Vec2| p.y == 0.0, BoundaryTag::Interface),
                (&|p: Vec2| p.y == -1.0, BoundaryTag::PoroDirichlet),
                (&|p: Vec2| p.x == 0.0 || p.x == 1.0, BoundaryTag::PoroNeumann),
            ])
            .unwrap();
        let trace_f = mesh_f.extract_trace_mesh().unwrap();
        let trace_p = mesh_p.extract_trace_mesh().unwrap();
        let merged = merge_trace_partitions(&trace_f, &trace_p).unwrap();
        Setup { mesh_f, mesh_p, trace_f, trace_p, merged }
    }

    fn system<'a>(s: &'a Setup, params: ModelParams, dt: f64, data: ProblemData) -> CoupledSystem<'a> {
        CoupledSystem::new(
            params,
            dt,
            &s.mesh_f,
            &s.mesh_p,
            &s.trace_f,
            &s.trace_p,
            &s.merged,
            data,
        )
        .unwrap()
    }

    fn manufactured_data(params: &ModelParams) -> ProblemData {
        ExactSolution.problem_data(params)
    }

    fn manufactured_state(sys: &CoupledSystem, t: f64) -> Vec<f64> {
        ExactSolution.interpolate_state(
            &sys.map,
            sys.mesh_f,
            sys.mesh_p,
            sys.iface.trace_f,
            sys.iface.trace_p,
            &sys.params,
            t,
        )
    }

    #[test]
    fn block_layout_covers_the_vector_without_gaps() {
        let s = setup(3, 3, Diagonal::Crisscross);
        let map = BlockIndexMap::new(&s.mesh_f, &s.mesh_p, &s.trace_f, &s.trace_p);
        let mut end = 0;
        for f in FIELDS {
            let r = map.range(f);
            assert_eq!(r.start, end);
            assert!(!r.is_empty());
            end = r.end;
        }
        assert_eq!(end, map.total());
        assert_eq!(map.len(Field::Phi), 2 * s.trace_f.n_breakpoints());
        assert_eq!(map.len(Field::Lambda), s.trace_p.n_breakpoints());
    }

    #[test]
    fn jacobian_matches_directional_finite_differences() {
        let s = setup(1, 1, Diagonal::Left);
        let params = ModelParams::unit();
        let sys = system(&s, params.clone(), 0.01, manufactured_data(&params));
        let n = sys.map.total();
        let t = 0.37;

        let mut rng = StdRng::seed_from_u64(5);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        sys.apply_essential(&mut x, t);
        let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..n {
            if sys.is_constrained(i) {
                d[i] = 0.0;
            }
        }

        let hist = SystemState::new(&sys.map, vec![0.0; n], &vec![0.0; sys.map.len(Field::EtaP)], sys.dt);
        let loads = sys.step_loads(t, &hist);
        let r0 = sys.residual(&x, &loads, t);

        let tris = sys.jacobian_triplets(&x, t);
        let mut jd = vec![0.0; n];
        for tr in &tris {
            jd[tr.row] += tr.val * d[tr.col];
        }
        for i in 0..n {
            if sys.is_constrained(i) {
                jd[i] = 0.0;
            }
        }

        let mut errs = Vec::new();
        for eps in [1e-4, 1e-5] {
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
            let rp = sys.residual(&xp, &loads, t);
            let err = (0..n)
                .map(|i| ((rp[i] - r0[i]) / eps - jd[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (8.0..12.0).contains(&ratio),
            "finite difference error should scale linearly in eps: {errs:?} ratio {ratio}"
        );
    }

    #[test]
    fn linear_problem_converges_in_one_iteration_per_step() {
        let s = setup(4, 3, Diagonal::Crisscross);
        let mut params = ModelParams::unit();
        params.convection = false;
        let data = manufactured_data(&params);
        let sys = system(&s, params, 1e-3, data);

        let x0 = manufactured_state(&sys, 0.0);
        let ex = ExactSolution;
        let v0 = interpolate_p1_vector(sys.mesh_p, |p| ex.eta_t(0.0, p));
        let mut state = SystemState::new(&sys.map, x0, &v0, sys.dt);

        let mut solver = NewtonSolver::new(NewtonConfig::default());
        for _ in 0..3 {
            let report = solver.step(&sys, &mut state).unwrap();
            assert_eq!(report.iterations, 1, "linear step should need exactly one solve");
        }
    }

    #[test]
    fn one_step_tracks_the_manufactured_solution() {
        let s = setup(4, 3, Diagonal::Crisscross);
        let params = ModelParams::unit();
        let data = manufactured_data(&params);
        let sys = system(&s, params, 1e-3, data);

        let x0 = manufactured_state(&sys, 0.0);
        let ex = ExactSolution;
        let v0 = interpolate_p1_vector(sys.mesh_p, |p| ex.eta_t(0.0, p));
        let mut state = SystemState::new(&sys.map, x0, &v0, sys.dt);

        let mut solver = NewtonSolver::new(NewtonConfig::default());
        let report = solver.step(&sys, &mut state).unwrap();
        assert!(report.iterations <= 4, "took {} iterations", report.iterations);

        let t = state.t;
        let exact = manufactured_state(&sys, t);
        let err_u = sys
            .map
            .slice(&state.x, Field::UF)
            .iter()
            .zip(sys.map.slice(&exact, Field::UF))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err_u < 0.5, "velocity drifted from the manufactured solution: {err_u}");
        let err_p = sys
            .map
            .slice(&state.x, Field::PP)
            .iter()
            .zip(sys.map.slice(&exact, Field::PP))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err_p < 0.1, "pressure drifted from the manufactured solution: {err_p}");
    }

    #[test]
    fn solved_step_satisfies_the_discrete_balance_laws() {
        let s = setup(4, 3, Diagonal::Crisscross);
        let params = ModelParams::unit();
        let data = manufactured_data(&params);
        let sys = system(&s, params, 1e-3, data);

        let x0 = manufactured_state(&sys, 0.0);
        let ex = ExactSolution;
        let v0 = interpolate_p1_vector(sys.mesh_p, |p| ex.eta_t(0.0, p));
        let mut state = SystemState::new(&sys.map, x0, &v0, sys.dt);
        let prev_p = state.p_prev.clone();
        let prev_eta = state.eta_prev.clone();
        let prev_u = state.u_prev.clone();

        let mut solver = NewtonSolver::new(NewtonConfig::default());
        solver.step(&sys, &mut state).unwrap();

        let report = check_conservation(&sys, &state, &prev_p, &prev_eta, &prev_u);
        let tol = 1e-7;
        assert!(report.darcy_mass < tol, "darcy mass violation {}", report.darcy_mass);
        assert!(report.fluid_momentum < tol, "momentum violation {}", report.fluid_momentum);
        assert!(report.interface_mass < tol, "interface violation {}", report.interface_mass);
        assert!(report.weak_symmetry < tol, "symmetry violation {}", report.weak_symmetry);
    }

    #[test]
    fn zero_data_stays_at_rest() {
        let s = setup(3, 3, Diagonal::Crisscross);
        let mut params = ModelParams::unit();
        params.convection = false;
        let sys = system(&s, params, 0.1, ProblemData::zero());
        let n = sys.map.total();
        let mut state =
            SystemState::new(&sys.map, vec![0.0; n], &vec![0.0; sys.map.len(Field::EtaP)], sys.dt);
        let mut solver = NewtonSolver::new(NewtonConfig::default());
        let report = solver.step(&sys, &mut state).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(state.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_decays_without_forcing() {
        let s = setup(3, 3, Diagonal::Crisscross);
        let mut params = ModelParams::unit();
        params.convection = false;
        let sys = system(&s, params, 0.1, ProblemData::zero());
        let n = sys.map.total();

        let mut rng = StdRng::seed_from_u64(31);
        let mut state =
            SystemState::new(&sys.map, vec![0.0; n], &vec![0.0; sys.map.len(Field::EtaP)], sys.dt);
        state.u_prev.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        state.p_prev.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let off = sys.map.offset(Field::EtaP);
        for i in 0..state.eta_prev.len() {
            if !sys.is_constrained(off + i) {
                state.eta_prev[i] = rng.random_range(-0.1..0.1);
            }
        }
        state.eta_prev2 = state.eta_prev.clone();

        let dt = sys.dt;
        let eta_dot0: Vec<f64> = state
            .eta_prev
            .iter()
            .zip(&state.eta_prev2)
            .map(|(a, b)| (a - b) / dt)
            .collect();
        let mut energy = sys.energy(&state.u_prev, &state.p_prev, &state.eta_prev, &eta_dot0);

        let mut solver = NewtonSolver::new(NewtonConfig::default());
        for _ in 0..10 {
            let eta_before = state.eta_prev.clone();
            solver.step(&sys, &mut state).unwrap();
            let eta = sys.map.slice(&state.x, Field::EtaP);
            let eta_dot: Vec<f64> =
                eta.iter().zip(&eta_before).map(|(a, b)| (a - b) / dt).collect();
            let e = sys.energy(
                sys.map.slice(&state.x, Field::UF),
                sys.map.slice(&state.x, Field::PP),
                eta,
                &eta_dot,
            );
            assert!(
                e <= energy + 1e-12 * energy.abs().max(1.0),
                "energy grew from {energy} to {e}"
            );
            energy = e;
        }
    }

    #[test]
    fn recovered_pressure_matches_the_exact_field() {
        let s = setup(8, 8, Diagonal::Crisscross);
        let params = ModelParams::unit();
        let data = manufactured_data(&params);
        let sys = system(&s, params, 1e-3, data);
        let ex = ExactSolution;
        let t = 0.3;
        let x = manufactured_state(&sys, t);
        let p = sys.recover_fluid_pressure(&x, t);
        let exact = interpolate_p0_scalar(sys.mesh_f, |pt| ex.p_f(t, pt));
        let max_err = p
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 0.15, "recovered pressure off by {max_err}");
    }

    #[test]
    fn essential_values_reproduce_the_interpolated_data() {
        let s = setup(4, 3, Diagonal::Crisscross);
        let params = ModelParams::unit();
        let data = manufactured_data(&params);
        let sys = system(&s, params, 1e-3, data);
        let t = 0.7;
        let exact = manufactured_state(&sys, t);
        for (i, g) in sys.essential_values(t) {
            assert_relative_eq!(g, exact[i], epsilon = 1e-12);
        }
    }
}
