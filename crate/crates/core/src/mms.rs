//! Manufactured smooth solution and error measurement for convergence runs.
//!
//! The closed-form fields live on the stacked unit squares with the free
//! flow on top: they satisfy the interface conditions exactly (the fluid
//! velocity equals the skeleton velocity pointwise, and both share the
//! normal stress balance), so no extra interface source terms appear.
//! All time dependence is smooth and bounded.

use crate::fem::bdm::CellMap;
use crate::fem::{gauss1d, space, triangle_quadrature};
use crate::forms::ModelParams;
use crate::mesh::{TraceMesh, TriangleMesh};
use crate::{Mat2, Vec2};
use std::f64::consts::PI;

/// The reference fields. Velocities derive from the divergence-carrying
/// profile `w`; the two pressures share a spatial shape so the Darcy
/// pressure is the fluid pressure minus a time-dependent shift.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactSolution;

impl ExactSolution {
    fn w(p: Vec2) -> Vec2 {
        Vec2::new(-3.0 * p.x + p.y.cos(), p.y + 1.0)
    }

    fn grad_w(p: Vec2) -> Mat2 {
        Mat2::new(-3.0, -p.y.sin(), 0.0, 1.0)
    }

    pub fn u_f(&self, t: f64, p: Vec2) -> Vec2 {
        PI * (PI * t).cos() * Self::w(p)
    }

    pub fn u_f_t(&self, t: f64, p: Vec2) -> Vec2 {
        -PI * PI * (PI * t).sin() * Self::w(p)
    }

    pub fn grad_u_f(&self, t: f64, p: Vec2) -> Mat2 {
        PI * (PI * t).cos() * Self::grad_w(p)
    }

    /// Row-wise divergence of the symmetric gradient of the velocity.
    pub fn div_e_u_f(&self, t: f64, p: Vec2) -> Vec2 {
        PI * (PI * t).cos() * Vec2::new(-0.5 * p.y.cos(), 0.0)
    }

    /// The velocity is not solenoidal; its divergence is spatially constant.
    pub fn q_f(&self, t: f64) -> f64 {
        -2.0 * PI * (PI * t).cos()
    }

    fn p_shape(&self, t: f64, p: Vec2) -> f64 {
        t.exp() * (PI * p.x).sin() * (0.5 * PI * p.y).cos()
    }

    pub fn p_f(&self, t: f64, p: Vec2) -> f64 {
        self.p_shape(t, p) + 2.0 * PI * (PI * t).cos()
    }

    pub fn grad_p_f(&self, t: f64, p: Vec2) -> Vec2 {
        self.grad_p_p(t, p)
    }

    pub fn p_p(&self, t: f64, p: Vec2) -> f64 {
        self.p_shape(t, p)
    }

    pub fn p_p_t(&self, t: f64, p: Vec2) -> f64 {
        self.p_shape(t, p)
    }

    pub fn grad_p_p(&self, t: f64, p: Vec2) -> Vec2 {
        t.exp()
            * Vec2::new(
                PI * (PI * p.x).cos() * (0.5 * PI * p.y).cos(),
                -0.5 * PI * (PI * p.x).sin() * (0.5 * PI * p.y).sin(),
            )
    }

    pub fn hess_p_p(&self, t: f64, p: Vec2) -> Mat2 {
        let (sx, cx) = (PI * p.x).sin_cos();
        let (sy, cy) = (0.5 * PI * p.y).sin_cos();
        t.exp()
            * Mat2::new(
                -PI * PI * sx * cy,
                -0.5 * PI * PI * cx * sy,
                -0.5 * PI * PI * cx * sy,
                -0.25 * PI * PI * sx * cy,
            )
    }

    pub fn eta(&self, t: f64, p: Vec2) -> Vec2 {
        (PI * t).sin() * Self::w(p)
    }

    /// Skeleton velocity; equals the fluid velocity everywhere, which is
    /// what makes the interface conditions exact.
    pub fn eta_t(&self, t: f64, p: Vec2) -> Vec2 {
        PI * (PI * t).cos() * Self::w(p)
    }

    pub fn eta_tt(&self, t: f64, p: Vec2) -> Vec2 {
        -PI * PI * (PI * t).sin() * Self::w(p)
    }

    pub fn grad_eta(&self, t: f64, p: Vec2) -> Mat2 {
        (PI * t).sin() * Self::grad_w(p)
    }

    pub fn grad_eta_t(&self, t: f64, p: Vec2) -> Mat2 {
        PI * (PI * t).cos() * Self::grad_w(p)
    }

    pub fn div_e_eta(&self, t: f64, p: Vec2) -> Vec2 {
        (PI * t).sin() * Vec2::new(-0.5 * p.y.cos(), 0.0)
    }

    /// The displacement divergence is spatially constant, so this vanishes.
    pub fn grad_div_eta(&self, _t: f64, _p: Vec2) -> Vec2 {
        Vec2::zeros()
    }

    pub fn u_p(&self, params: &ModelParams, t: f64, p: Vec2) -> Vec2 {
        -(params.k * self.grad_p_p(t, p)) / params.mu
    }

    pub fn div_u_p(&self, params: &ModelParams, t: f64, p: Vec2) -> f64 {
        -params.k.component_mul(&self.hess_p_p(t, p)).sum() / params.mu
    }

    /// Off-diagonal entry of the velocity curl tensor (∇u − ∇uᵀ)/2.
    pub fn gamma_f(&self, t: f64, p: Vec2) -> f64 {
        let g = self.grad_u_f(t, p);
        0.5 * (g.m12 - g.m21)
    }

    pub fn sigma_f(&self, params: &ModelParams, t: f64, p: Vec2) -> Mat2 {
        let g = self.grad_u_f(t, p);
        let e = 0.5 * (g + g.transpose());
        let mut s = 2.0 * params.mu * e - self.p_f(t, p) * Mat2::identity();
        if params.convection {
            let u = self.u_f(t, p);
            s -= params.rho_f * u * u.transpose();
        }
        s
    }

    pub fn div_sigma_f(&self, params: &ModelParams, t: f64, p: Vec2) -> Vec2 {
        let mut d = 2.0 * params.mu * self.div_e_u_f(t, p) - self.grad_p_f(t, p);
        if params.convection {
            let u = self.u_f(t, p);
            d -= params.rho_f * (self.grad_u_f(t, p) * u + self.q_f(t) * u);
        }
        d
    }

    /// Momentum source.
    pub fn f_f(&self, params: &ModelParams, t: f64, p: Vec2) -> Vec2 {
        let mut f = params.rho_f * self.u_f_t(t, p) + self.grad_p_f(t, p)
            - 2.0 * params.mu * self.div_e_u_f(t, p);
        if params.convection {
            f += params.rho_f * self.grad_u_f(t, p) * self.u_f(t, p);
        }
        f
    }

    /// Elasticity source.
    pub fn f_p(&self, params: &ModelParams, t: f64, p: Vec2) -> Vec2 {
        params.rho_p * self.eta_tt(t, p) - 2.0 * params.mu_p * self.div_e_eta(t, p)
            - params.lambda_p * self.grad_div_eta(t, p)
            + params.alpha * self.grad_p_p(t, p)
    }

    /// Mass source of the Darcy flow.
    pub fn q_p(&self, params: &ModelParams, t: f64, p: Vec2) -> f64 {
        params.s0 * self.p_p_t(t, p) + params.alpha * self.grad_eta_t(t, p).trace()
            + self.div_u_p(params, t, p)
    }
}

/// sqrt of the squared L2 norm of the tensor error plus the squared L4/3
/// norm of its row-wise divergence error.
pub fn err_sigma(
    mesh: &TriangleMesh,
    coeffs: &[f64],
    exact: impl Fn(Vec2) -> Mat2,
    exact_div: impl Fn(Vec2) -> Vec2,
) -> f64 {
    let rule = triangle_quadrature(5).unwrap();
    let mut l2_sq = 0.0;
    let mut l43 = 0.0;
    for cell in 0..mesh.n_cells() {
        let map = CellMap::new(mesh.cell_vertices(cell));
        for (rp, &w) in rule.points.iter().zip(&rule.weights) {
            let phys = map.to_physical(*rp);
            let (s, d) = space::eval_bdm1_tensor(mesh, coeffs, cell, *rp);
            let es = s - exact(phys);
            let ed = d - exact_div(phys);
            l2_sq += w * map.det * es.norm_squared();
            l43 += w * map.det * ed.norm().powf(4.0 / 3.0);
        }
    }
    (l2_sq + l43.powf(1.5)).sqrt()
}

/// L4 norm of the error of a piecewise constant vector field.
pub fn err_l4_vec_p0(mesh: &TriangleMesh, coeffs: &[f64], exact: impl Fn(Vec2) -> Vec2) -> f64 {
    let rule = triangle_quadrature(5).unwrap();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let map = CellMap::new(mesh.cell_vertices(cell));
        let v = Vec2::new(coeffs[2 * cell], coeffs[2 * cell + 1]);
        for (rp, &w) in rule.points.iter().zip(&rule.weights) {
            let e = v - exact(map.to_physical(*rp));
            acc += w * map.det * e.norm_squared().powi(2);
        }
    }
    acc.powf(0.25)
}

/// L2 norm of the error of a piecewise constant skew tensor against the
/// exact off-diagonal entry; the Frobenius norm doubles the entry's square.
pub fn err_l2_skew_p0(mesh: &TriangleMesh, coeffs: &[f64], exact: impl Fn(Vec2) -> f64) -> f64 {
    let rule = triangle_quadrature(5).unwrap();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let map = CellMap::new(mesh.cell_vertices(cell));
        for (rp, &w) in rule.points.iter().zip(&rule.weights) {
            let e = coeffs[cell] - exact(map.to_physical(*rp));
            acc += 2.0 * w * map.det * e * e;
        }
    }
    acc.sqrt()
}

/// L2 norm of the error of cellwise constant values of a scalar field.
pub fn err_l2_scalar_p0(mesh: &TriangleMesh, values: &[f64], exact: impl Fn(Vec2) -> f64) -> f64 {
    let rule = triangle_quadrature(5).unwrap();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let map = CellMap::new(mesh.cell_vertices(cell));
        for (rp, &w) in rule.points.iter().zip(&rule.weights) {
            let e = values[cell] - exact(map.to_physical(*rp));
            acc += w * map.det * e * e;
        }
    }
    acc.sqrt()
}

/// H(div) norm of the error of a BDM1 vector field.
pub fn err_hdiv_vec_bdm(
    mesh: &TriangleMesh,
    coeffs: &[f64],
    exact: impl Fn(Vec2) -> Vec2,
    exact_div: impl Fn(Vec2) -> f64,
) -> f64 {
    let rule = triangle_quadrature(5).unwrap();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let map = CellMap::new(mesh.cell_vertices(cell));
        for (rp, &w) in rule.points.iter().zip(&rule.weights) {
            let phys = map.to_physical(*rp);
            let (v, d) = space::eval_bdm1_vector(mesh, coeffs, cell, *rp);
            let ev = v - exact(phys);
            let ed = d - exact_div(phys);
            acc += w * map.det * (ev.norm_squared() + ed * ed);
        }
    }
    acc.sqrt()
}

/// H1 norm of the error of a continuous piecewise linear vector field.
pub fn err_h1_vec_p1(
    mesh: &TriangleMesh,
    coeffs: &[f64],
    exact: impl Fn(Vec2) -> Vec2,
    exact_grad: impl Fn(Vec2) -> Mat2,
) -> f64 {
    let rule = triangle_quadrature(5).unwrap();
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        let map = CellMap::new(mesh.cell_vertices(cell));
        let gh = space::grad_p1_vector(mesh, coeffs, cell);
        for (rp, &w) in rule.points.iter().zip(&rule.weights) {
            let phys = map.to_physical(*rp);
            let ev = space::eval_p1_vector(mesh, coeffs, cell, *rp) - exact(phys);
            let eg = gh - exact_grad(phys);
            acc += w * map.det * (ev.norm_squared() + eg.norm_squared());
        }
    }
    acc.sqrt()
}

fn trace_norms(
    trace: &TraceMesh,
    value_err: impl Fn(usize, f64, Vec2) -> f64,
    deriv_err: impl Fn(usize, f64, Vec2) -> f64,
) -> f64 {
    let rule = gauss1d(5).unwrap();
    let mut l2_sq = 0.0;
    let mut d_sq = 0.0;
    for k in 0..trace.n_segments() {
        let len = trace.segment_length(k);
        for (&t, &w) in rule.points.iter().zip(&rule.weights) {
            let s = trace.arc[k] + t * len;
            let p = trace.point_at(s);
            let ev = value_err(k, t, p);
            let ed = deriv_err(k, t, p);
            l2_sq += w * len * ev;
            d_sq += w * len * ed;
        }
    }
    let l2 = l2_sq.sqrt();
    let h1 = (l2_sq + d_sq).sqrt();
    (l2 * h1).sqrt()
}

/// Interpolated fractional-order error surrogate for a piecewise linear
/// scalar multiplier on the trace: the geometric mean of its L2 and H1
/// errors along the interface.
pub fn err_trace_scalar(
    trace: &TraceMesh,
    coeffs: &[f64],
    exact: impl Fn(Vec2) -> f64,
    exact_grad: impl Fn(Vec2) -> Vec2,
) -> f64 {
    trace_norms(
        trace,
        |k, t, p| {
            let v = (1.0 - t) * coeffs[k] + t * coeffs[k + 1];
            let e = v - exact(p);
            e * e
        },
        |k, _t, p| {
            let tangent = (trace.points[k + 1] - trace.points[k]) / trace.segment_length(k);
            let dh = (coeffs[k + 1] - coeffs[k]) / trace.segment_length(k);
            let e = dh - exact_grad(p).dot(&tangent);
            e * e
        },
    )
}

/// Same surrogate for a piecewise linear vector multiplier.
pub fn err_trace_vector(
    trace: &TraceMesh,
    coeffs: &[f64],
    exact: impl Fn(Vec2) -> Vec2,
    exact_grad: impl Fn(Vec2) -> Mat2,
) -> f64 {
    let at = |k: usize| Vec2::new(coeffs[2 * k], coeffs[2 * k + 1]);
    trace_norms(
        trace,
        |k, t, p| {
            let v = (1.0 - t) * at(k) + t * at(k + 1);
            (v - exact(p)).norm_squared()
        },
        |k, _t, p| {
            let tangent = (trace.points[k + 1] - trace.points[k]) / trace.segment_length(k);
            let dh = (at(k + 1) - at(k)) / trace.segment_length(k);
            (dh - exact_grad(p) * tangent).norm_squared()
        },
    )
}

/// Accumulates one error's time history into the discrete-in-time L2 and
/// max norms over the steps after the initial time.
#[derive(Debug, Clone, Copy)]
pub struct TimeAccumulator {
    dt: f64,
    l2_sq: f64,
    linf: f64,
}

impl TimeAccumulator {
    pub fn new(dt: f64) -> Self {
        TimeAccumulator { dt, l2_sq: 0.0, linf: 0.0 }
    }

    pub fn push(&mut self, value: f64) {
        self.l2_sq += self.dt * value * value;
        self.linf = self.linf.max(value);
    }

    pub fn l2(&self) -> f64 {
        self.l2_sq.sqrt()
    }

    pub fn linf(&self) -> f64 {
        self.linf
    }
}

/// Errors of one refinement level, already reduced over time.
#[derive(Debug, Clone, Default)]
pub struct LevelErrors {
    pub h_f: f64,
    pub h_p: f64,
    pub h_tf: f64,
    pub h_tp: f64,
    pub sigma_f: f64,
    pub u_f: f64,
    pub gamma_f: f64,
    pub p_f: f64,
    pub u_p: f64,
    pub p_p: f64,
    pub eta_p: f64,
    pub phi: f64,
    pub lambda: f64,
    pub avg_newton_iters: f64,
}

/// Observed orders between consecutive levels: log of the error ratio over
/// log of the mesh ratio. One entry fewer than levels.
pub fn convergence_rates(errors: &[f64], hs: &[f64]) -> Vec<f64> {
    assert_eq!(errors.len(), hs.len());
    errors
        .windows(2)
        .zip(hs.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

impl ExactSolution {
    /// Bundles the reference fields into the source terms and boundary
    /// data the coupled system consumes.
    pub fn problem_data(&self, params: &ModelParams) -> crate::system::ProblemData {
        let ex = *self;
        let p1 = params.clone();
        let p2 = params.clone();
        let p3 = params.clone();
        let p4 = params.clone();
        let p5 = params.clone();
        crate::system::ProblemData {
            f_f: Box::new(move |t, p| ex.f_f(&p1, t, p)),
            f_p: Box::new(move |t, p| ex.f_p(&p2, t, p)),
            q_p: Box::new(move |t, p| ex.q_p(&p3, t, p)),
            q_f: Some(Box::new(move |t| ex.q_f(t))),
            fluid_velocity: Box::new(move |t, p| ex.u_f(t, p)),
            poro_pressure: Box::new(move |t, p| ex.p_p(t, p)),
            traction: Box::new(move |t, p, n| ex.sigma_f(&p4, t, p) * n),
            normal_flux: Box::new(move |t, p, n| ex.u_p(&p5, t, p).dot(&n)),
            displacement: Box::new(move |t, p| ex.eta(t, p)),
        }
    }

    /// Interpolates every field of the reference solution at time `t`
    /// into a monolithic vector with the given block layout.
    pub fn interpolate_state(
        &self,
        map: &crate::system::BlockIndexMap,
        mesh_f: &TriangleMesh,
        mesh_p: &TriangleMesh,
        trace_f: &TraceMesh,
        trace_p: &TraceMesh,
        params: &ModelParams,
        t: f64,
    ) -> Vec<f64> {
        use crate::system::Field;
        let mut x = vec![0.0; map.total()];
        let mut put = |field: Field, vals: Vec<f64>| {
            x[map.range(field)].copy_from_slice(&vals);
        };
        put(Field::SigmaF, space::interpolate_bdm1_tensor(mesh_f, |p| self.sigma_f(params, t, p)));
        put(Field::UP, space::interpolate_bdm1_vector(mesh_p, |p| self.u_p(params, t, p)));
        put(Field::EtaP, space::interpolate_p1_vector(mesh_p, |p| self.eta(t, p)));
        put(Field::UF, space::interpolate_p0_vector(mesh_f, |p| self.u_f(t, p)));
        put(Field::PP, space::interpolate_p0_scalar(mesh_p, |p| self.p_p(t, p)));
        put(Field::GammaF, space::interpolate_p0_skew(mesh_f, |p| self.gamma_f(t, p)));
        put(Field::Phi, space::interpolate_trace_vector(trace_f, |p| self.u_f(t, p)));
        put(Field::Lambda, space::interpolate_trace_scalar(trace_p, |p| self.p_p(t, p)));
        x
    }
}
