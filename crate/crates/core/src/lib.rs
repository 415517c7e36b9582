//! Mixed finite element solver for time-dependent coupled free-fluid /
//! poroelastic flow in two dimensions.
//!
//! The free-fluid region carries a pseudostress-velocity-vorticity
//! formulation of the Navier-Stokes equations. The porous region carries the
//! Biot system as displacement-based elasticity plus a mixed Darcy pair. The
//! two are coupled across an interface polyline by Lagrange multipliers (the
//! trace of the fluid velocity and the trace of the Darcy pressure), so the
//! subdomain grids are allowed to disagree along the interface.
//!
//! Module layout:
//! - [`mesh`]: structured triangle meshes, boundary tagging, interface traces
//! - [`fem`]: reference elements, quadrature, function spaces, interpolation
//! - [`forms`]: model parameters and assembly of all bilinear/load operators
//! - [`system`]: monolithic residual/Jacobian, Newton, time stepping
//! - [`mms`]: manufactured solutions, error norms, convergence rates
//! - [`scenarios`]: the convergence study and the filter flow drivers, I/O

pub mod fem;
pub mod forms;
pub mod mesh;
pub mod mms;
pub mod scenarios;
pub mod system;

/// 2D point or vector.
pub type Vec2 = nalgebra::Vector2<f64>;
/// 2x2 matrix (row-major constructors: `Mat2::new(m11, m12, m21, m22)`).
pub type Mat2 = nalgebra::Matrix2<f64>;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Invalid mesh input or failed mesh operation.
    Mesh(String),
    /// Invalid function-space or quadrature request.
    Fem(String),
    /// Linear solver failure (singular or structurally deficient matrix).
    Solver(String),
    /// Newton iteration failed to converge.
    Nonconvergence(String),
    /// Invalid configuration input.
    Config(String),
    /// File I/O failure.
    Io(std::io::Error),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Mesh(msg) => write!(f, "mesh error: {msg}"),
            Error::Fem(msg) => write!(f, "fem error: {msg}"),
            Error::Solver(msg) => write!(f, "solver error: {msg}"),
            Error::Nonconvergence(msg) => write!(f, "nonlinear solve failed: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
