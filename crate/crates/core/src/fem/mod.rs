//! Finite element infrastructure: quadrature rules, the BDM1 element with
//! its Piola transform, and discrete function spaces with interpolation.

pub mod bdm;
pub mod quadrature;
pub mod space;

pub use bdm::{Bdm1CellBasis, CellMap};
pub use quadrature::{gauss1d, triangle_quadrature, LineRule, TriangleRule};
pub use space::SpaceKind;
