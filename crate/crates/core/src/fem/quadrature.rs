//! Quadrature rules: symmetric positive-weight rules on the reference
//! triangle {x, y >= 0, x + y <= 1} and Gauss-Legendre rules on [0, 1].

use crate::{Error, Result};

/// Points (reference coordinates) and weights; weights sum to the reference
/// measure (1/2 for the triangle, 1 for the unit interval).
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LineRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Rule exact for polynomials of total degree <= `order` on the reference
/// triangle. Orders up to 6 are available; all weights are positive.
pub fn triangle_quadrature(order: usize) -> Result<TriangleRule> {
    // Orbit notation: (a) is the centroid, (a, a, 1-2a) a 3-point orbit of
    // barycentric permutations, (a, b, 1-a-b) a 6-point orbit. Weights are
    // given per point, normalized to sum to 1, and scaled by the area 1/2.
    let orbits: &[(f64, Option<f64>, f64)] = match order {
        0 | 1 => &[(1.0 / 3.0, None, 1.0)],
        2 => &[(1.0 / 6.0, None, 1.0 / 3.0)],
        3 | 4 => &[
            (0.445948490915965, None, 0.223381589678011),
            (0.091576213509771, None, 0.109951743655322),
        ],
        5 => &[
            (1.0 / 3.0, None, 0.225),
            (0.470142064105115, None, 0.132394152788506),
            (0.101286507323456, None, 0.125939180544827),
        ],
        6 => &[
            (0.063089014491502, None, 0.050844906370207),
            (0.249286745170910, None, 0.116786275726379),
            (0.310352451033785, Some(0.053145049844816), 0.082851075618374),
        ],
        _ => {
            return Err(Error::Fem(format!(
                "no triangle quadrature of order {order} (supported: 0..=6)"
            )))
        }
    };

    let mut points = Vec::new();
    let mut weights = Vec::new();
    for &(a, b, w) in orbits {
        match b {
            None if (a - 1.0 / 3.0).abs() < 1e-14 => {
                points.push([a, a]);
                weights.push(0.5 * w);
            }
            None => {
                let c = 1.0 - 2.0 * a;
                for p in [[a, a], [c, a], [a, c]] {
                    points.push(p);
                    weights.push(0.5 * w);
                }
            }
            Some(b) => {
                let c = 1.0 - a - b;
                for p in [[a, b], [b, a], [a, c], [c, a], [b, c], [c, b]] {
                    points.push(p);
                    weights.push(0.5 * w);
                }
            }
        }
    }
    Ok(TriangleRule { points, weights })
}

/// Gauss-Legendre rule on [0, 1] exact for polynomials of degree <= `order`
/// (orders up to 7).
pub fn gauss1d(order: usize) -> Result<LineRule> {
    let n = order / 2 + 1;
    // Nodes/weights on [-1, 1], mapped below.
    let (nodes, weights): (&[f64], &[f64]) = match n {
        1 => (&[0.0], &[2.0]),
        2 => (&[-0.5773502691896258, 0.5773502691896258], &[1.0, 1.0]),
        3 => (
            &[-0.7745966692414834, 0.0, 0.7745966692414834],
            &[5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0],
        ),
        4 => (
            &[
                -0.8611363115940526,
                -0.3399810435848563,
                0.3399810435848563,
                0.8611363115940526,
            ],
            &[
                0.3478548451374538,
                0.6521451548625461,
                0.6521451548625461,
                0.3478548451374538,
            ],
        ),
        _ => {
            return Err(Error::Fem(format!(
                "no 1d quadrature of order {order} (supported: 0..=7)"
            )))
        }
    };
    Ok(LineRule {
        points: nodes.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        weights: weights.iter().map(|w| 0.5 * w).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact integral of x^p y^q over the reference triangle: p! q! / (p+q+2)!.
    fn monomial_integral(p: u32, q: u32) -> f64 {
        let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>().max(1.0);
        fact(p) * fact(q) / fact(p + q + 2)
    }

    #[test]
    fn triangle_rules_integrate_monomials_exactly() {
        for order in 0..=6 {
            let rule = triangle_quadrature(order).unwrap();
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            let total: f64 = rule.weights.iter().sum();
            assert!((total - 0.5).abs() < 1e-14);
            for p in 0..=order as u32 {
                for q in 0..=(order as u32 - p) {
                    let quad: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(pt, w)| w * pt[0].powi(p as i32) * pt[1].powi(q as i32))
                        .sum();
                    let exact = monomial_integral(p, q);
                    assert!(
                        (quad - exact).abs() < 1e-14,
                        "order {order} fails on x^{p} y^{q}: {quad} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn line_rules_integrate_monomials_exactly() {
        for order in 0..=7 {
            let rule = gauss1d(order).unwrap();
            for p in 0..=order as u32 {
                let quad: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * x.powi(p as i32))
                    .sum();
                let exact = 1.0 / (p as f64 + 1.0);
                assert!(
                    (quad - exact).abs() < 1e-14,
                    "order {order} fails on x^{p}: {quad} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn unsupported_orders_are_rejected() {
        assert!(triangle_quadrature(7).is_err());
        assert!(gauss1d(8).is_err());
    }

    proptest! {
        /// Affine reproduction on arbitrary linear functions: a quadrature of
        /// any order integrates c0 + c1 x + c2 y to c0/2 + (c1 + c2)/6.
        #[test]
        fn triangle_rules_integrate_linears(
            order in 0usize..=6,
            c0 in -10.0f64..10.0,
            c1 in -10.0f64..10.0,
            c2 in -10.0f64..10.0,
        ) {
            let rule = triangle_quadrature(order).unwrap();
            let quad: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(p, w)| w * (c0 + c1 * p[0] + c2 * p[1]))
                .sum();
            let exact = 0.5 * c0 + (c1 + c2) / 6.0;
            prop_assert!((quad - exact).abs() < 1e-12);
        }
    }
}
