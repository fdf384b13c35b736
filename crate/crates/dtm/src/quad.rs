//! Quadrature rules on the reference simplex.
//!
//! 1D rules are Gauss-Legendre on the unit segment. Triangle rules are built
//! by a Duffy (collapsed tensor-product) transform of Gauss-Legendre rules,
//! which keeps all weights positive and is exact for polynomials up to the
//! declared degree; point counts are slightly above optimal symmetric rules,
//! which is irrelevant at the mesh sizes used here.

use crate::{Error, Result};

/// Maximum supported exactness degree.
pub const MAX_DEGREE: usize = 10;

/// Quadrature rule on the reference simplex (unit segment or unit triangle
/// `{X : X1, X2 >= 0, X1 + X2 <= 1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    /// Spatial dimension (1 or 2).
    pub dim: usize,
    /// Declared polynomial exactness degree.
    pub degree: usize,
    /// Quadrature points; the second coordinate is zero in 1D.
    pub points: Vec<[f64; 2]>,
    /// Positive weights summing to the simplex measure (1 or 1/2).
    pub weights: Vec<f64>,
}

impl QuadRule {
    /// Number of points.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// True when the rule is empty (never for constructed rules).
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Gauss-Legendre nodes and weights on [0,1], exact through degree `2n-1`.
///
/// Nodes are found by Newton iteration on the Legendre polynomial with the
/// standard Chebyshev initial guess; deterministic to the last bit.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Initial guess on [-1,1].
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        // Map [-1,1] -> [0,1]: weight picks up the factor 1/2.
        nodes[i] = 0.5 * (x + 1.0);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Legendre polynomial P_n and derivative at `x` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Quadrature rule exact for polynomials of total degree `degree`.
pub fn gauss_rule(dim: usize, degree: usize) -> Result<QuadRule> {
    if degree > MAX_DEGREE {
        return Err(Error::Config(format!(
            "gauss_rule: degree {degree} exceeds supported maximum {MAX_DEGREE}"
        )));
    }
    match dim {
        1 => {
            let n = degree / 2 + 1; // 2n-1 >= degree
            let (nodes, weights) = gauss_legendre_unit(n);
            Ok(QuadRule {
                dim: 1,
                degree,
                points: nodes.iter().map(|&x| [x, 0.0]).collect(),
                weights,
            })
        }
        2 => {
            // Duffy transform (x, y) = (u, v(1-u)), Jacobian (1-u).
            // A total-degree-d integrand becomes degree <= d+1 in u and
            // <= d in v, fixing the tensor factors below.
            let nu = (degree + 1) / 2 + 1; // 2*nu-1 >= degree+1
            let nv = degree / 2 + 1; // 2*nv-1 >= degree
            let (un, uw) = gauss_legendre_unit(nu);
            let (vn, vw) = gauss_legendre_unit(nv);
            let mut points = Vec::with_capacity(nu * nv);
            let mut weights = Vec::with_capacity(nu * nv);
            for (u, wu) in un.iter().zip(&uw) {
                for (v, wv) in vn.iter().zip(&vw) {
                    points.push([*u, v * (1.0 - u)]);
                    weights.push(wu * wv * (1.0 - u));
                }
            }
            Ok(QuadRule { dim: 2, degree, points, weights })
        }
        _ => Err(Error::Config(format!("gauss_rule: unsupported dimension {dim}"))),
    }
}
