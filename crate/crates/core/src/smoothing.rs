//! Second-difference roughness penalty and the operator `A = I + lambda D^T D`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_function;

/// Boundary handling of the difference operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Wraps around the grid (circular time, e.g. a 24-hour day).
    #[default]
    Periodic,
    /// No wraparound; `(a - 2) x a` operator.
    Open,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "periodic" => Ok(Boundary::Periodic),
            "open" => Ok(Boundary::Open),
            other => Err(Error::InvalidParameter(format!(
                "unknown boundary `{other}`"
            ))),
        }
    }
}

/// Second-difference matrix on a uniform grid of length `a`.
///
/// Periodic: `a x a` with 2 on the diagonal and -1 on the sub/super diagonals
/// and in the two corners. Open: `(a - 2) x a` with rows `(-1, 2, -1)`.
pub fn second_difference(a: usize, boundary: Boundary) -> Result<DMatrix<f64>> {
    if a < 3 {
        return Err(Error::InvalidParameter(format!(
            "difference grid needs at least 3 points, got {a}"
        )));
    }
    Ok(match boundary {
        Boundary::Periodic => DMatrix::from_fn(a, a, |i, j| {
            if i == j {
                2.0
            } else if (i + 1) % a == j || (j + 1) % a == i {
                -1.0
            } else {
                0.0
            }
        }),
        Boundary::Open => DMatrix::from_fn(a - 2, a, |i, j| match j.wrapping_sub(i) {
            0 | 2 => -1.0,
            1 => 2.0,
            _ => 0.0,
        }),
    })
}

/// `A = I + lambda D^T D` with cached symmetric square-root factors.
#[derive(Debug, Clone)]
pub struct SmoothingOperator {
    d: DMatrix<f64>,
    dtd: DMatrix<f64>,
    lambda: f64,
    a_mat: DMatrix<f64>,
    a_sqrt: DMatrix<f64>,
    a_inv_sqrt: DMatrix<f64>,
    boundary: Boundary,
}

/// Eigenvalues of A below this are clamped to 1 before taking roots.
const EIGEN_FLOOR: f64 = 1.0 - 1e-12;

impl SmoothingOperator {
    /// Builds the operator from a difference matrix. The boundary is read
    /// off the shape: square means periodic, `(a - 2) x a` means open.
    pub fn new(d: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "smoothing parameter must be finite and non-negative, got {lambda}"
            )));
        }
        let a = d.ncols();
        let boundary = if d.nrows() == a {
            Boundary::Periodic
        } else if d.nrows() + 2 == a {
            Boundary::Open
        } else {
            return Err(Error::ShapeMismatch(format!(
                "difference matrix of shape {:?}",
                d.shape()
            )));
        };
        let dtd = d.tr_mul(&d);
        let eye = DMatrix::<f64>::identity(a, a);
        let (a_mat, a_sqrt, a_inv_sqrt) = if lambda == 0.0 {
            (eye.clone(), eye.clone(), eye)
        } else {
            let a_mat = &eye + &dtd * lambda;
            let clamp = |v: f64| if v < EIGEN_FLOOR { 1.0 } else { v };
            let a_sqrt = symmetric_function(&a_mat, |v| clamp(v).sqrt());
            let a_inv_sqrt = symmetric_function(&a_mat, |v| 1.0 / clamp(v).sqrt());
            (a_mat, a_sqrt, a_inv_sqrt)
        };
        Ok(Self {
            d,
            dtd,
            lambda,
            a_mat,
            a_sqrt,
            a_inv_sqrt,
            boundary,
        })
    }

    /// Convenience constructor from grid length and boundary.
    pub fn build(a: usize, boundary: Boundary, lambda: f64) -> Result<Self> {
        Self::new(second_difference(a, boundary)?, lambda)
    }

    pub fn grid_len(&self) -> usize {
        self.d.ncols()
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn dtd(&self) -> &DMatrix<f64> {
        &self.dtd
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn a_mat(&self) -> &DMatrix<f64> {
        &self.a_mat
    }

    pub fn a_sqrt(&self) -> &DMatrix<f64> {
        &self.a_sqrt
    }

    pub fn a_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.a_inv_sqrt
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
}

pub fn build_second_difference(a: usize, boundary: Boundary) -> Result<DMatrix<f64>> {
    second_difference(a, boundary)
}

pub fn build_penalty_operator(d: DMatrix<f64>, lambda: f64) -> Result<SmoothingOperator> {
    SmoothingOperator::new(d, lambda)
}
