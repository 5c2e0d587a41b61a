//! Gaussian beliefs with factorized covariance and the closed-form
//! identities the recurrent cells are built from.
//!
//! A latent state `z = [u; l]` of size `2d` is split into an observed upper
//! half and a memory lower half. Its covariance keeps only three
//! `d`-vectors: the diagonals of the upper and lower blocks and the diagonal
//! of the off-diagonal (side) block. Per dimension `i` that is the 2x2 block
//!
//! ```text
//! [ var_u[i]  cov_s[i] ]
//! [ cov_s[i]  var_l[i] ]
//! ```
//!
//! so inversions, conditioning and the Kalman update reduce to scalar
//! arithmetic. Everything here is plain `f64` and free of the autodiff tape;
//! the differentiable versions used during training live in
//! [`crate::cells::layers`] and are checked against these functions.

mod block;
mod ops;

pub use block::BlockMatrix;
pub use ops::{
    bayesian_aggregate, enforce_positivity, factorized_invert, factorized_kalman_update,
    factorized_predict, gaussian_condition_set, gaussian_marginalize_linear, pairwise_sum,
    DenseGaussian, LinearTerm, MAX_CORRELATION, MIN_VARIANCE,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

fn check_positive(values: &[f64]) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveVariance { index, value });
        }
    }
    Ok(())
}

/// Diagonal Gaussian `N(mean, diag(var))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_len(mean.len(), var.len())?;
        check_positive(&var)?;
        Ok(DiagGaussian { mean, var })
    }

    /// `N(0, I)` of dimension `d`.
    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-dimension 2x2 covariance blocks stored as three vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CovTriple {
    pub var_u: Vec<f64>,
    pub var_l: Vec<f64>,
    pub cov_s: Vec<f64>,
}

impl CovTriple {
    /// Validated constructor: every block must be positive definite.
    pub fn new(var_u: Vec<f64>, var_l: Vec<f64>, cov_s: Vec<f64>) -> Result<Self> {
        check_len(var_u.len(), var_l.len())?;
        check_len(var_u.len(), cov_s.len())?;
        let t = CovTriple {
            var_u,
            var_l,
            cov_s,
        };
        t.check_positive_definite()?;
        Ok(t)
    }

    /// Diagonal blocks `var_u = var_l = v`, zero side covariance.
    pub fn isotropic(d: usize, v: f64) -> Self {
        CovTriple {
            var_u: vec![v; d],
            var_l: vec![v; d],
            cov_s: vec![0.0; d],
        }
    }

    pub fn zeros(d: usize) -> Self {
        CovTriple::isotropic(d, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.var_u.len()
    }

    pub fn det(&self, i: usize) -> f64 {
        self.var_u[i] * self.var_l[i] - self.cov_s[i] * self.cov_s[i]
    }

    pub fn check_positive_definite(&self) -> Result<()> {
        for i in 0..self.dim() {
            let det = self.det(i);
            if !(self.var_u[i] > 0.0 && det > 0.0) {
                return Err(Error::NonPositiveDefinite { index: i, det });
            }
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn plus(&self, other: &CovTriple) -> Result<CovTriple> {
        check_len(self.dim(), other.dim())?;
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(CovTriple {
            var_u: add(&self.var_u, &other.var_u),
            var_l: add(&self.var_l, &other.var_l),
            cov_s: add(&self.cov_s, &other.cov_s),
        })
    }

    /// The full `2d x 2d` covariance this triple stands for.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            m[(i, i)] = self.var_u[i];
            m[(d + i, d + i)] = self.var_l[i];
            m[(i, d + i)] = self.cov_s[i];
            m[(d + i, i)] = self.cov_s[i];
        }
        m
    }

    /// Keeps only the block diagonals of a dense `2d x 2d` covariance.
    pub fn truncate_dense(m: &DMatrix<f64>) -> CovTriple {
        let d = m.nrows() / 2;
        CovTriple {
            var_u: (0..d).map(|i| m[(i, i)]).collect(),
            var_l: (0..d).map(|i| m[(d + i, d + i)]).collect(),
            cov_s: (0..d)
                .map(|i| 0.5 * (m[(i, d + i)] + m[(d + i, i)]))
                .collect(),
        }
    }
}

/// Gaussian over `z = [u; l]` with factorized covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedBelief {
    pub mean_u: Vec<f64>,
    pub mean_l: Vec<f64>,
    pub cov: CovTriple,
}

impl FactorizedBelief {
    pub fn new(mean_u: Vec<f64>, mean_l: Vec<f64>, cov: CovTriple) -> Result<Self> {
        check_len(mean_u.len(), mean_l.len())?;
        check_len(mean_u.len(), cov.dim())?;
        cov.check_positive_definite()?;
        Ok(FactorizedBelief {
            mean_u,
            mean_l,
            cov,
        })
    }

    /// Zero mean, `var_u = var_l = var`, no side covariance.
    pub fn isotropic(d: usize, var: f64) -> Self {
        FactorizedBelief {
            mean_u: vec![0.0; d],
            mean_l: vec![0.0; d],
            cov: CovTriple::isotropic(d, var),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_u.len()
    }

    /// `[mean_u; mean_l]`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = self.mean_u.clone();
        m.extend_from_slice(&self.mean_l);
        m
    }

    pub fn dense_mean(&self) -> DVector<f64> {
        DVector::from_vec(self.mean())
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        self.cov.to_dense()
    }
}

/// Per-dimension 2x2 precision blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrecision {
    pub lam_u: Vec<f64>,
    pub lam_l: Vec<f64>,
    pub lam_s: Vec<f64>,
}

impl FactorizedPrecision {
    pub fn dim(&self) -> usize {
        self.lam_u.len()
    }

    /// Back to covariance form with the same scalar block inversion.
    pub fn to_covariance(&self) -> Result<CovTriple> {
        let (var_u, var_l, cov_s) = ops::invert_blocks(&self.lam_u, &self.lam_l, &self.lam_s)?;
        Ok(CovTriple {
            var_u,
            var_l,
            cov_s,
        })
    }
}

/// A latent observation of the upper half with per-dimension variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentObservation {
    pub value: Vec<f64>,
    pub var: Vec<f64>,
}

impl LatentObservation {
    pub fn new(value: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_len(value.len(), var.len())?;
        check_positive(&var)?;
        Ok(LatentObservation { value, var })
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

/// Diagnostics from one factorized Kalman update.
///
/// `gain_u` and `gain_l` are the diagonals of the two `d x d` blocks of the
/// Kalman gain; `innovation` is `w - mean_u` of the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanStepTrace {
    pub gain_u: Vec<f64>,
    pub gain_l: Vec<f64>,
    pub innovation: Vec<f64>,
}
