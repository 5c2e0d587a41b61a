use nalgebra::DMatrix;

use super::CovTriple;
use crate::error::{Error, Result};

/// A linear map between split latent spaces, `[u'; l'] = M [u; l]`, stored as
/// four `rows x cols` row-major blocks.
///
/// ```text
/// M = [ uu  ul ]
///     [ lu  ll ]
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    rows: usize,
    cols: usize,
    pub uu: Vec<f64>,
    pub ul: Vec<f64>,
    pub lu: Vec<f64>,
    pub ll: Vec<f64>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            m[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

impl BlockMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        uu: Vec<f64>,
        ul: Vec<f64>,
        lu: Vec<f64>,
        ll: Vec<f64>,
    ) -> Result<Self> {
        for b in [&uu, &ul, &lu, &ll] {
            if b.len() != rows * cols {
                return Err(Error::DimMismatch {
                    expected: rows * cols,
                    got: b.len(),
                });
            }
        }
        Ok(BlockMatrix {
            rows,
            cols,
            uu,
            ul,
            lu,
            ll,
        })
    }

    pub fn identity(d: usize) -> Self {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        BlockMatrix {
            rows: d,
            cols: d,
            uu: eye.clone(),
            ul: vec![0.0; d * d],
            lu: vec![0.0; d * d],
            ll: eye,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        let z = vec![0.0; rows * cols];
        BlockMatrix {
            rows,
            cols,
            uu: z.clone(),
            ul: z.clone(),
            lu: z.clone(),
            ll: z,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Splits a dense `2 rows x 2 cols` matrix into blocks.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if !m.nrows().is_multiple_of(2) || !m.ncols().is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "block matrix needs even extents, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let (r, c) = (m.nrows() / 2, m.ncols() / 2);
        let block = |r0: usize, c0: usize| {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(m[(r0 + i, c0 + j)]);
                }
            }
            out
        };
        Ok(BlockMatrix {
            rows: r,
            cols: c,
            uu: block(0, 0),
            ul: block(0, c),
            lu: block(r, 0),
            ll: block(r, c),
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (r, c) = (self.rows, self.cols);
        let mut m = DMatrix::zeros(2 * r, 2 * c);
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = self.uu[i * c + j];
                m[(i, c + j)] = self.ul[i * c + j];
                m[(r + i, j)] = self.lu[i * c + j];
                m[(r + i, c + j)] = self.ll[i * c + j];
            }
        }
        m
    }

    /// `M [u; l]`.
    pub fn apply(&self, u: &[f64], l: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (r, c) = (self.rows, self.cols);
        let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect();
        (
            add(matvec(&self.uu, r, c, u), matvec(&self.ul, r, c, l)),
            add(matvec(&self.lu, r, c, u), matvec(&self.ll, r, c, l)),
        )
    }

    /// Block diagonals of `M Σ Mᵀ` where `Σ` is the factorized covariance
    /// given by the three vectors. The inputs are not required to form a
    /// positive-definite triple, so a diagonal Gaussian can be pushed through
    /// by passing zeros for the lower half.
    pub fn propagate(&self, var_u: &[f64], var_l: &[f64], cov_s: &[f64]) -> CovTriple {
        let (r, c) = (self.rows, self.cols);
        let mut out = CovTriple::zeros(r);
        for i in 0..r {
            let (mut up, mut lo, mut side) = (0.0, 0.0, 0.0);
            for j in 0..c {
                let k = i * c + j;
                let (a, b, e, f) = (self.uu[k], self.ul[k], self.lu[k], self.ll[k]);
                up += a * a * var_u[j] + 2.0 * a * b * cov_s[j] + b * b * var_l[j];
                lo += e * e * var_u[j] + 2.0 * e * f * cov_s[j] + f * f * var_l[j];
                side += a * e * var_u[j] + (a * f + b * e) * cov_s[j] + b * f * var_l[j];
            }
            out.var_u[i] = up;
            out.var_l[i] = lo;
            out.cov_s[i] = side;
        }
        out
    }

    /// Zeroes entries further than `bandwidth` from the diagonal of each
    /// square block.
    pub fn band_limit(&mut self, bandwidth: usize) {
        let (r, c) = (self.rows, self.cols);
        for b in [&mut self.uu, &mut self.ul, &mut self.lu, &mut self.ll] {
            for i in 0..r {
                for j in 0..c {
                    if i.abs_diff(j) > bandwidth {
                        b[i * c + j] = 0.0;
                    }
                }
            }
        }
    }
}
