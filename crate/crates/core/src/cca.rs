//! Regularized two-view linear CCA, the unstructured baseline. Language rows
//! are concatenated slot embeddings with zeros in wildcard slots.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, ShapeError};

/// Eigenvalues at or below this fraction of the largest count as zero.
const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CcaError {
    #[error("{0} covariance is singular; use a positive regularizer")]
    SingularCovariance(&'static str),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("output dimension {dim} exceeds view width {max}")]
    DimTooLarge { dim: usize, max: usize },
    #[error("regularizer must be non-negative and finite, got {0}")]
    BadRegularizer(f64),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Visual,
    Language,
}

/// Projections map a centered row (`d_view` wide) to `dim` canonical
/// coordinates: `z = P^T (x - mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaModel {
    pub proj_visual: Matrix,
    pub proj_language: Matrix,
    pub correlations: Vec<f64>,
    pub regularizer: f64,
    pub mean_visual: Vec<f64>,
    pub mean_language: Vec<f64>,
}

impl CcaModel {
    pub fn dim(&self) -> usize {
        self.correlations.len()
    }
}

fn to_dmatrix(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>, ShapeError> {
    let cols = rows.first().map_or(0, Vec::len);
    for r in rows {
        ShapeError::check(context, cols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn center(m: &mut DMatrix<f64>) -> DVector<f64> {
    let mean = m.row_mean().transpose();
    for mut row in m.row_iter_mut() {
        row -= mean.transpose();
    }
    mean
}

/// `C^{-1/2}` of a symmetric positive definite matrix.
fn inv_sqrt(c: DMatrix<f64>, which: &'static str) -> Result<DMatrix<f64>, CcaError> {
    let eig = SymmetricEigen::new(c);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if eig
        .eigenvalues
        .iter()
        .any(|&l| l <= EIGEN_TOL * max.max(EIGEN_TOL))
    {
        return Err(CcaError::SingularCovariance(which));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Fits `dim` canonical directions. Covariances get `reg * I` added; the
/// directions are the singular vectors of the whitened cross-covariance.
/// Each language direction has its first nonzero entry positive.
pub fn cca_fit(x: &[Vec<f64>], y: &[Vec<f64>], dim: usize, reg: f64) -> Result<CcaModel, CcaError> {
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(CcaError::BadRegularizer(reg));
    }
    ShapeError::check("cca row count", x.len(), y.len())?;
    let needed = dim.max(2);
    if x.len() < needed {
        return Err(CcaError::TooFewRows {
            needed,
            got: x.len(),
        });
    }
    let mut xm = to_dmatrix(x, "visual row width")?;
    let mut ym = to_dmatrix(y, "language row width")?;
    let max = xm.ncols().min(ym.ncols());
    if dim > max {
        return Err(CcaError::DimTooLarge { dim, max });
    }
    let mean_x = center(&mut xm);
    let mean_y = center(&mut ym);
    let scale = 1.0 / (x.len() - 1) as f64;
    let cxx = xm.transpose() * &xm * scale + DMatrix::identity(xm.ncols(), xm.ncols()) * reg;
    let cyy = ym.transpose() * &ym * scale + DMatrix::identity(ym.ncols(), ym.ncols()) * reg;
    let cxy = xm.transpose() * &ym * scale;

    let wx = inv_sqrt(cxx, "visual")?;
    let wy = inv_sqrt(cyy, "language")?;
    let t = &wx * cxy * &wy;
    let svd = SVD::new(t, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");

    let mut px = &wx * u.columns(0, dim);
    let mut py = &wy * v_t.transpose().columns(0, dim);
    for j in 0..dim {
        let lead = py
            .column(j)
            .iter()
            .copied()
            .find(|v| v.abs() > EIGEN_TOL)
            .unwrap_or(1.0);
        if lead < 0.0 {
            px.column_mut(j).neg_mut();
            py.column_mut(j).neg_mut();
        }
    }
    Ok(CcaModel {
        proj_visual: to_matrix(&px),
        proj_language: to_matrix(&py),
        correlations: svd
            .singular_values
            .iter()
            .take(dim)
            .map(|s| s.max(0.0))
            .collect(),
        regularizer: reg,
        mean_visual: mean_x.iter().copied().collect(),
        mean_language: mean_y.iter().copied().collect(),
    })
}

pub fn cca_embed(model: &CcaModel, row: &[f64], view: View) -> Result<Vec<f64>, ShapeError> {
    let (proj, mean) = match view {
        View::Visual => (&model.proj_visual, &model.mean_visual),
        View::Language => (&model.proj_language, &model.mean_language),
    };
    ShapeError::check("cca embed width", mean.len(), row.len())?;
    let centered: Vec<f64> = row.iter().zip(mean).map(|(a, m)| a - m).collect();
    proj.matvec_t(&centered)
}
