//! ZCA whitening of flattened images.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use memdistill_core::data::LabeledDataset;
use memdistill_core::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// `E·diag((λ+ε)^(-1/2))·Eᵀ`, row-major `d×d`.
    pub whitening: Vec<f64>,
    /// `E·diag((λ+ε)^(1/2))·Eᵀ`, the inverse map.
    pub coloring: Vec<f64>,
    pub epsilon: f64,
}

impl ZcaTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn whitening_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.whitening)
    }

    /// Whitens `[N, ...]` images with `d` values each.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        self.map(images, &self.whitening, true)
    }

    /// Undoes [`apply`](Self::apply).
    pub fn unapply(&self, images: &Tensor) -> Result<Tensor> {
        self.map(images, &self.coloring, false)
    }

    fn map(&self, images: &Tensor, m: &[f64], center_first: bool) -> Result<Tensor> {
        let d = self.dim();
        if images.is_empty() || images.len() % d != 0 {
            return Err(Error::format("zca", format!("images {:?} for dimension {}", images.shape(), d)));
        }
        let n = images.len() / d;
        let mut x = DMatrix::from_row_slice(n, d, images.data());
        if center_first {
            for mut row in x.row_iter_mut() {
                for (v, mu) in row.iter_mut().zip(&self.mean) {
                    *v -= mu;
                }
            }
        }
        let m = DMatrix::from_row_slice(d, d, m);
        // both maps are symmetric, so X·M applies M to every row
        let mut y = x * m;
        if !center_first {
            for mut row in y.row_iter_mut() {
                for (v, mu) in row.iter_mut().zip(&self.mean) {
                    *v += mu;
                }
            }
        }
        let data: Vec<f64> = y.transpose().as_slice().to_vec();
        Ok(Tensor::new(images.shape().to_vec(), data)?)
    }
}

/// Fits the transform to the covariance of the mean-centred images.
pub fn zca_fit(ds: &LabeledDataset, epsilon: f64) -> Result<ZcaTransform> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::format("zca", format!("epsilon {} must be positive", epsilon)));
    }
    let n = ds.len();
    let d = ds.image_dim();
    if n < 2 {
        return Err(Error::format("zca", "needs at least two images"));
    }
    if n <= d {
        log::warn!("zca: {} images for {} dimensions; the covariance is rank deficient", n, d);
    }
    let x = DMatrix::from_row_slice(n, d, ds.images.data());
    let mean: Vec<f64> = x.row_mean().iter().copied().collect();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let cov = (xc.transpose() * &xc) / n as f64;
    let eig = SymmetricEigen::try_new(cov, 1e-12, 10_000)
        .ok_or_else(|| Error::format("zca", "eigendecomposition did not converge"))?;
    let e = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let scaled = |p: f64| -> Vec<f64> {
        let mut m = e.clone();
        for (j, mut col) in m.column_iter_mut().enumerate() {
            col *= (lam[j].max(0.0) + epsilon).powf(p);
        }
        let w = m * e.transpose();
        // symmetrise away rounding so the stored matrix is exactly symmetric
        let w = (&w + w.transpose()) * 0.5;
        w.transpose().as_slice().to_vec()
    };
    Ok(ZcaTransform {
        mean,
        whitening: scaled(-0.5),
        coloring: scaled(0.5),
        epsilon,
    })
}

/// Whitens a dataset in place of its pixels and records it.
pub fn whiten(ds: &LabeledDataset, z: &ZcaTransform) -> Result<LabeledDataset> {
    let mut out = ds.clone();
    out.images = z.apply(&ds.images)?;
    out.preprocessing.push(format!("zca(eps={:e})", z.epsilon));
    Ok(out)
}
