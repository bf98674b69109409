use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;

/// Sampling coefficients are clamped to this many standard deviations.
pub const COEFF_CLAMP: f64 = 3.0;

/// PCA shape model over flattened `[x0, y0, x1, y1, ...]` contour vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal modes, each of length `2P`, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `coverage[j]` = fraction of total variance captured by modes `0..=j`.
    pub coverage: Vec<f64>,
    /// Sum of all eigenvalues of the sample covariance.
    pub total_variance: f64,
}

impl ShapeModel {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn num_points(&self) -> usize {
        self.mean.len() / 2
    }

    /// `mean + Σ b_i sqrt(λ_i) φ_i` with each `b_i` clamped to `±COEFF_CLAMP`.
    /// Missing trailing coefficients are treated as 0.
    pub fn sample_shape(&self, coeffs: &[f64]) -> Contour {
        let mut v = self.mean.clone();
        for ((b, comp), lambda) in coeffs.iter().zip(&self.components).zip(&self.eigenvalues) {
            let s = b.clamp(-COEFF_CLAMP, COEFF_CLAMP) * lambda.sqrt();
            for (vi, ci) in v.iter_mut().zip(comp) {
                *vi += s * ci;
            }
        }
        Contour::from_flat(&v).expect("mean has even length")
    }

    /// Raw projection coefficients `φ_iᵀ (s - mean)`.
    pub fn project(&self, shape: &Contour) -> Result<Vec<f64>> {
        let flat = shape.to_flat();
        if flat.len() != self.mean.len() {
            return Err(Error::shape(
                "ssm project",
                format!("model has {} points, shape has {}", self.num_points(), shape.len()),
            ));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&flat).zip(&self.mean).map(|((ci, s), m)| ci * (s - m)).sum())
            .collect())
    }

    /// Inverse of [`ShapeModel::project`].
    pub fn reconstruct(&self, raw: &[f64]) -> Contour {
        let mut v = self.mean.clone();
        for (a, comp) in raw.iter().zip(&self.components) {
            for (vi, ci) in v.iter_mut().zip(comp) {
                *vi += a * ci;
            }
        }
        Contour::from_flat(&v).expect("mean has even length")
    }
}

/// Builds a `k`-mode PCA model from corresponding contours.
pub fn build_ssm(shapes: &[Contour], k: usize) -> Result<ShapeModel> {
    let n = shapes.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 shapes, got {n}")));
    }
    let p = shapes[0].len();
    if let Some(bad) = shapes.iter().position(|s| s.len() != p) {
        return Err(Error::shape(
            "build_ssm",
            format!("shape {bad} has {} points, expected {p}", shapes[bad].len()),
        ));
    }
    let dim = 2 * p;
    let max_k = dim.min(n - 1);
    if k == 0 || k > max_k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={max_k} for {n} shapes of {p} points"
        )));
    }
    let rows: Vec<Vec<f64>> = shapes.iter().map(Contour::to_flat).collect();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let all: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = all.iter().sum();
    if total == 0.0 {
        log::warn!("build_ssm: all {n} shapes are identical; model has zero variance");
    }
    let mut components = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = c.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
    }
    let eigenvalues = all[..k].to_vec();
    let mut acc = 0.0;
    let coverage = eigenvalues
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                (acc / total).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    Ok(ShapeModel {
        mean,
        components,
        eigenvalues,
        coverage,
        total_variance: total,
    })
}
