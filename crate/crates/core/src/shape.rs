//! Landmark configurations and the PCA shape space.
//!
//! A shape of `n` landmarks is stacked as the interleaved `2n`-vector
//! `(u1, v1, u2, v2, ...)`. The shape basis holds the training mean and the
//! leading eigenvectors of the unnormalized scatter matrix
//! `sum (y - mean)(y - mean)^T`; decoded shapes are `mean + Q x`.

use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::linalg::{dot, eig_sym, Matrix};

/// Default regularization weight on the basis coefficients.
pub const DEFAULT_COEFF_LAMBDA: f64 = 0.1;

/// Default fraction of scatter energy the basis must retain.
pub const DEFAULT_ENERGY_FRACTION: f64 = 0.99;

/// An ordered set of 2-D landmarks in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(DdnError::shape("a landmark set needs at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DdnError::Domain("landmark coordinates must be finite".into()));
        }
        Ok(LandmarkSet { points })
    }

    /// Builds a set from the stacked `(u1, v1, u2, v2, ...)` form.
    pub fn from_stacked(values: &[f64]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(DdnError::shape(format!(
                "stacked landmark vector has odd length {}",
                values.len()
            )));
        }
        LandmarkSet::new(values.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn map(&self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// `2 x n` matrix with the `u` coordinates in the first row.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        Matrix::from_fn(2, n, |r, c| self.points[c][r])
    }

    /// `3 x n` homogeneous form (third row all ones).
    pub fn homogeneous(&self) -> Matrix {
        let n = self.len();
        Matrix::from_fn(3, n, |r, c| if r == 2 { 1.0 } else { self.points[c][r] })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != 2 {
            return Err(DdnError::shape(format!("expected a 2xn matrix, got {} rows", m.rows())));
        }
        LandmarkSet::new((0..m.cols()).map(|c| [m[(0, c)], m[(1, c)]]).collect())
    }

    pub fn translate(&self, t: [f64; 2]) -> LandmarkSet {
        self.map(|p| [p[0] + t[0], p[1] + t[1]])
    }

    /// Largest Euclidean distance between corresponding points.
    pub fn max_distance(&self, other: &LandmarkSet) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .fold(0.0, f64::max)
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Coefficients `x_s` of a shape in a [`ShapeBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct BasisCoeffs(pub Vec<f64>);

impl BasisCoeffs {
    pub fn zeros(k: usize) -> Self {
        BasisCoeffs(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean shape plus an orthonormal basis of its leading variation modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBasis {
    pub mean: Vec<f64>,
    /// `2n x k`, orthonormal columns.
    pub basis: Matrix,
    /// Retained scatter eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Retained over total scatter energy.
    pub energy_fraction: f64,
}

impl ShapeBasis {
    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn landmark_count(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn mean_shape(&self) -> LandmarkSet {
        LandmarkSet::from_stacked(&self.mean).expect("basis mean is a valid shape")
    }

    /// Coefficients of the orthogonal projection of `shape` onto the basis.
    pub fn project(&self, shape: &LandmarkSet) -> Result<BasisCoeffs> {
        self.check_landmarks(shape)?;
        let centered: Vec<f64> = shape.stacked().iter().zip(&self.mean).map(|(y, m)| y - m).collect();
        Ok(BasisCoeffs(self.basis.t_matvec(&centered)))
    }

    fn check_landmarks(&self, shape: &LandmarkSet) -> Result<()> {
        if shape.len() != self.landmark_count() {
            return Err(DdnError::shape(format!(
                "shape has {} landmarks, basis expects {}",
                shape.len(),
                self.landmark_count()
            )));
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &BasisCoeffs) -> Result<()> {
        if coeffs.len() != self.rank() {
            return Err(DdnError::shape(format!(
                "{} coefficients for a rank-{} basis",
                coeffs.len(),
                self.rank()
            )));
        }
        Ok(())
    }

    /// Per-mode standard deviation of the training coefficients,
    /// `sqrt(eigenvalue / (samples - 1))`; useful as an output scale.
    pub fn coefficient_scales(&self, samples: usize) -> Vec<f64> {
        let denom = samples.saturating_sub(1).max(1) as f64;
        self.eigenvalues.iter().map(|l| (l.max(0.0) / denom).sqrt().max(1e-6)).collect()
    }
}

/// Builds the mean shape and the smallest basis retaining `energy_fraction`
/// of the scatter energy.
pub fn build_shape_basis(shapes: &[LandmarkSet], energy_fraction: f64) -> Result<ShapeBasis> {
    if shapes.len() < 2 {
        return Err(DdnError::shape(format!(
            "need at least two shapes to build a basis, got {}",
            shapes.len()
        )));
    }
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(DdnError::Domain(format!(
            "energy fraction must lie in (0, 1], got {energy_fraction}"
        )));
    }
    let n = shapes[0].len();
    if let Some(bad) = shapes.iter().find(|s| s.len() != n) {
        return Err(DdnError::shape(format!(
            "shapes disagree on landmark count: {} vs {}",
            n,
            bad.len()
        )));
    }
    let dim = 2 * n;
    let count = shapes.len() as f64;
    let stacked: Vec<Vec<f64>> = shapes.iter().map(LandmarkSet::stacked).collect();
    let mut mean = vec![0.0; dim];
    for y in &stacked {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= count;
    }

    let mut scatter = Matrix::zeros(dim, dim);
    for y in &stacked {
        let d: Vec<f64> = y.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            if d[i] == 0.0 {
                continue;
            }
            for j in 0..dim {
                scatter[(i, j)] += d[i] * d[j];
            }
        }
    }

    let (values, vectors) = eig_sym(&scatter)?;
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let max_rank = dim.min(shapes.len() - 1);

    let (k, retained) = if total <= 0.0 {
        (0, 1.0)
    } else {
        let mut acc = 0.0;
        let mut k = 0;
        while k < max_rank && acc < energy_fraction * total {
            acc += values[k];
            k += 1;
        }
        (k, acc / total)
    };

    let basis = Matrix::from_fn(dim, k, |r, c| vectors[(r, c)]);
    Ok(ShapeBasis {
        mean,
        basis,
        eigenvalues: values[..k].to_vec(),
        energy_fraction: retained,
    })
}

/// `mean + Q x`, reshaped to landmarks.
pub fn decode_shape(basis: &ShapeBasis, coeffs: &BasisCoeffs) -> Result<LandmarkSet> {
    basis.check_coeffs(coeffs)?;
    let offset = basis.basis.matvec(&coeffs.0);
    let y: Vec<f64> = basis.mean.iter().zip(&offset).map(|(m, o)| m + o).collect();
    LandmarkSet::from_stacked(&y)
}

fn residual(basis: &ShapeBasis, coeffs: &BasisCoeffs, truth: &LandmarkSet) -> Result<Vec<f64>> {
    basis.check_coeffs(coeffs)?;
    basis.check_landmarks(truth)?;
    let decoded = basis.basis.matvec(&coeffs.0);
    Ok(truth
        .stacked()
        .iter()
        .zip(&basis.mean)
        .zip(&decoded)
        .map(|((y, m), q)| y - (m + q))
        .collect())
}

/// `|y - (mean + Q x)|^2 + lambda |x|^2`.
pub fn sbn_loss(basis: &ShapeBasis, coeffs: &BasisCoeffs, truth: &LandmarkSet, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let r = residual(basis, coeffs, truth)?;
    Ok(dot(&r, &r) + lambda * dot(&coeffs.0, &coeffs.0))
}

/// Gradient of [`sbn_loss`] in the coefficients: `2 lambda x - 2 Q^T (y - (mean + Q x))`.
pub fn sbn_loss_grad(
    basis: &ShapeBasis,
    coeffs: &BasisCoeffs,
    truth: &LandmarkSet,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let r = residual(basis, coeffs, truth)?;
    let qt_r = basis.basis.t_matvec(&r);
    Ok(coeffs.0.iter().zip(&qt_r).map(|(x, q)| 2.0 * lambda * x - 2.0 * q).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(DdnError::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}
