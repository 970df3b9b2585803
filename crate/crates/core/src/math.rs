//! Flat parameter vectors, small dense matrices, covariance and
//! finite-difference gradients.

use std::ops::{Deref, DerefMut};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Row-major dense matrix. Rows are samples wherever a matrix holds a batch.
pub type Matrix = Array2<f64>;

/// Flat vector of reals holding model parameters or a gradient over them.
///
/// The length is fixed at construction; arithmetic between two vectors
/// checks that lengths agree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += a * x`.
    pub fn axpy_in_place(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        check_len(self.len(), x.len())?;
        for (y, xi) in self.0.iter_mut().zip(&x.0) {
            *y += a * xi;
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| a * v).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite entry {} at index {i}",
                self.0[i]
            ))),
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// `a * x + y`, elementwise.
pub fn vec_axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.axpy_in_place(a, x)?;
    Ok(out)
}

/// Sample covariance of the columns of `features` (rows are samples),
/// centered on the column means and normalized by `1/(B-1)`.
///
/// Rows are accumulated in lexicographic order, so the result is
/// bit-identical under any permutation of the samples.
pub fn covariance(features: &Matrix) -> Result<Matrix> {
    let b = features.nrows();
    if b < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: b });
    }
    let canonical = features.select(Axis(0), &canonical_row_order(features));
    let centered = centered(&canonical);
    Ok(centered.t().dot(&centered) / (b as f64 - 1.0))
}

/// `features` minus its column means, with the means accumulated in
/// canonical row order.
pub(crate) fn centered(features: &Matrix) -> Matrix {
    let canonical = features.select(Axis(0), &canonical_row_order(features));
    let mean = canonical
        .mean_axis(Axis(0))
        .expect("caller guarantees at least one row");
    features - &mean
}

fn canonical_row_order(m: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&i, &j| {
        m.row(i)
            .iter()
            .zip(m.row(j).iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::param("h", format!("must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = ParamVector::zeros(x.len());
    for p in 0..x.len() {
        let orig = probe[p];
        probe[p] = orig + h;
        let up = f(&probe);
        probe[p] = orig - h;
        let down = f(&probe);
        probe[p] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around coordinate {p}"
            )));
        }
        grad[p] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest relative deviation between two gradients, using
/// `|a - b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn axpy_examples() {
        let x = ParamVector::from_vec(vec![1.0, 2.0]);
        let y = ParamVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(vec_axpy(0.0, &x, &y).unwrap().to_vec(), vec![3.0, 4.0]);

        let ones = ParamVector::from_vec(vec![1.0, 1.0]);
        let zeros = ParamVector::zeros(2);
        assert_eq!(vec_axpy(1.0, &ones, &zeros).unwrap().to_vec(), vec![1.0, 1.0]);

        let x = ParamVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(vec_axpy(2.0, &x, &ones).unwrap().to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn axpy_length_mismatch() {
        let x = ParamVector::zeros(2);
        let y = ParamVector::zeros(3);
        assert_eq!(
            vec_axpy(1.0, &x, &y),
            Err(Error::Dimension { expected: 3, got: 2 })
        );
    }

    #[test]
    fn covariance_examples() {
        let same = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert!(covariance(&same).unwrap().iter().all(|&v| v == 0.0));

        let one_col = array![[0.0], [2.0]];
        assert_eq!(covariance(&one_col).unwrap(), array![[2.0]]);

        let two_col = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(
            covariance(&two_col).unwrap(),
            array![[0.5, -0.5], [-0.5, 0.5]]
        );
    }

    #[test]
    fn covariance_needs_two_rows() {
        let m = array![[1.0, 2.0]];
        assert_eq!(
            covariance(&m),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        );
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &ParamVector::from_vec(vec![3.0]), 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 4.0, &ParamVector::from_vec(vec![1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(g.to_vec(), vec![0.0, 0.0]);

        let g = finite_diff_grad(|x| x[0] * x[1], &ParamVector::from_vec(vec![2.0, 5.0]), 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nan() {
        let x = ParamVector::from_vec(vec![1.0]);
        assert!(matches!(finite_diff_grad(|x| x[0], &x, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(finite_diff_grad(|_| f64::NAN, &x, 1e-3), Err(Error::Numeric(_))));
    }

    /// Smallest eigenvalue of a symmetric matrix via power iteration on
    /// `s*I - C`, where `s` bounds the spectrum (Gershgorin).
    fn smallest_eigenvalue(c: &Matrix) -> f64 {
        let d = c.nrows();
        let shift = (0..d)
            .map(|i| (0..d).map(|j| c[[i, j]].abs()).sum::<f64>())
            .fold(0.0, f64::max)
            + 1.0;
        let m = Matrix::eye(d) * shift - c;
        let mut v = ndarray::Array1::from_elem(d, 1.0) / (d as f64).sqrt();
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = m.dot(&v);
            let n = w.dot(&w).sqrt();
            if n == 0.0 {
                break;
            }
            lambda = v.dot(&w);
            v = w / n;
        }
        shift - lambda
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(
            rows in 2usize..12,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::Rng::new(seed);
            let f = Matrix::from_shape_fn((rows, cols), |_| rng.normal() * 3.0);
            let c = covariance(&f).unwrap();
            for i in 0..cols {
                for j in 0..cols {
                    prop_assert_eq!(c[[i, j]], c[[j, i]]);
                }
            }
            prop_assert!(smallest_eigenvalue(&c) >= -1e-10);

            let mut order: Vec<usize> = (0..rows).collect();
            rng.shuffle(&mut order);
            let permuted = covariance(&f.select(ndarray::Axis(0), &order)).unwrap();
            prop_assert_eq!(permuted, c);
        }

        #[test]
        fn finite_diff_matches_polynomials(
            a in -3.0f64..3.0, b in -3.0f64..3.0, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0,
        ) {
            // f = a x0^3 + b x0 x1^2 + x1
            let f = |x: &ParamVector| a * x[0].powi(3) + b * x[0] * x[1] * x[1] + x[1];
            let x = ParamVector::from_vec(vec![x0, x1]);
            let g = finite_diff_grad(f, &x, 1e-5).unwrap();
            let exact = [3.0 * a * x0 * x0 + b * x1 * x1, 2.0 * b * x0 * x1 + 1.0];
            prop_assert!(max_relative_error(&g, &exact, 1e-2) <= 1e-6);
        }
    }
}
