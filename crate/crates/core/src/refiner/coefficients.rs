//! Coefficient network `u = sigmoid(Xᵀ·W + b)` and the mean step function.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientState {
    pub weights: Array1<f64>,
    pub bias: Array1<f64>,
    /// Raw coefficients, one per token.
    pub u: Array1<f64>,
    /// `u` with every entry below `mean(u)` zeroed.
    pub u_sparse: Array1<f64>,
    pub nonzero: usize,
}

impl CoefficientState {
    /// Which coordinates survived the step function.
    pub fn mask(&self) -> Vec<bool> {
        retained_mask(self.u.view())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean(u: ArrayView1<'_, f64>) -> f64 {
    u.sum() / u.len() as f64
}

/// `u[i] >= mean(u)`, elementwise. Ties are retained.
pub fn retained_mask(u: ArrayView1<'_, f64>) -> Vec<bool> {
    if u.is_empty() {
        return Vec::new();
    }
    let m = mean(u);
    u.iter().map(|&x| x >= m).collect()
}

pub fn step_threshold(u: ArrayView1<'_, f64>) -> Array1<f64> {
    apply_mask(u, &retained_mask(u))
}

pub(crate) fn apply_mask(u: ArrayView1<'_, f64>, mask: &[bool]) -> Array1<f64> {
    u.iter()
        .zip(mask)
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect()
}

pub fn nonzero_count(v: ArrayView1<'_, f64>) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

pub(crate) fn check_shapes(
    x: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Result<()> {
    let (m, n) = x.dim();
    if weights.len() != m || bias.len() != n {
        return Err(Error::Shape(format!(
            "X is {m}×{n} but W has length {} and b has length {}",
            weights.len(),
            bias.len()
        )));
    }
    Ok(())
}

/// Raw coefficients `sigmoid(Xᵀ·W + b)`.
pub(crate) fn raw_coefficients(
    x: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let mut z = x.t().dot(&weights);
    z += &bias;
    z.mapv_inplace(sigmoid);
    z
}

pub fn coefficient_forward(
    x: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Result<CoefficientState> {
    check_shapes(x, weights, bias)?;
    let u = raw_coefficients(x, weights, bias);
    let u_sparse = step_threshold(u.view());
    let nonzero = nonzero_count(u_sparse.view());
    Ok(CoefficientState {
        weights: weights.to_owned(),
        bias: bias.to_owned(),
        u,
        u_sparse,
        nonzero,
    })
}

/// Sparse reconstruction `X · u'`.
pub fn reconstruct_target(x: ArrayView2<'_, f64>, u_sparse: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.ncols() != u_sparse.len() {
        return Err(Error::Shape(format!(
            "X has {} columns but u' has length {}",
            x.ncols(),
            u_sparse.len()
        )));
    }
    Ok(x.dot(&u_sparse))
}

/// `a + α · (X · u')`.
pub fn refine_aspect_vector(
    aspect: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
    u_sparse: ArrayView1<'_, f64>,
    alpha: f64,
) -> Result<Array1<f64>> {
    let context = reconstruct_target(x, u_sparse)?;
    if aspect.len() != context.len() {
        return Err(Error::Shape(format!(
            "aspect has length {} but X has {} rows",
            aspect.len(),
            context.len()
        )));
    }
    Ok(&aspect + &(context * alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn step_keeps_ties() {
        assert_eq!(
            step_threshold(array![1.0, 1.0, 1.0, 1.0].view()),
            array![1.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(step_threshold(array![0.0].view()), array![0.0]);
    }

    #[test]
    fn step_zeroes_below_mean() {
        // mean 0.45
        assert_eq!(
            step_threshold(array![0.1, 0.9, 0.5, 0.3].view()),
            array![0.0, 0.9, 0.5, 0.0]
        );
    }

    #[test]
    fn forward_with_zero_parameters_keeps_everything() {
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let s = coefficient_forward(x.view(), Array1::zeros(3).view(), Array1::zeros(5).view()).unwrap();
        assert!(s.u.iter().all(|&v| v == 0.5));
        assert_eq!(s.u_sparse, s.u);
        assert_eq!(s.nonzero, 5);
    }

    #[test]
    fn forward_with_opposed_biases() {
        let x = Array2::<f64>::zeros((2, 2));
        let s = coefficient_forward(x.view(), Array1::zeros(2).view(), array![10.0, -10.0].view()).unwrap();
        let hi = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((s.u[0] - hi).abs() < 1e-15);
        assert!((s.u[0] - 0.9999546021312976).abs() < 1e-15);
        assert!((s.u[1] - (1.0 - hi)).abs() < 1e-15);
        assert_eq!(s.u_sparse[0], s.u[0]);
        assert_eq!(s.u_sparse[1], 0.0);
        assert_eq!(s.nonzero, 1);
    }

    #[test]
    fn single_token_is_always_retained() {
        let x = array![[0.3], [-2.0]];
        let s = coefficient_forward(x.view(), array![4.0, 1.0].view(), array![-3.0].view()).unwrap();
        assert_eq!(s.u_sparse, s.u);
        assert_eq!(s.nonzero, 1);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let x = Array2::<f64>::zeros((2, 3));
        assert!(coefficient_forward(x.view(), Array1::zeros(3).view(), Array1::zeros(3).view()).is_err());
        assert!(coefficient_forward(x.view(), Array1::zeros(2).view(), Array1::zeros(2).view()).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let eye = Array2::<f64>::eye(2);
        assert_eq!(
            reconstruct_target(eye.view(), array![0.0, 1.0].view()).unwrap(),
            array![0.0, 1.0]
        );
        assert_eq!(
            reconstruct_target(eye.view(), array![0.0, 0.0].view()).unwrap(),
            array![0.0, 0.0]
        );
        let x = array![[1.0, 1.0], [0.0, 0.0]];
        assert_eq!(
            reconstruct_target(x.view(), array![0.5, 0.5].view()).unwrap(),
            array![1.0, 0.0]
        );
        assert!(reconstruct_target(x.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn aspect_vector_examples() {
        let x = array![[2.0, 0.0], [0.0, -1.0]];
        let u = array![1.0, 1.0];
        let a = array![1.0, 1.0];
        // X·u' = [2, -1]
        assert_eq!(
            refine_aspect_vector(a.view(), x.view(), u.view(), 0.5).unwrap(),
            array![2.0, 0.5]
        );
        assert_eq!(refine_aspect_vector(a.view(), x.view(), u.view(), 0.0).unwrap(), a);
        assert!(refine_aspect_vector(array![1.0].view(), x.view(), u.view(), 1.0).is_err());
    }

    fn matrix_and_coeffs() -> impl Strategy<Value = (Array2<f64>, Array1<f64>)> {
        (1usize..6, 1usize..8).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(-3.0f64..3.0, m * n),
                prop::collection::vec(0.0f64..1.0, n),
            )
                .prop_map(move |(xs, us)| {
                    let u = step_threshold(Array1::from(us).view());
                    (Array2::from_shape_vec((m, n), xs).unwrap(), u)
                })
        })
    }

    proptest! {
        #[test]
        fn step_zeroes_exactly_the_below_mean_set(u in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let u = Array1::from(u);
            let out = step_threshold(u.view());
            let mean = u.sum() / u.len() as f64;
            for i in 0..u.len() {
                if u[i] < mean {
                    prop_assert_eq!(out[i], 0.0);
                } else {
                    prop_assert_eq!(out[i].to_bits(), u[i].to_bits());
                }
            }
            let pos: f64 = u.iter().map(|x| x.max(0.0)).sum();
            prop_assert!(out.sum() <= pos + 1e-12);
        }

        #[test]
        fn sigmoid_coefficients_in_open_unit_interval(
            w in prop::collection::vec(-4.0f64..4.0, 3),
            b in prop::collection::vec(-4.0f64..4.0, 4),
        ) {
            let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) as f64).sin());
            let s = coefficient_forward(x.view(), Array1::from(w).view(), Array1::from(b).view()).unwrap();
            prop_assert!(s.u.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert_eq!(s.nonzero, s.mask().iter().filter(|&&k| k).count());
        }

        #[test]
        fn zero_aspect_unit_alpha_reduces_to_reconstruction((x, u) in matrix_and_coeffs()) {
            let zero = Array1::<f64>::zeros(x.nrows());
            let a = refine_aspect_vector(zero.view(), x.view(), u.view(), 1.0).unwrap();
            let t = reconstruct_target(x.view(), u.view()).unwrap();
            prop_assert!(a.iter().zip(t.iter()).all(|(p, q)| p == q));
        }

        #[test]
        fn reconstruction_scales_with_matrix((x, u) in matrix_and_coeffs()) {
            let once = reconstruct_target(x.view(), u.view()).unwrap();
            let twice = reconstruct_target((&x * 2.0).view(), u.view()).unwrap();
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((b - 2.0 * a).abs() <= 1e-12 * (2.0 * a).abs().max(f64::MIN_POSITIVE));
            }
        }
    }
}
