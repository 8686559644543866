//! Gated activation `y = tanh(f) * sigmoid(g)`.
//!
//! The pre-activation carries `2F` channels: the first `F` are the filter
//! half `f`, the last `F` the gate half `g`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// `pre` is `[2F, n]`, `out` is `[F, n]`.
pub(crate) fn gate_planes<T: Scalar>(pre: &[T], n: usize, out: &mut [T]) {
    let half = pre.len() / 2;
    let (f, g) = pre.split_at(half);
    debug_assert_eq!(out.len(), half);
    debug_assert_eq!(half % n, 0);
    for ((y, &f), &g) in out.iter_mut().zip(f).zip(g) {
        *y = f.tanh() * g.sigmoid();
    }
}

/// Accumulates `dL/d(pre)` into `grad_pre` given `dL/d(out)`.
pub(crate) fn gate_backward_planes<T: Scalar>(pre: &[T], grad_out: &[T], grad_pre: &mut [T]) {
    let half = pre.len() / 2;
    let (f, g) = pre.split_at(half);
    let (gf, gg) = grad_pre.split_at_mut(half);
    for i in 0..half {
        let t = f[i].tanh();
        let s = g[i].sigmoid();
        let d = grad_out[i];
        gf[i] += d * s * (T::one() - t * t);
        gg[i] += d * t * s * (T::one() - s);
    }
}

fn split_channels<T: Scalar>(pre: &Tensor<T>) -> Result<(usize, usize)> {
    let shape = pre.shape();
    match shape.first() {
        Some(&c) if c % 2 == 0 && c > 0 => Ok((c / 2, pre.len() / c)),
        _ => Err(Error::ShapeMismatch(format!(
            "gated activation needs an even, nonzero channel count, got shape {shape:?}"
        ))),
    }
}

/// Gated activation of a `[2F, ...]` pre-activation, returning `[F, ...]`.
pub fn gated_activation<T: Scalar>(pre: &Tensor<T>) -> Result<Tensor<T>> {
    let (half, n) = split_channels(pre)?;
    let mut shape = pre.shape().to_vec();
    shape[0] = half;
    let mut out = Tensor::zeros(&shape);
    gate_planes(pre.data(), n, out.data_mut());
    Ok(out)
}

/// `dL/d(pre)` for [`gated_activation`].
pub fn gated_activation_backward<T: Scalar>(pre: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (half, _) = split_channels(pre)?;
    if grad_out.len() * 2 != pre.len() || grad_out.shape()[0] != half {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} does not match gated output of {:?}",
            grad_out.shape(),
            pre.shape()
        )));
    }
    let mut grad = Tensor::zeros(pre.shape());
    gate_backward_planes(pre.data(), grad_out.data(), grad.data_mut());
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pre(f: f64, g: f64) -> Tensor<f64> {
        Tensor::from_vec(&[2, 1], vec![f, g]).unwrap()
    }

    #[test]
    fn scalar_values() {
        assert_eq!(gated_activation(&pre(0.0, 0.0)).unwrap().data(), &[0.0]);
        let y = gated_activation(&pre(1.0, 0.0)).unwrap().data()[0];
        assert_relative_eq!(y, 1.0f64.tanh() * 0.5, epsilon = 1e-15);
        assert_relative_eq!(y, 0.380_797_078_0, epsilon = 1e-10);
        let y = gated_activation(&pre(40.0, 40.0)).unwrap().data()[0];
        assert_relative_eq!(y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_at_origin() {
        let g = gated_activation_backward(&pre(0.0, 0.0), &Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &(f, g) in &[(0.3, -1.2), (-2.0, 0.7), (1.5, 2.5)] {
            let grad = gated_activation_backward(&pre(f, g), &Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
            let y = |f: f64, g: f64| gated_activation(&pre(f, g)).unwrap().data()[0];
            let h = 1e-6;
            assert_relative_eq!(grad.data()[0], (y(f + h, g) - y(f - h, g)) / (2.0 * h), epsilon = 1e-8);
            assert_relative_eq!(grad.data()[1], (y(f, g + h) - y(f, g - h)) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let t = Tensor::<f64>::zeros(&[3, 2, 2]);
        assert!(matches!(gated_activation(&t), Err(Error::ShapeMismatch(_))));
    }
}
