use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Value and slope of the smooth L1 penalty at residual `d`.
#[inline]
pub fn smooth_l1_elem<T: Scalar>(d: T, beta: T) -> (f64, T) {
    let ad = d.abs();
    if ad < beta {
        let v = T::of(0.5) * d * d / beta;
        (v.to_f64_lossless(), d / beta)
    } else {
        let v = ad - T::of(0.5) * beta;
        (v.to_f64_lossless(), d.signum())
    }
}

/// Mean smooth L1 loss and its gradient with respect to `pred`.
pub fn smooth_l1<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    beta: T,
) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "smooth_l1",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    if beta <= T::zero() {
        return Err(Error::Invalid("smooth_l1 beta must be positive".into()));
    }
    let n = pred.len();
    if n == 0 {
        return Ok((0.0, Tensor::zeros(pred.shape())));
    }
    let inv = T::one() / T::of(n as f64);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let (v, s) = smooth_l1_elem(p - t, beta);
        total += v;
        *g = s * inv;
    }
    Ok((total / n as f64, grad))
}

/// Mean over rows of `sum_l eta_l ln eta_l` (with `0 ln 0 = 0`) and its
/// gradient with respect to `eta`.
pub fn neg_entropy<T: Scalar>(eta: &Tensor<T>) -> (f64, Tensor<T>) {
    let l = *eta.shape().last().unwrap_or(&0);
    let rows = if l == 0 { 0 } else { eta.len() / l };
    let mut grad = Tensor::zeros(eta.shape());
    if rows == 0 {
        return (0.0, grad);
    }
    let inv = T::one() / T::of(rows as f64);
    let mut total = 0.0f64;
    for (g, &e) in grad.data_mut().iter_mut().zip(eta.data()) {
        let safe = e.max(T::min_positive_value());
        if e > T::zero() {
            total += (e * e.ln()).to_f64_lossless();
        }
        *g = (safe.ln() + T::one()) * inv;
    }
    (total / rows as f64, grad)
}
