use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Trainable tensor with its gradient accumulator and optimizer moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub opt_m: Tensor<T>,
    pub opt_s: Tensor<T>,
    pub step_count: u64,
    /// Frozen parameters neither accumulate gradients nor take optimizer steps.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            opt_m: Tensor::zeros(&shape),
            opt_s: Tensor::zeros(&shape),
            step_count: 0,
            frozen: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::new(
            name,
            Tensor::from_fn(shape, |_| T::of(rng.uniform_in(-bound, bound))),
        )
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Copy of this parameter in another scalar type (values, moments and
    /// gradients all converted).
    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            opt_m: self.opt_m.cast(),
            opt_s: self.opt_s.cast(),
            step_count: self.step_count,
            frozen: self.frozen,
        }
    }
}
