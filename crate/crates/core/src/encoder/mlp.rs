use crate::error::Result;
use crate::numcore::{affine, affine_backward, tanh_act, tanh_backward, Param, SeededRng, Tensor};
use crate::scalar::Scalar;

/// Fully connected stack with tanh between layers and a linear output.
/// Layer `i` holds `{prefix}.mlp.{i}.W: [in x out]` and `.b: [out]`.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<(Param<T>, Param<T>)>,
}

/// Input to every affine layer (the first is the MLP input, the rest are
/// tanh outputs).
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Fan-in uniform weights, zero biases; optionally a zero output layer.
    pub fn new(prefix: &str, sizes: &[usize], zero_last: bool, rng: &mut SeededRng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (sizes[i], sizes[i + 1]);
                let w = if zero_last && i == n - 1 {
                    Param::zeros(format!("{prefix}.mlp.{i}.W"), &[fi, fo])
                } else {
                    Param::fan_in_uniform(format!("{prefix}.mlp.{i}.W"), &[fi, fo], fi, rng)
                };
                (w, Param::zeros(format!("{prefix}.mlp.{i}.b"), &[fo]))
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = affine(&h, w, b)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                tanh_act(&z)
            } else {
                z
            };
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients; returns the input gradient on request.
    pub fn backward(
        &mut self,
        cache: &MlpCache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut d = dy.clone();
        let n = self.layers.len();
        for i in (0..n).rev() {
            let (w, b) = &mut self.layers[i];
            let want = i > 0 || need_dx;
            let dx = affine_backward(&cache.inputs[i], &d, w, b, want)?;
            if i == 0 {
                return Some(dx);
            }
            d = tanh_backward(&cache.inputs[i], &dx);
        }
        None
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
        }
    }

    pub fn zero_output_layer(&mut self) {
        if let Some((w, b)) = self.layers.last_mut() {
            w.value.fill(T::zero());
            b.value.fill(T::zero());
        }
    }
}
