//! Residual conv adapter shared across backbone layers.
//!
//! Each block computes `x ← LN(conv5x5(x)) + x` with LayerNorm over channels
//! at every grid position; a final 5×5 conv maps `C → D`. All layers of one
//! image run as a single batch: activations are laid out `[C x L x G x G]`.

use crate::error::Result;
use crate::numcore::{
    conv2d_same, conv2d_same_backward, layernorm, layernorm_backward, ChannelAxis, ConvCache,
    LayerNormCache, Param, SeededRng, Tensor, KERNEL,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdapterBlock<T> {
    pub conv_k: Param<T>,
    pub conv_b: Param<T>,
    pub ln_gamma: Param<T>,
    pub ln_beta: Param<T>,
}

#[derive(Clone, Debug)]
pub struct Adapter<T> {
    pub blocks: Vec<AdapterBlock<T>>,
    pub final_k: Param<T>,
    pub final_b: Param<T>,
    pub eps: T,
}

#[derive(Clone, Debug)]
pub struct AdapterCache<T> {
    convs: Vec<ConvCache<T>>,
    norms: Vec<LayerNormCache<T>>,
    last: ConvCache<T>,
}

/// `[a][b][inner] → [b][a][inner]`.
pub fn swap_outer<T: Copy + Default>(src: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * inner..][..inner]
                .copy_from_slice(&src[(i * b + j) * inner..][..inner]);
        }
    }
    out
}

impl<T: Scalar> Adapter<T> {
    /// Block convs are fan-in uniform with LayerNorm gain zero, so every
    /// block starts as the identity; the final conv starts as a centre-tap
    /// identity on the first `min(C, D)` channels.
    pub fn new(blocks: usize, c: usize, d: usize, eps: f32, rng: &mut SeededRng) -> Self {
        let k = KERNEL;
        let blocks = (0..blocks)
            .map(|i| AdapterBlock {
                conv_k: Param::fan_in_uniform(
                    format!("adapter.block{i}.conv.K"),
                    &[c, c, k, k],
                    c * k * k,
                    rng,
                ),
                conv_b: Param::zeros(format!("adapter.block{i}.conv.b"), &[c]),
                ln_gamma: Param::zeros(format!("adapter.block{i}.ln.gamma"), &[c]),
                ln_beta: Param::zeros(format!("adapter.block{i}.ln.beta"), &[c]),
            })
            .collect();
        let mut fk = Tensor::zeros(&[d, c, k, k]);
        for i in 0..c.min(d) {
            fk.set(&[i, i, k / 2, k / 2], T::one());
        }
        Self {
            blocks,
            final_k: Param::new("adapter.final.K", fk),
            final_b: Param::zeros("adapter.final.b", &[d]),
            eps: T::of(eps as f64),
        }
    }

    /// `x: [C x L x G x G]` → `[D x L x G x G]`.
    pub fn forward(&self, x: Tensor<T>) -> Result<(Tensor<T>, AdapterCache<T>)> {
        let mut convs = Vec::with_capacity(self.blocks.len());
        let mut norms = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for blk in &self.blocks {
            let (z, cc) = conv2d_same(&h, &blk.conv_k, &blk.conv_b)?;
            let (mut n, lc) = layernorm(
                &z,
                &blk.ln_gamma,
                &blk.ln_beta,
                self.eps,
                ChannelAxis::First,
            )?;
            n.add_assign(&h);
            h = n;
            convs.push(cc);
            norms.push(lc);
        }
        let (y, last) = conv2d_same(&h, &self.final_k, &self.final_b)?;
        Ok((y, AdapterCache { convs, norms, last }))
    }

    /// Accumulates parameter gradients from `dy: [D x L x G x G]`.
    pub fn backward(&mut self, cache: &AdapterCache<T>, dy: &Tensor<T>) {
        let need_blocks = self
            .blocks
            .iter()
            .any(|b| !b.conv_k.frozen || !b.ln_gamma.frozen);
        let Some(mut dh) = conv2d_same_backward(
            &cache.last,
            dy,
            &mut self.final_k,
            &mut self.final_b,
            need_blocks,
        ) else {
            return;
        };
        for (i, blk) in self.blocks.iter_mut().enumerate().rev() {
            let dz = layernorm_backward(&cache.norms[i], &dh, &mut blk.ln_gamma, &mut blk.ln_beta);
            let dx = conv2d_same_backward(
                &cache.convs[i],
                &dz,
                &mut blk.conv_k,
                &mut blk.conv_b,
                i > 0,
            );
            if let Some(dx) = dx {
                dh.add_assign(&dx);
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([&b.conv_k, &b.conv_b, &b.ln_gamma, &b.ln_beta]);
        }
        v.extend([&self.final_k, &self.final_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend([
                &mut b.conv_k,
                &mut b.conv_b,
                &mut b.ln_gamma,
                &mut b.ln_beta,
            ]);
        }
        v.extend([&mut self.final_k, &mut self.final_b]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_outer_round_trip() {
        let v: Vec<i32> = (0..24).collect();
        let s = swap_outer(&v, 2, 3, 4);
        assert_eq!(&s[4..8], &[12, 13, 14, 15]);
        assert_eq!(swap_outer(&s, 3, 2, 4), v);
    }
}
