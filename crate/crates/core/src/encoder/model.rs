//! The full encoder: adapter → RetinaMapper / LayerSelector / pooled branch →
//! per-voxel linear heads.
//!
//! Training code drives the pieces directly so that the position-conditioned
//! MLPs run once per minibatch while the adapter runs once per image:
//! [`EncoderModel::topy_forward`] → per image [`EncoderModel::image_forward`],
//! [`EncoderModel::readout`], [`EncoderModel::readout_backward`],
//! [`EncoderModel::image_backward`] → [`EncoderModel::topy_backward`].

use serde::{Deserialize, Serialize};

use super::adapter::{swap_outer, Adapter, AdapterBlock, AdapterCache};
use super::config::{EncoderConfig, ADAPTER_BLOCKS};
use super::mlp::{Mlp, MlpCache};
use super::pe::positional_encode;
use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::numcore::sample::{sample_point, sample_point_backward};
use crate::numcore::{
    global_pools, global_pools_backward, softmax_rows, softmax_rows_backward, tanh_act,
    tanh_backward, Param, PoolCache, SeededRng, Tensor,
};
use crate::scalar::Scalar;

/// Retina coordinates are kept strictly inside the sampling domain.
pub const U_LIMIT: f64 = 1.0 - 1e-6;

const TAG_ADAPTER: u64 = 1;
const TAG_MAPPER: u64 = 2;
const TAG_SELECTOR: u64 = 3;
const TAG_POOLED: u64 = 4;
const TAG_HEADS: u64 = 5;

#[derive(Clone, Debug)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub adapter: Adapter<T>,
    pub mapper: Mlp<T>,
    pub selector: Mlp<T>,
    pub pooled: Mlp<T>,
    /// `[N x D]`
    pub head_w: Param<T>,
    /// `[N]`
    pub head_b: Param<T>,
}

/// Trainable parameter count split into the shared trunk and the `N(D+1)`
/// per-voxel heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trunk: usize,
    pub heads: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trunk + self.heads
    }
}

/// Position-conditioned outputs for a set of voxels.
#[derive(Clone, Debug)]
pub struct TopyCache<T> {
    /// `[V x 2]`, noise-free.
    pub u: Tensor<T>,
    /// `[V x L]`
    pub eta: Tensor<T>,
    map: MlpCache<T>,
    sel: MlpCache<T>,
}

/// Adapter output and pooled-branch state for one image.
#[derive(Clone, Debug)]
pub struct ImageCache<T> {
    /// `[L x D x G x G]`
    pub m: Tensor<T>,
    /// `[L x D]`, zero when the pooled branch is disabled.
    pub q: Tensor<T>,
    adapter: AdapterCache<T>,
    pools: Vec<PoolCache>,
    pooled: Option<MlpCache<T>>,
}

/// Per-voxel intermediate values of one image's readout.
#[derive(Clone, Debug)]
pub struct Readout<T> {
    /// `[n x L x D]`: `sample(M^l, u) + q^l`.
    pub samples: Vec<T>,
    /// `[n x D]`
    pub mstar: Vec<T>,
    /// `[n]`
    pub pred: Vec<T>,
}

/// Adds `N(0, σ²)` to every coordinate and clamps to `±U_LIMIT`. The mask is
/// false where the clamp was active (zero gradient there).
pub fn jitter<T: Scalar>(u: &[T], sigma: f32, rng: &mut SeededRng) -> (Vec<T>, Vec<bool>) {
    let lim = T::of(U_LIMIT);
    let mut mask = vec![true; u.len()];
    let out = u
        .iter()
        .zip(mask.iter_mut())
        .map(|(&v, m)| {
            let z = v + T::of(sigma as f64 * rng.normal());
            if z > lim || z < -lim {
                *m = false;
            }
            z.max(-lim).min(lim)
        })
        .collect();
    (out, mask)
}

impl<T: Scalar> Mlp<T> {
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.cast(), b.cast()))
                .collect(),
        }
    }
}

impl<T: Scalar> Adapter<T> {
    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter {
            blocks: self
                .blocks
                .iter()
                .map(|b| AdapterBlock {
                    conv_k: b.conv_k.cast(),
                    conv_b: b.conv_b.cast(),
                    ln_gamma: b.ln_gamma.cast(),
                    ln_beta: b.ln_beta.cast(),
                })
                .collect(),
            final_k: self.final_k.cast(),
            final_b: self.final_b.cast(),
            eps: U::of(self.eps.to_f64_lossless()),
        }
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Fresh model for `n_voxels` heads. The mapper and selector output
    /// layers start at zero (centre mapping, uniform layers); so does the
    /// pooled branch output.
    pub fn new(config: EncoderConfig, n_voxels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, d, l, h) = (
            config.in_channels,
            config.out_dim,
            config.layers,
            config.hidden,
        );
        let pe = config.pe_dim();
        let adapter = Adapter::new(
            ADAPTER_BLOCKS,
            c,
            d,
            config.ln_eps,
            &mut SeededRng::derive(seed, &[TAG_ADAPTER]),
        );
        let mapper = Mlp::new(
            "mapper",
            &[pe, h, h, 2],
            true,
            &mut SeededRng::derive(seed, &[TAG_MAPPER]),
        );
        let selector = Mlp::new(
            "selector",
            &[pe, h, h, l],
            true,
            &mut SeededRng::derive(seed, &[TAG_SELECTOR]),
        );
        let pooled = Mlp::new(
            "pooled",
            &[2 * d, config.pooled_hidden, d],
            true,
            &mut SeededRng::derive(seed, &[TAG_POOLED]),
        );
        let head_w = Param::fan_in_uniform(
            "head.W",
            &[n_voxels, d],
            d,
            &mut SeededRng::derive(seed, &[TAG_HEADS]),
        );
        let head_b = Param::zeros("head.b", &[n_voxels]);
        Ok(Self {
            config,
            adapter,
            mapper,
            selector,
            pooled,
            head_w,
            head_b,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.head_b.len()
    }

    /// Every parameter in a fixed order: adapter, mapper, selector, pooled, heads.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.adapter.params();
        v.extend(self.mapper.params());
        v.extend(self.selector.params());
        v.extend(self.pooled.params());
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.adapter.params_mut();
        v.extend(self.mapper.params_mut());
        v.extend(self.selector.params_mut());
        v.extend(self.pooled.params_mut());
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let heads = self.head_w.len() + self.head_b.len();
        let total: usize = self.params().iter().map(|p| p.len()).sum();
        ParamCount {
            trunk: total - heads,
            heads,
        }
    }

    pub fn freeze_mapper(&mut self, frozen: bool) {
        self.mapper.set_frozen(frozen);
    }

    pub fn freeze_selector(&mut self, frozen: bool) {
        self.selector.set_frozen(frozen);
    }

    /// FrozenRM: every voxel maps to the grid centre, no jitter.
    pub fn pin_mapper_to_center(&mut self) {
        self.mapper.zero_output_layer();
        self.mapper.set_frozen(true);
        self.config.sigma = 0.0;
    }

    /// FrozenLS: uniform layer weights.
    pub fn pin_selector_uniform(&mut self) {
        self.selector.zero_output_layer();
        self.selector.set_frozen(true);
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            adapter: self.adapter.cast(),
            mapper: self.mapper.cast(),
            selector: self.selector.cast(),
            pooled: self.pooled.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Copy keeping only the listed heads (optimizer state included).
    pub fn select_heads(&self, heads: &[usize]) -> Result<Self> {
        let (n, d) = (self.n_voxels(), self.config.out_dim);
        if let Some(&bad) = heads.iter().find(|&&h| h >= n) {
            return Err(Error::Invalid(format!(
                "head index {bad} out of range ({n} voxels)"
            )));
        }
        let rows = |t: &Tensor<T>, width: usize| {
            let mut out = Vec::with_capacity(heads.len() * width);
            for &h in heads {
                out.extend_from_slice(&t.data()[h * width..(h + 1) * width]);
            }
            out
        };
        let pick = |p: &Param<T>, width: usize, shape: &[usize]| Param {
            name: p.name.clone(),
            value: Tensor::from_vec(shape, rows(&p.value, width)).expect("head shape"),
            grad: Tensor::from_vec(shape, rows(&p.grad, width)).expect("head shape"),
            opt_m: Tensor::from_vec(shape, rows(&p.opt_m, width)).expect("head shape"),
            opt_s: Tensor::from_vec(shape, rows(&p.opt_s, width)).expect("head shape"),
            step_count: p.step_count,
            frozen: p.frozen,
        };
        let mut out = self.clone();
        out.head_w = pick(&self.head_w, d, &[heads.len(), d]);
        out.head_b = pick(&self.head_b, 1, &[heads.len()]);
        Ok(out)
    }

    // ---- position-conditioned branch ----

    pub fn topy_forward(&self, coords: &[[f32; 3]]) -> Result<TopyCache<T>> {
        let pe = positional_encode::<T>(coords, self.config.pe_freqs);
        let (zu, map) = self.mapper.forward(&pe)?;
        let (zl, sel) = self.selector.forward(&pe)?;
        Ok(TopyCache {
            u: tanh_act(&zu),
            eta: softmax_rows(&zl),
            map,
            sel,
        })
    }

    /// Back-propagates `du: [V x 2]` and `deta: [V x L]` into the mapper and
    /// selector (skipped when frozen).
    pub fn topy_backward(&mut self, cache: &TopyCache<T>, du: &Tensor<T>, deta: &Tensor<T>) {
        if !self.mapper.is_frozen() {
            let dz = tanh_backward(&cache.u, du);
            self.mapper.backward(&cache.map, &dz, false);
        }
        if !self.selector.is_frozen() {
            let dz = softmax_rows_backward(&cache.eta, deta);
            self.selector.backward(&cache.sel, &dz, false);
        }
    }

    /// `u = tanh(MLP(PE(p)))`, plus clamped jitter when training.
    pub fn retina_map(
        &self,
        coords: &[[f32; 3]],
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Tensor<T>> {
        let pe = positional_encode::<T>(coords, self.config.pe_freqs);
        let u = tanh_act(&self.mapper.infer(&pe)?);
        if training && self.config.sigma > 0.0 {
            let (j, _) = jitter(u.data(), self.config.sigma, rng);
            return Tensor::from_vec(u.shape(), j);
        }
        Ok(u)
    }

    pub fn layer_select(&self, coords: &[[f32; 3]]) -> Result<Tensor<T>> {
        let pe = positional_encode::<T>(coords, self.config.pe_freqs);
        Ok(softmax_rows(&self.selector.infer(&pe)?))
    }

    // ---- per-image branch ----

    fn check_raw(&self, raw: &[f32]) -> Result<()> {
        let c = &self.config;
        let want = c.layers * c.in_channels * c.grid * c.grid;
        if raw.len() != want {
            return Err(Error::shape(
                "image_forward",
                format!("{want} feature values"),
                raw.len(),
            ));
        }
        Ok(())
    }

    /// Runs the adapter over all layers of one image (`raw: [L x D_in x G x G]`)
    /// and the pooled branch.
    pub fn image_forward(&self, raw: &[f32]) -> Result<ImageCache<T>> {
        self.check_raw(raw)?;
        let c = &self.config;
        let (l, cin, d, gg) = (c.layers, c.in_channels, c.out_dim, c.grid * c.grid);
        let x: Vec<T> = swap_outer(raw, l, cin, gg)
            .into_iter()
            .map(<T as Scalar>::from_f32)
            .collect();
        let x = Tensor::from_vec(&[cin, l, c.grid, c.grid], x)?;
        let (y, adapter) = self.adapter.forward(x)?;
        let m = Tensor::from_vec(&[l, d, c.grid, c.grid], swap_outer(y.data(), d, l, gg))?;
        let mut q = Tensor::zeros(&[l, d]);
        let mut pools = Vec::new();
        let mut pooled = None;
        if c.global_pool {
            let mut pin = Tensor::zeros(&[l, 2 * d]);
            for li in 0..l {
                let grid = Tensor::from_vec(&[d, c.grid, c.grid], m.slab(li).to_vec())?;
                let (p, pc) = global_pools(&grid)?;
                pin.slab_mut(li).copy_from_slice(p.data());
                pools.push(pc);
            }
            let (out, mc) = self.pooled.forward(&pin)?;
            q = out;
            pooled = Some(mc);
        }
        Ok(ImageCache {
            m,
            q,
            adapter,
            pools,
            pooled,
        })
    }

    /// `dm: [L x D x G x G]`, `dq: [L x D]`.
    pub fn image_backward(
        &mut self,
        cache: &ImageCache<T>,
        mut dm: Tensor<T>,
        dq: &Tensor<T>,
    ) -> Result<()> {
        let c = &self.config;
        let (l, d, g) = (c.layers, c.out_dim, c.grid);
        if let Some(mc) = &cache.pooled {
            let dpin = self
                .pooled
                .backward(mc, dq, true)
                .expect("input gradient requested");
            for li in 0..l {
                global_pools_backward(&cache.pools[li], dpin.slab(li), dm.slab_mut(li));
            }
        }
        let dy = Tensor::from_vec(&[d, l, g, g], swap_outer(dm.data(), l, d, g * g))?;
        self.adapter.backward(&cache.adapter, &dy);
        Ok(())
    }

    /// Predictions of heads `heads[k]` at retina points `u[k]` with layer
    /// weights `eta[k]` (row-major `[n x 2]` and `[n x L]`).
    pub fn readout(&self, img: &ImageCache<T>, u: &[T], eta: &[T], heads: &[usize]) -> Readout<T> {
        let c = &self.config;
        let (l, d, g) = (c.layers, c.out_dim, c.grid);
        let n = heads.len();
        let mut samples = vec![T::zero(); n * l * d];
        let mut mstar = vec![T::zero(); n * d];
        let mut pred = vec![T::zero(); n];
        let w = self.head_w.value.data();
        let b = self.head_b.value.data();
        for k in 0..n {
            let ms = &mut mstar[k * d..(k + 1) * d];
            for li in 0..l {
                let s = &mut samples[(k * l + li) * d..][..d];
                sample_point(img.m.slab(li), d, g, u[2 * k], u[2 * k + 1], s);
                let e = eta[k * l + li];
                for ((sv, qv), mv) in s.iter_mut().zip(img.q.slab(li)).zip(ms.iter_mut()) {
                    *sv += *qv;
                    *mv += e * *sv;
                }
            }
            let h = heads[k];
            let wr = &w[h * d..(h + 1) * d];
            pred[k] = b[h] + ms.iter().zip(wr).map(|(a, b)| *a * *b).sum::<T>();
        }
        Readout {
            samples,
            mstar,
            pred,
        }
    }

    /// Back-propagates `dpred` through one readout, accumulating head
    /// gradients and adding into `du`, `deta`, `dm` and `dq`.
    #[allow(clippy::too_many_arguments)]
    pub fn readout_backward(
        &mut self,
        img: &ImageCache<T>,
        u: &[T],
        eta: &[T],
        heads: &[usize],
        ro: &Readout<T>,
        dpred: &[T],
        du: &mut [T],
        deta: &mut [T],
        dm: &mut Tensor<T>,
        dq: &mut Tensor<T>,
    ) {
        let c = &self.config;
        let (l, d, g) = (c.layers, c.out_dim, c.grid);
        let gg = g * g;
        let mut dms = vec![T::zero(); d];
        let mut ds = vec![T::zero(); d];
        for (k, &h) in heads.iter().enumerate() {
            let gk = dpred[k];
            if gk == T::zero() {
                continue;
            }
            let ms = &ro.mstar[k * d..(k + 1) * d];
            if !self.head_w.frozen {
                for (gw, &m) in self.head_w.grad.data_mut()[h * d..(h + 1) * d]
                    .iter_mut()
                    .zip(ms)
                {
                    *gw += gk * m;
                }
            }
            if !self.head_b.frozen {
                self.head_b.grad.data_mut()[h] += gk;
            }
            let wr = &self.head_w.value.data()[h * d..(h + 1) * d];
            for (o, &wv) in dms.iter_mut().zip(wr) {
                *o = gk * wv;
            }
            for li in 0..l {
                let s = &ro.samples[(k * l + li) * d..][..d];
                deta[k * l + li] += s.iter().zip(&dms).map(|(a, b)| *a * *b).sum::<T>();
                let e = eta[k * l + li];
                for (o, &v) in ds.iter_mut().zip(&dms) {
                    *o = e * v;
                }
                for (qg, &v) in dq.slab_mut(li).iter_mut().zip(&ds) {
                    *qg += v;
                }
                let dml = &mut dm.data_mut()[li * d * gg..(li + 1) * d * gg];
                let (gx, gy) = sample_point_backward(
                    img.m.slab(li),
                    d,
                    g,
                    u[2 * k],
                    u[2 * k + 1],
                    &ds,
                    Some(dml),
                );
                du[2 * k] += gx;
                du[2 * k + 1] += gy;
            }
        }
    }

    /// Inference (or jittered training-mode) predictions for a subset of
    /// voxels on one image. `coords` covers all voxels of the model.
    pub fn forward(
        &self,
        raw: &[f32],
        coords: &[[f32; 3]],
        voxels: &[usize],
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Vec<T>> {
        let n = self.n_voxels();
        if coords.len() != n {
            return Err(Error::shape(
                "forward",
                format!("{n} voxel coordinates"),
                coords.len(),
            ));
        }
        if let Some(&bad) = voxels.iter().find(|&&v| v >= n) {
            return Err(Error::Invalid(format!(
                "voxel index {bad} out of range ({n} voxels)"
            )));
        }
        let sub: Vec<[f32; 3]> = voxels.iter().map(|&v| coords[v]).collect();
        let topy = self.topy_forward(&sub)?;
        let u = if training && self.config.sigma > 0.0 {
            jitter(topy.u.data(), self.config.sigma, rng).0
        } else {
            topy.u.data().to_vec()
        };
        let img = self.image_forward(raw)?;
        Ok(self.readout(&img, &u, topy.eta.data(), voxels).pred)
    }

    /// Deterministic predictions `[images x voxels]` (row-major) over a
    /// feature store.
    pub fn predict(
        &self,
        store: &FeatureStore,
        images: &[usize],
        coords: &[[f32; 3]],
        voxels: &[usize],
    ) -> Result<Vec<T>> {
        let sub: Vec<[f32; 3]> = voxels.iter().map(|&v| coords[v]).collect();
        if let Some(&bad) = voxels
            .iter()
            .find(|&&v| v >= self.n_voxels() || v >= coords.len())
        {
            return Err(Error::Invalid(format!("voxel index {bad} out of range")));
        }
        let topy = self.topy_forward(&sub)?;
        let mut out = Vec::with_capacity(images.len() * voxels.len());
        for &i in images {
            let img = self.image_forward(store.image(i))?;
            out.extend(
                self.readout(&img, topy.u.data(), topy.eta.data(), voxels)
                    .pred,
            );
        }
        Ok(out)
    }
}

impl EncoderModel<f32> {
    /// Fresh model for a feature store's shape with the spec's ablation
    /// pins applied.
    pub fn from_spec(
        spec: &super::config::ModelSpec,
        store: &FeatureStore,
        n_voxels: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut m = Self::new(
            spec.config(store.layers, store.channels, store.grid),
            n_voxels,
            seed,
        )?;
        if spec.frozen_rm {
            m.pin_mapper_to_center();
        }
        if spec.frozen_ls {
            m.pin_selector_uniform();
        }
        Ok(m)
    }
}
