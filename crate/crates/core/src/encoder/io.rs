//! Encoder ↔ `VXC1` checkpoint mapping and a finite-difference harness.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use super::config::EncoderConfig;
use super::model::EncoderModel;
use crate::data::CheckpointFile;
use crate::error::{Error, Result};
use crate::numcore::{GradCheckable, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &str = "voxelcast-encoder";

impl<T: Scalar> EncoderModel<T> {
    /// Every parameter by name; with `with_optimizer`, also `{name}.opt_m`,
    /// `{name}.opt_s` and per-parameter step counts in the header.
    pub fn to_checkpoint(&self, with_optimizer: bool) -> CheckpointFile {
        let frozen: Vec<&str> = self
            .params()
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.name.as_str())
            .collect();
        let mut meta = json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "n_voxels": self.n_voxels(),
            "frozen": frozen,
        });
        if with_optimizer {
            let steps: BTreeMap<&str, u64> = self
                .params()
                .iter()
                .map(|p| (p.name.as_str(), p.step_count))
                .collect();
            meta["steps"] = json!(steps);
        }
        let mut ck = CheckpointFile::new(meta);
        let f32s = |t: &Tensor<T>| {
            t.data()
                .iter()
                .map(|v| v.to_f32_lossy())
                .collect::<Vec<f32>>()
        };
        for p in self.params() {
            ck.push(p.name.clone(), p.shape(), f32s(&p.value));
            if with_optimizer {
                ck.push(format!("{}.opt_m", p.name), p.shape(), f32s(&p.opt_m));
                ck.push(format!("{}.opt_s", p.name), p.shape(), f32s(&p.opt_s));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &CheckpointFile) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Invalid("checkpoint does not hold an encoder".into()));
        }
        let config: EncoderConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let n = ck.meta["n_voxels"]
            .as_u64()
            .ok_or_else(|| Error::Invalid("checkpoint header lacks n_voxels".into()))?
            as usize;
        let frozen: Vec<String> =
            serde_json::from_value(ck.meta.get("frozen").cloned().unwrap_or(json!([])))?;
        let steps: BTreeMap<String, u64> =
            serde_json::from_value(ck.meta.get("steps").cloned().unwrap_or(json!({})))?;
        let mut model = Self::new(config, n, 0)?;
        let load = |data: &[f32]| {
            data.iter()
                .map(|&v| <T as Scalar>::from_f32(v))
                .collect::<Vec<T>>()
        };
        for p in model.params_mut() {
            let shape = p.shape().to_vec();
            p.value = Tensor::from_vec(&shape, load(ck.require(&p.name, &shape)?))?;
            if let Some(m) = ck.get(&format!("{}.opt_m", p.name)) {
                p.opt_m = Tensor::from_vec(&shape, load(&m.data))?;
            }
            if let Some(s) = ck.get(&format!("{}.opt_s", p.name)) {
                p.opt_s = Tensor::from_vec(&shape, load(&s.data))?;
            }
            p.step_count = steps.get(&p.name).copied().unwrap_or(0);
            p.frozen = frozen.contains(&p.name);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        self.to_checkpoint(with_optimizer).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&CheckpointFile::load(path)?)
    }
}

/// Finite-difference target over the trainable (non-frozen) parameters of
/// an f32 model. `loss` sees an f64 copy so the objective is accumulated in
/// f64; `grad` must accumulate into the f32 model's (zeroed) gradients.
pub struct ModelObjective<L, G> {
    pub model: EncoderModel<f32>,
    loss: L,
    grad: G,
}

impl<L, G> ModelObjective<L, G>
where
    L: FnMut(&EncoderModel<f64>) -> f64,
    G: FnMut(&mut EncoderModel<f32>),
{
    pub fn new(model: EncoderModel<f32>, loss: L, grad: G) -> Self {
        Self { model, loss, grad }
    }

    fn trainable(&self) -> Vec<usize> {
        self.model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.frozen)
            .map(|(i, _)| i)
            .collect()
    }
}

impl<L, G> GradCheckable for ModelObjective<L, G>
where
    L: FnMut(&EncoderModel<f64>) -> f64,
    G: FnMut(&mut EncoderModel<f32>),
{
    fn param_sizes(&self) -> Vec<(String, usize)> {
        let ps = self.model.params();
        self.trainable()
            .into_iter()
            .map(|i| (ps[i].name.clone(), ps[i].len()))
            .collect()
    }

    fn get(&self, param: usize, index: usize) -> f64 {
        let i = self.trainable()[param];
        self.model.params()[i].value.data()[index] as f64
    }

    fn set(&mut self, param: usize, index: usize, value: f64) {
        let i = self.trainable()[param];
        self.model.params_mut()[i].value.data_mut()[index] = value as f32;
    }

    fn loss(&mut self) -> f64 {
        (self.loss)(&self.model.cast())
    }

    fn analytic_grad(&mut self) -> Vec<Vec<f64>> {
        self.model.zero_grad();
        (self.grad)(&mut self.model);
        let ps = self.model.params();
        self.trainable()
            .into_iter()
            .map(|i| ps[i].grad.data().iter().map(|g| *g as f64).collect())
            .collect()
    }
}
