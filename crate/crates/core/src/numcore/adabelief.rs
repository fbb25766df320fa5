//! AdaBelief with decoupled weight decay.
//!
//! ```text
//! θ ← θ · (1 − lr · wd)
//! m ← β₁ m + (1 − β₁) g
//! s ← β₂ s + (1 − β₂) (g − m)² + ε
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (sqrt(s / (1 − β₂ᵗ)) + ε)
//! ```
//!
//! Gradients are zeroed after each step.

use serde::{Deserialize, Serialize};

use super::param::Param;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaBeliefConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Applies one update to every non-frozen parameter.
pub fn adabelief_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    cfg: &AdaBeliefConfig,
) -> Result<()> {
    let params: Vec<&mut Param<T>> = params.into_iter().filter(|p| !p.frozen).collect();
    // validate everything before touching any state
    for p in &params {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` at element {i}",
                p.name
            )));
        }
    }
    let lr = T::of(cfg.lr as f64);
    let b1 = T::of(cfg.beta1 as f64);
    let b2 = T::of(cfg.beta2 as f64);
    let eps = T::of(cfg.eps as f64);
    let decay = T::one() - lr * T::of(cfg.weight_decay as f64);
    for p in params {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let Param {
            value,
            grad,
            opt_m,
            opt_s,
            ..
        } = p;
        for (((v, g), m), s) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut())
            .zip(opt_m.data_mut())
            .zip(opt_s.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * *g;
            let diff = *g - *m;
            *s = b2 * *s + (T::one() - b2) * diff * diff + eps;
            let m_hat = *m / bc1;
            let s_hat = *s / bc2;
            *v *= decay;
            *v -= lr * m_hat / (s_hat.sqrt() + eps);
            *g = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    fn scalar_param(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = Param::new(
            "w",
            Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap(),
        );
        let before = p.value.clone();
        let cfg = AdaBeliefConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adabelief_step([&mut p], &cfg).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_size() {
        // m = 0.1, s = 0.001 * 0.81 (+eps); m_hat = 1, s_hat = 0.81 -> step = lr / 0.9
        let mut p = scalar_param(0.0, 1.0);
        let cfg = AdaBeliefConfig {
            weight_decay: 0.0,
            eps: 1e-16,
            ..Default::default()
        };
        adabelief_step([&mut p], &cfg).unwrap();
        let lr = cfg.lr as f64;
        assert!(
            (p.value.data()[0] + lr / 0.9).abs() < 1e-9,
            "{}",
            p.value.data()[0]
        );
        assert_eq!(p.grad.data()[0], 0.0);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn symmetric_parameters_move_identically() {
        let mut a = scalar_param(0.3, 0.7);
        let mut b = scalar_param(0.3, 0.7);
        for _ in 0..5 {
            a.grad.data_mut()[0] = 0.7;
            b.grad.data_mut()[0] = 0.7;
            adabelief_step([&mut a, &mut b], &AdaBeliefConfig::default()).unwrap();
        }
        assert_eq!(a.value.data()[0].to_bits(), b.value.data()[0].to_bits());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ok = scalar_param(1.0, 0.1);
        let mut bad = scalar_param(1.0, f64::NAN);
        bad.name = "head.W".into();
        let err = adabelief_step([&mut ok, &mut bad], &AdaBeliefConfig::default()).unwrap_err();
        assert!(err.to_string().contains("head.W"));
        assert_eq!(ok.value.data()[0], 1.0, "no partial update");
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = scalar_param(1.0, 0.5);
        p.frozen = true;
        adabelief_step([&mut p], &AdaBeliefConfig::default()).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn bit_reproducible() {
        let run = || {
            let mut p = Param::new("w", Tensor::from_fn(&[4], |i| i as f32 * 0.1));
            for k in 0..10 {
                for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = ((k * 4 + i) as f32 * 0.37).sin();
                }
                adabelief_step([&mut p], &AdaBeliefConfig::default()).unwrap();
            }
            p.value.into_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::new("w", Tensor::from_vec(&[2], vec![3.0f64, -2.0]).unwrap());
        let cfg = AdaBeliefConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..2000 {
            let v = p.value.data().to_vec();
            for (g, x) in p.grad.data_mut().iter_mut().zip(v) {
                *g = 2.0 * x;
            }
            adabelief_step([&mut p], &cfg).unwrap();
        }
        assert!(
            p.value.data().iter().all(|v| v.abs() < 1e-2),
            "{:?}",
            p.value.data()
        );
    }
}
