//! Central finite-difference verification of hand-derived gradients.

use std::fmt;

use super::param::Param;
use super::rng::SeededRng;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Something whose parameters can be perturbed coordinate by coordinate.
pub trait GradCheckable {
    /// `(name, element count)` per parameter tensor.
    fn param_sizes(&self) -> Vec<(String, usize)>;
    fn get(&self, param: usize, index: usize) -> f64;
    fn set(&mut self, param: usize, index: usize, value: f64);
    /// Objective value, accumulated in f64.
    fn loss(&mut self) -> f64;
    /// Analytic gradient per parameter tensor, flattened.
    fn analytic_grad(&mut self) -> Vec<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor (all of them when smaller).
    pub coords_per_param: usize,
    /// Denominator floor, relative to the largest analytic gradient magnitude.
    /// Coordinates whose true derivative is far below the overall gradient
    /// scale are compared in absolute terms at that scale.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-3,
            coords_per_param: 32,
            rel_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Worst coordinates, largest error first.
    pub worst: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(self.to_string()))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} (tol {:.1e})",
            self.checked, self.max_rel_err, self.tol
        )?;
        for c in self.worst.iter().take(5) {
            write!(
                f,
                "; {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
                c.param, c.index, c.analytic, c.numeric, c.rel_err
            )?;
        }
        Ok(())
    }
}

/// Compares analytic gradients against `(f(θ+h) − f(θ−h)) / 2h` on a seeded
/// random subsample of coordinates.
pub fn grad_check<G: GradCheckable + ?Sized>(
    target: &mut G,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert!(cfg.h > 0.0, "finite-difference step must be positive");
    let analytic = target.analytic_grad();
    let sizes = target.param_sizes();
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (cfg.rel_floor * scale).max(f64::MIN_POSITIVE);
    let mut rng = SeededRng::new(cfg.seed);
    let mut coords = Vec::new();
    for (p, (name, n)) in sizes.iter().enumerate() {
        let picks = if *n <= cfg.coords_per_param {
            (0..*n).collect()
        } else {
            rng.sample_indices(*n, cfg.coords_per_param)
        };
        for i in picks {
            let orig = target.get(p, i);
            target.set(p, i, orig + cfg.h);
            let hi = target.get(p, i);
            let f_hi = target.loss();
            target.set(p, i, orig - cfg.h);
            let lo = target.get(p, i);
            let f_lo = target.loss();
            target.set(p, i, orig);
            // Divide by the realised step: storage rounding may shift it.
            let numeric = (f_hi - f_lo) / (hi - lo);
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel_err = if a == numeric {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            coords.push(CoordReport {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    coords.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = coords.first().map_or(0.0, |c| c.rel_err);
    let checked = coords.len();
    coords.truncate(10);
    GradCheckReport {
        checked,
        max_rel_err,
        tol: cfg.tol,
        worst: coords,
    }
}

/// Adapter turning a parameter list plus two closures into a
/// [`GradCheckable`]. `loss` evaluates the objective; `grad` must fill the
/// parameters' `grad` fields (they are zeroed beforehand).
pub struct ParamObjective<T: Scalar, L, G> {
    pub params: Vec<Param<T>>,
    loss: L,
    grad: G,
}

impl<T, L, G> ParamObjective<T, L, G>
where
    T: Scalar,
    L: FnMut(&[Param<T>]) -> f64,
    G: FnMut(&mut [Param<T>]),
{
    pub fn new(params: Vec<Param<T>>, loss: L, grad: G) -> Self {
        Self { params, loss, grad }
    }
}

impl<T, L, G> GradCheckable for ParamObjective<T, L, G>
where
    T: Scalar,
    L: FnMut(&[Param<T>]) -> f64,
    G: FnMut(&mut [Param<T>]),
{
    fn param_sizes(&self) -> Vec<(String, usize)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.len()))
            .collect()
    }

    fn get(&self, param: usize, index: usize) -> f64 {
        self.params[param].value.data()[index].to_f64_lossless()
    }

    fn set(&mut self, param: usize, index: usize, value: f64) {
        self.params[param].value.data_mut()[index] = T::of(value);
    }

    fn loss(&mut self) -> f64 {
        (self.loss)(&self.params)
    }

    fn analytic_grad(&mut self) -> Vec<Vec<f64>> {
        self.params.iter_mut().for_each(Param::zero_grad);
        (self.grad)(&mut self.params);
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g.to_f64_lossless()).collect())
            .collect()
    }
}
