//! Feature-grid readout: differentiable bilinear sampling at continuous grid
//! coordinates, and global average/max pooling.
//!
//! Sampling uses the align-corners convention: `u = (-1, -1)` hits node
//! `(row 0, col 0)` and `u = (1, 1)` hits node `(G-1, G-1)`. The first
//! coordinate of `u` moves along columns, the second along rows.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Cell<T> {
    i0: usize,
    i1: usize,
    t: T,
}

#[inline]
fn cell<T: Scalar>(u: T, g: usize) -> Cell<T> {
    if g == 1 {
        return Cell {
            i0: 0,
            i1: 0,
            t: T::zero(),
        };
    }
    let span = T::of((g - 1) as f64);
    let pos = (u + T::one()) * T::of(0.5) * span;
    let max0 = T::of((g - 2) as f64);
    let f = pos.floor().max(T::zero()).min(max0);
    let i0 = f.to_usize().unwrap_or(0);
    Cell {
        i0,
        i1: i0 + 1,
        t: pos - f,
    }
}

/// Samples all `d` channels of a `[d x g x g]` grid at `(ux, uy)` into `out`.
#[inline]
pub fn sample_point<T: Scalar>(m: &[T], d: usize, g: usize, ux: T, uy: T, out: &mut [T]) {
    let gg = g * g;
    let cx = cell(ux, g);
    let cy = cell(uy, g);
    let (tx, ty) = (cx.t, cy.t);
    let (sx, sy) = (T::one() - tx, T::one() - ty);
    let o00 = cy.i0 * g + cx.i0;
    let o01 = cy.i0 * g + cx.i1;
    let o10 = cy.i1 * g + cx.i0;
    let o11 = cy.i1 * g + cx.i1;
    for (ch, o) in out.iter_mut().enumerate().take(d) {
        let p = &m[ch * gg..];
        if g == 1 {
            *o = p[0];
        } else {
            *o = sy * (sx * p[o00] + tx * p[o01]) + ty * (sx * p[o10] + tx * p[o11]);
        }
    }
}

/// Backward of [`sample_point`]: accumulates into `dm` and returns `(dux, duy)`.
#[inline]
pub fn sample_point_backward<T: Scalar>(
    m: &[T],
    d: usize,
    g: usize,
    ux: T,
    uy: T,
    dout: &[T],
    dm: Option<&mut [T]>,
) -> (T, T) {
    if g == 1 {
        if let Some(dm) = dm {
            for ch in 0..d {
                dm[ch] += dout[ch];
            }
        }
        return (T::zero(), T::zero());
    }
    let gg = g * g;
    let cx = cell(ux, g);
    let cy = cell(uy, g);
    let (tx, ty) = (cx.t, cy.t);
    let (sx, sy) = (T::one() - tx, T::one() - ty);
    let o00 = cy.i0 * g + cx.i0;
    let o01 = cy.i0 * g + cx.i1;
    let o10 = cy.i1 * g + cx.i0;
    let o11 = cy.i1 * g + cx.i1;
    let mut gx = T::zero();
    let mut gy = T::zero();
    for ch in 0..d {
        let p = &m[ch * gg..];
        let dv = dout[ch];
        gx += dv * (sy * (p[o01] - p[o00]) + ty * (p[o11] - p[o10]));
        gy += dv * (sx * (p[o10] - p[o00]) + tx * (p[o11] - p[o01]));
    }
    if let Some(dm) = dm {
        for ch in 0..d {
            let dv = dout[ch];
            let q = &mut dm[ch * gg..];
            q[o00] += dv * sx * sy;
            q[o01] += dv * tx * sy;
            q[o10] += dv * sx * ty;
            q[o11] += dv * tx * ty;
        }
    }
    let scale = T::of((g - 1) as f64) * T::of(0.5);
    (gx * scale, gy * scale)
}

fn check_grid<T: Scalar>(m: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if m.rank() != 3 || m.dim(1) != m.dim(2) || m.dim(1) == 0 {
        return Err(Error::shape(
            op,
            "[D,G,G] with G >= 1",
            format!("{:?}", m.shape()),
        ));
    }
    Ok((m.dim(0), m.dim(1)))
}

/// Bilinear readout of `m: [D x G x G]` at every row of `u: [N x 2]`.
pub fn bilinear_sample<T: Scalar>(m: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, g) = check_grid(m, "bilinear_sample")?;
    if u.rank() != 2 || u.dim(1) != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            "u:[N,2]",
            format!("{:?}", u.shape()),
        ));
    }
    let n = u.dim(0);
    let mut y = Tensor::zeros(&[n, d]);
    for (uv, out) in u
        .data()
        .chunks_exact(2)
        .zip(y.data_mut().chunks_exact_mut(d.max(1)))
    {
        sample_point(m.data(), d, g, uv[0], uv[1], out);
    }
    Ok(y)
}

/// Backward of [`bilinear_sample`]: `(dM, du)`.
pub fn bilinear_sample_backward<T: Scalar>(
    m: &Tensor<T>,
    u: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (d, g) = (m.dim(0), m.dim(1));
    let mut dm = Tensor::zeros(m.shape());
    let mut du = Tensor::zeros(u.shape());
    for ((uv, dout), duv) in u
        .data()
        .chunks_exact(2)
        .zip(dy.data().chunks_exact(d.max(1)))
        .zip(du.data_mut().chunks_exact_mut(2))
    {
        let (gx, gy) =
            sample_point_backward(m.data(), d, g, uv[0], uv[1], dout, Some(dm.data_mut()));
        duv[0] = gx;
        duv[1] = gy;
    }
    (dm, du)
}

/// Positions of per-channel maxima, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    grid: usize,
}

/// Per-channel spatial mean followed by per-channel spatial max: `[2D]`.
pub fn global_pools<T: Scalar>(m: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (d, g) = check_grid(m, "global_pools")?;
    let gg = g * g;
    let inv = T::one() / T::of(gg as f64);
    let mut y = Tensor::zeros(&[2 * d]);
    let mut argmax = Vec::with_capacity(d);
    for (ch, plane) in m.data().chunks_exact(gg).enumerate() {
        let mut sum = T::zero();
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            sum += v;
            // strict comparison keeps the first maximum in row-major order
            if v > plane[best] {
                best = i;
            }
        }
        y.data_mut()[ch] = sum * inv;
        y.data_mut()[d + ch] = plane[best];
        argmax.push(best);
    }
    Ok((y, PoolCache { argmax, grid: g }))
}

/// Accumulates the gradient of [`global_pools`] into `dm`.
pub fn global_pools_backward<T: Scalar>(cache: &PoolCache, dy: &[T], dm: &mut [T]) {
    let d = cache.argmax.len();
    let gg = cache.grid * cache.grid;
    let inv = T::one() / T::of(gg as f64);
    for ch in 0..d {
        let avg = dy[ch] * inv;
        let plane = &mut dm[ch * gg..(ch + 1) * gg];
        for v in plane.iter_mut() {
            *v += avg;
        }
        plane[cache.argmax[ch]] += dy[d + ch];
    }
}
