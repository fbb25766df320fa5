//! Zero-padded "same" 2D cross-correlation over square channel-first grids,
//! lowered to a single matrix product through im2col.

use super::param::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{matmul, Op, Scalar};

/// Kernel side used by the feature adapter.
pub const KERNEL: usize = 5;

/// Patch matrix kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    cin: usize,
    batch: usize,
    grid: usize,
    ksize: usize,
    in_shape: Vec<usize>,
}

/// Shift bounds along one axis: destination range `[lo, hi)` for offset `d`.
#[inline]
fn span(g: usize, d: isize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(g);
    let hi = (g as isize - d).clamp(0, g as isize) as usize;
    (lo, hi.max(lo))
}

/// `x: [cin][batch][g][g]` → rows `(ci, a, b)`, columns `(batch, y, x)`.
fn im2col<T: Scalar>(x: &[T], cin: usize, batch: usize, g: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let gg = g * g;
    let width = batch * gg;
    let mut cols = vec![T::zero(); cin * k * k * width];
    for ci in 0..cin {
        for a in 0..k {
            let (y0, y1) = span(g, a as isize - r);
            if y0 == y1 {
                continue;
            }
            for b in 0..k {
                let (x0, x1) = span(g, b as isize - r);
                if x0 == x1 {
                    continue;
                }
                let row = &mut cols[((ci * k + a) * k + b) * width..][..width];
                for n in 0..batch {
                    let plane = &x[(ci * batch + n) * gg..][..gg];
                    let dst = &mut row[n * gg..][..gg];
                    for y in y0..y1 {
                        let sy = (y as isize + a as isize - r) as usize;
                        let sx0 = (x0 as isize + b as isize - r) as usize;
                        dst[y * g + x0..y * g + x1]
                            .copy_from_slice(&plane[sy * g + sx0..sy * g + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, batch: usize, g: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let gg = g * g;
    let width = batch * gg;
    let mut x = vec![T::zero(); cin * width];
    for ci in 0..cin {
        for a in 0..k {
            let (y0, y1) = span(g, a as isize - r);
            if y0 == y1 {
                continue;
            }
            for b in 0..k {
                let (x0, x1) = span(g, b as isize - r);
                if x0 == x1 {
                    continue;
                }
                let row = &cols[((ci * k + a) * k + b) * width..][..width];
                for n in 0..batch {
                    let plane = &mut x[(ci * batch + n) * gg..][..gg];
                    let src = &row[n * gg..][..gg];
                    for y in y0..y1 {
                        let sy = (y as isize + a as isize - r) as usize;
                        let sx0 = (x0 as isize + b as isize - r) as usize;
                        let dst = &mut plane[sy * g + sx0..sy * g + sx0 + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(&src[y * g + x0..y * g + x1]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y[co, r, c] = b[co] + sum_{ci,a,b} K[co, ci, a, b] * x[ci, r + a - k/2, c + b - k/2]`
/// with zeros outside the grid. `x: [Cin x G x G]`, `K: [Cout x Cin x k x k]`.
///
/// A batch of grids sharing the kernel may be passed as `x: [Cin x B x G x G]`
/// (batch inside the channel axis); the output is then `[Cout x B x G x G]`.
pub fn conv2d_same<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Param<T>,
    bias: &Param<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let ks = kernel.shape();
    let xs = x.shape();
    let square = xs.len() >= 3 && xs[xs.len() - 1] == xs[xs.len() - 2];
    if !(xs.len() == 3 || xs.len() == 4)
        || !square
        || ks.len() != 4
        || ks[2] != ks[3]
        || ks[2] % 2 == 0
    {
        return Err(Error::shape(
            "conv2d",
            "x:[Cin,(B,)G,G] K:[Cout,Cin,k,k] (k odd)",
            format!("{:?} {:?}", xs, ks),
        ));
    }
    let cin = xs[0];
    let batch = if xs.len() == 4 { xs[1] } else { 1 };
    let g = xs[xs.len() - 1];
    let (cout, k) = (ks[0], ks[2]);
    if ks[1] != cin || bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("K:[*,{cin},k,k] b:[{cout}]"),
            format!("{:?} {:?}", ks, bias.shape()),
        ));
    }
    if g == 0 {
        return Err(Error::Invalid("conv2d on an empty grid".into()));
    }
    let width = batch * g * g;
    let cols = im2col(x.data(), cin, batch, g, k);
    let mut out_shape = xs.to_vec();
    out_shape[0] = cout;
    let mut y = Tensor::zeros(&out_shape);
    for (co, plane) in y.data_mut().chunks_exact_mut(width).enumerate() {
        plane.fill(bias.value.data()[co]);
    }
    matmul(
        cout,
        cin * k * k,
        width,
        kernel.value.data(),
        Op::N,
        &cols,
        Op::N,
        y.data_mut(),
        true,
    );
    Ok((
        y,
        ConvCache {
            cols,
            cin,
            batch,
            grid: g,
            ksize: k,
            in_shape: xs.to_vec(),
        },
    ))
}

/// Backward of [`conv2d_same`]; returns `dx` when requested.
pub fn conv2d_same_backward<T: Scalar>(
    cache: &ConvCache<T>,
    dy: &Tensor<T>,
    kernel: &mut Param<T>,
    bias: &mut Param<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cin, batch, g, k) = (cache.cin, cache.batch, cache.grid, cache.ksize);
    let width = batch * g * g;
    let cout = dy.dim(0);
    let patch = cin * k * k;
    if !kernel.frozen {
        matmul(
            cout,
            width,
            patch,
            dy.data(),
            Op::N,
            &cache.cols,
            Op::T,
            kernel.grad.data_mut(),
            true,
        );
    }
    if !bias.frozen {
        for (co, plane) in dy.data().chunks_exact(width).enumerate() {
            bias.grad.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
    }
    need_dx.then(|| {
        let mut dcols = vec![T::zero(); patch * width];
        matmul(
            patch,
            cout,
            width,
            kernel.value.data(),
            Op::T,
            dy.data(),
            Op::N,
            &mut dcols,
            false,
        );
        Tensor::from_vec(&cache.in_shape, col2im(&dcols, cin, batch, g, k))
            .expect("conv input shape")
    })
}
