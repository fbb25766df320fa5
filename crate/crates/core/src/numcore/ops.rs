//! Dense building blocks with hand-written backward passes.
//!
//! Backward functions accumulate into `Param::grad` (skipped for frozen
//! parameters) and return the gradient with respect to the input.

use super::param::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{matmul, Op, Scalar};

/// `y = x W + b` for `x: [N x I]`, `W: [I x O]`, `b: [O]`.
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Param<T>, b: &Param<T>) -> Result<Tensor<T>> {
    let (n, i, o) = affine_dims(x, w, b)?;
    let mut y = Tensor::zeros(&[n, o]);
    for row in y.data_mut().chunks_exact_mut(o) {
        row.copy_from_slice(b.value.data());
    }
    matmul(
        n,
        i,
        o,
        x.data(),
        Op::N,
        w.value.data(),
        Op::N,
        y.data_mut(),
        true,
    );
    Ok(y)
}

fn affine_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Param<T>,
    b: &Param<T>,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.value.rank() != 2 || b.value.rank() != 1 {
        return Err(Error::shape(
            "affine",
            "x:[N,I] W:[I,O] b:[O]",
            format!("{:?} {:?} {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let (n, i) = (x.dim(0), x.dim(1));
    let (wi, o) = (w.value.dim(0), w.value.dim(1));
    if wi != i || b.value.dim(0) != o {
        return Err(Error::shape(
            "affine",
            format!("W:[{i},*] b:[{o}]"),
            format!("W:{:?} b:{:?}", w.shape(), b.shape()),
        ));
    }
    Ok((n, i, o))
}

/// Backward of [`affine`]. Returns `dx` when `need_dx` is set.
pub fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    w: &mut Param<T>,
    b: &mut Param<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (n, i) = (x.dim(0), x.dim(1));
    let o = w.value.dim(1);
    debug_assert_eq!(dy.shape(), &[n, o]);
    if !w.frozen {
        matmul(
            i,
            n,
            o,
            x.data(),
            Op::T,
            dy.data(),
            Op::N,
            w.grad.data_mut(),
            true,
        );
    }
    if !b.frozen {
        let g = b.grad.data_mut();
        for row in dy.data().chunks_exact(o) {
            for (gj, &d) in g.iter_mut().zip(row) {
                *gj += d;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = Tensor::zeros(&[n, i]);
        matmul(
            n,
            o,
            i,
            dy.data(),
            Op::N,
            w.value.data(),
            Op::T,
            dx.data_mut(),
            false,
        );
        dx
    })
}

pub fn tanh_act<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// `dx = dy * (1 - y^2)` where `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &d)| d * (T::one() - y * y))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Row-wise softmax of a `[N x L]` tensor, stabilised by the row maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let l = *x.shape().last().expect("softmax on rank >= 1");
    let mut y = x.clone();
    if l == 0 {
        return y;
    }
    for row in y.data_mut().chunks_exact_mut(l) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// `dx = y * (dy - <dy, y>)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let l = *y.shape().last().expect("rank >= 1");
    let mut dx = Tensor::zeros(y.shape());
    if l == 0 {
        return dx;
    }
    for ((dxr, yr), dyr) in dx
        .data_mut()
        .chunks_exact_mut(l)
        .zip(y.data().chunks_exact(l))
        .zip(dy.data().chunks_exact(l))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Where the normalised channel axis sits in the tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelAxis {
    /// `[C x ...]`: channels outermost (feature grids).
    First,
    /// `[... x C]`: channels innermost.
    Last,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    axis: ChannelAxis,
    channels: usize,
}

fn ln_layout(shape: &[usize], axis: ChannelAxis) -> (usize, usize, usize, usize) {
    // (channels, positions, channel stride, position stride)
    match axis {
        ChannelAxis::First => {
            let c = shape[0];
            let p: usize = shape[1..].iter().product();
            (c, p, p, 1)
        }
        ChannelAxis::Last => {
            let c = *shape.last().expect("rank >= 1");
            let p: usize = shape[..shape.len() - 1].iter().product();
            (c, p, 1, c)
        }
    }
}

/// Normalises every position over the channel axis:
/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Param<T>,
    beta: &Param<T>,
    eps: T,
    axis: ChannelAxis,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    if x.rank() == 0 {
        return Err(Error::shape("layernorm", "rank >= 1", "scalar"));
    }
    let (c, p, cs, ps) = ln_layout(x.shape(), axis);
    if c == 0 || gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "layernorm",
            format!("gamma/beta [{c}], C >= 1"),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let inv_c = T::one() / T::of(c as f64);
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); p];
    let mut y = Tensor::zeros(x.shape());
    let (g, b) = (gamma.value.data(), beta.value.data());
    let yd = y.data_mut();
    for pos in 0..p {
        let base = pos * ps;
        let mut mean = T::zero();
        for ch in 0..c {
            mean += xd[base + ch * cs];
        }
        mean *= inv_c;
        let mut var = T::zero();
        for ch in 0..c {
            let d = xd[base + ch * cs] - mean;
            var += d * d;
        }
        var *= inv_c;
        let is = T::one() / (var + eps).sqrt();
        inv_std[pos] = is;
        for ch in 0..c {
            let o = base + ch * cs;
            let xh = (xd[o] - mean) * is;
            xhat[o] = xh;
            yd[o] = xh * g[ch] + b[ch];
        }
    }
    Ok((
        y,
        LayerNormCache {
            xhat,
            inv_std,
            axis,
            channels: c,
        },
    ))
}

pub fn layernorm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    dy: &Tensor<T>,
    gamma: &mut Param<T>,
    beta: &mut Param<T>,
) -> Tensor<T> {
    let (c, p, cs, ps) = ln_layout(dy.shape(), cache.axis);
    debug_assert_eq!(c, cache.channels);
    let inv_c = T::one() / T::of(c as f64);
    let dyd = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let dxd = dx.data_mut();
    for pos in 0..p {
        let base = pos * ps;
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for ch in 0..c {
            let o = base + ch * cs;
            let dxh = dyd[o] * gamma.value.data()[ch];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * cache.xhat[o];
        }
        mean_dxh *= inv_c;
        mean_dxh_xh *= inv_c;
        let is = cache.inv_std[pos];
        for ch in 0..c {
            let o = base + ch * cs;
            let dxh = dyd[o] * gamma.value.data()[ch];
            dxd[o] = is * (dxh - mean_dxh - cache.xhat[o] * mean_dxh_xh);
        }
    }
    if !gamma.frozen {
        let g = gamma.grad.data_mut();
        for pos in 0..p {
            for ch in 0..c {
                let o = pos * ps + ch * cs;
                g[ch] += dyd[o] * cache.xhat[o];
            }
        }
    }
    if !beta.frozen {
        let g = beta.grad.data_mut();
        for pos in 0..p {
            for ch in 0..c {
                g[ch] += dyd[pos * ps + ch * cs];
            }
        }
    }
    dx
}
