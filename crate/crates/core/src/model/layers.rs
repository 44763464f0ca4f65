//! Per-channel group normalization and GELU, with reverse passes.

use crate::tensor::{Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Saved statistics from a normalization forward pass.
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Group norm with one group per channel, then affine `gamma * xhat + beta`.
pub fn group_norm<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, NormCache<T>) {
    let n = x.voxels();
    let nf = T::of(n as f64);
    let mut xhat = Tensor::zeros(x.channels, x.dims);
    let mut y = Tensor::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().copied().sum::<T>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
        inv_std.push(is);
        let xh = xhat.channel_mut(c);
        for (h, &v) in xh.iter_mut().zip(src) {
            *h = (v - mean) * is;
        }
        let (g, b) = (gamma[c], beta[c]);
        let xh = xhat.channel(c).to_vec();
        for (o, h) in y.channel_mut(c).iter_mut().zip(xh) {
            *o = g * h + b;
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(cache: &NormCache<T>, gamma: &[T], dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = dy.voxels();
    let nf = T::of(n as f64);
    let mut dx = Tensor::zeros(dy.channels, dy.dims);
    let mut dgamma = Vec::with_capacity(dy.channels);
    let mut dbeta = Vec::with_capacity(dy.channels);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let xh = cache.xhat.channel(c);
        let db: T = g.iter().copied().sum();
        let dg: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dgamma.push(dg);
        dbeta.push(db);
        // dxhat = dy * gamma
        let sum_dxh = db * gamma[c];
        let sum_dxh_xh = dg * gamma[c];
        let k = cache.inv_std[c] / nf;
        for ((o, &gv), &h) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
            *o = k * (nf * gv * gamma[c] - sum_dxh - h * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::of(SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}
