//! Training objective: Dice-Focal plus a Sobel boundary term, aggregated over
//! deep-supervision levels with weights halving per level.
//!
//! Everything here is f64; gradients are provided so the model's reverse
//! pass can be checked end to end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub ds_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            focal_gamma: 2.0,
            dice_smooth: 1e-5,
            ds_weights: vec![1.0, 0.5, 0.25, 0.125],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.focal_gamma >= 0.0) || !(self.dice_smooth > 0.0) {
            return Err(Error::Config("alpha and focal_gamma must be >= 0, dice_smooth > 0".into()));
        }
        if self.ds_weights.is_empty() || !(self.ds_weights[0] > 0.0) {
            return Err(Error::Config("ds_weights must start with a positive weight".into()));
        }
        if self.ds_weights.windows(2).any(|w| (w[1] - w[0] / 2.0).abs() > 1e-12 * w[0]) {
            return Err(Error::Config("ds_weights must halve at every level".into()));
        }
        Ok(())
    }
}

/// Probabilities `p` and binary targets `g`, one channel per region.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub p: &'a Tensor<f64>,
    pub g: &'a Tensor<f64>,
}

impl LossInputs<'_> {
    fn check(&self) -> Result<()> {
        if !self.p.same_shape(self.g) {
            return Err(Error::Shape(format!(
                "prediction {}x{:?} vs target {}x{:?}",
                self.p.channels, self.p.dims, self.g.channels, self.g.dims
            )));
        }
        Ok(())
    }
}

fn dice_terms(p: &[f64], g: &[f64], smooth: f64) -> (f64, f64) {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let sum: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
    (2.0 * inter + smooth, sum + smooth)
}

/// Mean over channels of `1 - soft Dice`.
pub fn soft_dice_loss(inputs: LossInputs, smooth: f64) -> Result<f64> {
    inputs.check()?;
    let c = inputs.p.channels;
    let total: f64 = (0..c)
        .map(|k| {
            let (num, den) = dice_terms(inputs.p.channel(k), inputs.g.channel(k), smooth);
            1.0 - num / den
        })
        .sum();
    Ok(total / c as f64)
}

fn focal_elem(p: f64, g: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(g * (1.0 - p).powf(gamma) * p.ln() + (1.0 - g) * p.powf(gamma) * (1.0 - p).ln())
}

fn focal_elem_grad(p: f64, g: f64, gamma: f64) -> f64 {
    if p <= P_CLAMP || p >= 1.0 - P_CLAMP {
        return 0.0;
    }
    let q = 1.0 - p;
    let pos = -gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p;
    let neg = gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q;
    -(g * pos + (1.0 - g) * neg)
}

/// Focal binary cross-entropy averaged over every element.
pub fn focal_loss(inputs: LossInputs, gamma: f64) -> Result<f64> {
    inputs.check()?;
    let n = inputs.p.data.len() as f64;
    Ok(inputs.p.data.iter().zip(&inputs.g.data).map(|(&p, &g)| focal_elem(p, g, gamma)).sum::<f64>() / n)
}

pub fn dice_focal(inputs: LossInputs, cfg: &LossConfig) -> Result<f64> {
    Ok(soft_dice_loss(inputs, cfg.dice_smooth)? + focal_loss(inputs, cfg.focal_gamma)?)
}

/// `d dice_focal / d p`.
pub fn dice_focal_grad(inputs: LossInputs, cfg: &LossConfig) -> Result<Tensor<f64>> {
    inputs.check()?;
    let (p, g) = (inputs.p, inputs.g);
    let c = p.channels;
    let n_all = p.data.len() as f64;
    let mut out = Tensor::zeros(c, p.dims);
    for k in 0..c {
        let (pk, gk) = (p.channel(k), g.channel(k));
        let (num, den) = dice_terms(pk, gk, cfg.dice_smooth);
        for ((o, &pi), &gi) in out.channel_mut(k).iter_mut().zip(pk).zip(gk) {
            let ddice = (2.0 * gi * den - num) / (den * den);
            *o = -ddice / c as f64 + focal_elem_grad(pi, gi, cfg.focal_gamma) / n_all;
        }
    }
    Ok(out)
}

/// Zero-padded 3-tap correlation along `axis` of a single `dims` grid.
fn correlate_axis(x: &[f64], dims: [usize; 3], axis: usize, k: [f64; 3]) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % n;
        let mut acc = k[1] * x[i];
        if pos > 0 {
            acc += k[0] * x[i - stride];
        }
        if pos + 1 < n {
            acc += k[2] * x[i + stride];
        }
        *o = acc;
    }
    out
}

const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];
const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

fn sobel_axis(x: &[f64], dims: [usize; 3], axis: usize, adjoint: bool) -> Vec<f64> {
    let d = if adjoint { [1.0, 0.0, -1.0] } else { DERIV };
    let mut v = x.to_vec();
    for a in 0..3 {
        v = correlate_axis(&v, dims, a, if a == axis { d } else { SMOOTH });
    }
    v
}

fn check_sobel_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::Shape(format!("Sobel needs every dimension >= 3, got {dims:?}")));
    }
    Ok(())
}

/// Sobel responses along x, y and z of a single-channel tensor.
pub fn sobel_gradient_3d(x: &Tensor<f64>) -> Result<[Tensor<f64>; 3]> {
    if x.channels != 1 {
        return Err(Error::Shape(format!("Sobel takes one channel, got {}", x.channels)));
    }
    check_sobel_dims(x.dims)?;
    Ok([0, 1, 2].map(|a| Tensor {
        channels: 1,
        dims: x.dims,
        data: sobel_axis(&x.data, x.dims, a, false),
    }))
}

/// Sum over channels and axes of the mean squared Sobel-response difference.
pub fn boundary_loss(inputs: LossInputs) -> Result<f64> {
    inputs.check()?;
    check_sobel_dims(inputs.p.dims)?;
    let dims = inputs.p.dims;
    let mut total = 0.0;
    for k in 0..inputs.p.channels {
        let r: Vec<f64> = inputs.p.channel(k).iter().zip(inputs.g.channel(k)).map(|(a, b)| a - b).collect();
        for a in 0..3 {
            let s = sobel_axis(&r, dims, a, false);
            total += s.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        }
    }
    Ok(total)
}

pub fn boundary_loss_grad(inputs: LossInputs) -> Result<Tensor<f64>> {
    inputs.check()?;
    check_sobel_dims(inputs.p.dims)?;
    let dims = inputs.p.dims;
    let mut out = Tensor::zeros(inputs.p.channels, dims);
    for k in 0..inputs.p.channels {
        let r: Vec<f64> = inputs.p.channel(k).iter().zip(inputs.g.channel(k)).map(|(a, b)| a - b).collect();
        let scale = 2.0 / r.len() as f64;
        let o = out.channel_mut(k);
        for a in 0..3 {
            let back = sobel_axis(&sobel_axis(&r, dims, a, false), dims, a, true);
            o.iter_mut().zip(back).for_each(|(o, b)| *o += scale * b);
        }
    }
    Ok(out)
}

/// Target for deep-supervision level `level`: voxel `j` takes `g[j * 2^level]`.
pub fn downsample_target(g: &Tensor<f64>, level: usize, dims: [usize; 3]) -> Result<Tensor<f64>> {
    let f = 1usize << level;
    if (0..3).any(|a| dims[a] == 0 || (dims[a] - 1) * f >= g.dims[a]) {
        return Err(Error::Shape(format!("level {level} dims {dims:?} do not fit target {:?}", g.dims)));
    }
    let mut out = Tensor::zeros(g.channels, dims);
    let [gx, gy, _] = g.dims;
    for c in 0..g.channels {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    dst[i] = src[x * f + gx * (y * f + gy * z * f)];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

fn check_levels(outputs: &[Tensor<f64>], g: &Tensor<f64>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if outputs.is_empty() {
        return Err(Error::Argument("no output levels".into()));
    }
    if outputs.len() > cfg.ds_weights.len() {
        return Err(Error::Argument(format!("{} output levels but {} weights", outputs.len(), cfg.ds_weights.len())));
    }
    if let Some(o) = outputs.iter().find(|o| o.channels != g.channels) {
        return Err(Error::Shape(format!("{} logit channels vs {} target channels", o.channels, g.channels)));
    }
    Ok(())
}

fn level_loss(p: &Tensor<f64>, g: &Tensor<f64>, cfg: &LossConfig) -> Result<f64> {
    let inputs = LossInputs { p, g };
    Ok(dice_focal(inputs, cfg)? + cfg.alpha * boundary_loss(inputs)?)
}

/// `sum_i w_i * (dice_focal_i + alpha * boundary_i)` over probability maps
/// (finest first).
pub fn total_loss_probs(probs: &[Tensor<f64>], g: &Tensor<f64>, cfg: &LossConfig) -> Result<f64> {
    check_levels(probs, g, cfg)?;
    let mut total = 0.0;
    for (i, p) in probs.iter().enumerate() {
        let gi = downsample_target(g, i, p.dims)?;
        total += cfg.ds_weights[i] * level_loss(p, &gi, cfg)?;
    }
    Ok(total)
}

/// Gradient of [`total_loss_probs`] with respect to each probability map.
pub fn total_loss_probs_grad(probs: &[Tensor<f64>], g: &Tensor<f64>, cfg: &LossConfig) -> Result<Vec<Tensor<f64>>> {
    check_levels(probs, g, cfg)?;
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let gi = downsample_target(g, i, p.dims)?;
            let inputs = LossInputs { p, g: &gi };
            let mut d = dice_focal_grad(inputs, cfg)?;
            let db = boundary_loss_grad(inputs)?;
            let w = cfg.ds_weights[i];
            d.data.iter_mut().zip(&db.data).for_each(|(d, b)| *d = w * (*d + cfg.alpha * b));
            Ok(d)
        })
        .collect()
}

/// [`total_loss_probs`] applied to logit maps after a per-channel logistic.
pub fn total_loss(outputs: &[Tensor<f64>], g: &Tensor<f64>, cfg: &LossConfig) -> Result<f64> {
    let probs: Vec<_> = outputs.iter().map(|o| o.map(sigmoid)).collect();
    total_loss_probs(&probs, g, cfg)
}

/// Gradient of [`total_loss`] with respect to each logit map.
pub fn total_loss_grad(outputs: &[Tensor<f64>], g: &Tensor<f64>, cfg: &LossConfig) -> Result<Vec<Tensor<f64>>> {
    let probs: Vec<_> = outputs.iter().map(|o| o.map(sigmoid)).collect();
    let mut d = total_loss_probs_grad(&probs, g, cfg)?;
    for (d, p) in d.iter_mut().zip(&probs) {
        d.data.iter_mut().zip(&p.data).for_each(|(d, &p)| *d *= p * (1.0 - p));
    }
    Ok(d)
}
