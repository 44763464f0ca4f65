//! MedNeXt-style encoder/decoder with deep supervision.
//!
//! Stage `s` runs at `base_channels * 2^s` channels and resolution `/2^s`.
//! Encoder stages end in a down block; the deepest stage is the bottleneck.
//! Each decoder stage upsamples (transposed 2x2x2 conv), concatenates the
//! matching encoder features, projects back with a 1x1x1 conv and runs its
//! blocks. Heads are 1x1x1 convs to `num_classes` logits; head 0 is the
//! full-resolution output, heads 1.. are the deep-supervision outputs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv3d_backward, conv3d_direct, conv_transpose_up2, conv_transpose_up2_backward, ConvShape};
use super::layers::{gelu, gelu_grad, group_norm, group_norm_backward, NormCache};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Depthwise kernel size, fixed for every block.
pub const BLOCK_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub expansion_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_stages: usize,
    /// Blocks per stage; the last entry is the bottleneck. Decoder stage `s`
    /// mirrors encoder stage `s`.
    pub blocks_per_stage: Vec<usize>,
    pub expansion_ratio: Vec<usize>,
    pub num_classes: usize,
    pub ds_outputs: usize,
}

impl ModelConfig {
    /// Small configuration with uniform depth and expansion.
    pub fn toy(in_channels: usize, base_channels: usize, num_stages: usize, blocks: usize, ratio: usize) -> Self {
        ModelConfig {
            in_channels,
            base_channels,
            num_stages,
            blocks_per_stage: vec![blocks; num_stages],
            expansion_ratio: vec![ratio; num_stages],
            num_classes: 3,
            ds_outputs: (num_stages - 1).min(3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config("num_stages must be at least 2".into()));
        }
        if self.blocks_per_stage.len() != self.num_stages || self.expansion_ratio.len() != self.num_stages {
            return Err(Error::Config("blocks_per_stage and expansion_ratio need one entry per stage".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.expansion_ratio.contains(&0) {
            return Err(Error::Config("expansion ratio must be at least 1".into()));
        }
        if self.ds_outputs > self.num_stages - 1 {
            return Err(Error::Config(format!(
                "{} deep-supervision heads need at least {} stages",
                self.ds_outputs,
                self.ds_outputs + 1
            )));
        }
        Ok(())
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Every spatial dimension must be a multiple of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    /// Decoder block names in execution order (coarsest stage first).
    pub fn decoder_block_prefixes(&self) -> Vec<String> {
        (0..self.num_stages - 1)
            .rev()
            .flat_map(|s| (0..self.blocks_per_stage[s]).map(move |j| format!("dec.{s}.blocks.{j}")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Fan(usize),
    Zero,
    One,
}

fn block_specs(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, c: usize, r: usize) {
    out.push((format!("{p}.dw.weight"), vec![c, 1, 3, 3, 3], Init::Fan(27)));
    out.push((format!("{p}.dw.bias"), vec![c], Init::Zero));
    out.push((format!("{p}.norm.weight"), vec![c], Init::One));
    out.push((format!("{p}.norm.bias"), vec![c], Init::Zero));
    out.push((format!("{p}.expand.weight"), vec![c * r, c, 1, 1, 1], Init::Fan(c)));
    out.push((format!("{p}.expand.bias"), vec![c * r], Init::Zero));
    out.push((format!("{p}.compress.weight"), vec![c, c * r, 1, 1, 1], Init::Fan(c * r)));
    out.push((format!("{p}.compress.bias"), vec![c], Init::Zero));
}

fn down_specs(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, cin: usize, cout: usize, r: usize) {
    out.push((format!("{p}.dw.weight"), vec![cin, 1, 3, 3, 3], Init::Fan(27)));
    out.push((format!("{p}.dw.bias"), vec![cin], Init::Zero));
    out.push((format!("{p}.norm.weight"), vec![cin], Init::One));
    out.push((format!("{p}.norm.bias"), vec![cin], Init::Zero));
    out.push((format!("{p}.expand.weight"), vec![cin * r, cin, 1, 1, 1], Init::Fan(cin)));
    out.push((format!("{p}.expand.bias"), vec![cin * r], Init::Zero));
    out.push((format!("{p}.compress.weight"), vec![cout, cin * r, 1, 1, 1], Init::Fan(cin * r)));
    out.push((format!("{p}.compress.bias"), vec![cout], Init::Zero));
    out.push((format!("{p}.res.weight"), vec![cout, cin, 1, 1, 1], Init::Fan(cin)));
    out.push((format!("{p}.res.bias"), vec![cout], Init::Zero));
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let s_last = cfg.num_stages - 1;
    v.push(("stem.weight".into(), vec![cfg.base_channels, cfg.in_channels, 1, 1, 1], Init::Fan(cfg.in_channels)));
    v.push(("stem.bias".into(), vec![cfg.base_channels], Init::Zero));
    for s in 0..s_last {
        let c = cfg.stage_channels(s);
        for j in 0..cfg.blocks_per_stage[s] {
            block_specs(&mut v, &format!("enc.{s}.blocks.{j}"), c, cfg.expansion_ratio[s]);
        }
        down_specs(&mut v, &format!("enc.{s}.down"), c, cfg.stage_channels(s + 1), cfg.expansion_ratio[s]);
    }
    for j in 0..cfg.blocks_per_stage[s_last] {
        block_specs(&mut v, &format!("bottleneck.blocks.{j}"), cfg.stage_channels(s_last), cfg.expansion_ratio[s_last]);
    }
    for s in (0..s_last).rev() {
        let c = cfg.stage_channels(s);
        v.push((format!("dec.{s}.up.weight"), vec![2 * c, c, 2, 2, 2], Init::Fan(2 * c * 8)));
        v.push((format!("dec.{s}.up.bias"), vec![c], Init::Zero));
        v.push((format!("dec.{s}.fuse.weight"), vec![c, 2 * c, 1, 1, 1], Init::Fan(2 * c)));
        v.push((format!("dec.{s}.fuse.bias"), vec![c], Init::Zero));
        for j in 0..cfg.blocks_per_stage[s] {
            block_specs(&mut v, &format!("dec.{s}.blocks.{j}"), c, cfg.expansion_ratio[s]);
        }
    }
    for l in 0..=cfg.ds_outputs {
        let c = cfg.stage_channels(l);
        v.push((format!("head.{l}.weight"), vec![cfg.num_classes, c, 1, 1, 1], Init::Fan(c)));
        v.push((format!("head.{l}.bias"), vec![cfg.num_classes], Init::Zero));
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors, keyed by hierarchical name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Parameter names and shapes for `cfg`, in forward order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        param_specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|(n, shape, _)| {
                let len = shape.iter().product();
                (n, Param {
                    shape,
                    data: vec![T::zero(); len],
                })
            })
            .collect();
        ModelParams { tensors }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases,
    /// unit norm scales.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|(n, shape, init)| {
                let len: usize = shape.iter().product();
                let data = match init {
                    Init::Zero => vec![T::zero(); len],
                    Init::One => vec![T::one(); len],
                    Init::Fan(f) => {
                        let b = 1.0 / (f as f64).sqrt();
                        (0..len).map(|_| T::of(rng.gen_range(-b..b))).collect()
                    }
                };
                (n, Param { shape, data })
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&[T]> {
        self.tensors
            .get(name)
            .map(|p| p.data.as_slice())
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.tensors.get_mut(name).map(|p| &mut p.data)
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(|p| p.data.len()).sum()
    }

    /// Checks names and shapes against the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::layout(cfg);
        if want.len() != self.tensors.len() {
            return Err(Error::Shape(format!("{} parameters, config needs {}", self.tensors.len(), want.len())));
        }
        for (name, shape) in want {
            match self.tensors.get(&name) {
                Some(p) if p.shape == shape && p.data.len() == shape.iter().product::<usize>() => {}
                Some(p) => return Err(Error::Shape(format!("{name}: shape {:?}, expected {shape:?}", p.shape))),
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, p)| {
                    (n.clone(), Param {
                        shape: p.shape.clone(),
                        data: p.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
                    })
                })
                .collect(),
        }
    }

    pub fn scaled(&self, k: T) -> Self {
        let mut out = self.clone();
        for p in out.tensors.values_mut() {
            p.data.iter_mut().for_each(|v| *v = *v * k);
        }
        out
    }
}

/// Gradient per parameter name.
pub type Grads<T> = BTreeMap<String, Vec<T>>;

fn add_grad<T: Scalar>(grads: &mut Grads<T>, name: String, g: Vec<T>) {
    match grads.get_mut(&name) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => {
            grads.insert(name, g);
        }
    }
}

fn pointwise<T: Scalar>(x: &Tensor<T>, params: &ModelParams<T>, name: &str, cout: usize) -> Result<Tensor<T>> {
    conv3d_direct(
        x,
        params.get(&format!("{name}.weight"))?,
        Some(params.get(&format!("{name}.bias"))?),
        ConvShape::dense(x.channels, cout, 1, 1),
    )
}

fn pointwise_back<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    params: &ModelParams<T>,
    name: &str,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let g = conv3d_backward(x, params.get(&format!("{name}.weight"))?, dy, ConvShape::dense(x.channels, dy.channels, 1, 1))?;
    add_grad(grads, format!("{name}.weight"), g.weight);
    add_grad(grads, format!("{name}.bias"), g.bias);
    Ok(g.input)
}

/// Intermediates of one block (or down block) forward pass.
pub struct BlockTrace<T> {
    input: Tensor<T>,
    depthwise: Tensor<T>,
    norm: NormCache<T>,
    normed: Tensor<T>,
    expanded: Tensor<T>,
    activated: Tensor<T>,
    stride: usize,
}

impl<T: Scalar> BlockTrace<T> {
    /// The `C * R` channel activation before the nonlinearity.
    pub fn expanded(&self) -> &Tensor<T> {
        &self.expanded
    }
}

fn block_core<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    ratio: usize,
    cout: usize,
    stride: usize,
) -> Result<(Tensor<T>, BlockTrace<T>)> {
    let c = x.channels;
    let depthwise = conv3d_direct(
        x,
        params.get(&format!("{prefix}.dw.weight"))?,
        Some(params.get(&format!("{prefix}.dw.bias"))?),
        ConvShape::depthwise(c, stride),
    )?;
    let (normed, norm) = group_norm(
        &depthwise,
        params.get(&format!("{prefix}.norm.weight"))?,
        params.get(&format!("{prefix}.norm.bias"))?,
    );
    let expanded = pointwise(&normed, params, &format!("{prefix}.expand"), c * ratio)?;
    let activated = expanded.map(gelu);
    let out = pointwise(&activated, params, &format!("{prefix}.compress"), cout)?;
    Ok((out, BlockTrace {
        input: x.clone(),
        depthwise,
        norm,
        normed,
        expanded,
        activated,
        stride,
    }))
}

fn block_core_back<T: Scalar>(
    t: &BlockTrace<T>,
    dy: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let d_act = pointwise_back(&t.activated, dy, params, &format!("{prefix}.compress"), grads)?;
    let mut d_exp = d_act;
    for (g, &x) in d_exp.data.iter_mut().zip(&t.expanded.data) {
        *g = *g * gelu_grad(x);
    }
    let d_norm = pointwise_back(&t.normed, &d_exp, params, &format!("{prefix}.expand"), grads)?;
    let (d_dw, dgamma, dbeta) = group_norm_backward(&t.norm, params.get(&format!("{prefix}.norm.weight"))?, &d_norm);
    add_grad(grads, format!("{prefix}.norm.weight"), dgamma);
    add_grad(grads, format!("{prefix}.norm.bias"), dbeta);
    let _ = &t.depthwise;
    let g = conv3d_backward(
        &t.input,
        params.get(&format!("{prefix}.dw.weight"))?,
        &d_dw,
        ConvShape::depthwise(t.input.channels, t.stride),
    )?;
    add_grad(grads, format!("{prefix}.dw.weight"), g.weight);
    add_grad(grads, format!("{prefix}.dw.bias"), g.bias);
    Ok(g.input)
}

/// One residual block: depthwise 3x3x3 -> norm -> 1x1x1 expand to `C*R`
/// -> GELU -> 1x1x1 compress to `C` -> add input.
pub fn mednext_block<T: Scalar>(
    x: &Tensor<T>,
    cfg: BlockConfig,
    params: &ModelParams<T>,
    prefix: &str,
) -> Result<(Tensor<T>, BlockTrace<T>)> {
    if x.channels != cfg.channels {
        return Err(Error::Shape(format!("block {prefix} expects {} channels, got {}", cfg.channels, x.channels)));
    }
    let (mut out, trace) = block_core(x, params, prefix, cfg.expansion_ratio, cfg.channels, 1)?;
    out.add_assign(x);
    Ok((out, trace))
}

/// Reverse pass of [`mednext_block`]; returns the input gradient.
pub fn mednext_block_backward<T: Scalar>(
    trace: &BlockTrace<T>,
    dy: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let mut dx = block_core_back(trace, dy, params, prefix, grads)?;
    dx.add_assign(dy);
    Ok(dx)
}

struct DownTrace<T> {
    core: BlockTrace<T>,
}

fn down_block<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    ratio: usize,
    cout: usize,
) -> Result<(Tensor<T>, DownTrace<T>)> {
    let (mut out, core) = block_core(x, params, prefix, ratio, cout, 2)?;
    let res = conv3d_direct(
        x,
        params.get(&format!("{prefix}.res.weight"))?,
        Some(params.get(&format!("{prefix}.res.bias"))?),
        ConvShape::dense(x.channels, cout, 1, 2),
    )?;
    out.add_assign(&res);
    Ok((out, DownTrace { core }))
}

fn down_block_back<T: Scalar>(
    t: &DownTrace<T>,
    dy: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let mut dx = block_core_back(&t.core, dy, params, prefix, grads)?;
    let x = &t.core.input;
    let g = conv3d_backward(
        x,
        params.get(&format!("{prefix}.res.weight"))?,
        dy,
        ConvShape::dense(x.channels, dy.channels, 1, 2),
    )?;
    add_grad(grads, format!("{prefix}.res.weight"), g.weight);
    add_grad(grads, format!("{prefix}.res.bias"), g.bias);
    dx.add_assign(&g.input);
    Ok(dx)
}

struct DecoderTrace<T> {
    up_input: Tensor<T>,
    concat: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
}

/// Everything the reverse pass needs from a forward pass.
pub struct ForwardTrace<T> {
    input: Tensor<T>,
    stem_out_channels: usize,
    encoder_blocks: Vec<Vec<BlockTrace<T>>>,
    downs: Vec<DownTrace<T>>,
    bottleneck: Vec<BlockTrace<T>>,
    /// Indexed by stage; built coarsest first.
    decoders: Vec<Option<DecoderTrace<T>>>,
    /// Feature map feeding head `l` (stage `l` decoder output, or the
    /// bottleneck for the deepest stage).
    level_features: Vec<Tensor<T>>,
}

/// Runs the network; returns `1 + ds_outputs` logit maps at resolutions
/// `1, 1/2, 1/4, ...`.
pub fn model_forward<T: Scalar>(x: &Tensor<T>, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<Vec<Tensor<T>>> {
    model_forward_traced(x, cfg, params).map(|(o, _)| o)
}

pub fn model_forward_traced<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(Vec<Tensor<T>>, ForwardTrace<T>)> {
    cfg.validate()?;
    if x.channels != cfg.in_channels {
        return Err(Error::Shape(format!("input has {} channels, model expects {}", x.channels, cfg.in_channels)));
    }
    let div = cfg.spatial_divisor();
    if x.dims.iter().any(|&d| d % div != 0) {
        return Err(Error::Config(format!("spatial dims {:?} not divisible by {div}", x.dims)));
    }
    let s_last = cfg.num_stages - 1;
    let mut h = pointwise(x, params, "stem", cfg.base_channels)?;
    let mut encoder_blocks = Vec::with_capacity(s_last);
    let mut downs = Vec::with_capacity(s_last);
    let mut skips = Vec::with_capacity(s_last);
    for s in 0..s_last {
        let bc = BlockConfig {
            channels: cfg.stage_channels(s),
            expansion_ratio: cfg.expansion_ratio[s],
        };
        let mut traces = Vec::new();
        for j in 0..cfg.blocks_per_stage[s] {
            let (o, t) = mednext_block(&h, bc, params, &format!("enc.{s}.blocks.{j}"))?;
            traces.push(t);
            h = o;
        }
        encoder_blocks.push(traces);
        skips.push(h.clone());
        let (o, t) = down_block(&h, params, &format!("enc.{s}.down"), cfg.expansion_ratio[s], cfg.stage_channels(s + 1))?;
        downs.push(t);
        h = o;
    }
    let bc = BlockConfig {
        channels: cfg.stage_channels(s_last),
        expansion_ratio: cfg.expansion_ratio[s_last],
    };
    let mut bottleneck = Vec::new();
    for j in 0..cfg.blocks_per_stage[s_last] {
        let (o, t) = mednext_block(&h, bc, params, &format!("bottleneck.blocks.{j}"))?;
        bottleneck.push(t);
        h = o;
    }
    let mut level_features: Vec<Option<Tensor<T>>> = vec![None; cfg.num_stages];
    level_features[s_last] = Some(h.clone());
    let mut decoders: Vec<Option<DecoderTrace<T>>> = (0..s_last).map(|_| None).collect();
    for s in (0..s_last).rev() {
        let c = cfg.stage_channels(s);
        let up = conv_transpose_up2(
            &h,
            params.get(&format!("dec.{s}.up.weight"))?,
            params.get(&format!("dec.{s}.up.bias"))?,
            c,
        )?;
        let concat = up.concat(&skips[s])?;
        let mut f = pointwise(&concat, params, &format!("dec.{s}.fuse"), c)?;
        let bc = BlockConfig {
            channels: c,
            expansion_ratio: cfg.expansion_ratio[s],
        };
        let mut traces = Vec::new();
        for j in 0..cfg.blocks_per_stage[s] {
            let (o, t) = mednext_block(&f, bc, params, &format!("dec.{s}.blocks.{j}"))?;
            traces.push(t);
            f = o;
        }
        decoders[s] = Some(DecoderTrace {
            up_input: h,
            concat,
            blocks: traces,
        });
        level_features[s] = Some(f.clone());
        h = f;
    }
    let level_features: Vec<Tensor<T>> = level_features.into_iter().map(|f| f.expect("every level computed")).collect();
    let outputs = (0..=cfg.ds_outputs)
        .map(|l| pointwise(&level_features[l], params, &format!("head.{l}"), cfg.num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, ForwardTrace {
        input: x.clone(),
        stem_out_channels: cfg.base_channels,
        encoder_blocks,
        downs,
        bottleneck,
        decoders,
        level_features,
    }))
}

/// Reverse pass: given `dL/d output_l` for every head, returns
/// `dL/d input` and the parameter gradients.
pub fn model_backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    grad_outputs: &[Tensor<T>],
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, Grads<T>)> {
    if grad_outputs.len() != cfg.ds_outputs + 1 {
        return Err(Error::Shape(format!("{} output gradients for {} heads", grad_outputs.len(), cfg.ds_outputs + 1)));
    }
    let s_last = cfg.num_stages - 1;
    let mut grads = Grads::new();
    let mut d_level: Vec<Option<Tensor<T>>> = vec![None; cfg.num_stages];
    let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    };
    for (l, g) in grad_outputs.iter().enumerate() {
        let d = pointwise_back(&trace.level_features[l], g, params, &format!("head.{l}"), &mut grads)?;
        accumulate(&mut d_level[l], d);
    }
    let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; s_last];
    for s in 0..s_last {
        let dec = trace.decoders[s].as_ref().expect("decoder trace");
        let c = cfg.stage_channels(s);
        let mut d = d_level[s]
            .take()
            .unwrap_or_else(|| Tensor::zeros(c, dec.concat.dims));
        for (j, t) in dec.blocks.iter().enumerate().rev() {
            d = mednext_block_backward(t, &d, params, &format!("dec.{s}.blocks.{j}"), &mut grads)?;
        }
        let d_cat = pointwise_back(&dec.concat, &d, params, &format!("dec.{s}.fuse"), &mut grads)?;
        let (d_up, d_sk) = d_cat.split(c);
        d_skip[s] = Some(d_sk);
        let g = conv_transpose_up2_backward(&dec.up_input, params.get(&format!("dec.{s}.up.weight"))?, &d_up)?;
        add_grad(&mut grads, format!("dec.{s}.up.weight"), g.weight);
        add_grad(&mut grads, format!("dec.{s}.up.bias"), g.bias);
        accumulate(&mut d_level[s + 1], g.input);
    }
    let mut d = d_level[s_last]
        .take()
        .unwrap_or_else(|| Tensor::zeros(cfg.stage_channels(s_last), trace.level_features[s_last].dims));
    for (j, t) in trace.bottleneck.iter().enumerate().rev() {
        d = mednext_block_backward(t, &d, params, &format!("bottleneck.blocks.{j}"), &mut grads)?;
    }
    for s in (0..s_last).rev() {
        d = down_block_back(&trace.downs[s], &d, params, &format!("enc.{s}.down"), &mut grads)?;
        d.add_assign(d_skip[s].as_ref().expect("skip gradient"));
        for (j, t) in trace.encoder_blocks[s].iter().enumerate().rev() {
            d = mednext_block_backward(t, &d, params, &format!("enc.{s}.blocks.{j}"), &mut grads)?;
        }
    }
    debug_assert_eq!(d.channels, trace.stem_out_channels);
    let dx = pointwise_back(&trace.input, &d, params, "stem", &mut grads)?;
    Ok((dx, grads))
}
