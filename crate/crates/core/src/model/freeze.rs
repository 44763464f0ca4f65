//! Frozen/trainable partition of model parameters for partial fine-tuning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::net::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezePlan {
    pub freeze_encoder: bool,
    /// Counted from the end of the decoder in execution order.
    pub unfreeze_last_k_decoder_blocks: usize,
    pub unfreeze_heads: bool,
    /// Transposed convs and the 1x1x1 projection after each skip concat.
    pub unfreeze_upsamplers: bool,
    /// Encoder stages kept trainable even when the encoder is frozen,
    /// counted from the bottleneck upwards.
    pub unfreeze_deepest_encoder_stages: usize,
    /// Informational only; nothing here consumes it.
    pub lr_multipliers: BTreeMap<String, f64>,
}

impl Default for FreezePlan {
    fn default() -> Self {
        FreezePlan {
            freeze_encoder: true,
            unfreeze_last_k_decoder_blocks: 2,
            unfreeze_heads: true,
            unfreeze_upsamplers: true,
            unfreeze_deepest_encoder_stages: 0,
            lr_multipliers: [("body", 1.0), ("decoder", 1.0), ("heads", 2.0), ("encoder", 0.1)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl FreezePlan {
    pub fn freeze_all() -> Self {
        FreezePlan {
            freeze_encoder: true,
            unfreeze_last_k_decoder_blocks: 0,
            unfreeze_heads: false,
            unfreeze_upsamplers: false,
            unfreeze_deepest_encoder_stages: 0,
            ..Default::default()
        }
    }

    pub fn unfreeze_all(cfg: &ModelConfig) -> Self {
        FreezePlan {
            freeze_encoder: false,
            unfreeze_last_k_decoder_blocks: cfg.decoder_block_prefixes().len(),
            unfreeze_heads: true,
            unfreeze_upsamplers: true,
            unfreeze_deepest_encoder_stages: 0,
            ..Default::default()
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder stage index; the stem is stage 0, the bottleneck the last.
    Encoder(usize),
    /// `dec.{s}.blocks.{j}` prefix.
    DecoderBlock(String),
    Upsampler,
    Head,
}

pub fn param_group(name: &str, cfg: &ModelConfig) -> Result<ParamGroup> {
    let parts: Vec<&str> = name.split('.').collect();
    let unknown = || Error::Shape(format!("unrecognised parameter name {name}"));
    match parts.as_slice() {
        ["stem", ..] => Ok(ParamGroup::Encoder(0)),
        ["enc", s, ..] => s.parse().map(ParamGroup::Encoder).map_err(|_| unknown()),
        ["bottleneck", ..] => Ok(ParamGroup::Encoder(cfg.num_stages - 1)),
        ["dec", s, "blocks", j, ..] => Ok(ParamGroup::DecoderBlock(format!("dec.{s}.blocks.{j}"))),
        ["dec", _, "up" | "fuse", ..] => Ok(ParamGroup::Upsampler),
        ["head", ..] => Ok(ParamGroup::Head),
        _ => Err(unknown()),
    }
}

/// Returns the trainable parameter names and their share of all parameter
/// elements.
pub fn plan_freeze<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    plan: &FreezePlan,
) -> Result<(BTreeSet<String>, f64)> {
    let dec = cfg.decoder_block_prefixes();
    if plan.unfreeze_last_k_decoder_blocks > dec.len() {
        return Err(Error::Argument(format!(
            "cannot unfreeze {} decoder blocks, model has {}",
            plan.unfreeze_last_k_decoder_blocks,
            dec.len()
        )));
    }
    if plan.unfreeze_deepest_encoder_stages > cfg.num_stages {
        return Err(Error::Argument(format!(
            "cannot unfreeze {} encoder stages, model has {}",
            plan.unfreeze_deepest_encoder_stages, cfg.num_stages
        )));
    }
    if plan.lr_multipliers.values().any(|&m| !(m > 0.0)) {
        return Err(Error::Argument("learning-rate multipliers must be positive".into()));
    }
    let open_blocks: BTreeSet<&String> = dec[dec.len() - plan.unfreeze_last_k_decoder_blocks..].iter().collect();
    let first_open_stage = cfg.num_stages - plan.unfreeze_deepest_encoder_stages;

    let mut trainable = BTreeSet::new();
    let (mut total, mut open) = (0usize, 0usize);
    for (name, p) in &params.tensors {
        let n = p.data.len();
        total += n;
        let on = match param_group(name, cfg)? {
            ParamGroup::Encoder(s) => !plan.freeze_encoder || s >= first_open_stage,
            ParamGroup::DecoderBlock(prefix) => open_blocks.contains(&prefix),
            ParamGroup::Upsampler => plan.unfreeze_upsamplers,
            ParamGroup::Head => plan.unfreeze_heads,
        };
        if on {
            open += n;
            trainable.insert(name.clone());
        }
    }
    let fraction = if total == 0 { 0.0 } else { open as f64 / total as f64 };
    Ok((trainable, fraction))
}
