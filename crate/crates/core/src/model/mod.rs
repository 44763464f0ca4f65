//! Miniature MedNeXt forward engine with a hand-written reverse pass.

pub mod conv;
mod freeze;
mod io;
pub mod layers;
mod net;

use std::collections::BTreeMap;

pub use conv::{conv3d_backward, conv3d_direct, conv_transpose_up2, conv_transpose_up2_backward, ConvGrads, ConvShape};
pub use freeze::{param_group, plan_freeze, FreezePlan, ParamGroup};
pub use io::{load_model, save_model, ModelSpec, StoredModel};
pub use net::{
    mednext_block, mednext_block_backward, model_backward, model_forward, model_forward_traced, BlockConfig, BlockTrace,
    ForwardTrace, Grads, ModelConfig, ModelParams, Param, BLOCK_KERNEL,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `logits[k] = bias[k] + sum_c weight[k][c] * x[c]` at every voxel.
///
/// Commutes with any spatial flip, which makes it a convenient stand-in for
/// a trained network in pipeline tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseModel {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Row-major `num_classes x in_channels`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl PointwiseModel {
    pub fn new(in_channels: usize, num_classes: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != in_channels * num_classes || bias.len() != num_classes {
            return Err(Error::Shape(format!(
                "pointwise model {num_classes}x{in_channels}: weight {} bias {}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(PointwiseModel {
            in_channels,
            num_classes,
            weight,
            bias,
        })
    }

    /// Output `k` is `gain * x[k]`.
    pub fn identity_gain(in_channels: usize, num_classes: usize, gain: f32) -> Self {
        let mut weight = vec![0.0; in_channels * num_classes];
        for k in 0..num_classes.min(in_channels) {
            weight[k * in_channels + k] = gain;
        }
        PointwiseModel {
            in_channels,
            num_classes,
            weight,
            bias: vec![0.0; num_classes],
        }
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        conv3d_direct(x, &self.weight, Some(&self.bias), ConvShape::dense(self.in_channels, self.num_classes, 1, 1))
    }

    pub(crate) fn tensors(&self) -> BTreeMap<String, Param<f32>> {
        BTreeMap::from([
            ("weight".to_string(), Param {
                shape: vec![self.num_classes, self.in_channels],
                data: self.weight.clone(),
            }),
            ("bias".to_string(), Param {
                shape: vec![self.num_classes],
                data: self.bias.clone(),
            }),
        ])
    }

    pub(crate) fn from_tensors(in_channels: usize, num_classes: usize, t: &BTreeMap<String, Param<f32>>) -> Result<Self> {
        let get = |n: &str| {
            t.get(n)
                .map(|p| p.data.clone())
                .ok_or_else(|| Error::Shape(format!("pointwise model missing {n}")))
        };
        if t.len() != 2 {
            return Err(Error::Shape(format!("pointwise model has {} tensors, expected 2", t.len())));
        }
        Self::new(in_channels, num_classes, get("weight")?, get("bias")?)
    }
}
