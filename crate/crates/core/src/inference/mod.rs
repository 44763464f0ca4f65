//! Sliding-window prediction, flip test-time augmentation, weighted
//! ensembling and restoration to the original image grid.

mod ensemble;
mod restore;
mod window;

pub use ensemble::{normalize_ensemble, EnsembleAccumulator, EnsembleWeights};
pub use restore::{restore_labels, restore_probs, restore_volume};
pub use window::{importance_map, sliding_window_predict, window_starts, Blend, SlidingWindowConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{model_forward, PointwiseModel, StoredModel};
use crate::tensor::Tensor;
use crate::volume::{ProbMaps, Volume};

/// Anything that maps a multi-channel patch to 3 logit channels
/// (TC, WT, ET) of the same spatial size.
pub trait SegModel: Sync {
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl SegModel for PointwiseModel {
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(patch)
    }
}

impl SegModel for StoredModel {
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            StoredModel::Pointwise(m) => m.forward(patch),
            StoredModel::Mednext { config, params } => {
                let mut outs = model_forward(patch, config, params)?;
                Ok(outs.swap_remove(0))
            }
        }
    }
}

/// Adapts a closure into a [`SegModel`].
pub struct FnModel<F>(pub F);

impl<F> SegModel for FnModel<F>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        (self.0)(patch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    /// Single pass.
    None,
    /// The 7 non-empty axis-flip combinations, no identity pass.
    Flips7,
    /// Identity plus the 7 flips.
    #[default]
    Flips8,
}

impl TtaMode {
    /// Flip combinations, identity first when present.
    pub fn flips(self) -> Vec<[bool; 3]> {
        let all = (0..8u8).map(|m| [m & 1 != 0, m & 2 != 0, m & 4 != 0]);
        match self {
            TtaMode::None => vec![[false; 3]],
            TtaMode::Flips7 => all.skip(1).collect(),
            TtaMode::Flips8 => all.collect(),
        }
    }
}

/// Averages sliding-window predictions over flipped copies of `vol`, each
/// flipped back before averaging.
pub fn tta_predict<M: SegModel + ?Sized>(
    vol: &Volume,
    model: &M,
    cfg: &SlidingWindowConfig,
    mode: TtaMode,
) -> Result<ProbMaps> {
    let flips = mode.flips();
    let g = *vol.geometry();
    let mut acc = vec![0f64; 3 * g.len()];
    for &axes in &flips {
        let input = if axes == [false; 3] { vol.clone() } else { vol.flipped(axes) };
        let p = sliding_window_predict(&input, model, cfg)?.to_volume().flipped(axes);
        acc.iter_mut().zip(p.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let k = flips.len() as f64;
    let data = acc.iter().map(|a| ((a / k) as f32).clamp(0.0, 1.0)).collect();
    ProbMaps::from_volume(&Volume::new(3, g, data)?)
}

/// Checks that `model` accepts inputs with `channels` channels.
pub fn check_model_input(model: &StoredModel, channels: usize) -> Result<()> {
    let want = match model {
        StoredModel::Pointwise(m) => m.in_channels,
        StoredModel::Mednext { config, .. } => config.in_channels,
    };
    if want != channels {
        return Err(Error::Config(format!("model expects {want} input channels, case has {channels}")));
    }
    Ok(())
}
