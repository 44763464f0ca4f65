//! Inverse of the preprocessing geometry: model space back to the
//! original image grid.

use crate::error::{Error, Result};
use crate::preprocess::{resample_labels_to, resample_to, CaseMeta, Interp};
use crate::volume::{GridGeometry, LabelMap, ProbMaps, Volume};

fn uncrop<T: Copy + Default>(src: &[T], meta: &CaseMeta) -> Vec<T> {
    let t = meta.target_shape;
    let r = meta.resampled_shape;
    let mut out = vec![T::default(); r.iter().product()];
    let lo = meta.pad_before;
    let hi: [usize; 3] = std::array::from_fn(|a| t[a] - meta.pad_after[a]);
    let dst0: [usize; 3] = std::array::from_fn(|a| meta.bbox_min[a] + meta.crop_before[a]);
    let len = hi[0] - lo[0];
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let s = lo[0] + t[0] * (y + t[1] * z);
            let d = dst0[0] + r[0] * (dst0[1] + y - lo[1] + r[1] * (dst0[2] + z - lo[2]));
            out[d..d + len].copy_from_slice(&src[s..s + len]);
        }
    }
    out
}

fn check(shape: [usize; 3], meta: &CaseMeta) -> Result<GridGeometry> {
    meta.validate()?;
    if shape != meta.target_shape {
        return Err(Error::Shape(format!("prediction {shape:?} vs model-space shape {:?}", meta.target_shape)));
    }
    GridGeometry::with_origin(meta.resampled_shape, meta.target_spacing, meta.original_origin)
}

/// Model-space volume to the original grid; everything outside the
/// cropped box becomes 0.
pub fn restore_volume(vol: &Volume, meta: &CaseMeta, interp: Interp) -> Result<Volume> {
    let rg = check(vol.shape(), meta)?;
    let channels = (0..vol.channels()).map(|c| uncrop(vol.channel(c), meta)).collect();
    let placed = Volume::from_channels(rg, channels)?;
    resample_to(&placed, meta.original_shape, meta.original_spacing, interp)
}

/// Probabilities back to the original grid (trilinear).
pub fn restore_probs(probs: &ProbMaps, meta: &CaseMeta) -> Result<ProbMaps> {
    let mut v = restore_volume(&probs.to_volume(), meta, Interp::Linear)?;
    v.data_mut().iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    ProbMaps::from_volume(&v)
}

/// Labels back to the original grid (nearest neighbour).
pub fn restore_labels(labels: &LabelMap, meta: &CaseMeta) -> Result<LabelMap> {
    let rg = check(labels.geometry().shape, meta)?;
    let placed = LabelMap::new(rg, uncrop(labels.labels(), meta))?;
    resample_labels_to(&placed, meta.original_shape, meta.original_spacing)
}
