//! Intensity cleanup, nonzero normalization, resampling, foreground crop and
//! centered padding, and 5-channel case stacking with reversible metadata.
//!
//! Order per modality is fixed: clip -> normalize -> resample, then the
//! shared foreground box crop and pad/crop to the target shape.

mod resample;

pub use self::resample::{
    resample, resample_labels_to, resample_to, resample_with, resampled_shape, Interp,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{GridGeometry, LabelMap, Volume};

/// Input modality order inside a stacked case.
pub const MODALITIES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub target_shape: [usize; 3],
    /// Values at or above this are treated as artifacts and zeroed.
    pub intensity_cap: i32,
    pub add_foreground_channel: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [1.0, 1.0, 1.0],
            target_shape: [160, 160, 128],
            intensity_cap: i16::MAX as i32,
            add_foreground_channel: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!("target_spacing {:?}", self.target_spacing)));
        }
        if self.target_shape.contains(&0) {
            return Err(Error::Config(format!("target_shape {:?}", self.target_shape)));
        }
        if self.intensity_cap <= 0 {
            return Err(Error::Config(format!("intensity_cap {}", self.intensity_cap)));
        }
        Ok(())
    }
}

/// Inclusive voxel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox {
    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a] + 1)
    }
}

/// Per-axis crop and pad amounts applied after cropping to the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CropPad {
    pub crop_before: [usize; 3],
    pub crop_after: [usize; 3],
    pub pad_before: [usize; 3],
    pub pad_after: [usize; 3],
}

impl CropPad {
    /// Centers `extent` in `target`; odd remainders go to the high side.
    pub fn plan(extent: [usize; 3], target: [usize; 3]) -> Self {
        let mut p = CropPad::default();
        for a in 0..3 {
            if extent[a] >= target[a] {
                let total = extent[a] - target[a];
                p.crop_before[a] = total / 2;
                p.crop_after[a] = total - total / 2;
            } else {
                let total = target[a] - extent[a];
                p.pad_before[a] = total / 2;
                p.pad_after[a] = total - total / 2;
            }
        }
        p
    }
}

/// Everything needed to map model-space predictions back to the original
/// image grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub original_shape: [usize; 3],
    pub original_spacing: [f64; 3],
    #[serde(default)]
    pub original_origin: [f64; 3],
    pub resampled_shape: [usize; 3],
    pub target_spacing: [f64; 3],
    pub target_shape: [usize; 3],
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
    pub pad_before: [usize; 3],
    pub pad_after: [usize; 3],
    pub crop_before: [usize; 3],
    pub crop_after: [usize; 3],
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CaseMeta {
    /// Meta for a volume that is already in model space (no transform).
    pub fn identity(case_id: impl Into<String>, geometry: &GridGeometry) -> Self {
        CaseMeta {
            case_id: case_id.into(),
            original_shape: geometry.shape,
            original_spacing: geometry.spacing,
            original_origin: geometry.origin,
            resampled_shape: geometry.shape,
            target_spacing: geometry.spacing,
            target_shape: geometry.shape,
            bbox_min: [0; 3],
            bbox_max: std::array::from_fn(|a| geometry.shape[a] - 1),
            pad_before: [0; 3],
            pad_after: [0; 3],
            crop_before: [0; 3],
            crop_after: [0; 3],
            warnings: Vec::new(),
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            min: self.bbox_min,
            max: self.bbox_max,
        }
    }

    pub fn crop_pad(&self) -> CropPad {
        CropPad {
            crop_before: self.crop_before,
            crop_after: self.crop_after,
            pad_before: self.pad_before,
            pad_after: self.pad_after,
        }
    }

    pub fn original_geometry(&self) -> Result<GridGeometry> {
        GridGeometry::with_origin(self.original_shape, self.original_spacing, self.original_origin)
    }

    /// Checks that the recorded transforms compose into `target_shape`.
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.bbox_min[a] > self.bbox_max[a] || self.bbox_max[a] >= self.resampled_shape[a] {
                return Err(Error::Shape(format!("meta bbox axis {a} outside resampled grid")));
            }
            let extent = self.bbox_max[a] - self.bbox_min[a] + 1;
            let kept = extent
                .checked_sub(self.crop_before[a] + self.crop_after[a])
                .ok_or_else(|| Error::Shape(format!("meta crops exceed box on axis {a}")))?;
            if kept + self.pad_before[a] + self.pad_after[a] != self.target_shape[a] {
                return Err(Error::Shape(format!("meta crop/pad on axis {a} does not give target shape")));
            }
            if self.crop_before[a] + self.crop_after[a] > 0 && self.pad_before[a] + self.pad_after[a] > 0 {
                return Err(Error::Shape(format!("meta both crops and pads axis {a}")));
            }
        }
        GridGeometry::new(self.original_shape, self.original_spacing)?;
        GridGeometry::new(self.resampled_shape, self.target_spacing)?;
        Ok(())
    }
}

/// Zeroes negative values, NaNs and anything `>= cap`, then truncates to
/// integer values (int16 cast semantics).
pub fn clip_and_cast(vol: &Volume, cap: i32) -> Volume {
    let cap = cap as f32;
    let data = vol
        .data()
        .iter()
        .map(|&v| if v.is_nan() || v < 0.0 || v >= cap { 0.0 } else { v.trunc() })
        .collect();
    Volume::new(vol.channels(), *vol.geometry(), data).expect("same shape")
}

/// Degenerate-input notes raised by [`normalize_nonzero`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NormWarning {
    AllZero,
    ZeroStd,
}

impl std::fmt::Display for NormWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormWarning::AllZero => write!(f, "channel is entirely zero; left unnormalized"),
            NormWarning::ZeroStd => write!(f, "nonzero voxels have zero spread; mean subtracted only"),
        }
    }
}

/// Z-scores each channel over its nonzero voxels (population std);
/// zero voxels stay exactly zero.
pub fn normalize_nonzero(vol: &Volume) -> (Volume, Option<NormWarning>) {
    let mut out = vol.clone();
    let mut warning = None;
    for c in 0..vol.channels() {
        let src = vol.channel(c);
        let (n, sum) = src
            .iter()
            .filter(|&&v| v != 0.0)
            .fold((0usize, 0.0f64), |(n, s), &v| (n + 1, s + v as f64));
        if n == 0 {
            warning = Some(NormWarning::AllZero);
            continue;
        }
        let mean = sum / n as f64;
        let var = src
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        let scale = if std > 0.0 {
            1.0 / std
        } else {
            warning = Some(NormWarning::ZeroStd);
            1.0
        };
        for (o, &v) in out.channel_mut(c).iter_mut().zip(src) {
            if v != 0.0 {
                *o = ((v as f64 - mean) * scale) as f32;
            }
        }
    }
    (out, warning)
}

/// Tightest inclusive box around voxels that are nonzero in any input.
pub fn foreground_bbox(vols: &[&Volume]) -> Result<BBox> {
    let first = vols.first().ok_or_else(|| Error::Argument("no volumes".into()))?;
    let g = *first.geometry();
    let mut min = g.shape;
    let mut max = [0usize; 3];
    let mut any = false;
    for v in vols {
        if v.shape() != g.shape {
            return Err(Error::Alignment(format!("shape {:?} vs {:?}", v.shape(), g.shape)));
        }
        for c in 0..v.channels() {
            for (i, &x) in v.channel(c).iter().enumerate() {
                if x != 0.0 {
                    let p = g.coords(i);
                    for a in 0..3 {
                        min[a] = min[a].min(p[a]);
                        max[a] = max[a].max(p[a]);
                    }
                    any = true;
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    Ok(BBox { min, max })
}

fn crop_pad_slice<T: Copy + Default>(
    src: &[T],
    shape: [usize; 3],
    bbox: &BBox,
    plan: &CropPad,
    target: [usize; 3],
) -> Vec<T> {
    let [tx, ty, tz] = target;
    let mut out = vec![T::default(); tx * ty * tz];
    let src_start: [usize; 3] = std::array::from_fn(|a| bbox.min[a] + plan.crop_before[a]);
    let lo = plan.pad_before;
    let hi: [usize; 3] = std::array::from_fn(|a| target[a] - plan.pad_after[a]);
    for z in lo[2]..hi[2] {
        let sz = src_start[2] + z - lo[2];
        for y in lo[1]..hi[1] {
            let sy = src_start[1] + y - lo[1];
            let s = src_start[0] + shape[0] * (sy + shape[1] * sz);
            let d = lo[0] + tx * (y + ty * z);
            let len = hi[0] - lo[0];
            out[d..d + len].copy_from_slice(&src[s..s + len]);
        }
    }
    out
}

fn check_bbox(bbox: &BBox, shape: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if bbox.min[a] > bbox.max[a] || bbox.max[a] >= shape[a] {
            return Err(Error::Argument(format!("bbox {bbox:?} outside shape {shape:?}")));
        }
    }
    Ok(())
}

/// Crops to `bbox`, then pads with zeros or center-crops to `target`.
/// The output origin tracks the physical position of voxel 0.
pub fn crop_pad_centered(vol: &Volume, bbox: &BBox, target: [usize; 3]) -> Result<(Volume, CropPad)> {
    let g = *vol.geometry();
    check_bbox(bbox, g.shape)?;
    let plan = CropPad::plan(bbox.extent(), target);
    let mut data = Vec::with_capacity(vol.channels() * target.iter().product::<usize>());
    for c in 0..vol.channels() {
        data.extend(crop_pad_slice(vol.channel(c), g.shape, bbox, &plan, target));
    }
    let geometry = GridGeometry::with_origin(target, g.spacing, shifted_origin(&g, bbox, &plan))?;
    Ok((Volume::new(vol.channels(), geometry, data)?, plan))
}

pub fn crop_pad_labels(labels: &LabelMap, bbox: &BBox, target: [usize; 3]) -> Result<(LabelMap, CropPad)> {
    let g = *labels.geometry();
    check_bbox(bbox, g.shape)?;
    let plan = CropPad::plan(bbox.extent(), target);
    let data = crop_pad_slice(labels.labels(), g.shape, bbox, &plan, target);
    let geometry = GridGeometry::with_origin(target, g.spacing, shifted_origin(&g, bbox, &plan))?;
    Ok((LabelMap::new(geometry, data)?, plan))
}

fn shifted_origin(g: &GridGeometry, bbox: &BBox, plan: &CropPad) -> [f64; 3] {
    std::array::from_fn(|a| {
        let shift = bbox.min[a] as f64 + plan.crop_before[a] as f64 - plan.pad_before[a] as f64;
        g.origin[a] + shift * g.spacing[a]
    })
}

/// Model-ready case.
#[derive(Debug, Clone)]
pub struct PreprocessedCase {
    /// Normalized FLAIR, T1, T1ce, T2 and (optionally) the foreground mask.
    pub image: Volume,
    pub label: Option<LabelMap>,
    pub meta: CaseMeta,
}

/// Runs the full per-case preprocessing on modalities ordered
/// `[FLAIR, T1, T1ce, T2]`.
///
/// The foreground channel is the union of nonzero voxels after clipping and
/// before normalization. After cubic resampling, voxels outside the
/// (nearest-resampled) foreground are reset to zero so the background stays
/// exactly zero.
pub fn stack_case(
    case_id: &str,
    modalities: [&Volume; 4],
    label: Option<&LabelMap>,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedCase> {
    cfg.validate()?;
    let g0 = *modalities[0].geometry();
    for (name, m) in MODALITIES.iter().zip(modalities.iter()) {
        if m.channels() != 1 {
            return Err(Error::Alignment(format!("{name} has {} channels", m.channels())));
        }
        if !m.geometry().same_grid(&g0) {
            return Err(Error::Alignment(format!(
                "{name} grid {:?}/{:?} differs from flair {:?}/{:?}",
                m.shape(),
                m.geometry().spacing,
                g0.shape,
                g0.spacing
            )));
        }
    }
    if let Some(l) = label {
        if !l.geometry().same_grid(&g0) {
            return Err(Error::Alignment("label grid differs from images".into()));
        }
    }

    let clipped: Vec<Volume> = par::map_slice(&modalities, |m| clip_and_cast(m, cfg.intensity_cap));
    let mut fg = vec![0f32; g0.len()];
    for c in &clipped {
        for (f, &v) in fg.iter_mut().zip(c.data()) {
            if v != 0.0 {
                *f = 1.0;
            }
        }
    }
    let fg = Volume::new(1, g0, fg)?;
    let out_shape = resampled_shape(g0.shape, g0.spacing, cfg.target_spacing);
    let fg_rs = resample_to(&fg, out_shape, cfg.target_spacing, Interp::Nearest)?;

    let mut warnings = Vec::new();
    let normalized: Vec<Result<(Volume, Option<NormWarning>)>> = par::map_slice(&clipped, |c| {
        let (n, w) = normalize_nonzero(c);
        let mut r = resample_to(&n, out_shape, cfg.target_spacing, Interp::Cubic)?;
        for (v, &m) in r.data_mut().iter_mut().zip(fg_rs.data()) {
            if m == 0.0 {
                *v = 0.0;
            }
        }
        Ok((r, w))
    });
    let mut channels = Vec::with_capacity(5);
    for (name, res) in MODALITIES.iter().zip(normalized) {
        let (v, w) = res?;
        if let Some(w) = w {
            warnings.push(format!("{name}: {w}"));
        }
        channels.push(v);
    }

    let bbox = foreground_bbox(&[&fg_rs])?;
    let mut data = Vec::with_capacity(5 * cfg.target_shape.iter().product::<usize>());
    let mut plan = CropPad::default();
    let mut geometry = None;
    if cfg.add_foreground_channel {
        channels.push(fg_rs);
    }
    for ch in &channels {
        let (cp, p) = crop_pad_centered(ch, &bbox, cfg.target_shape)?;
        plan = p;
        geometry = Some(*cp.geometry());
        data.extend(cp.into_data());
    }
    let image = Volume::new(channels.len(), geometry.expect("four modalities"), data)?;

    let label = match label {
        Some(l) => {
            let rs = resample_labels_to(l, out_shape, cfg.target_spacing)?;
            Some(crop_pad_labels(&rs, &bbox, cfg.target_shape)?.0)
        }
        None => None,
    };

    let meta = CaseMeta {
        case_id: case_id.to_string(),
        original_shape: g0.shape,
        original_spacing: g0.spacing,
        original_origin: g0.origin,
        resampled_shape: out_shape,
        target_spacing: cfg.target_spacing,
        target_shape: cfg.target_shape,
        bbox_min: bbox.min,
        bbox_max: bbox.max,
        pad_before: plan.pad_before,
        pad_after: plan.pad_after,
        crop_before: plan.crop_before,
        crop_after: plan.crop_after,
        warnings,
    };
    if !image.is_finite() {
        return Err(Error::Argument(format!("{case_id}: non-finite values after preprocessing")));
    }
    Ok(PreprocessedCase { image, label, meta })
}
