//! Grid types shared by every pipeline stage.
//!
//! Memory order is channel-major, then x fastest, then y, then z, which is
//! also the NIfTI on-disk order. Linear index of `(c, x, y, z)` is
//! `c * nx*ny*nz + x + nx * (y + ny * z)`.

mod nifti;

pub use self::nifti::{read_nifti, read_nifti_with_affine, write_labels_nifti, write_nifti, write_nifti_with_affine, AffineBlock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape, voxel spacing (mm) and origin (mm) of a 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(shape, spacing, [0.0; 3])
    }

    pub fn with_origin(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = GridGeometry {
            shape,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Geometry(format!("zero-length axis in shape {:?}", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!("non-positive spacing {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Same grid with a different shape.
    pub fn reshaped(&self, shape: [usize; 3]) -> Self {
        GridGeometry { shape, ..*self }
    }

    /// Shape and spacing agree (origin is ignored).
    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self.shape == other.shape
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()))
    }
}

/// Multi-channel scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        if data.len() != channels * geometry.len() {
            return Err(Error::Shape(format!(
                "data length {} != {} channels x {} voxels",
                data.len(),
                channels,
                geometry.len()
            )));
        }
        Ok(Volume {
            channels,
            geometry,
            data,
        })
    }

    pub fn zeros(channels: usize, geometry: GridGeometry) -> Self {
        Volume {
            channels,
            geometry,
            data: vec![0.0; channels * geometry.len()],
        }
    }

    /// Stacks single-grid channels. All channels must share `geometry`.
    pub fn from_channels(geometry: GridGeometry, channels: Vec<Vec<f32>>) -> Result<Self> {
        let n = channels.len();
        let mut data = Vec::with_capacity(n * geometry.len());
        for (i, c) in channels.into_iter().enumerate() {
            if c.len() != geometry.len() {
                return Err(Error::Shape(format!("channel {i} has {} voxels, expected {}", c.len(), geometry.len())));
            }
            data.extend(c);
        }
        Volume::new(n, geometry, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.geometry.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.geometry.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as a single-channel volume.
    pub fn extract_channel(&self, c: usize) -> Volume {
        Volume {
            channels: 1,
            geometry: self.geometry,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn with_geometry(mut self, geometry: GridGeometry) -> Result<Self> {
        if geometry.shape != self.geometry.shape {
            return Err(Error::Shape("with_geometry cannot change the shape".into()));
        }
        geometry.validate()?;
        self.geometry = geometry;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reverses the voxel order along each axis whose flag is set.
    pub fn flipped(&self, axes: [bool; 3]) -> Volume {
        let g = self.geometry;
        let [nx, ny, nz] = g.shape;
        let n = g.len();
        let mut out = vec![0.0f32; self.data.len()];
        for c in 0..self.channels {
            let src = &self.data[c * n..(c + 1) * n];
            let dst = &mut out[c * n..(c + 1) * n];
            for z in 0..nz {
                let sz = if axes[2] { nz - 1 - z } else { z };
                for y in 0..ny {
                    let sy = if axes[1] { ny - 1 - y } else { y };
                    let drow = nx * (y + ny * z);
                    let srow = nx * (sy + ny * sz);
                    if axes[0] {
                        for x in 0..nx {
                            dst[drow + x] = src[srow + nx - 1 - x];
                        }
                    } else {
                        dst[drow..drow + nx].copy_from_slice(&src[srow..srow + nx]);
                    }
                }
            }
        }
        Volume {
            channels: self.channels,
            geometry: g,
            data: out,
        }
    }
}

/// Fused segmentation over `{0, 1, 2, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: GridGeometry,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(geometry: GridGeometry, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::Shape(format!("{} labels for {} voxels", labels.len(), geometry.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 3) {
            return Err(Error::LabelValue(bad as f64));
        }
        Ok(LabelMap { geometry, labels })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        LabelMap {
            geometry,
            labels: vec![0; geometry.len()],
        }
    }

    /// Reads labels from the first channel of a volume; values must be
    /// exact integers in `0..=3`.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let labels = vol
            .channel(0)
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=3.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::LabelValue(v as f64))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelMap::new(*vol.geometry(), labels)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            channels: 1,
            geometry: self.geometry,
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Voxels whose label is one of `values`.
    pub fn mask_of(&self, values: &[u8]) -> Vec<bool> {
        self.labels.iter().map(|l| values.contains(l)).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Tumor-region class, in the fixed channel order TC, WT, ET.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Tc,
    Wt,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Tc, Region::Wt, Region::Et];

    pub fn channel(self) -> usize {
        match self {
            Region::Tc => 0,
            Region::Wt => 1,
            Region::Et => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Tc => "TC",
            Region::Wt => "WT",
            Region::Et => "ET",
        }
    }

    /// Fused labels belonging to this region.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Wt => &[1, 2, 3],
            Region::Tc => &[2, 3],
            Region::Et => &[3],
        }
    }
}

/// Soft predictions for TC, WT and ET, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMaps {
    geometry: GridGeometry,
    pub tc: Vec<f32>,
    pub wt: Vec<f32>,
    pub et: Vec<f32>,
}

impl ProbMaps {
    pub fn new(geometry: GridGeometry, tc: Vec<f32>, wt: Vec<f32>, et: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        for (name, ch) in [("tc", &tc), ("wt", &wt), ("et", &et)] {
            if ch.len() != geometry.len() {
                return Err(Error::Shape(format!("{name} has {} voxels, expected {}", ch.len(), geometry.len())));
            }
            if let Some(v) = ch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Argument(format!("{name} probability {v} outside [0,1]")));
            }
        }
        Ok(ProbMaps { geometry, tc, wt, et })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        ProbMaps {
            geometry,
            tc: vec![0.0; n],
            wt: vec![0.0; n],
            et: vec![0.0; n],
        }
    }

    /// Interprets a 3-channel volume (TC, WT, ET) as probabilities.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        if vol.channels() != 3 {
            return Err(Error::Shape(format!("expected 3 probability channels, got {}", vol.channels())));
        }
        ProbMaps::new(
            *vol.geometry(),
            vol.channel(0).to_vec(),
            vol.channel(1).to_vec(),
            vol.channel(2).to_vec(),
        )
    }

    pub fn to_volume(&self) -> Volume {
        let mut data = Vec::with_capacity(3 * self.geometry.len());
        data.extend_from_slice(&self.tc);
        data.extend_from_slice(&self.wt);
        data.extend_from_slice(&self.et);
        Volume {
            channels: 3,
            geometry: self.geometry,
            data,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn get(&self, region: Region) -> &[f32] {
        match region {
            Region::Tc => &self.tc,
            Region::Wt => &self.wt,
            Region::Et => &self.et,
        }
    }

    pub fn get_mut(&mut self, region: Region) -> &mut Vec<f32> {
        match region {
            Region::Tc => &mut self.tc,
            Region::Wt => &mut self.wt,
            Region::Et => &mut self.et,
        }
    }
}
