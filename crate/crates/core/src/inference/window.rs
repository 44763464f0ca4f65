use serde::{Deserialize, Serialize};

use super::SegModel;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{sigmoid, Tensor};
use crate::volume::{ProbMaps, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    Uniform,
    /// Separable Gaussian with sigma = patch / 8 per axis.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlidingWindowConfig {
    pub patch_shape: [usize; 3],
    pub overlap: f64,
    pub blend: Blend,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            patch_shape: [160, 160, 128],
            overlap: 0.5,
            blend: Blend::Gaussian,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} not in [0, 1)", self.overlap)));
        }
        if self.patch_shape.contains(&0) {
            return Err(Error::Config("patch dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Window start offsets along one axis: every `floor(patch * (1 - overlap))`
/// voxels, with the last window flush against the end.
pub fn window_starts(len: usize, patch: usize, overlap: f64) -> Result<Vec<usize>> {
    if patch > len {
        return Err(Error::Config(format!("patch {patch} larger than volume axis {len}")));
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch < len {
        starts.push(s);
        s += stride;
    }
    starts.push(len - patch);
    Ok(starts)
}

/// Per-voxel blend weight inside one patch, normalised to a maximum of 1
/// and bounded away from zero.
pub fn importance_map(patch: [usize; 3], blend: Blend) -> Vec<f64> {
    let n: usize = patch.iter().product();
    if blend == Blend::Uniform {
        return vec![1.0; n];
    }
    let axis = |p: usize| -> Vec<f64> {
        let sigma = p as f64 / 8.0;
        let c = (p as f64 - 1.0) / 2.0;
        (0..p).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let [ax, ay, az] = patch.map(axis);
    let mut w = Vec::with_capacity(n);
    for z in &az {
        for y in &ay {
            for x in &ax {
                w.push(x * y * z);
            }
        }
    }
    let max = w.iter().cloned().fold(0.0, f64::max);
    w.iter_mut().for_each(|v| *v /= max);
    let floor = w.iter().cloned().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    w.iter_mut().for_each(|v| *v = v.max(floor));
    w
}

fn extract(vol: &Volume, start: [usize; 3], patch: [usize; 3]) -> Tensor<f32> {
    let [nx, ny, _] = vol.shape();
    let mut data = Vec::with_capacity(vol.channels() * patch.iter().product::<usize>());
    for c in 0..vol.channels() {
        let src = vol.channel(c);
        for z in 0..patch[2] {
            for y in 0..patch[1] {
                let s = start[0] + nx * (start[1] + y + ny * (start[2] + z));
                data.extend_from_slice(&src[s..s + patch[0]]);
            }
        }
    }
    Tensor {
        channels: vol.channels(),
        dims: patch,
        data,
    }
}

/// Runs `model` over overlapping patches and blends the per-channel
/// probabilities.
pub fn sliding_window_predict<M: SegModel + ?Sized>(vol: &Volume, model: &M, cfg: &SlidingWindowConfig) -> Result<ProbMaps> {
    cfg.validate()?;
    let g = *vol.geometry();
    let p = cfg.patch_shape;
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(g.shape[a], p[a], cfg.overlap))
        .collect::<Result<_>>()?;
    let mut windows = Vec::new();
    for &z in &starts[2] {
        for &y in &starts[1] {
            for &x in &starts[0] {
                windows.push([x, y, z]);
            }
        }
    }
    let weight = importance_map(p, cfg.blend);
    let n = g.len();
    let mut acc = vec![[0f64; 3]; n];
    let mut wsum = vec![0f64; n];
    let [nx, ny, _] = g.shape;
    let pn: usize = p.iter().product();

    // evaluate a batch at a time so memory stays bounded; accumulate in
    // window order so the result does not depend on scheduling
    let batch = par::current_threads().max(1);
    for chunk in windows.chunks(batch) {
        let outs = par::map_slice(chunk, |&start| -> Result<Tensor<f32>> {
            let logits = model.predict(&extract(vol, start, p))?;
            if logits.channels != 3 || logits.dims != p {
                return Err(Error::Shape(format!(
                    "model returned {}x{:?} for a {:?} patch",
                    logits.channels, logits.dims, p
                )));
            }
            Ok(logits)
        });
        for (&start, out) in chunk.iter().zip(outs) {
            let out = out?;
            let mut i = 0;
            for z in 0..p[2] {
                for y in 0..p[1] {
                    let row = start[0] + nx * (start[1] + y + ny * (start[2] + z));
                    for x in 0..p[0] {
                        let w = weight[i];
                        let dst = row + x;
                        for c in 0..3 {
                            acc[dst][c] += w * sigmoid(out.data[c * pn + i] as f64);
                        }
                        wsum[dst] += w;
                        i += 1;
                    }
                }
            }
        }
    }
    let mut maps = ProbMaps::zeros(g);
    for (c, dst) in [&mut maps.tc, &mut maps.wt, &mut maps.et].into_iter().enumerate() {
        for (v, (a, w)) in dst.iter_mut().zip(acc.iter().zip(&wsum)) {
            *v = ((a[c] / w) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(maps)
}
