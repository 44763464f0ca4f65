//! Axis-aligned resampling: tricubic (Catmull-Rom), trilinear, nearest.
//!
//! Output voxel `j` on an axis sits at input coordinate
//! `t = j * out_spacing / in_spacing`, so both grids share voxel 0 and the
//! origin is preserved. Cubic taps beyond the edge use linearly
//! extrapolated ghost samples, which keeps linear functions exact.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{GridGeometry, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Cubic,
    Linear,
    Nearest,
}

/// Shape after resampling `shape` from `spacing` to `target`:
/// `round(n * s / t)`, at least 1.
pub fn resampled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

/// Tricubic resample to `target_spacing`.
pub fn resample(vol: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    resample_with(vol, target_spacing, Interp::Cubic)
}

pub fn resample_with(vol: &Volume, target_spacing: [f64; 3], interp: Interp) -> Result<Volume> {
    check_spacing(target_spacing)?;
    let g = vol.geometry();
    let shape = resampled_shape(g.shape, g.spacing, target_spacing);
    resample_to(vol, shape, target_spacing, interp)
}

fn check_spacing(s: [f64; 3]) -> Result<()> {
    if s.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::Argument(format!("target spacing must be positive, got {s:?}")));
    }
    Ok(())
}

/// Resamples onto an explicit output grid sharing the input's origin.
pub fn resample_to(vol: &Volume, shape: [usize; 3], spacing: [f64; 3], interp: Interp) -> Result<Volume> {
    check_spacing(spacing)?;
    let g = *vol.geometry();
    let out_geom = GridGeometry::with_origin(shape, spacing, g.origin)?;
    if shape == g.shape && spacing == g.spacing {
        return vol.clone().with_geometry(out_geom);
    }
    let mut data = Vec::with_capacity(vol.channels() * out_geom.len());
    for c in 0..vol.channels() {
        let ch = match interp {
            Interp::Nearest => nearest_resample(vol.channel(c), g.shape, g.spacing, shape, spacing),
            Interp::Cubic | Interp::Linear => separable(vol.channel(c), g.shape, g.spacing, shape, spacing, interp),
        };
        data.extend(ch);
    }
    Volume::new(vol.channels(), out_geom, data)
}

/// Nearest-neighbour resample of a label map onto an explicit grid.
pub fn resample_labels_to(labels: &LabelMap, shape: [usize; 3], spacing: [f64; 3]) -> Result<LabelMap> {
    check_spacing(spacing)?;
    let g = *labels.geometry();
    let out_geom = GridGeometry::with_origin(shape, spacing, g.origin)?;
    let data = if shape == g.shape && spacing == g.spacing {
        labels.labels().to_vec()
    } else {
        nearest_resample(labels.labels(), g.shape, g.spacing, shape, spacing)
    };
    LabelMap::new(out_geom, data)
}

fn nearest_index(j: usize, ratio: f64, n_in: usize) -> usize {
    let t = (j as f64 * ratio).round();
    (t.max(0.0) as usize).min(n_in - 1)
}

pub(crate) fn nearest_resample<T: Copy + Send + Sync>(
    src: &[T],
    in_shape: [usize; 3],
    in_spacing: [f64; 3],
    out_shape: [usize; 3],
    out_spacing: [f64; 3],
) -> Vec<T> {
    let maps: [Vec<usize>; 3] = std::array::from_fn(|a| {
        let ratio = out_spacing[a] / in_spacing[a];
        (0..out_shape[a]).map(|j| nearest_index(j, ratio, in_shape[a])).collect()
    });
    let [ox, oy, oz] = out_shape;
    let [nx, ny, _] = in_shape;
    let planes = par::map_range(oz, |z| {
        let sz = maps[2][z];
        let mut plane = Vec::with_capacity(ox * oy);
        for y in 0..oy {
            let row = nx * (maps[1][y] + ny * sz);
            plane.extend(maps[0].iter().map(|&sx| src[row + sx]));
        }
        plane
    });
    planes.into_iter().flatten().collect()
}

/// Taps for one output sample: weighted input indices plus a reference
/// index. The sample is `f[ref] + sum w_k (f[k] - f[ref])`, exact on
/// constants.
#[derive(Debug, Clone)]
struct Taps {
    reference: usize,
    taps: Vec<(usize, f64)>,
}

fn catmull_rom(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let f3 = f2 * f;
    [
        0.5 * (-f3 + 2.0 * f2 - f),
        0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
        0.5 * (-3.0 * f3 + 4.0 * f2 + f),
        0.5 * (f3 - f2),
    ]
}

fn axis_taps(n_in: usize, n_out: usize, ratio: f64, interp: Interp) -> Vec<Taps> {
    (0..n_out)
        .map(|j| {
            let t = (j as f64 * ratio).clamp(0.0, (n_in - 1) as f64);
            let i0 = t.floor() as usize;
            let f = t - i0 as f64;
            if n_in == 1 || f == 0.0 {
                return Taps {
                    reference: i0,
                    taps: vec![(i0, 1.0)],
                };
            }
            match interp {
                Interp::Linear => Taps {
                    reference: i0,
                    taps: vec![(i0, 1.0 - f), (i0 + 1, f)],
                },
                _ => {
                    let w = catmull_rom(f);
                    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(6);
                    let last = n_in as isize - 1;
                    for (k, &wk) in w.iter().enumerate() {
                        let idx = i0 as isize - 1 + k as isize;
                        if idx < 0 {
                            // ghost f(-1) = 2 f(0) - f(1)
                            taps.push((0, 2.0 * wk));
                            taps.push((1, -wk));
                        } else if idx > last {
                            // ghost f(n) = 2 f(n-1) - f(n-2)
                            taps.push((last as usize, 2.0 * wk));
                            taps.push((last as usize - 1, -wk));
                        } else {
                            taps.push((idx as usize, wk));
                        }
                    }
                    Taps {
                        reference: if f < 0.5 { i0 } else { i0 + 1 },
                        taps,
                    }
                }
            }
        })
        .collect()
}

fn separable(
    src: &[f32],
    in_shape: [usize; 3],
    in_spacing: [f64; 3],
    out_shape: [usize; 3],
    out_spacing: [f64; 3],
    interp: Interp,
) -> Vec<f32> {
    let mut cur = src.to_vec();
    let mut shape = in_shape;
    for axis in 0..3 {
        if in_shape[axis] == out_shape[axis] && in_spacing[axis] == out_spacing[axis] {
            continue;
        }
        let taps = axis_taps(in_shape[axis], out_shape[axis], out_spacing[axis] / in_spacing[axis], interp);
        let mut next_shape = shape;
        next_shape[axis] = out_shape[axis];
        cur = resample_axis(&cur, shape, next_shape, axis, &taps);
        shape = next_shape;
    }
    cur
}

fn resample_axis(src: &[f32], shape: [usize; 3], out: [usize; 3], axis: usize, taps: &[Taps]) -> Vec<f32> {
    let [nx, ny, _] = shape;
    let [ox, oy, oz] = out;
    let mut dst = vec![0f32; ox * oy * oz];
    let sample = |fetch: &dyn Fn(usize) -> f32, t: &Taps| -> f32 {
        let r = fetch(t.reference) as f64;
        let mut acc = 0.0f64;
        for &(i, w) in &t.taps {
            acc += w * (fetch(i) as f64 - r);
        }
        (r + acc) as f32
    };
    par::for_each_chunk_mut(&mut dst, ox * oy, |z, plane| {
        for y in 0..oy {
            for x in 0..ox {
                let v = match axis {
                    0 => {
                        let base = nx * (y + ny * z);
                        sample(&|i| src[base + i], &taps[x])
                    }
                    1 => {
                        let base = x + nx * ny * z;
                        sample(&|i| src[base + nx * i], &taps[y])
                    }
                    _ => {
                        let base = x + nx * y;
                        sample(&|i| src[base + nx * ny * i], &taps[z])
                    }
                };
                plane[x + ox * y] = v;
            }
        }
    });
    dst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rounding() {
        assert_eq!(resampled_shape([155, 10, 3], [1.0, 1.0, 1.0], [0.5, 3.0, 2.0]), [310, 3, 2]);
        assert_eq!(resampled_shape([1, 1, 1], [1.0; 3], [10.0; 3]), [1, 1, 1]);
    }

    #[test]
    fn identity_is_bitwise() {
        let g = GridGeometry::new([5, 4, 3], [0.8, 1.0, 1.3]).unwrap();
        let v = Volume::new(1, g, (0..60).map(|i| (i as f32).sin()).collect()).unwrap();
        let r = resample(&v, [0.8, 1.0, 1.3]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn constant_is_exact() {
        let g = GridGeometry::new([7, 5, 6], [1.0, 1.5, 2.0]).unwrap();
        let v = Volume::new(1, g, vec![3.7; 210]).unwrap();
        for interp in [Interp::Cubic, Interp::Linear, Interp::Nearest] {
            let r = resample_with(&v, [0.7, 0.9, 1.1], interp).unwrap();
            assert!(r.data().iter().all(|&x| x == 3.7));
        }
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        // f(x) = x on 10 voxels at 1 mm, sampled at 2 mm and at 0.3 mm
        let g = GridGeometry::new([10, 2, 2], [1.0; 3]).unwrap();
        let v = Volume::new(1, g, (0..40).map(|i| (i % 10) as f32).collect()).unwrap();
        for (target, n) in [(2.0, 5usize), (0.3, 33)] {
            let r = resample(&v, [target, 1.0, 1.0]).unwrap();
            assert_eq!(r.shape()[0], n);
            for j in 0..n {
                let expect = (j as f64 * target).min(9.0);
                assert!((r.data()[j] as f64 - expect).abs() < 1e-4, "j={j} got {}", r.data()[j]);
            }
        }
    }

    #[test]
    fn rejects_bad_target() {
        let v = Volume::zeros(1, GridGeometry::new([2, 2, 2], [1.0; 3]).unwrap());
        assert!(matches!(resample(&v, [1.0, 0.0, 1.0]), Err(Error::Argument(_))));
        assert!(matches!(resample(&v, [1.0, -2.0, 1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn nearest_upsample_then_downsample_roundtrips() {
        let g = GridGeometry::new([4, 3, 2], [2.0; 3]).unwrap();
        let l = LabelMap::new(g, (0..24).map(|i| (i % 4) as u8).collect()).unwrap();
        let up = resample_labels_to(&l, [8, 6, 4], [1.0; 3]).unwrap();
        let down = resample_labels_to(&up, [4, 3, 2], [2.0; 3]).unwrap();
        assert_eq!(down.labels(), l.labels());
    }
}
