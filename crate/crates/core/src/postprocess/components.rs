//! 26-connected component labeling.
//!
//! Union-find over voxel indices. Each z-slab is labeled independently
//! (in parallel), slab seams are merged afterwards, and roots are always
//! the smallest voxel index, so the final numbering follows x-fastest scan
//! order regardless of how the work was split.

use crate::par;

/// Component labels: 0 is background, components are `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub shape: [usize; 3],
    pub labels: Vec<u32>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    pub id: u32,
    pub voxel_count: usize,
    pub mean_prob: f64,
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra < rb {
        parent[rb as usize] = ra;
    } else if rb < ra {
        parent[ra as usize] = rb;
    }
}

/// Backward neighbours `(dx, dy, dz)` in scan order.
const BACK: [(isize, isize, isize); 13] = [
    (-1, -1, -1),
    (0, -1, -1),
    (1, -1, -1),
    (-1, 0, -1),
    (0, 0, -1),
    (1, 0, -1),
    (-1, 1, -1),
    (0, 1, -1),
    (1, 1, -1),
    (-1, -1, 0),
    (0, -1, 0),
    (1, -1, 0),
    (-1, 0, 0),
];

/// Unions voxel `(x, y, z)` with its backward neighbours whose z is at
/// least `z_min`. Indices into `parent` are offset by `base`.
#[allow(clippy::too_many_arguments)]
fn link_back(parent: &mut [u32], mask: &[bool], shape: [usize; 3], base: usize, x: usize, y: usize, z: usize, z_min: usize, dz_only: bool) {
    let [nx, ny, _] = shape;
    let i = x + nx * (y + ny * z);
    for &(dx, dy, dz) in &BACK {
        if dz_only && dz == 0 {
            continue;
        }
        let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
        if xx < 0 || yy < 0 || zz < z_min as isize || xx >= nx as isize || yy >= ny as isize {
            continue;
        }
        let j = xx as usize + nx * (yy as usize + ny * zz as usize);
        if mask[j] {
            union(parent, (i - base) as u32, (j - base) as u32);
        }
    }
}

pub fn label_components_26(mask: &[bool], shape: [usize; 3]) -> Components {
    let [nx, ny, nz] = shape;
    let plane = nx * ny;
    let n = plane * nz;
    assert_eq!(mask.len(), n, "mask length does not match shape");
    assert!(n <= u32::MAX as usize, "volume too large for u32 labels");
    let mut parent: Vec<u32> = (0..n as u32).collect();
    if n == 0 {
        return Components {
            shape,
            labels: Vec::new(),
            count: 0,
        };
    }
    let slab_planes = nz.div_ceil(par::current_threads().max(1) * 2).max(1);
    // within each slab the parent entries hold slab-local indices
    par::for_each_chunk_mut(&mut parent, slab_planes * plane, |s, chunk| {
        let z0 = s * slab_planes;
        let base = z0 * plane;
        for (k, p) in chunk.iter_mut().enumerate() {
            *p = k as u32;
        }
        let z1 = z0 + chunk.len() / plane;
        for z in z0..z1 {
            for y in 0..ny {
                for x in 0..nx {
                    if mask[x + nx * (y + ny * z)] {
                        link_back(chunk, mask, shape, base, x, y, z, z0, false);
                    }
                }
            }
        }
        for p in chunk.iter_mut() {
            *p += base as u32;
        }
    });
    for z in (slab_planes..nz).step_by(slab_planes) {
        for y in 0..ny {
            for x in 0..nx {
                if mask[x + nx * (y + ny * z)] {
                    link_back(&mut parent, mask, shape, 0, x, y, z, z - 1, true);
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut count = 0u32;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let r = find(&mut parent, i as u32) as usize;
        labels[i] = if r == i {
            count += 1;
            count
        } else {
            labels[r]
        };
    }
    Components {
        shape,
        labels,
        count: count as usize,
    }
}

impl Components {
    /// Per-component size, mean of `probs` and bounding box, by id.
    pub fn stats(&self, probs: &[f32]) -> Vec<ComponentStats> {
        assert_eq!(probs.len(), self.labels.len());
        let [nx, ny, _] = self.shape;
        let mut out: Vec<(usize, f64, [usize; 3], [usize; 3])> = vec![(0, 0.0, [usize::MAX; 3], [0; 3]); self.count];
        for (i, (&l, &p)) in self.labels.iter().zip(probs).enumerate() {
            if l == 0 {
                continue;
            }
            let e = &mut out[l as usize - 1];
            e.0 += 1;
            e.1 += p as f64;
            let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
            for a in 0..3 {
                e.2[a] = e.2[a].min(c[a]);
                e.3[a] = e.3[a].max(c[a]);
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(k, (count, sum, lo, hi))| ComponentStats {
                id: k as u32 + 1,
                voxel_count: count,
                mean_prob: sum / count as f64,
                bbox_min: lo,
                bbox_max: hi,
            })
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                s[l as usize - 1] += 1;
            }
        }
        s
    }
}
