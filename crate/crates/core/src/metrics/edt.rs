//! Exact squared Euclidean distance transform with anisotropic spacing
//! (separable lower-envelope-of-parabolas algorithm).

/// For every voxel, the squared physical distance to the nearest `true`
/// voxel of `seeds` (`f64::INFINITY` if there is none).
pub fn squared_edt(seeds: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    if !seeds.iter().any(|&s| s) {
        return d;
    }
    let [nx, ny, nz] = shape;
    let strides = [1, nx, nx * ny];
    let mut f = Vec::new();
    let mut out = Vec::new();
    let mut v = Vec::new();
    let mut z = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let st = strides[axis];
        let lines: Vec<usize> = (0..nx * ny * nz).filter(|&i| (i / st) % n == 0).collect();
        for start in lines {
            f.clear();
            f.extend((0..n).map(|k| d[start + k * st]));
            transform_1d(&f, spacing[axis], &mut out, &mut v, &mut z);
            for k in 0..n {
                d[start + k * st] = out[k];
            }
        }
    }
    d
}

/// `out[p] = min_q (s (p - q))^2 + f[q]`, skipping infinite `f`.
fn transform_1d(f: &[f64], s: f64, out: &mut Vec<f64>, v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    v.clear();
    z.clear();
    let s2 = s * s;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dq = s * (p as f64 - q as f64);
        *o = dq * dq + f[q];
    }
}
