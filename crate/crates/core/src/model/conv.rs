//! Direct (non-FFT) 3D convolution, dense or depthwise, and the 2x2x2
//! stride-2 transposed convolution, each with a reverse pass.
//!
//! Weight layout is `[out][in / groups][kz][ky][kx]` for convolutions and
//! `[in][out][kz][ky][kx]` for the transposed convolution.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Shape of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvShape {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        ConvShape {
            in_channels: channels,
            out_channels: channels,
            kernel: 3,
            stride,
            groups: channels,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel.pow(3)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel, self.kernel]
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| (dims[a] - 1) / self.stride + 1)
    }

    fn validate(&self, input: &[usize; 2], weight: usize, bias: Option<usize>) -> Result<()> {
        let [cin, _] = *input;
        if !(self.kernel == 1 || self.kernel == 3) {
            return Err(Error::Shape(format!("kernel {} (only 1 and 3 supported)", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::Shape("stride 0".into()));
        }
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Shape(format!(
                "groups {} incompatible with {} -> {} channels",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if cin != self.in_channels {
            return Err(Error::Shape(format!("input has {cin} channels, layer expects {}", self.in_channels)));
        }
        if weight != self.weight_len() {
            return Err(Error::Shape(format!("weight length {weight}, expected {}", self.weight_len())));
        }
        if let Some(b) = bias {
            if b != self.out_channels {
                return Err(Error::Shape(format!("bias length {b}, expected {}", self.out_channels)));
            }
        }
        Ok(())
    }
}

/// Output index range `[lo, hi)` whose input index `o * s + k - pad` is in
/// `[0, n_in)`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, k: usize, pad: usize, s: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
    let top = n_in - 1 + pad;
    if top < k {
        return (0, 0);
    }
    let hi = ((top - k) / s + 1).min(n_out);
    (lo, hi.max(lo))
}

/// Correlates `input` with `weight`; zero padding keeps spatial size at
/// stride 1, stride 2 halves it (ceil).
pub fn conv3d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    shape: ConvShape,
) -> Result<Tensor<T>> {
    shape.validate(&[input.channels, 0], weight.len(), bias.map(|b| b.len()))?;
    let dims = input.dims;
    let od = shape.out_dims(dims);
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = od;
    let n_out = ox * oy * oz;
    let k = shape.kernel;
    let k3 = k * k * k;
    let pad = shape.pad();
    let s = shape.stride;
    let cin_g = shape.in_channels / shape.groups;
    let cout_g = shape.out_channels / shape.groups;
    let ranges: [Vec<(usize, usize)>; 3] =
        std::array::from_fn(|a| (0..k).map(|kk| valid_range(dims[a], od[a], kk, pad, s)).collect());

    let channels = par::map_range(shape.out_channels, |o| {
        let mut out = vec![bias.map_or(T::zero(), |b| b[o]); n_out];
        let g = o / cout_g;
        for ii in 0..cin_g {
            let src = input.channel(g * cin_g + ii);
            let wbase = (o * cin_g + ii) * k3;
            for kz in 0..k {
                let (z0, z1) = ranges[2][kz];
                for ky in 0..k {
                    let (y0, y1) = ranges[1][ky];
                    for kx in 0..k {
                        let (x0, x1) = ranges[0][kx];
                        let w = weight[wbase + kx + k * (ky + k * kz)];
                        if w == T::zero() {
                            continue;
                        }
                        for zo in z0..z1 {
                            let zi = zo * s + kz - pad;
                            for yo in y0..y1 {
                                let yi = yo * s + ky - pad;
                                let srow = nx * (yi + ny * zi);
                                let drow = ox * (yo + oy * zo);
                                for xo in x0..x1 {
                                    let xi = xo * s + kx - pad;
                                    out[drow + xo] = out[drow + xo] + w * src[srow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::from_vec(shape.out_channels, od, channels.into_iter().flatten().collect())
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    shape: ConvShape,
) -> Result<ConvGrads<T>> {
    shape.validate(&[input.channels, 0], weight.len(), None)?;
    let dims = input.dims;
    let od = shape.out_dims(dims);
    if grad_out.dims != od || grad_out.channels != shape.out_channels {
        return Err(Error::Shape("conv backward: gradient shape mismatch".into()));
    }
    let [nx, ny, _] = dims;
    let [ox, oy, _] = od;
    let k = shape.kernel;
    let k3 = k * k * k;
    let pad = shape.pad();
    let s = shape.stride;
    let cin_g = shape.in_channels / shape.groups;
    let cout_g = shape.out_channels / shape.groups;
    let n_in = input.voxels();
    let ranges: [Vec<(usize, usize)>; 3] =
        std::array::from_fn(|a| (0..k).map(|kk| valid_range(dims[a], od[a], kk, pad, s)).collect());

    // Visits every (input index, output index) pair for one kernel tap.
    let visit = |kx: usize, ky: usize, kz: usize, f: &mut dyn FnMut(usize, usize)| {
        let (z0, z1) = ranges[2][kz];
        let (y0, y1) = ranges[1][ky];
        let (x0, x1) = ranges[0][kx];
        for zo in z0..z1 {
            let zi = zo * s + kz - pad;
            for yo in y0..y1 {
                let yi = yo * s + ky - pad;
                let srow = nx * (yi + ny * zi);
                let drow = ox * (yo + oy * zo);
                for xo in x0..x1 {
                    f(srow + xo * s + kx - pad, drow + xo);
                }
            }
        }
    };

    let grad_in = par::map_range(shape.in_channels, |i| {
        let mut gi = vec![T::zero(); n_in];
        let g = i / cin_g;
        let ii = i % cin_g;
        for oo in 0..cout_g {
            let o = g * cout_g + oo;
            let go = grad_out.channel(o);
            let wbase = (o * cin_g + ii) * k3;
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let w = weight[wbase + kx + k * (ky + k * kz)];
                        visit(kx, ky, kz, &mut |si, di| gi[si] = gi[si] + w * go[di]);
                    }
                }
            }
        }
        gi
    });

    let grad_w = par::map_range(shape.out_channels, |o| {
        let g = o / cout_g;
        let go = grad_out.channel(o);
        let mut gw = vec![T::zero(); cin_g * k3];
        for ii in 0..cin_g {
            let src = input.channel(g * cin_g + ii);
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        visit(kx, ky, kz, &mut |si, di| acc = acc + src[si] * go[di]);
                        gw[ii * k3 + kx + k * (ky + k * kz)] = acc;
                    }
                }
            }
        }
        gw
    });

    let grad_b = (0..shape.out_channels)
        .map(|o| grad_out.channel(o).iter().copied().sum())
        .collect();

    Ok(ConvGrads {
        input: Tensor::from_vec(shape.in_channels, dims, grad_in.into_iter().flatten().collect())?,
        weight: grad_w.into_iter().flatten().collect(),
        bias: grad_b,
    })
}

/// 2x2x2 stride-2 transposed convolution: doubles every spatial axis.
pub fn conv_transpose_up2<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
) -> Result<Tensor<T>> {
    let cin = input.channels;
    if weight.len() != cin * out_channels * 8 || bias.len() != out_channels {
        return Err(Error::Shape("transposed conv parameter size mismatch".into()));
    }
    let [nx, ny, nz] = input.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let n_out = od.iter().product::<usize>();
    let channels = par::map_range(out_channels, |o| {
        let mut out = vec![bias[o]; n_out];
        for i in 0..cin {
            let src = input.channel(i);
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let w = weight[(i * out_channels + o) * 8 + kx + 2 * (ky + 2 * kz)];
                        for z in 0..nz {
                            for y in 0..ny {
                                let srow = nx * (y + ny * z);
                                let drow = od[0] * (2 * y + ky + od[1] * (2 * z + kz));
                                for x in 0..nx {
                                    out[drow + 2 * x + kx] = out[drow + 2 * x + kx] + w * src[srow + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::from_vec(out_channels, od, channels.into_iter().flatten().collect())
}

pub fn conv_transpose_up2_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let cin = input.channels;
    let cout = grad_out.channels;
    let [nx, ny, nz] = input.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    if grad_out.dims != od || weight.len() != cin * cout * 8 {
        return Err(Error::Shape("transposed conv backward: shape mismatch".into()));
    }
    let tap = |x: usize, y: usize, z: usize, kx: usize, ky: usize, kz: usize| {
        2 * x + kx + od[0] * (2 * y + ky + od[1] * (2 * z + kz))
    };
    let grad_in = par::map_range(cin, |i| {
        let mut gi = vec![T::zero(); nx * ny * nz];
        for o in 0..cout {
            let go = grad_out.channel(o);
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let w = weight[(i * cout + o) * 8 + kx + 2 * (ky + 2 * kz)];
                        for z in 0..nz {
                            for y in 0..ny {
                                for x in 0..nx {
                                    let si = x + nx * (y + ny * z);
                                    gi[si] = gi[si] + w * go[tap(x, y, z, kx, ky, kz)];
                                }
                            }
                        }
                    }
                }
            }
        }
        gi
    });
    let grad_w = par::map_range(cin, |i| {
        let src = input.channel(i);
        let mut gw = vec![T::zero(); cout * 8];
        for o in 0..cout {
            let go = grad_out.channel(o);
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let mut acc = T::zero();
                        for z in 0..nz {
                            for y in 0..ny {
                                for x in 0..nx {
                                    acc = acc + src[x + nx * (y + ny * z)] * go[tap(x, y, z, kx, ky, kz)];
                                }
                            }
                        }
                        gw[o * 8 + kx + 2 * (ky + 2 * kz)] = acc;
                    }
                }
            }
        }
        gw
    });
    let grad_b = (0..cout).map(|o| grad_out.channel(o).iter().copied().sum()).collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(cin, input.dims, grad_in.into_iter().flatten().collect())?,
        weight: grad_w.into_iter().flatten().collect(),
        bias: grad_b,
    })
}
