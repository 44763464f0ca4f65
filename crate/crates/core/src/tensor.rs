//! Dense `C x X x Y x Z` tensors used by the model and loss kernels.
//!
//! Layout matches [`Volume`](crate::volume::Volume): channel-major, x fastest.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, Volume};

/// Floating-point element type for model and loss computations.
pub trait Scalar: Float + Send + Sync + std::iter::Sum + std::fmt::Debug + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let want = channels * dims.iter().product::<usize>();
        if data.len() != want {
            return Err(Error::Shape(format!("tensor data {} != {want}", data.len())));
        }
        Ok(Tensor { channels, dims, data })
    }

    pub fn from_volume(vol: &Volume) -> Self {
        Tensor {
            channels: vol.channels(),
            dims: vol.shape(),
            data: vol.data().iter().map(|&v| T::of(v as f64)).collect(),
        }
    }

    pub fn to_volume(&self, geometry: GridGeometry) -> Result<Volume> {
        if geometry.shape != self.dims {
            return Err(Error::Shape(format!("tensor dims {:?} vs geometry {:?}", self.dims, geometry.shape)));
        }
        Volume::new(
            self.channels,
            geometry,
            self.data.iter().map(|v| v.to_f64().unwrap() as f32).collect(),
        )
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("concat dims {:?} vs {:?}", self.dims, other.dims)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        })
    }

    /// Splits channels `[0, k)` and `[k, C)`.
    pub fn split(&self, k: usize) -> (Self, Self) {
        let n = self.voxels();
        (
            Tensor {
                channels: k,
                dims: self.dims,
                data: self.data[..k * n].to_vec(),
            },
            Tensor {
                channels: self.channels - k,
                dims: self.dims,
                data: self.data[k * n..].to_vec(),
            },
        )
    }
}

/// Logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
