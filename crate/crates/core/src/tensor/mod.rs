//! Dense rank-4 tensor engine with hand-derived forward and backward passes
//! for every layer the network needs.
//!
//! Storage is single precision in contiguous row-major (N, C, H, W) order;
//! reductions (dot products, statistics) accumulate in double precision.

mod activations;
mod adam;
mod batchnorm;
mod conv;
mod deconv;
pub mod io;

pub use activations::{relu_backward, relu_forward, softmax_channels};
pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormParams};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_output_dims, ConvParams};
pub use deconv::{deconv2d_backward, deconv2d_forward, deconv2d_output_dims, DeconvParams};

use crate::error::{CoreError, Result};

/// Dense (batch, channel, height, width) array of f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(CoreError::shape(
                "Tensor::from_vec",
                format!(
                    "data length {} != {}x{}x{}x{} = {}",
                    data.len(),
                    n,
                    c,
                    h,
                    w,
                    n * c * h * w
                ),
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: f32) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    /// Build from a function of the (n, c, y, x) index.
    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for bi in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Tensor { n, c, h, w, data }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Contiguous (h*w) slice for one (batch, channel) plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &self.data[start..start + len]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &mut self.data[start..start + len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Mutable access to the backing vector. Callers must not change its length.
    #[inline]
    pub fn data_vec_mut(&mut self) -> &mut Vec<f32> {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum with shape checking.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims() != other.dims() {
            return Err(CoreError::shape(
                "Tensor::add",
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(CoreError::shape(
                "Tensor::add_assign",
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        for (o, v) in self.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(())
    }

    /// One batch item as an (1, C, H, W) view copy.
    pub fn slice_batch(&self, n: usize) -> Tensor {
        let len = self.c * self.h * self.w;
        Tensor {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
