//! Dense 4-D activations and the scalar abstraction the network is generic over.
//!
//! Storage is channel-major (`C × B × H × W`, width fastest) so that a
//! convolution over the whole batch writes one contiguous `(C_out, B·H·W)`
//! matrix and each channel's batch statistics live in one contiguous run.
//! The logical shape is still reported as `(batch, channels, height, width)`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the network (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c ← alpha·a·b + beta·c` for an `m×k` by `k×n` product with arbitrary
    /// row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

fn extent(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1 + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: a too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: b too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: c too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A batch of multi-channel 2-D feature maps.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .finish_non_exhaustive()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    /// Builds a tensor from data in conventional `B × C × H × W` order.
    pub fn from_nchw(shape: [usize; 4], nchw: &[T]) -> Self {
        let [b, c, h, w] = shape;
        assert_eq!(nchw.len(), b * c * h * w, "data length does not match shape");
        let mut t = Self::zeros(b, c, h, w);
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let src = &nchw[(bi * c + ci) * hw..][..hw];
                t.plane_mut(bi, ci).copy_from_slice(src);
            }
        }
        t
    }

    /// Copies the data out in conventional `B × C × H × W` order.
    pub fn to_nchw(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for bi in 0..self.batch {
            for ci in 0..self.channels {
                out.extend_from_slice(&self.plane(bi, ci)[..hw]);
            }
        }
        out
    }

    pub(crate) fn from_raw(batch: usize, channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), batch * channels * height * width);
        Self { batch, channels, height, width, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

impl<T> Tensor<T> {
    /// `(batch, channels, height, width)`.
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Raw channel-major storage.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + b) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> &T {
        &self.data[self.index(b, c, y, x)]
    }

    /// One `H × W` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.plane_len();
        let start = (c * self.batch + b) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.plane_len();
        let start = (c * self.batch + b) * hw;
        &mut self.data[start..start + hw]
    }

    /// All `B × H × W` values of one channel.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.batch * self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.batch * self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }
}

impl<T: Copy> Tensor<T> {
    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Tensor<T> {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            assert_eq!(
                (p.batch, p.height, p.width),
                (first.batch, first.height, first.width),
                "concat: spatial/batch mismatch"
            );
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Tensor {
            batch: first.batch,
            channels,
            height: first.height,
            width: first.width,
            data,
        }
    }

    /// Splits along the channel axis at `at`; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, at: usize) -> (Tensor<T>, Tensor<T>) {
        let n = self.batch * self.plane_len();
        let (lo, hi) = self.data.split_at(at * n);
        let mk = |channels, data: &[T]| Tensor {
            batch: self.batch,
            channels,
            height: self.height,
            width: self.width,
            data: data.to_vec(),
        };
        (mk(at, lo), mk(self.channels - at, hi))
    }

    /// Extracts one sample as a batch-of-one tensor.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let hw = self.plane_len();
        let mut data = Vec::with_capacity(self.channels * hw);
        for c in 0..self.channels {
            let start = (c * self.batch + b) * hw;
            data.extend_from_slice(&self.data[start..start + hw]);
        }
        Tensor {
            batch: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Softmax over the channel axis.
    pub fn softmax_channels(&self) -> Tensor<T> {
        let mut out = self.clone();
        let n = self.batch * self.plane_len();
        let c = self.channels;
        for p in 0..n {
            let mut max = T::neg_infinity();
            for ci in 0..c {
                max = max.max(self.data[ci * n + p]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (self.data[ci * n + p] - max).exp();
                out.data[ci * n + p] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                out.data[ci * n + p] = out.data[ci * n + p] / sum;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_round_trip() {
        let src: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| v as f64).collect();
        let t = Tensor::from_nchw([2, 3, 4, 5], &src);
        assert_eq!(t.to_nchw(), src);
        // NCHW index 1*60 + 2*20 + 3*5 + 4
        assert_eq!(*t.at(1, 2, 3, 4), (60 + 40 + 15 + 4) as f64);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::from_nchw([2, 1, 2, 2], &[1.0f32, 2., 3., 4., 5., 6., 7., 8.]);
        let b = Tensor::from_nchw([2, 2, 2, 2], &(0..16).map(|v| v as f32).collect::<Vec<_>>());
        let c = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(c.channels(), 3);
        assert_eq!(*c.at(1, 0, 1, 1), 8.0);
        assert_eq!(*c.at(1, 2, 0, 1), *b.at(1, 1, 0, 1));
        let (lo, hi) = c.split_channels(1);
        assert_eq!(lo, a);
        assert_eq!(hi, b);
    }

    #[test]
    fn gemm_strided_matches_naive() {
        // a: 2x3 row-major, b: 3x2 given column-major
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 2., 1., 1., 0.]; // columns (1,0,2) and (1,1,0)
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, (3, 1), &b, (1, 3), 0.0, &mut c, (2, 1));
        assert_eq!(c, [7.0, 3.0, 16.0, 9.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let t = Tensor::from_nchw([1, 3, 1, 2], &[0.0f64, 5.0, 1.0, -2.0, 2.0, 0.5]);
        let s = t.softmax_channels();
        for x in 0..2 {
            let sum: f64 = (0..3).map(|c| *s.at(0, c, 0, x)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
