//! Channel-major activation storage.
//!
//! Feature maps are laid out `[C][N][H][W]` so that a convolution lowered to
//! a matrix product writes its output rows directly in place, and per-channel
//! batch-norm reductions walk one contiguous slice.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    /// Pack a batch of `[C][H][W]` images (all the same size) into channel-major order.
    pub fn from_images(images: &[&[T]], channels: usize, height: usize, width: usize) -> Self {
        let batch = images.len();
        let plane = height * width;
        let mut out = Self::zeros(channels, batch, height, width);
        for (n, img) in images.iter().enumerate() {
            assert_eq!(img.len(), channels * plane, "image size mismatch");
            for c in 0..channels {
                let dst = (c * batch + n) * plane;
                out.data[dst..dst + plane].copy_from_slice(&img[c * plane..(c + 1) * plane]);
            }
        }
        out
    }

    /// Elements per channel (`N * H * W`).
    pub fn channel_len(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let len = self.channel_len();
        &mut self.data[c * len..(c + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Select a subset of the batch, preserving channel-major layout.
    pub fn select(&self, indices: &[usize]) -> Self {
        let plane = self.plane();
        let mut out = Self::zeros(self.channels, indices.len(), self.height, self.width);
        for c in 0..self.channels {
            for (dst_n, &src_n) in indices.iter().enumerate() {
                let src = (c * self.batch + src_n) * plane;
                let dst = (c * indices.len() + dst_n) * plane;
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }
}

/// Row-major dense matrix, used for logits, features and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
