//! Dense channel-major tensors.
//!
//! A [`Tensor3D`] stores `channels` stacked 2D planes; element `(c, y, x)`
//! lives at `c * H * W + y * W + x`. One y-plane (row `y` of every channel)
//! is therefore a set of `channels` contiguous runs of `W` values, strided by
//! `H * W`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape3 {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn bytes(&self) -> usize {
        self.len() * 4
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3D {
    shape: Shape3,
    data: Vec<f32>,
}

impl Tensor3D {
    pub fn zeros(shape: Shape3) -> Self {
        Tensor3D {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        Tensor3D {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor data",
                format!("{} values for {shape}", shape.len()),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor3D { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor3D { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape3) -> Result<Self> {
        Tensor3D::from_vec(shape, self.data)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Largest element-wise deviation of `actual` from `expected`, normalised by
/// the largest magnitude in `expected` (floored at 1).
///
/// Reassociated f32 sums of mixed-sign terms can differ by more than 1e-5
/// relative to an individual near-zero element, so comparisons are made
/// against the magnitude of the whole tensor instead.
pub fn max_rel_diff(actual: &[f32], expected: &[f32]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let scale = expected.iter().fold(1.0f64, |m, v| m.max(f64::from(v.abs())));
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (f64::from(*a) - f64::from(*e)).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Order-sensitive FNV-1a digest over the raw bit patterns.
pub fn checksum(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_major_indexing() {
        let t = Tensor3D::from_fn(Shape3::new(2, 3, 4), |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(t.index(1, 2, 3), 12 + 2 * 4 + 3);
        assert_eq!(t.get(1, 2, 3), 123.0);
        assert_eq!(t.channel(1)[0], 100.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor3D::from_vec(Shape3::new(1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("1x2x2"));
    }

    #[test]
    fn rel_diff_uses_tensor_scale() {
        assert_eq!(max_rel_diff(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let d = max_rel_diff(&[0.0, 10.0], &[1e-4, 10.0]);
        assert!((d - 1e-5).abs() < 1e-9);
    }
}
