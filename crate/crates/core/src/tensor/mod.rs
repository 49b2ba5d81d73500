//! Dense tensors, convolution operators and the rank-revealing solver that
//! every reconstruction step is posed against.

mod operator;
mod solve;

pub use operator::{
    build_conv_operator, build_weight_gradient_operator, stack_operators, LinearOperator,
};
pub use solve::{solve_least_squares, LeastSquares, RankMethod, SolveReport, DEFAULT_RANK_TOL};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("convolution produces a non-positive output dimension: {0}")]
    EmptyOutput(String),
    #[error("empty system")]
    EmptySystem,
    #[error("invalid tolerance {0}")]
    InvalidTolerance(f64),
    #[error("linear algebra backend failure: {0}")]
    Backend(String),
}

/// Height, width and channel count of an image or feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per channel.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Flat index in channel-major `(channel, row, col)` order.
    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    /// Tensor shape of a feature map in `(channel, row, col)` layout.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Tensor shape of an image in `(row, col, channel)` layout.
    pub fn hwc(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Row-major array of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    /// Skips the finiteness scan; callers guarantee finite data of the right length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Self {
            shape: vec![n],
            data: self.data,
        }
    }

    /// Applies `f` elementwise, rejecting non-finite results.
    pub fn try_map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self, TensorError> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self, TensorError> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Result<Self, TensorError> {
        self.try_map(|v| v * k)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<(), TensorError> {
        if self.shape != shape {
            return Err(TensorError::DimensionMismatch(format!(
                "{what}: expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Converts a `(row, col, channel)` image into `(channel, row, col)` layout.
    pub fn hwc_to_chw(&self) -> Result<Self, TensorError> {
        let [h, w, c] = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Ok(Self::from_parts(vec![c, h, w], out))
    }

    /// Converts a `(channel, row, col)` feature map into `(row, col, channel)` layout.
    pub fn chw_to_hwc(&self) -> Result<Self, TensorError> {
        let [c, h, w] = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = self.data[(ch * h + y) * w + x];
                }
            }
        }
        Ok(Self::from_parts(vec![h, w, c], out))
    }

    fn dims3(&self) -> Result<[usize; 3], TensorError> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            s => Err(TensorError::DimensionMismatch(format!(
                "expected a rank-3 tensor, got shape {s:?}"
            ))),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroDimension(shape.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite(1))
        );
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn layout_conversion_round_trips() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let chw = t.hwc_to_chw().unwrap();
        assert_eq!(chw.shape(), &[2, 2, 3]);
        // pixel (row 1, col 2), channel 1 sits at hwc index (1*3+2)*2+1 = 11
        assert_eq!(chw.data()[(2 + 1) * 3 + 2], 11.0);
        assert_eq!(chw.chw_to_hwc().unwrap(), t);
    }

    #[test]
    fn overflowing_map_is_rejected() {
        let t = Tensor::from_vec(vec![1e300]).unwrap();
        assert!(t.try_map(|v| v * 1e300).is_err());
    }
}
