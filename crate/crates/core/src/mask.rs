//! Per-pixel binary masks and two-class probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major mask with values in {0,1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::dim("mask", format!("{height}×{width} mask with {} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("mask value {bad} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a & b == 0)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with("union", other, |a, b| a | b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub(crate) fn zip_with(&self, op: &'static str, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Pixel values as floats, for masking images or feeding the network.
    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect()
    }
}

/// Two-class probabilities (background, foreground) for one image, stored
/// as a 2×H×W plane pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    /// Validates a 2×H×W plane pair: values in [0,1], per-pixel sum 1 ± 1e-6.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::dim("probmap", format!("expected {} values, got {}", 2 * height * width, data.len())));
        }
        let tol = T::from_f64_lossy(1e-6);
        let hw = height * width;
        for i in 0..hw {
            let (b, f) = (data[i], data[hw + i]);
            let in_range = |v: T| v >= T::zero() && v <= T::one();
            if !in_range(b) || !in_range(f) || (b + f - T::one()).abs() > tol {
                return Err(Error::Format(format!("pixel {i} is not a probability pair ({b}, {f})")));
            }
        }
        Ok(Self { height, width, data })
    }

    /// Builds the pair from the foreground channel alone.
    pub fn from_foreground(height: usize, width: usize, fg: &[T]) -> Result<Self> {
        if fg.len() != height * width {
            return Err(Error::dim("probmap", format!("expected {} values, got {}", height * width, fg.len())));
        }
        let mut data: Vec<T> = fg.iter().map(|&p| T::one() - p).collect();
        data.extend_from_slice(fg);
        Self::new(height, width, data)
    }

    /// Uniform (0.5, 0.5) map.
    pub fn uniform(height: usize, width: usize) -> Self {
        let half = T::from_f64_lossy(0.5);
        Self { height, width, data: vec![half; 2 * height * width] }
    }

    /// Extracts sample `index` from an N×2×H×W softmax output.
    pub fn from_batch(probs: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = probs.dims4("probmap")?;
        if c != 2 || index >= n {
            return Err(Error::dim("probmap", format!("sample {index} of {:?}", probs.shape())));
        }
        let plane = 2 * h * w;
        Ok(Self { height: h, width: w, data: probs.data()[index * plane..(index + 1) * plane].to_vec() })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn background(&self) -> &[T] {
        &self.data[..self.height * self.width]
    }

    pub fn foreground(&self) -> &[T] {
        &self.data[self.height * self.width..]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}
