//! Minimal dense tensor: a shape plus a row-major `f64` buffer.
//!
//! Feature maps are stored as `[channels, height, width]`, vectors as `[n]`.
//! Values are kept in `f64` end to end; quantized layers carry integer codes
//! separately (see [`crate::quantizer::QuantTensor`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Index into a `[C, H, W]` tensor.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        let (_, hh, ww) = self.dims3();
        self.data[(c * hh + h) * ww + w]
    }

    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let (_, hh, ww) = self.dims3();
        self.data[(c * hh + h) * ww + w] = v;
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_element_count_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rank3_indexing_is_row_major() {
        let mut t = Tensor::zeros(vec![2, 2, 3]);
        t.set3(1, 0, 2, 7.0);
        assert_eq!(t.data[1 * 2 * 3 + 0 * 3 + 2], 7.0);
        assert_eq!(t.at3(1, 0, 2), 7.0);
    }
}
