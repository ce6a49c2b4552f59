//! Dense row-major f32 tensors of rank at most 5 (batch, channel, depth,
//! height, width; width fastest).

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("full: consistent by construction")
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > 5 {
            return Err(CoreError::ShapeMismatch(format!(
                "rank {} exceeds maximum 5",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Interpret the shape as (batch, channel, depth, height, width),
    /// treating missing leading dims as 1.
    pub fn dims5(&self) -> [usize; 5] {
        let mut d = [1usize; 5];
        let off = 5 - self.shape.len();
        for (i, &e) in self.shape.iter().enumerate() {
            d[off + i] = e;
        }
        d
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(what.to_string()))
        }
    }

    /// Bitwise equality (exact, including shape).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn dims5_pads_leading() {
        let t = Tensor::zeros(&[3, 4, 5]);
        assert_eq!(t.dims5(), [1, 1, 3, 4, 5]);
        let t = Tensor::zeros(&[2, 6, 3, 4, 5]);
        assert_eq!(t.dims5(), [2, 6, 3, 4, 5]);
    }

    #[test]
    fn finite_check() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.ensure_finite("t").is_ok());
        t.data_mut()[2] = f32::NAN;
        assert!(matches!(
            t.ensure_finite("t"),
            Err(CoreError::NonFinite(_))
        ));
    }
}
