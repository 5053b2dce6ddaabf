use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// All network activations, parameters and gradients in this crate are
/// `Tensor`s. Shapes are dynamic; most of the code works with rank-1
/// (`[n]`), rank-2 (`[rows, cols]`) and rank-3 (`[channels, height, width]`)
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0/rank-1 single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Flat index for a `[c, h, w]` tensor.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(c, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise in-place accumulate. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}

/// A feature map with its geometric relationship to the source image.
///
/// `stride` is the number of image pixels spanned by one feature cell, so a
/// `C x H x W` volume at stride `r` covers an `H*r x W*r` pixel region.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    data: Tensor,
    stride: usize,
}

impl FeatureVolume {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "feature volume must be rank 3, got shape {:?}",
                data.shape()
            )));
        }
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "feature volume dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        Ok(FeatureVolume { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn idx3_is_row_major() {
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect());
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 1, 2), 5.0);
        assert_eq!(t.at3(1, 0, 0), 6.0);
        assert_eq!(t.at3(1, 1, 1), 10.0);
    }

    #[test]
    fn feature_volume_validates() {
        assert!(FeatureVolume::new(Tensor::zeros(&[1, 2, 2]), 8).is_ok());
        assert!(FeatureVolume::new(Tensor::zeros(&[2, 2]), 8).is_err());
        assert!(FeatureVolume::new(Tensor::zeros(&[1, 0, 2]), 8).is_err());
        assert!(FeatureVolume::new(Tensor::zeros(&[1, 2, 2]), 0).is_err());
    }
}
