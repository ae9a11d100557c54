use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Planar RGB image, `3×H×W`, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor<f32>);

impl Image {
    /// Wraps a `3×H×W` tensor, clamping values into `[0, 1]`.
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 3 {
            return Err(Error::shape("image", "3 channels", c));
        }
        t.ensure_finite("image")?;
        Ok(Self(t.clamp(0.0, 1.0)))
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        Self(Tensor::full(&[3, height, width], v.clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().map(|&v| v as f64).sum::<f64>() / self.0.len() as f64
    }

    pub fn same_size(&self, other: &Image, op: &'static str) -> Result<()> {
        self.0.same_dims(&other.0, op)
    }
}
