use crate::error::{Error, Result};

/// Widths and depths of the three networks plus the fixed internal
/// resolution at which curves are estimated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Side of the square low-resolution working image.
    pub low_res: usize,
    pub curve_width: usize,
    pub noise_width: usize,
    pub time_dim: usize,
    pub denoise_width: usize,
    pub denoise_blocks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            low_res: 256,
            curve_width: 32,
            noise_width: 32,
            time_dim: 32,
            denoise_width: 16,
            denoise_blocks: 3,
        }
    }
}

impl ModelSpec {
    /// Small configuration used by gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            low_res: 8,
            curve_width: 8,
            noise_width: 8,
            time_dim: 8,
            denoise_width: 8,
            denoise_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_spec", msg));
        if self.low_res == 0 || !self.low_res.is_multiple_of(4) {
            return bad(format!("low_res must be a positive multiple of 4, got {}", self.low_res));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be even, got {}", self.time_dim));
        }
        for (name, v) in [
            ("curve_width", self.curve_width),
            ("noise_width", self.noise_width),
            ("denoise_width", self.denoise_width),
            ("denoise_blocks", self.denoise_blocks),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}
