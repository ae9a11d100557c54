//! Inference: curves estimated at the fixed low resolution, applied at the
//! input resolution.

use std::time::{Duration, Instant};

use crate::curve::{le_apply_denoised_final, le_apply_forward, upsample_curve_forward};
use crate::diffusion::{sample_curves, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::imaging::{resize, Image, ResampleMethod};
use crate::models::{NetParams, Networks};
use crate::nn::{ops, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhanceOptions {
    pub use_diffusion: bool,
    pub use_denoiser: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            use_diffusion: true,
            use_denoiser: true,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Enhanced {
    pub image: Image,
    /// Curves at the low resolution, after refinement when enabled.
    pub curves: Tensor<f32>,
    /// MACs of the curve estimator and the sampler.
    pub network_macs: u64,
    /// MACs spent at the input resolution (the denoiser).
    pub full_res_macs: u64,
    pub network_time: Duration,
    pub full_res_time: Duration,
}

pub fn enhance(
    img: &Image,
    nets: &Networks,
    params: &NetParams<f32>,
    sched: &NoiseSchedule,
    opts: &EnhanceOptions,
) -> Result<Enhanced> {
    let (h, w) = (img.height(), img.width());
    let l = nets.spec.low_res;

    let start = Instant::now();
    let (curves, network_macs) = ops::measure(|| -> Result<Tensor<f32>> {
        let small = resize(img.tensor(), ResampleMethod::Bilinear, l, l)?;
        let cbar = nets.curve.forward(&params.curve, &small)?;
        if opts.use_diffusion {
            sample_curves(&nets.noise, &params.noise, &small, &cbar, &opts.sampler, sched, opts.seed)
        } else {
            Ok(cbar)
        }
    });
    let curves = curves?;
    let network_time = start.elapsed();

    let start = Instant::now();
    let (out, full_res_macs) = ops::measure(|| -> Result<Tensor<f32>> {
        let (full, _) = upsample_curve_forward(&curves, h, w)?;
        if opts.use_denoiser {
            le_apply_denoised_final(img.tensor(), &full, &nets.denoiser, &params.denoise)
        } else {
            Ok(le_apply_forward(img.tensor(), &full)?.0)
        }
    });
    let image = Image::new(out?)?;
    Ok(Enhanced {
        image,
        curves,
        network_macs,
        full_res_macs,
        network_time,
        full_res_time: start.elapsed(),
    })
}
