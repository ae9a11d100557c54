//! Quadratic light-enhancement curves.
//!
//! One stage maps `y ↦ y + c·y·(1 − y)`; for `y ∈ [0, 1]` and `c ∈ [−1, 1]`
//! the result stays in `[0, 1]` and is non-decreasing in `y`. A curve map
//! holds eight stages of three channels each (24 planes, stage `i` in
//! channels `3i..3i+3`).

use crate::error::{Error, Result};
use crate::imaging::{resize_backward, resize_forward, Image, ResampleMethod, ResizeCache};
use crate::models::{Denoiser, DenoiserCache};
use crate::nn::{ParamStore, Real, Tensor};

pub const STAGES: usize = 8;
pub const CURVE_CHANNELS: usize = 3 * STAGES;

/// `24×H×W` curve parameters in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveMap(Tensor<f32>);

impl CurveMap {
    /// Wraps a 24-channel tensor, clamping into `[−1, 1]`.
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != CURVE_CHANNELS {
            return Err(Error::shape("curve_map", "24 channels", c));
        }
        t.ensure_finite("curve map")?;
        Ok(Self(t.clamp(-1.0, 1.0)))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[CURVE_CHANNELS, h, w]))
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Self {
        Self(Tensor::full(&[CURVE_CHANNELS, h, w], v.clamp(-1.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn stage(&self, i: usize) -> Tensor<f32> {
        stage(&self.0, i).expect("stage index within 0..8")
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }
}

fn stage<F: Real>(curves: &Tensor<F>, i: usize) -> Result<Tensor<F>> {
    curves.channels(3 * i, 3)
}

fn check_curves<F: Real>(y: &Tensor<F>, curves: &Tensor<F>, op: &'static str) -> Result<()> {
    let (c, h, w) = y.chw()?;
    if c != 3 {
        return Err(Error::shape(op, "3-channel image", c));
    }
    if curves.dims() != [CURVE_CHANNELS, h, w] {
        return Err(Error::shape(op, format!("curves [24, {h}, {w}]"), format!("{:?}", curves.dims())));
    }
    Ok(())
}

/// One curve stage, elementwise.
pub fn le_step<F: Real>(y: &Tensor<F>, c: &Tensor<F>) -> Result<Tensor<F>> {
    y.zip_map(c, "le_step", |y, c| y + c * y * (F::one() - y))
}

/// Gradients of [`le_step`] with respect to `y` and `c`.
pub fn le_step_backward<F: Real>(grad: &Tensor<F>, y: &Tensor<F>, c: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let one = F::one();
    let two = one + one;
    let gy = grad.zip_map(&y.zip_map(c, "le_step_backward", |y, c| one + c * (one - two * y))?, "le_step_backward", |g, d| g * d)?;
    let gc = grad.zip_map(y, "le_step_backward", |g, y| g * y * (one - y))?;
    Ok((gy, gc))
}

/// Inputs to each of the eight stages.
#[derive(Clone, Debug)]
pub struct LeCache<F> {
    stage_inputs: Vec<Tensor<F>>,
}

pub fn le_apply_forward<F: Real>(y: &Tensor<F>, curves: &Tensor<F>) -> Result<(Tensor<F>, LeCache<F>)> {
    check_curves(y, curves, "le_apply")?;
    let mut x = y.clone();
    let mut stage_inputs = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let next = le_step(&x, &stage(curves, i)?)?;
        stage_inputs.push(x);
        x = next;
    }
    Ok((x, LeCache { stage_inputs }))
}

/// Gradient of [`le_apply_forward`] with respect to the curves.
pub fn le_apply_backward<F: Real>(grad: &Tensor<F>, cache: &LeCache<F>, curves: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = grad.clone();
    let mut stage_grads = vec![None; STAGES];
    for i in (0..STAGES).rev() {
        let (gy, gc) = le_step_backward(&g, &cache.stage_inputs[i], &stage(curves, i)?)?;
        stage_grads[i] = Some(gc);
        g = gy;
    }
    let parts: Vec<Tensor<F>> = stage_grads.into_iter().map(|t| t.expect("filled")).collect();
    Tensor::concat_channels(&parts.iter().collect::<Vec<_>>())
}

/// Applies all eight stages. No clamping is needed between stages.
pub fn le_apply(image: &Image, curves: &CurveMap) -> Result<Image> {
    let (out, _) = le_apply_forward(image.tensor(), curves.tensor())?;
    Image::new(out)
}

#[derive(Clone, Debug)]
pub struct UpsampleCache<F> {
    resize: ResizeCache<F>,
    pre_clamp: Tensor<F>,
}

/// Bilinear resize of a curve tensor followed by a clamp into `[−1, 1]`.
pub fn upsample_curve_forward<F: Real>(low: &Tensor<F>, h: usize, w: usize) -> Result<(Tensor<F>, UpsampleCache<F>)> {
    let (c, _, _) = low.chw()?;
    if c != CURVE_CHANNELS {
        return Err(Error::shape("upsample_curve", "24 channels", c));
    }
    let (up, resize) = resize_forward(low, ResampleMethod::Bilinear, h, w)?;
    let out = up.clamp(-F::one(), F::one());
    Ok((out, UpsampleCache { resize, pre_clamp: up }))
}

pub fn upsample_curve_backward<F: Real>(grad: &Tensor<F>, cache: &UpsampleCache<F>) -> Result<Tensor<F>> {
    let masked = grad.zip_map(&cache.pre_clamp, "upsample_curve_backward", |g, v| {
        if v.abs() <= F::one() {
            g
        } else {
            F::zero()
        }
    })?;
    resize_backward(&masked, &cache.resize)
}

pub fn upsample_curve(low: &CurveMap, h: usize, w: usize) -> Result<CurveMap> {
    let (out, _) = upsample_curve_forward(low.tensor(), h, w)?;
    CurveMap::new(out)
}

#[derive(Clone, Debug)]
pub struct DenoisedCache<F> {
    stage_inputs: Vec<Tensor<F>>,
    denoiser: Vec<DenoiserCache<F>>,
    pre_clamp: Vec<Tensor<F>>,
}

/// Curve stages interleaved with the denoiser. Returns the eight denoised,
/// clamped intermediates; the last one is the final output.
pub fn le_apply_denoised_forward<F: Real>(
    y: &Tensor<F>,
    curves: &Tensor<F>,
    denoiser: &Denoiser,
    params: &ParamStore<F>,
) -> Result<(Vec<Tensor<F>>, DenoisedCache<F>)> {
    check_curves(y, curves, "le_apply_denoised")?;
    let mut x = y.clone();
    let mut cache = DenoisedCache {
        stage_inputs: Vec::with_capacity(STAGES),
        denoiser: Vec::with_capacity(STAGES),
        pre_clamp: Vec::with_capacity(STAGES),
    };
    let mut outs = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let adjusted = le_step(&x, &stage(curves, i)?)?;
        let (refined, dc) = denoiser.forward_cached(params, &adjusted)?;
        let clamped = refined.clamp(F::zero(), F::one());
        cache.stage_inputs.push(x);
        cache.denoiser.push(dc);
        cache.pre_clamp.push(refined);
        outs.push(clamped.clone());
        x = clamped;
    }
    Ok((outs, cache))
}

/// Backward through [`le_apply_denoised_forward`]. `grads[i]` is the loss
/// gradient with respect to intermediate `i`. Denoiser parameter gradients
/// are accumulated into `params`; the curve gradient is returned.
pub fn le_apply_denoised_backward<F: Real>(
    grads: &[Tensor<F>],
    cache: &DenoisedCache<F>,
    curves: &Tensor<F>,
    denoiser: &Denoiser,
    params: &mut ParamStore<F>,
) -> Result<Tensor<F>> {
    if grads.len() != STAGES {
        return Err(Error::shape("le_apply_denoised_backward", STAGES, grads.len()));
    }
    let mut carry: Option<Tensor<F>> = None;
    let mut stage_grads: Vec<Option<Tensor<F>>> = vec![None; STAGES];
    for i in (0..STAGES).rev() {
        let mut g = grads[i].clone();
        if let Some(c) = carry.take() {
            g.add_assign(&c)?;
        }
        let g = g.zip_map(&cache.pre_clamp[i], "le_apply_denoised_backward", |g, v| {
            if v >= F::zero() && v <= F::one() {
                g
            } else {
                F::zero()
            }
        })?;
        let g_adj = denoiser.backward(params, &cache.denoiser[i], &g)?;
        let (gy, gc) = le_step_backward(&g_adj, &cache.stage_inputs[i], &stage(curves, i)?)?;
        stage_grads[i] = Some(gc);
        carry = Some(gy);
    }
    let parts: Vec<Tensor<F>> = stage_grads.into_iter().map(|t| t.expect("filled")).collect();
    Tensor::concat_channels(&parts.iter().collect::<Vec<_>>())
}

/// Final output of [`le_apply_denoised_forward`] without intermediates or
/// caches, for full-resolution inference.
pub fn le_apply_denoised_final<F: Real>(
    y: &Tensor<F>,
    curves: &Tensor<F>,
    denoiser: &Denoiser,
    params: &ParamStore<F>,
) -> Result<Tensor<F>> {
    check_curves(y, curves, "le_apply_denoised")?;
    let mut x = y.clone();
    for i in 0..STAGES {
        let adjusted = le_step(&x, &stage(curves, i)?)?;
        x = denoiser.forward(params, &adjusted)?.clamp(F::zero(), F::one());
    }
    Ok(x)
}

/// Returns the final image and all eight intermediates.
pub fn le_apply_denoised(
    image: &Image,
    curves: &CurveMap,
    denoiser: &Denoiser,
    params: &ParamStore<f32>,
) -> Result<(Image, Vec<Image>)> {
    let (outs, _) = le_apply_denoised_forward(image.tensor(), curves.tensor(), denoiser, params)?;
    let images = outs.into_iter().map(Image::new).collect::<Result<Vec<_>>>()?;
    Ok((images[STAGES - 1].clone(), images))
}
