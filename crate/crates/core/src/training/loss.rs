//! The four training losses, each with its gradient.

use rand::seq::index::sample;
use rand::Rng;

use crate::curve::{le_apply_backward, le_apply_forward, upsample_curve_backward, upsample_curve_forward};
use crate::error::{Error, Result};
use crate::imaging::{resize_backward, resize_forward, Image, ResampleMethod};
use crate::nn::{lit, Real, Tensor};

/// Mean squared error and its gradient with respect to `eps_hat`.
pub fn loss_simple<F: Real>(eps: &Tensor<F>, eps_hat: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    let d = eps_hat.sub(eps)?;
    let n = d.len() as f64;
    let value = d.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / n;
    Ok((value, d.scale(lit(2.0 / n))))
}

/// `sqrt(mean((a − b)²))` and its gradient with respect to `a`. The gradient
/// is taken as zero when the distance is zero.
pub fn rms_distance<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    let d = a.sub(b)?;
    let n = d.len() as f64;
    let value = (d.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / n).sqrt();
    if value == 0.0 {
        return Ok((0.0, Tensor::zeros_like(&d)));
    }
    Ok((value, d.scale(lit(1.0 / (n * value)))))
}

pub fn loss_sup(pred: &Image, target: &Image) -> Result<f64> {
    pred.same_size(target, "loss_sup")?;
    rms_distance(pred.tensor(), target.tensor()).map(|(v, _)| v)
}

/// Upsamples low-resolution curves to the image size, applies them without
/// the denoiser and measures the distance to the normal-light image.
/// Returns the loss and its gradient with respect to `x0_hat`.
pub fn loss_bootstrap_grad<F: Real>(low: &Tensor<F>, x0_hat: &Tensor<F>, normal: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    let (_, h, w) = low.chw()?;
    low.same_dims(normal, "loss_bootstrap")?;
    let (curves, up) = upsample_curve_forward(x0_hat, h, w)?;
    let (out, cache) = le_apply_forward(low, &curves)?;
    let (value, g) = rms_distance(&out, normal)?;
    let g_curves = le_apply_backward(&g, &cache, &curves)?;
    Ok((value, upsample_curve_backward(&g_curves, &up)?))
}

pub fn loss_bootstrap(low: &Image, x0_hat: &Tensor<f32>, normal: &Image) -> Result<f64> {
    loss_bootstrap_grad(low.tensor(), x0_hat, normal.tensor()).map(|(v, _)| v)
}

/// RMS distance between two factor-2 downsamplings of `img`, with its
/// gradient with respect to `img`.
pub fn self_term<F: Real>(img: &Tensor<F>, m1: ResampleMethod, m2: ResampleMethod) -> Result<(f64, Tensor<F>)> {
    let (_, h, w) = img.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("loss_self", format!("{h}x{w} is not divisible by 2")));
    }
    let (d1, c1) = resize_forward(img, m1, h / 2, w / 2)?;
    let (d2, c2) = resize_forward(img, m2, h / 2, w / 2)?;
    let (value, g) = rms_distance(&d1, &d2)?;
    let mut grad = resize_backward(&g, &c1)?;
    grad.axpy(-F::one(), &resize_backward(&g, &c2)?)?;
    Ok((value, grad))
}

/// Two distinct methods drawn uniformly from the six.
pub fn draw_method_pair<R: Rng + ?Sized>(rng: &mut R) -> (ResampleMethod, ResampleMethod) {
    let idx = sample(rng, ResampleMethod::ALL.len(), 2);
    (ResampleMethod::ALL[idx.index(0)], ResampleMethod::ALL[idx.index(1)])
}

/// Sum of [`self_term`] over the intermediates, each with a freshly drawn
/// method pair. Returns the loss and one gradient per intermediate.
pub fn loss_self_grad<F: Real, R: Rng + ?Sized>(intermediates: &[Tensor<F>], rng: &mut R) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(intermediates.len());
    for img in intermediates {
        let (m1, m2) = draw_method_pair(rng);
        let (v, g) = self_term(img, m1, m2)?;
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn loss_self<R: Rng + ?Sized>(intermediates: &[Image], rng: &mut R) -> Result<f64> {
    let ts: Vec<Tensor<f32>> = intermediates.iter().map(|i| i.tensor().clone()).collect();
    loss_self_grad(&ts, rng).map(|(v, _)| v)
}
