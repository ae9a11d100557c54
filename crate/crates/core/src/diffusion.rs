//! Variance-preserving diffusion over curve tensors with a DDIM sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::NoiseNet;
use crate::nn::{lit, ParamStore, Real, Tensor};

/// Linear β ramp. Index `t` runs from 1 to `T`; `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::invalid("make_schedule", "T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize, op: &'static str) -> Result<f64> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::invalid(op, format!("t={t} outside 1..={}", self.timesteps())));
        }
        Ok(self.alpha_bar(t))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_sample<F: Real>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    let ab = sched.check_t(t, "forward_sample")?;
    let (a, b) = (lit::<F>(ab.sqrt()), lit::<F>((1.0 - ab).sqrt()));
    x0.zip_map(eps, "forward_sample", |x, e| a * x + b * e)
}

/// Inverts [`forward_sample`] for `x0` without clamping.
pub fn predict_x0_raw<F: Real>(x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    let ab = sched.check_t(t, "predict_x0")?;
    if ab <= 0.0 {
        return Err(Error::invalid("predict_x0", format!("alpha_bar({t}) is zero")));
    }
    let (inv, b) = (lit::<F>(1.0 / ab.sqrt()), lit::<F>((1.0 - ab).sqrt()));
    x_t.zip_map(eps_hat, "predict_x0", |x, e| (x - b * e) * inv)
}

/// Noise implied by `x_t` if the clean sample were exactly `cond`.
pub fn eps_prior<F: Real>(x_t: &Tensor<F>, cond: &Tensor<F>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    let ab = sched.check_t(t, "eps_prior")?;
    let (a, inv) = (lit::<F>(ab.sqrt()), lit::<F>(1.0 / (1.0 - ab).sqrt()));
    x_t.zip_map(cond, "eps_prior", |x, c| (x - a * c) * inv)
}

/// [`predict_x0_raw`] clamped to the curve domain `[−1, 1]`.
pub fn predict_x0<F: Real>(x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    Ok(predict_x0_raw(x_t, eps_hat, t, sched)?.clamp(-F::one(), F::one()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 20, eta: 0.0 }
    }
}

impl SamplerConfig {
    /// Uniformly spaced, strictly increasing timesteps ending at `T`.
    pub fn steps(&self, timesteps: usize) -> Result<Vec<usize>> {
        if self.num_steps == 0 || self.num_steps > timesteps {
            return Err(Error::invalid(
                "sampler",
                format!("num_steps {} must lie in 1..={timesteps}", self.num_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("sampler", format!("eta {} outside [0, 1]", self.eta)));
        }
        let n = self.num_steps;
        Ok((1..=n).map(|i| (i * timesteps).div_ceil(n)).collect())
    }
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` is the clean end).
pub fn reverse_step<F: Real>(
    x_t: &Tensor<F>,
    x0_hat: &Tensor<F>,
    t: usize,
    t_prev: usize,
    cfg: &SamplerConfig,
    noise: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if t_prev >= t {
        return Err(Error::invalid("reverse_step", format!("t_prev {t_prev} must be below t {t}")));
    }
    let ab = sched.check_t(t, "reverse_step")?;
    let ab_prev = sched.alpha_bar(t_prev);
    x_t.same_dims(x0_hat, "reverse_step")?;
    x_t.same_dims(noise, "reverse_step")?;
    let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (c0, ce, cn) = (lit::<F>(ab_prev.sqrt()), lit::<F>(dir), lit::<F>(sigma));
    let (sa, inv_sb) = (lit::<F>(sa), lit::<F>(1.0 / sb));
    let mut out = x0_hat.zip_map(x_t, "reverse_step", |x0, xt| {
        let eps = (xt - sa * x0) * inv_sb;
        c0 * x0 + ce * eps
    })?;
    if sigma > 0.0 {
        out.axpy(cn, noise)?;
    }
    Ok(out)
}

fn gaussian<F: Real>(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<F> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| lit(StandardNormal.sample(rng))).collect();
    Tensor::from_vec(dims, data).expect("dims match")
}

/// Runs the reverse chain from a given `x_T`. `eps_fn(x_t, t)` predicts the
/// noise; `rng` supplies the stochastic term when `eta > 0`.
pub fn sample_from<F: Real>(
    x_start: Tensor<F>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut eps_fn: impl FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    let steps = cfg.steps(sched.timesteps())?;
    let mut x = x_start;
    for k in (0..steps.len()).rev() {
        let t = steps[k];
        let t_prev = if k == 0 { 0 } else { steps[k - 1] };
        let eps_hat = eps_fn(&x, t)?;
        let x0 = predict_x0(&x, &eps_hat, t, sched)?;
        let noise = if cfg.eta > 0.0 {
            gaussian(rng, x.dims())
        } else {
            Tensor::zeros(x.dims())
        };
        x = reverse_step(&x, &x0, t, t_prev, cfg, &noise, sched)?;
        x.ensure_finite("diffusion sample")?;
    }
    Ok(x.clamp(-F::one(), F::one()))
}

/// Draws refined curves conditioned on the low-resolution image and the
/// curve estimator's output. Deterministic in `seed`.
///
/// The network predicts the residual over [`eps_prior`] of the conditioning
/// curves, so an untrained head samples back the conditioning curves.
#[allow(clippy::too_many_arguments)]
pub fn sample_curves(
    net: &NoiseNet,
    params: &ParamStore<f32>,
    cond_image: &Tensor<f32>,
    cond_curves: &Tensor<f32>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<f32>> {
    let (_, h, w) = cond_curves.chw()?;
    if cond_image.dims() != [3, h, w] {
        return Err(Error::shape(
            "sample_curves",
            format!("image [3, {h}, {w}]"),
            format!("{:?}", cond_image.dims()),
        ));
    }
    if net.timesteps() != sched.timesteps() {
        return Err(Error::invalid(
            "sample_curves",
            format!("noise net trained for T={}, schedule has T={}", net.timesteps(), sched.timesteps()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_start = gaussian(&mut rng, cond_curves.dims());
    sample_from(x_start, cfg, sched, &mut rng, |x, t| {
        let mut e = net.forward(params, x, cond_image, cond_curves, t)?;
        e.add_assign(&eps_prior(x, cond_curves, t, sched)?)?;
        Ok(e)
    })
}
