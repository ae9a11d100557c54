//! One joint optimisation step over the three networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::TrainConfig;
use super::data::{random_crop, synth_pair_with_scale, PairedSample};
use super::loss::{draw_method_pair, loss_simple, rms_distance, self_term};
use crate::curve::{
    le_apply_backward, le_apply_denoised_backward, le_apply_denoised_forward, le_apply_forward, upsample_curve_backward,
    upsample_curve_forward, CURVE_CHANNELS, STAGES,
};
use crate::diffusion::{eps_prior, forward_sample, predict_x0_raw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{resize, Image, ResampleMethod};
use crate::models::{NetParams, Networks};
use crate::nn::{adam_step, lit, AdamState, Real, Tensor};

/// Unweighted loss terms and the weighted total, averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub simple: f64,
    pub bootstrap: f64,
    pub sup: f64,
    pub self_loss: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.simple, self.bootstrap, self.sup, self.self_loss, self.total].iter().all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossRecord, w: f64) {
        self.simple += w * other.simple;
        self.bootstrap += w * other.bootstrap;
        self.sup += w * other.sup;
        self.self_loss += w * other.self_loss;
        self.total += w * other.total;
    }
}

/// Random quantities of one training sample.
#[derive(Clone, Debug)]
pub struct Draws<F> {
    pub t: usize,
    pub eps: Tensor<F>,
    pub pairs: Vec<(ResampleMethod, ResampleMethod)>,
}

impl<F: Real> Draws<F> {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, low_res: usize, timesteps: usize) -> Self {
        let t = rng.gen_range(1..=timesteps);
        let n = CURVE_CHANNELS * low_res * low_res;
        let eps = (0..n).map(|_| lit(StandardNormal.sample(rng))).collect();
        let pairs = (0..STAGES).map(|_| draw_method_pair(rng)).collect();
        Self {
            t,
            eps: Tensor::from_vec(&[CURVE_CHANNELS, low_res, low_res], eps).expect("dims match"),
            pairs,
        }
    }

    pub fn cast<G: Real>(&self) -> Draws<G> {
        Draws {
            t: self.t,
            eps: self.eps.cast(),
            pairs: self.pairs.clone(),
        }
    }
}

/// Forward pass and, when `weight > 0`, backward pass of the full training
/// objective for one sample. Gradients are accumulated into `params`
/// scaled by `weight`.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective<F: Real>(
    nets: &Networks,
    params: &mut NetParams<F>,
    low: &Tensor<F>,
    normal: &Tensor<F>,
    draws: &Draws<F>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    weight: f64,
) -> Result<LossRecord> {
    let (_, h, w) = low.chw()?;
    low.same_dims(normal, "train_step")?;
    let backward = weight > 0.0;
    let l = nets.spec.low_res;
    let scale = |g: Tensor<F>, lambda: f64| g.scale(lit(lambda * weight));
    let mut rec = LossRecord::default();

    let small = resize(low, ResampleMethod::Bilinear, l, l)?;
    let (cbar, curve_cache) = nets.curve.forward_cached(&params.curve, &small)?;

    // Diffusion branch: C̄ is the data, x̂0 the refined curves.
    let mut diffusion = None;
    let c_low = if cfg.use_diffusion {
        let ab = sched.alpha_bar(draws.t);
        let x_t = forward_sample(&cbar, draws.t, &draws.eps, sched)?;
        let (mut eps_hat, noise_cache) = nets.noise.forward_cached(&params.noise, &x_t, &small, &cbar, draws.t)?;
        eps_hat.add_assign(&eps_prior(&x_t, &cbar, draws.t, sched)?)?;
        let (ls, g_simple) = loss_simple(&draws.eps, &eps_hat)?;
        rec.simple = ls;
        let raw = predict_x0_raw(&x_t, &eps_hat, draws.t, sched)?;
        let x0 = raw.clamp(-F::one(), F::one());
        diffusion = Some((ab, noise_cache, g_simple, raw));
        x0
    } else {
        cbar.clone()
    };

    let (curves, up_cache) = upsample_curve_forward(&c_low, h, w)?;
    let mut g_curves = Tensor::zeros_like(&curves);

    if cfg.use_diffusion {
        let (out, cache) = le_apply_forward(low, &curves)?;
        let (lb, g) = rms_distance(&out, normal)?;
        rec.bootstrap = lb;
        if backward {
            g_curves.add_assign(&le_apply_backward(&scale(g, cfg.lambda_boot), &cache, &curves)?)?;
        }
    }

    if cfg.use_denoiser {
        let (inter, cache) = le_apply_denoised_forward(low, &curves, &nets.denoiser, &params.denoise)?;
        let (lsup, g_sup) = rms_distance(&inter[STAGES - 1], normal)?;
        rec.sup = lsup;
        let mut grads: Vec<Tensor<F>> = inter.iter().map(Tensor::zeros_like).collect();
        if cfg.use_self_loss {
            for (i, img) in inter.iter().enumerate() {
                let (m1, m2) = draws.pairs[i];
                let (v, g) = self_term(img, m1, m2)?;
                rec.self_loss += v;
                grads[i] = scale(g, cfg.lambda_self);
            }
        }
        if backward {
            grads[STAGES - 1].add_assign(&scale(g_sup, cfg.lambda_sup))?;
            let g = le_apply_denoised_backward(&grads, &cache, &curves, &nets.denoiser, &mut params.denoise)?;
            g_curves.add_assign(&g)?;
        }
    } else {
        let (out, cache) = le_apply_forward(low, &curves)?;
        let (lsup, g_sup) = rms_distance(&out, normal)?;
        rec.sup = lsup;
        if backward {
            g_curves.add_assign(&le_apply_backward(&scale(g_sup, cfg.lambda_sup), &cache, &curves)?)?;
        }
    }

    rec.total = cfg.lambda_simple * rec.simple
        + cfg.lambda_boot * rec.bootstrap
        + cfg.lambda_sup * rec.sup
        + cfg.lambda_self * rec.self_loss;
    if !backward {
        return Ok(rec);
    }

    let g_low = upsample_curve_backward(&g_curves, &up_cache)?;
    let g_cbar = match diffusion {
        Some((ab, noise_cache, g_simple, raw)) => {
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let g_raw = g_low.zip_map(&raw, "train_step", |g, v| if v.abs() <= F::one() { g } else { F::zero() })?;
            // x̂0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ
            let g_eps_hat = g_raw.scale(lit(-sb / sa));
            let inputs = nets
                .noise
                .backward(&mut params.noise, &noise_cache, &g_eps_hat, true)?
                .expect("input gradients requested");
            // L_simple trains ε_θ only; C̄ is data for it.
            nets.noise.backward(&mut params.noise, &noise_cache, &scale(g_simple, cfg.lambda_simple), false)?;
            // the prior's x_t dependence cancels x̂0's direct one
            let mut g = inputs.x_t.scale(lit(sa));
            g.add_assign(&inputs.cond_curves)?;
            g.add_assign(&g_raw)?;
            g
        }
        None => g_low,
    };
    nets.curve.backward(&mut params.curve, &curve_cache, &g_cbar)?;
    Ok(rec)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Networks,
    pub params: NetParams<f32>,
    sched: NoiseSchedule,
    opt_curve: AdamState<f32>,
    opt_noise: AdamState<f32>,
    opt_denoise: AdamState<f32>,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::new(cfg.model_spec(), cfg.timesteps)?;
        let params = nets.init_params(cfg.seed);
        Self::with_params(cfg, nets, params)
    }

    pub fn with_params(cfg: TrainConfig, nets: Networks, params: NetParams<f32>) -> Result<Self> {
        cfg.validate()?;
        let adam = cfg.adam();
        Ok(Self {
            sched: cfg.schedule()?,
            opt_curve: AdamState::new(&params.curve, adam),
            opt_noise: AdamState::new(&params.noise, adam),
            opt_denoise: AdamState::new(&params.denoise, adam),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            steps: 0,
            cfg,
            nets,
            params,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Crops and degrades randomly chosen clean images into a batch.
    pub fn sample_batch(&mut self, cleans: &[Image]) -> Result<Vec<PairedSample>> {
        if cleans.is_empty() {
            return Err(Error::invalid("train", "no training images"));
        }
        let c = &self.cfg;
        (0..c.batch_size)
            .map(|_| {
                let img = &cleans[self.rng.gen_range(0..cleans.len())];
                let crop = random_crop(img, c.patch_size, &mut self.rng);
                let gamma = self.rng.gen_range(c.gamma_min..=c.gamma_max);
                let scale = self.rng.gen_range(c.exposure_min..=c.exposure_max);
                synth_pair_with_scale(&crop, gamma, scale, c.noise_sigma, &mut self.rng)
            })
            .collect()
    }

    /// One Adam update of every network the ablation flags leave active.
    pub fn train_step(&mut self, batch: &[PairedSample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        self.params.zero_grad();
        let w = 1.0 / batch.len() as f64;
        let mut rec = LossRecord::default();
        for sample in batch {
            let draws = Draws::sample(&mut self.rng, self.cfg.low_res, self.cfg.timesteps);
            let r = sample_objective(
                &self.nets,
                &mut self.params,
                sample.low.tensor(),
                sample.normal.tensor(),
                &draws,
                &self.cfg,
                &self.sched,
                w,
            )?;
            rec.accumulate(&r, w);
        }
        self.steps += 1;
        let bad: Vec<&str> = [
            ("curve", self.params.curve.grads_finite()),
            ("noise", self.params.noise.grads_finite()),
            ("denoise", self.params.denoise.grads_finite()),
        ]
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
        if !rec.is_finite() || !bad.is_empty() {
            return Err(Error::NonFinite(format!(
                "step {}: losses {:?}; non-finite gradients in [{}]",
                self.steps,
                rec,
                bad.join(", ")
            )));
        }
        adam_step(&mut self.params.curve, &mut self.opt_curve)?;
        if self.cfg.use_diffusion {
            adam_step(&mut self.params.noise, &mut self.opt_noise)?;
        }
        if self.cfg.use_denoiser {
            adam_step(&mut self.params.denoise, &mut self.opt_denoise)?;
        }
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig, ParamStore};
    use crate::training::data::synthetic_scene;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            low_res: 8,
            curve_width: 8,
            noise_width: 8,
            time_dim: 8,
            denoise_width: 8,
            denoise_blocks: 2,
            timesteps: 20,
            sampler_steps: 5,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn batch(seed: u64, n: usize, size: usize) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let clean = synthetic_scene(size, size, &mut rng);
                synth_pair_with_scale(&clean, 2.5, 0.3, 0.05, &mut rng).unwrap()
            })
            .collect()
    }

    fn snapshot(p: &ParamStore<f32>) -> Vec<u32> {
        p.entries().iter().flat_map(|e| e.value.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn loss_record_is_non_negative() {
        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        let rec = tr.train_step(&batch(1, 2, 16)).unwrap();
        for v in [rec.simple, rec.bootstrap, rec.sup, rec.self_loss, rec.total] {
            assert!(v >= 0.0 && v.is_finite());
        }
        assert!(rec.simple > 0.0 && rec.bootstrap > 0.0 && rec.sup > 0.0 && rec.self_loss > 0.0);
        assert_eq!(tr.steps(), 1);
        assert!(tr.train_step(&[]).is_err());
    }

    #[test]
    fn ablations_leave_their_network_untouched() {
        let b = batch(2, 2, 16);
        let mut cfg = tiny_cfg();
        cfg.use_diffusion = false;
        let mut tr = Trainer::new(cfg).unwrap();
        let noise = snapshot(&tr.params.noise);
        let curve = snapshot(&tr.params.curve);
        let rec = tr.train_step(&b).unwrap();
        assert_eq!(rec.simple, 0.0);
        assert_eq!(rec.bootstrap, 0.0);
        assert_eq!(snapshot(&tr.params.noise), noise);
        assert_ne!(snapshot(&tr.params.curve), curve);

        let mut cfg = tiny_cfg();
        cfg.use_denoiser = false;
        let mut tr = Trainer::new(cfg).unwrap();
        let den = snapshot(&tr.params.denoise);
        let rec = tr.train_step(&b).unwrap();
        assert_eq!(rec.self_loss, 0.0);
        assert_eq!(snapshot(&tr.params.denoise), den);

        let mut cfg = tiny_cfg();
        cfg.use_self_loss = false;
        let mut tr = Trainer::new(cfg).unwrap();
        assert_eq!(tr.train_step(&b).unwrap().self_loss, 0.0);
    }

    #[test]
    fn every_parameter_tensor_receives_gradient() {
        let cfg = tiny_cfg();
        let nets = Networks::new(cfg.model_spec(), cfg.timesteps).unwrap();
        let sched = cfg.schedule().unwrap();
        let mut params: NetParams<f32> = nets.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in batch(5, 2, 16) {
            let draws = Draws::sample(&mut rng, cfg.low_res, cfg.timesteps);
            sample_objective(&nets, &mut params, s.low.tensor(), s.normal.tensor(), &draws, &cfg, &sched, 0.5).unwrap();
        }
        for store in [&params.curve, &params.noise, &params.denoise] {
            for e in store.entries() {
                assert!(e.grad.data().iter().any(|&g| g != 0.0), "{} has no gradient", e.name);
            }
        }
        // and one full step moves every tensor
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.params.clone();
        tr.train_step(&batch(6, 2, 16)).unwrap();
        for (a, b) in [(&before.curve, &tr.params.curve), (&before.noise, &tr.params.noise), (&before.denoise, &tr.params.denoise)] {
            for (ea, eb) in a.entries().iter().zip(b.entries()) {
                assert_ne!(ea.value, eb.value, "{} did not move", ea.name);
            }
        }
    }

    fn store_mut(p: &mut NetParams<f64>, which: usize) -> &mut ParamStore<f64> {
        match which {
            0 => &mut p.curve,
            1 => &mut p.noise,
            _ => &mut p.denoise,
        }
    }

    /// Checks the gradient each network receives from the composed
    /// objective under every ablation setting. The curve estimator sees the
    /// objective without `L_simple`, for which its output is detached data.
    #[test]
    fn full_objective_gradients() {
        let flags = [(true, true, true), (false, true, true), (true, false, false), (true, true, false)];
        for (k, &(diffusion, denoiser, self_loss)) in flags.iter().enumerate() {
            let mut cfg = tiny_cfg();
            cfg.use_diffusion = diffusion;
            cfg.use_denoiser = denoiser;
            cfg.use_self_loss = self_loss;
            let nets = Networks::new(cfg.model_spec(), cfg.timesteps).unwrap();
            let sched = cfg.schedule().unwrap();
            let seed = k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let full: NetParams<f64> = nets.init_params(seed);
            let s = &batch(20 + seed, 1, 8)[0];
            let (low, normal) = (s.low.tensor().cast::<f64>(), s.normal.tensor().cast::<f64>());
            // small t keeps the x̂0 clamp mostly inactive
            let mut draws = Draws::<f64>::sample(&mut rng, cfg.low_res, cfg.timesteps);
            draws.t = 3;
            for which in 0..3 {
                if (which == 1 && !diffusion) || (which == 2 && !denoiser) {
                    continue;
                }
                let mut cfg = cfg.clone();
                if which == 0 {
                    cfg.lambda_simple = 0.0;
                }
                let mut store = store_mut(&mut full.clone(), which).clone();
                let report = grad_check(
                    &mut store,
                    |p, bw| {
                        let mut all = full.clone();
                        *store_mut(&mut all, which) = p.clone();
                        let w = if bw { 1.0 } else { 0.0 };
                        let rec = sample_objective(&nets, &mut all, &low, &normal, &draws, &cfg, &sched, w)?;
                        if bw {
                            let src = store_mut(&mut all, which);
                            for slot in 0..src.len() {
                                p.accumulate(slot, src.grad(slot))?;
                            }
                        }
                        Ok(rec.total)
                    },
                    GradCheckConfig {
                        seed,
                        richardson: true,
                        // gradients below 1e-5 are at the level of roundoff in the loss
                        floor: 1e-5,
                        samples: 60,
                        ..Default::default()
                    },
                )
                .unwrap();
                assert!(
                    report.max_rel_error < 1e-5,
                    "flags {k} net {which}: {} at {} {:?}",
                    report.max_rel_error,
                    report.worst_param,
                    report.worst_values
                );
            }
        }
    }

    #[test]
    fn loss_decreases_on_small_set() {
        let mut cfg = tiny_cfg();
        cfg.iterations = 200;
        cfg.lr = 2e-3;
        cfg.seed = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cleans: Vec<Image> = (0..10).map(|_| synthetic_scene(16, 16, &mut rng)).collect();
        let mut totals = Vec::new();
        crate::training::train(cfg, &cleans, |_, rec, _| {
            totals.push(rec.total);
            Ok(())
        })
        .unwrap();
        let first: f64 = totals[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = totals[180..].iter().sum::<f64>() / 20.0;
        assert!(last < first, "first {first:.4}, last {last:.4}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.iterations = 5;
        let cleans: Vec<Image> = (0..3).map(|i| synthetic_scene(16, 16, &mut ChaCha8Rng::seed_from_u64(i))).collect();
        let run = || {
            let mut log = Vec::new();
            let tr = crate::training::train(cfg.clone(), &cleans, |_, r, _| {
                log.push(r.total.to_bits());
                Ok(())
            })
            .unwrap();
            (log, snapshot(&tr.params.curve), snapshot(&tr.params.noise))
        };
        assert_eq!(run(), run());
    }
}
