//! Training hyperparameters and their `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{make_schedule, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub low_res: usize,
    pub curve_width: usize,
    pub noise_width: usize,
    pub time_dim: usize,
    pub denoise_width: usize,
    pub denoise_blocks: usize,

    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler_steps: usize,
    pub eta: f64,

    pub lambda_simple: f64,
    pub lambda_boot: f64,
    pub lambda_sup: f64,
    pub lambda_self: f64,

    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Side of the square training crop; 0 trains on whole images.
    pub patch_size: usize,

    pub gamma_min: f64,
    pub gamma_max: f64,
    pub noise_sigma: f64,
    pub exposure_min: f64,
    pub exposure_max: f64,

    pub use_diffusion: bool,
    pub use_denoiser: bool,
    pub use_self_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        let adam = AdamConfig::default();
        Self {
            low_res: spec.low_res,
            curve_width: spec.curve_width,
            noise_width: spec.noise_width,
            time_dim: spec.time_dim,
            denoise_width: spec.denoise_width,
            denoise_blocks: spec.denoise_blocks,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sampler_steps: 20,
            eta: 0.0,
            lambda_simple: 1.0,
            lambda_boot: 1.0,
            lambda_sup: 1.0,
            lambda_self: 0.1,
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            patch_size: 0,
            gamma_min: 2.0,
            gamma_max: 3.0,
            noise_sigma: 0.05,
            exposure_min: 0.1,
            exposure_max: 0.5,
            use_diffusion: true,
            use_denoiser: true,
            use_self_loss: true,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m! {
            low_res, curve_width, noise_width, time_dim, denoise_width, denoise_blocks,
            timesteps, beta_start, beta_end, sampler_steps, eta,
            lambda_simple, lambda_boot, lambda_sup, lambda_self,
            lr, adam_beta1, adam_beta2, adam_eps,
            batch_size, iterations, seed, patch_size,
            gamma_min, gamma_max, noise_sigma, exposure_min, exposure_max,
            use_diffusion, use_denoiser, use_self_loss
        }
    };
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
        }
        macro_rules! assign {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => self.$f = parse(key, value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
            };
        }
        config_fields!(assign);
        Ok(())
    }

    /// Serializes every field; [`TrainConfig::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($f:ident),*) => {
                $(let _ = writeln!(s, "{} = {:?}", stringify!($f), self.$f);)*
            };
        }
        config_fields!(emit);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train_config", msg));
        self.model_spec().validate()?;
        for (name, v) in [
            ("lambda_simple", self.lambda_simple),
            ("lambda_boot", self.lambda_boot),
            ("lambda_sup", self.lambda_sup),
            ("lambda_self", self.lambda_self),
            ("noise_sigma", self.noise_sigma),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !self.patch_size.is_multiple_of(2) {
            return bad("patch_size must be even".into());
        }
        if !(1.0 <= self.gamma_min && self.gamma_min <= self.gamma_max) {
            return bad("need 1 <= gamma_min <= gamma_max".into());
        }
        if !(0.0 < self.exposure_min && self.exposure_min <= self.exposure_max && self.exposure_max <= 1.0) {
            return bad("need 0 < exposure_min <= exposure_max <= 1".into());
        }
        self.schedule()?;
        self.sampler().steps(self.timesteps)?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            low_res: self.low_res,
            curve_width: self.curve_width,
            noise_width: self.noise_width,
            time_dim: self.time_dim,
            denoise_width: self.denoise_width,
            denoise_blocks: self.denoise_blocks,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sampler_steps,
            eta: self.eta,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}
