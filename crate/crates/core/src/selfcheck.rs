//! Runtime suite of gradient checks and invariants behind `bdce selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curve::{le_apply_backward, le_apply_forward, le_step, CURVE_CHANNELS, STAGES};
use crate::diffusion::{forward_sample, make_schedule, predict_x0_raw, reverse_step, SamplerConfig};
use crate::error::Result;
use crate::imaging::{psnr, resize_backward, resize_forward, ssim, Image, ResampleMethod, SSIM_C1};
use crate::models::{ModelSpec, Networks};
use crate::nn::activation::{relu_backward, relu_forward, tanh_backward, tanh_forward};
use crate::nn::pool::{
    avg_pool_backward, avg_pool_forward, max_pool_backward, max_pool_forward, upsample_nearest_backward,
    upsample_nearest_forward,
};
use crate::nn::{conv2d_backward, conv2d_forward, grad_check, GradCheckConfig, ParamStore, Tensor};
use crate::training::self_term;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

const GRAD_TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("dims match")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Grad-checks `f(x) · r` with respect to `x` for a single-input layer,
/// where `layer` returns the output and the input gradient for an upstream.
fn layer_check(
    seeds: u64,
    dims: &[usize],
    range: (f64, f64),
    layer: impl Fn(&Tensor<f64>, Option<&Tensor<f64>>) -> Result<(Tensor<f64>, Option<Tensor<f64>>)>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, dims, range.0, range.1);
        let (y, _) = layer(&x, None)?;
        let r = rand_tensor(&mut rng, y.dims(), -1.0, 1.0);
        let mut p = ParamStore::new();
        p.add("x", x)?;
        let rep = grad_check(
            &mut p,
            |p, bw| {
                let x = p.value(0).clone();
                let (y, g) = layer(&x, bw.then_some(&r))?;
                if let Some(g) = g {
                    p.accumulate(0, &g)?;
                }
                Ok(dot(&y, &r))
            },
            GradCheckConfig { seed, ..Default::default() },
        )?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

fn grad_result(name: &str, r: Result<f64>) -> CheckResult {
    match r {
        Ok(e) => CheckResult {
            name: name.into(),
            passed: e < GRAD_TOL,
            detail: format!("max rel error {e:.2e}"),
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn layer_checks(out: &mut Vec<CheckResult>) {
    const SEEDS: u64 = 20;
    out.push(grad_result(
        "conv2d backward",
        (|| {
            let mut worst: f64 = 0.0;
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let stride = 1 + (seed as usize % 2);
                let x = rand_tensor(&mut rng, &[2, 5, 6], -1.0, 1.0);
                let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
                let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
                let r = rand_tensor(&mut rng, conv2d_forward(&x, &w, &b, stride, 1)?.dims(), -1.0, 1.0);
                let mut p = ParamStore::new();
                p.add("x", x)?;
                p.add("w", w)?;
                p.add("b", b)?;
                let rep = grad_check(
                    &mut p,
                    |p, bw| {
                        let y = conv2d_forward(p.value(0), p.value(1), p.value(2), stride, 1)?;
                        if bw {
                            let g = conv2d_backward(&r, p.value(0), p.value(1), stride, 1, true)?;
                            p.accumulate(0, &g.input)?;
                            p.accumulate(1, &g.weight)?;
                            p.accumulate(2, &g.bias)?;
                        }
                        Ok(dot(&y, &r))
                    },
                    GradCheckConfig { seed, ..Default::default() },
                )?;
                worst = worst.max(rep.max_rel_error);
            }
            Ok(worst)
        })(),
    ));
    out.push(grad_result(
        "relu backward",
        layer_check(SEEDS, &[2, 4, 4], (-1.0, 1.0), |x, g| {
            Ok((relu_forward(x), g.map(|g| relu_backward(g, x)).transpose()?))
        }),
    ));
    out.push(grad_result(
        "tanh backward",
        layer_check(SEEDS, &[2, 4, 4], (-2.0, 2.0), |x, g| {
            let y = tanh_forward(x);
            let gi = g.map(|g| tanh_backward(g, &y)).transpose()?;
            Ok((y, gi))
        }),
    ));
    out.push(grad_result(
        "avg_pool backward",
        layer_check(SEEDS, &[2, 4, 6], (-1.0, 1.0), |x, g| {
            Ok((avg_pool_forward(x, 2)?, g.map(|g| avg_pool_backward(g, x.dims(), 2)).transpose()?))
        }),
    ));
    out.push(grad_result(
        "max_pool backward",
        layer_check(SEEDS, &[2, 4, 6], (-1.0, 1.0), |x, g| {
            let (y, idx) = max_pool_forward(x, 2)?;
            Ok((y, g.map(|g| max_pool_backward(g, &idx, x.dims())).transpose()?))
        }),
    ));
    out.push(grad_result(
        "nearest upsample backward",
        layer_check(SEEDS, &[2, 3, 2], (-1.0, 1.0), |x, g| {
            Ok((upsample_nearest_forward(x, 2)?, g.map(|g| upsample_nearest_backward(g, 2)).transpose()?))
        }),
    ));
    for method in ResampleMethod::ALL {
        out.push(grad_result(
            &format!("resize {method} backward"),
            layer_check(5, &[2, 6, 8], (0.2, 0.8), |x, g| {
                let (y, cache) = resize_forward(x, method, 3, 4)?;
                Ok((y, g.map(|g| resize_backward(g, &cache)).transpose()?))
            }),
        ));
    }
    out.push(grad_result(
        "curve application backward",
        (|| {
            let mut worst: f64 = 0.0;
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y = rand_tensor(&mut rng, &[3, 3, 3], 0.0, 1.0);
                let c = rand_tensor(&mut rng, &[CURVE_CHANNELS, 3, 3], -1.0, 1.0);
                let r = rand_tensor(&mut rng, &[3, 3, 3], -1.0, 1.0);
                let mut p = ParamStore::new();
                p.add("curves", c)?;
                let rep = grad_check(
                    &mut p,
                    |p, bw| {
                        let c = p.value(0).clone();
                        let (out, cache) = le_apply_forward(&y, &c)?;
                        if bw {
                            p.accumulate(0, &le_apply_backward(&r, &cache, &c)?)?;
                        }
                        Ok(dot(&out, &r))
                    },
                    GradCheckConfig { seed, ..Default::default() },
                )?;
                worst = worst.max(rep.max_rel_error);
            }
            Ok(worst)
        })(),
    ));
}

/// Gradient checks of the three networks (tiny noise predictor), one result
/// per network covering `seeds` seeds.
///
/// With `richardson` the numeric derivative is extrapolated from steps h and
/// h/2. Plain central differences at h = 1e-4 occasionally exceed 1e-5 on
/// parameters whose gradient is near zero, from O(h²) truncation alone.
pub fn network_gradient_checks(seeds: u64, richardson: bool) -> Vec<CheckResult> {
    let mut out = Vec::new();
    network_checks(&mut out, seeds, richardson);
    out
}

fn network_checks(out: &mut Vec<CheckResult>, seeds: u64, richardson: bool) {
    let nets = match Networks::new(ModelSpec::tiny(), 50) {
        Ok(n) => n,
        Err(e) => {
            out.push(CheckResult {
                name: "tiny networks".into(),
                passed: false,
                detail: e.to_string(),
            });
            return;
        }
    };
    let run = |which: usize| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let params = nets.init_params::<f64>(seed);
            let cfg = GradCheckConfig {
                seed,
                richardson,
                ..Default::default()
            };
            let rep = match which {
                0 => {
                    let x = rand_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0);
                    let r = rand_tensor(&mut rng, &[CURVE_CHANNELS, 4, 4], -1.0, 1.0);
                    let mut p = params.curve;
                    grad_check(
                        &mut p,
                        |p, bw| {
                            let (y, c) = nets.curve.forward_cached(p, &x)?;
                            if bw {
                                nets.curve.backward(p, &c, &r)?;
                            }
                            Ok(dot(&y, &r))
                        },
                        cfg,
                    )?
                }
                1 => {
                    let xt = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
                    let low = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
                    let cond = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
                    let r = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
                    let t = rng.gen_range(1..=50);
                    let mut p = params.noise;
                    grad_check(
                        &mut p,
                        |p, bw| {
                            let (y, c) = nets.noise.forward_cached(p, &xt, &low, &cond, t)?;
                            if bw {
                                nets.noise.backward(p, &c, &r, false)?;
                            }
                            Ok(dot(&y, &r))
                        },
                        cfg,
                    )?
                }
                _ => {
                    let x = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
                    let r = rand_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
                    let mut p = params.denoise;
                    grad_check(
                        &mut p,
                        |p, bw| {
                            let (y, c) = nets.denoiser.forward_cached(p, &x)?;
                            if bw {
                                nets.denoiser.backward(p, &c, &r)?;
                            }
                            Ok(dot(&y, &r))
                        },
                        cfg,
                    )?
                }
            };
            worst = worst.max(rep.max_rel_error);
        }
        Ok(worst)
    };
    out.push(grad_result("curve estimator gradients (4x4)", run(0)));
    out.push(grad_result("noise predictor gradients (tiny, 8x8)", run(1)));
    out.push(grad_result("denoiser gradients (8x8)", run(2)));
}

fn property(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn invariant_checks(out: &mut Vec<CheckResult>) {
    out.push(property("curve range (1e6 pairs)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let y = Tensor::<f32>::from_vec(&[n], (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect())?;
        let c = Tensor::<f32>::from_vec(&[n], (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
        let bad = le_step(&y, &c)?.data().iter().filter(|&&v| !(-1e-7..=1.0 + 1e-7).contains(&v)).count();
        Ok((bad == 0, format!("{bad} violations")))
    }));
    out.push(property("curve monotonicity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bad = 0;
        for _ in 0..100_000 {
            let c: f64 = rng.gen_range(-1.0..=1.0);
            let (a, b): (f64, f64) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
            let (lo, hi) = (a.min(b), a.max(b));
            if lo + c * lo * (1.0 - lo) > hi + c * hi * (1.0 - hi) {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} violations")))
    }));
    out.push(property("curve scalar recurrence (4x4)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0);
        let c = rand_tensor(&mut rng, &[CURVE_CHANNELS, 4, 4], -1.0, 1.0);
        let (out, _) = le_apply_forward(&y.cast::<f32>(), &c.cast::<f32>())?;
        let mut worst: f64 = 0.0;
        for ch in 0..3 {
            for px in 0..16 {
                let mut x = y.data()[ch * 16 + px];
                for s in 0..STAGES {
                    let cv = c.data()[(3 * s + ch) * 16 + px];
                    x += cv * x * (1.0 - x);
                }
                worst = worst.max((out.data()[ch * 16 + px] as f64 - x).abs());
            }
        }
        Ok((worst <= 1e-6, format!("max deviation {worst:.2e}")))
    }));
    out.push(property("diffusion round trip", || {
        let s = make_schedule(1000, 1e-4, 2e-2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for t in [1, 250, 500, 1000] {
            let x0 = rand_tensor(&mut rng, &[256], -1.0, 1.0);
            let eps = rand_tensor(&mut rng, &[256], -3.0, 3.0);
            let xt = forward_sample(&x0, t, &eps, &s)?;
            worst = worst.max(predict_x0_raw(&xt, &eps, t, &s)?.sub(&x0)?.max_abs());
        }
        Ok((worst <= 1e-5, format!("max deviation {worst:.2e}")))
    }));
    out.push(property("oracle DDIM chain", || {
        let s = make_schedule(100, 1e-4, 2e-2)?;
        let cfg = SamplerConfig { num_steps: 10, eta: 0.0 };
        let steps = cfg.steps(100)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, &[256], -1.0, 1.0);
        let noise = rand_tensor(&mut rng, &[256], -3.0, 3.0);
        let mut x = forward_sample(&x0, 100, &noise, &s)?;
        for k in (0..steps.len()).rev() {
            let prev = if k == 0 { 0 } else { steps[k - 1] };
            x = reverse_step(&x, &x0, steps[k], prev, &cfg, &Tensor::zeros(&[256]), &s)?;
        }
        let d = x.sub(&x0)?.max_abs();
        Ok((d <= 1e-4, format!("max deviation {d:.2e}")))
    }));
    out.push(property("self-supervised loss on constants", || {
        let mut worst: f64 = 0.0;
        for (i, &m1) in ResampleMethod::ALL.iter().enumerate() {
            for &m2 in &ResampleMethod::ALL[i + 1..] {
                worst = worst.max(self_term(&Tensor::<f64>::full(&[3, 8, 8], 0.42), m1, m2)?.0);
            }
        }
        Ok((worst < 1e-12, format!("max over 15 pairs {worst:.2e}")))
    }));
    out.push(property("metric closed forms", || {
        let (a, b) = (Image::constant(16, 16, 0.25), Image::constant(16, 16, 0.75));
        let expect_ssim = (2.0 * 0.25 * 0.75 + SSIM_C1) / (0.25f64.powi(2) + 0.75f64.powi(2) + SSIM_C1);
        let ds = (ssim(&a, &b)? - expect_ssim).abs();
        let dp = (psnr(&Image::constant(16, 16, 0.0), &Image::constant(16, 16, 0.5))? - 10.0 * 4f64.log10()).abs();
        Ok((ds < 1e-6 && dp < 1e-6, format!("ssim off by {ds:.1e}, psnr off by {dp:.1e}")))
    }));
}

/// Runs every check. `network_seeds` controls the grad-check repetitions on
/// the three networks.
pub fn run_selfcheck(network_seeds: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    layer_checks(&mut out);
    network_checks(&mut out, network_seeds, true);
    invariant_checks(&mut out);
    out
}
