//! The three networks: curve estimator, conditional noise predictor and
//! denoiser, plus their shared checkpoint handling.

mod curve_net;
mod denoiser;
mod layer;
mod noise_net;
mod spec;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use curve_net::{CurveCache, CurveNet};
pub use denoiser::{Denoiser, DenoiserCache};
pub use layer::{zero_conv, Conv};
pub use noise_net::{NoiseCache, NoiseInputGrads, NoiseNet, NOISE_IN_CHANNELS};
pub use spec::ModelSpec;

use crate::error::{Error, Result};
use crate::nn::{checkpoint, ParamStore, Real, Tensor};

#[derive(Clone, Debug)]
pub struct Networks {
    pub spec: ModelSpec,
    pub curve: CurveNet,
    pub noise: NoiseNet,
    pub denoiser: Denoiser,
}

#[derive(Clone, Debug)]
pub struct NetParams<F = f32> {
    pub curve: ParamStore<F>,
    pub noise: ParamStore<F>,
    pub denoise: ParamStore<F>,
}

impl<F: Real> NetParams<F> {
    pub fn cast<G: Real>(&self) -> NetParams<G> {
        NetParams {
            curve: self.curve.cast(),
            noise: self.noise.cast(),
            denoise: self.denoise.cast(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.curve.zero_grad();
        self.noise.zero_grad();
        self.denoise.zero_grad();
    }
}

impl Networks {
    pub fn new(spec: ModelSpec, timesteps: usize) -> Result<Self> {
        spec.validate()?;
        if timesteps == 0 {
            return Err(Error::invalid("networks", "timesteps must be positive"));
        }
        Ok(Self {
            curve: CurveNet::new(&spec),
            noise: NoiseNet::new(&spec, timesteps),
            denoiser: Denoiser::new(&spec),
            spec,
        })
    }

    pub fn init_params<F: Real>(&self, seed: u64) -> NetParams<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetParams {
            curve: self.curve.init_params(&mut rng),
            noise: self.noise.init_params(&mut rng),
            denoise: self.denoiser.init_params(&mut rng),
        }
    }

    /// Parameters whose output heads are zero: curves are all zero, the
    /// noise prediction is zero and the denoiser is the identity map.
    pub fn identity_params<F: Real>(&self, seed: u64) -> NetParams<F> {
        let mut p = self.init_params(seed);
        zero_conv(&mut p.curve, self.curve.head());
        zero_conv(&mut p.noise, self.noise.head());
        zero_conv(&mut p.denoise, self.denoiser.head());
        p
    }

    /// Scalar parameter counts of (curve, noise, denoise).
    pub fn param_counts(&self) -> (usize, usize, usize) {
        (
            self.curve.num_scalars(),
            self.noise.num_scalars(),
            self.denoiser.num_scalars(),
        )
    }

    pub fn save_checkpoint(&self, params: &NetParams<f32>, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor<f32>)> = [&params.curve, &params.noise, &params.denoise]
            .into_iter()
            .flat_map(|s| s.entries().iter().map(|e| (e.name.clone(), &e.value)))
            .collect();
        checkpoint::save(path, &entries)
    }

    /// Loads a checkpoint, requiring names and dims to match this spec.
    pub fn load_checkpoint(&self, path: &Path) -> Result<NetParams<f32>> {
        let entries = checkpoint::load(path)?;
        let mut params: NetParams<f32> = self.init_params(0);
        let mut groups: [Vec<(String, Tensor<f32>)>; 3] = Default::default();
        for (name, t) in entries {
            let g = match name.split('.').next() {
                Some("curve") => 0,
                Some("noise") => 1,
                Some("denoise") => 2,
                _ => return Err(Error::Checkpoint(format!("unknown tensor prefix in {name}"))),
            };
            groups[g].push((name, t));
        }
        let [c, n, d] = groups;
        params.curve.load_values(&c)?;
        params.noise.load_values(&n)?;
        params.denoise.load_values(&d)?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::CURVE_CHANNELS;
    use crate::nn::{grad_check, ops, GradCheckConfig};
    use rand::Rng;

    fn rand_tensor<F: Real>(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<F> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| crate::nn::lit(rng.gen_range(lo..hi))).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn nets() -> Networks {
        Networks::new(ModelSpec::tiny(), 50).unwrap()
    }

    #[test]
    fn zero_heads_give_identity_outputs() {
        let n = nets();
        let p: NetParams<f32> = n.identity_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        assert!(n.curve.forward(&p.curve, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(n.denoiser.forward(&p.denoise, &x).unwrap(), x);
        let xt = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -2.0, 2.0);
        let cond = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        for t in [1, 25, 50] {
            let eps = n.noise.forward(&p.noise, &xt, &x, &cond, t).unwrap();
            assert!(eps.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shapes_and_curve_range() {
        let n = nets();
        let p: NetParams<f32> = n.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, w) in [(4, 4), (8, 12), (13, 7)] {
            let x = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
            let c = n.curve.forward(&p.curve, &x).unwrap();
            assert_eq!(c.dims(), [CURVE_CHANNELS, h, w]);
            assert!(c.data().iter().all(|&v| v > -1.0 && v < 1.0));
            assert_eq!(n.denoiser.forward(&p.denoise, &x).unwrap().dims(), [3, h, w]);
        }
        let xt = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 12], -1.0, 1.0);
        let low = rand_tensor(&mut rng, &[3, 8, 12], 0.0, 1.0);
        let eps = n.noise.forward(&p.noise, &xt, &low, &xt, 3).unwrap();
        assert_eq!(eps.dims(), [CURVE_CHANNELS, 8, 12]);
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let n = nets();
        let p: NetParams<f32> = n.init_params(3);
        assert!(n.curve.forward(&p.curve, &Tensor::zeros(&[4, 8, 8])).is_err());
        assert!(n.denoiser.forward(&p.denoise, &Tensor::zeros(&[1, 8, 8])).is_err());
        let xt = Tensor::zeros(&[CURVE_CHANNELS, 8, 8]);
        let low = Tensor::zeros(&[3, 8, 8]);
        assert!(n.noise.forward(&p.noise, &xt, &low, &xt, 0).is_err());
        assert!(n.noise.forward(&p.noise, &xt, &low, &xt, 51).is_err());
        assert!(n.noise.forward(&p.noise, &xt, &Tensor::zeros(&[3, 4, 8]), &xt, 1).is_err());
        let odd = Tensor::zeros(&[CURVE_CHANNELS, 6, 6]);
        assert!(n.noise.forward(&p.noise, &odd, &Tensor::zeros(&[3, 6, 6]), &odd, 1).is_err());
    }

    #[test]
    fn denoiser_runs_at_any_resolution() {
        let n = nets();
        let p: NetParams<f32> = n.init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for s in [16, 64] {
            let x = rand_tensor(&mut rng, &[3, s, s], 0.0, 1.0);
            let y = n.denoiser.forward(&p.denoise, &x).unwrap();
            assert_eq!(y.dims(), [3, s, s]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn noise_prediction_depends_on_t() {
        let n = nets();
        let p: NetParams<f32> = n.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        let low = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let cond = rand_tensor(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        let outs: Vec<Tensor<f32>> = [1, 25, 50]
            .iter()
            .map(|&t| n.noise.forward(&p.noise, &xt, &low, &cond, t).unwrap())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(outs[i].sub(&outs[j]).unwrap().max_abs() > 1e-6, "t index {i} vs {j}");
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let n = nets();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor::<f32>(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let g = rand_tensor::<f32>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        let run = || {
            let mut p: NetParams<f32> = n.init_params(10);
            let (y, cache) = n.curve.forward_cached(&p.curve, &x).unwrap();
            n.curve.backward(&mut p.curve, &cache, &g).unwrap();
            let grads: Vec<f32> = p.curve.entries().iter().flat_map(|e| e.grad.data().to_vec()).collect();
            (y, grads)
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let n = nets();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor::<f64>(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let r1 = rand_tensor::<f64>(&mut rng, &[3, 8, 8], -1.0, 1.0);
        let r2 = rand_tensor::<f64>(&mut rng, &[3, 8, 8], -1.0, 1.0);
        let p: NetParams<f64> = n.init_params(12);
        let grads = |g: &Tensor<f64>| {
            let mut q = p.denoise.clone();
            let (_, cache) = n.denoiser.forward_cached(&q, &x).unwrap();
            let gi = n.denoiser.backward(&mut q, &cache, g).unwrap();
            let mut v: Vec<f64> = q.entries().iter().flat_map(|e| e.grad.data().to_vec()).collect();
            v.extend_from_slice(gi.data());
            v
        };
        let sum = grads(&r1.add(&r2).unwrap());
        let (a, b) = (grads(&r1), grads(&r2));
        for i in 0..sum.len() {
            assert!((sum[i] - a[i] - b[i]).abs() <= 1e-12 * (1.0 + sum[i].abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdce");
        let n = nets();
        let p: NetParams<f32> = n.init_params(13);
        n.save_checkpoint(&p, &path).unwrap();
        let q = n.load_checkpoint(&path).unwrap();
        for (a, b) in [(&p.curve, &q.curve), (&p.noise, &q.noise), (&p.denoise, &q.denoise)] {
            for (ea, eb) in a.entries().iter().zip(b.entries()) {
                assert_eq!(ea.name, eb.name);
                assert_eq!(ea.value, eb.value);
            }
        }
        let other = Networks::new(ModelSpec { curve_width: 4, ..ModelSpec::tiny() }, 50).unwrap();
        assert!(matches!(other.load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn parameter_counts_follow_spec() {
        let n = Networks::new(ModelSpec::default(), 1000).unwrap();
        let (c, _, d) = n.param_counts();
        // 3->32, 3x 32->32, 2x 64->32, 64->24, all 3x3 with bias
        let expect_c = (3 * 32 * 9 + 32) + 3 * (32 * 32 * 9 + 32) + 2 * (64 * 32 * 9 + 32) + (64 * 24 * 9 + 24);
        assert_eq!(c, expect_c);
        // in 3->16, 3 blocks of two 16->16, out 16->3
        let expect_d = (3 * 16 * 9 + 16) + 6 * (16 * 16 * 9 + 16) + (16 * 3 * 9 + 3);
        assert_eq!(d, expect_d);
        assert_eq!(n.param_counts(), Networks::new(ModelSpec::default(), 1000).unwrap().param_counts());
    }

    #[test]
    fn curve_estimation_cost_is_fixed_by_low_res() {
        let n = nets();
        let p: NetParams<f32> = n.init_params(14);
        let low = n.spec.low_res;
        let mut costs = Vec::new();
        for (h, w) in [(16, 16), (48, 64), (100, 37)] {
            let img = Tensor::<f32>::full(&[3, h, w], 0.3);
            let (_, macs) = ops::measure(|| {
                let small = crate::imaging::resize(&img, crate::imaging::ResampleMethod::Bilinear, low, low).unwrap();
                n.curve.forward(&p.curve, &small).unwrap()
            });
            costs.push(macs);
        }
        assert!(costs[0] > 0);
        assert!(costs.iter().all(|&c| c == costs[0]));
    }

    fn check(report: crate::nn::GradCheckReport, what: &str, seed: u64) {
        assert!(report.checked >= 200, "{what}: only {} probes", report.checked);
        assert!(
            report.max_rel_error < 1e-5,
            "{what} seed {seed}: rel error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn curve_net_gradients() {
        let n = nets();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_tensor::<f64>(&mut rng, &[3, 4, 4], 0.0, 1.0);
            let r = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 4, 4], -1.0, 1.0);
            let mut p = n.init_params::<f64>(seed).curve;
            let report = grad_check(
                &mut p,
                |p, bw| {
                    let (y, cache) = n.curve.forward_cached(p, &x)?;
                    if bw {
                        n.curve.backward(p, &cache, &r)?;
                    }
                    Ok(dot(&y, &r))
                },
                GradCheckConfig { seed, ..Default::default() },
            )
            .unwrap();
            check(report, "curve", seed);
        }
    }

    #[test]
    fn noise_net_gradients() {
        let n = nets();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let xt = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
            let low = rand_tensor::<f64>(&mut rng, &[3, 8, 8], 0.0, 1.0);
            let cond = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
            let r = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
            let t = rng.gen_range(1..=50);
            let mut p = n.init_params::<f64>(seed).noise;
            let report = grad_check(
                &mut p,
                |p, bw| {
                    let (y, cache) = n.noise.forward_cached(p, &xt, &low, &cond, t)?;
                    if bw {
                        n.noise.backward(p, &cache, &r, false)?;
                    }
                    Ok(dot(&y, &r))
                },
                GradCheckConfig { seed, ..Default::default() },
            )
            .unwrap();
            check(report, "noise", seed);
        }
    }

    #[test]
    fn denoiser_gradients() {
        let n = nets();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = rand_tensor::<f64>(&mut rng, &[3, 8, 8], 0.0, 1.0);
            let r = rand_tensor::<f64>(&mut rng, &[3, 8, 8], -1.0, 1.0);
            let mut p = n.init_params::<f64>(seed).denoise;
            let report = grad_check(
                &mut p,
                |p, bw| {
                    let (y, cache) = n.denoiser.forward_cached(p, &x)?;
                    if bw {
                        n.denoiser.backward(p, &cache, &r)?;
                    }
                    Ok(dot(&y, &r))
                },
                GradCheckConfig { seed, ..Default::default() },
            )
            .unwrap();
            check(report, "denoise", seed);
        }
    }

    #[test]
    fn noise_net_input_gradients() {
        let n = nets();
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let xt = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        let low = rand_tensor::<f64>(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let cond = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        let r = rand_tensor::<f64>(&mut rng, &[CURVE_CHANNELS, 8, 8], -1.0, 1.0);
        let mut p = n.init_params::<f64>(1).noise;
        let (_, cache) = n.noise.forward_cached(&p, &xt, &low, &cond, 7).unwrap();
        let g = n.noise.backward(&mut p, &cache, &r, true).unwrap().unwrap();
        let f = |c: &Tensor<f64>| dot(&n.noise.forward(&p, &xt, &low, c, 7).unwrap(), &r);
        let h = 1e-5;
        for i in (0..cond.len()).step_by(37) {
            let (mut a, mut b) = (cond.clone(), cond.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!((num - g.cond_curves.data()[i]).abs() < 1e-6 * (1.0 + num.abs()), "{i}");
        }
        assert_eq!(g.x_t.dims(), xt.dims());
        assert_eq!(g.low_image.dims(), low.dims());
    }
}
