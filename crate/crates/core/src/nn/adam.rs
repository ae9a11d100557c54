//! Adam with bias correction.

use super::params::ParamStore;
use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F = f32> {
    pub config: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros_like(&e.value)).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the accumulated gradients, which are zeroed
/// afterwards.
pub fn adam_step<F: Real>(params: &mut ParamStore<F>, state: &mut AdamState<F>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape("adam_step", params.len(), state.m.len()));
    }
    for (slot, (m, _)) in state.m.iter().zip(&state.v).enumerate() {
        params.value(slot).same_dims(m, "adam_step")?;
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (lit::<F>(c.beta1), lit::<F>(c.beta2));
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    // lr·sqrt(bc2)/bc1 folded into one step size
    let step_size: F = lit(c.lr * bc2.sqrt() / bc1);
    let eps_hat: F = lit(c.eps * bc2.sqrt());
    let one = F::one();

    for slot in 0..params.len() {
        let grad = params.grad(slot).clone();
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let value = params.value_mut(slot);
        for (((p, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            *p -= step_size * *mi / (vi.sqrt() + eps_hat);
        }
    }
    params.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.value(0).data()[0], 0.3);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s, AdamConfig { lr: 0.0, ..Default::default() });
        s.accumulate(0, &Tensor::full(&[1], 2.0)).unwrap();
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value(0).data()[0], 0.3);
        assert_eq!(s.grad(0).data()[0], 0.0);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        for g in [2.5, -0.01] {
            let mut s = scalar_store(1.0);
            let mut st = AdamState::new(&s, AdamConfig { lr: 1e-2, ..Default::default() });
            // scalar simulation of the same recurrence
            let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
            for t in 1..=50 {
                s.accumulate(0, &Tensor::full(&[1], g)).unwrap();
                adam_step(&mut s, &mut st).unwrap();
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                p -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
            let got = s.value(0).data()[0];
            assert!((got - p).abs() < 1e-9, "{got} vs {p}");
            assert!((got - 1.0).signum() == -g.signum());
        }
    }

    #[test]
    fn mismatched_state_is_an_error() {
        let mut s = scalar_store(0.0);
        let other = ParamStore::<f64>::new();
        let mut st = AdamState::new(&other, AdamConfig::default());
        assert!(adam_step(&mut s, &mut st).is_err());
    }
}
