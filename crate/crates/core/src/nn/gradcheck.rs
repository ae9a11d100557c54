//! Central-difference verification of hand-written backward passes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the number of parameters probed (all are probed when
    /// the store is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Combine differences at `h` and `h/2` as `(4·D(h/2) − D(h))/3`,
    /// cancelling the `h²` truncation term. Useful on deep compositions.
    pub richardson: bool,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples: 200,
            seed: 0,
            richardson: false,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Analytic and central-difference values at the worst probe.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Probes abandoned because every candidate straddled a kink.
    pub skipped: usize,
}

/// Compares analytic gradients against central differences.
///
/// `objective(params, backward)` returns the scalar loss and, when
/// `backward` is set, accumulates its gradient into `params`. Every entry of
/// the store is probed at least once; the rest of the budget is spent on
/// uniformly drawn scalars.
pub fn grad_check(
    params: &mut ParamStore<f64>,
    mut objective: impl FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    params.zero_grad();
    let base = objective(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let analytic: Vec<f64> = (0..params.num_scalars()).map(|i| params.grad_scalar(i)).collect();
    params.zero_grad();

    let total = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = if total <= cfg.samples {
        (0..total).collect()
    } else {
        let mut v = Vec::with_capacity(cfg.samples + params.len());
        let mut offset = 0;
        for e in params.entries() {
            v.push(offset + rng.gen_range(0..e.value.len()));
            offset += e.value.len();
        }
        v.extend(sample(&mut rng, total, cfg.samples));
        v
    };
    picks.sort_unstable();
    picks.dedup();

    let owner = |params: &ParamStore<f64>, mut i: usize| -> String {
        for e in params.entries() {
            if i < e.value.len() {
                return e.name.clone();
            }
            i -= e.value.len();
        }
        String::new()
    };

    // A probe whose ±h evaluations take a different branch pattern than the
    // base point straddles a kink, where central differences are not an
    // estimate of the derivative. Such probes are replaced by another scalar
    // of the same entry.
    let bounds: Vec<(usize, usize)> = {
        let mut off = 0;
        params
            .entries()
            .iter()
            .map(|e| {
                let b = (off, off + e.value.len());
                off = b.1;
                b
            })
            .collect()
    };
    ops::track_branches();
    let base_pattern = objective(params, false).map(|_| ops::take_branches());
    let base_pattern = base_pattern?;

    let mut worst = (0.0f64, 0usize, (0.0, 0.0));
    let mut checked = 0;
    let mut skipped = 0;
    for &pick in &picks {
        let (lo, hi) = bounds.iter().copied().find(|&(lo, hi)| pick >= lo && pick < hi).unwrap_or((0, total));
        let mut i = pick;
        let mut attempts = 0;
        loop {
            let mut straddles = false;
            let mut diff = |params: &mut ParamStore<f64>, h: f64| -> Result<f64> {
                let orig = params.scalar(i);
                params.set_scalar(i, orig + h);
                ops::track_branches();
                let plus = objective(params, false);
                let plus_pattern = ops::take_branches();
                params.set_scalar(i, orig - h);
                ops::track_branches();
                let minus = objective(params, false);
                let minus_pattern = ops::take_branches();
                params.set_scalar(i, orig);
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite("grad_check perturbed loss".into()));
                }
                straddles |= plus_pattern != base_pattern || minus_pattern != base_pattern;
                Ok((plus - minus) / (2.0 * h))
            };
            let coarse = diff(params, cfg.step)?;
            let numeric = if cfg.richardson {
                let fine = diff(params, cfg.step / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                coarse
            };
            if straddles {
                attempts += 1;
                if attempts < 32 && hi - lo > 1 {
                    i = rng.gen_range(lo..hi);
                    continue;
                }
                skipped += 1;
                break;
            }
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > worst.0 {
                worst = (rel, i, (a, numeric));
            }
            checked += 1;
            break;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param: owner(params, worst.1),
        worst_values: worst.2,
        checked,
        skipped,
    })
}
