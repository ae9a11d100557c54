use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep embedding laid out as interleaved
/// `(sin(t·ω_k), cos(t·ω_k))` pairs with `ω_k = MAX_PERIOD^(-k / (dim/2))`.
pub fn time_embedding<F: Real>(t: usize, dim: usize, max_t: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid("time_embedding", format!("dim must be even and positive, got {dim}")));
    }
    if t > max_t {
        return Err(Error::invalid("time_embedding", format!("t={t} exceeds T={max_t}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = MAX_PERIOD.powf(-(k as f64) / half as f64);
        let arg = t as f64 * omega;
        data.push(lit(arg.sin()));
        data.push(lit(arg.cos()));
    }
    Tensor::from_vec(&[dim], data)
}

/// `x[c, :, :] += v[c]`
pub fn broadcast_add_channels<F: Real>(x: &mut Tensor<F>, v: &Tensor<F>) -> Result<()> {
    let (c, _, _) = x.chw()?;
    if v.len() != c {
        return Err(Error::shape("broadcast_add_channels", c, v.len()));
    }
    for ch in 0..c {
        let add = v.data()[ch];
        x.plane_mut(ch).iter_mut().for_each(|e| *e += add);
    }
    Ok(())
}

/// Gradient of [`broadcast_add_channels`] with respect to `v`.
pub fn broadcast_add_channels_backward<F: Real>(grad: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, _, _) = grad.chw()?;
    let sums = (0..c).map(|ch| grad.plane(ch).iter().copied().sum()).collect();
    Tensor::from_vec(&[c], sums)
}
