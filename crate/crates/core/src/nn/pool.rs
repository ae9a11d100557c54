//! Integer-factor pooling and nearest-neighbour upsampling on `C×H×W`.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn pool_dims<F: Real>(x: &Tensor<F>, k: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::invalid(
            op,
            format!("{h}x{w} is not divisible by pooling factor {k}"),
        ));
    }
    Ok((c, h, w))
}

pub fn avg_pool_forward<F: Real>(x: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let (c, h, w) = pool_dims(x, k, "avg_pool")?;
    let (oh, ow) = (h / k, w / k);
    let norm = F::one() / super::tensor::lit((k * k) as f64);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<F: Real>(grad: &Tensor<F>, input_dims: &[usize], k: usize) -> Result<Tensor<F>> {
    let gx = Tensor::<F>::zeros(input_dims);
    let (c, h, w) = pool_dims(&gx, k, "avg_pool_backward")?;
    let (oh, ow) = (h / k, w / k);
    if grad.dims() != [c, oh, ow] {
        return Err(Error::shape("avg_pool_backward", format!("[{c}, {oh}, {ow}]"), format!("{:?}", grad.dims())));
    }
    let norm = F::one() / super::tensor::lit((k * k) as f64);
    let mut gx = gx;
    for ch in 0..c {
        let g = grad.plane(ch).to_vec();
        let dst = gx.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / k) * ow + x / k] * norm;
            }
        }
    }
    Ok(gx)
}

/// Max pooling. Also returns, per output element, the flat input index of
/// the first maximum in scan order (used by the backward pass).
pub fn max_pool_forward<F: Real>(x: &Tensor<F>, k: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    let (c, h, w) = pool_dims(x, k, "max_pool")?;
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let src = x.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (oy * k) * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (oy * k + dy) * w + ox * k + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = ch * h * w + best;
            }
        }
    }
    super::ops::note_branches(argmax.iter().map(|&i| i as u64));
    Ok((out, argmax))
}

pub fn max_pool_backward<F: Real>(grad: &Tensor<F>, argmax: &[usize], input_dims: &[usize]) -> Result<Tensor<F>> {
    if grad.len() != argmax.len() {
        return Err(Error::shape("max_pool_backward", argmax.len(), grad.len()));
    }
    let mut gx = Tensor::zeros(input_dims);
    for (&g, &i) in grad.data().iter().zip(argmax) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

pub fn upsample_nearest_forward<F: Real>(x: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (h * k, w * k);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.plane(ch).to_vec();
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / k) * w + xx / k];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<F: Real>(grad: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let (c, oh, ow) = pool_dims(grad, k, "upsample_nearest_backward")?;
    let (h, w) = (oh / k, ow / k);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = grad.plane(ch).to_vec();
        let dst = gx.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / k) * w + x / k] += g[y * ow + x];
            }
        }
    }
    Ok(gx)
}
