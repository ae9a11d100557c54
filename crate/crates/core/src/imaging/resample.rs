//! Per-channel resampling of `C×H×W` tensors.
//!
//! Interpolating filters use half-pixel centers (`src = (dst + 0.5)·scale −
//! 0.5`) with edge-clamped taps and no antialiasing. Bicubic is Catmull-Rom
//! (`a = −0.5`), Lanczos uses three lobes; both are normalized to unit sum
//! and clamped to `[0, 1]` afterwards. Every method has an exact backward
//! pass so losses can be differentiated through it.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::pool;
use crate::nn::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResampleMethod {
    Nearest,
    Bilinear,
    Bicubic,
    Lanczos3,
    MaxPool2,
    AvgPool2,
}

impl ResampleMethod {
    pub const ALL: [ResampleMethod; 6] = [
        ResampleMethod::MaxPool2,
        ResampleMethod::AvgPool2,
        ResampleMethod::Nearest,
        ResampleMethod::Bilinear,
        ResampleMethod::Bicubic,
        ResampleMethod::Lanczos3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResampleMethod::Nearest => "nearest",
            ResampleMethod::Bilinear => "bilinear",
            ResampleMethod::Bicubic => "bicubic",
            ResampleMethod::Lanczos3 => "lanczos3",
            ResampleMethod::MaxPool2 => "maxpool2",
            ResampleMethod::AvgPool2 => "avgpool2",
        }
    }

    fn is_pooling(self) -> bool {
        matches!(self, ResampleMethod::MaxPool2 | ResampleMethod::AvgPool2)
    }

    fn clamps_output(self) -> bool {
        matches!(self, ResampleMethod::Bicubic | ResampleMethod::Lanczos3)
    }
}

impl fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("resample", format!("unknown method {s}")))
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn lanczos3(x: f64) -> f64 {
    if x.abs() < 3.0 {
        sinc(x) * sinc(x / 3.0)
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for each output position along one axis.
fn axis_taps(method: ResampleMethod, n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    let clampi = |i: isize| i.clamp(0, last) as usize;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            match method {
                ResampleMethod::Nearest => {
                    let i = ((o as f64 + 0.5) * scale).floor() as isize;
                    vec![(clampi(i), 1.0)]
                }
                ResampleMethod::Bilinear => {
                    let i0 = center.floor();
                    let f = center - i0;
                    let i0 = i0 as isize;
                    vec![(clampi(i0), 1.0 - f), (clampi(i0 + 1), f)]
                }
                ResampleMethod::Bicubic | ResampleMethod::Lanczos3 => {
                    let (kernel, support): (fn(f64) -> f64, isize) = if method == ResampleMethod::Bicubic {
                        (cubic, 2)
                    } else {
                        (lanczos3, 3)
                    };
                    let i0 = center.floor() as isize;
                    let mut taps: Vec<(usize, f64)> = (i0 - support + 1..=i0 + support)
                        .map(|i| (clampi(i), kernel(center - i as f64)))
                        .collect();
                    let total: f64 = taps.iter().map(|t| t.1).sum();
                    taps.iter_mut().for_each(|t| t.1 /= total);
                    taps
                }
                ResampleMethod::MaxPool2 | ResampleMethod::AvgPool2 => unreachable!(),
            }
        })
        .collect()
}

/// Saved state for [`resize_backward`].
#[derive(Clone, Debug)]
pub struct ResizeCache<F> {
    method: ResampleMethod,
    in_dims: Vec<usize>,
    out_hw: (usize, usize),
    factor: usize,
    argmax: Vec<usize>,
    pre_clamp: Option<Tensor<F>>,
}

fn pool_factor(method: ResampleMethod, h: usize, w: usize, oh: usize, ow: usize) -> Result<usize> {
    if !h.is_multiple_of(oh) || !w.is_multiple_of(ow) || h / oh != w / ow {
        return Err(Error::invalid(
            "resize",
            format!("{method} needs one integer factor: {h}x{w} -> {oh}x{ow}"),
        ));
    }
    Ok(h / oh)
}

fn apply_separable<F: Real>(
    x: &Tensor<F>,
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
) -> Result<Tensor<F>> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (rows.len(), cols.len());
    let cols: Vec<Vec<(usize, F)>> = cols.iter().map(|t| t.iter().map(|&(i, v)| (i, lit(v))).collect()).collect();
    let rows: Vec<Vec<(usize, F)>> = rows.iter().map(|t| t.iter().map(|&(i, v)| (i, lit(v))).collect()).collect();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut tmp = vec![F::zero(); h * ow];
    for ch in 0..c {
        let src = x.plane(ch);
        for y in 0..h {
            let line = &src[y * w..(y + 1) * w];
            for (ox, taps) in cols.iter().enumerate() {
                tmp[y * ow + ox] = taps.iter().map(|&(i, wt)| wt * line[i]).sum();
            }
        }
        let dst = out.plane_mut(ch);
        for (oy, taps) in rows.iter().enumerate() {
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            for &(i, wt) in taps {
                let line = &tmp[i * ow..(i + 1) * ow];
                for (d, &s) in row.iter_mut().zip(line) {
                    *d += wt * s;
                }
            }
        }
    }
    Ok(out)
}

fn apply_separable_transpose<F: Real>(
    g: &Tensor<F>,
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
    h: usize,
    w: usize,
) -> Result<Tensor<F>> {
    let (c, _, ow) = g.chw()?;
    let mut gx = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![F::zero(); h * ow];
    for ch in 0..c {
        tmp.iter_mut().for_each(|v| *v = F::zero());
        let gp = g.plane(ch);
        for (oy, taps) in rows.iter().enumerate() {
            let grow = &gp[oy * ow..(oy + 1) * ow];
            for &(i, wt) in taps {
                let wt: F = lit(wt);
                for (d, &s) in tmp[i * ow..(i + 1) * ow].iter_mut().zip(grow) {
                    *d += wt * s;
                }
            }
        }
        let dst = gx.plane_mut(ch);
        for y in 0..h {
            for (ox, taps) in cols.iter().enumerate() {
                let gv = tmp[y * ow + ox];
                for &(i, wt) in taps {
                    dst[y * w + i] += lit::<F>(wt) * gv;
                }
            }
        }
    }
    Ok(gx)
}

pub fn resize_forward<F: Real>(
    x: &Tensor<F>,
    method: ResampleMethod,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<F>, ResizeCache<F>)> {
    let (_, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "output size must be positive"));
    }
    let mut cache = ResizeCache {
        method,
        in_dims: x.dims().to_vec(),
        out_hw: (out_h, out_w),
        factor: 1,
        argmax: Vec::new(),
        pre_clamp: None,
    };
    let out = match method {
        ResampleMethod::AvgPool2 => {
            cache.factor = pool_factor(method, h, w, out_h, out_w)?;
            pool::avg_pool_forward(x, cache.factor)?
        }
        ResampleMethod::MaxPool2 => {
            cache.factor = pool_factor(method, h, w, out_h, out_w)?;
            let (y, idx) = pool::max_pool_forward(x, cache.factor)?;
            cache.argmax = idx;
            y
        }
        _ => {
            let rows = axis_taps(method, h, out_h);
            let cols = axis_taps(method, w, out_w);
            let y = apply_separable(x, &rows, &cols)?;
            if method.clamps_output() {
                let clamped = y.clamp(F::zero(), F::one());
                cache.pre_clamp = Some(y);
                clamped
            } else {
                y
            }
        }
    };
    Ok((out, cache))
}

pub fn resize<F: Real>(x: &Tensor<F>, method: ResampleMethod, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    resize_forward(x, method, out_h, out_w).map(|(y, _)| y)
}

pub fn resize_backward<F: Real>(grad: &Tensor<F>, cache: &ResizeCache<F>) -> Result<Tensor<F>> {
    let (c, h, w) = (cache.in_dims[0], cache.in_dims[1], cache.in_dims[2]);
    let (oh, ow) = cache.out_hw;
    if grad.dims() != [c, oh, ow] {
        return Err(Error::shape("resize_backward", format!("[{c}, {oh}, {ow}]"), format!("{:?}", grad.dims())));
    }
    match cache.method {
        ResampleMethod::AvgPool2 => pool::avg_pool_backward(grad, &cache.in_dims, cache.factor),
        ResampleMethod::MaxPool2 => pool::max_pool_backward(grad, &cache.argmax, &cache.in_dims),
        m => {
            let g = match &cache.pre_clamp {
                Some(pre) => grad.zip_map(pre, "resize_backward", |g, v| {
                    if v >= F::zero() && v <= F::one() {
                        g
                    } else {
                        F::zero()
                    }
                })?,
                None => grad.clone(),
            };
            debug_assert!(!m.is_pooling());
            let rows = axis_taps(m, h, oh);
            let cols = axis_taps(m, w, ow);
            apply_separable_transpose(&g, &rows, &cols, h, w)
        }
    }
}
