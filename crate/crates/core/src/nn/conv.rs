//! 2-D cross-correlation with zero padding, lowered to GEMM via im2col.
//!
//! Large outputs are processed in row bands so the column buffer stays
//! bounded; the band partition depends only on the shapes, never on the
//! thread count, so results are reproducible.

use rayon::prelude::*;

use super::ops;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per band.
const BAND_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        op: &'static str,
    ) -> Result<Self> {
        let [cin, h, w] = *input else {
            return Err(Error::shape(op, "input C×H×W", format!("{input:?}")));
        };
        let [cout, wcin, k, k2] = *weight else {
            return Err(Error::shape(op, "weight Cout×Cin×k×k", format!("{weight:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(op, format!("{cin} input channels"), wcin));
        }
        if k != k2 {
            return Err(Error::invalid(op, format!("non-square kernel {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                op,
                format!("kernel {k} larger than padded input {h}x{w}+2*{pad}"),
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.kdim() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn bands(&self) -> Vec<(usize, usize)> {
        let step = self.band_rows();
        (0..self.oh)
            .step_by(step)
            .map(|r0| (r0, (r0 + step).min(self.oh)))
            .collect()
    }

    /// Fills `cols` (kdim × rows·ow) for output rows `[r0, r1)`.
    fn im2col<F: Real>(&self, input: &[F], r0: usize, r1: usize, cols: &mut [F]) {
        let n = (r1 - r0) * self.ow;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in r0..r1 {
                        let iy = oy as isize * s + ky as isize - p;
                        let dst = &mut row[(oy - r0) * self.ow..][..self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *d = if ix >= 0 && ix < self.w as isize {
                                src[ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an input-shaped gradient.
    fn col2im<F: Real>(&self, cols: &[F], r0: usize, r1: usize, grad_input: &mut [F]) {
        let n = (r1 - r0) * self.ow;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &mut grad_input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in r0..r1 {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        let src = &row[(oy - r0) * self.ow..][..self.ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<F: Real>(bias: &Tensor<F>, cout: usize, op: &'static str) -> Result<()> {
    if bias.dims() != [cout] {
        return Err(Error::shape(op, format!("bias [{cout}]"), format!("{:?}", bias.dims())));
    }
    Ok(())
}

/// Output spatial size for the given input size and conv hyperparameters.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn conv2d_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let g = Geometry::new(input.dims(), weight.dims(), stride, padding, "conv2d_forward")?;
    check_bias(bias, g.cout, "conv2d_forward")?;
    ops::record((g.cout * g.kdim() * g.oh * g.ow) as u64);

    let kdim = g.kdim();
    let bands = g.bands();
    let band_out = |&(r0, r1): &(usize, usize)| -> Vec<F> {
        let n = (r1 - r0) * g.ow;
        let mut cols = vec![F::zero(); kdim * n];
        g.im2col(input.data(), r0, r1, &mut cols);
        let mut out = vec![F::zero(); g.cout * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias.data()[co]);
        }
        // SAFETY: weight is cout×kdim, cols is kdim×n, out is cout×n; all
        // row-major and disjoint.
        unsafe {
            F::gemm(
                g.cout,
                kdim,
                n,
                F::one(),
                weight.data().as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                F::one(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    };

    let hw = g.oh * g.ow;
    let mut out = vec![F::zero(); g.cout * hw];
    if bands.len() == 1 {
        out = band_out(&bands[0]);
    } else {
        let parts: Vec<Vec<F>> = bands.par_iter().map(band_out).collect();
        for (&(r0, r1), part) in bands.iter().zip(&parts) {
            let n = (r1 - r0) * g.ow;
            for co in 0..g.cout {
                out[co * hw + r0 * g.ow..][..n].copy_from_slice(&part[co * n..][..n]);
            }
        }
    }
    Tensor::from_vec(&[g.cout, g.oh, g.ow], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weight and
/// bias. Skips the input gradient when `need_input` is false.
pub fn conv2d_backward<F: Real>(
    grad_out: &Tensor<F>,
    saved_input: &Tensor<F>,
    weight: &Tensor<F>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<F>> {
    let g = Geometry::new(
        saved_input.dims(),
        weight.dims(),
        stride,
        padding,
        "conv2d_backward",
    )?;
    if grad_out.dims() != [g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out [{}, {}, {}]", g.cout, g.oh, g.ow),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let kdim = g.kdim();
    let hw = g.oh * g.ow;
    let go = grad_out.data();

    let grad_bias: Vec<F> = go.chunks(hw).map(|r| r.iter().copied().sum()).collect();
    let mut grad_weight = vec![F::zero(); g.cout * kdim];
    let mut grad_input = if need_input {
        vec![F::zero(); g.cin * g.h * g.w]
    } else {
        Vec::new()
    };

    for (r0, r1) in g.bands() {
        let n = (r1 - r0) * g.ow;
        let mut cols = vec![F::zero(); kdim * n];
        g.im2col(saved_input.data(), r0, r1, &mut cols);
        let go_band = go[r0 * g.ow..].as_ptr();
        // SAFETY: grad_out band is cout×n with row stride hw; cols^T is n×kdim
        // (row stride 1, col stride n); grad_weight is cout×kdim.
        unsafe {
            F::gemm(
                g.cout,
                n,
                kdim,
                F::one(),
                go_band,
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                F::one(),
                grad_weight.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        if need_input {
            // grad_cols = W^T (kdim×cout) · grad_out band (cout×n); reuse cols.
            unsafe {
                F::gemm(
                    kdim,
                    g.cout,
                    n,
                    F::one(),
                    weight.data().as_ptr(),
                    1,
                    kdim as isize,
                    go_band,
                    hw as isize,
                    1,
                    F::zero(),
                    cols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            g.col2im(&cols, r0, r1, &mut grad_input);
        }
    }

    Ok(ConvGrads {
        input: if need_input {
            Tensor::from_vec(&[g.cin, g.h, g.w], grad_input)?
        } else {
            Tensor::zeros(&[g.cin, g.h, g.w])
        },
        weight: Tensor::from_vec(weight.dims(), grad_weight)?,
        bias: Tensor::from_vec(&[g.cout], grad_bias)?,
    })
}
