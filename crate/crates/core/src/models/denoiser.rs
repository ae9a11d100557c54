//! Residual denoiser: input projection, `n` conv-relu-conv residual blocks
//! and a 3-channel projection added back onto the input.

use rand::Rng;

use super::layer::{Conv, Layout};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward, relu_forward};
use crate::nn::{ParamStore, Real, Tensor};

#[derive(Clone, Debug)]
pub struct Denoiser {
    input: Conv,
    blocks: Vec<(Conv, Conv)>,
    output: Conv,
    layout: Layout,
}

#[derive(Clone, Debug)]
pub struct DenoiserCache<F> {
    input: Tensor<F>,
    h0: Tensor<F>,
    /// per block: (block input, inner relu output)
    blocks: Vec<(Tensor<F>, Tensor<F>)>,
    last: Tensor<F>,
}

/// The residual head starts small so the initial map is close to the
/// identity and the post-denoiser clamp is rarely active.
const HEAD_INIT_SCALE: f64 = 0.1;

impl Denoiser {
    pub fn new(spec: &ModelSpec) -> Self {
        let d = spec.denoise_width;
        let mut layout = Layout::default();
        let input = layout.conv("denoise.in".into(), 3, d, 3, 1);
        let blocks = (0..spec.denoise_blocks)
            .map(|i| {
                (
                    layout.conv(format!("denoise.block{i}.conv1"), d, d, 3, 1),
                    layout.conv(format!("denoise.block{i}.conv2"), d, d, 3, 1),
                )
            })
            .collect();
        let output = layout.scaled_conv("denoise.out".into(), d, 3, 3, 1, HEAD_INIT_SCALE);
        Self {
            input,
            blocks,
            output,
            layout,
        }
    }

    pub fn init_params<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        self.layout.init(rng)
    }

    pub fn num_scalars(&self) -> usize {
        self.layout.num_scalars()
    }

    pub fn head(&self) -> &Conv {
        &self.output
    }

    pub fn forward_cached<F: Real>(&self, p: &ParamStore<F>, y: &Tensor<F>) -> Result<(Tensor<F>, DenoiserCache<F>)> {
        let (c, _, _) = y.chw()?;
        if c != 3 {
            return Err(Error::shape("denoiser", "3 channels", c));
        }
        let h0 = relu_forward(&self.input.forward(p, y)?);
        let mut h = h0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (c1, c2) in &self.blocks {
            let inner = relu_forward(&c1.forward(p, &h)?);
            let next = h.add(&c2.forward(p, &inner)?)?;
            blocks.push((h, inner));
            h = next;
        }
        let out = y.add(&self.output.forward(p, &h)?)?;
        Ok((
            out,
            DenoiserCache {
                input: y.clone(),
                h0,
                blocks,
                last: h,
            },
        ))
    }

    /// Inference pass; keeps only the live activations.
    pub fn forward<F: Real>(&self, p: &ParamStore<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
        let (c, _, _) = y.chw()?;
        if c != 3 {
            return Err(Error::shape("denoiser", "3 channels", c));
        }
        let mut h = relu_forward(&self.input.forward(p, y)?);
        for (c1, c2) in &self.blocks {
            let inner = relu_forward(&c1.forward(p, &h)?);
            h.add_assign(&c2.forward(p, &inner)?)?;
        }
        y.add(&self.output.forward(p, &h)?)
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the denoiser input.
    pub fn backward<F: Real>(&self, p: &mut ParamStore<F>, cache: &DenoiserCache<F>, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g_h = self.output.backward(p, &cache.last, grad, true)?;
        for ((c1, c2), (h_in, inner)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let g_inner = relu_backward(&c2.backward(p, inner, &g_h, true)?, inner)?;
            g_h.add_assign(&c1.backward(p, h_in, &g_inner, true)?)?;
        }
        let g_h0 = relu_backward(&g_h, &cache.h0)?;
        let mut g_y = self.input.backward(p, &cache.input, &g_h0, true)?;
        g_y.add_assign(grad)?;
        Ok(g_y)
    }
}
