//! Conditional noise predictor: a two-level U-Net over the concatenation
//! `[x_t, low image, initial curves]` (51 channels) with a sinusoidal
//! timestep embedding projected and added at the bottleneck.

use rand::Rng;

use super::layer::{Conv, Layout};
use super::spec::ModelSpec;
use crate::curve::CURVE_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward, relu_forward};
use crate::nn::embedding::{broadcast_add_channels, broadcast_add_channels_backward, time_embedding};
use crate::nn::pool::{upsample_nearest_backward, upsample_nearest_forward};
use crate::nn::{ParamStore, Real, Tensor};

pub const NOISE_IN_CHANNELS: usize = CURVE_CHANNELS + 3 + CURVE_CHANNELS;

#[derive(Clone, Debug)]
pub struct NoiseNet {
    width: usize,
    time_dim: usize,
    timesteps: usize,
    enc0: Conv,
    enc0b: Conv,
    down1: Conv,
    enc1: Conv,
    down2: Conv,
    temb: Conv,
    mid: Conv,
    dec1: Conv,
    dec0: Conv,
    out: Conv,
    layout: Layout,
}

#[derive(Clone, Debug)]
pub struct NoiseCache<F> {
    input: Tensor<F>,
    emb: Tensor<F>,
    h0: Tensor<F>,
    s0: Tensor<F>,
    h1: Tensor<F>,
    s1: Tensor<F>,
    h2: Tensor<F>,
    m: Tensor<F>,
    cat1: Tensor<F>,
    u1: Tensor<F>,
    cat0: Tensor<F>,
    u0: Tensor<F>,
}

/// Gradients with respect to the three conditioning inputs.
#[derive(Clone, Debug)]
pub struct NoiseInputGrads<F> {
    pub x_t: Tensor<F>,
    pub low_image: Tensor<F>,
    pub cond_curves: Tensor<F>,
}

impl NoiseNet {
    pub fn new(spec: &ModelSpec, timesteps: usize) -> Self {
        let w = spec.noise_width;
        let mut l = Layout::default();
        let enc0 = l.conv("noise.enc0".into(), NOISE_IN_CHANNELS, w, 3, 1);
        let enc0b = l.conv("noise.enc0b".into(), w, w, 3, 1);
        let down1 = l.conv("noise.down1".into(), w, 2 * w, 3, 2);
        let enc1 = l.conv("noise.enc1".into(), 2 * w, 2 * w, 3, 1);
        let down2 = l.conv("noise.down2".into(), 2 * w, 2 * w, 3, 2);
        let temb = l.conv("noise.temb".into(), spec.time_dim, 2 * w, 1, 1);
        let mid = l.conv("noise.mid".into(), 2 * w, 2 * w, 3, 1);
        let dec1 = l.conv("noise.dec1".into(), 4 * w, 2 * w, 3, 1);
        let dec0 = l.conv("noise.dec0".into(), 3 * w, w, 3, 1);
        let out = l.conv("noise.out".into(), w, CURVE_CHANNELS, 3, 1);
        Self {
            width: w,
            time_dim: spec.time_dim,
            timesteps,
            enc0,
            enc0b,
            down1,
            enc1,
            down2,
            temb,
            mid,
            dec1,
            dec0,
            out,
            layout: l,
        }
    }

    pub fn init_params<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        self.layout.init(rng)
    }

    pub fn num_scalars(&self) -> usize {
        self.layout.num_scalars()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn head(&self) -> &Conv {
        &self.out
    }

    fn check_inputs<F: Real>(&self, x_t: &Tensor<F>, low: &Tensor<F>, cond: &Tensor<F>, t: usize) -> Result<()> {
        let (c, h, w) = x_t.chw()?;
        if c != CURVE_CHANNELS {
            return Err(Error::shape("noise_net", "24-channel x_t", c));
        }
        if low.dims() != [3, h, w] {
            return Err(Error::shape("noise_net", format!("low image [3, {h}, {w}]"), format!("{:?}", low.dims())));
        }
        if cond.dims() != x_t.dims() {
            return Err(Error::shape("noise_net", format!("{:?}", x_t.dims()), format!("{:?}", cond.dims())));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid("noise_net", format!("{h}x{w} not divisible by 4")));
        }
        if t == 0 || t > self.timesteps {
            return Err(Error::invalid("noise_net", format!("t={t} outside 1..={}", self.timesteps)));
        }
        Ok(())
    }

    pub fn forward_cached<F: Real>(
        &self,
        p: &ParamStore<F>,
        x_t: &Tensor<F>,
        low: &Tensor<F>,
        cond: &Tensor<F>,
        t: usize,
    ) -> Result<(Tensor<F>, NoiseCache<F>)> {
        self.check_inputs(x_t, low, cond, t)?;
        let input = Tensor::concat_channels(&[x_t, low, cond])?;
        let h0 = relu_forward(&self.enc0.forward(p, &input)?);
        let s0 = relu_forward(&self.enc0b.forward(p, &h0)?);
        let h1 = relu_forward(&self.down1.forward(p, &s0)?);
        let s1 = relu_forward(&self.enc1.forward(p, &h1)?);

        let emb = time_embedding::<F>(t, self.time_dim, self.timesteps)?.reshape(&[self.time_dim, 1, 1])?;
        let tproj = self.temb.forward(p, &emb)?;
        let mut z2 = self.down2.forward(p, &s1)?;
        broadcast_add_channels(&mut z2, &tproj)?;
        let h2 = relu_forward(&z2);
        let m = relu_forward(&self.mid.forward(p, &h2)?);

        let cat1 = Tensor::concat_channels(&[&upsample_nearest_forward(&m, 2)?, &s1])?;
        let u1 = relu_forward(&self.dec1.forward(p, &cat1)?);
        let cat0 = Tensor::concat_channels(&[&upsample_nearest_forward(&u1, 2)?, &s0])?;
        let u0 = relu_forward(&self.dec0.forward(p, &cat0)?);
        let out = self.out.forward(p, &u0)?;
        Ok((
            out,
            NoiseCache {
                input,
                emb,
                h0,
                s0,
                h1,
                s1,
                h2,
                m,
                cat1,
                u1,
                cat0,
                u0,
            },
        ))
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x_t: &Tensor<F>,
        low: &Tensor<F>,
        cond: &Tensor<F>,
        t: usize,
    ) -> Result<Tensor<F>> {
        self.forward_cached(p, x_t, low, cond, t).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients. Input gradients are computed only
    /// when `need_inputs` is set.
    pub fn backward<F: Real>(
        &self,
        p: &mut ParamStore<F>,
        c: &NoiseCache<F>,
        grad: &Tensor<F>,
        need_inputs: bool,
    ) -> Result<Option<NoiseInputGrads<F>>> {
        let w = self.width;
        let g_u0 = relu_backward(&self.out.backward(p, &c.u0, grad, true)?, &c.u0)?;
        let g = self.dec0.backward(p, &c.cat0, &g_u0, true)?.split_channels(&[2 * w, w])?;
        let mut g_s0 = g[1].clone();
        let g_u1 = relu_backward(&upsample_nearest_backward(&g[0], 2)?, &c.u1)?;
        let g = self.dec1.backward(p, &c.cat1, &g_u1, true)?.split_channels(&[2 * w, 2 * w])?;
        let mut g_s1 = g[1].clone();
        let g_m = relu_backward(&upsample_nearest_backward(&g[0], 2)?, &c.m)?;
        let g_h2 = relu_backward(&self.mid.backward(p, &c.h2, &g_m, true)?, &c.h2)?;

        let g_tproj = broadcast_add_channels_backward(&g_h2)?.reshape(&[2 * w, 1, 1])?;
        self.temb.backward(p, &c.emb, &g_tproj, false)?;
        g_s1.add_assign(&self.down2.backward(p, &c.s1, &g_h2, true)?)?;

        let g_h1 = relu_backward(&self.enc1.backward(p, &c.h1, &relu_backward(&g_s1, &c.s1)?, true)?, &c.h1)?;
        g_s0.add_assign(&self.down1.backward(p, &c.s0, &g_h1, true)?)?;
        let g_h0 = relu_backward(&self.enc0b.backward(p, &c.h0, &relu_backward(&g_s0, &c.s0)?, true)?, &c.h0)?;
        let g_in = self.enc0.backward(p, &c.input, &g_h0, need_inputs)?;
        if !need_inputs {
            return Ok(None);
        }
        let parts = g_in.split_channels(&[CURVE_CHANNELS, 3, CURVE_CHANNELS])?;
        let mut it = parts.into_iter();
        Ok(Some(NoiseInputGrads {
            x_t: it.next().unwrap(),
            low_image: it.next().unwrap(),
            cond_curves: it.next().unwrap(),
        }))
    }
}
