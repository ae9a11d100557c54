//! Curve estimator: seven 3×3 convolutions with symmetric skip
//! concatenations and a tanh head producing 24 curve planes.

use rand::Rng;

use super::layer::{Conv, Layout};
use super::spec::ModelSpec;
use crate::curve::CURVE_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward, relu_forward, tanh_backward, tanh_forward};
use crate::nn::{ParamStore, Real, Tensor};

#[derive(Clone, Debug)]
pub struct CurveNet {
    convs: [Conv; 7],
    layout: Layout,
}

#[derive(Clone, Debug)]
pub struct CurveCache<F> {
    input: Tensor<F>,
    /// relu outputs of layers 1..=6
    acts: Vec<Tensor<F>>,
    output: Tensor<F>,
}

impl CurveNet {
    pub fn new(spec: &ModelSpec) -> Self {
        let w = spec.curve_width;
        let mut layout = Layout::default();
        let mut conv = |i: usize, cin, cout| layout.conv(format!("curve.conv{i}"), cin, cout, 3, 1);
        let convs = [
            conv(1, 3, w),
            conv(2, w, w),
            conv(3, w, w),
            conv(4, w, w),
            conv(5, 2 * w, w),
            conv(6, 2 * w, w),
            conv(7, 2 * w, CURVE_CHANNELS),
        ];
        Self { convs, layout }
    }

    pub fn init_params<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        self.layout.init(rng)
    }

    pub fn num_scalars(&self) -> usize {
        self.layout.num_scalars()
    }

    pub fn head(&self) -> &Conv {
        &self.convs[6]
    }

    pub fn forward_cached<F: Real>(&self, p: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, CurveCache<F>)> {
        let (c, _, _) = x.chw()?;
        if c != 3 {
            return Err(Error::shape("curve_estimator", "3 input channels", c));
        }
        let mut acts: Vec<Tensor<F>> = Vec::with_capacity(6);
        let mut push = |t: Tensor<F>| -> Tensor<F> {
            let a = relu_forward(&t);
            acts.push(a.clone());
            a
        };
        let a1 = push(self.convs[0].forward(p, x)?);
        let a2 = push(self.convs[1].forward(p, &a1)?);
        let a3 = push(self.convs[2].forward(p, &a2)?);
        let a4 = push(self.convs[3].forward(p, &a3)?);
        let a5 = push(self.convs[4].forward(p, &Tensor::concat_channels(&[&a3, &a4])?)?);
        let a6 = push(self.convs[5].forward(p, &Tensor::concat_channels(&[&a2, &a5])?)?);
        let out = tanh_forward(&self.convs[6].forward(p, &Tensor::concat_channels(&[&a1, &a6])?)?);
        Ok((
            out.clone(),
            CurveCache {
                input: x.clone(),
                acts,
                output: out,
            },
        ))
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.forward_cached(p, x).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients for upstream gradient `grad`.
    pub fn backward<F: Real>(&self, p: &mut ParamStore<F>, cache: &CurveCache<F>, grad: &Tensor<F>) -> Result<()> {
        let a = &cache.acts;
        let w = a[0].chw()?.0;
        let g7 = tanh_backward(grad, &cache.output)?;
        let cat7 = Tensor::concat_channels(&[&a[0], &a[5]])?;
        let gi = self.convs[6].backward(p, &cat7, &g7, true)?.split_channels(&[w, w])?;
        let (mut g_a1, g_a6) = (gi[0].clone(), gi[1].clone());

        let cat6 = Tensor::concat_channels(&[&a[1], &a[4]])?;
        let gi = self.convs[5].backward(p, &cat6, &relu_backward(&g_a6, &a[5])?, true)?.split_channels(&[w, w])?;
        let (mut g_a2, g_a5) = (gi[0].clone(), gi[1].clone());

        let cat5 = Tensor::concat_channels(&[&a[2], &a[3]])?;
        let gi = self.convs[4].backward(p, &cat5, &relu_backward(&g_a5, &a[4])?, true)?.split_channels(&[w, w])?;
        let (mut g_a3, mut g_a4) = (gi[0].clone(), gi[1].clone());

        g_a4 = relu_backward(&g_a4, &a[3])?;
        g_a3.add_assign(&self.convs[3].backward(p, &a[2], &g_a4, true)?)?;
        g_a3 = relu_backward(&g_a3, &a[2])?;
        g_a2.add_assign(&self.convs[2].backward(p, &a[1], &g_a3, true)?)?;
        g_a2 = relu_backward(&g_a2, &a[1])?;
        g_a1.add_assign(&self.convs[1].backward(p, &a[0], &g_a2, true)?)?;
        g_a1 = relu_backward(&g_a1, &a[0])?;
        self.convs[0].backward(p, &cache.input, &g_a1, false)?;
        Ok(())
    }
}
