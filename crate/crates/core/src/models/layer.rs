use rand::Rng;

use crate::error::Result;
use crate::nn::{conv2d_backward, conv2d_forward, kaiming_uniform, lit, ParamStore, Real, Tensor};

/// A convolution whose weight and bias live at fixed slots of a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    weight: usize,
    bias: usize,
}

impl Conv {
    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn weight_slot(&self) -> usize {
        self.weight
    }

    pub fn bias_slot(&self) -> usize {
        self.bias
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        conv2d_forward(x, p.value(self.weight), p.value(self.bias), self.stride, self.pad())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<F: Real>(
        &self,
        p: &mut ParamStore<F>,
        saved_input: &Tensor<F>,
        grad_out: &Tensor<F>,
        need_input: bool,
    ) -> Result<Tensor<F>> {
        let g = conv2d_backward(
            grad_out,
            saved_input,
            p.value(self.weight),
            self.stride,
            self.pad(),
            need_input,
        )?;
        p.accumulate(self.weight, &g.weight)?;
        p.accumulate(self.bias, &g.bias)?;
        Ok(g.input)
    }
}

/// Records conv definitions in registration order so slot numbers are known
/// before any store exists.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    convs: Vec<Conv>,
    scales: Vec<f64>,
}

impl Layout {
    pub fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let n = self.convs.len();
        let c = Conv {
            name,
            cin,
            cout,
            k,
            stride,
            weight: 2 * n,
            bias: 2 * n + 1,
        };
        self.convs.push(c.clone());
        self.scales.push(1.0);
        c
    }

    /// As [`Layout::conv`] with the initial weights scaled by `scale`.
    pub fn scaled_conv(&mut self, name: String, cin: usize, cout: usize, k: usize, stride: usize, scale: f64) -> Conv {
        let c = self.conv(name, cin, cout, k, stride);
        *self.scales.last_mut().expect("just pushed") = scale;
        c
    }

    /// Kaiming-uniform weights (times the per-layer scale), zero biases.
    pub fn init<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for (c, &s) in self.convs.iter().zip(&self.scales) {
            let w = kaiming_uniform::<F, R>(&[c.cout, c.cin, c.k, c.k], rng).scale(lit(s));
            store.add(format!("{}.weight", c.name), w).expect("unique layer names");
            store.add(format!("{}.bias", c.name), Tensor::zeros(&[c.cout])).expect("unique layer names");
        }
        store
    }

    pub fn num_scalars(&self) -> usize {
        self.convs.iter().map(|c| c.cout * c.cin * c.k * c.k + c.cout).sum()
    }
}

/// Zeroes the weight and bias of `conv`.
pub fn zero_conv<F: Real>(p: &mut ParamStore<F>, conv: &Conv) {
    p.value_mut(conv.weight).fill(F::zero());
    p.value_mut(conv.bias).fill(F::zero());
}
