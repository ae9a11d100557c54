use super::tensor::{Real, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn forward<F: Real>(self, x: &Tensor<F>) -> Tensor<F> {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Tanh => tanh_forward(x),
        }
    }

    /// `input` and `output` are the saved forward tensors; relu reads the
    /// input sign, tanh reads the output.
    pub fn backward<F: Real>(
        self,
        grad: &Tensor<F>,
        input: &Tensor<F>,
        output: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        match self {
            Activation::Relu => relu_backward(grad, input),
            Activation::Tanh => tanh_backward(grad, output),
        }
    }
}

pub fn relu_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    if super::ops::tracking_branches() {
        super::ops::note_branches(x.data().iter().map(|&v| (v > F::zero()) as u64));
    }
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Real>(grad: &Tensor<F>, input: &Tensor<F>) -> Result<Tensor<F>> {
    grad.zip_map(input, "relu_backward", |g, x| {
        if x > F::zero() {
            g
        } else {
            F::zero()
        }
    })
}

pub fn tanh_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<F: Real>(grad: &Tensor<F>, output: &Tensor<F>) -> Result<Tensor<F>> {
    let sign = if crate::fault::tanh_backward_sign_flipped() {
        -F::one()
    } else {
        F::one()
    };
    grad.zip_map(output, "tanh_backward", |g, y| sign * g * (F::one() - y * y))
}
