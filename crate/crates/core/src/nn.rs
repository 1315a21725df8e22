//! Layer containers shared by the encoder and field networks.
//!
//! Layers are generic over their parameter type: `Tensor` for stored
//! weights and `Var<'t>` for weights bound to a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffgraph::{GraphError, Tape, Tensor, Var};

/// Affine map `x · weight + bias` with `weight: [in, out]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

/// 2-D convolution with `weight: [out, in, k, k]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

/// Kaiming-normal tensor for a relu layer with the given fan-in.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Linear<Tensor> {
    pub fn kaiming(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: kaiming(&[fan_in, fan_out], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

impl Conv<Tensor> {
    pub fn kaiming(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: kaiming(&[cout, cin, k, k], cin * k * k, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn params(&self) -> [&T; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut T; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl<T> Conv<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn params(&self) -> [&T; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut T; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl<'t> Linear<Var<'t>> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>, GraphError> {
        x.matmul(self.weight)?.add(self.bias)
    }
}

/// Binds stored weights onto a tape, as trainable leaves or constants.
pub fn binder<'t>(tape: &'t Tape, trainable: bool) -> impl FnMut(&Tensor) -> Var<'t> + 't {
    move |t: &Tensor| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    }
}
