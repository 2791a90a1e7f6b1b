//! Small building blocks shared by the CTDG model and the augmenter.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Glorot-uniform `rows × cols` matrix, entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}

/// `y = x · W + b` over the last axis of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}/w"), glorot(rng, fan_in, fan_out, fan_in, fan_out));
        let bias = store.add(format!("{name}/b"), Tensor::zeros([fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<S: Scalar>(self, tape: &mut Tape<S>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}/fc{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last {
                x = self.activation.apply(tape, x);
            }
        }
        Ok(x)
    }

    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.layers.iter().for_each(|l| l.zero(store));
    }
}
