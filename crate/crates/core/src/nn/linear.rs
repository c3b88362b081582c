use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParameterStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Affine map `x W + b` applied to every row of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.w` (in x out) and `{prefix}.b` (1 x out).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.insert_uniform(&w, &[in_dim, out_dim], in_dim, rng)?;
        store.insert_uniform(&b, &[1, out_dim], in_dim, rng)?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.w)?;
        let b = tape.param(store, &self.b)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }
}

/// Feed-forward stack with one activation between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[in, h1, h2, out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}
