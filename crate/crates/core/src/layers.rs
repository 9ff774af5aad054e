//! Parameterized building blocks shared by the tokenizer, blocks and heads.

use rand::Rng;

use crate::error::Result;
use crate::ndcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Affine map `x·W + b` over the trailing axis; `W` is stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn numel(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

/// Learned scale and shift of a layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }

    pub fn numel(&self) -> usize {
        2 * self.width
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn numel(&self) -> usize {
        self.fc1.numel() + self.fc2.numel()
    }
}
