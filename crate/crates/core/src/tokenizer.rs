//! Patch tokenizer (mini-PointNet) and center positional embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::layers::{Linear, Mlp2};
use crate::ndcore::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Tokens for a batch of samples plus the centers they were built from.
#[derive(Clone, Debug)]
pub struct TokenBatch<T> {
    /// `[B, K, C]` node on the graph that produced it.
    pub tokens: Var,
    /// `[B, K, 3]`.
    pub centers: Tensor<T>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn batch(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.centers.shape()[1]
    }
}

/// Stacks patch sets into `[B, G, k, 3]` patch and `[B, G, 3]` center tensors.
pub fn stack_patches<T: Scalar>(sets: &[&PatchSet<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = sets.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (g, k) = (first.num_patches(), first.k);
    let mut patches = Vec::with_capacity(sets.len() * g * k * 3);
    let mut centers = Vec::with_capacity(sets.len() * g * 3);
    for s in sets {
        if s.num_patches() != g || s.k != k {
            return Err(Error::shape("stack_patches", &[g, k], &[s.num_patches(), s.k]));
        }
        patches.extend(s.patches.iter().flatten());
        centers.extend(s.centers.iter().flatten());
    }
    Ok((
        Tensor::new(&[sets.len(), g, k, 3], patches)?,
        Tensor::new(&[sets.len(), g, 3], centers)?,
    ))
}

/// Shared per-point MLP, max-pool over the patch, projection to the token
/// width.
#[derive(Clone, Copy, Debug)]
pub struct MiniPointNet {
    pub point1: Linear,
    pub point2: Linear,
    pub proj: Linear,
}

impl MiniPointNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: [usize; 2],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            point1: Linear::new(store, &format!("{name}.point1"), 3, hidden[0], true, rng),
            point2: Linear::new(store, &format!("{name}.point2"), hidden[0], hidden[1], true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), hidden[1], dim, true, rng),
        }
    }

    /// `[B, G, k, 3]` center-relative patches → `[B, G, C]` tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape("embed_patches", &s, &[0, 0, 0, 3]));
        }
        let h = self.point1.forward(g, patches)?;
        let h = g.gelu(h);
        let h = self.point2.forward(g, h)?;
        let pooled = g.max_axis(h, 2)?;
        self.proj.forward(g, pooled)
    }

    pub fn numel(&self) -> usize {
        self.point1.numel() + self.point2.numel() + self.proj.numel()
    }
}

/// Embeds patch tensors as tokens on `g`.
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &MiniPointNet,
    patches: &Tensor<T>,
    centers: Tensor<T>,
) -> Result<TokenBatch<T>> {
    let p = g.constant(patches.clone());
    let tokens = net.forward(g, p)?;
    Ok(TokenBatch { tokens, centers })
}

/// Two-layer MLP `3 → hidden → C` applied to each center.
#[derive(Clone, Copy, Debug)]
pub struct PosEmbed {
    pub mlp: Mlp2,
}

impl PosEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp2::new(store, name, [3, hidden, dim], rng),
        }
    }

    /// `[B, K, 3]` → `[B, K, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, centers: Var) -> Result<Var> {
        self.mlp.forward(g, centers)
    }

    pub fn numel(&self) -> usize {
        self.mlp.numel()
    }
}
