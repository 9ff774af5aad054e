//! The dual-branch block: multi-head self-attention and a token-wise shared
//! MLP run side by side on the same normalized input; their outputs are
//! concatenated and fused by a feed-forward network, and one residual
//! connection wraps the whole block:
//!
//! ```text
//! h = norm(x)
//! y = x + FFN(norm2([attention(h) ‖ mlp(h)]))
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp2, Norm};
use crate::ndcore::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Learnables of one dual-branch block.
#[derive(Clone, Copy, Debug)]
pub struct DualBranchParams {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub mlp: Mlp2,
    pub fuse_norm: Norm,
    pub fuse: Mlp2,
    pub heads: usize,
    pub dim: usize,
}

impl DualBranchParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Contract(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), dim),
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), dim, dim, true, rng),
            mlp: Mlp2::new(store, &format!("{name}.mlp"), [dim, dim, dim], rng),
            fuse_norm: Norm::new(store, &format!("{name}.fuse_norm"), 2 * dim),
            fuse: Mlp2::new(store, &format!("{name}.fuse"), [2 * dim, 4 * dim, dim], rng),
            heads,
            dim,
        })
    }

    /// Learnable scalar count of one block at width `c`:
    /// attention `4(c² + c)`, MLP branch `2(c² + c)`,
    /// fusion FFN `2c·4c + 4c + 4c·c + c`, norms `2c + 4c`.
    pub fn analytic_numel(c: usize) -> usize {
        let attn = 4 * (c * c + c);
        let mlp = 2 * (c * c + c);
        let ffn = 2 * c * 4 * c + 4 * c + 4 * c * c + c;
        let norms = 2 * c + 2 * (2 * c);
        attn + mlp + ffn + norms
    }

    pub fn numel(&self) -> usize {
        self.norm.numel()
            + self.q.numel()
            + self.k.numel()
            + self.v.numel()
            + self.out.numel()
            + self.mlp.numel()
            + self.fuse_norm.numel()
            + self.fuse.numel()
    }

    /// Sets the final fusion projection to zero, turning the block into the
    /// identity map.
    pub fn zero_fusion_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let fc2 = self.fuse.fc2;
        for id in std::iter::once(fc2.weight).chain(fc2.bias) {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

/// Branch outputs of one block, before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchTrace<T> {
    /// `[B, K, C]`.
    pub attn_out: Tensor<T>,
    /// `[B, K, C]`.
    pub mlp_out: Tensor<T>,
}

/// Graph handles for a block's output and its two branch outputs.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub y: Var,
    pub attn: Var,
    pub mlp: Var,
}

impl BlockOutput {
    pub fn trace<T: Scalar>(&self, g: &Graph<'_, T>) -> BranchTrace<T> {
        BranchTrace {
            attn_out: g.value(self.attn).clone(),
            mlp_out: g.value(self.mlp).clone(),
        }
    }
}

fn check_tokens(shape: &[usize], dim: usize, op: &'static str) -> Result<()> {
    if shape.len() != 3 || shape[2] != dim {
        return Err(Error::shape(op, shape, &[0, 0, dim]));
    }
    Ok(())
}

/// Multi-head scaled dot-product self-attention over the tokens of each
/// sample, scale `1/√(C/h)`, followed by the output projection.
pub fn attention_branch<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &DualBranchParams) -> Result<Var> {
    check_tokens(g.shape(x), p.dim, "attention_branch")?;
    let head_dim = p.dim / p.heads;
    let q = p.q.forward(g, x)?;
    let k = p.k.forward(g, x)?;
    let v = p.v.forward(g, x)?;
    let q = g.split_heads(q, p.heads)?;
    let k = g.split_heads(k, p.heads)?;
    let v = g.split_heads(v, p.heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::lit(head_dim as f64).sqrt());
    let weights = g.softmax(scores);
    let ctx = g.bmm(weights, v, false)?;
    let ctx = g.merge_heads(ctx, p.heads)?;
    p.out.forward(g, ctx)
}

/// Per-token `C → C → C` MLP with shared weights.
pub fn mlp_branch<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &DualBranchParams) -> Result<Var> {
    check_tokens(g.shape(x), p.dim, "mlp_branch")?;
    p.mlp.forward(g, x)
}

/// Channel-wise concatenation of both branches, normalization, then the
/// `2C → 4C → C` feed-forward network.
pub fn fuse<T: Scalar>(g: &mut Graph<'_, T>, attn_out: Var, mlp_out: Var, p: &DualBranchParams) -> Result<Var> {
    if g.shape(attn_out) != g.shape(mlp_out) {
        return Err(Error::shape("fuse", g.shape(attn_out), g.shape(mlp_out)));
    }
    check_tokens(g.shape(attn_out), p.dim, "fuse")?;
    let cat = g.concat(&[attn_out, mlp_out], 2)?;
    let h = p.fuse_norm.forward(g, cat)?;
    p.fuse.forward(g, h)
}

/// One full block; the returned handles expose both branch outputs.
pub fn dual_block<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &DualBranchParams) -> Result<BlockOutput> {
    check_tokens(g.shape(x), p.dim, "dual_block")?;
    let h = p.norm.forward(g, x)?;
    let attn = attention_branch(g, h, p)?;
    let mlp = mlp_branch(g, h, p)?;
    let f = fuse(g, attn, mlp, p)?;
    let y = g.add(x, f)?;
    Ok(BlockOutput { y, attn, mlp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup(dim: usize, heads: usize) -> (ParamStore<f64>, DualBranchParams) {
        let mut store = ParamStore::new();
        let p = DualBranchParams::new(&mut store, "b", dim, heads, &mut rng::seeded(11)).unwrap();
        (store, p)
    }

    fn run(
        store: &ParamStore<f64>,
        p: &DualBranchParams,
        x: &Tensor<f64>,
        f: impl Fn(&mut Graph<'_, f64>, Var, &DualBranchParams) -> Var,
    ) -> Tensor<f64> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv, p);
        g.value(y).clone()
    }

    fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let c = x.last_dim();
        let mut out = Vec::new();
        for &i in perm {
            out.extend_from_slice(x.row(i));
        }
        Tensor::new(&[1, perm.len(), c], out).unwrap()
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        assert!(DualBranchParams::new(&mut store, "b", 10, 3, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn single_token_attention_is_projected_values() {
        let (store, p) = setup(8, 2);
        let x = Tensor::randn(&[1, 1, 8], 1.0, &mut rng::seeded(5));
        let got = run(&store, &p, &x, |g, x, p| attention_branch(g, x, p).unwrap());
        let want = run(&store, &p, &x, |g, x, p| {
            let v = p.v.forward(g, x).unwrap();
            p.out.forward(g, v).unwrap()
        });
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_attention_outputs() {
        let (store, p) = setup(8, 2);
        let one = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut rng::seeded(6));
        let mut d = one.data().to_vec();
        d.extend_from_slice(one.data());
        let x = Tensor::new(&[1, 2, 8], d).unwrap();
        let y = run(&store, &p, &x, |g, x, p| attention_branch(g, x, p).unwrap());
        assert!(y.row(0).iter().zip(y.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (store, p) = setup(8, 2);
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut rng::seeded(7));
        let perm = [2, 0, 3, 1];
        let y = run(&store, &p, &x, |g, x, p| dual_block(g, x, p).unwrap().y);
        let yp = run(&store, &p, &permute_tokens(&x, &perm), |g, x, p| {
            dual_block(g, x, p).unwrap().y
        });
        assert!(permute_tokens(&y, &perm).max_abs_diff(&yp) < 1e-12);
    }

    #[test]
    fn mlp_branch_is_token_local() {
        let (store, p) = setup(8, 2);
        let x = Tensor::randn(&[1, 5, 8], 1.0, &mut rng::seeded(8));
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.data_mut()[3 * 8 + j] += 0.5;
        }
        let a = run(&store, &p, &x, |g, x, p| mlp_branch(g, x, p).unwrap());
        let b = run(&store, &p, &x2, |g, x, p| mlp_branch(g, x, p).unwrap());
        for t in 0..5 {
            assert_eq!(a.row(t) == b.row(t), t != 3, "token {t}");
        }
    }

    #[test]
    fn mlp_branch_zero_in_zero_out() {
        let (store, p) = setup(8, 2);
        let y = run(&store, &p, &Tensor::zeros(&[2, 3, 8]), |g, x, p| {
            mlp_branch(g, x, p).unwrap()
        });
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_fusion_output_gives_exact_identity() {
        let (mut store, p) = setup(8, 2);
        p.zero_fusion_output(&mut store);
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut rng::seeded(9));
        let y = run(&store, &p, &x, |g, x, p| dual_block(g, x, p).unwrap().y);
        assert_eq!(y, x);
    }

    #[test]
    fn branches_differ_and_tracing_is_pure() {
        let (store, p) = setup(8, 2);
        let x = Tensor::randn(&[1, 3, 8], 1.0, &mut rng::seeded(10));
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let out = dual_block(&mut g, xv, &p).unwrap();
        let trace = out.trace(&g);
        assert_eq!(trace.attn_out.shape(), &[1, 3, 8]);
        assert_ne!(trace.attn_out, trace.mlp_out);
        let y = run(&store, &p, &x, |g, x, p| dual_block(g, x, p).unwrap().y);
        assert_eq!(g.value(out.y), &y);
    }

    #[test]
    fn numel_matches_analytic_formula() {
        for (c, h) in [(8, 2), (96, 6), (384, 6)] {
            let mut store = ParamStore::<f32>::new();
            let p = DualBranchParams::new(&mut store, "b", c, h, &mut rng::seeded(0)).unwrap();
            assert_eq!(p.numel(), DualBranchParams::analytic_numel(c));
            assert_eq!(store.numel(store.ids()), DualBranchParams::analytic_numel(c));
        }
    }
}
