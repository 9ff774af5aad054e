//! Finite-difference verification of every differentiable building block.
//!
//! Each case builds a small random `f64` graph, contracts the output with a
//! random constant tensor into a scalar, and compares the reverse-mode
//! gradient of every input and parameter entry against central differences.

use rand::Rng;
use serde::Serialize;

use crate::distill::{ce_loss, feat_distill_loss, logit_distill_loss};
use crate::dualbranch::{attention_branch, dual_block, fuse, mlp_branch, DualBranchParams};
use crate::error::Result;
use crate::layers::Linear;
use crate::ndcore::{Graph, ParamStore, Tensor, Var};
use crate::rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub const OPS: [&str; 12] = [
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "attention_branch",
    "mlp_branch",
    "fuse",
    "dual_block",
    "chamfer_l2",
    "feat_distill_loss",
    "logit_distill_loss",
    "ce_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub seeds: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'f> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'f;

fn loss_of(store: &ParamStore<f64>, inputs: &[Tensor<f64>], weights: &Tensor<f64>, f: &Build<'_>) -> Result<f64> {
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    let s = g.sum(prod);
    Ok(g.value(s).item())
}

/// Largest relative error over every input and parameter entry, and the
/// number of entries checked.
pub fn check(store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, f: &Build<'_>) -> Result<(f64, usize)> {
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let weights = Tensor::randn(g.shape(y), 1.0, &mut rng::seeded(seed));
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    let s = g.sum(prod);
    let grads = g.backward(s)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        for j in 0..xs[i].len() {
            let analytic = grads.get(*v).map_or(0.0, |t| t.data()[j]);
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = loss_of(store, &xs, &weights, f)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = loss_of(store, &xs, &weights, f)?;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    let mut perturbed = store.clone();
    for id in store.ids() {
        for j in 0..store.get(id).value.len() {
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
            let orig = store.get(id).value.data()[j];
            perturbed.get_mut(id).value.data_mut()[j] = orig + STEP;
            let up = loss_of(&perturbed, inputs, &weights, f)?;
            perturbed.get_mut(id).value.data_mut()[j] = orig - STEP;
            let down = loss_of(&perturbed, inputs, &weights, f)?;
            perturbed.get_mut(id).value.data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Runs one op's check at one seed.
pub fn check_op(op: &str, seed: u64) -> Result<(f64, usize)> {
    let r = &mut rng::seeded(rng::mix(seed, op.len() as u64 ^ 0x9e37));
    let mut store = ParamStore::<f64>::new();
    let randn = |shape: &[usize], std: f64, r: &mut rand_chacha::ChaCha8Rng| Tensor::randn(shape, std, r);
    let (dim, heads, tokens, batch) = (8, 2, 5, 2);
    match op {
        "matmul" => {
            let inputs = [randn(&[3, 4], 1.0, r), randn(&[4, 5], 1.0, r)];
            check(&store, &inputs, seed, &|g, v| g.matmul(v[0], v[1]))
        }
        "softmax" => {
            let inputs = [randn(&[3, 6], 2.0, r)];
            check(&store, &inputs, seed, &|g, v| Ok(g.softmax(v[0])))
        }
        "layer_norm" => {
            let inputs = [
                randn(&[4, 6], 1.5, r),
                randn(&[6], 0.5, r).map(|v| v + 1.0),
                randn(&[6], 0.5, r),
            ];
            check(&store, &inputs, seed, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "gelu" => {
            let inputs = [randn(&[4, 5], 2.0, r)];
            check(&store, &inputs, seed, &|g, v| Ok(g.gelu(v[0])))
        }
        "attention_branch" | "mlp_branch" | "fuse" | "dual_block" => {
            let p = DualBranchParams::new(&mut store, "block", dim, heads, r)?;
            // non-trivial biases and norm affine parameters
            for id in store.ids().collect::<Vec<_>>() {
                let v = &mut store.get_mut(id).value;
                if v.rank() == 1 {
                    let noise = Tensor::randn(v.shape(), 0.3, r);
                    v.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
                }
            }
            let x = randn(&[batch, tokens, dim], 1.0, r);
            match op {
                "attention_branch" => check(&store, &[x], seed, &|g, v| attention_branch(g, v[0], &p)),
                "mlp_branch" => check(&store, &[x], seed, &|g, v| mlp_branch(g, v[0], &p)),
                "fuse" => {
                    let m = randn(&[batch, tokens, dim], 1.0, r);
                    check(&store, &[x, m], seed, &|g, v| fuse(g, v[0], v[1], &p))
                }
                _ => check(&store, &[x], seed, &|g, v| Ok(dual_block(g, v[0], &p)?.y)),
            }
        }
        "chamfer_l2" => {
            let target = randn(&[2, 6, 3], 1.0, r);
            let inputs = [randn(&[2, 5, 3], 1.0, r)];
            check(&store, &inputs, seed, &|g, v| g.chamfer(v[0], &target))
        }
        "feat_distill_loss" => {
            let proj = Linear::new(&mut store, "projector", dim, 6, false, r);
            let teacher = randn(&[batch, tokens, 6], 1.0, r);
            let inputs = [randn(&[batch, tokens, dim], 1.0, r)];
            check(&store, &inputs, seed, &|g, v| {
                feat_distill_loss(g, v[0], &teacher, Some(&proj))
            })
        }
        "logit_distill_loss" => {
            let teacher = randn(&[3, 5], 2.0, r);
            let temperature = [1.0, 2.0, 3.0][r.gen_range(0..3)];
            let inputs = [randn(&[3, 5], 2.0, r)];
            check(&store, &inputs, seed, &|g, v| {
                logit_distill_loss(g, v[0], &teacher, temperature)
            })
        }
        "ce_loss" => {
            let labels: Vec<u32> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let inputs = [randn(&[4, 5], 2.0, r)];
            check(&store, &inputs, seed, &|g, v| ce_loss(g, v[0], &labels))
        }
        other => Err(crate::Error::Contract(format!("no gradient check for {other}"))),
    }
}

/// Checks every op over `seeds` consecutive seeds starting at `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<OpReport>> {
    OPS.iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            let mut checked = 0;
            for s in 0..seeds as u64 {
                let (e, n) = check_op(op, base_seed.wrapping_add(s))?;
                worst = worst.max(e);
                checked += n;
            }
            Ok(OpReport {
                op,
                max_rel_err: worst,
                checked,
                seeds,
            })
        })
        .collect()
}
