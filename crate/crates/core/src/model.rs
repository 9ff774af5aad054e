//! The masked autoencoder and classifier assembled from the tokenizer and
//! dual-branch blocks.
//!
//! Pre-training path: tokenize all patches, keep the visible ones, prepend a
//! class token, run the encoder; the decoder sees the encoded visible tokens
//! followed by one shared mask token per hidden patch and predicts every
//! hidden patch as `k` center-relative points. Fine-tuning runs the encoder
//! with every token visible and classifies `[cls ‖ max-pool ‖ mean-pool]`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dualbranch::{dual_block, BlockOutput, BranchTrace, DualBranchParams};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp2, Norm};
use crate::ndcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::tokenizer::{MiniPointNet, PosEmbed, TokenBatch};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_patches: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub mask_ratio: f64,
    pub heads: usize,
    pub patch_k: usize,
    pub num_classes: usize,
    pub tokenizer_hidden: [usize; 2],
    pub pos_hidden: usize,
    pub head_hidden: usize,
    /// Teacher feature width; adds a student-side projector when it differs
    /// from `dim`.
    pub teacher_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl ModelConfig {
    /// 6 encoder blocks, 4 decoder blocks, 384 channels, 64 patches.
    pub fn small() -> Self {
        Self {
            dim: 384,
            num_patches: 64,
            encoder_blocks: 6,
            decoder_blocks: 4,
            mask_ratio: 0.7,
            heads: 6,
            patch_k: 32,
            num_classes: 40,
            tokenizer_hidden: [128, 256],
            pos_hidden: 128,
            head_hidden: 256,
            teacher_dim: None,
        }
    }

    /// The 12-block encoder variant.
    pub fn large() -> Self {
        Self {
            encoder_blocks: 12,
            ..Self::small()
        }
    }

    /// Reduced configuration for CPU-scale experiments on 512-point clouds.
    pub fn desk() -> Self {
        Self {
            dim: 96,
            num_patches: 32,
            encoder_blocks: 3,
            decoder_blocks: 2,
            mask_ratio: 0.7,
            heads: 6,
            patch_k: 32,
            num_classes: 5,
            tokenizer_hidden: [32, 64],
            pos_hidden: 32,
            head_hidden: 256,
            teacher_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        if self.encoder_blocks == 0 || self.num_patches < 2 || self.patch_k == 0 {
            return bad(format!("degenerate architecture {self:?}"));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        Ok(())
    }

    fn projector_dim(&self) -> Option<usize> {
        self.teacher_dim.filter(|&t| t != self.dim)
    }
}

/// Which tokens the encoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    Random { seed: u64 },
    Teacher,
    Full,
}

/// Partition of token indices into visible and masked sets, both ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub source: MaskSource,
}

/// Number of masked tokens for `ratio` of `k` tokens, rounded down.
pub fn mask_count(k: usize, ratio: f64) -> usize {
    // the epsilon absorbs products like 0.7 * 30 = 20.999999999999996
    (ratio * k as f64 + 1e-9).floor() as usize
}

/// A uniformly random mask of `floor(ratio·K)` tokens, fixed by `seed`.
pub fn make_mask(k: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) || k < 2 {
        return Err(Error::DegenerateMask(format!("K={k}, ratio={ratio}")));
    }
    let n_mask = mask_count(k, ratio);
    if n_mask == 0 || n_mask == k {
        return Err(Error::DegenerateMask(format!(
            "floor({ratio}·{k}) = {n_mask} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng::stream(seed, rng::tags::MASK, k as u64));
    let mut masked = order[..n_mask].to_vec();
    let mut visible = order[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        source: MaskSource::Random { seed },
    })
}

/// Mirrors teacher flags (`true` = masked) exactly.
pub fn mask_from_teacher(flags: &[bool]) -> Result<MaskPlan> {
    let masked: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
    let visible: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
    if masked.is_empty() || visible.is_empty() {
        return Err(Error::DegenerateMask(format!(
            "teacher flags mask {} of {} tokens",
            masked.len(),
            flags.len()
        )));
    }
    Ok(MaskPlan {
        visible,
        masked,
        source: MaskSource::Teacher,
    })
}

impl MaskPlan {
    /// Every token visible (fine-tuning and analysis).
    pub fn full(k: usize) -> Self {
        Self {
            visible: (0..k).collect(),
            masked: Vec::new(),
            source: MaskSource::Full,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// `true` marks a masked token.
    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_tokens()];
        for &m in &self.masked {
            flags[m] = true;
        }
        flags
    }

    /// Checks the partition invariants.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.num_tokens()];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        self.visible.windows(2).all(|w| w[0] < w[1]) && self.masked.windows(2).all(|w| w[0] < w[1])
    }
}

fn uniform_count<'p>(plans: &'p [MaskPlan], k: usize, pick: impl Fn(&'p MaskPlan) -> &'p [usize]) -> Result<usize> {
    let first = plans.first().ok_or_else(|| Error::Contract("no mask plans".into()))?;
    let n = pick(first).len();
    for p in plans {
        if p.num_tokens() != k {
            return Err(Error::Contract(format!(
                "mask plan covers {} tokens, batch has {k}",
                p.num_tokens()
            )));
        }
        if pick(p).len() != n {
            return Err(Error::Contract(
                "mask plans in one batch must hide the same number of tokens".into(),
            ));
        }
    }
    Ok(n)
}

/// Row indices `b·K + i` for the chosen tokens of each sample.
fn token_rows(plans: &[MaskPlan], k: usize, pick: impl Fn(&MaskPlan) -> &[usize]) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| pick(p).iter().map(move |&i| b * k + i).collect::<Vec<_>>())
        .collect()
}

/// Gathers `[B, K, ...]` rows of a constant tensor into `[B, n, ...]`.
fn gather_const<T: Scalar>(t: &Tensor<T>, rows: &[usize], per_sample: usize) -> Tensor<T> {
    let s = t.shape();
    let row_len: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        out.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
    }
    let mut shape = vec![s[0], per_sample];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(&shape, out).expect("gathered shape")
}

/// Ground-truth center-relative points of every masked patch,
/// `[B·|masked|, k, 3]`, from stacked `[B, K, k, 3]` patches.
pub fn masked_targets<T: Scalar>(patches: &Tensor<T>, plans: &[MaskPlan]) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 4 || s[0] != plans.len() {
        return Err(Error::shape("masked_targets", s, &[plans.len()]));
    }
    let n = uniform_count(plans, s[1], |p| &p.masked)?;
    let rows = token_rows(plans, s[1], |p| &p.masked);
    gather_const(patches, &rows, n).reshape(&[plans.len() * n, s[2], 3])
}

/// Encoder result on a graph.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, C]`.
    pub cls: Var,
    /// `[B, K_vis, C]` in ascending visible-index order.
    pub tokens: Var,
    pub blocks: Vec<BlockOutput>,
    pub visible: usize,
}

impl EncoderOutput {
    /// Branch traces per block with the class token removed.
    pub fn traces<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<BranchTrace<T>> {
        let drop_cls = |t: &Tensor<T>| {
            let s = t.shape();
            let (b, k, c) = (s[0], s[1], s[2]);
            let mut out = Vec::with_capacity(b * (k - 1) * c);
            for bi in 0..b {
                out.extend_from_slice(&t.data()[(bi * k + 1) * c..(bi + 1) * k * c]);
            }
            Tensor::new(&[b, k - 1, c], out).expect("trace shape")
        };
        self.blocks
            .iter()
            .map(|blk| {
                let t = blk.trace(g);
                BranchTrace {
                    attn_out: drop_cls(&t.attn_out),
                    mlp_out: drop_cls(&t.mlp_out),
                }
            })
            .collect()
    }
}

/// Parameter handles of the full network.
#[derive(Clone, Debug)]
pub struct Network {
    pub tokenizer: MiniPointNet,
    pub enc_pos: PosEmbed,
    pub cls_token: ParamId,
    pub cls_pos: ParamId,
    pub encoder: Vec<DualBranchParams>,
    pub enc_norm: Norm,
    pub mask_token: ParamId,
    pub dec_pos: PosEmbed,
    pub decoder: Vec<DualBranchParams>,
    pub dec_norm: Norm,
    pub recon_head: Linear,
    pub cls_head: Mlp2,
    pub projector: Option<Linear>,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let mut store = ParamStore::new();
        let r = &mut rng::stream(seed, rng::tags::INIT, 0);
        let tokenizer = MiniPointNet::new(&mut store, "tokenizer", config.tokenizer_hidden, c, r);
        let enc_pos = PosEmbed::new(&mut store, "encoder.pos", config.pos_hidden, c, r);
        let cls_token = store.add("encoder.cls_token", Tensor::randn(&[c], 0.02, r));
        let cls_pos = store.add("encoder.cls_pos", Tensor::randn(&[c], 0.02, r));
        let encoder = (0..config.encoder_blocks)
            .map(|i| DualBranchParams::new(&mut store, &format!("encoder.blocks.{i}"), c, config.heads, r))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = Norm::new(&mut store, "encoder.norm", c);
        let mask_token = store.add("decoder.mask_token", Tensor::randn(&[c], 0.02, r));
        let dec_pos = PosEmbed::new(&mut store, "decoder.pos", config.pos_hidden, c, r);
        let decoder = (0..config.decoder_blocks)
            .map(|i| DualBranchParams::new(&mut store, &format!("decoder.blocks.{i}"), c, config.heads, r))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = Norm::new(&mut store, "decoder.norm", c);
        let recon_head = Linear::new(&mut store, "decoder.head", c, 3 * config.patch_k, true, r);
        let cls_head = Mlp2::new(
            &mut store,
            "cls_head",
            [3 * c, config.head_hidden, config.num_classes],
            r,
        );
        let projector = config
            .projector_dim()
            .map(|t| Linear::new(&mut store, "projector", c, t, false, r));
        Ok(Self {
            config,
            net: Network {
                tokenizer,
                enc_pos,
                cls_token,
                cls_pos,
                encoder,
                enc_norm,
                mask_token,
                dec_pos,
                decoder,
                dec_norm,
                recon_head,
                cls_head,
                projector,
            },
            store,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel(self.store.ids())
    }
}

impl Network {
    /// `[B, K, k, 3]` patches and `[B, K, 3]` centers → tokens.
    pub fn tokenize<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        patches: &Tensor<T>,
        centers: &Tensor<T>,
    ) -> Result<TokenBatch<T>> {
        crate::tokenizer::embed_patches(g, &self.tokenizer, patches, centers.clone())
    }

    /// Visible tokens plus positional embedding, class token prepended, then
    /// the encoder blocks and final normalization.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &TokenBatch<T>,
        plans: &[MaskPlan],
    ) -> Result<EncoderOutput> {
        let (b, k) = (tokens.batch(), tokens.num_tokens());
        if plans.len() != b {
            return Err(Error::Contract(format!("{} mask plans for batch of {b}", plans.len())));
        }
        let kv = uniform_count(plans, k, |p| &p.visible)?;
        if kv == 0 {
            return Err(Error::DegenerateMask("no visible tokens".into()));
        }
        let c = g.shape(tokens.tokens)[2];
        let rows = token_rows(plans, k, |p| &p.visible);
        let vis = g.gather_rows(tokens.tokens, rows.clone(), &[b, kv, c])?;
        let vis_centers = g.constant(gather_const(&tokens.centers, &rows, kv));
        let pos = self.enc_pos.forward(g, vis_centers)?;
        let vis = g.add(vis, pos)?;

        let cls_tok = g.param(self.cls_token);
        let cls_pos = g.param(self.cls_pos);
        let cls = g.add(cls_tok, cls_pos)?;
        let cls = g.broadcast(cls, &[b, 1])?;
        let mut x = g.concat(&[cls, vis], 1)?;

        let mut blocks = Vec::with_capacity(self.encoder.len());
        for p in &self.encoder {
            let out = dual_block(g, x, p)?;
            x = out.y;
            blocks.push(out);
        }
        let x = self.enc_norm.forward(g, x)?;
        let cls = g.slice(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, c])?;
        let tokens = g.slice(x, 1, 1, kv)?;
        Ok(EncoderOutput {
            cls,
            tokens,
            blocks,
            visible: kv,
        })
    }

    /// Predicts every masked patch: `[B, |masked|, k, 3]` center-relative.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        enc: &EncoderOutput,
        plans: &[MaskPlan],
        centers: &Tensor<T>,
    ) -> Result<Var> {
        let s = centers.shape().to_vec();
        let (b, k) = (s[0], s[1]);
        if plans.len() != b {
            return Err(Error::Contract(format!("{} mask plans for batch of {b}", plans.len())));
        }
        let km = uniform_count(plans, k, |p| &p.masked)?;
        if km == 0 || enc.visible + km != k {
            return Err(Error::Contract(format!(
                "decoder needs masked tokens consistent with the encoder ({} visible, {km} masked, K={k})",
                enc.visible
            )));
        }
        let mask_tok = g.param(self.mask_token);
        let mask = g.broadcast(mask_tok, &[b, km])?;
        let x = g.concat(&[enc.tokens, mask], 1)?;
        let order: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(bi, p)| {
                p.visible
                    .iter()
                    .chain(&p.masked)
                    .map(move |&i| bi * k + i)
                    .collect::<Vec<_>>()
            })
            .collect();
        let ordered = g.constant(gather_const(centers, &order, k));
        let pos = self.dec_pos.forward(g, ordered)?;
        let mut x = g.add(x, pos)?;
        for p in &self.decoder {
            x = dual_block(g, x, p)?.y;
        }
        let x = self.dec_norm.forward(g, x)?;
        let x = g.slice(x, 1, enc.visible, km)?;
        let pts = self.recon_head.forward(g, x)?;
        let patch_k = self.recon_head.fan_out / 3;
        g.reshape(pts, &[b, km, patch_k, 3])
    }

    /// `[cls ‖ max-pool ‖ mean-pool]` over the encoded tokens, `[B, 3C]`.
    pub fn pooled_features<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        let mx = g.max_axis(enc.tokens, 1)?;
        let mean = g.mean_axis(enc.tokens, 1)?;
        g.concat(&[enc.cls, mx, mean], 1)
    }

    /// Class logits `[B, num_classes]`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        let f = self.pooled_features(g, enc)?;
        self.cls_head.forward(g, f)
    }
}

/// Exact learnable scalar count of a configuration, computed from the
/// layer shapes without allocating the model.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let c = cfg.dim;
    let lin = |i: usize, o: usize| i * o + o;
    let [h1, h2] = cfg.tokenizer_hidden;
    let tokenizer = lin(3, h1) + lin(h1, h2) + lin(h2, c);
    let pos = lin(3, cfg.pos_hidden) + lin(cfg.pos_hidden, c);
    let block = DualBranchParams::analytic_numel(c);
    let encoder = tokenizer + pos + 2 * c + cfg.encoder_blocks * block + 2 * c;
    let decoder = c + pos + cfg.decoder_blocks * block + 2 * c + lin(c, 3 * cfg.patch_k);
    let head = lin(3 * c, cfg.head_hidden) + lin(cfg.head_hidden, cfg.num_classes);
    let projector = cfg.projector_dim().map_or(0, |t| c * t);
    encoder + decoder + head + projector
}

/// Parameter count of the encoder path only (tokenizer, positional
/// embedding, class token, blocks, final norm), the part shared between
/// pre-training and fine-tuning.
pub fn count_encoder_params(cfg: &ModelConfig) -> usize {
    let c = cfg.dim;
    let lin = |i: usize, o: usize| i * o + o;
    let [h1, h2] = cfg.tokenizer_hidden;
    lin(3, h1)
        + lin(h1, h2)
        + lin(h2, c)
        + lin(3, cfg.pos_hidden)
        + lin(cfg.pos_hidden, c)
        + 2 * c
        + cfg.encoder_blocks * DualBranchParams::analytic_numel(c)
        + 2 * c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            num_patches: 6,
            encoder_blocks: 2,
            decoder_blocks: 1,
            mask_ratio: 0.5,
            heads: 2,
            patch_k: 4,
            num_classes: 3,
            tokenizer_hidden: [8, 8],
            pos_hidden: 8,
            head_hidden: 8,
            teacher_dim: None,
        }
    }

    #[test]
    fn mask_counts() {
        let p = make_mask(64, 0.7, 1).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (44, 20));
        let p = make_mask(10, 0.5, 1).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (5, 5));
        assert_eq!(make_mask(64, 0.7, 9).unwrap(), make_mask(64, 0.7, 9).unwrap());
        assert!(p.is_partition());
        assert_eq!(mask_count(30, 0.7), 21);
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        assert!(matches!(make_mask(3, 0.2, 0), Err(Error::DegenerateMask(_))));
        assert!(matches!(
            mask_from_teacher(&[true, true]),
            Err(Error::DegenerateMask(_))
        ));
        assert!(matches!(
            mask_from_teacher(&[false, false]),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn teacher_flags_round_trip() {
        let flags: Vec<bool> = (0..10).map(|i| i % 5 != 0).collect();
        let plan = mask_from_teacher(&flags).unwrap();
        assert_eq!(plan.masked.len(), 8);
        assert_eq!(plan.source, MaskSource::Teacher);
        assert_eq!(plan.to_flags(), flags);
        assert_eq!(mask_from_teacher(&plan.to_flags()).unwrap(), plan);
    }

    #[test]
    fn constructed_count_matches_formula() {
        for cfg in [
            tiny(),
            ModelConfig::desk(),
            ModelConfig {
                teacher_dim: Some(12),
                ..tiny()
            },
        ] {
            let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.num_params(), count_params(&cfg));
        }
        assert!(count_params(&ModelConfig::large()) > count_params(&ModelConfig::small()));
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let cfg = tiny();
        let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let r = &mut rng::seeded(0);
        let patches = Tensor::randn(&[2, 6, 4, 3], 0.1, r);
        let centers = Tensor::randn(&[2, 6, 3], 0.5, r);
        let plans = vec![make_mask(6, 0.5, 1).unwrap(), make_mask(6, 0.5, 2).unwrap()];
        let mut g = Graph::inference(&m.store);
        let tok = m.net.tokenize(&mut g, &patches, &centers).unwrap();
        let enc = m.net.encode(&mut g, &tok, &plans).unwrap();
        assert_eq!(g.shape(enc.tokens), &[2, 3, 8]);
        assert_eq!(g.shape(enc.cls), &[2, 8]);
        assert_eq!(enc.traces(&g).len(), 2);
        assert_eq!(enc.traces(&g)[0].attn_out.shape(), &[2, 3, 8]);
        let rec = m.net.decode(&mut g, &enc, &plans, &centers).unwrap();
        assert_eq!(g.shape(rec), &[2, 3, 4, 3]);
        let targets = masked_targets(&patches, &plans).unwrap();
        assert_eq!(targets.shape(), &[6, 4, 3]);
        let full = vec![MaskPlan::full(6); 2];
        let enc = m.net.encode(&mut g, &tok, &full).unwrap();
        let logits = m.net.classify(&mut g, &enc).unwrap();
        assert_eq!(g.shape(logits), &[2, 3]);
    }

    #[test]
    fn unequal_mask_sizes_in_a_batch_are_rejected() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let patches = Tensor::zeros(&[2, 6, 4, 3]);
        let centers = Tensor::zeros(&[2, 6, 3]);
        let plans = vec![make_mask(6, 0.5, 1).unwrap(), make_mask(6, 0.34, 2).unwrap()];
        let mut g = Graph::inference(&m.store);
        let tok = m.net.tokenize(&mut g, &patches, &centers).unwrap();
        assert!(m.net.encode(&mut g, &tok, &plans).is_err());
    }
}
