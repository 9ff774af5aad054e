//! Distillation losses, the supervised and reconstruction objectives they
//! are combined with, and the teacher-record supply.
//!
//! Teacher outputs are always graph constants: gradients reach only the
//! student (and its projector).
//!
//! Teacher record file layout (little-endian): magic `PMTT`, `u32` version 1,
//! `u64` record count, then per record `u64` sample id, `u32` K, `u32`
//! teacher width, `u32` class count (0 when absent), a `ceil(K/8)`-byte
//! mask bitmap (bit `i % 8` of byte `i / 8` set when token `i` is masked),
//! visible-token features row-major in ascending token order, and logits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::PatchedSample;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::model::{make_mask, MaskPlan, Model, ModelConfig};
use crate::ndcore::{Graph, ParamStore, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::tokenizer::stack_patches;

pub const TEACHER_MAGIC: &[u8; 4] = b"PMTT";
pub const TEACHER_VERSION: u32 = 1;

/// Loss weights and softening temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of feature distillation in pre-training.
    pub alpha: f64,
    /// Weight of logit distillation in fine-tuning.
    pub beta: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            temperature: 3.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.temperature > 0.0) {
            return Err(Error::Contract(format!("invalid distillation weights {self:?}")));
        }
        Ok(())
    }
}

/// Sum over tokens of the squared L2 distance between teacher features and
/// (projected) student features, averaged over the batch.
///
/// `student` is `[B, K_vis, C]`; `teacher` is `[B, K_vis, C_t]`.
pub fn feat_distill_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    student: Var,
    teacher: &Tensor<T>,
    projector: Option<&Linear>,
) -> Result<Var> {
    let (ss, ts) = (g.shape(student).to_vec(), teacher.shape());
    if ss.len() != 3 || ts.len() != 3 || ss[0] != ts[0] {
        return Err(Error::shape("feat_distill_loss", &ss, ts));
    }
    if ss[1] != ts[1] {
        return Err(Error::Alignment {
            student: ss[1],
            teacher: ts[1],
        });
    }
    let projected = match projector {
        Some(p) => p.forward(g, student)?,
        None => student,
    };
    let target = g.constant(teacher.clone());
    let diff = g.sub(projected, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, T::one() / T::lit(ss[0] as f64)))
}

/// Mean over the batch of `T² · KL(softmax(z_tea/T) ‖ softmax(z_stu/T))`.
pub fn logit_distill_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    student: Var,
    teacher: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    let ss = g.shape(student).to_vec();
    if ss.len() != 2 || ss != teacher.shape() {
        return Err(Error::shape("logit_distill_loss", &ss, teacher.shape()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature {temperature} must be positive")));
    }
    let (b, n) = (ss[0], ss[1]);
    let inv_t = T::one() / T::lit(temperature);
    // teacher log-probabilities, computed outside the graph
    let mut log_p = teacher.data().iter().map(|&z| z * inv_t).collect::<Vec<T>>();
    for row in log_p.chunks_mut(n) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    let p: Vec<T> = log_p.iter().map(|v| v.exp()).collect();
    let neg_entropy = p.iter().zip(&log_p).fold(T::zero(), |acc, (&pi, &li)| acc + pi * li);

    let scaled = g.scale(student, inv_t);
    let log_q = g.log_softmax(scaled);
    let p_const = g.constant(Tensor::new(&[b, n], p)?);
    let cross = g.mul(p_const, log_q)?;
    let cross = g.sum(cross);
    let ent = g.constant(Tensor::scalar(neg_entropy));
    let kl = g.sub(ent, cross)?;
    let t2 = T::lit(temperature * temperature);
    Ok(g.scale(kl, t2 / T::lit(b as f64)))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[u32]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape("ce_loss", &s, &[labels.len()]));
    }
    let (b, n) = (s[0], s[1]);
    let mut onehot = Tensor::zeros(&[b, n]);
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= n {
            return Err(Error::Label { label: y, classes: n });
        }
        onehot.data_mut()[i * n + y as usize] = T::one();
    }
    let lp = g.log_softmax(logits);
    let mask = g.constant(onehot);
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one() / T::lit(b as f64)))
}

/// `alpha · feat + recon`; the feature term is dropped entirely at `alpha = 0`.
pub fn pretrain_loss<T: Scalar>(g: &mut Graph<'_, T>, feat: Option<Var>, recon: Var, alpha: f64) -> Result<Var> {
    weighted(g, feat, recon, alpha)
}

/// `beta · logit + ce`; the logit term is dropped entirely at `beta = 0`.
pub fn finetune_loss<T: Scalar>(g: &mut Graph<'_, T>, logit: Option<Var>, ce: Var, beta: f64) -> Result<Var> {
    weighted(g, logit, ce, beta)
}

fn weighted<T: Scalar>(g: &mut Graph<'_, T>, aux: Option<Var>, main: Var, weight: f64) -> Result<Var> {
    match aux {
        Some(a) if weight != 0.0 => {
            let w = g.scale(a, T::lit(weight));
            g.add(w, main)
        }
        _ => Ok(main),
    }
}

/// Frozen teacher outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRecord {
    pub sample_id: u64,
    /// `true` marks a masked token.
    pub mask_flags: Vec<bool>,
    /// `[K_vis, C_t]` in ascending visible-token order.
    pub features: Tensor<f32>,
    pub logits: Option<Vec<f32>>,
}

impl TeacherRecord {
    pub fn num_visible(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| !m).count()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.features.shape();
        if s.len() != 2 || s[0] != self.num_visible() {
            return Err(Error::Format(format!(
                "teacher record {}: {} visible flags but features {:?}",
                self.sample_id,
                self.num_visible(),
                s
            )));
        }
        let logits_ok = self.logits.as_ref().is_none_or(|l| l.iter().all(|v| v.is_finite()));
        if !self.features.all_finite() || !logits_ok {
            return Err(Error::NonFinite(format!("teacher record {}", self.sample_id)));
        }
        Ok(())
    }

    pub fn mask_plan(&self) -> Result<MaskPlan> {
        crate::model::mask_from_teacher(&self.mask_flags)
    }
}

/// Teacher records indexed by sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherSet {
    records: BTreeMap<u64, TeacherRecord>,
}

impl TeacherSet {
    pub fn new(records: Vec<TeacherRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            r.validate()?;
            let id = r.sample_id;
            if map.insert(id, r).is_some() {
                return Err(Error::Format(format!("duplicate teacher record for sample {id}")));
            }
        }
        Ok(Self { records: map })
    }

    pub fn get(&self, sample_id: u64) -> Result<&TeacherRecord> {
        self.records.get(&sample_id).ok_or(Error::MissingTeacher(sample_id))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TeacherRecord> {
        self.records.values()
    }

    /// Stacked `[B, K_vis, C_t]` features for the given records.
    pub fn stack_features<T: Scalar>(records: &[&TeacherRecord]) -> Result<Tensor<T>> {
        let first = records
            .first()
            .ok_or_else(|| Error::Contract("no teacher records".into()))?;
        let shape = first.features.shape().to_vec();
        let mut data = Vec::with_capacity(records.len() * first.features.len());
        for r in records {
            if r.features.shape() != shape.as_slice() {
                return Err(Error::shape("stack_features", &shape, r.features.shape()));
            }
            data.extend(r.features.data().iter().map(|&v| T::from_f32_value(v)));
        }
        Tensor::new(&[records.len(), shape[0], shape[1]], data)
    }

    /// Stacked `[B, n]` logits.
    pub fn stack_logits<T: Scalar>(records: &[&TeacherRecord]) -> Result<Tensor<T>> {
        let mut n = None;
        let mut data = Vec::new();
        for r in records {
            let l = r.logits.as_ref().ok_or(Error::MissingLogits(r.sample_id))?;
            if *n.get_or_insert(l.len()) != l.len() {
                return Err(Error::shape("stack_logits", &[n.unwrap_or(0)], &[l.len()]));
            }
            data.extend(l.iter().map(|&v| T::from_f32_value(v)));
        }
        Tensor::new(&[records.len(), n.unwrap_or(0)], data)
    }
}

pub fn encode_teacher_records(records: &[TeacherRecord]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(TEACHER_MAGIC);
    w.u32(TEACHER_VERSION);
    w.u64(records.len() as u64);
    for r in records {
        r.validate()?;
        let k = r.mask_flags.len();
        w.u64(r.sample_id);
        w.u32(k as u32);
        w.u32(r.width() as u32);
        w.u32(r.logits.as_ref().map_or(0, |l| l.len()) as u32);
        let mut bitmap = vec![0u8; k.div_ceil(8)];
        for (i, &m) in r.mask_flags.iter().enumerate() {
            if m {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        w.bytes(&bitmap);
        w.f32s(r.features.data().iter().copied());
        if let Some(l) = &r.logits {
            w.f32s(l.iter().copied());
        }
    }
    Ok(w.buf)
}

pub fn decode_teacher_records(bytes: &[u8]) -> Result<Vec<TeacherRecord>> {
    let mut r = Reader::new(bytes);
    r.magic(TEACHER_MAGIC)?;
    let version = r.u32()?;
    if version != TEACHER_VERSION {
        return Err(Error::Format(format!("unsupported teacher record version {version}")));
    }
    let count = r.u64()?;
    // every record carries at least its 20-byte header
    r.require(count, 20)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let sample_id = r.u64()?;
        let k = r.u32()? as usize;
        let width = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let bitmap = r.bytes(k.div_ceil(8))?;
        let mask_flags: Vec<bool> = (0..k).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect();
        let visible = mask_flags.iter().filter(|&&m| !m).count();
        r.require((visible * width) as u64, 4)?;
        let features = Tensor::new(&[visible, width], r.f32s(visible * width)?)?;
        let logits = if classes > 0 { Some(r.f32s(classes)?) } else { None };
        let rec = TeacherRecord {
            sample_id,
            mask_flags,
            features,
            logits,
        };
        rec.validate()?;
        out.push(rec);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_teacher_records(path: &Path, records: &[TeacherRecord]) -> Result<()> {
    write_file(path, &encode_teacher_records(records)?)
}

pub fn read_teacher_records(path: &Path) -> Result<TeacherSet> {
    TeacherSet::new(decode_teacher_records(&read_file(path)?)?)
}

/// Hex SHA-256 over every parameter name, shape and value.
pub fn param_digest<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (_, name, p) in store.iter() {
        h.update(name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A frozen, randomly initialized model standing in for a pre-trained
/// teacher.
#[derive(Clone, Debug)]
pub struct SynthTeacher {
    pub model: Model<f32>,
    pub seed: u64,
    pub mask_ratio: f64,
}

/// Mask ratio the teacher encoder runs at.
pub const TEACHER_MASK_RATIO: f64 = 0.8;

pub fn synth_teacher(config: ModelConfig, seed: u64) -> Result<SynthTeacher> {
    let mut model = Model::new(config, seed)?;
    model.store.set_requires_grad(false);
    Ok(SynthTeacher {
        model,
        seed,
        mask_ratio: TEACHER_MASK_RATIO,
    })
}

impl SynthTeacher {
    pub fn mask_for(&self, sample_id: u64) -> Result<MaskPlan> {
        let seed = rng::mix(rng::mix(self.seed, rng::tags::TEACHER_MASK), sample_id);
        make_mask(self.model.config.num_patches, self.mask_ratio, seed)
    }

    pub fn digest(&self) -> String {
        param_digest(&self.model.store)
    }

    /// Encoder features under the teacher mask and, optionally, unmasked
    /// classifier logits for every sample.
    pub fn records(&self, samples: &[PatchedSample<f32>], with_logits: bool) -> Result<Vec<TeacherRecord>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let sets: Vec<_> = chunk.iter().map(|s| &s.patches).collect();
            let (patches, centers) = stack_patches(&sets)?;
            let plans = chunk.iter().map(|s| self.mask_for(s.id)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::inference(&self.model.store);
            let net = &self.model.net;
            let tok = net.tokenize(&mut g, &patches, &centers)?;
            let enc = net.encode(&mut g, &tok, &plans)?;
            let feats = g.value(enc.tokens).clone();
            let logits = if with_logits {
                let full = vec![MaskPlan::full(self.model.config.num_patches); chunk.len()];
                let enc = net.encode(&mut g, &tok, &full)?;
                let z = net.classify(&mut g, &enc)?;
                Some(g.value(z).clone())
            } else {
                None
            };
            let [_, kv, c] = [feats.shape()[0], feats.shape()[1], feats.shape()[2]];
            for (i, (s, plan)) in chunk.iter().zip(&plans).enumerate() {
                let rows = feats.data()[i * kv * c..(i + 1) * kv * c].to_vec();
                out.push(TeacherRecord {
                    sample_id: s.id,
                    mask_flags: plan.to_flags(),
                    features: Tensor::new(&[kv, c], rows)?,
                    logits: logits.as_ref().map(|z| z.row(i).to_vec()),
                });
            }
        }
        Ok(out)
    }
}
