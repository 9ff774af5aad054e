//! Pre-training and fine-tuning loops, evaluation, metric logs and
//! checkpoints.
//!
//! Epochs are 0-based: epoch `e` trains at `cosine_lr(e)`. Every random draw
//! is derived from `(seed, epoch, sample id)`, so `(seed, epochs completed)`
//! is the whole RNG state and a resumed run replays an unbroken one exactly.
//!
//! Checkpoint layout (little-endian): magic `PMTC`, `u32` version, `u32`
//! length + UTF-8 JSON run config, `u32` epochs completed, `u32` length +
//! RNG blob (`u64` seed, `u64` next epoch), `u32` parameter count, then per
//! parameter a `u16`-length name, `u8` rank, `u32` dims and `f32` data. The
//! optimizer follows as a second table of the same shape holding `m.<name>`
//! and `v.<name>` moments, then a `u64` step counter.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::PatchedSample;
use crate::distill::{
    ce_loss, feat_distill_loss, finetune_loss, logit_distill_loss, pretrain_loss, DistillConfig, TeacherRecord,
    TeacherSet,
};
use crate::error::{Error, Result};
use crate::model::{make_mask, masked_targets, MaskPlan, Model, ModelConfig};
use crate::ndcore::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Graph, Moments, Schedule, Tensor};
use crate::rng;
use crate::scalar::Scalar;
use crate::tokenizer::stack_patches;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub distill: DistillConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: u32,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Random isotropic scaling in [0.8, 1.2] per sample during fine-tuning.
    pub scale_augment: bool,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            schedule: Schedule::default(),
            distill: DistillConfig::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            clip_grad_norm: None,
            scale_augment: false,
        }
    }

    pub fn finetune() -> Self {
        Self {
            batch_size: 24,
            ..Self::pretrain()
        }
    }

    /// Sets the epoch count and stretches the schedule to match.
    pub fn with_epochs(mut self, epochs: u32) -> Self {
        self.epochs = epochs;
        self.schedule.total_epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.distill.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract("epochs and batch size must be positive".into()));
        }
        if self.epochs > self.schedule.total_epochs {
            return Err(Error::Contract(format!(
                "{} epochs exceed the {}-epoch schedule",
                self.epochs, self.schedule.total_epochs
            )));
        }
        Ok(())
    }
}

/// One metric-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub accuracy: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

/// Appends one JSON line to the metric log at `path`.
pub fn append_metric(path: &Path, log: &EpochLog) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_json_line()?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = read_file(path)?;
    text.split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(Error::from))
        .collect()
}

/// Accuracy and confusion counts (`confusion[true][predicted]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<u64>>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(samples: &[PatchedSample<impl Scalar>], classes: usize) -> Result<()> {
    match samples.iter().find(|s| s.label as usize >= classes) {
        Some(s) => Err(Error::Label {
            label: s.label,
            classes,
        }),
        None => Ok(()),
    }
}

/// Class logits `[B, n]` for a batch, every token visible.
pub fn predict<T: Scalar>(model: &Model<T>, batch: &[&PatchedSample<T>]) -> Result<Tensor<T>> {
    let sets: Vec<_> = batch.iter().map(|s| &s.patches).collect();
    let (patches, centers) = stack_patches(&sets)?;
    let mut g = Graph::inference(&model.store);
    let tok = model.net.tokenize(&mut g, &patches, &centers)?;
    let plans = vec![MaskPlan::full(tok.num_tokens()); batch.len()];
    let enc = model.net.encode(&mut g, &tok, &plans)?;
    let z = model.net.classify(&mut g, &enc)?;
    Ok(g.value(z).clone())
}

/// Single unmasked forward pass per sample; ties resolve to the lowest class.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[PatchedSample<T>], batch_size: usize) -> Result<Evaluation> {
    let n = model.config.num_classes;
    check_labels(samples, n)?;
    let mut confusion = vec![vec![0u64; n]; n];
    let mut correct = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let z = predict(model, &refs)?;
        for (i, s) in chunk.iter().enumerate() {
            let p = argmax(z.row(i));
            confusion[s.label as usize][p] += 1;
            correct += usize::from(p == s.label as usize);
        }
    }
    let total = samples.len();
    Ok(Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        confusion,
    })
}

/// Mean feature-distillation loss of `model` against `teacher` over
/// `samples`, using the teacher masks; no parameters change.
pub fn feature_distill_eval<T: Scalar>(
    model: &Model<T>,
    samples: &[PatchedSample<T>],
    teacher: &TeacherSet,
    batch_size: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let recs = chunk.iter().map(|s| teacher.get(s.id)).collect::<Result<Vec<_>>>()?;
        let plans = recs.iter().map(|r| r.mask_plan()).collect::<Result<Vec<_>>>()?;
        let sets: Vec<_> = chunk.iter().map(|s| &s.patches).collect();
        let (patches, centers) = stack_patches(&sets)?;
        let tf = TeacherSet::stack_features::<T>(&recs)?;
        let mut g = Graph::inference(&model.store);
        let tok = model.net.tokenize(&mut g, &patches, &centers)?;
        let enc = model.net.encode(&mut g, &tok, &plans)?;
        let l = feat_distill_loss(&mut g, enc.tokens, &tf, model.net.projector.as_ref())?;
        sum += g.value(l).item().to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok(sum / samples.len().max(1) as f64)
}

fn mask_seed(seed: u64, epoch: u32, sample_id: u64) -> u64 {
    rng::mix(rng::mix(seed, epoch as u64), sample_id)
}

/// Model, optimizer state and progress of one training stage.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub stage: Stage,
    /// Epochs completed so far.
    pub epoch: u32,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, stage: Stage) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.store, config.optimizer);
        Ok(Self {
            model,
            optimizer,
            config,
            stage,
            epoch: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn checkpoint_due(&self) -> bool {
        self.config.checkpoint_every > 0 && self.epoch.is_multiple_of(self.config.checkpoint_every)
    }

    /// Sample order for `epoch`.
    fn order(&self, n: usize, epoch: u32) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.config.seed, rng::tags::SHUFFLE, epoch as u64));
        idx
    }

    fn records<'t>(
        &self,
        teacher: Option<&'t TeacherSet>,
        batch: &[&PatchedSample<T>],
    ) -> Result<Option<Vec<&'t TeacherRecord>>> {
        let Some(t) = teacher else { return Ok(None) };
        let k = self.model.config.num_patches;
        let recs = batch.iter().map(|s| t.get(s.id)).collect::<Result<Vec<_>>>()?;
        if let Some(r) = recs.iter().find(|r| r.mask_flags.len() != k) {
            return Err(Error::Alignment {
                student: k,
                teacher: r.mask_flags.len(),
            });
        }
        Ok(Some(recs))
    }

    fn apply(&mut self, grads: crate::ndcore::Gradients<T>, lr: f64) -> Result<()> {
        grads.accumulate_into(&mut self.model.store);
        if let Some(max) = self.config.clip_grad_norm {
            clip_grad_norm(&mut self.model.store, max);
        }
        self.optimizer.step(&mut self.model.store, lr)
    }

    fn pretrain_step(
        &mut self,
        batch: &[&PatchedSample<T>],
        teacher: Option<&TeacherSet>,
        lr: f64,
    ) -> Result<[f64; 3]> {
        let epoch = self.epoch;
        let cfg = &self.model.config;
        let records = self.records(teacher, batch)?;
        let plans = match &records {
            Some(recs) => recs.iter().map(|r| r.mask_plan()).collect::<Result<Vec<_>>>()?,
            None => batch
                .iter()
                .map(|s| {
                    make_mask(
                        cfg.num_patches,
                        cfg.mask_ratio,
                        mask_seed(self.config.seed, epoch, s.id),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let sets: Vec<_> = batch.iter().map(|s| &s.patches).collect();
        let (patches, centers) = stack_patches(&sets)?;
        let targets = masked_targets(&patches, &plans)?;
        let alpha = self.config.distill.alpha;

        let mut g = Graph::with_params(&self.model.store);
        let net = &self.model.net;
        let tok = net.tokenize(&mut g, &patches, &centers)?;
        let enc = net.encode(&mut g, &tok, &plans)?;
        let pred = net.decode(&mut g, &enc, &plans, &centers)?;
        let ps = g.shape(pred).to_vec();
        let pred = g.reshape(pred, &[ps[0] * ps[1], ps[2], 3])?;
        let recon = g.chamfer(pred, &targets)?;
        let feat = match &records {
            Some(recs) if alpha > 0.0 => {
                let tf = TeacherSet::stack_features::<T>(recs)?;
                Some(feat_distill_loss(&mut g, enc.tokens, &tf, net.projector.as_ref())?)
            }
            _ => None,
        };
        let total = pretrain_loss(&mut g, feat, recon, alpha)?;
        let value = |v| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        let out = [value(total), value(recon), feat.map_or(0.0, value)];
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("pre-training loss at epoch {epoch}: {out:?}")));
        }
        let grads = g.backward(total)?;
        drop(g);
        self.apply(grads, lr)?;
        Ok(out)
    }

    fn finetune_step(
        &mut self,
        batch: &[&PatchedSample<T>],
        teacher: Option<&TeacherSet>,
        lr: f64,
    ) -> Result<[f64; 3]> {
        let epoch = self.epoch;
        let beta = self.config.distill.beta;
        let records = if beta > 0.0 {
            self.records(teacher, batch)?
        } else {
            None
        };
        let teacher_logits = records.as_ref().map(|r| TeacherSet::stack_logits::<T>(r)).transpose()?;
        let sets: Vec<_> = batch.iter().map(|s| &s.patches).collect();
        let (mut patches, mut centers) = stack_patches(&sets)?;
        if self.config.scale_augment {
            let per_sample_p = patches.len() / batch.len();
            let per_sample_c = centers.len() / batch.len();
            for (i, s) in batch.iter().enumerate() {
                let mut r = rng::stream(self.config.seed, rng::tags::AUGMENT, rng::mix(epoch as u64, s.id));
                let f = T::lit(r.gen_range(0.8..1.2));
                patches.data_mut()[i * per_sample_p..(i + 1) * per_sample_p]
                    .iter_mut()
                    .for_each(|v| *v *= f);
                centers.data_mut()[i * per_sample_c..(i + 1) * per_sample_c]
                    .iter_mut()
                    .for_each(|v| *v *= f);
            }
        }
        let labels: Vec<u32> = batch.iter().map(|s| s.label).collect();

        let mut g = Graph::with_params(&self.model.store);
        let net = &self.model.net;
        let tok = net.tokenize(&mut g, &patches, &centers)?;
        let plans = vec![MaskPlan::full(tok.num_tokens()); batch.len()];
        let enc = net.encode(&mut g, &tok, &plans)?;
        let z = net.classify(&mut g, &enc)?;
        let ce = ce_loss(&mut g, z, &labels)?;
        let logit = match &teacher_logits {
            Some(tz) => Some(logit_distill_loss(&mut g, z, tz, self.config.distill.temperature)?),
            None => None,
        };
        let total = finetune_loss(&mut g, logit, ce, beta)?;
        let value = |v| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        let out = [value(total), value(ce), logit.map_or(0.0, value)];
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}: {out:?}")));
        }
        let grads = g.backward(total)?;
        drop(g);
        self.apply(grads, lr)?;
        Ok(out)
    }

    /// Runs one optimization step on an explicit batch at the current
    /// epoch's learning rate, returning `[total, main, distill]` losses.
    pub fn step(&mut self, batch: &[&PatchedSample<T>], teacher: Option<&TeacherSet>) -> Result<[f64; 3]> {
        let lr = cosine_lr(self.epoch, &self.config.schedule)?;
        match self.stage {
            Stage::Pretrain => self.pretrain_step(batch, teacher, lr),
            Stage::Finetune => self.finetune_step(batch, teacher, lr),
        }
    }

    /// Trains one epoch over `train` and evaluates on `eval` when given.
    pub fn run_epoch(
        &mut self,
        train: &[PatchedSample<T>],
        eval: Option<&[PatchedSample<T>]>,
        teacher: Option<&TeacherSet>,
    ) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        if self.is_done() {
            return Err(Error::Contract(format!(
                "all {} epochs already completed",
                self.config.epochs
            )));
        }
        if self.stage == Stage::Finetune {
            check_labels(train, self.model.config.num_classes)?;
        }
        let epoch = self.epoch;
        let lr = cosine_lr(epoch, &self.config.schedule)?;
        let order = self.order(train.len(), epoch);
        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PatchedSample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let l = match self.stage {
                Stage::Pretrain => self.pretrain_step(&batch, teacher, lr)?,
                Stage::Finetune => self.finetune_step(&batch, teacher, lr)?,
            };
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v * batch.len() as f64;
            }
        }
        let n = train.len() as f64;
        let names = match self.stage {
            Stage::Pretrain => ["total", "recon", "feat"],
            Stage::Finetune => ["total", "ce", "logit"],
        };
        let losses = names.iter().zip(sums).map(|(k, s)| (k.to_string(), s / n)).collect();
        let accuracy = match eval {
            Some(set) if self.stage == Stage::Finetune => {
                Some(evaluate(&self.model, set, self.config.batch_size)?.accuracy)
            }
            _ => None,
        };
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            lr,
            losses,
            accuracy,
        })
    }

    /// Runs the remaining epochs, handing every log line to `on_epoch`.
    pub fn run(
        &mut self,
        train: &[PatchedSample<T>],
        eval: Option<&[PatchedSample<T>]>,
        teacher: Option<&TeacherSet>,
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.run_epoch(train, eval, teacher)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Masked reconstruction pre-training, with feature distillation against
/// `teacher` when records are given.
pub fn pretrain<T: Scalar>(
    model: Model<T>,
    train: &[PatchedSample<T>],
    teacher: Option<&TeacherSet>,
    cfg: TrainConfig,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    let mut t = Trainer::new(model, cfg, Stage::Pretrain)?;
    let logs = t.run(train, None, teacher, |_, _| Ok(()))?;
    Ok((t.model, logs))
}

/// Supervised fine-tuning, with logit distillation when `teacher` is given
/// and `beta > 0`. Logs test accuracy per epoch when `test` is given.
pub fn finetune<T: Scalar>(
    model: Model<T>,
    train: &[PatchedSample<T>],
    test: Option<&[PatchedSample<T>]>,
    teacher: Option<&TeacherSet>,
    cfg: TrainConfig,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    let mut t = Trainer::new(model, cfg, Stage::Finetune)?;
    let logs = t.run(train, test, teacher, |_, _| Ok(()))?;
    Ok((t.model, logs))
}

/// Configuration snapshot stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub stage: Option<Stage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Parameters are stored as `f32` regardless of the training scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Epochs completed.
    pub epoch: u32,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
    pub moments: Vec<NamedTensor>,
    pub step: u64,
}

fn named<T: Scalar>(name: String, t: &Tensor<T>) -> NamedTensor {
    NamedTensor { name, value: t.cast() }
}

fn write_table(w: &mut Writer, table: &[NamedTensor]) -> Result<()> {
    w.u32(table.len() as u32);
    for t in table {
        w.short_str(&t.name)?;
        let shape = t.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Format(format!("rank of {} exceeds 255", t.name)))?;
        w.u8(rank);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f32s(t.value.data().iter().copied());
    }
    Ok(())
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<NamedTensor>> {
    let count = r.u32()?;
    // name length + rank
    r.require(count as u64, 3)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.utf8(len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        r.require(n as u64, 4)?;
        let value = Tensor::new(&shape, r.f32s(n)?)?;
        out.push(NamedTensor { name, value });
    }
    Ok(out)
}

impl Checkpoint {
    /// Parameters only, no optimizer state.
    pub fn from_model<T: Scalar>(model: &Model<T>, seed: u64) -> Self {
        Self {
            config: RunConfig {
                model: model.config.clone(),
                train: None,
                stage: None,
            },
            epoch: 0,
            seed,
            params: model
                .store
                .iter()
                .map(|(_, name, p)| named(name.to_string(), &p.value))
                .collect(),
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn from_trainer<T: Scalar>(t: &Trainer<T>) -> Self {
        let mut ck = Self::from_model(&t.model, t.config.seed);
        ck.config.train = Some(t.config.clone());
        ck.config.stage = Some(t.stage);
        ck.epoch = t.epoch;
        ck.step = t.optimizer.step;
        for ((_, name, _), st) in t.model.store.iter().zip(&t.optimizer.state) {
            ck.moments.push(named(format!("m.{name}"), &st.m));
            ck.moments.push(named(format!("v.{name}"), &st.v));
        }
        ck
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let json = serde_json::to_string(&self.config)?;
        w.u32(json.len() as u32);
        w.bytes(json.as_bytes());
        w.u32(self.epoch);
        w.u32(16);
        w.u64(self.seed);
        w.u64(self.epoch as u64);
        write_table(&mut w, &self.params)?;
        write_table(&mut w, &self.moments)?;
        w.u64(self.step);
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_str(&r.utf8(len)?)?;
        let epoch = r.u32()?;
        let blob_len = r.u32()?;
        if blob_len != 16 {
            return Err(Error::Format(format!("RNG state of {blob_len} bytes, expected 16")));
        }
        let seed = r.u64()?;
        let next = r.u64()?;
        if next != epoch as u64 {
            return Err(Error::Format(format!("RNG state at epoch {next}, header says {epoch}")));
        }
        let params = read_table(&mut r)?;
        let moments = read_table(&mut r)?;
        let step = r.u64()?;
        r.finish()?;
        Ok(Self {
            config,
            epoch,
            seed,
            params,
            moments,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    /// Copies parameters into `model`.
    ///
    /// Shapes must match exactly. With `strict`, every checkpoint parameter
    /// must exist in the model and vice versa; otherwise unmatched names on
    /// either side are skipped.
    pub fn load_into<T: Scalar>(&self, model: &mut Model<T>, strict: bool) -> Result<()> {
        let mut seen = vec![false; model.store.len()];
        for t in &self.params {
            let Some(id) = model.store.find(&t.name) else {
                if strict {
                    return Err(Error::Parameter {
                        name: t.name.clone(),
                        detail: "not present in the model configuration".into(),
                    });
                }
                continue;
            };
            let p = model.store.get_mut(id);
            if p.value.shape() != t.value.shape() {
                return Err(Error::Parameter {
                    name: t.name.clone(),
                    detail: format!(
                        "checkpoint shape {:?} but model expects {:?}",
                        t.value.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = t.value.cast();
            seen[id.index()] = true;
        }
        if strict {
            if let Some(id) = model.store.ids().find(|id| !seen[id.index()]) {
                return Err(Error::Parameter {
                    name: model.store.name(id).to_string(),
                    detail: "missing from the checkpoint".into(),
                });
            }
        }
        Ok(())
    }

    /// Rebuilds the stored model.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut m = Model::new(self.config.model.clone(), self.seed)?;
        self.load_into(&mut m, true)?;
        Ok(m)
    }

    /// Rebuilds the trainer, optimizer state included, to continue where the
    /// checkpoint left off.
    pub fn resume<T: Scalar>(&self) -> Result<Trainer<T>> {
        let (Some(cfg), Some(stage)) = (&self.config.train, self.config.stage) else {
            return Err(Error::Format("checkpoint carries no training state".into()));
        };
        let mut t = Trainer::new(self.model()?, cfg.clone(), stage)?;
        let table: BTreeMap<&str, &Tensor<f32>> = self.moments.iter().map(|t| (t.name.as_str(), &t.value)).collect();
        for (id, name, p) in t.model.store.iter() {
            let get = |prefix: &str| -> Result<Tensor<T>> {
                let key = format!("{prefix}.{name}");
                let v = table.get(key.as_str()).ok_or_else(|| Error::Parameter {
                    name: key.clone(),
                    detail: "optimizer moment missing from the checkpoint".into(),
                })?;
                if v.shape() != p.value.shape() {
                    return Err(Error::Parameter {
                        name: key,
                        detail: format!("moment shape {:?} vs {:?}", v.shape(), p.value.shape()),
                    });
                }
                Ok(v.cast())
            };
            t.optimizer.state[id.index()] = Moments {
                m: get("m")?,
                v: get("v")?,
            };
        }
        t.optimizer.step = self.step;
        t.epoch = self.epoch;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, patchify, SyntheticSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 12,
            num_patches: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            mask_ratio: 0.5,
            heads: 2,
            patch_k: 8,
            num_classes: 3,
            tokenizer_hidden: [8, 8],
            pos_hidden: 8,
            head_hidden: 16,
            teacher_dim: None,
        }
    }

    fn data() -> Vec<PatchedSample<f32>> {
        let ds = gen_synthetic(&SyntheticSpec {
            classes: crate::data::ShapeKind::ALL[..3].to_vec(),
            points: 64,
            per_class: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        patchify(&ds.train, 8, 8).unwrap()
    }

    fn cfg(epochs: u32) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            ..TrainConfig::pretrain().with_epochs(epochs)
        }
    }

    #[test]
    fn lr_follows_the_schedule() {
        let d = data();
        let (_, logs) = pretrain(Model::<f32>::new(tiny(), 1).unwrap(), &d, None, cfg(3)).unwrap();
        for l in &logs {
            assert_eq!(l.lr, cosine_lr(l.epoch, &cfg(3).schedule).unwrap());
        }
        assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn evaluate_counts() {
        let d = data();
        let m = Model::<f32>::new(tiny(), 1).unwrap();
        let e = evaluate(&m, &d, 5).unwrap();
        let trace: u64 = (0..3).map(|i| e.confusion[i][i]).sum();
        assert_eq!(trace as usize, e.correct);
        assert_eq!(e.accuracy, e.correct as f64 / d.len() as f64);
        assert_eq!(e.confusion.iter().flatten().sum::<u64>() as usize, d.len());
        assert_eq!(m.store, Model::<f32>::new(tiny(), 1).unwrap().store);
    }

    #[test]
    fn missing_teacher_is_a_hard_error() {
        let d = data();
        let empty = TeacherSet::default();
        let err = pretrain(Model::<f32>::new(tiny(), 1).unwrap(), &d, Some(&empty), cfg(1)).unwrap_err();
        assert!(matches!(err, Error::MissingTeacher(_)));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let d = data();
        let mut a = Trainer::new(Model::<f32>::new(tiny(), 4).unwrap(), cfg(4), Stage::Pretrain).unwrap();
        let full = a.run(&d, None, None, |_, _| Ok(())).unwrap();

        let mut b = Trainer::new(Model::<f32>::new(tiny(), 4).unwrap(), cfg(4), Stage::Pretrain).unwrap();
        let mut logs = vec![
            b.run_epoch(&d, None, None).unwrap(),
            b.run_epoch(&d, None, None).unwrap(),
        ];
        let bytes = Checkpoint::from_trainer(&b).encode().unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.encode().unwrap(), bytes);
        let mut c = ck.resume::<f32>().unwrap();
        logs.extend(c.run(&d, None, None, |_, _| Ok(())).unwrap());
        assert_eq!(logs, full);
        assert_eq!(c.model.store, a.model.store);
    }

    #[test]
    fn checkpoint_rejects_wrong_shapes_and_headers() {
        let m = Model::<f32>::new(tiny(), 0).unwrap();
        let ck = Checkpoint::from_model(&m, 0);
        let mut other = Model::<f32>::new(ModelConfig { dim: 16, ..tiny() }, 0).unwrap();
        match ck.load_into(&mut other, true).unwrap_err() {
            Error::Parameter { name, .. } => assert!(name.starts_with("tokenizer."), "{name}"),
            e => panic!("{e}"),
        }
        let bytes = ck.encode().unwrap();
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }
}
