//! Branch-correlation histograms, feature export and reconstruction dumps.
//!
//! Reconstruction container layout (little-endian): magic `PMTS`, `u32`
//! version 1, `u32` section count, then per section a `u16`-length UTF-8
//! name, a `u64` byte length and a complete `PMTP` cloud blob.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::{encode_cloud, read_cloud_section, PatchedSample, Sample};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l2, make_patches, Point};
use crate::model::{make_mask, masked_targets, MaskPlan, Model};
use crate::ndcore::Graph;
use crate::scalar::Scalar;
use crate::tokenizer::stack_patches;

pub const SECTIONS_MAGIC: &[u8; 4] = b"PMTS";
pub const SECTIONS_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 41;

/// Pearson correlation with population moments.
pub fn pearson_r<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson_r", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two channels"));
    }
    let n = T::lit(x.len() as f64);
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Histogram of per-token branch correlations for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrHistogram {
    pub block: usize,
    /// `bins + 1` increasing edges from -1 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Tokens with a defined correlation; equals `counts.sum()`.
    pub total: u64,
    /// Tokens where either branch output was constant.
    pub undefined: u64,
    pub mean_abs_r: f64,
}

impl CorrHistogram {
    pub fn new(block: usize, bins: usize) -> Self {
        let edges = (0..=bins)
            .map(|i| {
                if i == bins {
                    1.0
                } else {
                    -1.0 + 2.0 * i as f64 / bins as f64
                }
            })
            .collect();
        Self {
            block,
            edges,
            counts: vec![0; bins],
            total: 0,
            undefined: 0,
            mean_abs_r: 0.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, r: f64) -> usize {
        let b = self.bins();
        (((r + 1.0) / 2.0 * b as f64).floor().max(0.0) as usize).min(b - 1)
    }

    pub fn add(&mut self, r: f64) {
        let i = self.bin_of(r);
        self.counts[i] += 1;
        self.mean_abs_r += (r.abs() - self.mean_abs_r) / (self.total + 1) as f64;
        self.total += 1;
    }

    /// Merges every `factor` adjacent bins.
    pub fn rebin(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.bins().is_multiple_of(factor) {
            return Err(Error::Contract(format!(
                "cannot merge {} bins by {factor}",
                self.bins()
            )));
        }
        let mut out = self.clone();
        out.counts = self.counts.chunks(factor).map(|c| c.iter().sum()).collect();
        out.edges = self.edges.iter().step_by(factor).copied().collect();
        Ok(out)
    }
}

/// Token selection for the correlation study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorrMode {
    /// Every token visible, as in fine-tuning.
    Unmasked,
    /// Pre-training masks from `make_mask(K, ratio, seed ^ sample_id)`.
    Masked { ratio: f64, seed: u64 },
}

/// Pearson r between the attention and MLP branch outputs of every patch
/// token, binned per encoder block. Samples are processed in order.
pub fn correlation_histogram<T: Scalar>(
    model: &Model<T>,
    samples: &[PatchedSample<T>],
    bins: usize,
    mode: CorrMode,
    batch_size: usize,
) -> Result<Vec<CorrHistogram>> {
    if samples.is_empty() || bins == 0 {
        return Err(Error::Contract("correlation histogram needs samples and bins".into()));
    }
    let k = model.config.num_patches;
    let mut hists: Vec<CorrHistogram> = (0..model.config.encoder_blocks)
        .map(|b| CorrHistogram::new(b, bins))
        .collect();
    for chunk in samples.chunks(batch_size.max(1)) {
        let sets: Vec<_> = chunk.iter().map(|s| &s.patches).collect();
        let (patches, centers) = stack_patches(&sets)?;
        let plans = chunk
            .iter()
            .map(|s| match mode {
                CorrMode::Unmasked => Ok(MaskPlan::full(k)),
                CorrMode::Masked { ratio, seed } => make_mask(k, ratio, seed ^ s.id),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference(&model.store);
        let tok = model.net.tokenize(&mut g, &patches, &centers)?;
        let enc = model.net.encode(&mut g, &tok, &plans)?;
        for (h, trace) in hists.iter_mut().zip(enc.traces(&g)) {
            let c = trace.attn_out.last_dim();
            for (a, m) in trace.attn_out.data().chunks(c).zip(trace.mlp_out.data().chunks(c)) {
                match pearson_r(a, m) {
                    Ok(r) => h.add(r.to_f64().unwrap_or(0.0)),
                    Err(Error::UndefinedCorrelation(_)) => h.undefined += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(hists)
}

/// One JSON object per block.
pub fn histograms_jsonl(hists: &[CorrHistogram]) -> Result<String> {
    let mut s = String::new();
    for h in hists {
        s.push_str(&serde_json::to_string(h)?);
        s.push('\n');
    }
    Ok(s)
}

/// `block,bin_lo,bin_hi,count` rows.
pub fn histograms_csv(hists: &[CorrHistogram]) -> String {
    let mut s = String::from("block,bin_lo,bin_hi,count\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", h.block, h.edges[i], h.edges[i + 1], c);
        }
    }
    s
}

/// CSV of `sample_id,label` followed by the classifier-input features.
pub fn features_csv<T: Scalar>(model: &Model<T>, samples: &[PatchedSample<T>], batch_size: usize) -> Result<String> {
    let width = 3 * model.config.dim;
    let mut s = String::from("sample_id,label");
    for i in 0..width {
        let _ = write!(s, ",f{i}");
    }
    s.push('\n');
    for chunk in samples.chunks(batch_size.max(1)) {
        let sets: Vec<_> = chunk.iter().map(|s| &s.patches).collect();
        let (patches, centers) = stack_patches(&sets)?;
        let mut g = Graph::inference(&model.store);
        let tok = model.net.tokenize(&mut g, &patches, &centers)?;
        let plans = vec![MaskPlan::full(tok.num_tokens()); chunk.len()];
        let enc = model.net.encode(&mut g, &tok, &plans)?;
        let f = model.net.pooled_features(&mut g, &enc)?;
        let f = g.value(f);
        for (i, smp) in chunk.iter().enumerate() {
            let _ = write!(s, "{},{}", smp.id, smp.label);
            for v in f.row(i) {
                let _ = write!(s, ",{}", v.to_f32_value());
            }
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn export_features<T: Scalar>(model: &Model<T>, samples: &[PatchedSample<T>], path: &Path) -> Result<()> {
    write_file(path, features_csv(model, samples, 32)?.as_bytes())
}

/// Point sets of one reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub ground_truth: Vec<Point<f32>>,
    /// Points of the visible patches, taken verbatim from the cloud.
    pub visible: Vec<Point<f32>>,
    /// Predicted points of every masked patch with its center added back.
    pub reconstructed: Vec<Point<f32>>,
    pub masked_patches: usize,
    /// Mean per-patch Chamfer-L2 between predicted and true masked patches.
    pub chamfer: f64,
}

/// Masks a sample at the model's ratio with `seed` and reconstructs it.
pub fn reconstruct<T: Scalar>(model: &Model<T>, sample: &Sample, seed: u64) -> Result<Reconstruction> {
    let cfg = &model.config;
    let cloud = sample.cloud.cast::<T>();
    let set = make_patches(&cloud, cfg.num_patches, cfg.patch_k, sample.id)?;
    let plan = make_mask(cfg.num_patches, cfg.mask_ratio, seed)?;
    let (patches, centers) = stack_patches(&[&set])?;
    let plans = [plan];
    let targets = masked_targets(&patches, &plans)?;
    let mut g = Graph::inference(&model.store);
    let tok = model.net.tokenize(&mut g, &patches, &centers)?;
    let enc = model.net.encode(&mut g, &tok, &plans)?;
    let pred = model.net.decode(&mut g, &enc, &plans, &centers)?;
    let pred = g.value(pred);
    let k = cfg.patch_k;
    let to_pts = |d: &[T]| d.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Point<T>>>();
    let mut reconstructed = Vec::with_capacity(plans[0].masked.len() * k);
    let mut chamfer = 0.0;
    for (j, &m) in plans[0].masked.iter().enumerate() {
        let p = to_pts(&pred.data()[j * k * 3..(j + 1) * k * 3]);
        let t = to_pts(&targets.data()[j * k * 3..(j + 1) * k * 3]);
        chamfer += chamfer_l2(&p, &t)?.to_f64().unwrap_or(f64::NAN);
        let c = set.centers[m];
        reconstructed.extend(p.iter().map(|q| [0, 1, 2].map(|d| (q[d] + c[d]).to_f32_value())));
    }
    let visible = plans[0]
        .visible
        .iter()
        .flat_map(|&v| {
            set.source_indices[v * k..(v + 1) * k]
                .iter()
                .map(|&i| sample.cloud.points[i])
        })
        .collect();
    let masked_patches = plans[0].masked.len();
    Ok(Reconstruction {
        ground_truth: sample.cloud.points.clone(),
        visible,
        reconstructed,
        masked_patches,
        chamfer: chamfer / masked_patches as f64,
    })
}

pub fn encode_sections(sections: &[(&str, &[Point<f32>])]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(SECTIONS_MAGIC);
    w.u32(SECTIONS_VERSION);
    w.u32(sections.len() as u32);
    for (name, pts) in sections {
        w.short_str(name)?;
        let blob = encode_cloud(pts)?;
        w.u64(blob.len() as u64);
        w.bytes(&blob);
    }
    Ok(w.buf)
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<(String, Vec<Point<f32>>)>> {
    let mut r = Reader::new(bytes);
    r.magic(SECTIONS_MAGIC)?;
    let version = r.u32()?;
    if version != SECTIONS_VERSION {
        return Err(Error::Format(format!(
            "unsupported section container version {version}"
        )));
    }
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = r.utf8(len)?;
        let blob_len = r.u64()?;
        let blob = r.bytes(usize::try_from(blob_len).map_err(|_| Error::Format("oversized section".into()))?)?;
        let mut inner = Reader::new(blob);
        let pts = read_cloud_section(&mut inner)?;
        inner.finish()?;
        out.push((name, pts));
    }
    r.finish()?;
    Ok(out)
}

/// Writes `ground_truth`, `visible` and `reconstructed` sections.
pub fn export_reconstruction<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    seed: u64,
    path: &Path,
) -> Result<Reconstruction> {
    let rec = reconstruct(model, sample, seed)?;
    let bytes = encode_sections(&[
        ("ground_truth", &rec.ground_truth),
        ("visible", &rec.visible),
        ("reconstructed", &rec.reconstructed),
    ])?;
    write_file(path, &bytes)?;
    Ok(rec)
}

pub fn read_reconstruction(path: &Path) -> Result<Vec<(String, Vec<Point<f32>>)>> {
    decode_sections(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, patchify, SyntheticSpec};
    use crate::model::ModelConfig;

    #[test]
    fn pearson_examples() {
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0f64).abs() < 1e-15);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0f64).abs() < 1e-15);
        let r: f64 = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 9.0 / 84f64.sqrt()).abs() < 1e-15);
        assert!((r - 0.98198).abs() < 5e-6);
        assert!(matches!(
            pearson_r(&[1.0, 1.0], &[0.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn histogram_binning() {
        let mut h = CorrHistogram::new(0, DEFAULT_BINS);
        assert_eq!(h.edges.len(), 42);
        assert_eq!(h.bin_of(0.0), 20);
        assert_eq!(h.bin_of(-1.0), 0);
        assert_eq!(h.bin_of(1.0), 40);
        for r in [-1.0, -0.5, 0.0, 0.01, 1.0] {
            h.add(r);
        }
        assert_eq!(h.total, 5);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert!((h.mean_abs_r - 2.51 / 5.0).abs() < 1e-12);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            num_patches: 8,
            encoder_blocks: 2,
            decoder_blocks: 1,
            mask_ratio: 0.5,
            heads: 2,
            patch_k: 8,
            num_classes: 3,
            tokenizer_hidden: [8, 8],
            pos_hidden: 8,
            head_hidden: 8,
            teacher_dim: None,
        }
    }

    #[test]
    fn histogram_token_counts() {
        let ds = gen_synthetic(&SyntheticSpec {
            points: 64,
            per_class: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let samples = patchify::<f64>(&ds.train, 8, 8).unwrap();
        let m = Model::<f64>::new(tiny(), 0).unwrap();
        let h = correlation_histogram(&m, &samples, 41, CorrMode::Unmasked, 3).unwrap();
        assert_eq!(h.len(), 2);
        for b in &h {
            assert_eq!(b.total + b.undefined, samples.len() as u64 * 8);
        }
        let h2 = correlation_histogram(&m, &samples, 41, CorrMode::Masked { ratio: 0.5, seed: 1 }, 4).unwrap();
        assert_eq!(h2[0].total + h2[0].undefined, samples.len() as u64 * 4);
        assert_eq!(
            h,
            correlation_histogram(&m, &samples, 41, CorrMode::Unmasked, 2).unwrap()
        );
    }

    #[test]
    fn feature_rows_and_columns() {
        let ds = gen_synthetic(&SyntheticSpec {
            points: 64,
            per_class: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let samples = patchify::<f32>(&ds.train, 8, 8).unwrap();
        let m = Model::<f32>::new(tiny(), 0).unwrap();
        let csv = features_csv(&m, &samples, 4).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), samples.len() + 1);
        assert!(lines.iter().all(|l| l.split(',').count() == 2 + 24));
        assert_eq!(csv, features_csv(&m, &samples, 3).unwrap());
    }

    #[test]
    fn reconstruction_sections() {
        let ds = gen_synthetic(&SyntheticSpec {
            points: 64,
            per_class: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let m = Model::<f32>::new(tiny(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pmts");
        let rec = export_reconstruction(&m, &ds.train[0], 5, &path).unwrap();
        assert_eq!(rec.masked_patches, 4);
        assert_eq!(rec.reconstructed.len(), 4 * 8);
        assert!(rec.chamfer.is_finite());
        assert!(rec.visible.iter().all(|p| rec.ground_truth.contains(p)));
        let sections = read_reconstruction(&path).unwrap();
        let names: Vec<&str> = sections.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["ground_truth", "visible", "reconstructed"]);
        assert_eq!(sections[2].1, rec.reconstructed);
    }
}
