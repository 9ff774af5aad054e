//! Synthetic shape datasets and point-cloud file I/O.
//!
//! Two on-disk cloud formats are supported:
//!
//! * `.xyz` text: one whitespace-separated `x y z` triple per line (blank
//!   lines ignored).
//! * `PMTP` binary: magic `PMTP`, `u32` point count, then `count × 3` `f32`
//!   values, all little-endian.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{make_patches, normalize, PatchSet, Point, PointCloud};
use crate::rng;
use crate::scalar::Scalar;

pub const CLOUD_MAGIC: &[u8; 4] = b"PMTP";

/// Shape families of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
        }
    }
}

/// Recipe for a synthetic labelled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ShapeKind>,
    pub points: usize,
    /// Standard deviation of the surface jitter; each offset vector is
    /// redrawn until its norm is at most `3·sigma`.
    pub sigma: f64,
    pub per_class: usize,
    pub seed: u64,
    /// Draw proportions (box edges, radii, heights) per sample.
    pub vary_proportions: bool,
    /// Apply a uniformly random rotation per sample.
    pub random_rotation: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            points: 512,
            sigma: 0.02,
            per_class: 125,
            seed: 0,
            vary_proportions: true,
            random_rotation: true,
        }
    }
}

/// One labelled cloud with a stable identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub cloud: PointCloud<f32>,
}

impl Sample {
    pub fn label(&self) -> u32 {
        self.cloud.label.unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn area_pick<R: Rng + ?Sized>(areas: &[f64], rng: &mut R) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform samples on the noiseless surface of `kind`.
///
/// The sphere always has radius 1. Other shapes use fixed proportions unless
/// `vary` is set.
pub fn sample_surface<R: Rng + ?Sized>(kind: ShapeKind, n: usize, vary: bool, rng: &mut R) -> Vec<[f64; 3]> {
    let mut pick = |lo: f64, hi: f64, fixed: f64| if vary { rng.gen_range(lo..hi) } else { fixed };
    match kind {
        ShapeKind::Sphere => (0..n).map(|_| unit_vector(rng)).collect(),
        ShapeKind::Cube => {
            let half = [pick(0.6, 1.0, 1.0), pick(0.6, 1.0, 1.0), pick(0.6, 1.0, 1.0)];
            // faces perpendicular to x, y, z (two each)
            let areas = [
                half[1] * half[2],
                half[1] * half[2],
                half[0] * half[2],
                half[0] * half[2],
                half[0] * half[1],
                half[0] * half[1],
            ];
            (0..n)
                .map(|_| {
                    let f = area_pick(&areas, rng);
                    let axis = f / 2;
                    let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
                    let mut p = [0.0; 3];
                    for (d, v) in p.iter_mut().enumerate() {
                        *v = if d == axis {
                            sign * half[d]
                        } else {
                            rng.gen_range(-half[d]..half[d])
                        };
                    }
                    p
                })
                .collect()
        }
        ShapeKind::Torus => {
            let major = 1.0;
            let minor = pick(0.2, 0.45, 0.35);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let theta = rng.gen_range(0.0..2.0 * PI);
                let phi = rng.gen_range(0.0..2.0 * PI);
                // area element ∝ (R + r cos θ)
                let accept = (major + minor * theta.cos()) / (major + minor);
                if rng.gen_range(0.0..1.0) < accept {
                    let ring = major + minor * theta.cos();
                    out.push([ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]);
                }
            }
            out
        }
        ShapeKind::Cylinder => {
            let r = pick(0.4, 0.9, 0.6);
            let h = pick(1.2, 2.4, 2.0);
            let areas = [2.0 * PI * r * h, PI * r * r, PI * r * r];
            (0..n)
                .map(|_| {
                    let part = area_pick(&areas, rng);
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    if part == 0 {
                        [r * phi.cos(), r * phi.sin(), rng.gen_range(-h / 2.0..h / 2.0)]
                    } else {
                        let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
                        let z = if part == 1 { h / 2.0 } else { -h / 2.0 };
                        [rr * phi.cos(), rr * phi.sin(), z]
                    }
                })
                .collect()
        }
        ShapeKind::Cone => {
            let r = pick(0.5, 1.0, 0.8);
            let h = pick(1.2, 2.2, 1.8);
            let slant = (r * r + h * h).sqrt();
            let areas = [PI * r * slant, PI * r * r];
            (0..n)
                .map(|_| {
                    let part = area_pick(&areas, rng);
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    // fraction of the way from apex to base, density ∝ t
                    let t = rng.gen_range(0.0f64..1.0).sqrt();
                    if part == 0 {
                        [t * r * phi.cos(), t * r * phi.sin(), h / 2.0 - t * h]
                    } else {
                        [t * r * phi.cos(), t * r * phi.sin(), -h / 2.0]
                    }
                })
                .collect()
        }
    }
}

/// Adds isotropic Gaussian offsets of norm at most `3·sigma`.
pub fn jitter<R: Rng + ?Sized>(points: &mut [[f64; 3]], sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    for p in points {
        let off = loop {
            let o: [f64; 3] = [
                sigma * Distribution::<f64>::sample(&StandardNormal, rng),
                sigma * Distribution::<f64>::sample(&StandardNormal, rng),
                sigma * Distribution::<f64>::sample(&StandardNormal, rng),
            ];
            if o.iter().map(|v| v * v).sum::<f64>() <= 9.0 * sigma * sigma {
                break o;
            }
        };
        for d in 0..3 {
            p[d] += off[d];
        }
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    // uniform unit quaternion
    let mut q = [0.0f64; 4];
    for v in &mut q {
        *v = StandardNormal.sample(rng);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// One raw (unnormalized) synthetic cloud.
pub fn synth_cloud(kind: ShapeKind, spec: &SyntheticSpec, sample_seed: u64) -> Vec<[f64; 3]> {
    let r = &mut rng::seeded(sample_seed);
    let mut pts = sample_surface(kind, spec.points, spec.vary_proportions, r);
    jitter(&mut pts, spec.sigma, r);
    if spec.random_rotation {
        let m = random_rotation(r);
        for p in &mut pts {
            let q = *p;
            for (i, row) in m.iter().enumerate() {
                p[i] = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
            }
        }
    }
    pts
}

/// Generates a labelled dataset with a per-class 80/20 train/test split.
///
/// Sample ids are assigned class-major in generation order; both splits are
/// sorted by id.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes.is_empty() || spec.per_class == 0 || spec.points == 0 {
        return Err(Error::Contract(format!("empty synthetic spec {spec:?}")));
    }
    if !(spec.sigma >= 0.0) {
        return Err(Error::Contract(format!("negative jitter sigma {}", spec.sigma)));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_test = ((spec.per_class as f64) * 0.2).round() as usize;
    let mut id = 0u64;
    for (label, &kind) in spec.classes.iter().enumerate() {
        let mut class_samples = Vec::with_capacity(spec.per_class);
        for _ in 0..spec.per_class {
            let raw = synth_cloud(kind, spec, rng::mix(rng::mix(spec.seed, rng::tags::DATA), id));
            let pts = raw.iter().map(|p| p.map(|v| v as f32)).collect::<Vec<Point<f32>>>();
            let cloud = normalize(&PointCloud::new(pts, Some(label as u32))?)?;
            class_samples.push(Sample { id, cloud });
            id += 1;
        }
        let mut idx: Vec<usize> = (0..class_samples.len()).collect();
        idx.shuffle(&mut rng::stream(spec.seed, rng::tags::SPLIT, label as u64));
        let test_idx: Vec<usize> = idx[..n_test].to_vec();
        for (i, s) in class_samples.into_iter().enumerate() {
            if test_idx.contains(&i) {
                test.push(s);
            } else {
                train.push(s);
            }
        }
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    Ok(Dataset {
        class_names: spec.classes.iter().map(|k| k.name().to_string()).collect(),
        train,
        test,
    })
}

/// Encodes points in the `PMTP` binary layout.
pub fn encode_cloud(points: &[Point<f32>]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CLOUD_MAGIC);
    let count = u32::try_from(points.len())
        .map_err(|_| Error::Format(format!("{} points exceed the u32 count", points.len())))?;
    w.u32(count);
    w.f32s(points.iter().flatten().copied());
    Ok(w.buf)
}

pub(crate) fn read_cloud_section(r: &mut Reader<'_>) -> Result<Vec<Point<f32>>> {
    r.magic(CLOUD_MAGIC)?;
    let n = r.u32()? as usize;
    r.require(n as u64, 12)?;
    let flat = r.f32s(n * 3)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Decodes a `PMTP` byte buffer.
pub fn decode_cloud(bytes: &[u8]) -> Result<Vec<Point<f32>>> {
    let mut r = Reader::new(bytes);
    let pts = read_cloud_section(&mut r)?;
    r.finish()?;
    Ok(pts)
}

/// Parses `.xyz` text.
pub fn parse_xyz(text: &str, source_name: &str) -> Result<Vec<Point<f32>>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            position: format!("line {}", lineno + 1),
            detail,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0f32; 3];
        for (d, f) in fields.iter().enumerate() {
            p[d] = f.parse().map_err(|_| err(format!("not a number: {f:?}")))?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn format_xyz(points: &[Point<f32>]) -> String {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

fn is_xyz(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("xyz"))
}

/// Loads a cloud; `.xyz` files are read as text, anything else as `PMTP`.
pub fn load_cloud(path: &Path) -> Result<PointCloud<f32>> {
    let bytes = read_file(path)?;
    let pts = if is_xyz(path) {
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            position: format!("byte {}", e.utf8_error().valid_up_to()),
            detail: "invalid UTF-8".into(),
        })?;
        parse_xyz(&text, &path.display().to_string())?
    } else {
        decode_cloud(&bytes)?
    };
    PointCloud::new(pts, None)
}

/// Saves a cloud in the format chosen by the file extension.
pub fn save_cloud(path: &Path, cloud: &PointCloud<f32>) -> Result<()> {
    if is_xyz(path) {
        write_file(path, format_xyz(&cloud.points).as_bytes())
    } else {
        write_file(path, &encode_cloud(&cloud.points)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: u64,
    label: u32,
    split: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    class_names: Vec<String>,
    samples: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus one `PMTP` file per sample under `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut samples = Vec::new();
    for (split, set) in [("train", &ds.train), ("test", &ds.test)] {
        for s in set {
            let file = format!("clouds/{:06}.pmtp", s.id);
            write_file(&dir.join(&file), &encode_cloud(&s.cloud.points)?)?;
            samples.push(ManifestEntry {
                id: s.id,
                label: s.label(),
                split: split.to_string(),
                file,
            });
        }
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        samples,
    };
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = read_file(&dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let mut ds = Dataset {
        class_names: manifest.class_names,
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in manifest.samples {
        let mut cloud = load_cloud(&dir.join(&e.file))?;
        cloud.label = Some(e.label);
        let s = Sample { id: e.id, cloud };
        match e.split.as_str() {
            "train" => ds.train.push(s),
            "test" => ds.test.push(s),
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
    Ok(ds)
}

/// A sample cut into patches.
#[derive(Clone, Debug)]
pub struct PatchedSample<T> {
    pub id: u64,
    pub label: u32,
    pub patches: PatchSet<T>,
}

/// Cuts every sample into `num_patches` FPS-centered k-NN patches.
///
/// The FPS start point depends only on the sample id, so a teacher and a
/// student patching the same sample obtain the same token order.
pub fn patchify<T: Scalar>(samples: &[Sample], num_patches: usize, k: usize) -> Result<Vec<PatchedSample<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(PatchedSample {
                id: s.id,
                label: s.label(),
                patches: make_patches(&s.cloud.cast::<T>(), num_patches, k, s.id)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            points: 128,
            per_class: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn sphere_radius_stays_within_three_sigma() {
        let spec = SyntheticSpec {
            classes: vec![ShapeKind::Sphere],
            ..small_spec()
        };
        for seed in 0..5 {
            let pts = synth_cloud(ShapeKind::Sphere, &spec, seed);
            for p in pts {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - 1.0).abs() <= 3.0 * spec.sigma + 1e-12, "radius {r}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_stratified() {
        let spec = small_spec();
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.test.len(), 10);
        for c in 0..5u32 {
            assert_eq!(a.train.iter().filter(|s| s.label() == c).count(), 8);
            assert_eq!(a.test.iter().filter(|s| s.label() == c).count(), 2);
        }
        for s in a.train.iter().chain(&a.test) {
            let max = s
                .cloud
                .points
                .iter()
                .map(|p| p.iter().map(|v| v * v).sum::<f32>().sqrt())
                .fold(0.0, f32::max);
            assert!(max <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn xyz_text_parses() {
        let pts = parse_xyz("0 0 0\n1 0 0\n", "inline").unwrap();
        assert_eq!(pts, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let err = parse_xyz("0 0 0\n1 0\n", "inline").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn truncated_binary_names_byte_counts() {
        let bytes = encode_cloud(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let err = decode_cloud(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 27);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(decode_cloud(b"XXXX\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![[0.25, -1.5, 3.0], [1e-7, 2.5, -0.125]], None).unwrap();
        for name in ["c.xyz", "c.pmtp"] {
            let p = dir.path().join(name);
            save_cloud(&p, &cloud).unwrap();
            assert_eq!(load_cloud(&p).unwrap(), cloud);
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic(&SyntheticSpec {
            per_class: 5,
            ..small_spec()
        })
        .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
