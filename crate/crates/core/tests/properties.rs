use proptest::collection::vec;
use proptest::prelude::*;

use pmtmae::analysis::{pearson_r, CorrHistogram};
use pmtmae::data::{decode_cloud, encode_cloud, format_xyz, gen_synthetic, parse_xyz, ShapeKind, SyntheticSpec};
use pmtmae::distill::{decode_teacher_records, encode_teacher_records, logit_distill_loss, TeacherRecord};
use pmtmae::geometry::{chamfer_l2, fps_from, normalize, Point, PointCloud};
use pmtmae::model::{make_mask, mask_count, mask_from_teacher};
use pmtmae::ndcore::{cosine_lr, Graph, ParamStore, Schedule, Tensor};

fn point() -> impl Strategy<Value = Point<f64>> {
    [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64]
}

fn point32() -> impl Strategy<Value = Point<f32>> {
    [-1e3..1e3f32, -1e3..1e3f32, -1e3..1e3f32]
}

fn kd_loss(student: &[f64], teacher: &[f64], n: usize, t: f64) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let rows = student.len() / n;
    let s = g.input(Tensor::new(&[rows, n], student.to_vec()).unwrap());
    let l = logit_distill_loss(&mut g, s, &Tensor::new(&[rows, n], teacher.to_vec()).unwrap(), t).unwrap();
    g.value(l).item()
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_order_free(
        a in vec(point(), 1..20),
        b in vec(point(), 1..20),
        rot in 0usize..20,
    ) {
        let ab = chamfer_l2(&a, &b).unwrap();
        prop_assert!((ab - chamfer_l2(&b, &a).unwrap()).abs() < 1e-12);
        let mut shuffled = a.clone();
        shuffled.rotate_left(rot % a.len());
        shuffled.reverse();
        prop_assert!((ab - chamfer_l2(&shuffled, &b).unwrap()).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn softmax_ignores_row_shifts(z in vec(-5.0..5.0f64, 12), shift in -50.0..50.0f64) {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::new(&[3, 4], z.clone()).unwrap());
        let y = g.input(Tensor::new(&[3, 4], z.iter().map(|v| v + shift).collect()).unwrap());
        let (sx, sy) = (g.softmax(x), g.softmax(y));
        prop_assert!(g.value(sx).max_abs_diff(g.value(sy)) < 1e-12);
        for row in g.value(sx).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_distillation_ignores_row_shifts(
        zs in vec(-5.0..5.0f64, 10),
        zt in vec(-5.0..5.0f64, 10),
        shift_s in -20.0..20.0f64,
        shift_t in -20.0..20.0f64,
        t in 0.5..5.0f64,
    ) {
        let base = kd_loss(&zs, &zt, 5, t);
        let shifted_s: Vec<f64> = zs.iter().map(|v| v + shift_s).collect();
        let shifted_t: Vec<f64> = zt.iter().map(|v| v + shift_t).collect();
        prop_assert!((base - kd_loss(&shifted_s, &shifted_t, 5, t)).abs() < 1e-9);
        prop_assert!(base >= -1e-12);
        prop_assert!(kd_loss(&zt, &zt, 5, t).abs() < 1e-12);
    }

    #[test]
    fn masks_partition_the_tokens(k in 2usize..200, ratio in 0.01..0.99f64, seed: u64) {
        let n = mask_count(k, ratio);
        match make_mask(k, ratio, seed) {
            Ok(plan) => {
                prop_assert!(plan.is_partition());
                prop_assert_eq!(plan.masked.len(), n);
                prop_assert_eq!(plan.visible.len() + plan.masked.len(), k);
                prop_assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(&mask_from_teacher(&plan.to_flags()).unwrap().masked, &plan.masked);
                prop_assert_eq!(make_mask(k, ratio, seed).unwrap(), plan);
            }
            Err(_) => prop_assert!(n == 0 || n == k),
        }
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        x in vec(-3.0..3.0f64, 3..40),
        seed in any::<u64>(),
        scale in 0.1..10.0f64,
        offset in -10.0..10.0f64,
    ) {
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v.sin() + ((seed >> (i % 60)) & 1) as f64)
            .collect();
        let (Ok(r), Ok(r2)) = (pearson_r(&x, &y), pearson_r(&y, &x)) else {
            return Ok(());
        };
        prop_assert!((r - r2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
        let xa: Vec<f64> = x.iter().map(|v| scale * v + offset).collect();
        let xn: Vec<f64> = x.iter().map(|v| -scale * v + offset).collect();
        prop_assert!((pearson_r(&xa, &y).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson_r(&xn, &y).unwrap() + r).abs() < 1e-9);
    }

    #[test]
    fn rebinning_conserves_counts(rs in vec(-1.0..=1.0f64, 0..300), factor in 1usize..5) {
        let bins = 4 * factor * 3;
        let mut h = CorrHistogram::new(0, bins);
        for r in &rs {
            h.add(*r);
        }
        prop_assert_eq!(h.counts.iter().sum::<u64>(), rs.len() as u64);
        let merged = h.rebin(factor).unwrap();
        prop_assert_eq!(merged.counts.len(), bins / factor);
        prop_assert_eq!(merged.edges.len(), bins / factor + 1);
        prop_assert_eq!(merged.counts.iter().sum::<u64>(), h.total);
        prop_assert_eq!(merged.edges.first(), h.edges.first());
        prop_assert_eq!(merged.edges.last(), h.edges.last());
    }

    #[test]
    fn fps_picks_distinct_points(pts in vec(point(), 1..60), frac in 0.0..1.0f64, start in 0usize..60) {
        let m = ((pts.len() as f64 * frac) as usize).max(1);
        let idx = fps_from(&pts, m, start % pts.len()).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let distinct_points = {
            let mut p: Vec<_> = pts.iter().map(|q| q.map(f64::to_bits)).collect();
            p.sort_unstable();
            p.dedup();
            p.len()
        };
        if m <= distinct_points {
            prop_assert_eq!(sorted.len(), m);
        }
    }

    #[test]
    fn normalization_centers_and_scales(pts in vec(point(), 2..50)) {
        let Ok(c) = normalize(&PointCloud::new(pts, None).unwrap()) else {
            return Ok(());
        };
        for d in 0..3 {
            let mean = c.points.iter().map(|p| p[d]).sum::<f64>() / c.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        let radius = c.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        prop_assert!((radius - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cloud_codecs_are_inverse(pts in vec(point32(), 0..100)) {
        prop_assert_eq!(decode_cloud(&encode_cloud(&pts).unwrap()).unwrap(), pts.clone());
        prop_assert_eq!(parse_xyz(&format_xyz(&pts), "mem").unwrap(), pts);
    }

    #[test]
    fn teacher_records_are_inverse(
        k in 2usize..40,
        width in 1usize..6,
        classes in 0usize..4,
        seeds in vec(any::<u64>(), 1..5),
    ) {
        let records: Vec<TeacherRecord> = seeds
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| {
                let plan = make_mask(k, 0.5, s).ok()?;
                let kv = plan.visible.len();
                Some(TeacherRecord {
                    sample_id: i as u64,
                    mask_flags: plan.to_flags(),
                    features: Tensor::from_fn(&[kv, width], |j| (s as f32).mul_add(1e-20, j as f32)),
                    logits: (classes > 0).then(|| (0..classes).map(|c| c as f32 - 0.5).collect()),
                })
            })
            .collect();
        let bytes = encode_teacher_records(&records).unwrap();
        prop_assert_eq!(decode_teacher_records(&bytes).unwrap(), records);
    }

    #[test]
    fn cosine_schedule_decays_within_bounds(lr_max in 1e-5..1e-2f64, frac in 0.0..1.0f64, total in 1u32..200) {
        let s = Schedule { lr_max, lr_min: lr_max * frac, total_epochs: total };
        let lrs: Vec<f64> = (0..=total).map(|e| cosine_lr(e, &s).unwrap()).collect();
        prop_assert!((lrs[0] - lr_max).abs() < 1e-15);
        prop_assert!((lrs[total as usize] - s.lr_min).abs() < 1e-12);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        prop_assert!(cosine_lr(total + 1, &s).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_datasets_are_valid(seed: u64, per_class in 5usize..12, points in 32usize..200, classes in 1usize..=5) {
        let spec = SyntheticSpec {
            classes: ShapeKind::ALL[..classes].to_vec(),
            per_class,
            points,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = gen_synthetic(&spec).unwrap();
        prop_assert_eq!(ds.train.len() + ds.test.len(), classes * per_class);
        let mut ids: Vec<u64> = ds.train.iter().chain(&ds.test).map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), classes * per_class);
        for s in ds.train.iter().chain(&ds.test) {
            prop_assert_eq!(s.cloud.len(), points);
            prop_assert!((s.label() as usize) < classes);
            let radius = s.cloud.points.iter().map(|p| p.iter().map(|v| v * v).sum::<f32>().sqrt()).fold(0.0, f32::max);
            prop_assert!((radius - 1.0).abs() < 1e-4);
        }
        for label in 0..classes as u32 {
            prop_assert!(ds.test.iter().any(|s| s.label() == label));
        }
        prop_assert_eq!(gen_synthetic(&spec).unwrap(), ds);
    }
}
