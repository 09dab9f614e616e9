mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use common::{gradient_check, random_target};
use emopose::dataset::{batch_iter, split_train_val, subsample, BatchConfig, Manifest, ManifestMeta, SampleRecord, Split};
use emopose::emotion::{va_to_class, EmotionClass, VaThresholds};
use emopose::keypoint_io::{
    frame_to_json, parse_frame, select_person, to_feature_vector, FeatureVector, FrameKeypoints, FrameRef, Keypoint,
    NormalizationConfig, PersonKeypoints, FACE_POINTS, FEATURE_DIM, POSE_POINTS,
};
use emopose::metrics::{ccc, confusion_and_f1, cross_entropy, mse_loss};
use emopose::nn::{init_network, Checkpoint, DenseMatrix, Head, NetworkSpec, Topology};
use emopose::optim::{OneCycle, Plateau, PlateauMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn keypoint() -> impl Strategy<Value = Keypoint> {
    (100.0..1800.0f64, 100.0..1000.0f64, prop_oneof![Just(0.0), 0.05..1.0f64])
        .prop_map(|(x, y, c)| Keypoint::new(x, y, c))
}

/// A person with a detected neck and at least two distinct detected points.
fn person() -> impl Strategy<Value = PersonKeypoints> {
    (
        prop::collection::vec(keypoint(), POSE_POINTS),
        prop::collection::vec(keypoint(), FACE_POINTS),
    )
        .prop_map(|(mut pose, face)| {
            pose[1] = Keypoint::new(960.0, 400.0, 0.9);
            pose[0] = Keypoint::new(900.0, 200.0, 0.9);
            PersonKeypoints { pose, face }
        })
}

fn map_coords(p: &PersonKeypoints, f: impl Fn(f64, f64) -> (f64, f64)) -> PersonKeypoints {
    let m = |k: &Keypoint| {
        let (x, y) = f(k.x, k.y);
        Keypoint::new(x, y, k.c)
    };
    PersonKeypoints {
        pose: p.pose.iter().map(m).collect(),
        face: p.face.iter().map(m).collect(),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn record(video: &str, idx: u64, expr: usize) -> SampleRecord {
    SampleRecord {
        frame_path: PathBuf::from(format!("{video}/{idx}.json")),
        video_id: video.to_string(),
        frame_index: idx,
        expr_label: Some(expr),
        va_label: None,
        split: Split::Train,
    }
}

/// Videos with arbitrary (possibly gapped) frame indices.
fn manifest() -> impl Strategy<Value = Manifest> {
    prop::collection::btree_map(
        "[a-z]{1,6}",
        prop::collection::btree_set(0u64..500, 1..40),
        1..8,
    )
    .prop_map(|videos| {
        let records = videos
            .iter()
            .flat_map(|(v, idxs)| idxs.iter().map(move |&i| record(v, i, (i % 7) as usize)))
            .collect();
        Manifest::new(records, ManifestMeta::default()).unwrap()
    })
}

fn vec_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn features_are_translation_invariant(p in person(), dx in -500.0..500.0f64, dy in -500.0..500.0f64) {
        let cfg = NormalizationConfig::default();
        let a = to_feature_vector(&p, &cfg);
        let b = to_feature_vector(&map_coords(&p, |x, y| (x + dx, y + dy)), &cfg);
        prop_assert!(max_abs_diff(&a.values, &b.values) < 1e-9);
        prop_assert_eq!(a.validity, b.validity);
    }

    #[test]
    fn features_are_scale_invariant(p in person(), s in 0.25..4.0f64) {
        let cfg = NormalizationConfig::default();
        let a = to_feature_vector(&p, &cfg);
        let b = to_feature_vector(&map_coords(&p, |x, y| (x * s, y * s)), &cfg);
        prop_assert!(max_abs_diff(&a.values, &b.values) < 1e-9);
    }

    #[test]
    fn feature_vectors_have_fixed_layout(p in person(), include in any::<bool>()) {
        let cfg = NormalizationConfig { include_confidence: include, ..Default::default() };
        let fv = to_feature_vector(&p, &cfg);
        prop_assert_eq!(fv.values.len(), FEATURE_DIM);
        prop_assert!(fv.values.iter().all(|v| v.is_finite()));
        prop_assert!((0.0..=1.0).contains(&fv.validity));
        // anchor sits at the origin
        prop_assert_eq!(&fv.values[3..5], &[0.0, 0.0]);
        for (k, chunk) in p.iter().zip(fv.values.chunks(3)) {
            if !k.detected() {
                prop_assert_eq!(chunk, &[0.0, 0.0, 0.0]);
            } else if !include {
                prop_assert_eq!(chunk[2], 0.0);
            }
        }
    }

    #[test]
    fn parse_round_trip(persons in prop::collection::vec(person(), 0..4)) {
        let frame = FrameKeypoints { persons, source: FrameRef::new("v", 3) };
        let text = serde_json::to_vec(&frame_to_json(&frame)).unwrap();
        let back = parse_frame(&text, FrameRef::new("v", 3)).unwrap();
        prop_assert_eq!(back.persons.len(), frame.persons.len());
        for (a, b) in frame.persons.iter().zip(&back.persons) {
            for (ka, kb) in a.iter().zip(b.iter()) {
                prop_assert!((ka.x - kb.x).abs() <= 1e-12 * ka.x.abs());
                prop_assert!((ka.y - kb.y).abs() <= 1e-12 * ka.y.abs());
                prop_assert!((ka.c - kb.c).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn selected_person_has_max_confidence(persons in prop::collection::vec(person(), 1..5)) {
        let frame = FrameKeypoints { persons, source: FrameRef::default() };
        let chosen = select_person(&frame).unwrap();
        let best = frame.persons.iter().map(|p| p.confidence_sum()).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(chosen.confidence_sum(), best);
        let first = frame.persons.iter().position(|p| p.confidence_sum() == best).unwrap();
        prop_assert!(std::ptr::eq(chosen, &frame.persons[first]));
    }

    #[test]
    fn subsample_composes(m in manifest(), a in 1usize..6, b in 1usize..6) {
        let twice = subsample(&subsample(&m, a).unwrap(), b).unwrap();
        let once = subsample(&m, a * b).unwrap();
        prop_assert_eq!(twice.records(), once.records());
        prop_assert_eq!(twice.meta.stride, a * b);
        for v in m.video_ids() {
            let n = m.records().iter().filter(|r| r.video_id == v).count();
            let k = once.records().iter().filter(|r| r.video_id == v).count();
            prop_assert_eq!(k, n.div_ceil(a * b));
        }
    }

    #[test]
    fn splits_are_video_disjoint_and_deterministic(m in manifest(), frac in 0.05..0.95f64, seed in any::<u64>()) {
        prop_assume!(m.video_ids().len() >= 2);
        let s = split_train_val(&m, frac, seed).unwrap();
        prop_assert_eq!(&s, &split_train_val(&m, frac, seed).unwrap());
        let mut by_video: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for r in s.records() {
            by_video.entry(&r.video_id).or_default().insert(r.split);
        }
        prop_assert!(by_video.values().all(|s| s.len() == 1));
        let val_videos = by_video.values().filter(|s| s.contains(&Split::Val)).count();
        let n = by_video.len();
        prop_assert_eq!(val_videos, ((frac * n as f64).round() as usize).clamp(1, n - 1));
        prop_assert_eq!(s.len(), m.len());
    }

    #[test]
    fn manifest_text_round_trip(m in manifest(), frac in 0.1..0.9f64, seed in any::<u64>()) {
        prop_assume!(m.video_ids().len() >= 2);
        let s = split_train_val(&m, frac, seed).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        prop_assert_eq!(Manifest::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), s);
    }

    #[test]
    fn batches_account_for_every_record(
        m in manifest(),
        batch_size in 1usize..20,
        seed in any::<u64>(),
        epoch in 0u64..5,
        min_validity in 0.0..1.0f64,
    ) {
        let records = m.records();
        let validity = |p: &Path| (p.to_string_lossy().len() % 10) as f64 / 9.0;
        let cfg = BatchConfig { batch_size, shuffle_seed: Some(seed), min_validity };
        let mut iter = batch_iter(records, &cfg, epoch, |p: &Path| {
            if p.to_string_lossy().ends_with("7.json") {
                Err("unreadable")
            } else {
                Ok(FeatureVector { values: vec![1.0; 4], validity: validity(p) })
            }
        })
        .unwrap();
        let mut seen = BTreeSet::new();
        let mut sizes = Vec::new();
        for b in iter.by_ref() {
            prop_assert_eq!(b.inputs.rows(), b.len());
            sizes.push(b.len());
            for &i in &b.indices {
                prop_assert!(seen.insert(i));
                prop_assert!(validity(&records[i].frame_path) >= min_validity);
            }
        }
        let stats = iter.stats();
        prop_assert_eq!(stats.yielded + stats.low_validity + stats.load_errors, records.len());
        prop_assert_eq!(stats.yielded, seen.len());
        if let Some((_, full)) = sizes.split_last() {
            prop_assert!(full.iter().all(|&s| s == batch_size));
        }
    }

    #[test]
    fn ccc_properties((x, y) in vec_pair(60), a in 0.1..3.0f64, b in -2.0..2.0f64) {
        let c = ccc(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - ccc(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ccc(&x, &x).unwrap(), 1.0);
        // concordance never exceeds the magnitude of the Pearson correlation
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let sxx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
        let pearson = sxy / (sxx * syy).sqrt();
        prop_assert!(c.abs() <= pearson.abs() + 1e-12);
        // any affine map other than the identity loses agreement
        let z: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!(ccc(&x, &z).unwrap() <= 1.0);
    }

    #[test]
    fn cross_entropy_is_shift_invariant(
        logits in prop::collection::vec(-20.0..20.0f64, 7 * 5),
        targets in prop::collection::vec(0usize..7, 5),
        shift in -100.0..100.0f64,
    ) {
        let l = DenseMatrix::from_vec(5, 7, logits).unwrap();
        let (loss, grad) = cross_entropy(&l, &targets).unwrap();
        let (shifted, grad2) = cross_entropy(&l.map(|v| v + shift), &targets).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - shifted).abs() < 1e-9);
        prop_assert!(max_abs_diff(grad.data(), grad2.data()) < 1e-12);
        for r in 0..5 {
            prop_assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn mse_is_nonnegative_and_zero_on_match(v in prop::collection::vec(-1.0..1.0f64, 2..40)) {
        let rows = v.len() / 2;
        prop_assume!(rows > 0);
        let p = DenseMatrix::from_vec(rows, 2, v[..rows * 2].to_vec()).unwrap();
        let t = p.map(|x| -x);
        prop_assert!(mse_loss(&p, &t).unwrap().0 >= 0.0);
        prop_assert_eq!(mse_loss(&p, &p).unwrap().0, 0.0);
    }

    #[test]
    fn confusion_counts_and_f1_bounds(pairs in prop::collection::vec((0usize..7, 0usize..7), 1..200)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion_and_f1(&truth, &pred).unwrap();
        prop_assert_eq!(m.confusion.total(), truth.len() as u64);
        prop_assert!((0.0..=1.0).contains(&m.macro_f1));
        let perfect = confusion_and_f1(&truth, &truth).unwrap();
        let present = truth.iter().collect::<BTreeSet<_>>().len();
        prop_assert!((perfect.macro_f1 - present as f64 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn va_mapping_picks_the_nearest_prototype(v in -1.0..1.0f64, a in -1.0..1.0f64) {
        let t = VaThresholds::default();
        let class = va_to_class(v, a, &t).unwrap();
        if v.hypot(a) < t.neutral_radius {
            prop_assert_eq!(class, EmotionClass::Neutral);
        } else {
            let d = |c: EmotionClass| {
                let (pv, pa) = t.prototypes[c.code()];
                (v - pv).hypot(a - pa)
            };
            prop_assert!(EmotionClass::ALL.iter().all(|&c| d(class) <= d(c)));
        }
    }

    #[test]
    fn onecycle_stays_within_bounds(max_lr in 1e-4..1.0f64, total in 1usize..500, pct in 0.05..0.95f64) {
        let c = OneCycle { pct_start: pct, ..OneCycle::new(max_lr, total) };
        for s in 0..total {
            let lr = c.lr_at(s).unwrap();
            prop_assert!(lr > 0.0 && lr <= max_lr * (1.0 + 1e-12));
            prop_assert!(lr >= c.final_lr().min(c.initial_lr()) * (1.0 - 1e-12));
        }
        prop_assert!(c.lr_at(total).is_err());
    }

    #[test]
    fn plateau_lr_is_non_increasing(metrics in prop::collection::vec(-10.0..10.0f64, 1..100), patience in 0usize..5, max in any::<bool>()) {
        let mode = if max { PlateauMode::Max } else { PlateauMode::Min };
        let mut p = Plateau::new(0.1, mode);
        p.patience = patience;
        let mut last = p.lr;
        for m in metrics {
            let lr = p.step(m);
            prop_assert!(lr <= last && lr > 0.0);
            last = lr;
        }
    }
}

fn topology() -> impl Strategy<Value = Topology> {
    prop_oneof![Just(Topology::Plain), Just(Topology::Residual), Just(Topology::DenseConcat)]
}

fn head() -> impl Strategy<Value = Head> {
    prop_oneof![Just(Head::Classifier7), Just(Head::Va2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_finite_differences(
        t in topology(),
        h in head(),
        input in 2usize..10,
        hidden in prop::collection::vec(1usize..10, 0..4),
        seed in any::<u64>(),
    ) {
        let spec = NetworkSpec::new(input, t, hidden, h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = common::random_network(&spec, &mut rng);
        let x = DenseMatrix::from_vec(6, input, (0..6 * input).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let target = random_target(h, 6, &mut rng);
        let r = gradient_check(&params, &spec, &x, &target, 1e-5, 1e-4);
        prop_assert!(r.checked > 0);
        prop_assert!(r.max_rel_error < 1e-5, "relative error {}", r.max_rel_error);
    }

    #[test]
    fn checkpoints_round_trip(t in topology(), h in head(), input in 1usize..20, hidden in prop::collection::vec(1usize..12, 0..4), seed in any::<u64>()) {
        let spec = NetworkSpec::new(input, t, hidden, h);
        let mut ck = Checkpoint::new(spec.clone(), init_network(&spec, seed).unwrap());
        ck.metadata.push(("task".into(), "classify".into()));
        let bytes = ck.to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
