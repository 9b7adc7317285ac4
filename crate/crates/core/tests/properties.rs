use std::collections::BTreeMap;

use neoc_core::corpus::{
    curate, decode_ppm, encode_ppm, mask_region, resize_bilinear, split_by_boxes, stratified_split, BoxAnnotation,
    CorpusManifest, CurationRules, Depiction, ImageRecord, Layered, MemorySource, Sample, SplitParams,
};
use neoc_core::detect::{nms, propose_regions, Detection, NmsParams};
use neoc_core::eval::{confusion_matrix, evaluate_predictions, overall_accuracy, ConfusionMatrix, Metrics, Prediction};
use neoc_core::geometry::{iou, Rect};
use neoc_core::model::{argmax, ArchitectureConfig, BlockSpec, Model};
use neoc_core::taxonomy::{normalize_name, AliasTable, ClassId, Taxonomy};
use neoc_core::tensor::{conv2d, maxpool2, softmax, softmax_cross_entropy, Tensor};
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn image_strategy(max_side: usize) -> impl Strategy<Value = ImageRecord> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), 3 * w * h).prop_map(move |px| ImageRecord::new(w, h, px).unwrap())
    })
}

fn rect_in(w: usize, h: usize) -> impl Strategy<Value = Rect> {
    (0..w, 0..h).prop_flat_map(move |(x, y)| (Just(x), Just(y), 0..=w - x, 0..=h - y))
        .prop_map(|(x, y, rw, rh)| Rect::new(x, y, rw, rh))
}

fn nonempty_rect() -> impl Strategy<Value = Rect> {
    (0usize..40, 0usize..40, 1usize..30, 1usize..30).prop_map(|(x, y, w, h)| Rect::new(x, y, w, h))
}

fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        input_size: (3, 8, 8),
        blocks: vec![BlockSpec {
            conv_count: 1,
            out_channels: 3,
        }],
        head: vec![6],
        num_classes: 4,
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn identity_kernel_conv_is_identity(values in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4 * 5)) {
        let x = Tensor::<f64>::from_f64(vec![2, 3, 4, 5], &values).unwrap();
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let kernels = Tensor::<f64>::from_f64(vec![3, 3, 1, 1], &k).unwrap();
        let bias = Tensor::<f64>::zeros(&[3]);
        let y = conv2d(&x, &kernels, &bias, 1, 0).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn softmax_rows_are_distributions(values in proptest::collection::vec(-30.0f64..30.0, 12), t in proptest::collection::vec(0usize..4, 3)) {
        let logits = Tensor::<f64>::from_f64(vec![3, 4], &values).unwrap();
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (loss, _) = softmax_cross_entropy(&logits, &t).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn maxpool_stays_within_input_range(values in proptest::collection::vec(-100.0f64..100.0, 2 * 6 * 4)) {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 6, 4], &values).unwrap();
        let y = maxpool2(&x).unwrap().output;
        prop_assert!(y.max_value() <= x.max_value());
        prop_assert!(y.min_value() >= x.min_value());
        prop_assert_eq!(maxpool2(&x).unwrap().output, y);
    }

    #[test]
    fn argmax_ignores_positive_rescaling(row in proptest::collection::vec(-4i32..4, 1..8), scale in 0.01f64..100.0) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
        prop_assert_eq!(argmax(&row), argmax(&scaled));
    }

    #[test]
    fn ppm_round_trip(img in image_strategy(12)) {
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn resize_keeps_constant_colours(c in any::<[u8; 3]>(), w in 1usize..10, h in 1usize..10, ow in 1usize..16, oh in 1usize..16) {
        let out = resize_bilinear(&ImageRecord::filled(w, h, c), ow, oh);
        prop_assert_eq!(out, ImageRecord::filled(ow, oh, c));
    }

    #[test]
    fn mask_changes_only_the_rect((img, rect) in image_strategy(10).prop_flat_map(|img| {
        let (w, h) = (img.width(), img.height());
        (Just(img), rect_in(w, h))
    }), fill in any::<[u8; 3]>()) {
        let masked = mask_region(&img, &rect, fill).unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let inside = x >= rect.x && x < rect.right() && y >= rect.y && y < rect.bottom();
                let expected = if inside { fill } else { img.get(x, y) };
                prop_assert_eq!(masked.get(x, y), expected);
            }
        }
    }

    #[test]
    fn split_by_boxes_masks_exactly_the_overlaps(
        (img, boxes) in image_strategy(12).prop_flat_map(|img| {
            let (w, h) = (img.width(), img.height());
            let nonempty = rect_in(w, h).prop_filter("non-empty", |r| !r.is_empty());
            (Just(img), proptest::collection::vec(nonempty, 1..4))
        })
    ) {
        let fill = [1, 2, 3];
        let sample = Sample {
            path: "scene.ppm".into(),
            class: ClassId::new("a"),
            artifact_id: "s".into(),
            depiction: Depiction::Interior,
            boxes: boxes.iter().map(|r| BoxAnnotation::from_rect(*r, ClassId::new("a"))).collect(),
        };
        let parts = split_by_boxes(&sample, &img, fill).unwrap();
        prop_assert_eq!(parts.len(), boxes.len());
        for (i, (s, crop)) in parts.iter().enumerate() {
            let b = boxes[i];
            prop_assert_eq!(s.depiction, Depiction::Whole);
            prop_assert_eq!((crop.width(), crop.height()), (b.w, b.h));
            for y in 0..b.h {
                for x in 0..b.w {
                    let (gx, gy) = (b.x + x, b.y + y);
                    let covered = boxes.iter().enumerate().any(|(j, o)| {
                        j != i && gx >= o.x && gx < o.right() && gy >= o.y && gy < o.bottom()
                    });
                    let expected = if covered { fill } else { img.get(gx, gy) };
                    prop_assert_eq!(crop.get(x, y), expected);
                }
            }
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in nonempty_rect(), b in nonempty_rect()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_keeps_a_separated_subset(
        dets in proptest::collection::vec((nonempty_rect(), 0.0f64..1.0, 0usize..3), 0..25),
        threshold in 0.1f64..0.9,
    ) {
        let input: Vec<Detection> = dets
            .iter()
            .enumerate()
            .map(|(i, (r, s, c))| Detection { region: *r, class: ClassId::new(&format!("c{c}")), score: *s, proposal: i })
            .collect();
        let params = NmsParams { iou_threshold: threshold, score_threshold: 0.2, per_class: false };
        let kept = nms(&input, &params).unwrap();
        for k in &kept {
            prop_assert!(input.contains(k));
            prop_assert!(k.score >= 0.2);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.region, &b.region) <= threshold);
            }
        }
    }

    #[test]
    fn proposals_stay_in_bounds(w in 1usize..80, h in 1usize..80, scales in proptest::collection::vec(1usize..90, 1..3), frac in 0.05f64..1.0) {
        let regions = propose_regions(w, h, &scales, frac).unwrap();
        prop_assert!(!regions.is_empty());
        prop_assert!(regions.iter().all(|r| r.fits_in(w, h) && !r.is_empty()));
    }

    #[test]
    fn alias_matching_is_normalization_stable(title in "[a-zA-Z ]{0,20}") {
        let table = AliasTable::new([("Wellington chest", "wellington_chest"), ("chest", "chest_of_drawers")]);
        let upper = table.apply(&title.to_uppercase()).unwrap();
        prop_assert_eq!(table.apply(&title).unwrap(), upper);
        prop_assert_eq!(normalize_name(&normalize_name(&title)), normalize_name(&title));
    }
}

fn random_counts(k: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    proptest::collection::vec(proptest::collection::vec(0u64..6, k), k)
}

fn class_ids(k: usize) -> Vec<ClassId> {
    (0..k).map(|i| ClassId::new(&format!("k{i}"))).collect()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn metrics_are_order_independent(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40), seed in any::<u64>()) {
        let classes = class_ids(4);
        let preds: Vec<Prediction> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| Prediction { path: i.to_string(), truth: classes[t].clone(), predicted: classes[p].clone(), probability: 0.5 })
            .collect();
        let mut shuffled = preds.clone();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = evaluate_predictions(&preds, &classes, &[], None, None).unwrap();
        let b = evaluate_predictions(&shuffled, &classes, &[], None, None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn excluding_a_class_leaves_others_alone(counts in random_counts(4), drop in 0usize..4) {
        let classes = class_ids(4);
        prop_assume!((0..4).any(|c| c != drop && counts[c].iter().sum::<u64>() > 0));
        let cm = ConfusionMatrix::from_counts(classes.clone(), counts).unwrap();
        let full = Metrics::from_confusion(cm.clone(), &[]);
        let partial = Metrics::from_confusion(cm.clone(), &[classes[drop].clone()]).unwrap();
        if let Ok(full) = full {
            for (a, b) in full.per_class.iter().zip(&partial.per_class) {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert!(partial.excluded_classes.iter().any(|e| e.class == classes[drop]));
        for v in [partial.mean_class_accuracy, partial.macro_f1, partial.weighted_f1, partial.overall_accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(overall_accuracy(&cm), if cm.total() == 0 { 0.0 } else { cm.trace() as f64 / cm.total() as f64 });
    }
}

fn manifest_strategy() -> impl Strategy<Value = CorpusManifest> {
    proptest::collection::vec((0usize..5, 0usize..6), 1..60).prop_map(|rows| {
        let samples = rows
            .into_iter()
            .enumerate()
            .map(|(i, (class, artifact))| Sample {
                path: format!("img_{i}.ppm"),
                class: ClassId::new(&format!("c{class}")),
                artifact_id: format!("c{class}-a{artifact}"),
                depiction: Depiction::Whole,
                boxes: Vec::new(),
            })
            .collect();
        CorpusManifest::new(samples)
    })
}

proptest! {
    #![proptest_config(config(96))]

    #[test]
    fn split_partitions_the_manifest(m in manifest_strategy(), seed in any::<u64>(), grouped in any::<bool>(), ratio in 0.05f64..0.95) {
        let params = SplitParams { test_ratio: ratio, seed, group_by_artifact: grouped };
        let out = stratified_split(&m, &params).unwrap();
        let mut seen: Vec<&str> = out.train.samples.iter().chain(&out.test.samples).map(|s| s.path.as_str()).collect();
        seen.sort_unstable();
        let mut all: Vec<&str> = m.samples.iter().map(|s| s.path.as_str()).collect();
        all.sort_unstable();
        prop_assert_eq!(seen, all);

        let mut combined: BTreeMap<ClassId, usize> = out.train.histogram();
        for (c, n) in out.test.histogram() {
            *combined.entry(c).or_default() += n;
        }
        prop_assert_eq!(combined, m.histogram());

        for (class, n) in m.histogram() {
            let test = out.test.histogram().get(&class).copied().unwrap_or(0);
            let train = out.train.histogram().get(&class).copied().unwrap_or(0);
            if out.non_computable.contains(&class) {
                prop_assert!(test == 0 || train == 0);
            } else {
                prop_assert!(test >= 1 && train >= 1, "{class}: {train}/{test} of {n}");
            }
            if n == 1 {
                prop_assert!(out.non_computable.contains(&class));
                prop_assert_eq!(train, 1);
            }
        }
        if grouped {
            let train_ids: std::collections::HashSet<&str> = out.train.samples.iter().map(|s| s.artifact_id.as_str()).collect();
            prop_assert!(out.test.samples.iter().all(|s| !train_ids.contains(s.artifact_id.as_str())));
        }
        let again = stratified_split(&m, &params).unwrap();
        prop_assert_eq!(again.train, out.train);
    }

    #[test]
    fn curation_is_idempotent(depictions in proptest::collection::vec(0usize..4, 1..12), boxed in proptest::collection::vec(any::<bool>(), 12)) {
        let mut source = MemorySource::new();
        let kinds = [Depiction::Whole, Depiction::Partial, Depiction::Closeup, Depiction::Interior];
        let samples: Vec<Sample> = depictions
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let path = format!("s{i}.ppm");
                source.insert(path.clone(), ImageRecord::filled(8, 8, [i as u8, 0, 0]));
                let boxes = if boxed[i] {
                    vec![
                        BoxAnnotation::from_rect(Rect::new(0, 0, 5, 5), ClassId::new("a")),
                        BoxAnnotation::from_rect(Rect::new(3, 3, 5, 5), ClassId::new("b")),
                    ]
                } else {
                    Vec::new()
                };
                Sample { path, class: ClassId::new("a"), artifact_id: format!("art{i}"), depiction: kinds[d], boxes }
            })
            .collect();
        let manifest = CorpusManifest::new(samples);
        let rules = CurationRules::default();
        let once = curate(&manifest, &rules, &source).unwrap();
        let derived: MemorySource = once.derived_images.iter().cloned().collect();
        let layered = Layered { first: &derived, second: &source };
        let twice = curate(&once.kept, &rules, &layered).unwrap();
        prop_assert_eq!(&twice.kept, &once.kept);
        prop_assert!(twice.excluded.is_empty());
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn forward_rows_are_distributions(seed in any::<u64>(), pixels in proptest::collection::vec(-2.0f32..2.0, 2 * 3 * 8 * 8)) {
        let model = Model::<f32>::build(tiny_arch(), seed).unwrap();
        let x = Tensor::new(vec![2, 3, 8, 8], pixels).unwrap();
        let p = model.forward(&x).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        prop_assert_eq!(model.forward(&x).unwrap(), p);
    }

    #[test]
    fn reinit_head_keeps_the_body(seed in any::<u64>(), k in 2usize..7) {
        let model = Model::<f32>::build(tiny_arch(), seed).unwrap();
        let mut other = model.clone();
        other.reinit_head(k, seed ^ 1).unwrap();
        let n = model.params().len();
        for (a, b) in model.params()[..n - 2].iter().zip(&other.params()[..n - 2]) {
            prop_assert_eq!(&a.value, &b.value);
        }
        prop_assert_eq!(other.num_classes(), k);
    }

    #[test]
    fn checkpoint_round_trip_keeps_predictions(seed in any::<u64>(), pixels in proptest::collection::vec(-2.0f32..2.0, 3 * 8 * 8)) {
        let mut model = Model::<f32>::build(tiny_arch(), seed).unwrap();
        model.class_names = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let back = Model::<f32>::from_checkpoint_bytes(&model.to_checkpoint_bytes().unwrap()).unwrap();
        let x = Tensor::new(vec![1, 3, 8, 8], pixels).unwrap();
        prop_assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    }
}

#[test]
fn rollup_is_idempotent_and_chains_are_parent_links() {
    let mut t = Taxonomy::new();
    let seating = t.add_class("Seating", None).unwrap();
    let chair = t.add_class("Chair", Some(&seating)).unwrap();
    let klismos = t.add_class("Klismos", Some(&chair)).unwrap();
    let chest = t.add_class("Chest of drawers", None).unwrap();
    let sem = t.add_class("Semainier", Some(&chest)).unwrap();
    for c in [&seating, &chair, &klismos, &chest, &sem] {
        for d in 0..4 {
            let once = t.rollup(c, d).unwrap();
            assert_eq!(t.rollup(&once, d).unwrap(), once);
        }
        let chain = t.ancestors(c).unwrap();
        for pair in chain.windows(2) {
            assert_eq!(t.parent(&pair[1]).unwrap().as_ref(), Some(&pair[0]));
        }
        if let Some(last) = chain.last() {
            assert_eq!(t.parent(c).unwrap().as_ref(), Some(last));
        }
    }
}

#[test]
fn brute_force_agrees_on_a_fixed_matrix() {
    let classes = class_ids(3);
    let t: Vec<ClassId> = [0, 0, 1, 2, 2, 2].iter().map(|&i| classes[i].clone()).collect();
    let p: Vec<ClassId> = [0, 1, 1, 2, 0, 2].iter().map(|&i| classes[i].clone()).collect();
    let cm = confusion_matrix(&t, &p, &classes).unwrap();
    let m = Metrics::from_confusion(cm, &[]).unwrap();
    assert!((m.mean_class_accuracy - (0.5 + 1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    assert_eq!(m.overall_accuracy, 4.0 / 6.0);
}
