mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsrmcl_core::boxes::{inner_iou, inner_wiou_loss, iou, wiou_loss, BBox};
use tsrmcl_core::contrastive::{argmax, classify, Temperature};
use tsrmcl_core::dataset::{catalogue221, generate_description};
use tsrmcl_core::encoders::{encode_text, EncoderParams, TextEncoderConfig, ViTConfig};
use tsrmcl_core::tensor::Tensor;
use tsrmcl_core::tokenizer::{
    build_vocab, detokenize, normalize, parse_semantic_tuple, tokenize, KnowledgeBase, PAD, UNK,
};
use tsrmcl_core::vision::{info_loss, info_loss_for, spd_inverse, spd_rearrange, Downsample, FeatureMap};

use common::{fuzz_description, protected_splits, random_int_box, raster_iou, to_bbox};

fn feature_map() -> impl Strategy<Value = (FeatureMap, usize)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(s, hb, wb, c)| {
        let (h, w) = (s * hb, s * wb);
        prop::collection::vec(-10.0f64..10.0, h * w * c)
            .prop_map(move |data| (FeatureMap::new(Tensor::new(vec![h, w, c], data).unwrap()).unwrap(), s))
    })
}

fn int_box() -> impl Strategy<Value = [i64; 4]> {
    (0i64..30, 0i64..30, 1i64..20, 1i64..20).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn corpus() -> Vec<String> {
    let kb = KnowledgeBase::builtin();
    catalogue221().iter().map(|c| generate_description(c, kb)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn spd_round_trip_is_exact((x, s) in feature_map()) {
        let y = spd_rearrange(&x, s).unwrap();
        prop_assert_eq!(y.channels(), x.channels() * s * s);
        prop_assert_eq!(spd_inverse(&y, s).unwrap(), x.clone());
        prop_assert_eq!(info_loss_for(&x, s, Downsample::SpaceToDepth).unwrap(), 0.0);
        prop_assert_eq!(info_loss(&x, 1).unwrap(), 0.0);
    }

    #[test]
    fn strided_path_loses_information_on_generic_input(
        data in prop::collection::vec(0.5f64..2.0, 4 * 4 * 2),
    ) {
        let x = FeatureMap::new(Tensor::new(vec![4, 4, 2], data).unwrap()).unwrap();
        prop_assert!(info_loss(&x, 2).unwrap() > 0.0);
    }

    #[test]
    fn iou_family_symmetry_and_translation(a in int_box(), b in int_box(), dx in -50i64..50, dy in -50i64..50, r in 0.05f64..1.0) {
        let (ba, bb) = (to_bbox(a), to_bbox(b));
        prop_assert_eq!(iou(&ba, &bb).unwrap(), iou(&bb, &ba).unwrap());
        prop_assert_eq!(inner_iou(&ba, &bb, r).unwrap(), inner_iou(&bb, &ba, r).unwrap());
        let (ta, tb) = (ba.translate(dx as f64, dy as f64), bb.translate(dx as f64, dy as f64));
        prop_assert!((iou(&ta, &tb).unwrap() - iou(&ba, &bb).unwrap()).abs() <= 1e-12);
        prop_assert!((inner_iou(&ta, &tb, r).unwrap() - inner_iou(&ba, &bb, r).unwrap()).abs() <= 1e-12);
        prop_assert!((wiou_loss(&ta, &tb, 1.0).unwrap() - wiou_loss(&ba, &bb, 1.0).unwrap()).abs() <= 1e-12);
        prop_assert!(
            (inner_wiou_loss(&ta, &tb, r, 1.0).unwrap() - inner_wiou_loss(&ba, &bb, r, 1.0).unwrap()).abs() <= 1e-12
        );
        prop_assert_eq!(inner_wiou_loss(&ba, &bb, 1.0, 1.0).unwrap(), wiou_loss(&ba, &bb, 1.0).unwrap());
        prop_assert_eq!(inner_wiou_loss(&ba, &ba, r, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn tuple_ignores_phrase_order(
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        shape in prop::sample::select(vec!["circular", "triangular", "rectangular", "octagonal"]),
        color in prop::sample::select(vec!["red", "blue", "yellow", "white"]),
        phrase in prop::sample::select(vec!["speed limit", "height limit", "weight limit", "no parking"]),
        number in 1u32..150,
    ) {
        let kb = KnowledgeBase::builtin();
        let parts = [
            format!("a {shape} sign"),
            format!("{color} background"),
            format!("{phrase} {number}"),
            "for all vehicles".to_string(),
        ];
        let base = parse_semantic_tuple(&parts.join(" "), kb);
        let shuffled: Vec<&str> = perm.iter().map(|&i| parts[i].as_str()).collect();
        prop_assert_eq!(parse_semantic_tuple(&shuffled.join(" "), kb), base);
    }

    #[test]
    fn argmax_ignores_temperature_scale(
        raw in prop::collection::vec(-1.0f64..1.0, 8 * 5),
        query in prop::collection::vec(-1.0f64..1.0, 8),
        tau in 0.1f64..50.0,
        c in 0.1f64..10.0,
    ) {
        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let texts: Vec<f64> = raw.chunks(8).flat_map(unit).collect();
        let texts = Tensor::matrix(5, 8, texts).unwrap();
        let fv = Tensor::vector(unit(&query)).unwrap();
        let p = classify(&fv, &texts, Temperature::from_tau(tau).unwrap()).unwrap();
        let q = classify(&fv, &texts, Temperature::from_tau(tau * c).unwrap()).unwrap();
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(argmax(&p), argmax(&q));
    }
}

#[test]
fn iou_matches_raster_oracle_on_random_integer_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (a, b) = (random_int_box(&mut rng, 40), random_int_box(&mut rng, 40));
        let got = iou(&to_bbox(a), &to_bbox(b)).unwrap();
        assert!((got - raster_iou(a, b)).abs() <= 1e-9, "{a:?} {b:?}");
    }
}

#[test]
fn spd_dropped_phase_hand_case() {
    let x = FeatureMap::new(Tensor::new(vec![2, 2, 1], vec![0.0, 5.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(info_loss(&x, 2).unwrap(), 5.0);
}

#[test]
fn no_protected_span_is_ever_split() {
    let c = corpus();
    let vocab = build_vocab(&c, 512).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut splits = 0;
    for _ in 0..10_000 {
        let t = fuzz_description(&mut rng);
        splits += protected_splits(&tokenize(&t, &vocab));
    }
    assert_eq!(splits, 0);
}

#[test]
fn generated_corpus_round_trips_without_unknowns() {
    let c = corpus();
    let vocab = build_vocab(&c, 512).unwrap();
    for t in &c {
        let seq = tokenize(t, &vocab);
        assert_eq!(detokenize(&seq, &vocab), normalize(t));
        assert!(!seq.ids.contains(&UNK), "{t}");
    }
    let seq = tokenize("speed limit 40 km/h", &vocab);
    let forty: Vec<&str> = seq.offsets.iter().map(|&(s, e)| &seq.text[s..e]).filter(|w| w.contains('4')).collect();
    assert_eq!(forty, ["40"]);
}

#[test]
fn vocab_files_are_byte_identical_across_builds() {
    let c = corpus();
    assert_eq!(build_vocab(&c, 400).unwrap().to_json(), build_vocab(&c, 400).unwrap().to_json());
}

#[test]
fn trailing_padding_leaves_text_features_unchanged() {
    let params = EncoderParams::init(ViTConfig::default(), TextEncoderConfig::new(40), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for len in 1..8 {
        use rand::Rng;
        let mut ids = vec![tsrmcl_core::tokenizer::CLS];
        ids.extend((0..len).map(|_| rng.gen_range(5..40u32)));
        ids.push(tsrmcl_core::tokenizer::SEP);
        let base = encode_text(&common::raw_sequence(ids.clone()), &params).unwrap();
        ids.extend([PAD; 5]);
        let padded = encode_text(&common::raw_sequence(ids), &params).unwrap();
        assert!(base.max_abs_diff(&padded) <= 1e-12);
    }
}

#[test]
fn encoders_are_deterministic_and_unit_norm() {
    let cfg = TextEncoderConfig::new(30);
    let a = EncoderParams::init(ViTConfig::default(), cfg, 1).unwrap();
    let b = EncoderParams::init(ViTConfig::default(), cfg, 1).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let img = Tensor::new(vec![32, 32, 3], (0..3072).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
    let e = a.embed_image(&img).unwrap();
    assert_eq!(e, b.embed_image(&img).unwrap());
    assert_eq!(e.shape(), &[a.shared_dim()]);
    assert!((e.data().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn box_constructor_rejects_degenerate_corners() {
    assert!(BBox::new(1.0, 1.0, 1.0, 2.0).is_err());
    assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
}
