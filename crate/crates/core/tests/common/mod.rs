//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls the library routine it is checking.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsrmcl_core::boxes::BBox;
use tsrmcl_core::contrastive::{loss_and_grads, Temperature};
use tsrmcl_core::encoders::{EncoderParams, TextEncoderConfig, ViTConfig};
use tsrmcl_core::metrics::{Detection, GroundTruth};
use tsrmcl_core::tensor::Tensor;
use tsrmcl_core::tokenizer::{TokenSequence, CLS, PAD, SEP};

// ---------------------------------------------------------------- boxes

/// IoU by counting unit cells of integer-corner boxes.
pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let (x0, y0) = (a[0].min(b[0]), a[1].min(b[1]));
    let (x1, y1) = (a[2].max(b[2]), a[3].max(b[3]));
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut uni) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += (p && q) as u64;
            uni += (p || q) as u64;
        }
    }
    inter as f64 / uni as f64
}

pub fn random_int_box(rng: &mut impl Rng, extent: i64) -> [i64; 4] {
    let x0 = rng.gen_range(0..extent - 1);
    let y0 = rng.gen_range(0..extent - 1);
    let x1 = rng.gen_range(x0 + 1..=extent);
    let y1 = rng.gen_range(y0 + 1..=extent);
    [x0, y0, x1, y1]
}

pub fn to_bbox(c: [i64; 4]) -> BBox {
    BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap()
}

// -------------------------------------------------------------- metrics

pub const THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

fn int_area(b: &BBox) -> f64 {
    (b.xmax - b.xmin) * (b.ymax - b.ymin)
}

fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    inter / (int_area(a) + int_area(b) - inter)
}

/// TP flags in ranked order for one category, by direct enumeration.
fn naive_labels(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> (Vec<bool>, usize) {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // Insertion sort: strictly higher confidence moves ahead, ties stay put.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j]].confidence > dets[idx[j - 1]].confidence {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    for &di in &idx {
        let d = dets[di];
        let mut best: Option<usize> = None;
        let mut best_v = f64::NEG_INFINITY;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.image_id != d.image_id || g.category != d.category {
                continue;
            }
            let v = naive_iou(&d.bbox, &g.bbox);
            if v > best_v {
                best_v = v;
                best = Some(gi);
            }
        }
        match best {
            Some(gi) if best_v >= thr => {
                used[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    let missed = used.iter().filter(|u| !**u).count();
    (flags, missed)
}

/// `(1/11) Σ_k max_{r ≥ k/10} p(r)` with recall comparisons done in integers.
fn naive_eleven_point(flags: &[bool], num_gt: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..=10usize {
        let mut best = 0.0f64;
        let mut tp = 0usize;
        for (i, &f) in flags.iter().enumerate() {
            tp += f as usize;
            if tp * 10 >= k * num_gt {
                let p = tp as f64 / (i + 1) as f64;
                if p > best {
                    best = p;
                }
            }
        }
        total += best;
    }
    total / 11.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// `(category, per-threshold AP)` in sorted category order.
    pub per_category: Vec<(String, Vec<f64>)>,
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn brute_force_report(dets: &[Detection], gts: &[GroundTruth]) -> OracleReport {
    let mut cats: Vec<String> = gts.iter().map(|g| g.category.clone()).collect();
    cats.sort();
    cats.dedup();
    let mut per_category = Vec::new();
    for c in &cats {
        let d: Vec<&Detection> = dets.iter().filter(|d| &d.category == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| &g.category == c).collect();
        let aps: Vec<f64> =
            THRESHOLDS.iter().map(|&t| naive_eleven_point(&naive_labels(&d, &g, t).0, g.len())).collect();
        per_category.push((c.clone(), aps));
    }
    let n = per_category.len() as f64;
    let map50 = per_category.iter().map(|(_, a)| a[0]).sum::<f64>() / n;
    let map50_95 = per_category.iter().map(|(_, a)| a.iter().sum::<f64>() / a.len() as f64).sum::<f64>() / n;
    let all_d: Vec<&Detection> = dets.iter().collect();
    let all_g: Vec<&GroundTruth> = gts.iter().collect();
    let (flags, missed) = naive_labels(&all_d, &all_g, 0.5);
    let tp = flags.iter().filter(|f| **f).count();
    let fp = flags.len() - tp;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + missed == 0 { 0.0 } else { tp as f64 / (tp + missed) as f64 };
    OracleReport { per_category, map50, map50_95, precision, recall }
}

/// Small scene with up to `max_boxes` ground truths and detections on a
/// 24-pixel integer grid; confidences come from a coarse set so ties occur.
pub fn random_scene(rng: &mut impl Rng, max_boxes: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let cats = ["pl40", "i1", "w55"];
    let images = ["s0", "s1"];
    let ng = rng.gen_range(1..=max_boxes);
    let nd = rng.gen_range(0..=max_boxes);
    let gts: Vec<GroundTruth> = (0..ng)
        .map(|_| GroundTruth {
            image_id: images[rng.gen_range(0..images.len())].into(),
            category: cats[rng.gen_range(0..cats.len())].into(),
            bbox: to_bbox(random_int_box(rng, 24)),
        })
        .collect();
    let dets = (0..nd)
        .map(|_| {
            // Half the detections jitter a real box so matches actually happen.
            let (image_id, category, bbox) = if rng.gen_bool(0.5) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let b = g.bbox;
                let j = |rng: &mut dyn rand::RngCore| rng.gen_range(-2i64..=2) as f64;
                let (x0, y0) = (b.xmin + j(rng), b.ymin + j(rng));
                let (x1, y1) = ((b.xmax + j(rng)).max(x0 + 1.0), (b.ymax + j(rng)).max(y0 + 1.0));
                let cat =
                    if rng.gen_bool(0.85) { g.category.clone() } else { cats[rng.gen_range(0..cats.len())].into() };
                (g.image_id.clone(), cat, BBox::new(x0, y0, x1, y1).unwrap())
            } else {
                (
                    images[rng.gen_range(0..images.len())].to_string(),
                    cats[rng.gen_range(0..cats.len())].to_string(),
                    to_bbox(random_int_box(rng, 24)),
                )
            };
            Detection { image_id, category, bbox, confidence: rng.gen_range(0..=10) as f64 / 10.0 }
        })
        .collect();
    (dets, gts)
}

// ------------------------------------------------------------ gradients

pub fn toy_configs(vocab: usize) -> (ViTConfig, TextEncoderConfig) {
    (
        ViTConfig { image_side: 8, channels: 3, patch: 4, width: 16, layers: 2, heads: 2, mlp_factor: 2 },
        TextEncoderConfig { vocab_size: vocab, max_len: 16, width: 16, layers: 2, heads: 2 },
    )
}

pub fn raw_sequence(ids: Vec<u32>) -> TokenSequence {
    TokenSequence { offsets: vec![(0, 0); ids.len()], ids, protected_spans: Vec::new(), text: String::new() }
}

/// Four image/text pairs; pairs 0 and 2 share a text and pair 3 is padded.
pub fn toy_batch(seed: u64, vocab: usize) -> (Vec<Tensor>, Vec<TokenSequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let images = (0..4)
        .map(|_| Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let mut word = |n: usize| -> Vec<u32> {
        let mut ids = vec![CLS];
        ids.extend((0..n).map(|_| rng.gen_range(5..vocab as u32)));
        ids.push(SEP);
        ids
    };
    let t0 = word(3);
    let t1 = word(4);
    let t3 = {
        let mut ids = word(2);
        ids.extend([PAD, PAD]);
        ids
    };
    let texts = vec![raw_sequence(t0.clone()), raw_sequence(t1), raw_sequence(t0), raw_sequence(t3)];
    (images, texts)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub coordinates: usize,
    pub params_checked: usize,
}

/// Central differences with step `h` on a sample of coordinates of every
/// parameter. The error per parameter is `‖a − n‖ / max(‖a‖, ‖n‖)` over the
/// sampled coordinates, skipped when both norms are below `1e-10`.
pub fn gradcheck_end_to_end(seed: u64, h: f64, per_param: usize) -> GradCheck {
    let vocab = 12;
    let (vit, text) = toy_configs(vocab);
    let mut params = EncoderParams::init(vit, text, seed).unwrap();
    Temperature::from_tau(3.0).unwrap().store_into(&mut params);
    let (images, texts) = toy_batch(seed, vocab);
    let ims: Vec<&Tensor> = images.iter().collect();
    let txs: Vec<&TokenSequence> = texts.iter().collect();
    let (_, grads) = loss_and_grads(&params, &ims, &txs).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { worst_rel_err: 0.0, worst_param: String::new(), coordinates: 0, params_checked: 0 };
    for (name, g) in &grads {
        let n = g.numel();
        // Sample coordinates plus the largest-gradient one, so that sparse
        // gradients such as the token table are still exercised.
        let mut picks: Vec<usize> = (0..per_param.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let top = (0..n).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
        picks.push(top);
        picks.sort_unstable();
        picks.dedup();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let base = params.store.get(name).unwrap().clone();
            let shifted = |delta: f64| {
                let mut d = base.data().to_vec();
                d[i] += delta;
                let mut p = params.clone();
                p.store.insert(name.clone(), Tensor::new(base.shape().to_vec(), d).unwrap());
                loss_and_grads(&p, &ims, &txs).unwrap().0
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic = g.data()[i];
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        out.coordinates += picks.len();
        let scale = a2.sqrt().max(n2.sqrt());
        if scale < 1e-10 {
            continue;
        }
        out.params_checked += 1;
        let rel = diff2.sqrt() / scale;
        if rel > out.worst_rel_err {
            out.worst_rel_err = rel;
            out.worst_param = name.clone();
        }
    }
    out
}

// ------------------------------------------------------------ tokenizer

/// Byte ranges of maximal `digits(.digits)?` runs, scanned by hand.
pub fn number_ranges(text: &str) -> Vec<(usize, usize)> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if !b[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
            i += 1;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        out.push((start, i));
    }
    out
}

/// Number of numeric literals that are not carried by exactly one token.
pub fn protected_splits(seq: &TokenSequence) -> usize {
    number_ranges(&seq.text)
        .into_iter()
        .filter(|&(s, e)| {
            let exact = seq.offsets.iter().filter(|&&o| o == (s, e)).count();
            let partial = seq.offsets.iter().filter(|&&(a, b)| a < b && a < e && b > s && (a, b) != (s, e)).count();
            exact != 1 || partial != 0
        })
        .count()
}

const WORDS: &[&str] = &[
    "a",
    "circular",
    "red",
    "sign",
    "with",
    "speed",
    "limit",
    "height",
    "width",
    "weight",
    "no",
    "entry",
    "warning",
    "of",
    "pedestrians",
    "blue",
    "arrow",
    "indicating",
    "straight",
    "ahead",
    "triangular",
    "yellow",
    "minimum",
    "parking",
    "zone",
    "max",
    "meters",
    "tons",
    "km/h",
];

/// Sign-like sentences with integers, decimals, unit spellings, case and
/// spacing noise, and numbers glued to letters.
pub fn fuzz_description(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..10);
    let mut parts: Vec<String> = Vec::new();
    for _ in 0..n {
        let s = match rng.gen_range(0..10) {
            0..=5 => WORDS[rng.gen_range(0..WORDS.len())].to_string(),
            6 => rng.gen_range(0..1000).to_string(),
            7 => format!("{}.{}", rng.gen_range(0..100), rng.gen_range(0..100)),
            8 => {
                let units = ["km/h", "KPH", "kmh", "m", "t", "tons", "metres", "x", "b"];
                let sep = if rng.gen_bool(0.5) { "" } else { " " };
                format!("{}{sep}{}", rng.gen_range(1..200), units[rng.gen_range(0..units.len())])
            }
            _ => format!("{}{}", WORDS[rng.gen_range(0..WORDS.len())], rng.gen_range(0..99)),
        };
        parts.push(if rng.gen_bool(0.2) { s.to_uppercase() } else { s });
    }
    let sep = if rng.gen_bool(0.3) { "  " } else { " " };
    parts.join(sep)
}
