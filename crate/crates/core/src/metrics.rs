//! Detection scoring: greedy matching, precision/recall, 11-point AP and the
//! multi-threshold mAP report with long-tail strata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category: String,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: String,
    pub bbox: BBox,
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices in descending confidence, ties in input order.
    pub order: Vec<usize>,
    /// `tp[k]` labels detection `order[k]`.
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp.len() - self.true_positives()
    }
}

fn confidence_order(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // sort_by is stable, so equal confidences keep input order.
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

fn match_refs(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> MatchResult {
    let order = confidence_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = dets[di];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| !taken[*gi] && g.image_id == d.image_id && g.category == d.category)
            .map(|(gi, g)| (gi, iou(&d.bbox, &g.bbox).unwrap_or(0.0)))
            .fold(None::<(usize, f64)>, |acc, (gi, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((gi, v)),
            });
        match best {
            Some((gi, v)) if v >= thr => {
                taken[gi] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    MatchResult { order, tp, false_negatives: taken.iter().filter(|&&t| !t).count() }
}

/// Greedy matching: each detection, by descending confidence, claims the
/// highest-IoU unmatched ground truth of its image and category.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let d: Vec<&Detection> = dets.iter().collect();
    let g: Vec<&GroundTruth> = gts.iter().collect();
    match_refs(&d, &g, iou_threshold)
}

/// `(TP/(TP+FP), TP/(TP+FN))` with empty denominators giving 0.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

/// `(1/11) Σ_k max_{r ≥ k/10} p(r)` over a ranked TP/FP list.
pub fn eleven_point_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut cum = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        cum += t as usize;
        points.push((cum as f64 / num_gt as f64, cum as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            points.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// AP of one category at one IoU threshold; `None` if the category has
/// neither detections nor ground truths.
pub fn ap_at(dets: &[Detection], gts: &[GroundTruth], category: &str, thr: f64) -> Option<f64> {
    let d: Vec<&Detection> = dets.iter().filter(|d| d.category == category).collect();
    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == category).collect();
    if d.is_empty() && g.is_empty() {
        return None;
    }
    let m = match_refs(&d, &g, thr);
    Some(eleven_point_ap(&m.tp, g.len()))
}

pub fn ap50(dets: &[Detection], gts: &[GroundTruth], category: &str) -> Option<f64> {
    ap_at(dets, gts, category, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Head,
    Middle,
    Tail,
}

impl Stratum {
    /// Head above 100 training instances, tail below 10.
    pub fn of_count(n: usize) -> Self {
        if n > 100 {
            Stratum::Head
        } else if n >= 10 {
            Stratum::Middle
        } else {
            Stratum::Tail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    /// AP at each threshold of [`iou_thresholds`].
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap50_95: f64,
    pub train_instances: usize,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRollup {
    pub categories: usize,
    pub map50: f64,
    pub map50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub categories: Vec<CategoryAp>,
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub strata: BTreeMap<Stratum, StratumRollup>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Full report over the categories that have ground truths. Strata come
/// from `train_counts` when given, else from the ground-truth counts here.
pub fn map_suite(
    dets: &[Detection],
    gts: &[GroundTruth],
    train_counts: Option<&HashMap<String, usize>>,
) -> Result<APReport> {
    if gts.is_empty() {
        return contract("evaluation needs at least one ground truth");
    }
    let cats: BTreeSet<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    let mut gt_counts: HashMap<&str, usize> = HashMap::new();
    for g in gts {
        *gt_counts.entry(g.category.as_str()).or_default() += 1;
    }
    let thresholds = iou_thresholds();
    let categories: Vec<CategoryAp> = cats
        .iter()
        .map(|&c| {
            let ap: Vec<f64> = thresholds.iter().map(|&t| ap_at(dets, gts, c, t).unwrap_or(0.0)).collect();
            let n = match train_counts {
                Some(tc) => tc.get(c).copied().unwrap_or(0),
                None => gt_counts[c],
            };
            CategoryAp {
                category: c.to_string(),
                ap50: ap[0],
                ap50_95: mean(ap.iter().copied()),
                ap,
                train_instances: n,
                stratum: Stratum::of_count(n),
            }
        })
        .collect();
    let m = match_detections(dets, gts, 0.5);
    let (precision, recall) = precision_recall(m.true_positives(), m.false_positives(), m.false_negatives);
    let mut strata = BTreeMap::new();
    for s in [Stratum::Head, Stratum::Middle, Stratum::Tail] {
        let members: Vec<&CategoryAp> = categories.iter().filter(|c| c.stratum == s).collect();
        strata.insert(
            s,
            StratumRollup {
                categories: members.len(),
                map50: mean(members.iter().map(|c| c.ap50)),
                map50_95: mean(members.iter().map(|c| c.ap50_95)),
            },
        );
    }
    Ok(APReport {
        map50: mean(categories.iter().map(|c| c.ap50)),
        map50_95: mean(categories.iter().map(|c| c.ap50_95)),
        categories,
        precision,
        recall,
        strata,
    })
}

impl APReport {
    /// One-row summary table: `Precision,Recall,mAP50,mAP50:95`.
    pub fn summary_csv(&self) -> String {
        format!(
            "Precision,Recall,mAP50,mAP50:95\n{:.6},{:.6},{:.6},{:.6}\n",
            self.precision, self.recall, self.map50, self.map50_95
        )
    }

    pub fn per_category_csv(&self) -> String {
        let mut s = String::from("category,stratum,train_instances,ap50,ap50_95\n");
        for c in &self.categories {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                c.category,
                serde_json::to_value(c.stratum).expect("enum serializes").as_str().unwrap_or(""),
                c.train_instances,
                c.ap50,
                c.ap50_95
            ));
        }
        s
    }
}

/// Reads one JSON detection per non-empty line.
pub fn read_predictions(path: &Path) -> Result<Vec<Detection>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::Parse(format!(
                "{}:{}: confidence {} outside [0, 1]",
                path.display(),
                i + 1,
                d.confidence
            )));
        }
        d.bbox.validate()?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
