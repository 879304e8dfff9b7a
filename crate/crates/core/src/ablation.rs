//! End-to-end classifier runs on the synthetic long-tail benchmark and the
//! component ladder: serial labels, text labels, rule tokenizer, cache.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{bench_cache, classify_image, CacheBenchReport, SemanticCache, TextEncoder};
use crate::contrastive::{argmax, classify, embed_images, embed_texts, train, EpochStat, Temperature, TrainConfig};
use crate::dataset::{load_image, pair_image_path, PairRecord, Split, SynthDataset};
use crate::encoders::{EncoderParams, TextEncoderConfig, ViTConfig};
use crate::error::{contract, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{build_vocab_with, tokenize, TokenSequence, Vocab, DEFAULT_VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// `"category k"` texts that carry no semantics.
    Serial,
    /// Knowledge-base descriptions.
    Description,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Plain,
    Rule,
}

/// Images and class texts of one split, with labels indexing `classes`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub classes: Vec<String>,
    pub class_texts: Vec<String>,
    pub train_images: Vec<Tensor>,
    pub train_labels: Vec<usize>,
    pub test_images: Vec<Tensor>,
    pub test_labels: Vec<usize>,
}

pub fn prepare(ds: &SynthDataset, mode: LabelMode, side: usize) -> Result<Prepared> {
    let classes: Vec<String> = ds.spec.categories.iter().map(|(c, _)| c.clone()).collect();
    let class_texts: Vec<String> = classes
        .iter()
        .enumerate()
        .map(|(k, c)| match mode {
            LabelMode::Serial => format!("category {}", k + 1),
            LabelMode::Description => {
                ds.pairs.iter().find(|p| &p.category == c).map(|p| p.text.clone()).unwrap_or_default()
            }
        })
        .collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let crops = ds.crops(side)?;
    let mut p = Prepared {
        classes: classes.clone(),
        class_texts,
        train_images: vec![],
        train_labels: vec![],
        test_images: vec![],
        test_labels: vec![],
    };
    for (pair, crop) in ds.pairs.iter().zip(crops) {
        let label = index[pair.category.as_str()];
        let t = crop.to_tensor();
        match pair.split {
            Split::Train => {
                p.train_images.push(t);
                p.train_labels.push(label);
            }
            Split::Test => {
                p.test_images.push(t);
                p.test_labels.push(label);
            }
        }
    }
    Ok(p)
}

/// Same as [`prepare`] for pair records on disk, with images resolved
/// against `root`. Classes are the sorted distinct categories, each labelled
/// by the first description seen for it.
pub fn prepare_pairs(pairs: &[PairRecord], root: &Path, side: usize) -> Result<Prepared> {
    let mut texts: BTreeMap<&str, &str> = BTreeMap::new();
    for pair in pairs {
        texts.entry(pair.category.as_str()).or_insert(pair.text.as_str());
    }
    let classes: Vec<String> = texts.keys().map(|c| c.to_string()).collect();
    let index: BTreeMap<&str, usize> = texts.keys().enumerate().map(|(i, c)| (*c, i)).collect();
    let images: Vec<Tensor> = pairs
        .par_iter()
        .map(|pair| Ok(load_image(&pair_image_path(root, pair))?.resize(side, side).to_tensor()))
        .collect::<Result<_>>()?;
    let mut p = Prepared {
        class_texts: texts.values().map(|t| t.to_string()).collect(),
        classes,
        train_images: vec![],
        train_labels: vec![],
        test_images: vec![],
        test_labels: vec![],
    };
    for (pair, t) in pairs.iter().zip(images) {
        let label = index[pair.category.as_str()];
        match pair.split {
            Split::Train => {
                p.train_images.push(t);
                p.train_labels.push(label);
            }
            Split::Test => {
                p.test_images.push(t);
                p.test_labels.push(label);
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_class: BTreeMap<String, f64>,
    /// Mean over the classes with the largest instance count.
    pub head: f64,
    /// Mean over the classes with the smallest instance count.
    pub tail: f64,
}

pub struct ClassifierRun {
    pub params: EncoderParams,
    pub vocab: Vocab,
    pub trace: Vec<EpochStat>,
    pub accuracy: Accuracy,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Model dimensions and vocabulary used for ladder rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub vit: ViTConfig,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub train: TrainConfig,
}

impl RunSettings {
    pub fn new(train: TrainConfig) -> Self {
        RunSettings {
            vit: ViTConfig::default(),
            text_width: 32,
            text_layers: 2,
            text_heads: 2,
            vocab_size: DEFAULT_VOCAB_SIZE,
            train,
        }
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize], classes: &[String], counts: &[usize]) -> Accuracy {
    let mut hit = vec![0usize; classes.len()];
    let mut n = vec![0usize; classes.len()];
    for (&p, &l) in pred.iter().zip(labels) {
        n[l] += 1;
        hit[l] += (p == l) as usize;
    }
    let per: Vec<Option<f64>> = (0..classes.len()).map(|k| (n[k] > 0).then(|| hit[k] as f64 / n[k] as f64)).collect();
    let group = |target: usize| {
        let xs: Vec<f64> = (0..classes.len()).filter(|&k| counts[k] == target).filter_map(|k| per[k]).collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    Accuracy {
        overall: hit.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        per_class: classes.iter().zip(&per).filter_map(|(c, a)| a.map(|a| (c.clone(), a))).collect(),
        head: group(max),
        tail: group(min),
    }
}

/// Trains a classifier on `data` and scores it on the test split.
pub fn run_classifier(
    data: &Prepared,
    counts: &[usize],
    tok: TokenizerMode,
    settings: &RunSettings,
) -> Result<ClassifierRun> {
    if data.train_images.is_empty() || data.test_images.is_empty() {
        return contract("both splits must be non-empty");
    }
    let vocab = build_vocab_with(&data.class_texts, settings.vocab_size, tok == TokenizerMode::Rule)?;
    let text_cfg = TextEncoderConfig {
        vocab_size: vocab.len(),
        max_len: 64,
        width: settings.text_width,
        layers: settings.text_layers,
        heads: settings.text_heads,
    };
    let params = EncoderParams::init(settings.vit, text_cfg, settings.train.seed)?;
    let class_seqs: Vec<TokenSequence> = data.class_texts.iter().map(|t| tokenize(t, &vocab)).collect();
    let texts: Vec<TokenSequence> = data.train_labels.iter().map(|&l| class_seqs[l].clone()).collect();
    let out = train(&data.train_images, &texts, params, &settings.train)?;
    let temperature = Temperature::of(&out.params);
    let ev = embed_images(&out.params, &data.test_images)?;
    let et = embed_texts(&out.params, &class_seqs)?;
    let mut predictions = Vec::with_capacity(data.test_images.len());
    let mut probabilities = Vec::with_capacity(data.test_images.len());
    for i in 0..data.test_images.len() {
        let fv = Tensor::vector(ev.row(i).to_vec())?;
        let p = classify(&fv, &et, temperature)?;
        predictions.push(argmax(&p));
        probabilities.push(p);
    }
    let acc = accuracy(&predictions, &data.test_labels, &data.classes, counts);
    Ok(ClassifierRun { params: out.params, vocab, trace: out.trace, accuracy: acc, predictions, probabilities })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderRow {
    pub name: String,
    pub labels: LabelMode,
    pub tokenizer: TokenizerMode,
    pub cache: bool,
    pub accuracy: f64,
    pub head_accuracy: f64,
    pub tail_accuracy: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Images per second of cached classification (cache rows only).
    pub throughput: Option<CacheBenchReport>,
}

fn row(name: &str, labels: LabelMode, tok: TokenizerMode, run: &ClassifierRun) -> LadderRow {
    LadderRow {
        name: name.into(),
        labels,
        tokenizer: tok,
        cache: false,
        accuracy: run.accuracy.overall,
        head_accuracy: run.accuracy.head,
        tail_accuracy: run.accuracy.tail,
        first_loss: run.trace.first().map(|s| s.mean_loss).unwrap_or(0.0),
        final_loss: run.trace.last().map(|s| s.mean_loss).unwrap_or(0.0),
        throughput: None,
    }
}

/// The four-row component ladder. The cache row reuses the rule-tokenizer
/// model, so its accuracy is identical by construction; it adds throughput.
pub fn ablation_ladder(ds: &SynthDataset, settings: &RunSettings) -> Result<Vec<LadderRow>> {
    let counts: Vec<usize> = ds.spec.categories.iter().map(|(_, n)| *n).collect();
    let side = settings.vit.image_side;
    let serial = prepare(ds, LabelMode::Serial, side)?;
    let text = prepare(ds, LabelMode::Description, side)?;
    let mut rows = Vec::with_capacity(4);
    let r1 = run_classifier(&serial, &counts, TokenizerMode::Plain, settings)?;
    rows.push(row("serial labels", LabelMode::Serial, TokenizerMode::Plain, &r1));
    let r2 = run_classifier(&text, &counts, TokenizerMode::Plain, settings)?;
    rows.push(row("text labels", LabelMode::Description, TokenizerMode::Plain, &r2));
    let r3 = run_classifier(&text, &counts, TokenizerMode::Rule, settings)?;
    rows.push(row("+ rule tokenizer", LabelMode::Description, TokenizerMode::Rule, &r3));

    let enc = TextEncoder::new(&r3.params, &r3.vocab);
    let temperature = Temperature::of(&r3.params);
    let cache = SemanticCache::for_encoder(&enc, None)?;
    let mut pred = Vec::with_capacity(text.test_images.len());
    for im in &text.test_images {
        pred.push(argmax(&classify_image(im, &text.class_texts, &enc, Some(&cache), temperature)?));
    }
    let acc = accuracy(&pred, &text.test_labels, &text.classes, &counts);
    let bench = bench_cache(&text.class_texts, &text.test_images, 1, &enc, temperature)?;
    let mut r4 = row("+ semantic cache", LabelMode::Description, TokenizerMode::Rule, &r3);
    r4.cache = true;
    r4.accuracy = acc.overall;
    r4.head_accuracy = acc.head;
    r4.tail_accuracy = acc.tail;
    r4.throughput = Some(bench);
    rows.push(r4);
    Ok(rows)
}

/// Plain-text comparison table.
pub fn format_ladder(rows: &[LadderRow]) -> String {
    let mut s = format!("{:<20} {:>9} {:>9} {:>9} {:>10}\n", "row", "accuracy", "head", "tail", "warm ips");
    for r in rows {
        let ips = r.throughput.map(|t| format!("{:.1}", t.warm_ips)).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>10}\n",
            r.name, r.accuracy, r.head_accuracy, r.tail_accuracy, ips
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_groups_by_count() {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let counts = [10, 10, 2];
        let acc = accuracy(&[0, 1, 0, 2], &[0, 0, 1, 2], &classes, &counts);
        assert_eq!(acc.overall, 0.5);
        assert_eq!(acc.per_class["a"], 0.5);
        assert_eq!(acc.head, 0.25);
        assert_eq!(acc.tail, 1.0);
    }

    #[test]
    fn pairs_on_disk_prepare_like_memory() {
        let spec = crate::dataset::SyntheticSignSpec {
            categories: vec![("i1".into(), 4), ("pl40".into(), 3)],
            ..crate::dataset::SyntheticSignSpec::longtail8(2)
        };
        let ds = crate::dataset::synth_dataset(&spec, crate::tokenizer::KnowledgeBase::builtin()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let mem = prepare(&ds, LabelMode::Description, 32).unwrap();
        let disk = prepare_pairs(&ds.pairs, dir.path(), 32).unwrap();
        assert_eq!(disk.classes, ["i1", "pl40"]);
        assert_eq!(disk.class_texts, mem.class_texts);
        assert_eq!(disk.train_labels, mem.train_labels);
        assert_eq!(disk.test_images, mem.test_images);
    }
}
