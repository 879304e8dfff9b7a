//! `tsrmcl`: dataset building, synthetic data, tokenizer tools, training,
//! classification, evaluation, cache benchmarking and the ablation ladder.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use tsrmcl_core::ablation::{
    ablation_ladder, format_ladder, prepare_pairs, run_classifier, RunSettings, TokenizerMode,
};
use tsrmcl_core::boxes::{inner_wiou_loss, iou, DEFAULT_GAMMA_W, DEFAULT_INNER_RATIO};
use tsrmcl_core::cache::{bench_cache, classify_image, SemanticCache, TextEncoder};
use tsrmcl_core::contrastive::{argmax, write_trace_csv, Temperature, TrainConfig};
use tsrmcl_core::dataset::{
    catalogue221, crop_signs, dataset_stats, generate_description, load_image, longtail8, read_pairs, split_pairs,
    synth_dataset, tstiad_profile, write_pairs, Annotations, PairRecord, Split, SyntheticSignSpec,
};
use tsrmcl_core::encoders::{EncoderParams, TextEncoderConfig, ViTConfig};
use tsrmcl_core::metrics::{map_suite, read_predictions};
use tsrmcl_core::tensor::Tensor;
use tsrmcl_core::tokenizer::{build_vocab_with, tokenize, KnowledgeBase, Vocab, DEFAULT_VOCAB_SIZE};

/// Invocation mistakes that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "tsrmcl", version, about = "Traffic-sign recognition with multimodal contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Crop annotated signs from scenes, describe them and split 2:1.
    BuildDataset(BuildDatasetArgs),
    /// Render a synthetic long-tail sign dataset.
    Synth(SynthArgs),
    /// Learn a BPE vocabulary from descriptions.
    BuildVocab(BuildVocabArgs),
    /// Tokenize texts with a vocabulary.
    Tokenize(TokenizeArgs),
    /// Train both encoders contrastively on a pair dataset.
    Train(TrainArgs),
    /// Classify sign crops with a trained model.
    Classify(ClassifyArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Measure cold versus warm semantic-cache throughput.
    BenchCache(BenchCacheArgs),
    /// Dataset statistics from an annotation file.
    Stats(StatsArgs),
    /// Run the four-row component ladder on synthetic data.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Serialize)]
struct KbArgs {
    /// Rule file replacing the built-in knowledge base (needs --kb-categories).
    #[arg(long, requires = "kb_categories")]
    kb_rules: Option<PathBuf>,
    /// Category file replacing the built-in knowledge base (needs --kb-rules).
    #[arg(long, requires = "kb_rules")]
    kb_categories: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BuildDatasetArgs {
    /// TT100K-style annotation JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory that scene paths are relative to; defaults to the annotation file's directory.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value = "2:1", value_parser = parse_ratio)]
    ratio: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Profile {
    /// 8 categories, 350 instances.
    Longtail8,
    /// 221 categories, 24,715 instances.
    Tstiad,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Longtail8)]
    profile: Profile,
    /// Per-pixel noise amplitude as a fraction of full scale.
    #[arg(long, default_value_t = 0.06)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BuildVocabArgs {
    /// Text file with one description per line, or a pairs.jsonl file.
    /// Defaults to descriptions of the full category catalogue.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    size: usize,
    /// Plain BPE: numbers are merged like any other symbols.
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TokenizeArgs {
    /// vocab.json; defaults to a vocabulary built from the category catalogue.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Texts to tokenize.
    #[arg(required = true)]
    text: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset directory holding pairs.jsonl (from synth or build-dataset).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Initial temperature.
    #[arg(long, default_value_t = 14.0)]
    tau_init: f64,
    /// Temperature ceiling.
    #[arg(long, default_value_t = 100.0)]
    tau_max: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    /// Plain BPE instead of the number-protecting tokenizer.
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ClassifyArgs {
    /// Output directory of a train run.
    #[arg(long)]
    model: PathBuf,
    /// Sign crops to classify.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Encode class texts afresh for every image.
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Predictions as JSON lines {image_id, category, bbox: [xmin, ymin, xmax, ymax], confidence}.
    #[arg(long)]
    pred: PathBuf,
    /// TT100K-style ground-truth annotations.
    #[arg(long)]
    gt: PathBuf,
    /// JSON object of training instance counts per category, for strata.
    #[arg(long)]
    train_counts: Option<PathBuf>,
    /// Inner-box ratio for the localization loss of matched detections.
    #[arg(long, default_value_t = DEFAULT_INNER_RATIO)]
    inner_ratio: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA_W)]
    gamma_w: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchCacheArgs {
    /// Output directory of a train run; an untrained model is used otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of random query images.
    #[arg(long, default_value_t = 100)]
    images: usize,
    /// Warm passes over the images.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_ratio(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("ratio must look like 2:1")?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad train share {a:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad test share {b:?}"))?;
    if a == 0 {
        return Err("train share must be positive".into());
    }
    Ok((a, b))
}

impl Command {
    fn out(&self) -> &Path {
        match self {
            Command::BuildDataset(a) => &a.out,
            Command::Synth(a) => &a.out,
            Command::BuildVocab(a) => &a.out,
            Command::Tokenize(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Classify(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::BenchCache(a) => &a.out,
            Command::Stats(a) => &a.out,
            Command::Ablate(a) => &a.out,
        }
    }

    /// Input paths that must exist before any work starts.
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Command::BuildDataset(a) => {
                v.push(&a.annotations);
                v.extend(a.root.as_deref());
                v.extend(a.kb.kb_rules.as_deref());
                v.extend(a.kb.kb_categories.as_deref());
            }
            Command::BuildVocab(a) => v.extend(a.corpus.as_deref()),
            Command::Tokenize(a) => v.extend(a.vocab.as_deref()),
            Command::Train(a) => v.push(&a.data),
            Command::Classify(a) => {
                v.push(&a.model);
                v.extend(a.images.iter().map(PathBuf::as_path));
            }
            Command::Eval(a) => {
                v.push(&a.pred);
                v.push(&a.gt);
                v.extend(a.train_counts.as_deref());
            }
            Command::BenchCache(a) => v.extend(a.model.as_deref()),
            Command::Stats(a) => v.push(&a.annotations),
            Command::Synth(_) | Command::Ablate(_) => {}
        }
        v
    }

    fn validate(&self) -> anyhow::Result<()> {
        for p in self.inputs() {
            if !p.exists() {
                return Err(usage(format!("input path {} does not exist", p.display())));
            }
        }
        let out = self.out();
        if out.exists() && !out.is_dir() {
            return Err(usage(format!("--out {} exists and is not a directory", out.display())));
        }
        match self {
            Command::Train(a) => {
                if a.epochs == 0 || a.batch_size == 0 {
                    return Err(usage("--epochs and --batch-size must be positive"));
                }
                if !(a.lr > 0.0 && a.tau_init > 0.0 && a.tau_max >= a.tau_init) {
                    return Err(usage("need --lr > 0 and 0 < --tau-init <= --tau-max"));
                }
            }
            Command::Eval(a) => {
                if !(a.inner_ratio > 0.0 && a.inner_ratio <= 1.0) || !(a.gamma_w > 0.0) {
                    return Err(usage("need 0 < --inner-ratio <= 1 and --gamma-w > 0"));
                }
            }
            Command::BenchCache(a) if a.images == 0 || a.repeats == 0 => {
                return Err(usage("--images and --repeats must be positive"));
            }
            Command::Synth(a) if !(0.0..=0.5).contains(&a.noise) => {
                return Err(usage("--noise must lie in [0, 0.5]"));
            }
            Command::Ablate(a) if a.epochs == 0 => return Err(usage("--epochs must be positive")),
            _ => {}
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn knowledge_base(kb: &KbArgs) -> anyhow::Result<KnowledgeBase> {
    match (&kb.kb_rules, &kb.kb_categories) {
        (Some(r), Some(c)) => Ok(KnowledgeBase::load(r, c)?),
        _ => Ok(KnowledgeBase::builtin().clone()),
    }
}

fn catalogue_texts() -> Vec<String> {
    let kb = KnowledgeBase::builtin();
    catalogue221().iter().map(|c| generate_description(c, kb)).collect()
}

/// File-name-safe rendering of an image id.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn build_dataset(a: &BuildDatasetArgs) -> anyhow::Result<()> {
    let kb = knowledge_base(&a.kb)?;
    let ann = Annotations::load(&a.annotations)?;
    let root = match &a.root {
        Some(r) => r.clone(),
        None => a.annotations.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let outcome = crop_signs(&ann, &root);
    fs::create_dir_all(a.out.join("crops"))?;
    let mut pairs = Vec::with_capacity(outcome.crops.len());
    for c in &outcome.crops {
        let rel = format!("crops/{}_{}.ppm", file_stem(&c.image_id), c.object_index);
        c.image.save_ppm(&a.out.join(&rel))?;
        pairs.push(PairRecord {
            image: rel,
            category: c.category.clone(),
            text: generate_description(&c.category, &kb),
            split: Split::Train,
        });
    }
    if pairs.is_empty() {
        bail!("no crops could be produced from {}", a.annotations.display());
    }
    pairs.sort_by(|x, y| (&x.category, &x.image).cmp(&(&y.category, &y.image)));
    let manifest = split_pairs(&mut pairs, a.ratio, a.seed)?;
    write_pairs(&a.out.join("pairs.jsonl"), &pairs)?;
    write_json(
        &a.out.join("manifest.json"),
        &json!({
            "split": manifest,
            "knowledge_base": kb.version(),
            "clamped_boxes": outcome.clamped,
            "unreadable_scenes": outcome.errors.iter().map(|(id, e)| json!({"image_id": id, "error": e})).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "{} crops ({} train / {} test), {} unreadable scenes, {} clamped boxes",
        pairs.len(),
        manifest.train_total,
        manifest.test_total,
        outcome.errors.len(),
        outcome.clamped
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let categories = match a.profile {
        Profile::Longtail8 => longtail8(),
        Profile::Tstiad => tstiad_profile(),
    };
    let spec = SyntheticSignSpec { categories, noise: a.noise, ..SyntheticSignSpec::longtail8(a.seed) };
    let ds = synth_dataset(&spec, KnowledgeBase::builtin())?;
    ds.write(&a.out)?;
    println!(
        "{} scenes in {} categories ({} train / {} test)",
        ds.scenes.len(),
        spec.categories.len(),
        ds.manifest.train_total,
        ds.manifest.test_total
    );
    Ok(())
}

fn read_corpus(path: &Path) -> anyhow::Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut texts: Vec<String> = read_pairs(path)?.into_iter().map(|p| p.text).collect();
        texts.sort();
        texts.dedup();
        return Ok(texts);
    }
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn build_vocab(a: &BuildVocabArgs) -> anyhow::Result<()> {
    let corpus = match &a.corpus {
        Some(p) => read_corpus(p)?,
        None => catalogue_texts(),
    };
    let vocab = build_vocab_with(&corpus, a.size, !a.plain)?;
    vocab.save(&a.out.join("vocab.json"))?;
    println!("{} tokens, {} merges from {} texts", vocab.len(), vocab.merges().len(), corpus.len());
    Ok(())
}

fn tokenize_cmd(a: &TokenizeArgs) -> anyhow::Result<()> {
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => build_vocab_with(&catalogue_texts(), DEFAULT_VOCAB_SIZE, true)?,
    };
    let mut lines = String::new();
    for t in &a.text {
        let seq = tokenize(t, &vocab);
        let tokens: Vec<&str> = seq.ids.iter().map(|&i| vocab.token(i).unwrap_or("[UNK]")).collect();
        println!("{}", tokens.join(" "));
        lines.push_str(&serde_json::to_string(&json!({
            "input": t,
            "normalized": seq.text,
            "ids": seq.ids,
            "tokens": tokens,
            "protected_spans": seq.protected_spans,
        }))?);
        lines.push('\n');
    }
    fs::write(a.out.join("tokens.jsonl"), lines)?;
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct ClassFile {
    classes: Vec<String>,
    class_texts: Vec<String>,
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let pairs_path = a.data.join("pairs.jsonl");
    if !pairs_path.exists() {
        return Err(usage(format!("{} has no pairs.jsonl", a.data.display())));
    }
    let pairs = read_pairs(&pairs_path)?;
    let mut settings = RunSettings::new(TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        gamma_init: a.tau_init.ln(),
        tau_max: a.tau_max,
    });
    settings.vocab_size = a.vocab_size;
    let data = prepare_pairs(&pairs, &a.data, settings.vit.image_side)?;
    let counts: Vec<usize> =
        (0..data.classes.len()).map(|k| data.train_labels.iter().filter(|&&l| l == k).count()).collect();
    let tok = if a.plain { TokenizerMode::Plain } else { TokenizerMode::Rule };
    let run = run_classifier(&data, &counts, tok, &settings)?;
    run.params.save(&a.out.join("model"))?;
    run.vocab.save(&a.out.join("vocab.json"))?;
    write_json(
        &a.out.join("classes.json"),
        &ClassFile { classes: data.classes.clone(), class_texts: data.class_texts.clone() },
    )?;
    write_trace_csv(&a.out.join("trace.csv"), &run.trace)?;
    let (first, last) = (run.trace.first().unwrap(), run.trace.last().unwrap());
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "train_pairs": data.train_images.len(),
            "test_pairs": data.test_images.len(),
            "first_loss": first.mean_loss,
            "final_loss": last.mean_loss,
            "tau": last.tau,
            "accuracy": run.accuracy,
        }),
    )?;
    println!(
        "loss {:.4} -> {:.4}, tau {:.2}, test accuracy {:.4} (head {:.4}, tail {:.4})",
        first.mean_loss, last.mean_loss, last.tau, run.accuracy.overall, run.accuracy.head, run.accuracy.tail
    );
    Ok(())
}

struct Model {
    params: EncoderParams,
    vocab: Vocab,
    classes: ClassFile,
}

fn load_model(dir: &Path) -> anyhow::Result<Model> {
    let classes: ClassFile = serde_json::from_str(
        &fs::read_to_string(dir.join("classes.json"))
            .with_context(|| format!("reading {}/classes.json", dir.display()))?,
    )?;
    Ok(Model {
        params: EncoderParams::load(&dir.join("model"))?,
        vocab: Vocab::load(&dir.join("vocab.json"))?,
        classes,
    })
}

fn classify_cmd(a: &ClassifyArgs) -> anyhow::Result<()> {
    let m = load_model(&a.model)?;
    let enc = TextEncoder::new(&m.params, &m.vocab);
    let cache = SemanticCache::for_encoder(&enc, None)?;
    let t = Temperature::of(&m.params);
    let side = m.params.vit.image_side;
    let mut lines = String::new();
    for path in &a.images {
        let image = load_image(path)?.resize(side, side).to_tensor();
        let cache = (!a.no_cache).then_some(&cache);
        let p = classify_image(&image, &m.classes.class_texts, &enc, cache, t)?;
        let top = argmax(&p);
        let probs: BTreeMap<&str, f64> = m.classes.classes.iter().map(String::as_str).zip(p.iter().copied()).collect();
        println!("{} {} {:.4}", path.display(), m.classes.classes[top], p[top]);
        lines.push_str(&serde_json::to_string(&json!({
            "image": path,
            "category": m.classes.classes[top],
            "confidence": p[top],
            "probabilities": probs,
        }))?);
        lines.push('\n');
    }
    fs::write(a.out.join("predictions.jsonl"), lines)?;
    write_json(&a.out.join("cache_stats.json"), &cache.stats())?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let dets = read_predictions(&a.pred)?;
    let gts = Annotations::load(&a.gt)?.ground_truths();
    let counts: Option<HashMap<String, usize>> = match &a.train_counts {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?).context("train counts must be a JSON object")?),
        None => None,
    };
    let report = map_suite(&dets, &gts, counts.as_ref())?;
    // Localization quality of each detection against its best same-class box.
    let mut losses = Vec::new();
    for d in &dets {
        let best = gts
            .iter()
            .filter(|g| g.image_id == d.image_id && g.category == d.category)
            .map(|g| (iou(&d.bbox, &g.bbox).unwrap_or(0.0), g))
            .max_by(|x, y| x.0.total_cmp(&y.0));
        if let Some((v, g)) = best {
            if v >= 0.5 {
                losses.push(inner_wiou_loss(&d.bbox, &g.bbox, a.inner_ratio, a.gamma_w)?);
            }
        }
    }
    let mean_loss = if losses.is_empty() { None } else { Some(losses.iter().sum::<f64>() / losses.len() as f64) };
    write_json(
        &a.out.join("report.json"),
        &json!({
            "report": report,
            "localization": {
                "inner_ratio": a.inner_ratio,
                "gamma_w": a.gamma_w,
                "detections_scored": losses.len(),
                "mean_inner_wiou_loss": mean_loss,
            },
        }),
    )?;
    fs::write(a.out.join("summary.csv"), report.summary_csv())?;
    fs::write(a.out.join("per_category.csv"), report.per_category_csv())?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn bench_cmd(a: &BenchCacheArgs) -> anyhow::Result<()> {
    use rand::{Rng, SeedableRng};
    let texts = catalogue_texts();
    let (params, vocab) = match &a.model {
        Some(dir) => {
            let m = load_model(dir)?;
            (m.params, m.vocab)
        }
        None => {
            let vocab = build_vocab_with(&texts, DEFAULT_VOCAB_SIZE, true)?;
            let params = EncoderParams::init(ViTConfig::default(), TextEncoderConfig::new(vocab.len()), a.seed)?;
            (params, vocab)
        }
    };
    let side = params.vit.image_side;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let images: Vec<Tensor> = (0..a.images)
        .map(|_| Tensor::new(vec![side, side, 3], (0..side * side * 3).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect::<Result<_, _>>()?;
    let enc = TextEncoder::new(&params, &vocab);
    let r = bench_cache(&texts, &images, a.repeats, &enc, Temperature::of(&params))?;
    write_json(&a.out.join("bench.json"), &json!({ "texts": texts.len(), "images": a.images, "report": r }))?;
    println!(
        "{} texts x {} images: cold {:.1} img/s, warm {:.1} img/s, speedup {:.1}x",
        texts.len(),
        a.images,
        r.cold_ips,
        r.warm_ips,
        r.speedup
    );
    Ok(())
}

fn stats_cmd(a: &StatsArgs) -> anyhow::Result<()> {
    let s = dataset_stats(&Annotations::load(&a.annotations)?);
    write_json(&a.out.join("stats.json"), &s)?;
    println!(
        "{} boxes in {} categories; {} small ({:.2}%)",
        s.total_boxes,
        s.per_category.len(),
        s.small_boxes,
        100.0 * s.small_share
    );
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> anyhow::Result<()> {
    let ds = synth_dataset(&SyntheticSignSpec::longtail8(a.seed), KnowledgeBase::builtin())?;
    let settings = RunSettings::new(TrainConfig { epochs: a.epochs, seed: a.seed, ..TrainConfig::default() });
    let rows = ablation_ladder(&ds, &settings)?;
    let table = format_ladder(&rows);
    fs::write(a.out.join("ladder.txt"), &table)?;
    write_json(&a.out.join("ladder.json"), &rows)?;
    print!("{table}");
    Ok(())
}

fn configure_threads() -> anyhow::Result<usize> {
    let n = match std::env::var("TSRMCL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("TSRMCL_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(rayon::current_num_threads())
}

fn run(cmd: &Command) -> anyhow::Result<()> {
    let threads = configure_threads()?;
    cmd.validate()?;
    fs::create_dir_all(cmd.out()).with_context(|| format!("creating {}", cmd.out().display()))?;
    let argv: Vec<String> = std::env::args().collect();
    write_json(
        &cmd.out().join("config.json"),
        &json!({ "version": env!("CARGO_PKG_VERSION"), "threads": threads, "argv": argv, "resolved": cmd }),
    )?;
    log::info!("running with {threads} worker threads");
    match cmd {
        Command::BuildDataset(a) => build_dataset(a),
        Command::Synth(a) => synth(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Tokenize(a) => tokenize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::BenchCache(a) => bench_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run `tsrmcl --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
