//! Image-text similarity, the bidirectional contrastive objective,
//! softmax classification and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{image_features_var, project_var, text_features_var, EncoderParams};
use crate::error::{contract, dim_err, Result};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

/// Parameter name under which the learnable log-temperature is stored.
pub const GAMMA_PARAM: &str = "temperature.gamma";
const UNIT_TOL: f64 = 1e-9;

/// `tau = exp(gamma)`, positive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub gamma: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature { gamma: 14f64.ln() }
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return contract(format!("temperature {tau} must be positive and finite"));
        }
        Ok(Temperature { gamma: tau.ln() })
    }

    pub fn tau(&self) -> f64 {
        self.gamma.exp()
    }

    /// Reads the stored temperature, falling back to the default init.
    pub fn of(params: &EncoderParams) -> Self {
        params.store.get(GAMMA_PARAM).map(|t| Temperature { gamma: t.item() }).unwrap_or_default()
    }

    pub fn store_into(&self, params: &mut EncoderParams) {
        params.store.insert(GAMMA_PARAM, Tensor::scalar(self.gamma).expect("finite gamma"));
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return dim_err("similarity", t.shape(), &[0, 0]);
    }
    for i in 0..t.shape()[0] {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return contract(format!("{what} row {i} has norm {n}, expected 1"));
        }
    }
    Ok(())
}

/// `S[i][j] = fv_i · ft_j` over unit-norm rows.
pub fn similarity(fv: &Tensor, ft: &Tensor) -> Result<Tensor> {
    check_unit_rows(fv, "image embedding")?;
    check_unit_rows(ft, "text embedding")?;
    let mut tape = Tape::new();
    let a = tape.constant(fv.clone());
    let b = tape.constant(ft.clone());
    let s = tape.matmul_nt(a, b)?;
    Ok(tape.value(s).clone())
}

/// Mean of row-wise and column-wise cross-entropy on the diagonal of `τ·S`.
pub fn contrastive_loss_var(tape: &mut Tape, s: Var, gamma: Var) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return dim_err("contrastive_loss", &shape, &[shape[0], shape[0]]);
    }
    let b = shape[0] as f64;
    let tau = tape.exp(gamma)?;
    let logits = tape.scale_by(s, tau)?;
    let rows = tape.log_softmax(logits, 1)?;
    let cols = tape.log_softmax(logits, 0)?;
    let both = tape.add(rows, cols)?;
    let d = tape.diag(both)?;
    let total = tape.sum(d)?;
    tape.scale(total, -1.0 / (2.0 * b))
}

pub fn contrastive_loss(s: &Tensor, temperature: Temperature) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let g = tape.constant(Tensor::scalar(temperature.gamma)?);
    let l = contrastive_loss_var(&mut tape, sv, g)?;
    Ok(tape.value(l).item())
}

/// Softmax over `τ · (f_v · t_j)` for every class text `t_j`.
pub fn classify(fv: &Tensor, class_texts: &Tensor, temperature: Temperature) -> Result<Vec<f64>> {
    if class_texts.rank() != 2 || class_texts.shape()[0] == 0 {
        return contract("classification needs at least one class text");
    }
    let v = fv.reshape(&[1, fv.numel()])?;
    let s = similarity(&v, class_texts)?;
    let tau = temperature.tau();
    let logits: Vec<f64> = s.data().iter().map(|x| tau * x).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

pub fn argmax(p: &[f64]) -> usize {
    // First index wins on ties, matching nearest-neighbour order.
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub gamma_init: f64,
    /// Upper bound on `tau`, enforced after every optimizer step.
    pub tau_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 32, epochs: 200, lr: 3e-4, seed: 0, gamma_init: 14f64.ln(), tau_max: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub trace: Vec<EpochStat>,
    /// Number of one-pair batches, whose loss is identically zero.
    pub singleton_batches: usize,
}

fn batch_loss(
    tape: &mut Tape,
    params: &EncoderParams,
    bound: &crate::nn::Bound,
    images: &[&Tensor],
    texts: &[&TokenSequence],
) -> Result<Var> {
    let mut img_rows = Vec::with_capacity(images.len());
    for im in images {
        let x = tape.constant((*im).clone());
        img_rows.push(image_features_var(tape, bound, &params.vit, x)?);
    }
    let fv = tape.concat(&img_rows, 0)?;
    let ev = project_var(tape, fv, bound.get("vit.proj"))?;

    // Each distinct description is encoded once and gathered per pair.
    let mut slot: HashMap<&[u32], usize> = HashMap::new();
    let mut uniq: Vec<&[u32]> = Vec::new();
    let pick: Vec<usize> = texts
        .iter()
        .map(|t| {
            *slot.entry(&t.ids).or_insert_with(|| {
                uniq.push(&t.ids);
                uniq.len() - 1
            })
        })
        .collect();
    let tok = bound.get("text.tok");
    let mut txt_rows = Vec::with_capacity(uniq.len());
    for ids in &uniq {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x0 = tape.select_rows(tok, &rows)?;
        txt_rows.push(text_features_var(tape, bound, &params.text, x0, ids)?);
    }
    let ft = tape.concat(&txt_rows, 0)?;
    let et = project_var(tape, ft, bound.get("text.proj"))?;
    let et = tape.select_rows(et, &pick)?;
    let s = tape.matmul_nt(ev, et)?;
    contrastive_loss_var(tape, s, bound.get(GAMMA_PARAM))
}

/// Contrastive loss of one batch and its gradient for every stored parameter.
pub fn loss_and_grads(
    params: &EncoderParams,
    images: &[&Tensor],
    texts: &[&TokenSequence],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if images.len() != texts.len() || images.is_empty() {
        return dim_err("loss_and_grads", &[images.len()], &[texts.len()]);
    }
    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape, true);
    let loss = batch_loss(&mut tape, params, &bound, images, texts)?;
    let grads = tape.backward(loss)?;
    let out = bound.iter().map(|(n, v)| (n.to_string(), grads.wrt(v))).collect();
    Ok((tape.value(loss).item(), out))
}

/// Trains both encoders and the temperature with Adam on shuffled batches.
pub fn train(
    images: &[Tensor],
    texts: &[TokenSequence],
    mut params: EncoderParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if images.len() != texts.len() {
        return dim_err("train", &[images.len()], &[texts.len()]);
    }
    if images.len() < 2 {
        return contract("contrastive training needs at least two pairs");
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return contract("batch size and epochs must be positive");
    }
    if !(cfg.tau_max > 0.0) {
        return contract("tau ceiling must be positive");
    }
    let gamma_max = cfg.tau_max.ln();
    Temperature { gamma: cfg.gamma_init.min(gamma_max) }.store_into(&mut params);
    let names: Vec<String> = params.store.names().map(str::to_string).collect();
    let init: Vec<&Tensor> = names.iter().map(|n| params.store.get(n)).collect::<Result<_>>()?;
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut singleton_batches = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 {
                singleton_batches += 1;
            }
            let ims: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let txs: Vec<&TokenSequence> = chunk.iter().map(|&i| &texts[i]).collect();
            let (loss, mut grads) = loss_and_grads(&params, &ims, &txs)?;
            sum += loss;
            batches += 1;
            let g: Vec<Tensor> = names.iter().map(|n| grads.remove(n).expect("every parameter is bound")).collect();
            let mut ps: Vec<Tensor> = names.iter().map(|n| params.store.get(n).cloned()).collect::<Result<_>>()?;
            adam.step(&mut ps, &g)?;
            for (n, p) in names.iter().zip(ps) {
                params.store.insert(n.clone(), p);
            }
            let t = Temperature::of(&params);
            if t.gamma > gamma_max {
                Temperature { gamma: gamma_max }.store_into(&mut params);
            }
        }
        let stat = EpochStat { epoch, mean_loss: sum / batches as f64, tau: Temperature::of(&params).tau() };
        log::debug!("epoch {} loss {:.5} tau {:.3}", stat.epoch, stat.mean_loss, stat.tau);
        trace.push(stat);
    }
    if singleton_batches > 0 {
        log::warn!("{singleton_batches} batches held a single pair and contributed zero loss");
    }
    Ok(TrainOutcome { params, trace, singleton_batches })
}

/// Writes `epoch,mean_loss,tau` rows.
pub fn write_trace_csv(path: &Path, trace: &[EpochStat]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,mean_loss,tau")?;
    for s in trace {
        writeln!(f, "{},{},{}", s.epoch, s.mean_loss, s.tau)?;
    }
    f.flush()?;
    Ok(())
}

fn stack(rows: Vec<Tensor>, d: usize) -> Tensor {
    let n = rows.len();
    let data = rows.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![n, d], data).expect("rows share the embedding width")
}

/// Unit embeddings `[N×d]` for `images`, computed in parallel.
pub fn embed_images(params: &EncoderParams, images: &[Tensor]) -> Result<Tensor> {
    let rows = images.par_iter().map(|im| params.embed_image(im)).collect::<Result<Vec<_>>>()?;
    Ok(stack(rows, params.shared_dim()))
}

/// Unit embeddings `[N×d]` for token sequences, computed in parallel.
pub fn embed_texts(params: &EncoderParams, texts: &[TokenSequence]) -> Result<Tensor> {
    let rows = texts.par_iter().map(|t| params.embed_text(t)).collect::<Result<Vec<_>>>()?;
    Ok(stack(rows, params.shared_dim()))
}

/// Mean similarity of matched pairs versus pairs whose class labels differ.
pub fn pair_separation(
    params: &EncoderParams,
    images: &[Tensor],
    labels: &[usize],
    class_texts: &[TokenSequence],
) -> Result<(f64, f64)> {
    let ev = embed_images(params, images)?;
    let et = embed_texts(params, class_texts)?;
    let s = similarity(&ev, &et)?;
    let (mut m, mut nm, mut x, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        for (j, v) in s.row(i).iter().enumerate() {
            if j == li {
                m += v;
                nm += 1;
            } else {
                x += v;
                nx += 1;
            }
        }
    }
    if nm == 0 || nx == 0 {
        return contract("separation needs at least two classes");
    }
    Ok((m / nm as f64, x / nx as f64))
}
