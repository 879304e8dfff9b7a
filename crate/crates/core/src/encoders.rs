//! Toy-scale ViT image encoder and Transformer text encoder, each pooled at
//! the `[CLS]` row and projected into a shared unit-norm space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::nn::{multi_head_attention, sinusoidal_positions, AttentionVars, Bound, ManifestEntry, ParamStore};
use crate::tensor::init::{rng, uniform, uniform_fan_in};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_factor: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig { image_side: 32, channels: 3, patch: 8, width: 32, layers: 2, heads: 2, mlp_factor: 4 }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return contract(format!("image side {} is not divisible by patch {}", self.image_side, self.patch));
        }
        check_width(self.width, self.heads)?;
        if self.channels == 0 || self.layers == 0 || self.mlp_factor == 0 {
            return contract("vit channels, layers and mlp factor must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        TextEncoderConfig { vocab_size, max_len: 64, width: 32, layers: 2, heads: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        check_width(self.width, self.heads)?;
        if self.vocab_size == 0 || self.max_len < 2 || self.layers == 0 {
            return contract("text vocab, max length and layers must be positive");
        }
        Ok(())
    }
}

fn check_width(d: usize, heads: usize) -> Result<()> {
    if d == 0 || heads == 0 || !d.is_multiple_of(heads) {
        return contract(format!("width {d} is not divisible by {heads} heads"));
    }
    Ok(())
}

/// Splits an `H×W×C` image into row-major patches, each flattened row-major.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    let index = patch_index(h, w, c, p)?;
    let src = image.data();
    let n = (h / p) * (w / p);
    Ok(Tensor::from_parts(vec![n, p * p * c], index.iter().map(|&i| src[i]).collect()))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    let index = patch_index(h, w, c, p)?;
    if patches.numel() != index.len() {
        return dim_err("unpatchify", patches.shape(), &[h, w, c]);
    }
    let mut out = vec![0.0; h * w * c];
    for (k, &i) in index.iter().enumerate() {
        out[i] = patches.data()[k];
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => dim_err("image", image.shape(), &[0, 0, 0]),
    }
}

/// Source offset in the `H×W×C` buffer of every patchified element.
fn patch_index(h: usize, w: usize, c: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return dim_err("patchify", &[h, w, c], &[p, p]);
    }
    let mut index = Vec::with_capacity(h * w * c);
    for py in 0..h / p {
        for px in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((py * p + dy) * w + px * p + dx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    Ok(index)
}

/// All encoder weights plus the configuration and seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vit: ViTConfig,
    pub text: TextEncoderConfig,
    pub seed: u64,
    pub store: ParamStore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    vit: ViTConfig,
    text: TextEncoderConfig,
    seed: u64,
    params: Vec<ManifestEntry>,
}

impl EncoderParams {
    pub fn init(vit: ViTConfig, text: TextEncoderConfig, seed: u64) -> Result<Self> {
        vit.validate()?;
        text.validate()?;
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let d = vit.width;
        s.insert("vit.patch.w", uniform_fan_in(&[vit.patch_dim(), d], vit.patch_dim(), &mut r));
        s.insert("vit.patch.b", Tensor::zeros(&[d]));
        s.insert("vit.cls", uniform_fan_in(&[1, d], d, &mut r));
        for l in 0..vit.layers {
            let pre = format!("vit.l{l}");
            for m in ["w_q", "w_k", "w_v", "w_o"] {
                s.insert(format!("{pre}.attn.{m}"), uniform_fan_in(&[d, d], d, &mut r));
            }
            let hd = d * vit.mlp_factor;
            s.insert(format!("{pre}.mlp.w1"), uniform_fan_in(&[d, hd], d, &mut r));
            s.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[hd]));
            s.insert(format!("{pre}.mlp.w2"), uniform_fan_in(&[hd, d], hd, &mut r));
            s.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[d]));
            insert_norm(&mut s, &format!("{pre}.ln1"), d);
            insert_norm(&mut s, &format!("{pre}.ln2"), d);
        }
        s.insert("vit.proj", uniform_fan_in(&[d, d], d, &mut r));

        let dt = text.width;
        s.insert("text.tok", uniform(&[text.vocab_size, dt], 1.0, &mut r));
        for l in 0..text.layers {
            let pre = format!("text.l{l}");
            for m in ["w_q", "w_k", "w_v"] {
                s.insert(format!("{pre}.attn.{m}"), uniform_fan_in(&[dt, dt], dt, &mut r));
            }
            insert_norm(&mut s, &format!("{pre}.ln"), dt);
        }
        s.insert("text.proj", uniform_fan_in(&[dt, d], dt, &mut r));
        Ok(EncoderParams { vit, text, seed, store: s })
    }

    /// Width of the shared embedding space.
    pub fn shared_dim(&self) -> usize {
        self.vit.width
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    /// Writes `params.bin` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (blob, params) = self.store.to_checkpoint();
        std::fs::write(dir.join("params.bin"), blob)?;
        let m = Manifest { vit: self.vit, text: self.text, seed: self.seed, params };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let blob = std::fs::read(dir.join("params.bin"))?;
        let store = ParamStore::from_checkpoint(&blob, &m.params)?;
        let expect = EncoderParams::init(m.vit, m.text, m.seed)?;
        for (name, t) in expect.store.iter() {
            let got = store.get(name)?;
            if got.shape() != t.shape() {
                return dim_err("checkpoint", got.shape(), t.shape());
            }
        }
        Ok(EncoderParams { vit: m.vit, text: m.text, seed: m.seed, store })
    }

    /// Unit-norm image embedding.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind_prefix(&mut tape, "vit.", false);
        let x = tape.constant(image.clone());
        let f = image_features_var(&mut tape, &b, &self.vit, x)?;
        let e = project_var(&mut tape, f, b.get("vit.proj"))?;
        Ok(row_vector(tape.value(e)))
    }

    /// Unit-norm text embedding.
    pub fn embed_text(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind_prefix(&mut tape, "text.l", false);
        let x0 = self.lookup_tokens(&mut tape, &seq.ids)?;
        let f = text_features_var(&mut tape, &b, &self.text, x0, &seq.ids)?;
        let proj = tape.constant(self.store.get("text.proj")?.clone());
        let e = project_var(&mut tape, f, proj)?;
        Ok(row_vector(tape.value(e)))
    }

    /// Token embedding rows as a constant, avoiding a copy of the full table.
    fn lookup_tokens(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        let table = self.store.get("text.tok")?;
        let d = self.text.width;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= self.text.vocab_size {
                return contract(format!("token id {id} outside vocab of {}", self.text.vocab_size));
            }
            data.extend_from_slice(table.row(id as usize));
        }
        Ok(tape.constant(Tensor::from_parts(vec![ids.len(), d], data)))
    }
}

fn insert_norm(s: &mut ParamStore, prefix: &str, d: usize) {
    s.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    s.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn row_vector(t: &Tensor) -> Tensor {
    Tensor::from_parts(vec![t.numel()], t.data().to_vec())
}

fn norm(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, b.get(&format!("{prefix}.g")), b.get(&format!("{prefix}.b")), LN_EPS)
}

/// `f_v` as a `[1×d]` row: patch embedding, `[CLS]`, positions, then
/// post-norm blocks `LN(Attn(Z) + Z)` and `LN(MLP(Z) + Z)`.
pub fn image_features_var(tape: &mut Tape, b: &Bound, cfg: &ViTConfig, image: Var) -> Result<Var> {
    let s = cfg.image_side;
    if tape.shape(image) != [s, s, cfg.channels] {
        return dim_err("encode_image", tape.shape(image), &[s, s, cfg.channels]);
    }
    let index = patch_index(s, s, cfg.channels, cfg.patch)?;
    let n = cfg.num_patches();
    let patches = tape.gather(image, index, &[n, cfg.patch_dim()])?;
    let emb = tape.linear(patches, b.get("vit.patch.w"), Some(b.get("vit.patch.b")))?;
    let z = tape.concat(&[b.get("vit.cls"), emb], 0)?;
    let pos = tape.constant(sinusoidal_positions(n + 1, cfg.width));
    let mut z = tape.add(z, pos)?;
    for l in 0..cfg.layers {
        let pre = format!("vit.l{l}");
        let w = AttentionVars::from_bound(b, &format!("{pre}.attn"), true);
        let a = multi_head_attention(tape, z, z, &w, cfg.heads, None)?;
        let r = tape.add(a, z)?;
        z = norm(tape, b, &format!("{pre}.ln1"), r)?;
        let h = tape.linear(z, b.get(&format!("{pre}.mlp.w1")), Some(b.get(&format!("{pre}.mlp.b1"))))?;
        let h = tape.gelu(h)?;
        let m = tape.linear(h, b.get(&format!("{pre}.mlp.w2")), Some(b.get(&format!("{pre}.mlp.b2"))))?;
        let r = tape.add(m, z)?;
        z = norm(tape, b, &format!("{pre}.ln2"), r)?;
    }
    tape.select_rows(z, &[0])
}

/// `f_t` as a `[1×d]` row from looked-up token embeddings `x0: [T×d]`.
///
/// Each block is `LN(softmax(QKᵀ/√d_h)V + E)` with `[PAD]` keys masked.
pub fn text_features_var(tape: &mut Tape, b: &Bound, cfg: &TextEncoderConfig, x0: Var, ids: &[u32]) -> Result<Var> {
    let t = ids.len();
    if t > cfg.max_len {
        return contract(format!("sequence of {t} tokens exceeds max length {}", cfg.max_len));
    }
    if tape.shape(x0) != [t, cfg.width] {
        return dim_err("encode_text", tape.shape(x0), &[t, cfg.width]);
    }
    let mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
    if !mask.first().copied().unwrap_or(false) {
        return contract("text sequence must start with a non-padding token");
    }
    let pos = tape.constant(sinusoidal_positions(t, cfg.width));
    let mut e = tape.add(x0, pos)?;
    for l in 0..cfg.layers {
        let pre = format!("text.l{l}");
        let w = AttentionVars::from_bound(b, &format!("{pre}.attn"), false);
        let a = multi_head_attention(tape, e, e, &w, cfg.heads, Some(&mask))?;
        let r = tape.add(a, e)?;
        e = norm(tape, b, &format!("{pre}.ln"), r)?;
    }
    tape.select_rows(e, &[0])
}

/// Linear projection of `[B×d]` features followed by row-wise l2 normalization.
pub fn project_var(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let y = tape.matmul(f, w)?;
    tape.l2_normalize(y)
}

/// Projects a feature vector `f: [d]` into the shared space with `w: [d×d']`.
pub fn project_to_shared(f: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.reshape(&[1, f.numel()])?);
    let wv = tape.constant(w.clone());
    let e = project_var(&mut tape, fv, wv).map_err(|e| match e {
        Error::Degenerate(_) => Error::Degenerate("projected feature is the zero vector".into()),
        other => other,
    })?;
    Ok(row_vector(tape.value(e)))
}

/// Raw `[CLS]` image feature `f_v: [d]` before projection.
pub fn encode_image(image: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.store.bind_prefix(&mut tape, "vit.", false);
    let x = tape.constant(image.clone());
    let f = image_features_var(&mut tape, &b, &params.vit, x)?;
    Ok(row_vector(tape.value(f)))
}

/// Raw `[CLS]` text feature `f_t: [d]` before projection.
pub fn encode_text(seq: &TokenSequence, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.store.bind_prefix(&mut tape, "text.l", false);
    let x0 = params.lookup_tokens(&mut tape, &seq.ids)?;
    let f = text_features_var(&mut tape, &b, &params.text, x0, &seq.ids)?;
    Ok(row_vector(tape.value(f)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, SEP};

    fn seq(ids: Vec<u32>) -> TokenSequence {
        TokenSequence { offsets: vec![(0, 0); ids.len()], ids, protected_spans: vec![], text: String::new() }
    }

    fn small() -> EncoderParams {
        EncoderParams::init(ViTConfig::default(), TextEncoderConfig::new(20), 7).unwrap()
    }

    #[test]
    fn patchify_single_patch_and_ramp() {
        let img = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), [1, 8]);
        assert_eq!(p.data(), img.data());

        let ramp = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&ramp, 2).unwrap();
        assert_eq!(p.data(), [0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]);
        assert_eq!(unpatchify(&p, 4, 4, 1, 2).unwrap(), ramp);
        assert!(patchify(&ramp, 3).is_err());
    }

    #[test]
    fn encoders_are_deterministic() {
        let a = small();
        let b = small();
        let img = uniform(&[32, 32, 3], 1.0, &mut rng(1));
        assert_eq!(encode_image(&img, &a).unwrap(), encode_image(&img, &b).unwrap());
        let s = seq(vec![CLS, SEP]);
        let f = encode_text(&s, &a).unwrap();
        assert_eq!(f.shape(), [32]);
        assert!(f.data().iter().all(|v| v.is_finite()));
        assert_eq!(f, encode_text(&s, &b).unwrap());
    }

    #[test]
    fn padding_does_not_change_text_feature() {
        let p = small();
        let base = encode_text(&seq(vec![CLS, 7, 9, SEP]), &p).unwrap();
        let padded = encode_text(&seq(vec![CLS, 7, 9, SEP, PAD, PAD, PAD]), &p).unwrap();
        assert!(base.max_abs_diff(&padded) < 1e-12);
    }

    #[test]
    fn overlong_text_is_rejected() {
        let p = small();
        assert!(encode_text(&seq(vec![CLS; 65]), &p).is_err());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let p = small();
        assert!(encode_image(&Tensor::zeros(&[16, 16, 3]), &p).is_err());
    }

    #[test]
    fn projection_contracts() {
        let v = Tensor::vector(vec![0.6, 0.8, 0.0]).unwrap();
        let out = project_to_shared(&v, &Tensor::eye(3)).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
        assert!(matches!(project_to_shared(&v, &Tensor::zeros(&[3, 3])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = small();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let q = EncoderParams::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
    }
}
