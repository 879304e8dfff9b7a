//! Named parameter storage and tape-level building blocks shared by the
//! encoders and the fusion operators.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered map of parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }

    /// Registers only the tensors whose name starts with `prefix`.
    pub fn bind_prefix(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_prefix("")
    }

    /// Fingerprint restricted to tensors whose name starts with `prefix`.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Writes all tensors back-to-back plus a manifest of names and offsets.
    pub fn to_checkpoint(&self) -> (Vec<u8>, Vec<ManifestEntry>) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = t.to_bytes();
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                len: bytes.len() as u64,
            });
            blob.extend_from_slice(&bytes);
        }
        (blob, entries)
    }

    pub fn from_checkpoint(blob: &[u8], entries: &[ManifestEntry]) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in entries {
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > blob.len() {
                return Err(Error::Parse(format!(
                    "parameter {} spans bytes {start}..{end} beyond a {}-byte blob",
                    e.name,
                    blob.len()
                )));
            }
            let t = Tensor::from_bytes(&blob[start..end])?;
            if t.shape() != e.shape.as_slice() {
                return dim_err("checkpoint", t.shape(), &e.shape);
            }
            store.insert(e.name.clone(), t);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// Parameters registered on a particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Projection matrices of one multi-head attention layer, all `[d×d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    /// Output projection; heads are concatenated unprojected when absent.
    pub w_o: Option<Var>,
}

impl AttentionVars {
    pub fn from_bound(b: &Bound, prefix: &str, with_output: bool) -> Self {
        AttentionVars {
            w_q: b.get(&format!("{prefix}.w_q")),
            w_k: b.get(&format!("{prefix}.w_k")),
            w_v: b.get(&format!("{prefix}.w_v")),
            w_o: with_output.then(|| b.get(&format!("{prefix}.w_o"))),
        }
    }
}

/// Multi-head scaled dot-product attention.
///
/// `queries: [Tq×d]`, `keys_values: [Tk×d]`; each head attends with
/// `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h`. Keys with `key_mask[j] == false`
/// receive zero weight.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    w: &AttentionVars,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.shape(queries)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return contract(format!("width {d} is not divisible by {heads} heads"));
    }
    if tape.shape(keys_values)[1] != d {
        return dim_err("attention", tape.shape(queries), tape.shape(keys_values));
    }
    let dh = d / heads;
    let q = tape.matmul(queries, w.w_q)?;
    let k = tape.matmul(keys_values, w.w_k)?;
    let v = tape.matmul(keys_values, w.w_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = match key_mask {
            Some(mask) => tape.masked_softmax(scores, mask)?,
            None => tape.softmax(scores, 1)?,
        };
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    match w.w_o {
        Some(w_o) => tape.matmul(merged, w_o),
        None => Ok(merged),
    }
}

/// Fixed sinusoidal position table `[len×d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d], data)
}
