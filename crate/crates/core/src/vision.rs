//! Detector-side feature operators on `H×W×C` feature maps.
//!
//! Every operator has a tape form (`*_var`) so it can sit inside a
//! differentiable graph, and a value form on [`FeatureMap`] / [`TextBank`].

use crate::error::{contract, dim_err, Result};
use crate::nn::{multi_head_attention, AttentionVars};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

/// Side of the pooled grid used by [`ipool_attention`].
pub const POOL_GRID: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return dim_err("FeatureMap", values.shape(), &[0, 0, 0]);
        }
        Ok(FeatureMap { values })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        FeatureMap::new(Tensor::new(vec![h, w, c], data)?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values.data()[(y * self.width() + x) * self.channels() + c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// `T` text embeddings of width `d`, stored as `[T×d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    values: Tensor,
}

impl TextBank {
    /// Rows are used as given.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return dim_err("TextBank", values.shape(), &[0, 0]);
        }
        Ok(TextBank { values })
    }

    /// Rows are scaled to unit norm first.
    pub fn normalized(values: Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let v = tape.constant(values);
        let n = tape.l2_normalize(v)?;
        TextBank::new(tape.value(n).clone())
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

fn hwc(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => dim_err(op, s, &[0, 0, 0]),
    }
}

fn check_stride(h: usize, w: usize, s: usize, op: &'static str) -> Result<()> {
    if s == 0 {
        return contract("stride must be at least 1");
    }
    if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return dim_err(op, &[h, w], &[s, s]);
    }
    Ok(())
}

/// Source index for every output element of the space-to-depth rearrangement.
///
/// Output `[H/s × W/s × C·s²]`; channel block `a·s + b` holds the phase
/// sub-grid starting at row offset `a`, column offset `b`.
fn spd_index(h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let (ho, wo) = (h / s, w / s);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..ho {
        for j in 0..wo {
            for a in 0..s {
                for b in 0..s {
                    for ch in 0..c {
                        idx.push(((i * s + a) * w + (j * s + b)) * c + ch);
                    }
                }
            }
        }
    }
    idx
}

pub fn spd_rearrange_var(tape: &mut Tape, x: Var, s: usize) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "spd_rearrange")?;
    check_stride(h, w, s, "spd_rearrange")?;
    tape.gather(x, spd_index(h, w, c, s), &[h / s, w / s, c * s * s])
}

/// Lossless space-to-depth.
pub fn spd_rearrange(x: &FeatureMap, s: usize) -> Result<FeatureMap> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    check_stride(h, w, s, "spd_rearrange")?;
    let src = x.values.data();
    let data = spd_index(h, w, c, s).into_iter().map(|i| src[i]).collect();
    FeatureMap::new(Tensor::new(vec![h / s, w / s, c * s * s], data)?)
}

/// Inverse of [`spd_rearrange`].
pub fn spd_inverse(y: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 0 || !y.channels().is_multiple_of(s * s) {
        return dim_err("spd_inverse", y.values.shape(), &[s]);
    }
    let (h, w, c) = (y.height() * s, y.width() * s, y.channels() / (s * s));
    let src = y.values.data();
    let mut data = vec![0.0; h * w * c];
    for (o, i) in spd_index(h, w, c, s).into_iter().enumerate() {
        data[i] = src[o];
    }
    FeatureMap::new(Tensor::new(vec![h, w, c], data)?)
}

/// How a stride-`s` stage reduces resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsample {
    /// Keeps only the `(0, 0)` phase sub-grid.
    Strided,
    /// Keeps every phase as a channel block.
    SpaceToDepth,
}

impl Downsample {
    fn retains(self, a: usize, b: usize) -> bool {
        match self {
            Downsample::Strided => a == 0 && b == 0,
            Downsample::SpaceToDepth => true,
        }
    }
}

/// Sum of the L2 norms of the phase sub-grids a downsampling path drops.
pub fn info_loss_for(x: &FeatureMap, s: usize, path: Downsample) -> Result<f64> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    check_stride(h, w, s, "info_loss")?;
    let mut total = 0.0;
    for a in 0..s {
        for b in 0..s {
            if path.retains(a, b) {
                continue;
            }
            let mut sq = 0.0;
            for y in (a..h).step_by(s) {
                for xx in (b..w).step_by(s) {
                    for ch in 0..c {
                        let v = x.at(y, xx, ch);
                        sq += v * v;
                    }
                }
            }
            total += sq.sqrt();
        }
    }
    Ok(total)
}

/// Information lost by a plain strided stage.
pub fn info_loss(x: &FeatureMap, s: usize) -> Result<f64> {
    info_loss_for(x, s, Downsample::Strided)
}

/// `LeakyReLU(conv(x) + bias)` with stride 1 and zero "same" padding.
/// `kernel` is `[k×k×Cin×Cout]`.
pub fn conv2d_nostride_var(tape: &mut Tape, x: Var, kernel: Var, bias: Var, negative_slope: f64) -> Result<Var> {
    let y = tape.conv2d_same(x, kernel, bias)?;
    tape.leaky_relu(y, negative_slope)
}

pub fn conv2d_nostride(x: &FeatureMap, kernel: &Tensor, bias: &Tensor, negative_slope: f64) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.values.clone());
    let k = tape.constant(kernel.clone());
    let b = tape.constant(bias.clone());
    let y = conv2d_nostride_var(&mut tape, xv, k, b, negative_slope)?;
    FeatureMap::new(tape.value(y).clone())
}

/// SPD stage followed by a non-strided convolution.
pub fn spd_conv_var(tape: &mut Tape, x: Var, s: usize, kernel: Var, bias: Var, negative_slope: f64) -> Result<Var> {
    let y = spd_rearrange_var(tape, x, s)?;
    conv2d_nostride_var(tape, y, kernel, bias, negative_slope)
}

/// Text-gated fusion: `concat(x, g ⊙ x)` along channels where
/// `g(h,w) = sigmoid(max_j ⟨x(h,w,:), text_j⟩)`.
pub fn tcsp_gate_var(tape: &mut Tape, x: Var, text: Var) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "tcsp_gate")?;
    let ts = tape.shape(text).to_vec();
    if ts.len() != 2 || ts[1] != c {
        return dim_err("tcsp_gate", &[h, w, c], &ts);
    }
    let t = ts[0];
    let flat = tape.reshape(x, &[h * w, c])?;
    let logits = tape.matmul_nt(flat, text)?;
    let argmax: Vec<usize> = tape
        .value(logits)
        .data()
        .chunks_exact(t)
        .enumerate()
        .map(|(p, row)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            p * t + best
        })
        .collect();
    let best = tape.gather(logits, argmax, &[h * w])?;
    let g = tape.sigmoid(best)?;
    let gated = tape.mul_rows(flat, g)?;
    let fused = tape.concat(&[flat, gated], 1)?;
    tape.reshape(fused, &[h, w, 2 * c])
}

pub fn tcsp_gate(x: &FeatureMap, text: &TextBank) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.values.clone());
    let tv = tape.constant(text.values.clone());
    let y = tcsp_gate_var(&mut tape, xv, tv)?;
    FeatureMap::new(tape.value(y).clone())
}

/// Adaptive `[start, end)` bounds of cell `i` when splitting `n` into `cells`.
fn cell_bounds(n: usize, cells: usize, i: usize) -> (usize, usize) {
    let start = i * n / cells;
    let end = ((i + 1) * n).div_ceil(cells);
    (start, end)
}

/// Max-pools an `[H×W×C]` map to `[9×C]` tokens over an even 3×3 partition
/// (row-major cell order).
pub fn pool_grid_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "pool_grid")?;
    if h < POOL_GRID || w < POOL_GRID {
        return dim_err("pool_grid", &[h, w], &[POOL_GRID, POOL_GRID]);
    }
    let data = tape.value(x).data();
    let mut index = Vec::with_capacity(POOL_GRID * POOL_GRID * c);
    for gy in 0..POOL_GRID {
        let (y0, y1) = cell_bounds(h, POOL_GRID, gy);
        for gx in 0..POOL_GRID {
            let (x0, x1) = cell_bounds(w, POOL_GRID, gx);
            for ch in 0..c {
                let mut best = (y0 * w + x0) * c + ch;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = (y * w + xx) * c + ch;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                index.push(best);
            }
        }
    }
    tape.gather(x, index, &[POOL_GRID * POOL_GRID, c])
}

/// `W' = W + MHA(query = W, key = value = tokens)`.
pub fn pooled_cross_attention_var(
    tape: &mut Tape,
    text: Var,
    tokens: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let upd = multi_head_attention(tape, text, tokens, w, heads, None)?;
    tape.add(text, upd)
}

/// I-Pooling attention: every scale is pooled to 3×3 tokens, the tokens of
/// all scales are stacked, and the text bank attends to them residually.
pub fn ipool_attention_var(tape: &mut Tape, scales: &[Var], text: Var, w: &AttentionVars, heads: usize) -> Result<Var> {
    if scales.is_empty() {
        return contract("ipool_attention needs at least one scale");
    }
    let d = tape.shape(text)[1];
    let mut pooled = Vec::with_capacity(scales.len());
    for &s in scales {
        let (_, _, c) = hwc(tape, s, "ipool_attention")?;
        if c != d {
            return dim_err("ipool_attention", tape.shape(s), tape.shape(text));
        }
        pooled.push(pool_grid_var(tape, s)?);
    }
    let tokens = if pooled.len() == 1 { pooled[0] } else { tape.concat(&pooled, 0)? };
    pooled_cross_attention_var(tape, text, tokens, w, heads)
}

/// Projection weights for [`ipool_attention`], each `[d×d]`.
#[derive(Debug, Clone)]
pub struct IPoolWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl IPoolWeights {
    fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.constant(self.w_q.clone()),
            w_k: tape.constant(self.w_k.clone()),
            w_v: tape.constant(self.w_v.clone()),
            w_o: Some(tape.constant(self.w_o.clone())),
        }
    }
}

pub fn ipool_attention(
    scales: &[FeatureMap],
    text: &TextBank,
    weights: &IPoolWeights,
    heads: usize,
) -> Result<TextBank> {
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape);
    let sv: Vec<Var> = scales.iter().map(|s| tape.constant(s.values.clone())).collect();
    let tv = tape.constant(text.values.clone());
    let out = ipool_attention_var(&mut tape, &sv, tv, &w, heads)?;
    TextBank::new(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init;

    fn map(h: usize, w: usize, c: usize, data: &[f64]) -> FeatureMap {
        FeatureMap::new(Tensor::new(vec![h, w, c], data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn spd_identity_and_phase_order() {
        let x = map(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spd_rearrange(&x, 1).unwrap(), x);
        let y = spd_rearrange(&x, 2).unwrap();
        assert_eq!(y.tensor().shape(), &[1, 1, 4]);
        assert_eq!(y.tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn spd_rejects_indivisible_dims() {
        let x = map(3, 2, 1, &[0.0; 6]);
        assert!(spd_rearrange(&x, 2).is_err());
        assert!(info_loss(&x, 2).is_err());
        assert!(spd_rearrange(&x, 0).is_err());
    }

    #[test]
    fn info_loss_cases() {
        let x = map(2, 2, 1, &[0.0, 5.0, 0.0, 0.0]);
        assert_eq!(info_loss(&x, 2).unwrap(), 5.0);
        assert_eq!(info_loss(&x, 1).unwrap(), 0.0);
        assert_eq!(info_loss(&map(4, 4, 2, &[0.0; 32]), 2).unwrap(), 0.0);
        assert_eq!(info_loss_for(&x, 2, Downsample::SpaceToDepth).unwrap(), 0.0);
    }

    #[test]
    fn conv_identity_and_constant_cases() {
        let x = map(2, 3, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::vector(vec![0.0]).unwrap();
        assert_eq!(conv2d_nostride(&x, &k, &b, 0.01).unwrap(), x);

        let k3 = Tensor::zeros(&[3, 3, 1, 1]);
        let neg = Tensor::vector(vec![-2.0]).unwrap();
        let y = conv2d_nostride(&x, &k3, &neg, 0.01).unwrap();
        assert!(y.tensor().data().iter().all(|&v| (v - (-0.02)).abs() < 1e-15));

        let even = Tensor::zeros(&[2, 2, 1, 1]);
        assert!(conv2d_nostride(&x, &even, &b, 0.01).is_err());
    }

    #[test]
    fn conv_averaging_kernel_hand_value() {
        // 3×3 map 1..9, 3×3 averaging kernel: centre = mean(1..9) = 5,
        // corner (0,0) sees 1,2,4,5 -> 12/9.
        let x = map(3, 3, 1, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0);
        let b = Tensor::vector(vec![0.0]).unwrap();
        let y = conv2d_nostride(&x, &k, &b, 0.01).unwrap();
        assert!((y.at(1, 1, 0) - 5.0).abs() < 1e-12);
        assert!((y.at(0, 0, 0) - 12.0 / 9.0).abs() < 1e-12);
        assert_eq!(y.height(), 3);
    }

    #[test]
    fn tcsp_gate_cases() {
        let text = TextBank::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let zero = map(2, 2, 2, &[0.0; 8]);
        assert!(tcsp_gate(&zero, &text).unwrap().tensor().data().iter().all(|&v| v == 0.0));

        let x = map(1, 1, 2, &[1.0, 0.0]);
        let y = tcsp_gate(&x, &text).unwrap();
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        let d = y.tensor().data();
        assert_eq!(y.channels(), 4);
        assert_eq!(&d[..2], &[1.0, 0.0]);
        assert!((d[2] - s1).abs() < 1e-15 && d[3] == 0.0);

        // single text row equal to a zero pixel vector: gate = sigmoid(0)
        let z = map(1, 1, 2, &[0.0, 0.0]);
        let tb = TextBank::new(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.tensor().clone());
        let tv = tape.constant(tb.tensor().clone());
        let flat = tape.reshape(zv, &[1, 2]).unwrap();
        let logit = tape.matmul_nt(flat, tv).unwrap();
        let g = tape.sigmoid(logit).unwrap();
        assert_eq!(tape.value(g).item(), 0.5);

        let bad = TextBank::new(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(tcsp_gate(&x, &bad).is_err());
    }

    #[test]
    fn pool_grid_partitions_evenly() {
        let x = FeatureMap::from_fn(6, 6, 1, |y, x, _| (y * 6 + x) as f64).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.tensor().clone());
        let p = pool_grid_var(&mut tape, xv).unwrap();
        // cell maxima are the bottom-right pixel of each 2×2 block
        assert_eq!(tape.value(p).data(), &[7., 9., 11., 19., 21., 23., 31., 33., 35.]);
        let small = tape.constant(Tensor::zeros(&[2, 5, 1]));
        assert!(pool_grid_var(&mut tape, small).is_err());
    }

    fn weights(d: usize, seed: u64) -> IPoolWeights {
        let mut rng = init::rng(seed);
        IPoolWeights {
            w_q: init::uniform(&[d, d], 1.0, &mut rng),
            w_k: init::uniform(&[d, d], 1.0, &mut rng),
            w_v: init::uniform(&[d, d], 1.0, &mut rng),
            w_o: init::uniform(&[d, d], 1.0, &mut rng),
        }
    }

    #[test]
    fn ipool_residual_identity_cases() {
        let d = 4;
        let text = TextBank::new(init::uniform(&[3, d], 1.0, &mut init::rng(1))).unwrap();
        let scales = vec![
            FeatureMap::new(Tensor::zeros(&[6, 6, d])).unwrap(),
            FeatureMap::new(Tensor::zeros(&[3, 4, d])).unwrap(),
        ];
        let mut w = weights(d, 2);
        w.w_v = Tensor::zeros(&[d, d]);
        assert_eq!(ipool_attention(&scales, &text, &w, 2).unwrap(), text);

        let random = vec![FeatureMap::new(init::uniform(&[5, 5, d], 1.0, &mut init::rng(4))).unwrap()];
        let mut w = weights(d, 5);
        w.w_o = Tensor::zeros(&[d, d]);
        assert_eq!(ipool_attention(&random, &text, &w, 2).unwrap(), text);
    }

    #[test]
    fn ipool_single_token_adds_value_projection() {
        let d = 2;
        let mut tape = Tape::new();
        let text = tape.constant(Tensor::matrix(2, d, vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let tok_t = Tensor::matrix(1, d, vec![2.0, -1.0]).unwrap();
        let tok = tape.constant(tok_t);
        let wv = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let w = AttentionVars {
            w_q: tape.constant(Tensor::eye(d)),
            w_k: tape.constant(Tensor::eye(d)),
            w_v: tape.constant(wv),
            w_o: Some(tape.constant(Tensor::eye(d))),
        };
        let out = pooled_cross_attention_var(&mut tape, text, tok, &w, 1).unwrap();
        // token·W_v = [2, 3]
        assert_eq!(tape.value(out).data(), &[3.0, 3.0, 2.5, 3.5]);
    }

    #[test]
    fn ipool_two_tokens_hand_mix() {
        // q = [1,0]; keys [1,0] and [0,0]; identity projections, d = 2, one head.
        // scores = [1, 0] / sqrt(2); weights = softmax; value mix of [1,0] and [0,0].
        let mut tape = Tape::new();
        let text = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let toks = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let eye = tape.constant(Tensor::eye(2));
        let w = AttentionVars { w_q: eye, w_k: eye, w_v: eye, w_o: Some(eye) };
        let out = pooled_cross_attention_var(&mut tape, text, toks, &w, 1).unwrap();
        let e = (1.0 / 2f64.sqrt()).exp();
        let a = e / (e + 1.0);
        let d = tape.value(out).data();
        assert!((d[0] - (1.0 + a)).abs() < 1e-15 && d[1] == 0.0);
    }

    #[test]
    fn ipool_rejects_mismatched_width() {
        let text = TextBank::new(Tensor::zeros(&[1, 3])).unwrap();
        let scales = vec![FeatureMap::new(Tensor::zeros(&[3, 3, 2])).unwrap()];
        assert!(ipool_attention(&scales, &text, &weights(3, 0), 1).is_err());
    }
}
