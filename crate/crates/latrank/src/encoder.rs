//! From-scratch transformer encoder with exact analytic gradients.
//!
//! Post-layer-norm blocks: attention and FFN outputs are added to the
//! residual stream first, normalized after. All arithmetic is f64; the
//! backward pass is hand-derived and checked against finite differences.
//! One forward call handles one encoded pair; batching and parallelism
//! live in the callers, which keeps every intermediate deterministic.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tokenizer::EncodedPair;

pub const LN_EPS: f64 = 1e-12;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            max_len: 256,
            vocab_size: 4,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "layers, heads, model_dim, and ffn_dim must all be positive".into(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must fit CLS, two SEPs, and content".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln1_scale: Array1<f64>,
    pub ln1_offset: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_scale: Array1<f64>,
    pub ln2_offset: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Parameters {
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

/// One sample from N(0, 0.02²), redrawn until it lands within two
/// standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}

/// Filled in a fixed element order so a given rng state always produces
/// the same tensor.
fn tn_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| truncated_normal(rng)).collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}

impl Parameters {
    /// Weights from the truncated normal, biases zero, layer-norm scale
    /// one and offset zero. Tensor fill order is fixed, so equal seeds
    /// give bit-identical parameters.
    pub fn init(cfg: &EncoderConfig) -> Result<Parameters> {
        let mut rng = seeds::rng_for(cfg.seed, seeds::domain::INIT);
        Parameters::init_with_rng(cfg, &mut rng)
    }

    pub fn init_with_rng(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Parameters> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let token_emb = tn_matrix(cfg.vocab_size, d, rng);
        let pos_emb = tn_matrix(cfg.max_len, d, rng);
        let seg_emb = tn_matrix(2, d, rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                w_q: tn_matrix(d, d, rng),
                b_q: Array1::zeros(d),
                w_k: tn_matrix(d, d, rng),
                b_k: Array1::zeros(d),
                w_v: tn_matrix(d, d, rng),
                b_v: Array1::zeros(d),
                w_o: tn_matrix(d, d, rng),
                b_o: Array1::zeros(d),
                ln1_scale: Array1::ones(d),
                ln1_offset: Array1::zeros(d),
                w1: tn_matrix(d, cfg.ffn_dim, rng),
                b1: Array1::zeros(cfg.ffn_dim),
                w2: tn_matrix(cfg.ffn_dim, d, rng),
                b2: Array1::zeros(d),
                ln2_scale: Array1::ones(d),
                ln2_offset: Array1::zeros(d),
            })
            .collect();
        Ok(Parameters { token_emb, pos_emb, seg_emb, layers })
    }

    pub fn zeros_like(&self) -> Parameters {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor as a named flat slice, in the declared (checkpoint)
    /// order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = vec![
            ("token_emb".into(), self.token_emb.as_slice().expect("standard layout")),
            ("pos_emb".into(), self.pos_emb.as_slice().expect("standard layout")),
            ("seg_emb".into(), self.seg_emb.as_slice().expect("standard layout")),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let entries: [(&str, &[f64]); 16] = [
                ("w_q", l.w_q.as_slice().expect("standard layout")),
                ("b_q", l.b_q.as_slice().expect("standard layout")),
                ("w_k", l.w_k.as_slice().expect("standard layout")),
                ("b_k", l.b_k.as_slice().expect("standard layout")),
                ("w_v", l.w_v.as_slice().expect("standard layout")),
                ("b_v", l.b_v.as_slice().expect("standard layout")),
                ("w_o", l.w_o.as_slice().expect("standard layout")),
                ("b_o", l.b_o.as_slice().expect("standard layout")),
                ("ln1_scale", l.ln1_scale.as_slice().expect("standard layout")),
                ("ln1_offset", l.ln1_offset.as_slice().expect("standard layout")),
                ("w1", l.w1.as_slice().expect("standard layout")),
                ("b1", l.b1.as_slice().expect("standard layout")),
                ("w2", l.w2.as_slice().expect("standard layout")),
                ("b2", l.b2.as_slice().expect("standard layout")),
                ("ln2_scale", l.ln2_scale.as_slice().expect("standard layout")),
                ("ln2_offset", l.ln2_offset.as_slice().expect("standard layout")),
            ];
            for (name, s) in entries {
                v.push((format!("layer{i}.{name}"), s));
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v: Vec<(String, &mut [f64])> = vec![
            ("token_emb".into(), self.token_emb.as_slice_mut().expect("standard layout")),
            ("pos_emb".into(), self.pos_emb.as_slice_mut().expect("standard layout")),
            ("seg_emb".into(), self.seg_emb.as_slice_mut().expect("standard layout")),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let entries: [(&str, &mut [f64]); 16] = [
                ("w_q", l.w_q.as_slice_mut().expect("standard layout")),
                ("b_q", l.b_q.as_slice_mut().expect("standard layout")),
                ("w_k", l.w_k.as_slice_mut().expect("standard layout")),
                ("b_k", l.b_k.as_slice_mut().expect("standard layout")),
                ("w_v", l.w_v.as_slice_mut().expect("standard layout")),
                ("b_v", l.b_v.as_slice_mut().expect("standard layout")),
                ("w_o", l.w_o.as_slice_mut().expect("standard layout")),
                ("b_o", l.b_o.as_slice_mut().expect("standard layout")),
                ("ln1_scale", l.ln1_scale.as_slice_mut().expect("standard layout")),
                ("ln1_offset", l.ln1_offset.as_slice_mut().expect("standard layout")),
                ("w1", l.w1.as_slice_mut().expect("standard layout")),
                ("b1", l.b1.as_slice_mut().expect("standard layout")),
                ("w2", l.w2.as_slice_mut().expect("standard layout")),
                ("b2", l.b2.as_slice_mut().expect("standard layout")),
                ("ln2_scale", l.ln2_scale.as_slice_mut().expect("standard layout")),
                ("ln2_offset", l.ln2_offset.as_slice_mut().expect("standard layout")),
            ];
            for (name, s) in entries {
                v.push((format!("layer{i}.{name}"), s));
            }
        }
        v
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &Parameters, factor: f64) {
        let others = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(others) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, scale: &Array1<f64>, offset: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for (c, v) in row.iter().enumerate() {
            xhat[(r, c)] = (v - mean) * is;
        }
    }
    let y = &xhat * scale + offset;
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(
    dy: &Array2<f64>,
    scale: &Array1<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.ncols() as f64;
    let dxhat = dy * scale;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let drow = dxhat.row(r);
        let xrow = cache.xhat.row(r);
        let mean_d = drow.sum() / n;
        let mean_dx = drow.dot(&xrow) / n;
        let is = cache.inv_std[r];
        for c in 0..dy.ncols() {
            dx[(r, c)] = is * (dxhat[(r, c)] - mean_d - cache.xhat[(r, c)] * mean_dx);
        }
    }
    let dscale = (dy * &cache.xhat).sum_axis(Axis(0));
    let doffset = dy.sum_axis(Axis(0));
    (dx, dscale, doffset)
}

/// Softmax along rows after forcing masked key columns to -inf. Rows are
/// processed independently with left-to-right sums, so appending masked
/// columns never perturbs existing probabilities.
fn masked_softmax_rows(scores: &mut Array2<f64>, key_mask: &[u8]) {
    for (j, m) in key_mask.iter().enumerate() {
        if *m == 0 {
            scores.column_mut(j).fill(f64::NEG_INFINITY);
        }
    }
    for mut row in scores.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(max.is_finite(), "attention row with every key masked");
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    use rand::Rng;
    let keep = 1.0 - p;
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln1: LnCache,
    x1: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln2: LnCache,
}

impl LayerCache {
    /// Post-softmax attention rows for one head (probability rows).
    pub fn attention(&self, head: usize) -> ArrayView2<'_, f64> {
        self.attn[head].view()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<u32>,
    segments: Vec<u8>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }
}

fn check_finite(name: &str, arr: &Array2<f64>) -> Result<()> {
    if arr.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: name.to_string() })
    }
}

fn run_forward(
    cfg: &EncoderConfig,
    params: &Parameters,
    pair: &EncodedPair,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, ForwardCache)> {
    cfg.validate()?;
    let len = pair.len();
    if len == 0 {
        return Err(Error::Data("cannot encode an empty sequence".into()));
    }
    if len > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence length {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let d = cfg.model_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((len, d));
    for (p, (&id, &seg)) in pair.ids.iter().zip(&pair.segment).enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Data(format!(
                "token id {id} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let row = &params.token_emb.row(id as usize)
            + &params.pos_emb.row(p)
            + &params.seg_emb.row(seg as usize);
        x.row_mut(p).assign(&row);
    }
    check_finite("embeddings", &x)?;

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let q = x.dot(&lp.w_q) + &lp.b_q;
        let k = x.dot(&lp.w_k) + &lp.b_k;
        let v = x.dot(&lp.w_v) + &lp.b_v;

        let mut ctx = Array2::zeros((len, d));
        let mut attn = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            masked_softmax_rows(&mut scores, &pair.attention_mask);
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
            attn.push(scores);
        }
        let mut a = ctx.dot(&lp.w_o) + &lp.b_o;

        let attn_drop = match (&mut dropout_rng, cfg.dropout > 0.0) {
            (Some(rng), true) => {
                let m = dropout_mask(len, d, cfg.dropout, rng);
                a *= &m;
                Some(m)
            }
            _ => None,
        };
        let xpa = &x + &a;
        let (x1, ln1) = ln_forward(&xpa, &lp.ln1_scale, &lp.ln1_offset);

        let h1 = x1.dot(&lp.w1) + &lp.b1;
        let g = h1.mapv(gelu);
        let mut f = g.dot(&lp.w2) + &lp.b2;
        let ffn_drop = match (&mut dropout_rng, cfg.dropout > 0.0) {
            (Some(rng), true) => {
                let m = dropout_mask(len, d, cfg.dropout, rng);
                f *= &m;
                Some(m)
            }
            _ => None,
        };
        let x1pf = &x1 + &f;
        let (out, ln2) = ln_forward(&x1pf, &lp.ln2_scale, &lp.ln2_offset);
        check_finite(&format!("layer {li}"), &out)?;

        layer_caches.push(LayerCache {
            x,
            q,
            k,
            v,
            attn,
            ctx,
            attn_drop,
            ln1,
            x1,
            h1,
            g,
            ffn_drop,
            ln2,
        });
        x = out;
    }

    let cache = ForwardCache {
        ids: pair.ids.clone(),
        segments: pair.segment.clone(),
        layers: layer_caches,
    };
    Ok((x, cache))
}

/// Inference-mode token states: no dropout, nothing cached.
pub fn forward(cfg: &EncoderConfig, params: &Parameters, pair: &EncodedPair) -> Result<Array2<f64>> {
    run_forward(cfg, params, pair, None).map(|(states, _)| states)
}

/// Training-mode forward. Dropout fires only when a dropout rng is given
/// and `cfg.dropout > 0`; the sampled masks land in the cache so backward
/// replays them exactly.
pub fn forward_cached(
    cfg: &EncoderConfig,
    params: &Parameters,
    pair: &EncodedPair,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, ForwardCache)> {
    run_forward(cfg, params, pair, dropout_rng)
}

/// Backpropagate `d_states` (gradient w.r.t. the final token states)
/// through the whole stack, returning gradients shaped like the
/// parameters.
pub fn backward(
    cfg: &EncoderConfig,
    params: &Parameters,
    cache: &ForwardCache,
    d_states: &Array2<f64>,
) -> Result<Parameters> {
    if cache.layers.len() != params.layers.len() {
        return Err(Error::Shape(format!(
            "cache has {} layers, parameters have {}",
            cache.layers.len(),
            params.layers.len()
        )));
    }
    let len = cache.ids.len();
    if d_states.nrows() != len || d_states.ncols() != cfg.model_dim {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {len}x{}",
            d_states.nrows(),
            d_states.ncols(),
            cfg.model_dim
        )));
    }
    let d = cfg.model_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut grads = params.zeros_like();
    let mut dx = d_states.clone();
    for li in (0..params.layers.len()).rev() {
        let lp = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];

        let (d_x1pf, dscale2, doffset2) = ln_backward(&dx, &lp.ln2_scale, &lc.ln2);
        gl.ln2_scale = dscale2;
        gl.ln2_offset = doffset2;

        let mut d_f = d_x1pf.clone();
        if let Some(m) = &lc.ffn_drop {
            d_f *= m;
        }
        gl.w2 = lc.g.t().dot(&d_f);
        gl.b2 = d_f.sum_axis(Axis(0));
        let d_g = d_f.dot(&lp.w2.t());
        let d_h1 = &d_g * &lc.h1.mapv(gelu_prime);
        gl.w1 = lc.x1.t().dot(&d_h1);
        gl.b1 = d_h1.sum_axis(Axis(0));

        let mut d_x1 = d_x1pf;
        d_x1 += &d_h1.dot(&lp.w1.t());

        let (d_xpa, dscale1, doffset1) = ln_backward(&d_x1, &lp.ln1_scale, &lc.ln1);
        gl.ln1_scale = dscale1;
        gl.ln1_offset = doffset1;

        let mut d_a = d_xpa.clone();
        if let Some(m) = &lc.attn_drop {
            d_a *= m;
        }
        gl.w_o = lc.ctx.t().dot(&d_a);
        gl.b_o = d_a.sum_axis(Axis(0));
        let d_ctx = d_a.dot(&lp.w_o.t());

        let mut d_q = Array2::zeros((len, d));
        let mut d_k = Array2::zeros((len, d));
        let mut d_v = Array2::zeros((len, d));
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lc.attn[h];
            let d_ctx_h = d_ctx.slice(cols);
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);

            let d_p = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));

            let rowdot = (&d_p * p).sum_axis(Axis(1));
            let mut d_s = d_p;
            for (r, mut row) in d_s.outer_iter_mut().enumerate() {
                let rd = rowdot[r];
                for (c, v) in row.iter_mut().enumerate() {
                    *v = p[(r, c)] * (*v - rd);
                }
            }
            let mut d_qh = d_s.dot(&kh);
            d_qh *= scale;
            d_q.slice_mut(cols).assign(&d_qh);
            let mut d_kh = d_s.t().dot(&qh);
            d_kh *= scale;
            d_k.slice_mut(cols).assign(&d_kh);
        }

        gl.w_q = lc.x.t().dot(&d_q);
        gl.b_q = d_q.sum_axis(Axis(0));
        gl.w_k = lc.x.t().dot(&d_k);
        gl.b_k = d_k.sum_axis(Axis(0));
        gl.w_v = lc.x.t().dot(&d_v);
        gl.b_v = d_v.sum_axis(Axis(0));

        let mut d_x_new = d_xpa;
        d_x_new += &d_q.dot(&lp.w_q.t());
        d_x_new += &d_k.dot(&lp.w_k.t());
        d_x_new += &d_v.dot(&lp.w_v.t());
        dx = d_x_new;
    }

    for p in 0..len {
        let row = dx.row(p);
        let mut t = grads.token_emb.row_mut(cache.ids[p] as usize);
        t += &row;
        let mut pe = grads.pos_emb.row_mut(p);
        pe += &row;
        let mut se = grads.seg_emb.row_mut(cache.segments[p] as usize);
        se += &row;
    }
    Ok(grads)
}

/// Attention probability rows for (layer, head), each row summing to 1
/// over unmasked keys. Exposed for verification.
pub fn attention_rows<'c>(cache: &'c ForwardCache, layer: usize, head: usize) -> ArrayView2<'c, f64> {
    cache.layers[layer].attention(head)
}
