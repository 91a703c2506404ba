//! Relevance-scoring heads on top of the encoder's token states.
//!
//! Two heads read the final-layer representations. The classification
//! head scores the sequence from the CLS position alone. The late
//! interaction head turns every query and document token into a vector
//! (optionally projected down to `d_tok` dimensions) and sums, over query
//! tokens, the best inner product against any document token. A masked
//! variant drops document tokens whose id exactly matches the query
//! token, isolating what the head learns beyond lexical overlap. The
//! final score is the plain sum of the two heads.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::encoder::truncated_normal;
use crate::error::{Error, Result};
use crate::tokenizer::{EncodedPair, ExactMatchMask};

/// Which token-vector transform the late head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Raw encoder states, d_tok = D.
    Identity,
    /// One projection shared by query and document sides.
    Shared,
    /// Independent projections per side.
    Separate,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadConfig {
    pub d_tok: usize,
    pub projection: ProjectionKind,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { d_tok: 32, projection: ProjectionKind::Shared }
    }
}

#[derive(Debug, Clone)]
pub enum TokenProjection {
    Identity,
    Shared { weight: Array2<f64>, bias: Array1<f64> },
    Separate {
        query_weight: Array2<f64>,
        query_bias: Array1<f64>,
        doc_weight: Array2<f64>,
        doc_bias: Array1<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cls_weight: Array1<f64>,
    pub cls_bias: f64,
    pub projection: TokenProjection,
}

impl HeadParams {
    pub fn init(d_model: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<HeadParams> {
        if cfg.d_tok == 0 {
            return Err(Error::Config("d_tok must be at least 1".into()));
        }
        if cfg.projection != ProjectionKind::Identity && cfg.d_tok > d_model {
            return Err(Error::Config(format!(
                "d_tok {} cannot exceed model dim {d_model} when projecting",
                cfg.d_tok
            )));
        }
        let cls_weight = Array1::from_shape_fn(d_model, |_| truncated_normal(rng));
        let proj_mat =
            |rng: &mut ChaCha8Rng| Array2::from_shape_fn((d_model, cfg.d_tok), |_| truncated_normal(rng));
        let projection = match cfg.projection {
            ProjectionKind::Identity => TokenProjection::Identity,
            ProjectionKind::Shared => TokenProjection::Shared {
                weight: proj_mat(rng),
                bias: Array1::zeros(cfg.d_tok),
            },
            ProjectionKind::Separate => TokenProjection::Separate {
                query_weight: proj_mat(rng),
                query_bias: Array1::zeros(cfg.d_tok),
                doc_weight: proj_mat(rng),
                doc_bias: Array1::zeros(cfg.d_tok),
            },
        };
        Ok(HeadParams { cls_weight, cls_bias: 0.0, projection })
    }

    /// Dimensionality of the vectors the late head compares.
    pub fn d_tok(&self) -> usize {
        match &self.projection {
            TokenProjection::Identity => self.cls_weight.len(),
            TokenProjection::Shared { bias, .. } => bias.len(),
            TokenProjection::Separate { query_bias, .. } => query_bias.len(),
        }
    }

    pub fn config(&self) -> HeadConfig {
        let projection = match &self.projection {
            TokenProjection::Identity => ProjectionKind::Identity,
            TokenProjection::Shared { .. } => ProjectionKind::Shared,
            TokenProjection::Separate { .. } => ProjectionKind::Separate,
        };
        HeadConfig { d_tok: self.d_tok(), projection }
    }

    pub fn zeros_like(&self) -> HeadParams {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named flat views in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = vec![
            ("heads.cls_weight".into(), self.cls_weight.as_slice().expect("standard layout")),
            ("heads.cls_bias".into(), std::slice::from_ref(&self.cls_bias)),
        ];
        match &self.projection {
            TokenProjection::Identity => {}
            TokenProjection::Shared { weight, bias } => {
                v.push(("heads.proj_weight".into(), weight.as_slice().expect("standard layout")));
                v.push(("heads.proj_bias".into(), bias.as_slice().expect("standard layout")));
            }
            TokenProjection::Separate { query_weight, query_bias, doc_weight, doc_bias } => {
                v.push(("heads.query_proj_weight".into(), query_weight.as_slice().expect("standard layout")));
                v.push(("heads.query_proj_bias".into(), query_bias.as_slice().expect("standard layout")));
                v.push(("heads.doc_proj_weight".into(), doc_weight.as_slice().expect("standard layout")));
                v.push(("heads.doc_proj_bias".into(), doc_bias.as_slice().expect("standard layout")));
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v: Vec<(String, &mut [f64])> = vec![
            ("heads.cls_weight".into(), self.cls_weight.as_slice_mut().expect("standard layout")),
            ("heads.cls_bias".into(), std::slice::from_mut(&mut self.cls_bias)),
        ];
        match &mut self.projection {
            TokenProjection::Identity => {}
            TokenProjection::Shared { weight, bias } => {
                v.push(("heads.proj_weight".into(), weight.as_slice_mut().expect("standard layout")));
                v.push(("heads.proj_bias".into(), bias.as_slice_mut().expect("standard layout")));
            }
            TokenProjection::Separate { query_weight, query_bias, doc_weight, doc_bias } => {
                v.push(("heads.query_proj_weight".into(), query_weight.as_slice_mut().expect("standard layout")));
                v.push(("heads.query_proj_bias".into(), query_bias.as_slice_mut().expect("standard layout")));
                v.push(("heads.doc_proj_weight".into(), doc_weight.as_slice_mut().expect("standard layout")));
                v.push(("heads.doc_proj_bias".into(), doc_bias.as_slice_mut().expect("standard layout")));
            }
        }
        v
    }

    pub fn add_scaled(&mut self, other: &HeadParams, factor: f64) {
        let others = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(others) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }
}

/// Per-side token vectors feeding MaxSim. Row counts equal span lengths.
#[derive(Debug, Clone)]
pub struct TokenVectors {
    pub query_vecs: Array2<f64>,
    pub doc_vecs: Array2<f64>,
}

/// Gradient carrier mirroring [`TokenVectors`].
#[derive(Debug, Clone)]
pub struct TokenVectorsGrad {
    pub query_vecs: Array2<f64>,
    pub doc_vecs: Array2<f64>,
}

/// Per-pair score record. `s_l` is absent when the late head is switched
/// off; `s_final` is always the exact sum of the present terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    pub s_m: f64,
    pub s_l: Option<f64>,
    pub s_final: f64,
}

impl ScoreBreakdown {
    pub fn cls_only(s_m: f64) -> ScoreBreakdown {
        ScoreBreakdown { s_m, s_l: None, s_final: s_m }
    }
}

/// dot(T_CLS, W) + b over the row-0 state.
pub fn cls_score(states: &Array2<f64>, head: &HeadParams) -> f64 {
    states.row(0).dot(&head.cls_weight) + head.cls_bias
}

/// Gradients of `upstream * cls_score` w.r.t. the CLS state row and the
/// head parameters.
pub fn cls_score_grad(
    states: &Array2<f64>,
    head: &HeadParams,
    upstream: f64,
) -> (Array1<f64>, Array1<f64>, f64) {
    let d_state = &head.cls_weight * upstream;
    let d_weight = states.row(0).mapv(|x| x * upstream);
    (d_state, d_weight, upstream)
}

fn span_rows(states: &Array2<f64>, span: std::ops::Range<usize>) -> Array2<f64> {
    states.select(Axis(0), &span.collect::<Vec<_>>())
}

/// Span rows passed through as-is (no projection); d_tok = D.
pub fn identity_tokens(states: &Array2<f64>, pair: &EncodedPair) -> TokenVectors {
    TokenVectors {
        query_vecs: span_rows(states, pair.query_span.clone()),
        doc_vecs: span_rows(states, pair.doc_span.clone()),
    }
}

/// Span rows mapped through the learned projection(s).
pub fn project_tokens(
    states: &Array2<f64>,
    pair: &EncodedPair,
    head: &HeadParams,
) -> Result<TokenVectors> {
    let q = span_rows(states, pair.query_span.clone());
    let d = span_rows(states, pair.doc_span.clone());
    match &head.projection {
        TokenProjection::Identity => Err(Error::Config(
            "projection weights are absent for the identity token head".into(),
        )),
        TokenProjection::Shared { weight, bias } => Ok(TokenVectors {
            query_vecs: q.dot(weight) + bias,
            doc_vecs: d.dot(weight) + bias,
        }),
        TokenProjection::Separate { query_weight, query_bias, doc_weight, doc_bias } => {
            Ok(TokenVectors {
                query_vecs: q.dot(query_weight) + query_bias,
                doc_vecs: d.dot(doc_weight) + doc_bias,
            })
        }
    }
}

/// Dispatch on the head's projection variant.
pub fn token_vectors(
    states: &Array2<f64>,
    pair: &EncodedPair,
    head: &HeadParams,
) -> Result<TokenVectors> {
    match &head.projection {
        TokenProjection::Identity => Ok(identity_tokens(states, pair)),
        _ => project_tokens(states, pair, head),
    }
}

fn check_nonempty(vecs: &TokenVectors) -> Result<()> {
    if vecs.query_vecs.nrows() == 0 || vecs.doc_vecs.nrows() == 0 {
        return Err(Error::Data(
            "late interaction needs at least one query and one document token".into(),
        ));
    }
    Ok(())
}

fn row_max(q: ArrayView1<f64>, docs: &Array2<f64>, allowed: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, d) in docs.outer_iter().enumerate() {
        if !allowed(j) {
            continue;
        }
        let s = q.dot(&d);
        // First index wins ties, so only a strict improvement replaces.
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best
}

/// Σ_i max_j ⟨q_i, d_j⟩ plus the winning document index per query row.
pub fn maxsim_detailed(vecs: &TokenVectors) -> Result<(f64, Vec<usize>)> {
    check_nonempty(vecs)?;
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(vecs.query_vecs.nrows());
    for q in vecs.query_vecs.outer_iter() {
        let (j, s) = row_max(q, &vecs.doc_vecs, |_| true).expect("non-empty doc rows");
        total += s;
        argmax.push(j);
    }
    Ok((total, argmax))
}

pub fn maxsim(vecs: &TokenVectors) -> Result<f64> {
    maxsim_detailed(vecs).map(|(s, _)| s)
}

/// MaxSim restricted to unmasked document tokens. A query row whose
/// candidates are all masked contributes 0 and carries no argmax.
pub fn masked_maxsim_detailed(
    vecs: &TokenVectors,
    mask: &ExactMatchMask,
) -> Result<(f64, Vec<Option<usize>>)> {
    check_nonempty(vecs)?;
    if mask.rows != vecs.query_vecs.nrows() || mask.cols != vecs.doc_vecs.nrows() {
        return Err(Error::Shape(format!(
            "exact-match mask is {}x{} but token vectors are {}x{}",
            mask.rows,
            mask.cols,
            vecs.query_vecs.nrows(),
            vecs.doc_vecs.nrows()
        )));
    }
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(vecs.query_vecs.nrows());
    for (i, q) in vecs.query_vecs.outer_iter().enumerate() {
        match row_max(q, &vecs.doc_vecs, |j| !mask.get(i, j)) {
            Some((j, s)) => {
                total += s;
                argmax.push(Some(j));
            }
            None => argmax.push(None),
        }
    }
    Ok((total, argmax))
}

pub fn masked_maxsim(vecs: &TokenVectors, mask: &ExactMatchMask) -> Result<f64> {
    masked_maxsim_detailed(vecs, mask).map(|(s, _)| s)
}

/// Gradient of `upstream * maxsim` given the winning indices. `None`
/// entries (fully masked rows) contribute nothing.
pub fn maxsim_grad(
    vecs: &TokenVectors,
    argmax: &[Option<usize>],
    upstream: f64,
) -> TokenVectorsGrad {
    let mut dq = Array2::zeros(vecs.query_vecs.raw_dim());
    let mut dd = Array2::zeros(vecs.doc_vecs.raw_dim());
    for (i, j) in argmax.iter().enumerate() {
        let Some(j) = j else { continue };
        let q = vecs.query_vecs.row(i);
        let d = vecs.doc_vecs.row(*j);
        dq.row_mut(i).zip_mut_with(&d, |g, v| *g += upstream * v);
        dd.row_mut(*j).zip_mut_with(&q, |g, v| *g += upstream * v);
    }
    TokenVectorsGrad { query_vecs: dq, doc_vecs: dd }
}

pub fn final_score(s_m: f64, s_l: f64) -> Result<ScoreBreakdown> {
    if !s_m.is_finite() || !s_l.is_finite() {
        return Err(Error::NonFinite { context: "score fusion".into() });
    }
    Ok(ScoreBreakdown { s_m, s_l: Some(s_l), s_final: s_m + s_l })
}
