//! The full scoring model: encoder plus both heads, with checkpointing.
//!
//! A [`Model`] bundles the encoder configuration and parameters with the
//! head parameters so a pair can be scored in one call under any
//! [`ScoreMode`]. Checkpoints are a text header (config, tensor table,
//! content id) followed by the raw little-endian f64 tensors; equal
//! models serialize to identical bytes, and the content id doubles as a
//! tamper check and as the tag reranked runs carry.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, ForwardCache, Parameters};
use crate::error::{Error, Result};
use crate::heads::{
    self, HeadConfig, HeadParams, ProjectionKind, ScoreBreakdown, TokenProjection, TokenVectors,
    TokenVectorsGrad,
};
use crate::seeds;
use crate::tokenizer::{exact_match_mask, EncodedPair};

const MAGIC: &str = "latrank-checkpoint";
const FORMAT_VERSION: u32 = 1;

/// How a (query, document) pair is scored at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    ClsOnly,
    ClsPlusLate,
    ClsPlusMaskedLate,
}

impl ScoreMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreMode::ClsOnly => "cls_only",
            ScoreMode::ClsPlusLate => "cls_plus_late",
            ScoreMode::ClsPlusMaskedLate => "cls_plus_masked_late",
        }
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScoreMode> {
        match s {
            "cls_only" => Ok(ScoreMode::ClsOnly),
            "cls_plus_late" => Ok(ScoreMode::ClsPlusLate),
            "cls_plus_masked_late" => Ok(ScoreMode::ClsPlusMaskedLate),
            other => Err(Error::Config(format!(
                "unknown score mode {other:?}; expected cls_only, cls_plus_late, or cls_plus_masked_late"
            ))),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pub heads: HeadParams,
}

/// Gradient bundle shaped like a model's trainable state.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Parameters,
    pub heads: HeadParams,
}

impl ModelGrads {
    pub fn add_scaled(&mut self, other: &ModelGrads, factor: f64) {
        self.encoder.add_scaled(&other.encoder, factor);
        self.heads.add_scaled(&other.heads, factor);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.tensors().iter().chain(self.heads.tensors().iter())
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Everything one training forward produced, kept for the backward pass.
pub struct PairForward {
    pub states: Array2<f64>,
    pub cache: ForwardCache,
    pub vecs: Option<TokenVectors>,
    pub argmax: Option<Vec<Option<usize>>>,
    pub s_m: f64,
    pub s_l: Option<f64>,
}

impl Model {
    pub fn init(cfg: ModelConfig) -> Result<Model> {
        cfg.encoder.validate()?;
        let mut rng = seeds::rng_for(cfg.encoder.seed, seeds::domain::INIT);
        let params = Parameters::init_with_rng(&cfg.encoder, &mut rng)?;
        let heads = HeadParams::init(cfg.encoder.model_dim, &cfg.head, &mut rng)?;
        Ok(Model { cfg, params, heads })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads { encoder: self.params.zeros_like(), heads: self.heads.zeros_like() }
    }

    /// Inference-time scoring; no dropout, nothing retained.
    pub fn score_pair(
        &self,
        pair: &EncodedPair,
        mode: ScoreMode,
        em_unk_matches: bool,
    ) -> Result<ScoreBreakdown> {
        let states = encoder::forward(&self.cfg.encoder, &self.params, pair)?;
        let s_m = heads::cls_score(&states, &self.heads);
        match mode {
            ScoreMode::ClsOnly => {
                if !s_m.is_finite() {
                    return Err(Error::NonFinite { context: "cls score".into() });
                }
                Ok(ScoreBreakdown::cls_only(s_m))
            }
            ScoreMode::ClsPlusLate => {
                let vecs = heads::token_vectors(&states, pair, &self.heads)?;
                heads::final_score(s_m, heads::maxsim(&vecs)?)
            }
            ScoreMode::ClsPlusMaskedLate => {
                let vecs = heads::token_vectors(&states, pair, &self.heads)?;
                let mask = exact_match_mask(pair, em_unk_matches);
                heads::final_score(s_m, heads::masked_maxsim(&vecs, &mask)?)
            }
        }
    }

    /// Training forward: caches activations and, unless `mode` is
    /// cls_only, the token vectors and argmax wiring for the late head.
    pub fn forward_pair_train(
        &self,
        pair: &EncodedPair,
        mode: ScoreMode,
        em_unk_matches: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<PairForward> {
        let (states, cache) =
            encoder::forward_cached(&self.cfg.encoder, &self.params, pair, dropout_rng)?;
        let s_m = heads::cls_score(&states, &self.heads);
        let (vecs, argmax, s_l) = match mode {
            ScoreMode::ClsOnly => (None, None, None),
            ScoreMode::ClsPlusLate => {
                let vecs = heads::token_vectors(&states, pair, &self.heads)?;
                let (s, am) = heads::maxsim_detailed(&vecs)?;
                (Some(vecs), Some(am.into_iter().map(Some).collect()), Some(s))
            }
            ScoreMode::ClsPlusMaskedLate => {
                let vecs = heads::token_vectors(&states, pair, &self.heads)?;
                let mask = exact_match_mask(pair, em_unk_matches);
                let (s, am) = heads::masked_maxsim_detailed(&vecs, &mask)?;
                (Some(vecs), Some(am), Some(s))
            }
        };
        if !s_m.is_finite() || s_l.map_or(false, |v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "head scores".into() });
        }
        Ok(PairForward { states, cache, vecs, argmax, s_m, s_l })
    }

    /// Backward from per-head score gradients to parameter gradients.
    /// `d_s_l` is ignored when the forward ran cls_only.
    pub fn backward_pair(
        &self,
        pair: &EncodedPair,
        fwd: &PairForward,
        d_s_m: f64,
        d_s_l: f64,
    ) -> Result<ModelGrads> {
        let mut d_states: Array2<f64> = Array2::zeros(fwd.states.raw_dim());
        let mut head_grads = self.heads.zeros_like();

        let (d_cls_row, d_w, d_b) = heads::cls_score_grad(&fwd.states, &self.heads, d_s_m);
        {
            let mut r0 = d_states.row_mut(0);
            r0 += &d_cls_row;
        }
        head_grads.cls_weight = d_w;
        head_grads.cls_bias = d_b;

        if let (Some(vecs), Some(argmax)) = (&fwd.vecs, &fwd.argmax) {
            let tvg = heads::maxsim_grad(vecs, argmax, d_s_l);
            self.backprop_projection(pair, fwd, &tvg, &mut d_states, &mut head_grads)?;
        }

        let enc_grads = encoder::backward(&self.cfg.encoder, &self.params, &fwd.cache, &d_states)?;
        Ok(ModelGrads { encoder: enc_grads, heads: head_grads })
    }

    fn backprop_projection(
        &self,
        pair: &EncodedPair,
        fwd: &PairForward,
        tvg: &TokenVectorsGrad,
        d_states: &mut Array2<f64>,
        head_grads: &mut HeadParams,
    ) -> Result<()> {
        let q_span = pair.query_span.clone();
        let d_span = pair.doc_span.clone();
        let q_rows: Vec<usize> = q_span.collect();
        let d_rows: Vec<usize> = d_span.collect();
        match (&self.heads.projection, &mut head_grads.projection) {
            (TokenProjection::Identity, TokenProjection::Identity) => {
                for (i, r) in q_rows.iter().enumerate() {
                    let mut row = d_states.row_mut(*r);
                    row += &tvg.query_vecs.row(i);
                }
                for (j, r) in d_rows.iter().enumerate() {
                    let mut row = d_states.row_mut(*r);
                    row += &tvg.doc_vecs.row(j);
                }
            }
            (
                TokenProjection::Shared { weight, .. },
                TokenProjection::Shared { weight: gw, bias: gb },
            ) => {
                let q_states = fwd.states.select(Axis(0), &q_rows);
                let d_states_rows = fwd.states.select(Axis(0), &d_rows);
                *gw = q_states.t().dot(&tvg.query_vecs) + d_states_rows.t().dot(&tvg.doc_vecs);
                *gb = tvg.query_vecs.sum_axis(Axis(0)) + tvg.doc_vecs.sum_axis(Axis(0));
                let dq = tvg.query_vecs.dot(&weight.t());
                let dd = tvg.doc_vecs.dot(&weight.t());
                for (i, r) in q_rows.iter().enumerate() {
                    let mut row = d_states.row_mut(*r);
                    row += &dq.row(i);
                }
                for (j, r) in d_rows.iter().enumerate() {
                    let mut row = d_states.row_mut(*r);
                    row += &dd.row(j);
                }
            }
            (
                TokenProjection::Separate { query_weight, doc_weight, .. },
                TokenProjection::Separate {
                    query_weight: gqw,
                    query_bias: gqb,
                    doc_weight: gdw,
                    doc_bias: gdb,
                },
            ) => {
                let q_states = fwd.states.select(Axis(0), &q_rows);
                let d_states_rows = fwd.states.select(Axis(0), &d_rows);
                *gqw = q_states.t().dot(&tvg.query_vecs);
                *gqb = tvg.query_vecs.sum_axis(Axis(0));
                *gdw = d_states_rows.t().dot(&tvg.doc_vecs);
                *gdb = tvg.doc_vecs.sum_axis(Axis(0));
                let dq = tvg.query_vecs.dot(&query_weight.t());
                let dd = tvg.doc_vecs.dot(&doc_weight.t());
                for (i, r) in q_rows.iter().enumerate() {
                    let mut row = d_states.row_mut(*r);
                    row += &dq.row(i);
                }
                for (j, r) in d_rows.iter().enumerate() {
                    let mut row = d_states.row_mut(*r);
                    row += &dd.row(j);
                }
            }
            _ => return Err(Error::Shape("projection variants disagree".into())),
        }
        Ok(())
    }

    fn header_body(&self) -> String {
        use std::fmt::Write as _;
        let e = &self.cfg.encoder;
        let mut s = String::new();
        let _ = writeln!(s, "format_version {FORMAT_VERSION}");
        let _ = writeln!(s, "seed {}", e.seed);
        let _ = writeln!(s, "layers {}", e.layers);
        let _ = writeln!(s, "heads {}", e.heads);
        let _ = writeln!(s, "model_dim {}", e.model_dim);
        let _ = writeln!(s, "ffn_dim {}", e.ffn_dim);
        let _ = writeln!(s, "max_len {}", e.max_len);
        let _ = writeln!(s, "vocab_size {}", e.vocab_size);
        let _ = writeln!(s, "dropout {}", e.dropout);
        let _ = writeln!(s, "d_tok {}", self.cfg.head.d_tok);
        let projection = match self.cfg.head.projection {
            ProjectionKind::Identity => "identity",
            ProjectionKind::Shared => "shared",
            ProjectionKind::Separate => "separate",
        };
        let _ = writeln!(s, "projection {projection}");
        for (name, t) in self.params.tensors().iter().chain(self.heads.tensors().iter()) {
            let _ = writeln!(s, "tensor {name} {}", t.len());
        }
        s
    }

    fn tensor_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        for (_, t) in self.params.tensors().iter().chain(self.heads.tensors().iter()) {
            for v in *t {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        data
    }

    /// Content hash over config and tensors; stable for identical models.
    pub fn checkpoint_id(&self) -> String {
        let body = self.header_body();
        let data = self.tensor_bytes();
        format!("{:016x}", seeds::fnv1a_bytes(&[body.as_bytes(), &data]))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let body = self.header_body();
        let data = self.tensor_bytes();
        let id = format!("{:016x}", seeds::fnv1a_bytes(&[body.as_bytes(), &data]));
        let mut out = Vec::with_capacity(body.len() + data.len() + 64);
        out.extend_from_slice(format!("{MAGIC} v{FORMAT_VERSION}\n").as_bytes());
        out.extend_from_slice(format!("id {id}\n").as_bytes());
        out.extend_from_slice(body.as_bytes());
        out.extend_from_slice(b"end\n");
        out.extend_from_slice(&data);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        Ok(id)
    }

    pub fn load(path: &Path) -> Result<(Model, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut offset = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[offset..];
            let nl = rest.iter().position(|b| *b == b'\n').ok_or_else(|| {
                Error::Checkpoint(format!("{}: header never terminates", path.display()))
            })?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| {
                Error::Checkpoint(format!("{}: non-UTF-8 header line", path.display()))
            })?;
            offset += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
            if lines.len() > 10_000 {
                return Err(Error::Checkpoint(format!(
                    "{}: header implausibly long",
                    path.display()
                )));
            }
        }
        let data = &bytes[offset..];

        let mut it = lines.iter();
        let magic = it.next().map(String::as_str).unwrap_or_default();
        if magic != format!("{MAGIC} v{FORMAT_VERSION}") {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic line {magic:?}",
                path.display()
            )));
        }
        let mut fields = std::collections::BTreeMap::new();
        let mut tensor_decls: Vec<(String, usize)> = Vec::new();
        for line in it {
            let (key, value) = line.split_once(' ').ok_or_else(|| {
                Error::Checkpoint(format!("{}: malformed header line {line:?}", path.display()))
            })?;
            if key == "tensor" {
                let (name, len) = value.rsplit_once(' ').ok_or_else(|| {
                    Error::Checkpoint(format!("{}: malformed tensor line", path.display()))
                })?;
                let len: usize = len.parse().map_err(|_| {
                    Error::Checkpoint(format!("{}: bad tensor length {len:?}", path.display()))
                })?;
                tensor_decls.push((name.to_string(), len));
            } else {
                fields.insert(key.to_string(), value.to_string());
            }
        }

        let get = |key: &str| -> Result<&String> {
            fields.get(key).ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing header field {key:?}", path.display()))
            })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| {
                Error::Checkpoint(format!("{}: field {key:?} is not an integer", path.display()))
            })
        };
        let declared_id = get("id")?.clone();
        let version: u32 = parse_usize("format_version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {version}",
                path.display()
            )));
        }
        let encoder_cfg = EncoderConfig {
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            model_dim: parse_usize("model_dim")?,
            ffn_dim: parse_usize("ffn_dim")?,
            max_len: parse_usize("max_len")?,
            vocab_size: parse_usize("vocab_size")?,
            dropout: get("dropout")?.parse().map_err(|_| {
                Error::Checkpoint(format!("{}: bad dropout value", path.display()))
            })?,
            seed: get("seed")?.parse().map_err(|_| {
                Error::Checkpoint(format!("{}: bad seed value", path.display()))
            })?,
        };
        let projection = match get("projection")?.as_str() {
            "identity" => ProjectionKind::Identity,
            "shared" => ProjectionKind::Shared,
            "separate" => ProjectionKind::Separate,
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unknown projection {other:?}",
                    path.display()
                )))
            }
        };
        let head_cfg = HeadConfig { d_tok: parse_usize("d_tok")?, projection };
        let cfg = ModelConfig { encoder: encoder_cfg, head: head_cfg };

        let mut model = Model::init(cfg)?;
        {
            let mut expected: Vec<(String, &mut [f64])> = model.params.tensors_mut();
            expected.extend(model.heads.tensors_mut());
            if expected.len() != tensor_decls.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: header declares {} tensors, config implies {}",
                    path.display(),
                    tensor_decls.len(),
                    expected.len()
                )));
            }
            let total: usize = expected.iter().map(|(_, t)| t.len()).sum();
            if data.len() != total * 8 {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor data is {} bytes, expected {}",
                    path.display(),
                    data.len(),
                    total * 8
                )));
            }
            let mut cursor = 0;
            for ((name, slot), (decl_name, decl_len)) in expected.iter_mut().zip(&tensor_decls) {
                if name != decl_name || slot.len() != *decl_len {
                    return Err(Error::Checkpoint(format!(
                        "{}: tensor {decl_name} ({decl_len}) does not match expected {name} ({})",
                        path.display(),
                        slot.len()
                    )));
                }
                for v in slot.iter_mut() {
                    let mut buf = [0u8; 8];
                    buf.copy_from_slice(&data[cursor..cursor + 8]);
                    *v = f64::from_le_bytes(buf);
                    cursor += 8;
                }
            }
        }

        let actual_id = model.checkpoint_id();
        if actual_id != declared_id {
            return Err(Error::Checkpoint(format!(
                "{}: content id {actual_id} does not match header id {declared_id}",
                path.display()
            )));
        }
        Ok((model, actual_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode_pair, Vocabulary};
    use rand_chacha::rand_core::SeedableRng;

    fn small_cfg(projection: ProjectionKind) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 2,
                model_dim: 16,
                ffn_dim: 32,
                max_len: 64,
                vocab_size: 16,
                dropout: 0.0,
                seed: 5,
            },
            head: HeadConfig { d_tok: 4, projection },
        }
    }

    fn vocab_and_pair() -> (Vocabulary, EncodedPair) {
        let v = Vocabulary::build(
            ["alpha beta gamma delta epsilon zeta eta theta"],
            ["alpha query"],
            1,
        )
        .unwrap();
        let p = encode_pair(&v, "alpha beta", "gamma alpha delta beta", 16, 64).unwrap();
        (v, p)
    }

    #[test]
    fn score_modes_share_the_cls_term() {
        let model = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        let (_v, pair) = vocab_and_pair();
        let cls = model.score_pair(&pair, ScoreMode::ClsOnly, true).unwrap();
        assert_eq!(cls.s_l, None);
        assert_eq!(cls.s_final, cls.s_m);

        let late = model.score_pair(&pair, ScoreMode::ClsPlusLate, true).unwrap();
        assert_eq!(late.s_m, cls.s_m);
        assert_eq!(late.s_final, late.s_m + late.s_l.unwrap());

        let masked = model.score_pair(&pair, ScoreMode::ClsPlusMaskedLate, true).unwrap();
        assert_eq!(masked.s_m, cls.s_m);
        assert!(masked.s_l.unwrap() <= late.s_l.unwrap());
    }

    #[test]
    fn scoring_is_deterministic() {
        let model = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        let (_v, pair) = vocab_and_pair();
        let a = model.score_pair(&pair, ScoreMode::ClsPlusLate, true).unwrap();
        let b = model.score_pair(&pair, ScoreMode::ClsPlusLate, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        let id = model.save(&path).unwrap();
        assert_eq!(id, model.checkpoint_id());

        let (loaded, loaded_id) = Model::load(&path).unwrap();
        assert_eq!(id, loaded_id);
        for ((na, ta), (_, tb)) in model
            .params
            .tensors()
            .iter()
            .chain(model.heads.tensors().iter())
            .zip(loaded.params.tensors().iter().chain(loaded.heads.tensors().iter()))
        {
            assert_eq!(ta, tb, "tensor {na} changed across save/load");
        }

        let (_v, pair) = vocab_and_pair();
        let a = model.score_pair(&pair, ScoreMode::ClsPlusMaskedLate, true).unwrap();
        let b = loaded.score_pair(&pair, ScoreMode::ClsPlusMaskedLate, true).unwrap();
        assert_eq!(a, b);

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_round_trips_other_projections() {
        for kind in [ProjectionKind::Identity, ProjectionKind::Separate] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            let mut cfg = small_cfg(kind);
            if kind == ProjectionKind::Identity {
                cfg.head.d_tok = cfg.encoder.model_dim;
            }
            let model = Model::init(cfg).unwrap();
            model.save(&path).unwrap();
            let (loaded, _) = Model::load(&path).unwrap();
            let (_v, pair) = vocab_and_pair();
            assert_eq!(
                model.score_pair(&pair, ScoreMode::ClsPlusLate, true).unwrap(),
                loaded.score_pair(&pair, ScoreMode::ClsPlusLate, true).unwrap()
            );
        }
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        model.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = Model::load(&path).unwrap_err().to_string();
        assert!(err.contains("content id"), "{err}");

        std::fs::write(&path, b"something else entirely\n").unwrap();
        assert!(Model::load(&path).is_err());

        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(truncated.len().saturating_sub(1));
        std::fs::write(&path, &truncated).unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn checkpoint_id_tracks_seed() {
        let a = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        let b = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        assert_eq!(a.checkpoint_id(), b.checkpoint_id());
        let mut cfg = small_cfg(ProjectionKind::Shared);
        cfg.encoder.seed = 6;
        let c = Model::init(cfg).unwrap();
        assert_ne!(a.checkpoint_id(), c.checkpoint_id());
    }

    fn model_flat_len(m: &Model) -> usize {
        m.params.tensors().iter().chain(m.heads.tensors().iter()).map(|(_, t)| t.len()).sum()
    }

    fn model_get_flat(m: &Model, mut idx: usize) -> f64 {
        for (_, t) in m.params.tensors().iter().chain(m.heads.tensors().iter()) {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("index out of range");
    }

    fn model_set_flat(m: &mut Model, mut idx: usize, v: f64) {
        let mut tensors = m.params.tensors_mut();
        tensors.extend(m.heads.tensors_mut());
        for (_, t) in tensors {
            if idx < t.len() {
                t[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("index out of range");
    }

    fn grads_flat(g: &ModelGrads) -> Vec<f64> {
        g.encoder
            .tensors()
            .iter()
            .chain(g.heads.tensors().iter())
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    fn check_pair_gradient(projection: ProjectionKind, mode: ScoreMode) {
        use rand::Rng;
        let mut cfg = small_cfg(projection);
        cfg.encoder.layers = 1;
        cfg.encoder.model_dim = 8;
        cfg.encoder.ffn_dim = 16;
        cfg.head.d_tok = if projection == ProjectionKind::Identity { 8 } else { 3 };
        let model = Model::init(cfg).unwrap();
        let (_v, pair) = vocab_and_pair();

        // Weighted score keeps both branches active with distinct pulls.
        let (wm, wl) = (0.7, -1.3);
        let fwd = model.forward_pair_train(&pair, mode, true, None).unwrap();
        let grads = model
            .backward_pair(&pair, &fwd, wm, if fwd.s_l.is_some() { wl } else { 0.0 })
            .unwrap();
        let flat = grads_flat(&grads);

        let loss = |m: &Model| -> f64 {
            let f = m.forward_pair_train(&pair, mode, true, None).unwrap();
            wm * f.s_m + wl * f.s_l.unwrap_or(0.0)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-5;
        // Central-difference roundoff grows with |loss|, so the noise
        // floor does too.
        let floor = 1e-6 * loss(&model).abs().max(1.0);
        let total = model_flat_len(&model);
        for _ in 0..60 {
            let idx = rng.gen_range(0..total);
            let base = model_get_flat(&model, idx);
            let mut plus = model.clone();
            model_set_flat(&mut plus, idx, base + eps);
            let mut minus = model.clone();
            model_set_flat(&mut minus, idx, base - eps);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let analytic = flat[idx];
            let denom = numeric.abs().max(analytic.abs()).max(floor);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{projection:?}/{mode:?} coordinate {idx}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn pair_gradients_match_finite_differences_shared() {
        check_pair_gradient(ProjectionKind::Shared, ScoreMode::ClsPlusLate);
    }

    #[test]
    fn pair_gradients_match_finite_differences_masked() {
        check_pair_gradient(ProjectionKind::Shared, ScoreMode::ClsPlusMaskedLate);
    }

    #[test]
    fn pair_gradients_match_finite_differences_identity() {
        check_pair_gradient(ProjectionKind::Identity, ScoreMode::ClsPlusLate);
    }

    #[test]
    fn pair_gradients_match_finite_differences_separate() {
        check_pair_gradient(ProjectionKind::Separate, ScoreMode::ClsPlusLate);
    }

    #[test]
    fn cls_only_backward_leaves_projection_untouched() {
        let model = Model::init(small_cfg(ProjectionKind::Shared)).unwrap();
        let (_v, pair) = vocab_and_pair();
        let fwd = model.forward_pair_train(&pair, ScoreMode::ClsOnly, true, None).unwrap();
        assert!(fwd.s_l.is_none());
        let grads = model.backward_pair(&pair, &fwd, 1.0, 123.0).unwrap();
        match &grads.heads.projection {
            TokenProjection::Shared { weight, bias } => {
                assert!(weight.iter().all(|v| *v == 0.0));
                assert!(bias.iter().all(|v| *v == 0.0));
            }
            _ => panic!("projection grads missing"),
        }
        assert!(grads.heads.cls_weight.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn score_mode_strings_round_trip() {
        for mode in [ScoreMode::ClsOnly, ScoreMode::ClsPlusLate, ScoreMode::ClsPlusMaskedLate] {
            assert_eq!(mode.as_str().parse::<ScoreMode>().unwrap(), mode);
        }
        assert!("other".parse::<ScoreMode>().is_err());
    }
}
