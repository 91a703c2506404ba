//! Joint training of both scoring heads with a listwise softmax loss.
//!
//! Each training group holds one positive and `n_negatives` sampled
//! negatives. The group loss is cross-entropy of the positive under a
//! softmax over the group, applied once to the pooled scores and once
//! to the late-interaction scores, and the two gradients meet in the
//! shared encoder. Batches evaluate group-parallel; gradients reduce
//! in fixed group order so a run is reproducible at any thread count.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::TrainingGroup;
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::model::{Model, ModelGrads, PairForward, ScoreMode};
use crate::seeds;
use crate::tokenizer::{encode_pair, EncodedPair, Vocabulary};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which heads contribute loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossHeads {
    ClsOnly,
    Joint,
}

impl LossHeads {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossHeads::ClsOnly => "cls_only",
            LossHeads::Joint => "joint",
        }
    }
}

impl FromStr for LossHeads {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossHeads> {
        match s {
            "cls_only" => Ok(LossHeads::ClsOnly),
            "joint" => Ok(LossHeads::Joint),
            other => Err(Error::Config(format!(
                "unknown loss_heads {other:?}; expected cls_only or joint"
            ))),
        }
    }
}

impl fmt::Display for LossHeads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub loss_heads: LossHeads,
    pub mask_exact_match: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            warmup_steps: 300,
            peak_lr: 1e-4,
            batch_size: 4,
            n_negatives: 7,
            loss_heads: LossHeads::Joint,
            mask_exact_match: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` comments and blank lines are skipped,
    /// unknown keys are rejected, missing keys keep their defaults.
    pub fn from_key_values(text: &str, origin: &Path) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(origin, idx + 1, format!("expected key=value, got {line:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::parse(origin, idx + 1, format!("{what}: {value:?}"));
            match key {
                "steps" => cfg.steps = value.parse().map_err(|_| bad("bad integer"))?,
                "warmup_steps" => {
                    cfg.warmup_steps = value.parse().map_err(|_| bad("bad integer"))?
                }
                "peak_lr" => cfg.peak_lr = value.parse().map_err(|_| bad("bad real"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("bad integer"))?,
                "n_negatives" => {
                    cfg.n_negatives = value.parse().map_err(|_| bad("bad integer"))?
                }
                "loss_heads" => cfg.loss_heads = value.parse()?,
                "mask_exact_match" => {
                    cfg.mask_exact_match = value.parse().map_err(|_| bad("bad bool"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("bad integer"))?,
                other => {
                    return Err(Error::parse(
                        origin,
                        idx + 1,
                        format!("unknown config key {other:?}"),
                    ))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn score_mode(&self) -> ScoreMode {
        match (self.loss_heads, self.mask_exact_match) {
            (LossHeads::ClsOnly, _) => ScoreMode::ClsOnly,
            (LossHeads::Joint, false) => ScoreMode::ClsPlusLate,
            (LossHeads::Joint, true) => ScoreMode::ClsPlusMaskedLate,
        }
    }
}

/// One step's loss terms, as written to the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l1: f64,
    pub l2: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Softmax cross-entropy of the entry at `positive_index`, with the
/// gradient with respect to every score. Max-subtraction keeps the
/// exponentials in range, so the loss is shift-invariant.
pub fn lce_loss(scores: &[f64], positive_index: usize) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() || positive_index >= scores.len() {
        return Err(Error::Data(format!(
            "positive index {positive_index} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: "group scores".into() });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (scores[positive_index] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| e / sum - if k == positive_index { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// A training group with every pair already encoded, positive first.
#[derive(Debug, Clone)]
pub struct EncodedGroup {
    pub query_id: String,
    pub pairs: Vec<EncodedPair>,
}

pub fn encode_groups(
    vocab: &Vocabulary,
    groups: &[TrainingGroup],
    max_query_len: usize,
    max_len: usize,
) -> Result<Vec<EncodedGroup>> {
    groups
        .iter()
        .map(|g| {
            let mut pairs = Vec::with_capacity(1 + g.negatives.len());
            pairs.push(encode_pair(vocab, &g.query.text, &g.positive.full_text(), max_query_len, max_len)?);
            for neg in &g.negatives {
                pairs.push(encode_pair(vocab, &g.query.text, &neg.full_text(), max_query_len, max_len)?);
            }
            Ok(EncodedGroup { query_id: g.query.query_id.clone(), pairs })
        })
        .collect()
}

/// Loss terms and the summed parameter gradients for one group.
pub struct GroupLoss {
    pub l1: f64,
    pub l2: Option<f64>,
    pub total: f64,
    pub grads: ModelGrads,
}

/// Seeds for per-pair dropout draws; `None` disables dropout even when
/// the encoder config asks for it, which inference and gradient checks
/// rely on.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSeeds {
    pub base: u64,
    pub step: usize,
    pub group: usize,
}

fn forward_group(
    model: &Model,
    group: &EncodedGroup,
    mode: ScoreMode,
    dropout: Option<DropoutSeeds>,
) -> Result<Vec<PairForward>> {
    group
        .pairs
        .iter()
        .enumerate()
        .map(|(pair_idx, pair)| {
            let mut rng = dropout.map(|d| seeds::rng_for_pair(d.base, d.step, d.group, pair_idx));
            model.forward_pair_train(pair, mode, true, rng.as_mut())
        })
        .collect()
}

/// Listwise loss over one group plus gradients for every parameter.
/// Both heads' losses share the encoder, so their gradients sum there.
pub fn joint_loss(
    model: &Model,
    group: &EncodedGroup,
    cfg: &TrainConfig,
    dropout: Option<DropoutSeeds>,
) -> Result<GroupLoss> {
    if group.pairs.len() != cfg.n_negatives + 1 {
        return Err(Error::Data(format!(
            "group {} has {} pairs, expected {}",
            group.query_id,
            group.pairs.len(),
            cfg.n_negatives + 1
        )));
    }
    let mode = cfg.score_mode();
    let forwards = forward_group(model, group, mode, dropout)?;

    let s_m: Vec<f64> = forwards.iter().map(|f| f.s_m).collect();
    let (l1, g1) = lce_loss(&s_m, 0)?;
    let (l2, g2) = match cfg.loss_heads {
        LossHeads::ClsOnly => (None, None),
        LossHeads::Joint => {
            let s_l: Vec<f64> =
                forwards.iter().map(|f| f.s_l.expect("joint forward kept late scores")).collect();
            let (l, g) = lce_loss(&s_l, 0)?;
            (Some(l), Some(g))
        }
    };
    let total = l1 + l2.unwrap_or(0.0);
    if !total.is_finite() {
        return Err(Error::NonFinite { context: format!("loss for group {}", group.query_id) });
    }

    let mut grads = model.zero_grads();
    for (k, (pair, fwd)) in group.pairs.iter().zip(&forwards).enumerate() {
        let d_s_l = g2.as_ref().map_or(0.0, |g| g[k]);
        let pair_grads = model.backward_pair(pair, fwd, g1[k], d_s_l)?;
        grads.add_scaled(&pair_grads, 1.0);
    }
    Ok(GroupLoss { l1, l2, total, grads })
}

/// Linear warmup from zero to the peak, then linear decay back to zero.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(step < cfg.steps);
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.peak_lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup_steps) as f64
    }
}

/// Bias-corrected Adam moments, one pair of buffers per tensor.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        let shapes: Vec<usize> = model
            .params
            .tensors()
            .iter()
            .chain(model.heads.tensors().iter())
            .map(|(_, t)| t.len())
            .collect();
        AdamState {
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }
}

pub fn optimizer_step(
    model: &mut Model,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let grad_tensors: Vec<(String, Vec<f64>)> = grads
        .encoder
        .tensors()
        .iter()
        .chain(grads.heads.tensors().iter())
        .map(|(n, t)| (n.clone(), t.to_vec()))
        .collect();
    let mut param_tensors = model.params.tensors_mut();
    param_tensors.extend(model.heads.tensors_mut());
    if param_tensors.len() != grad_tensors.len() || param_tensors.len() != state.m.len() {
        return Err(Error::Shape("optimizer state does not match model".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (ti, ((name, params), (gname, grad))) in
        param_tensors.iter_mut().zip(&grad_tensors).enumerate()
    {
        if name != gname || params.len() != grad.len() {
            return Err(Error::Shape(format!(
                "gradient tensor {gname} ({}) does not match parameter {name} ({})",
                grad.len(),
                params.len()
            )));
        }
        let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub struct TrainOptions {
    /// Receives `model-{step}.ckpt`, `model-final.ckpt`, and `loss.tsv`.
    pub out_dir: PathBuf,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub ckpt_every: usize,
    pub policy: ExecPolicy,
}

pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub loss_curve: PathBuf,
    pub reports: Vec<LossReport>,
    pub periodic_checkpoints: Vec<PathBuf>,
}

fn write_loss_curve(path: &Path, reports: &[LossReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let emit = |res: std::io::Result<()>| res.map_err(|e| Error::io(path, e));
    emit(writeln!(w, "step\tl1\tl2\ttotal\tlr"))?;
    for r in reports {
        let l2 = r.l2.map_or_else(|| "-".to_string(), |v| v.to_string());
        emit(writeln!(w, "{}\t{}\t{}\t{}\t{}", r.step, r.l1, l2, r.total, r.lr))?;
    }
    emit(w.flush())
}

/// Runs the full schedule over `groups`, cycling through them in order,
/// `batch_size` groups per step. Group losses inside a batch may be
/// computed in parallel; the reduction and the optimizer update are
/// sequential, so results are identical at any thread count. A
/// non-finite loss aborts with the loss curve flushed and the last
/// written checkpoint intact.
pub fn train_loop(
    model: &mut Model,
    groups: &[EncodedGroup],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Data("no training groups".into()));
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let loss_curve = opts.out_dir.join("loss.tsv");
    let dropout_active = model.cfg.encoder.dropout > 0.0;

    let mut state = AdamState::new(model);
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut periodic = Vec::new();

    for step in 0..cfg.steps {
        let batch: Vec<(usize, &EncodedGroup)> = (0..cfg.batch_size)
            .map(|j| {
                let gi = (step * cfg.batch_size + j) % groups.len();
                (gi, &groups[gi])
            })
            .collect();
        let losses = exec::try_map_indexed(opts.policy, &batch, |_, (gi, group)| {
            let dropout = dropout_active.then_some(DropoutSeeds {
                base: cfg.seed,
                step,
                group: *gi,
            });
            joint_loss(model, group, cfg, dropout)
        });
        let losses = losses.map_err(|e| match e {
            Error::NonFinite { context } => {
                let _ = write_loss_curve(&loss_curve, &reports);
                Error::NonFinite { context: format!("{context} at step {step}") }
            }
            other => other,
        })?;

        let scale = 1.0 / cfg.batch_size as f64;
        let mut grads = model.zero_grads();
        let (mut l1, mut l2_sum) = (0.0, 0.0);
        let mut any_l2 = false;
        for gl in &losses {
            grads.add_scaled(&gl.grads, scale);
            l1 += gl.l1 * scale;
            if let Some(l2) = gl.l2 {
                l2_sum += l2 * scale;
                any_l2 = true;
            }
        }
        let total = l1 + if any_l2 { l2_sum } else { 0.0 };
        if !total.is_finite() || !grads.is_finite() {
            let _ = write_loss_curve(&loss_curve, &reports);
            return Err(Error::NonFinite { context: format!("batch gradient at step {step}") });
        }

        let lr = lr_schedule(step, cfg);
        optimizer_step(model, &grads, &mut state, lr)?;
        reports.push(LossReport { step, l1, l2: any_l2.then_some(l2_sum), total, lr });

        if opts.ckpt_every > 0 && (step + 1) % opts.ckpt_every == 0 && step + 1 < cfg.steps {
            let path = opts.out_dir.join(format!("model-{:06}.ckpt", step + 1));
            model.save(&path)?;
            periodic.push(path);
        }
    }

    let final_checkpoint = opts.out_dir.join("model-final.ckpt");
    let checkpoint_id = model.save(&final_checkpoint)?;
    write_loss_curve(&loss_curve, &reports)?;
    Ok(TrainSummary {
        final_checkpoint,
        checkpoint_id,
        loss_curve,
        reports,
        periodic_checkpoints: periodic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Query};
    use crate::encoder::EncoderConfig;
    use crate::heads::{HeadConfig, ProjectionKind, TokenProjection};
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny_model(seed: u64) -> Model {
        Model::init(ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 2,
                model_dim: 16,
                ffn_dim: 32,
                max_len: 48,
                vocab_size: 64,
                dropout: 0.0,
                seed,
            },
            head: HeadConfig { d_tok: 4, projection: ProjectionKind::Shared },
        })
        .unwrap()
    }

    fn synthetic_groups(n_groups: usize, n_negatives: usize, seed: u64) -> (Vocabulary, Vec<EncodedGroup>) {
        let mut rng = seeds::rng_for(seed, seeds::domain::SYNTHETIC);
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let sentence = |rng: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize| {
            let len = rng.gen_range(lo..=hi);
            (0..len)
                .map(|_| words[rng.gen_range(0..words.len())].clone())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut docs = Vec::new();
        let mut groups = Vec::new();
        for g in 0..n_groups {
            let query = Query { query_id: format!("q{g}"), text: sentence(&mut rng, 2, 4) };
            let mk_doc = |rng: &mut rand_chacha::ChaCha8Rng, docs: &mut Vec<String>| {
                let text = sentence(rng, 4, 9);
                docs.push(text.clone());
                Document { doc_id: format!("d{g}-{}", docs.len()), title: None, text }
            };
            let positive = mk_doc(&mut rng, &mut docs);
            let negatives = (0..n_negatives).map(|_| mk_doc(&mut rng, &mut docs)).collect();
            groups.push(TrainingGroup { query, positive, negatives });
        }
        let queries: Vec<String> = groups.iter().map(|g| g.query.text.clone()).collect();
        let vocab = Vocabulary::build(docs.iter().map(String::as_str), queries.iter().map(String::as_str), 1).unwrap();
        let encoded = encode_groups(&vocab, &groups, 16, 48).unwrap();
        (vocab, encoded)
    }

    #[test]
    fn uniform_scores_give_log_group_size() {
        let (loss, grad) = lce_loss(&[0.5; 8], 3).unwrap();
        assert!((loss - 2.0794415416798357).abs() < 1e-12);
        for (k, g) in grad.iter().enumerate() {
            let expect = if k == 3 { 0.125 - 1.0 } else { 0.125 };
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_positive_loss_is_tiny() {
        let (loss, _) = lce_loss(&[10.0, -10.0], 0).unwrap();
        // Tolerance covers the roundoff of ln(1+x) for x near 2e-9.
        assert!((loss - 2.0611536181902037e-9).abs() < 1e-15);
    }

    #[test]
    fn gradient_sums_to_zero() {
        let mut rng = seeds::rng_for(9, seeds::domain::SYNTHETIC);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let pos = rng.gen_range(0..n);
            let (_, grad) = lce_loss(&scores, pos).unwrap();
            let sum: f64 = grad.iter().sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_shift_invariant() {
        let scores = [1.3, -0.2, 4.0, 0.0];
        let (a, _) = lce_loss(&scores, 2).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 1234.5).collect();
        let (b, _) = lce_loss(&shifted, 2).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn lce_rejects_bad_input() {
        assert!(lce_loss(&[], 0).is_err());
        assert!(lce_loss(&[1.0, 2.0], 2).is_err());
        assert!(lce_loss(&[1.0, f64::NAN], 0).is_err());
    }

    #[test]
    fn schedule_matches_hand_values() {
        let cfg = TrainConfig { steps: 3000, warmup_steps: 300, peak_lr: 1e-4, ..TrainConfig::default() };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(300, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(1650, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(150, &cfg) - 5e-5).abs() < 1e-18);
        let no_warmup = TrainConfig { warmup_steps: 0, ..cfg };
        assert!((lr_schedule(0, &no_warmup) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn config_file_round_trip_and_rejection() {
        let origin = Path::new("train.cfg");
        let cfg = TrainConfig::from_key_values(
            "# comment\nsteps = 50\nwarmup_steps=5\npeak_lr=0.001\nbatch_size=2\nn_negatives=3\nloss_heads=cls_only\nmask_exact_match=true\nseed=7\n",
            origin,
        )
        .unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.warmup_steps, 5);
        assert_eq!(cfg.peak_lr, 0.001);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.n_negatives, 3);
        assert_eq!(cfg.loss_heads, LossHeads::ClsOnly);
        assert!(cfg.mask_exact_match);
        assert_eq!(cfg.seed, 7);

        assert!(TrainConfig::from_key_values("stepz=3\n", origin).is_err());
        assert!(TrainConfig::from_key_values("steps 3\n", origin).is_err());
        assert!(TrainConfig::from_key_values("steps=3\nwarmup_steps=9\n", origin).is_err());
        let defaults = TrainConfig::from_key_values("", origin).unwrap();
        assert_eq!(defaults, TrainConfig::default());
    }

    #[test]
    fn random_init_loss_is_near_uniform() {
        let model = tiny_model(11);
        let (_v, groups) = synthetic_groups(100, 7, 13);
        let cfg = TrainConfig { n_negatives: 7, ..TrainConfig::default() };
        let mean: f64 = groups
            .iter()
            .map(|g| joint_loss(&model, g, &cfg, None).unwrap().total)
            .sum::<f64>()
            / groups.len() as f64;
        let expected = 2.0 * (8.0f64).ln();
        assert!(
            (mean - expected).abs() < 0.3 * expected,
            "mean loss {mean} outside 30% of {expected}"
        );
    }

    #[test]
    fn cls_only_loss_skips_late_head() {
        let model = tiny_model(3);
        let (_v, groups) = synthetic_groups(2, 3, 5);
        let cfg = TrainConfig {
            n_negatives: 3,
            loss_heads: LossHeads::ClsOnly,
            ..TrainConfig::default()
        };
        let gl = joint_loss(&model, &groups[0], &cfg, None).unwrap();
        assert!(gl.l2.is_none());
        assert_eq!(gl.total, gl.l1);
        match &gl.grads.heads.projection {
            TokenProjection::Shared { weight, bias } => {
                assert!(weight.iter().all(|v| *v == 0.0));
                assert!(bias.iter().all(|v| *v == 0.0));
            }
            _ => panic!("unexpected projection"),
        }
    }

    #[test]
    fn joint_gradient_is_sum_of_head_gradients() {
        let model = tiny_model(7);
        let (_v, groups) = synthetic_groups(1, 3, 21);
        let cfg = TrainConfig { n_negatives: 3, ..TrainConfig::default() };
        let joint = joint_loss(&model, &groups[0], &cfg, None).unwrap();

        // Recompute each head's contribution alone and sum.
        let group = &groups[0];
        let forwards = forward_group(&model, group, ScoreMode::ClsPlusLate, None).unwrap();
        let s_m: Vec<f64> = forwards.iter().map(|f| f.s_m).collect();
        let s_l: Vec<f64> = forwards.iter().map(|f| f.s_l.unwrap()).collect();
        let (_, g1) = lce_loss(&s_m, 0).unwrap();
        let (_, g2) = lce_loss(&s_l, 0).unwrap();
        let mut summed = model.zero_grads();
        for (k, (pair, fwd)) in group.pairs.iter().zip(&forwards).enumerate() {
            summed.add_scaled(&model.backward_pair(pair, fwd, g1[k], 0.0).unwrap(), 1.0);
            summed.add_scaled(&model.backward_pair(pair, fwd, 0.0, g2[k]).unwrap(), 1.0);
        }

        for ((name, a), (_, b)) in joint
            .grads
            .encoder
            .tensors()
            .iter()
            .chain(joint.grads.heads.tensors().iter())
            .zip(summed.encoder.tensors().iter().chain(summed.heads.tensors().iter()))
        {
            for (x, y) in a.iter().zip(b.iter()) {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / denom < 1e-9, "tensor {name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn group_size_must_match_config() {
        let model = tiny_model(2);
        let (_v, groups) = synthetic_groups(1, 3, 2);
        let cfg = TrainConfig { n_negatives: 7, ..TrainConfig::default() };
        assert!(joint_loss(&model, &groups[0], &cfg, None).is_err());
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let model = tiny_model(17);
        let (_v, groups) = synthetic_groups(1, 3, 19);
        let cfg = TrainConfig {
            n_negatives: 3,
            mask_exact_match: true,
            ..TrainConfig::default()
        };
        let group = &groups[0];
        let gl = joint_loss(&model, group, &cfg, None).unwrap();
        let flat: Vec<f64> = gl
            .grads
            .encoder
            .tensors()
            .iter()
            .chain(gl.grads.heads.tensors().iter())
            .flat_map(|(_, t)| t.iter().copied())
            .collect();

        let total_len: usize =
            model.params.tensors().iter().chain(model.heads.tensors().iter()).map(|(_, t)| t.len()).sum();
        let poke = |m: &Model, idx: usize, delta: f64| -> Model {
            let mut out = m.clone();
            let mut tensors = out.params.tensors_mut();
            tensors.extend(out.heads.tensors_mut());
            let mut rem = idx;
            for (_, t) in tensors {
                if rem < t.len() {
                    t[rem] += delta;
                    break;
                }
                rem -= t.len();
            }
            out
        };
        let mut rng = seeds::rng_for(23, seeds::domain::SYNTHETIC);
        let eps = 1e-5;
        let floor = 1e-6 * gl.total.abs().max(1.0);
        for _ in 0..50 {
            let idx = rng.gen_range(0..total_len);
            let plus = joint_loss(&poke(&model, idx, eps), group, &cfg, None).unwrap().total;
            let minus = joint_loss(&poke(&model, idx, -eps), group, &cfg, None).unwrap().total;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = flat[idx];
            let denom = numeric.abs().max(analytic.abs()).max(floor);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "coordinate {idx}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn adam_leaves_params_alone_on_zero_grad() {
        let mut model = tiny_model(5);
        let before = model.clone();
        let grads = model.zero_grads();
        let mut state = AdamState::new(&model);
        optimizer_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        for ((_, a), (_, b)) in model
            .params
            .tensors()
            .iter()
            .chain(model.heads.tensors().iter())
            .zip(before.params.tensors().iter().chain(before.heads.tensors().iter()))
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_first_step_is_finite_and_moves_params() {
        let mut model = tiny_model(5);
        let before = model.clone();
        let mut grads = model.zero_grads();
        for (_, t) in grads.encoder.tensors_mut() {
            for v in t.iter_mut() {
                *v = 0.01;
            }
        }
        let mut state = AdamState::new(&model);
        optimizer_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        let mut moved = 0usize;
        for ((_, a), (_, b)) in
            model.params.tensors().iter().zip(before.params.tensors().iter())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!(x.is_finite());
                if x != y {
                    moved += 1;
                    // First-step update magnitude is lr within epsilon slack.
                    assert!((x - y).abs() <= 1e-3 + 1e-9);
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn adam_is_deterministic_over_many_steps() {
        let run = || {
            let mut model = tiny_model(8);
            let mut state = AdamState::new(&model);
            let mut rng = seeds::rng_for(31, seeds::domain::SYNTHETIC);
            for step in 0..100 {
                let mut grads = model.zero_grads();
                let mut tensors = grads.encoder.tensors_mut();
                tensors.extend(grads.heads.tensors_mut());
                for (_, t) in tensors {
                    for v in t.iter_mut() {
                        *v = rng.gen_range(-0.1..0.1);
                    }
                }
                optimizer_step(&mut model, &grads, &mut state, 1e-4 * (step as f64 + 1.0)).unwrap();
            }
            model
        };
        let a = run();
        let b = run();
        for ((_, ta), (_, tb)) in a
            .params
            .tensors()
            .iter()
            .chain(a.heads.tensors().iter())
            .zip(b.params.tensors().iter().chain(b.heads.tensors().iter()))
        {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn train_loop_reduces_loss_and_reproduces_bitwise() {
        let cfg = TrainConfig {
            steps: 30,
            warmup_steps: 3,
            peak_lr: 5e-3,
            batch_size: 2,
            n_negatives: 3,
            loss_heads: LossHeads::Joint,
            mask_exact_match: false,
            seed: 41,
        };
        let (_v, groups) = synthetic_groups(6, 3, 41);
        let run = |dir: &Path| {
            let mut model = tiny_model(41);
            let opts = TrainOptions {
                out_dir: dir.to_path_buf(),
                ckpt_every: 10,
                policy: ExecPolicy::default(),
            };
            train_loop(&mut model, &groups, &cfg, &opts).unwrap()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let sa = run(dir_a.path());
        let sb = run(dir_b.path());

        assert_eq!(sa.reports.len(), 30);
        let first = sa.reports.first().unwrap().total;
        let last = sa.reports.last().unwrap().total;
        assert!(last < first, "loss did not fall: {first} -> {last}");
        for r in &sa.reports {
            assert_eq!(r.total, r.l1 + r.l2.unwrap());
        }
        assert_eq!(sa.periodic_checkpoints.len(), 2);

        assert_eq!(sa.checkpoint_id, sb.checkpoint_id);
        assert_eq!(
            std::fs::read(&sa.final_checkpoint).unwrap(),
            std::fs::read(&sb.final_checkpoint).unwrap()
        );
        assert_eq!(
            std::fs::read(&sa.loss_curve).unwrap(),
            std::fs::read(&sb.loss_curve).unwrap()
        );

        let text = std::fs::read_to_string(&sa.loss_curve).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step\tl1\tl2\ttotal\tlr");
        assert_eq!(lines.count(), 30);
    }

    #[test]
    fn train_loop_with_dropout_is_still_deterministic() {
        let cfg = TrainConfig {
            steps: 8,
            warmup_steps: 2,
            peak_lr: 1e-3,
            batch_size: 2,
            n_negatives: 2,
            loss_heads: LossHeads::Joint,
            mask_exact_match: true,
            seed: 51,
        };
        let (_v, groups) = synthetic_groups(4, 2, 51);
        let mk_model = || {
            Model::init(ModelConfig {
                encoder: EncoderConfig {
                    layers: 1,
                    heads: 2,
                    model_dim: 8,
                    ffn_dim: 16,
                    max_len: 48,
                    vocab_size: 64,
                    dropout: 0.2,
                    seed: 51,
                },
                head: HeadConfig { d_tok: 4, projection: ProjectionKind::Shared },
            })
            .unwrap()
        };
        let run = |dir: &Path| {
            let mut model = mk_model();
            let opts = TrainOptions {
                out_dir: dir.to_path_buf(),
                ckpt_every: 0,
                policy: ExecPolicy::Sequential,
            };
            train_loop(&mut model, &groups, &cfg, &opts).unwrap()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let sa = run(dir_a.path());
        let sb = run(dir_b.path());
        assert_eq!(sa.checkpoint_id, sb.checkpoint_id);
        assert!(sa.periodic_checkpoints.is_empty());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_training_agree_bitwise() {
        let cfg = TrainConfig {
            steps: 10,
            warmup_steps: 2,
            peak_lr: 1e-3,
            batch_size: 4,
            n_negatives: 3,
            loss_heads: LossHeads::Joint,
            mask_exact_match: false,
            seed: 61,
        };
        let (_v, groups) = synthetic_groups(8, 3, 61);
        let run = |policy: ExecPolicy, dir: &Path| {
            let mut model = tiny_model(61);
            let opts = TrainOptions { out_dir: dir.to_path_buf(), ckpt_every: 0, policy };
            train_loop(&mut model, &groups, &cfg, &opts).unwrap()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let seq = run(ExecPolicy::Sequential, dir_a.path());
        let par = run(ExecPolicy::Parallel, dir_b.path());
        assert_eq!(seq.checkpoint_id, par.checkpoint_id);
        assert_eq!(
            std::fs::read(&seq.loss_curve).unwrap(),
            std::fs::read(&par.loss_curve).unwrap()
        );
    }
}
