//! Command-line front end for the reranking laboratory: index, retrieve,
//! train, rerank, evaluate, analyze, and sweep over one fixture-sized
//! experiment at a time.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use latrank::corpus::{
    build_training_groups, load_corpus, load_qrels, load_queries, read_run, validate_run,
    write_run, Corpus, GroupConfig, Query, RunEntry, SkippedQuery,
};
use latrank::encoder::EncoderConfig;
use latrank::exec::{self, ExecPolicy};
use latrank::heads::{HeadConfig, ProjectionKind};
use latrank::metrics::{length_analysis, mrr_at_k, ndcg_at_k, per_query_delta, Gain, MetricReport};
use latrank::model::{Model, ModelConfig, ScoreMode};
use latrank::pipeline::{build_index, retrieve_all, Bm25Params, InvertedIndex, Reranker};
use latrank::tokenizer::Vocabulary;
use latrank::trainer::{encode_groups, train_loop, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(
    name = "latrank",
    version,
    about = "Two-stage retrieval experiments: BM25, cross-encoder reranking, late interaction"
)]
struct Cli {
    /// Worker threads for retrieval, reranking, and training batches.
    /// 0 uses all cores; 1 forces the sequential reference path.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Base directory that relative data paths resolve against.
    #[arg(long, global = true, env = "LATRANK_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the inverted index for a corpus.
    Index(IndexArgs),
    /// First-stage BM25 retrieval into a run file.
    Retrieve(RetrieveArgs),
    /// Train a reranker on groups sampled from a first-stage run.
    Train(TrainArgs),
    /// Rescore a run's top candidates with a trained checkpoint.
    Rerank(RerankArgs),
    /// Score a run file against relevance judgments.
    Evaluate(EvaluateArgs),
    /// Compare two runs per query and fit quality delta against query length.
    Analyze(AnalyzeArgs),
    /// Train and evaluate across a list of token dimensions.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct IndexArgs {
    /// Corpus JSONL with _id, optional title, and text per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Index file produced by `index`.
    #[arg(long)]
    index: PathBuf,
    /// Queries JSONL with _id and text per line.
    #[arg(long)]
    queries: PathBuf,
    /// Candidates per query; 1000 matches the full-scale protocol.
    #[arg(long, default_value_t = 100)]
    depth: usize,
    /// BM25 term-frequency saturation.
    #[arg(long, default_value_t = 0.9)]
    k1: f64,
    /// BM25 length normalization.
    #[arg(long, default_value_t = 0.4)]
    b: f64,
    /// Output run file, six-column TREC format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EncoderArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Attention heads; must divide the model dimension.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 128)]
    ffn_dim: usize,
    /// Token budget for an encoded pair, specials included.
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    /// Query tokens kept before the document is laid out.
    #[arg(long, default_value_t = 64)]
    max_query_len: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, value_enum, default_value_t = ProjectionArg::Shared)]
    projection: ProjectionArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProjectionArg {
    /// Raw encoder states; requires d-tok equal to the model dimension.
    Identity,
    /// One projection for query and document tokens.
    Shared,
    /// Independent query-side and document-side projections.
    Separate,
}

impl From<ProjectionArg> for ProjectionKind {
    fn from(p: ProjectionArg) -> ProjectionKind {
        match p {
            ProjectionArg::Identity => ProjectionKind::Identity,
            ProjectionArg::Shared => ProjectionKind::Shared,
            ProjectionArg::Separate => ProjectionKind::Separate,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Relevance judgments, TREC qrels TSV.
    #[arg(long)]
    qrels: PathBuf,
    /// First-stage run supplying the negative candidate pool.
    #[arg(long)]
    run: PathBuf,
    /// Training config as key=value lines; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss composition override.
    #[arg(long, value_parser = ["cls_only", "joint"])]
    loss: Option<String>,
    /// Mask exact-match token pairs in the late-interaction loss.
    #[arg(long)]
    mask_em: bool,
    /// Seed override; fans out to init, sampling, and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
    /// Candidate pool depth for negative sampling.
    #[arg(long, default_value_t = 100)]
    pool_depth: usize,
    /// Tokens below this corpus frequency fall back to the unknown id.
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Dimension token vectors are projected to for late interaction.
    #[arg(long, default_value_t = 32)]
    d_tok: usize,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Receives checkpoints, vocab, loss curve, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Input run file; any retriever's output works.
    #[arg(long)]
    run_in: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary saved by `train`.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_parser = ["cls_only", "cls_plus_late", "cls_plus_masked_late"])]
    score_mode: String,
    /// Candidates rescored per query; 1000 matches the full-scale protocol.
    #[arg(long, default_value_t = 100)]
    depth: usize,
    /// Whether two unknown-id tokens count as an exact match.
    #[arg(long, default_value_t = true)]
    em_unk_matches: bool,
    #[arg(long, default_value_t = 64)]
    max_query_len: usize,
    /// Output run file.
    #[arg(long)]
    run_out: PathBuf,
    /// Optional per-candidate score breakdown TSV.
    #[arg(long)]
    breakdown_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Metric cutoff.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Gain function for nDCG.
    #[arg(long, value_parser = ["exponential", "linear"], default_value = "exponential")]
    gain: String,
    /// Receives summary.tsv and per-query TSVs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Baseline run.
    #[arg(long)]
    run_a: PathBuf,
    /// Comparison run; deltas are B minus A.
    #[arg(long)]
    run_b: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_parser = ["ndcg", "mrr"], default_value = "ndcg")]
    metric: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_parser = ["exponential", "linear"], default_value = "exponential")]
    gain: String,
    /// Polynomial degree of the length fit.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Weight each length bucket by its query count in the fit.
    #[arg(long)]
    count_weighted: bool,
    /// Output TSV: per-length deltas plus a fit line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    heldout_queries: PathBuf,
    #[arg(long)]
    heldout_qrels: PathBuf,
    /// Token dimensions to train, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,32,128")]
    d_tok: Vec<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    depth: usize,
    #[arg(long, default_value_t = 100)]
    pool_depth: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Receives per-dimension subdirectories and sweep.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = exec::with_threads(threads, move || run(cli));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let policy = ExecPolicy::for_threads(cli.threads);
    let base = cli.data_dir;
    match cli.command {
        Command::Index(args) => cmd_index(&base, args),
        Command::Retrieve(args) => cmd_retrieve(&base, args, policy),
        Command::Train(args) => cmd_train(&base, args, policy),
        Command::Rerank(args) => cmd_rerank(&base, args, policy),
        Command::Evaluate(args) => cmd_evaluate(&base, args),
        Command::Analyze(args) => cmd_analyze(&base, args),
        Command::Sweep(args) => cmd_sweep(&base, args, policy),
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

/// Records what produced an output directory: the command, the seed,
/// and a digest of every setting, so reruns are attributable.
fn write_manifest(out_dir: &Path, command: &str, seed: u64, settings: &[(&str, String)]) -> Result<()> {
    let mut body = String::new();
    for (k, v) in settings {
        body.push_str(&format!("{k}={v}\n"));
    }
    let digest = Sha256::digest(body.as_bytes());
    let mut out = format!(
        "command={command}\nseed={seed}\nconfig_sha256={digest:x}\n\n"
    );
    out.push_str(&body);
    write_text(&out_dir.join("manifest.txt"), &out)
}

fn cmd_index(base: &Path, args: IndexArgs) -> Result<()> {
    let corpus = load_corpus(&resolve(base, &args.corpus))?;
    let index = build_index(&corpus)?;
    let out = resolve(base, &args.out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    index.save(&out)?;
    println!(
        "indexed {} documents, {} terms, avg length {:.2} -> {}",
        index.doc_count(),
        index.term_count(),
        index.avg_doc_length(),
        out.display()
    );
    Ok(())
}

fn cmd_retrieve(base: &Path, args: RetrieveArgs, policy: ExecPolicy) -> Result<()> {
    if args.depth == 0 {
        bail!("--depth must be at least 1");
    }
    let index = InvertedIndex::load(&resolve(base, &args.index))?;
    let queries = load_queries(&resolve(base, &args.queries))?;
    let params = Bm25Params { k1: args.k1, b: args.b };
    let run = retrieve_all(&index, &queries, args.depth, params, policy);
    for q in &queries {
        if !run.iter().any(|e| e.query_id == q.query_id) {
            eprintln!("query {} matched no documents", q.query_id);
        }
    }
    validate_run(&run)?;
    let out = resolve(base, &args.out);
    write_run(&run, &out)?;
    println!(
        "retrieved {} candidates for {} queries -> {}",
        run.len(),
        queries.len(),
        out.display()
    );
    Ok(())
}

/// Training config assembled from file then flag overrides.
fn resolved_train_config(
    config: Option<&Path>,
    loss: Option<&str>,
    mask_em: bool,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_key_values(&text, path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(loss) = loss {
        cfg.loss_heads = loss.parse()?;
    }
    if mask_em {
        cfg.mask_exact_match = true;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct TrainedArtifacts {
    checkpoint: PathBuf,
    checkpoint_id: String,
    vocab: PathBuf,
    final_loss: f64,
    skipped: Vec<SkippedQuery>,
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    corpus: &Corpus,
    queries: &[Query],
    qrels_path: &Path,
    run: &[RunEntry],
    cfg: &TrainConfig,
    enc: &EncoderArgs,
    d_tok: usize,
    pool_depth: usize,
    min_freq: usize,
    ckpt_every: usize,
    out_dir: &Path,
    policy: ExecPolicy,
) -> Result<TrainedArtifacts> {
    let qrels = load_qrels(qrels_path)?;
    let doc_texts: Vec<String> = corpus.docs().iter().map(|d| d.full_text()).collect();
    let vocab = Vocabulary::build(
        doc_texts.iter().map(String::as_str),
        queries.iter().map(|q| q.text.as_str()),
        min_freq,
    )?;

    let group_cfg = GroupConfig { n_negatives: cfg.n_negatives, pool_depth, seed: cfg.seed };
    let (groups, skipped) = build_training_groups(queries, corpus, &qrels, run, &group_cfg)?;
    if groups.is_empty() {
        bail!("no usable training groups; every query was skipped");
    }
    let encoded = encode_groups(&vocab, &groups, enc.max_query_len, enc.max_len)?;

    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            layers: enc.layers,
            heads: enc.heads,
            model_dim: enc.model_dim,
            ffn_dim: enc.ffn_dim,
            max_len: enc.max_len,
            vocab_size: vocab.size(),
            dropout: enc.dropout,
            seed: cfg.seed,
        },
        head: HeadConfig { d_tok, projection: enc.projection.into() },
    };
    let mut model = Model::init(model_cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let vocab_path = out_dir.join("vocab.tsv");
    vocab.save(&vocab_path)?;
    if !skipped.is_empty() {
        let mut report = String::from("query_id\treason\n");
        for s in &skipped {
            report.push_str(&format!("{}\t{}\n", s.query_id, s.reason));
        }
        write_text(&out_dir.join("skipped.tsv"), &report)?;
    }

    let opts = TrainOptions { out_dir: out_dir.to_path_buf(), ckpt_every, policy };
    let summary = train_loop(&mut model, &encoded, cfg, &opts)?;
    let final_loss = summary.reports.last().map_or(f64::NAN, |r| r.total);
    Ok(TrainedArtifacts {
        checkpoint: summary.final_checkpoint,
        checkpoint_id: summary.checkpoint_id,
        vocab: vocab_path,
        final_loss,
        skipped,
    })
}

fn encoder_settings(enc: &EncoderArgs, d_tok: usize) -> Vec<(&'static str, String)> {
    let projection = match enc.projection {
        ProjectionArg::Identity => "identity",
        ProjectionArg::Shared => "shared",
        ProjectionArg::Separate => "separate",
    };
    vec![
        ("layers", enc.layers.to_string()),
        ("heads", enc.heads.to_string()),
        ("model_dim", enc.model_dim.to_string()),
        ("ffn_dim", enc.ffn_dim.to_string()),
        ("max_len", enc.max_len.to_string()),
        ("max_query_len", enc.max_query_len.to_string()),
        ("dropout", enc.dropout.to_string()),
        ("d_tok", d_tok.to_string()),
        ("projection", projection.to_string()),
    ]
}

fn train_settings(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("steps", cfg.steps.to_string()),
        ("warmup_steps", cfg.warmup_steps.to_string()),
        ("peak_lr", cfg.peak_lr.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("n_negatives", cfg.n_negatives.to_string()),
        ("loss_heads", cfg.loss_heads.to_string()),
        ("mask_exact_match", cfg.mask_exact_match.to_string()),
    ]
}

fn cmd_train(base: &Path, args: TrainArgs, policy: ExecPolicy) -> Result<()> {
    let cfg = resolved_train_config(
        args.config.as_ref().map(|p| resolve(base, p)).as_deref(),
        args.loss.as_deref(),
        args.mask_em,
        args.seed,
    )?;
    let corpus = load_corpus(&resolve(base, &args.corpus))?;
    let queries = load_queries(&resolve(base, &args.queries))?;
    let run = read_run(&resolve(base, &args.run))?;
    let out_dir = resolve(base, &args.out_dir);

    let artifacts = train_one(
        &corpus,
        &queries,
        &resolve(base, &args.qrels),
        &run,
        &cfg,
        &args.encoder,
        args.d_tok,
        args.pool_depth,
        args.min_freq,
        args.ckpt_every,
        &out_dir,
        policy,
    )?;

    let mut settings = train_settings(&cfg);
    settings.extend(encoder_settings(&args.encoder, args.d_tok));
    settings.push(("pool_depth", args.pool_depth.to_string()));
    settings.push(("min_freq", args.min_freq.to_string()));
    write_manifest(&out_dir, "train", cfg.seed, &settings)?;

    for s in &artifacts.skipped {
        eprintln!("skipped query {}: {}", s.query_id, s.reason);
    }
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {} -> {}",
        cfg.steps,
        artifacts.final_loss,
        artifacts.checkpoint_id,
        artifacts.checkpoint.display()
    );
    Ok(())
}

fn cmd_rerank(base: &Path, args: RerankArgs, policy: ExecPolicy) -> Result<()> {
    if args.depth == 0 {
        bail!("--depth must be at least 1");
    }
    let corpus = load_corpus(&resolve(base, &args.corpus))?;
    let queries = load_queries(&resolve(base, &args.queries))?;
    let run = read_run(&resolve(base, &args.run_in))?;
    let vocab = Vocabulary::load(&resolve(base, &args.vocab))?;
    let (model, checkpoint_id) = Model::load(&resolve(base, &args.checkpoint))?;
    let mode: ScoreMode = args.score_mode.parse()?;

    let reranker = Reranker {
        model: &model,
        vocab: &vocab,
        corpus: &corpus,
        checkpoint_id: &checkpoint_id,
        max_query_len: args.max_query_len,
        em_unk_matches: args.em_unk_matches,
        policy,
    };
    let (entries, log) = reranker.rerank(&queries, &run, args.depth, mode)?;
    validate_run(&entries)?;
    let run_out = resolve(base, &args.run_out);
    write_run(&entries, &run_out)?;

    if let Some(breakdown_out) = &args.breakdown_out {
        let mut tsv = String::from("query_id\tdoc_id\ts_m\ts_l\ts_final\n");
        for c in &log {
            let s_l = c.breakdown.s_l.map_or_else(|| "-".to_string(), |v| v.to_string());
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.query_id, c.doc_id, c.breakdown.s_m, s_l, c.breakdown.s_final
            ));
        }
        write_text(&resolve(base, breakdown_out), &tsv)?;
    }
    println!(
        "reranked {} candidates under {} with checkpoint {} -> {}",
        entries.len(),
        mode,
        checkpoint_id,
        run_out.display()
    );
    Ok(())
}

fn report_files(report: &MetricReport, out_dir: &Path) -> Result<()> {
    write_text(
        &out_dir.join(format!("{}-per-query.tsv", report.metric)),
        &report.per_query_tsv(),
    )
}

fn cmd_evaluate(base: &Path, args: EvaluateArgs) -> Result<()> {
    let run = read_run(&resolve(base, &args.run))?;
    let qrels = load_qrels(&resolve(base, &args.qrels))?;
    let gain: Gain = args.gain.parse()?;
    let out_dir = resolve(base, &args.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let ndcg = ndcg_at_k(&run, &qrels, args.k, gain)?;
    let mrr = mrr_at_k(&run, &qrels, args.k)?;
    let mut summary = String::from("metric\tcutoff\tmean\tn_queries\n");
    for report in [&ndcg, &mrr] {
        summary.push_str(&report.summary_line());
        summary.push('\n');
        report_files(report, &out_dir)?;
        println!("{}", report.summary_line());
        if report.zero_relevant > 0 {
            eprintln!(
                "{}: {} queries had no relevant judgments and were excluded",
                report.metric, report.zero_relevant
            );
        }
    }
    write_text(&out_dir.join("summary.tsv"), &summary)?;
    Ok(())
}

fn metric_for(
    name: &str,
    run: &[RunEntry],
    qrels: &[latrank::corpus::Judgment],
    k: usize,
    gain: Gain,
) -> Result<MetricReport> {
    Ok(match name {
        "ndcg" => ndcg_at_k(run, qrels, k, gain)?,
        "mrr" => mrr_at_k(run, qrels, k)?,
        other => bail!("unknown metric {other:?}"),
    })
}

fn cmd_analyze(base: &Path, args: AnalyzeArgs) -> Result<()> {
    let run_a = read_run(&resolve(base, &args.run_a))?;
    let run_b = read_run(&resolve(base, &args.run_b))?;
    let qrels = load_qrels(&resolve(base, &args.qrels))?;
    let queries = load_queries(&resolve(base, &args.queries))?;
    let gain: Gain = args.gain.parse()?;

    let report_a = metric_for(&args.metric, &run_a, &qrels, args.k, gain)?;
    let report_b = metric_for(&args.metric, &run_b, &qrels, args.k, gain)?;
    let deltas = per_query_delta(&report_a, &report_b)?;
    let analysis = length_analysis(&deltas, &queries, args.degree, args.count_weighted)?;

    let out = resolve(base, &args.out);
    write_text(&out, &analysis.to_tsv())?;
    let coeffs: Vec<String> = analysis.fit_coefficients.iter().map(f64::to_string).collect();
    println!(
        "{} length buckets, degree-{} fit [{}] -> {}",
        analysis.points.len(),
        analysis.fit_degree,
        coeffs.join(", "),
        out.display()
    );
    Ok(())
}

fn cmd_sweep(base: &Path, args: SweepArgs, policy: ExecPolicy) -> Result<()> {
    if args.d_tok.is_empty() {
        bail!("--d-tok needs at least one dimension");
    }
    let cfg = resolved_train_config(
        args.config.as_ref().map(|p| resolve(base, p)).as_deref(),
        None,
        false,
        args.seed,
    )?;
    let corpus = load_corpus(&resolve(base, &args.corpus))?;
    let queries = load_queries(&resolve(base, &args.queries))?;
    let qrels_path = resolve(base, &args.qrels);
    let qrels = load_qrels(&qrels_path)?;
    let heldout_queries = load_queries(&resolve(base, &args.heldout_queries))?;
    let heldout_qrels = load_qrels(&resolve(base, &args.heldout_qrels))?;
    let out_dir = resolve(base, &args.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    // One first stage shared by every row keeps the comparison honest.
    let index = build_index(&corpus)?;
    let bm25 = Bm25Params::default();
    let train_run = retrieve_all(&index, &queries, args.depth, bm25, policy);
    let heldout_run = retrieve_all(&index, &heldout_queries, args.depth, bm25, policy);

    let mut rows = Vec::new();
    for d_tok in &args.d_tok {
        let row_dir = out_dir.join(format!("d_tok-{d_tok}"));
        let artifacts = train_one(
            &corpus,
            &queries,
            &qrels_path,
            &train_run,
            &cfg,
            &args.encoder,
            *d_tok,
            args.pool_depth,
            args.min_freq,
            0,
            &row_dir,
            policy,
        )?;
        let vocab = Vocabulary::load(&artifacts.vocab)?;
        let (model, checkpoint_id) = Model::load(&artifacts.checkpoint)?;
        let reranker = Reranker {
            model: &model,
            vocab: &vocab,
            corpus: &corpus,
            checkpoint_id: &checkpoint_id,
            max_query_len: args.encoder.max_query_len,
            em_unk_matches: true,
            policy,
        };
        let (in_domain, _) =
            reranker.rerank(&queries, &train_run, args.depth, ScoreMode::ClsPlusLate)?;
        let (held_out, _) =
            reranker.rerank(&heldout_queries, &heldout_run, args.depth, ScoreMode::ClsPlusLate)?;
        write_run(&in_domain, &row_dir.join("run-train.tsv"))?;
        write_run(&held_out, &row_dir.join("run-heldout.tsv"))?;
        let mrr = mrr_at_k(&in_domain, &qrels, 10)?;
        let ndcg = ndcg_at_k(&held_out, &heldout_qrels, 10, Gain::Exponential)?;
        println!(
            "d_tok {d_tok}: train MRR@10 {:.4}, held-out nDCG@10 {:.4}",
            mrr.mean, ndcg.mean
        );
        rows.push((*d_tok, mrr.mean, ndcg.mean));
    }

    let mut table = String::from("d_tok\tin_domain_mrr@10\theldout_ndcg@10\n");
    for (d_tok, mrr, ndcg) in &rows {
        table.push_str(&format!("{d_tok}\t{mrr}\t{ndcg}\n"));
    }
    write_text(&out_dir.join("sweep.tsv"), &table)?;

    let mut settings = train_settings(&cfg);
    settings.extend(encoder_settings(&args.encoder, 0));
    settings.retain(|(k, _)| *k != "d_tok");
    let list: Vec<String> = args.d_tok.iter().map(usize::to_string).collect();
    settings.push(("d_tok_list", list.join(",")));
    settings.push(("depth", args.depth.to_string()));
    write_manifest(&out_dir, "sweep", cfg.seed, &settings)?;
    Ok(())
}
