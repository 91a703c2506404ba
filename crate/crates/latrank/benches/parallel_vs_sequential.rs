//! Compares the rayon execution policy against the sequential one on
//! the two fan-out hot paths: candidate scoring during reranking and
//! per-group gradient computation during training. Both policies must
//! produce identical bytes; these benches show what the parallel
//! feature actually buys.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latrank::corpus::{Corpus, Document, Query, TrainingGroup};
use latrank::encoder::EncoderConfig;
use latrank::exec::ExecPolicy;
use latrank::heads::{HeadConfig, ProjectionKind};
use latrank::model::{Model, ModelConfig, ScoreMode};
use latrank::pipeline::{build_index, retrieve_all, Bm25Params, Reranker};
use latrank::tokenizer::Vocabulary;
use latrank::trainer::{encode_groups, joint_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: usize = 200;
const DOCS: usize = 200;
const QUERIES: usize = 16;

fn word(i: usize) -> String {
    format!("w{i:03}")
}

fn synth_corpus(rng: &mut ChaCha8Rng) -> (Corpus, Vec<Query>) {
    let docs: Vec<Document> = (0..DOCS)
        .map(|i| {
            let len = rng.gen_range(8..16);
            let text: Vec<String> = (0..len).map(|_| word(rng.gen_range(0..WORDS))).collect();
            Document { doc_id: format!("d{i:03}"), title: None, text: text.join(" ") }
        })
        .collect();
    let queries: Vec<Query> = (0..QUERIES)
        .map(|i| {
            let len = rng.gen_range(3..6);
            let text: Vec<String> = (0..len).map(|_| word(rng.gen_range(0..WORDS))).collect();
            Query { query_id: format!("q{i:02}"), text: text.join(" ") }
        })
        .collect();
    (Corpus::new(docs).unwrap(), queries)
}

fn small_model(vocab_size: usize) -> Model {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            max_len: 64,
            vocab_size,
            dropout: 0.0,
            seed: 11,
        },
        head: HeadConfig { d_tok: 8, projection: ProjectionKind::Shared },
    };
    Model::init(cfg).unwrap()
}

fn bench_policies(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (corpus, queries) = synth_corpus(&mut rng);
    let doc_texts: Vec<String> = corpus.docs().iter().map(|d| d.full_text()).collect();
    let query_texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let vocab = Vocabulary::build(
        doc_texts.iter().map(String::as_str),
        query_texts.iter().copied(),
        1,
    )
    .unwrap();
    let model = small_model(vocab.size());
    let index = build_index(&corpus).unwrap();

    let policies = [
        ("sequential", ExecPolicy::Sequential),
        ("parallel", ExecPolicy::Parallel),
    ];

    let mut group = c.benchmark_group("retrieve_all");
    for (name, policy) in policies {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &policy| {
            b.iter(|| retrieve_all(&index, &queries, 100, Bm25Params::default(), policy));
        });
    }
    group.finish();

    let run = retrieve_all(&index, &queries, 20, Bm25Params::default(), ExecPolicy::Sequential);
    let mut group = c.benchmark_group("rerank_depth20");
    group.sample_size(10).measurement_time(Duration::from_secs(8));
    for (name, policy) in policies {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &policy| {
            let reranker = Reranker {
                model: &model,
                vocab: &vocab,
                corpus: &corpus,
                checkpoint_id: "bench",
                max_query_len: 16,
                em_unk_matches: true,
                policy,
            };
            b.iter(|| reranker.rerank(&queries, &run, 20, ScoreMode::ClsPlusLate).unwrap());
        });
    }
    group.finish();

    let cfg = TrainConfig::default();
    let groups: Vec<TrainingGroup> = queries
        .iter()
        .take(8)
        .map(|q| {
            let mut picks = corpus.docs().iter();
            let positive = picks.next().unwrap().clone();
            let negatives: Vec<Document> =
                picks.skip(3).take(cfg.n_negatives).cloned().collect();
            TrainingGroup { query: q.clone(), positive, negatives }
        })
        .collect();
    let encoded = encode_groups(&vocab, &groups, 16, 64).unwrap();

    let mut group = c.benchmark_group("joint_loss_batch8");
    group.sample_size(10).measurement_time(Duration::from_secs(8));
    for (name, policy) in policies {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &policy| {
            b.iter(|| {
                let losses = latrank::exec::map_indexed(policy, &encoded, |_, g| {
                    joint_loss(&model, g, &cfg, None).unwrap().total
                });
                losses.iter().sum::<f64>()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_policies);
criterion_main!(benches);
