//! Collections, judgments, run files, and training-group assembly.
//!
//! Corpora and queries arrive as line-delimited records with `_id` and
//! `text` fields (plus optional `title` for documents). Judgments are
//! 3- or 4-column TSV, runs are 6-column whitespace-separated files.
//! Everything loads into immutable in-memory collections.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Eq, serde::Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub doc_id: String,
    #[serde(default)]
    pub title: Option<String>,
    pub text: String,
}

impl Document {
    /// Title and body joined with a space; the text every downstream
    /// consumer (indexing, encoding) sees.
    pub fn full_text(&self) -> String {
        match &self.title {
            Some(t) if !t.is_empty() => {
                if self.text.is_empty() {
                    t.clone()
                } else {
                    format!("{t} {}", self.text)
                }
            }
            _ => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub query_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Judgment {
    pub query_id: String,
    pub doc_id: String,
    pub relevance: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: u32,
    pub score: f64,
    pub run_tag: String,
}

/// One LCE unit: a query, its positive, and n sampled negatives.
#[derive(Debug, Clone)]
pub struct TrainingGroup {
    pub query: Query,
    pub positive: Document,
    pub negatives: Vec<Document>,
}

/// Ordered document collection with id lookup.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Corpus> {
        let mut by_id = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            if d.doc_id.is_empty() {
                return Err(Error::Data("document with empty _id".into()));
            }
            if d.text.is_empty() && d.title.as_deref().map_or(true, str::is_empty) {
                return Err(Error::Data(format!(
                    "document {:?} has neither text nor title",
                    d.doc_id
                )));
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate document _id {:?}", d.doc_id)));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Documents in file order.
    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|i| &self.docs[*i])
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let d: Document = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        docs.push(d);
    }
    Corpus::new(docs)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut queries = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in body.lines().enumerate() {
        let q: Query = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        if q.query_id.is_empty() {
            return Err(Error::parse(path, lineno + 1, "empty query _id"));
        }
        if q.text.is_empty() {
            return Err(Error::parse(path, lineno + 1, format!("query {:?} has empty text", q.query_id)));
        }
        if !seen.insert(q.query_id.clone()) {
            return Err(Error::Data(format!("duplicate query _id {:?}", q.query_id)));
        }
        queries.push(q);
    }
    Ok(queries)
}

/// Accepts `qid<TAB>doc<TAB>rel` and the TREC 4-column form
/// `qid<TAB>iter<TAB>doc<TAB>rel`.
pub fn load_qrels(path: &Path) -> Result<Vec<Judgment>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (qid, did, rel_str) = match cols.as_slice() {
            [q, d, r] => (*q, *d, *r),
            [q, _iter, d, r] => (*q, *d, *r),
            _ => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("expected 3 or 4 tab-separated columns, got {}", cols.len()),
                ))
            }
        };
        let relevance: u32 = rel_str.parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("relevance {rel_str:?} is not a non-negative integer"))
        })?;
        if !seen.insert((qid.to_string(), did.to_string())) {
            return Err(Error::Data(format!("duplicate judgment for ({qid}, {did})")));
        }
        out.push(Judgment {
            query_id: qid.to_string(),
            doc_id: did.to_string(),
            relevance,
        });
    }
    Ok(out)
}

/// Per-query invariants every run must satisfy: ranks 1..k without gaps,
/// scores non-increasing along ranks, no repeated document.
pub fn validate_run(entries: &[RunEntry]) -> Result<()> {
    let mut per_query: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in entries {
        per_query.entry(&e.query_id).or_default().push(e);
    }
    for (qid, mut es) in per_query {
        es.sort_by_key(|e| e.rank);
        let mut docs = BTreeSet::new();
        for (i, e) in es.iter().enumerate() {
            if e.rank as usize != i + 1 {
                return Err(Error::Data(format!(
                    "run for query {qid:?} has rank {} where {} was expected",
                    e.rank,
                    i + 1
                )));
            }
            if i > 0 && e.score > es[i - 1].score {
                return Err(Error::Data(format!(
                    "run for query {qid:?} has increasing score at rank {}",
                    e.rank
                )));
            }
            if !docs.insert(&e.doc_id) {
                return Err(Error::Data(format!(
                    "run for query {qid:?} lists document {:?} twice",
                    e.doc_id
                )));
            }
        }
    }
    Ok(())
}

pub fn read_run(path: &Path) -> Result<Vec<RunEntry>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [qid, _q0, did, rank, score, tag] = cols.as_slice() else {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 6 whitespace-separated columns, got {}", cols.len()),
            ));
        };
        let rank: u32 = rank
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, format!("bad rank {rank:?}")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(Error::parse(path, lineno + 1, "non-finite score"));
        }
        entries.push(RunEntry {
            query_id: qid.to_string(),
            doc_id: did.to_string(),
            rank,
            score,
            run_tag: tag.to_string(),
        });
    }
    validate_run(&entries)?;
    Ok(entries)
}

/// Serialize entries in canonical order (query id ascending, rank
/// ascending) with scores at 6 decimal places.
pub fn write_run(entries: &[RunEntry], path: &Path) -> Result<()> {
    validate_run(entries)?;
    let mut sorted: Vec<&RunEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.rank.cmp(&b.rank)));
    let mut out = String::new();
    for e in sorted {
        writeln!(
            out,
            "{} Q0 {} {} {:.6} {}",
            e.query_id, e.doc_id, e.rank, e.score, e.run_tag
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy)]
pub struct GroupConfig {
    pub n_negatives: usize,
    /// Only the run's top-`pool_depth` entries per query feed the
    /// negative pool.
    pub pool_depth: usize,
    pub seed: u64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig { n_negatives: 7, pool_depth: 100, seed: 0 }
    }
}

/// A query left out of training and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedQuery {
    pub query_id: String,
    pub reason: String,
}

/// Pick each query's positive (highest relevance, ties by doc id) and
/// sample `n_negatives` run candidates that are not judged relevant.
/// Queries that cannot satisfy those requirements are skipped and
/// reported, not errored.
pub fn build_training_groups(
    queries: &[Query],
    corpus: &Corpus,
    qrels: &[Judgment],
    run: &[RunEntry],
    cfg: &GroupConfig,
) -> Result<(Vec<TrainingGroup>, Vec<SkippedQuery>)> {
    if cfg.n_negatives == 0 {
        return Err(Error::Config("n_negatives must be positive".into()));
    }
    if cfg.pool_depth == 0 {
        return Err(Error::Config("pool_depth must be positive".into()));
    }
    validate_run(run)?;

    let mut positives_by_query: BTreeMap<&str, Vec<&Judgment>> = BTreeMap::new();
    for j in qrels {
        if j.relevance > 0 {
            positives_by_query.entry(&j.query_id).or_default().push(j);
        }
    }
    let mut run_by_query: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in run {
        run_by_query.entry(&e.query_id).or_default().push(e);
    }

    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for q in queries {
        let qid = q.query_id.as_str();
        let skip = |reason: String, skipped: &mut Vec<SkippedQuery>| {
            skipped.push(SkippedQuery { query_id: qid.to_string(), reason });
        };

        let Some(pos_judgments) = positives_by_query.get(qid) else {
            skip("no judged positive".into(), &mut skipped);
            continue;
        };
        let mut best: Option<&Judgment> = None;
        for j in pos_judgments {
            let better = match best {
                None => true,
                Some(b) => (j.relevance, std::cmp::Reverse(&j.doc_id))
                    > (b.relevance, std::cmp::Reverse(&b.doc_id)),
            };
            if better {
                best = Some(j);
            }
        }
        let best = best.expect("non-empty positive list");
        let Some(positive) = corpus.get(&best.doc_id) else {
            skip(format!("positive document {:?} not in corpus", best.doc_id), &mut skipped);
            continue;
        };

        let positive_ids: BTreeSet<&str> =
            pos_judgments.iter().map(|j| j.doc_id.as_str()).collect();
        let mut pool: Vec<&RunEntry> = run_by_query.get(qid).cloned().unwrap_or_default();
        pool.sort_by_key(|e| e.rank);
        pool.truncate(cfg.pool_depth);
        pool.retain(|e| !positive_ids.contains(e.doc_id.as_str()));
        if pool.len() < cfg.n_negatives {
            skip(
                format!(
                    "only {} non-positive candidates in the run pool, need {}",
                    pool.len(),
                    cfg.n_negatives
                ),
                &mut skipped,
            );
            continue;
        }

        let mut rng = seeds::rng_for_key(cfg.seed, seeds::domain::NEGATIVE_SAMPLING, qid);
        let picks = sample_indices(&mut rng, pool.len(), cfg.n_negatives);
        let mut negatives = Vec::with_capacity(cfg.n_negatives);
        let mut missing = None;
        for i in picks.iter() {
            match corpus.get(&pool[i].doc_id) {
                Some(d) => negatives.push(d.clone()),
                None => {
                    missing = Some(pool[i].doc_id.clone());
                    break;
                }
            }
        }
        if let Some(did) = missing {
            return Err(Error::Data(format!(
                "run for query {qid:?} references document {did:?} absent from the corpus"
            )));
        }
        groups.push(TrainingGroup {
            query: q.clone(),
            positive: positive.clone(),
            negatives,
        });
    }
    Ok((groups, skipped))
}
