//! Two-stage retrieval: a BM25 first stage over an inverted index,
//! neural reranking of its top candidates, and latency measurement.
//!
//! The index is immutable once built and persists in a small binary
//! layout. Retrieval and reranking parallelize across queries with a
//! fixed reduction order, so output run files are byte-identical at
//! any thread count.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::corpus::{Corpus, Query, RunEntry};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::heads::ScoreBreakdown;
use crate::model::{Model, ScoreMode};
use crate::tokenizer::{encode_pair, tokenize, Vocabulary};

const INDEX_MAGIC: &[u8; 6] = b"LTRIDX";
const INDEX_VERSION: u16 = 1;

pub const FIRST_STAGE_TAG: &str = "bm25";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Postings keyed by term; documents are referenced by their position
/// in the sorted id table, so posting lists sorted by index are sorted
/// by doc_id as well.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.doc_index(doc_id).map(|i| self.doc_lengths[i])
    }

    pub fn postings(&self, term: &str) -> Option<&[(u32, u32)]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn doc_id(&self, index: u32) -> &str {
        &self.doc_ids[index as usize]
    }

    fn doc_index(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        let n = self.doc_count() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Term frequencies over the tokenized title and text of every document.
pub fn build_index(corpus: &Corpus) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot index an empty corpus".into()));
    }
    let mut doc_ids: Vec<String> = corpus.docs().iter().map(|d| d.doc_id.clone()).collect();
    doc_ids.sort_unstable();
    if doc_ids.len() > u32::MAX as usize {
        return Err(Error::Data("corpus too large for index".into()));
    }

    let mut doc_lengths = vec![0u32; doc_ids.len()];
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    for (idx, doc_id) in doc_ids.iter().enumerate() {
        let doc = corpus.get(doc_id).expect("ids came from this corpus");
        let tokens = tokenize(&doc.full_text());
        doc_lengths[idx] = tokens.len() as u32;
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push((idx as u32, tf));
        }
    }
    let avg_doc_length =
        doc_lengths.iter().map(|l| *l as f64).sum::<f64>() / doc_lengths.len() as f64;
    Ok(InvertedIndex { doc_ids, doc_lengths, avg_doc_length, postings })
}

/// Okapi BM25 for one document; terms absent from it contribute zero,
/// repeated query terms contribute once per occurrence.
pub fn bm25_score(
    index: &InvertedIndex,
    query_terms: &[String],
    doc_id: &str,
    params: Bm25Params,
) -> Result<f64> {
    let di = index
        .doc_index(doc_id)
        .ok_or_else(|| Error::Data(format!("document {doc_id:?} is not in the index")))? as u32;
    let len_norm = 1.0 - params.b
        + params.b * index.doc_lengths[di as usize] as f64 / index.avg_doc_length;
    let mut score = 0.0;
    for term in query_terms {
        let Some(list) = index.postings(term) else { continue };
        let Ok(pos) = list.binary_search_by_key(&di, |(d, _)| *d) else { continue };
        let tf = list[pos].1 as f64;
        score += index.idf(term) * tf * (params.k1 + 1.0) / (tf + params.k1 * len_norm);
    }
    Ok(score)
}

/// BM25 top-k for one query. Only documents containing at least one
/// query term are candidates; an empty result means no overlap at all.
pub fn retrieve_topk(
    index: &InvertedIndex,
    query: &Query,
    k: usize,
    params: Bm25Params,
) -> Vec<RunEntry> {
    let terms = tokenize(&query.text);
    let mut scores = vec![0.0f64; index.doc_count()];
    let mut matched = vec![false; index.doc_count()];
    for term in &terms {
        let Some(list) = index.postings(term) else { continue };
        let idf = index.idf(term);
        for (di, tf) in list {
            let i = *di as usize;
            let len_norm = 1.0 - params.b
                + params.b * index.doc_lengths[i] as f64 / index.avg_doc_length;
            let tf = *tf as f64;
            scores[i] += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * len_norm);
            matched[i] = true;
        }
    }
    let mut hits: Vec<usize> = (0..index.doc_count()).filter(|i| matched[*i]).collect();
    hits.sort_by(|a, b| {
        scores[*b].partial_cmp(&scores[*a]).unwrap().then_with(|| index.doc_ids[*a].cmp(&index.doc_ids[*b]))
    });
    hits.truncate(k);
    hits.iter()
        .enumerate()
        .map(|(rank, i)| RunEntry {
            query_id: query.query_id.clone(),
            doc_id: index.doc_ids[*i].clone(),
            rank: rank as u32 + 1,
            score: scores[*i],
            run_tag: FIRST_STAGE_TAG.to_string(),
        })
        .collect()
}

pub fn retrieve_all(
    index: &InvertedIndex,
    queries: &[Query],
    k: usize,
    params: Bm25Params,
    policy: ExecPolicy,
) -> Vec<RunEntry> {
    let per_query = exec::map_indexed(policy, queries, |_, q| retrieve_topk(index, q, k, params));
    per_query.into_iter().flatten().collect()
}

/// One rescored candidate with the head-level score split.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub query_id: String,
    pub doc_id: String,
    pub breakdown: ScoreBreakdown,
}

/// Everything a rerank pass needs besides the run itself.
pub struct Reranker<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub corpus: &'a Corpus,
    pub checkpoint_id: &'a str,
    pub max_query_len: usize,
    pub em_unk_matches: bool,
    pub policy: ExecPolicy,
}

fn group_by_query<'e>(
    run: &'e [RunEntry],
    queries: &'e [Query],
) -> Result<Vec<(&'e Query, Vec<&'e RunEntry>)>> {
    let by_id: BTreeMap<&str, &Query> =
        queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut grouped: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in run {
        grouped.entry(e.query_id.as_str()).or_default().push(e);
    }
    grouped
        .into_iter()
        .map(|(qid, mut entries)| {
            let query = by_id
                .get(qid)
                .copied()
                .ok_or_else(|| Error::Data(format!("run references unknown query {qid:?}")))?;
            entries.sort_by_key(|e| e.rank);
            Ok((query, entries))
        })
        .collect()
}

impl Reranker<'_> {
    fn rescore_query(
        &self,
        query: &Query,
        candidates: &[&RunEntry],
        k: usize,
        mode: ScoreMode,
        run_tag: &str,
    ) -> Result<(Vec<RunEntry>, Vec<CandidateScore>)> {
        let top: Vec<&RunEntry> = candidates.iter().take(k).copied().collect();
        let mut scored = Vec::with_capacity(top.len());
        for entry in &top {
            let doc = self.corpus.get(&entry.doc_id).ok_or_else(|| {
                Error::Data(format!("document {:?} is not in the corpus", entry.doc_id))
            })?;
            let pair = encode_pair(
                self.vocab,
                &query.text,
                &doc.full_text(),
                self.max_query_len,
                self.model.cfg.encoder.max_len,
            )?;
            let breakdown = self.model.score_pair(&pair, mode, self.em_unk_matches)?;
            scored.push((entry.doc_id.clone(), breakdown));
        }
        scored.sort_by(|a, b| {
            b.1.s_final.partial_cmp(&a.1.s_final).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        let entries = scored
            .iter()
            .enumerate()
            .map(|(rank, (doc_id, breakdown))| RunEntry {
                query_id: query.query_id.clone(),
                doc_id: doc_id.clone(),
                rank: rank as u32 + 1,
                score: breakdown.s_final,
                run_tag: run_tag.to_string(),
            })
            .collect();
        let log = scored
            .into_iter()
            .map(|(doc_id, breakdown)| CandidateScore {
                query_id: query.query_id.clone(),
                doc_id,
                breakdown,
            })
            .collect();
        Ok((entries, log))
    }

    /// Rescores each query's top-k candidates and re-sorts them by the
    /// model score. The candidate set per query is unchanged; the output
    /// run tag names the score mode and checkpoint.
    pub fn rerank(
        &self,
        queries: &[Query],
        run: &[RunEntry],
        k: usize,
        mode: ScoreMode,
    ) -> Result<(Vec<RunEntry>, Vec<CandidateScore>)> {
        if k == 0 {
            return Err(Error::Config("rerank depth must be at least 1".into()));
        }
        let grouped = group_by_query(run, queries)?;
        let run_tag = format!("{}-{}", mode.as_str(), self.checkpoint_id);
        let results = exec::try_map_indexed(self.policy, &grouped, |_, (query, candidates)| {
            self.rescore_query(query, candidates, k, mode, &run_tag)
        })?;
        let mut entries = Vec::new();
        let mut log = Vec::new();
        for (e, l) in results {
            entries.extend(e);
            log.extend(l);
        }
        Ok((entries, log))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FirstStage,
    Rerank,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::FirstStage => "first_stage",
            Stage::Rerank => "rerank",
        }
    }
}

/// Wall-clock summary over per-query latencies.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub stage: Stage,
    pub total_queries: usize,
    pub candidates_per_query: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

fn summarize(stage: Stage, candidates_per_query: usize, mut per_query_ms: Vec<f64>) -> LatencyReport {
    per_query_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = per_query_ms.len();
    let pct = |q: f64| {
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        per_query_ms[idx]
    };
    LatencyReport {
        stage,
        total_queries: n,
        candidates_per_query,
        mean_ms: per_query_ms.iter().sum::<f64>() / n as f64,
        p50_ms: pct(0.50),
        p95_ms: pct(0.95),
    }
}

/// Times the rerank of each query's top-k candidates, single-threaded
/// so the numbers mean something. One untimed warm-up pass runs first;
/// each query's latency is the mean of `repetitions` timed passes.
pub fn measure_latency(
    reranker: &Reranker<'_>,
    queries: &[Query],
    run: &[RunEntry],
    k: usize,
    mode: ScoreMode,
    repetitions: usize,
) -> Result<LatencyReport> {
    if repetitions < 3 {
        return Err(Error::Config(format!(
            "latency measurement needs at least 3 repetitions, got {repetitions}"
        )));
    }
    let grouped = group_by_query(run, queries)?;
    if grouped.is_empty() {
        return Err(Error::Data("latency measurement needs a non-empty run".into()));
    }
    let sequential = Reranker { policy: ExecPolicy::Sequential, ..*reranker };
    let mut per_query_ms = Vec::with_capacity(grouped.len());
    for (query, candidates) in &grouped {
        sequential.rescore_query(query, candidates, k, mode, "warmup")?;
        let mut total = 0.0;
        for _ in 0..repetitions {
            let t0 = Instant::now();
            sequential.rescore_query(query, candidates, k, mode, "timed")?;
            total += t0.elapsed().as_secs_f64() * 1e3;
        }
        per_query_ms.push(total / repetitions as f64);
    }
    Ok(summarize(Stage::Rerank, k, per_query_ms))
}

/// First-stage analogue of [`measure_latency`]: times `retrieve_topk`.
pub fn measure_first_stage_latency(
    index: &InvertedIndex,
    queries: &[Query],
    k: usize,
    params: Bm25Params,
    repetitions: usize,
) -> Result<LatencyReport> {
    if repetitions < 3 {
        return Err(Error::Config(format!(
            "latency measurement needs at least 3 repetitions, got {repetitions}"
        )));
    }
    if queries.is_empty() {
        return Err(Error::Data("latency measurement needs queries".into()));
    }
    let mut per_query_ms = Vec::with_capacity(queries.len());
    for q in queries {
        std::hint::black_box(retrieve_topk(index, q, k, params));
        let mut total = 0.0;
        for _ in 0..repetitions {
            let t0 = Instant::now();
            std::hint::black_box(retrieve_topk(index, q, k, params));
            total += t0.elapsed().as_secs_f64() * 1e3;
        }
        per_query_ms.push(total / repetitions as f64);
    }
    Ok(summarize(Stage::FirstStage, k, per_query_ms))
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!("{}: index file truncated", self.path.display())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Data(format!("{}: non-UTF-8 string in index", self.path.display())))
    }
}

impl InvertedIndex {
    /// Binary layout: magic and version, doc count and average length,
    /// the sorted doc table (id, length), then per-term posting blocks.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter(Vec::new());
        w.0.extend_from_slice(INDEX_MAGIC);
        w.u16(INDEX_VERSION);
        w.u64(self.doc_ids.len() as u64);
        w.f64(self.avg_doc_length);
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            w.str(id);
            w.u32(*len);
        }
        w.u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.str(term);
            w.u64(list.len() as u64);
            for (di, tf) in list {
                w.u32(*di);
                w.u32(*tf);
            }
        }
        std::fs::write(path, w.0).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<InvertedIndex> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(6)? != INDEX_MAGIC {
            return Err(Error::Data(format!("{}: not an index file", path.display())));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported index version {version}",
                path.display()
            )));
        }
        let doc_count = r.u64()? as usize;
        let avg_doc_length = r.f64()?;
        let mut doc_ids = Vec::with_capacity(doc_count);
        let mut doc_lengths = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            doc_ids.push(r.str()?);
            doc_lengths.push(r.u32()?);
        }
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "{}: doc table is not strictly sorted",
                path.display()
            )));
        }
        let recomputed =
            doc_lengths.iter().map(|l| *l as f64).sum::<f64>() / doc_lengths.len().max(1) as f64;
        if doc_count == 0 || (recomputed - avg_doc_length).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "{}: stored average length disagrees with doc table",
                path.display()
            )));
        }
        let n_terms = r.u64()? as usize;
        let mut postings = BTreeMap::new();
        let mut prev_term: Option<String> = None;
        for _ in 0..n_terms {
            let term = r.str()?;
            if prev_term.as_ref().map_or(false, |p| *p >= term) {
                return Err(Error::Data(format!(
                    "{}: term blocks are not sorted",
                    path.display()
                )));
            }
            let n = r.u64()? as usize;
            let mut list = Vec::with_capacity(n);
            let mut prev_di: Option<u32> = None;
            for _ in 0..n {
                let di = r.u32()?;
                let tf = r.u32()?;
                if di as usize >= doc_count || tf == 0 {
                    return Err(Error::Data(format!(
                        "{}: invalid posting for term {term:?}",
                        path.display()
                    )));
                }
                if prev_di.map_or(false, |p| p >= di) {
                    return Err(Error::Data(format!(
                        "{}: postings for term {term:?} are not sorted",
                        path.display()
                    )));
                }
                prev_di = Some(di);
                list.push((di, tf));
            }
            prev_term = Some(term.clone());
            postings.insert(term, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{}: trailing bytes after index data",
                path.display()
            )));
        }
        Ok(InvertedIndex { doc_ids, doc_lengths, avg_doc_length, postings })
    }
}
