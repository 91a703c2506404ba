//! Ranking quality metrics, score-mode comparison, and the analysis of
//! quality deltas as a function of query length.
//!
//! Run entries are re-ranked by score with a doc_id tie-break before
//! scoring, the same rule the retrieval stage uses, so a run file read
//! back from disk evaluates exactly like the in-memory ranking that
//! produced it.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};

use crate::corpus::{Judgment, Query, RunEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gain {
    Exponential,
    Linear,
}

impl Gain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gain::Exponential => "exponential",
            Gain::Linear => "linear",
        }
    }

    fn of(&self, rel: u32) -> f64 {
        match self {
            Gain::Exponential => (2.0f64).powi(rel as i32) - 1.0,
            Gain::Linear => rel as f64,
        }
    }
}

impl std::str::FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Gain> {
        match s {
            "exponential" => Ok(Gain::Exponential),
            "linear" => Ok(Gain::Linear),
            other => Err(Error::Config(format!(
                "unknown gain {other:?}; expected exponential or linear"
            ))),
        }
    }
}

/// Per-query metric values for the queries that had at least one
/// relevant judgment; the rest are only counted.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub cutoff: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    pub query_count: usize,
    pub zero_relevant: usize,
}

impl MetricReport {
    fn from_values(
        metric: String,
        cutoff: usize,
        per_query: BTreeMap<String, f64>,
        zero_relevant: usize,
    ) -> MetricReport {
        let query_count = per_query.len();
        let mean = if query_count == 0 {
            0.0
        } else {
            per_query.values().sum::<f64>() / query_count as f64
        };
        MetricReport { metric, cutoff, per_query, mean, query_count, zero_relevant }
    }

    pub fn summary_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.metric, self.cutoff, self.mean, self.query_count)
    }

    pub fn per_query_tsv(&self) -> String {
        let mut out = String::from("query_id\tvalue\n");
        for (qid, v) in &self.per_query {
            out.push_str(&format!("{qid}\t{v}\n"));
        }
        out
    }
}

fn relevance_by_query(qrels: &[Judgment]) -> BTreeMap<&str, BTreeMap<&str, u32>> {
    let mut map: BTreeMap<&str, BTreeMap<&str, u32>> = BTreeMap::new();
    for j in qrels {
        map.entry(j.query_id.as_str()).or_default().insert(j.doc_id.as_str(), j.relevance);
    }
    map
}

/// Entries per query, ordered by score descending with doc_id ascending
/// on ties. The stored ranks are ignored on purpose.
fn ranked_by_query(run: &[RunEntry]) -> BTreeMap<&str, Vec<&RunEntry>> {
    let mut map: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in run {
        map.entry(e.query_id.as_str()).or_default().push(e);
    }
    for entries in map.values_mut() {
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("run scores are finite")
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
    }
    map
}

fn log2(x: f64) -> f64 {
    x.ln() / std::f64::consts::LN_2
}

/// Normalized discounted cumulative gain at `k` for every query in the
/// run. The ideal ranking orders judged documents by relevance
/// descending, doc_id ascending on ties.
pub fn ndcg_at_k(run: &[RunEntry], qrels: &[Judgment], k: usize, gain: Gain) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Config("metric cutoff must be at least 1".into()));
    }
    let rels = relevance_by_query(qrels);
    let empty = BTreeMap::new();
    let mut per_query = BTreeMap::new();
    let mut zero_relevant = 0;
    for (qid, ranked) in ranked_by_query(run) {
        let judged = rels.get(qid).unwrap_or(&empty);
        let mut ideal: Vec<(&str, u32)> =
            judged.iter().filter(|(_, r)| **r > 0).map(|(d, r)| (*d, *r)).collect();
        if ideal.is_empty() {
            zero_relevant += 1;
            continue;
        }
        ideal.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (_, rel))| gain.of(*rel) / log2(i as f64 + 2.0))
            .sum();
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, e)| {
                let rel = judged.get(e.doc_id.as_str()).copied().unwrap_or(0);
                gain.of(rel) / log2(i as f64 + 2.0)
            })
            .sum();
        per_query.insert(qid.to_string(), dcg / idcg);
    }
    Ok(MetricReport::from_values(
        format!("ndcg_{}", gain.as_str()),
        k,
        per_query,
        zero_relevant,
    ))
}

/// Reciprocal rank of the first relevant document within the top `k`,
/// zero when none appears there.
pub fn mrr_at_k(run: &[RunEntry], qrels: &[Judgment], k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Config("metric cutoff must be at least 1".into()));
    }
    let rels = relevance_by_query(qrels);
    let empty = BTreeMap::new();
    let mut per_query = BTreeMap::new();
    let mut zero_relevant = 0;
    for (qid, ranked) in ranked_by_query(run) {
        let judged = rels.get(qid).unwrap_or(&empty);
        if !judged.values().any(|r| *r > 0) {
            zero_relevant += 1;
            continue;
        }
        let rr = ranked
            .iter()
            .take(k)
            .position(|e| judged.get(e.doc_id.as_str()).map_or(false, |r| *r > 0))
            .map_or(0.0, |i| 1.0 / (i as f64 + 1.0));
        per_query.insert(qid.to_string(), rr);
    }
    Ok(MetricReport::from_values("mrr".into(), k, per_query, zero_relevant))
}

/// Per-query difference `b − a`. Both reports must cover the same
/// queries; the error lists every query on exactly one side.
pub fn per_query_delta(a: &MetricReport, b: &MetricReport) -> Result<BTreeMap<String, f64>> {
    let keys_a: BTreeSet<&String> = a.per_query.keys().collect();
    let keys_b: BTreeSet<&String> = b.per_query.keys().collect();
    if keys_a != keys_b {
        let only: Vec<&str> = keys_a
            .symmetric_difference(&keys_b)
            .map(|s| s.as_str())
            .collect();
        return Err(Error::Data(format!(
            "reports cover different queries; only on one side: {}",
            only.join(", ")
        )));
    }
    Ok(a.per_query
        .iter()
        .map(|(qid, va)| (qid.clone(), b.per_query[qid] - va))
        .collect())
}

/// Quality deltas bucketed by query length, with a least-squares
/// polynomial fit over the bucket means.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthAnalysis {
    pub points: Vec<(usize, f64, usize)>,
    pub fit_coefficients: Vec<f64>,
    pub fit_degree: usize,
}

impl LengthAnalysis {
    /// Plot-ready TSV; the fit lives in a trailing comment line so the
    /// data rows stay machine-readable on their own.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("length\tmean_delta\tn_queries\n");
        for (len, delta, n) in &self.points {
            out.push_str(&format!("{len}\t{delta}\t{n}\n"));
        }
        let coeffs: Vec<String> = self.fit_coefficients.iter().map(f64::to_string).collect();
        out.push_str(&format!(
            "# fit degree {} coefficients {}\n",
            self.fit_degree,
            coeffs.join(" ")
        ));
        out
    }
}

/// Least-squares polynomial fit, coefficients lowest degree first.
/// Solved by Householder QR on the (optionally row-weighted)
/// Vandermonde matrix.
pub fn polyfit(points: &[(f64, f64)], degree: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if degree == 0 {
        return Err(Error::Config("fit degree must be at least 1".into()));
    }
    let distinct: BTreeSet<u64> = points.iter().map(|(x, _)| x.to_bits()).collect();
    if distinct.len() < degree + 1 {
        return Err(Error::Data(format!(
            "{} distinct x values cannot support a degree-{degree} fit; lower the degree to at most {}",
            distinct.len(),
            distinct.len().saturating_sub(1).max(1)
        )));
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::Shape("one weight per point required".into()));
        }
        if w.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Data("fit weights must be positive".into()));
        }
    }
    let m = points.len();
    let n = degree + 1;
    let mut a = Array2::zeros((m, n));
    let mut y = Array1::zeros(m);
    for (i, (x, v)) in points.iter().enumerate() {
        let sw = weights.map_or(1.0, |w| w[i].sqrt());
        let mut pow = 1.0;
        for j in 0..n {
            a[(i, j)] = sw * pow;
            pow *= x;
        }
        y[i] = sw * v;
    }
    householder_lstsq(a, y)
}

/// Minimum-norm solution of `a·x ≈ y` for full-column-rank `a` with at
/// least as many rows as columns.
fn householder_lstsq(mut a: Array2<f64>, mut y: Array1<f64>) -> Result<Vec<f64>> {
    let (m, n) = a.dim();
    debug_assert!(m >= n);
    for k in 0..n {
        let norm: f64 = (k..m).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Err(Error::Data("design matrix is rank deficient".into()));
        }
        let alpha = if a[(k, k)] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; m - k];
        v[0] = a[(k, k)] - alpha;
        for i in k + 1..m {
            v[i - k] = a[(i, k)];
        }
        let beta: f64 = v.iter().map(|x| x * x).sum();
        if beta > 0.0 {
            for j in k..n {
                let c: f64 = (k..m).map(|i| v[i - k] * a[(i, j)]).sum();
                let scale = 2.0 * c / beta;
                for i in k..m {
                    a[(i, j)] -= scale * v[i - k];
                }
            }
            let c: f64 = (k..m).map(|i| v[i - k] * y[i]).sum();
            let scale = 2.0 * c / beta;
            for i in k..m {
                y[i] -= scale * v[i - k];
            }
        }
        a[(k, k)] = alpha;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for j in i + 1..n {
            acc -= a[(i, j)] * x[j];
        }
        if a[(i, i)].abs() < 1e-300 {
            return Err(Error::Data("design matrix is rank deficient".into()));
        }
        x[i] = acc / a[(i, i)];
    }
    Ok(x)
}

/// Buckets per-query deltas by whitespace token count of the query text
/// and fits a polynomial to the bucket means. With `count_weighted`,
/// each bucket weighs in proportion to its query count.
pub fn length_analysis(
    deltas: &BTreeMap<String, f64>,
    queries: &[Query],
    degree: usize,
    count_weighted: bool,
) -> Result<LengthAnalysis> {
    let text_by_id: BTreeMap<&str, &str> =
        queries.iter().map(|q| (q.query_id.as_str(), q.text.as_str())).collect();
    let mut buckets: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (qid, delta) in deltas {
        let text = text_by_id.get(qid.as_str()).ok_or_else(|| {
            Error::Data(format!("delta for unknown query {qid:?}"))
        })?;
        let len = text.split_whitespace().count();
        let slot = buckets.entry(len).or_insert((0.0, 0));
        slot.0 += delta;
        slot.1 += 1;
    }
    let points: Vec<(usize, f64, usize)> =
        buckets.into_iter().map(|(len, (sum, n))| (len, sum / n as f64, n)).collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|(l, d, _)| (*l as f64, *d)).collect();
    let weights: Option<Vec<f64>> =
        count_weighted.then(|| points.iter().map(|(_, _, n)| *n as f64).collect());
    let fit_coefficients = polyfit(&xy, degree, weights.as_deref())?;
    Ok(LengthAnalysis { points, fit_coefficients, fit_degree: degree })
}
