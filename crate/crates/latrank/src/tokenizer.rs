//! Word-level tokenizer, vocabulary, and pair encoding.
//!
//! Text is lowercased, split on whitespace, and stripped of leading and
//! trailing punctuation. A [`Vocabulary`] maps tokens to dense ids with
//! four reserved slots, and [`encode_pair`] lays a query and a document
//! out as the single concatenated sequence the encoder consumes:
//!
//! ```text
//! [CLS] q_1 .. q_m [SEP] d_1 .. d_k [SEP]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

/// Display names for the reserved ids in persisted vocabularies. Real
/// tokens can never collide with these: tokenize strips the brackets.
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercase, split on whitespace, strip leading/trailing punctuation,
/// drop tokens that end up empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let t = raw
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if t.is_empty() {
                None
            } else {
                Some(t)
            }
        })
        .collect()
}

/// Token table with dense ids. Ids 0..4 are reserved, content tokens
/// start at 4 in frequency order (descending, ties lexicographic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Count normalized tokens over both text streams and keep those with
    /// frequency ≥ `min_freq`.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        queries: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
    ) -> Result<Vocabulary> {
        if min_freq < 1 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_corpus = false;
        for text in corpus {
            saw_corpus = true;
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_corpus {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        for text in queries {
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }

        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        // Frequency descending, then lexicographic for equal counts.
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    /// Total id count, reserved slots included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Id for a normalized token, UNK when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Serialize as `token<TAB>id` lines, reserved ids first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(out, "{tok}\t{id}").expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        for (lineno, line) in body.lines().enumerate() {
            let (tok, id_str) = line.split_once('\t').ok_or_else(|| {
                Error::parse(path, lineno + 1, "expected token<TAB>id")
            })?;
            let id: usize = id_str
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad id {id_str:?}")))?;
            if id != id_to_token.len() {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("ids must be dense and ascending, got {id} at position {}", id_to_token.len()),
                ));
            }
            id_to_token.push(tok.to_string());
        }
        if id_to_token.len() < RESERVED.len() {
            return Err(Error::Data(format!(
                "vocabulary {} is missing reserved entries",
                path.display()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *want {
                return Err(Error::Data(format!(
                    "vocabulary {} has {:?} at reserved id {i}, expected {want:?}",
                    path.display(),
                    id_to_token[i]
                )));
            }
        }
        let mut token_to_id = BTreeMap::new();
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!(
                    "vocabulary {} contains duplicate token {t:?}",
                    path.display()
                )));
            }
        }
        Ok(Vocabulary { token_to_id, id_to_token })
    }
}

/// One encoded (query, document) input sequence. Emitted without padding;
/// [`EncodedPair::padded_to`] appends masked PAD slots when a caller wants
/// a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<u32>,
    /// 0 over `[CLS] q.. [SEP]`, 1 over `d.. [SEP]` and any padding.
    pub segment: Vec<u8>,
    /// 1 on real tokens, 0 on padding.
    pub attention_mask: Vec<u8>,
    /// Positions of q_1..q_m, specials excluded.
    pub query_span: Range<usize>,
    /// Positions of d_1..d_k, specials excluded.
    pub doc_span: Range<usize>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Copy with PAD appended up to `len`. Padding carries attention 0,
    /// so every head and attention row ignores it.
    pub fn padded_to(&self, len: usize) -> EncodedPair {
        let mut p = self.clone();
        while p.ids.len() < len {
            p.ids.push(PAD);
            p.segment.push(1);
            p.attention_mask.push(0);
        }
        p
    }

    pub fn query_ids(&self) -> &[u32] {
        &self.ids[self.query_span.clone()]
    }

    pub fn doc_ids(&self) -> &[u32] {
        &self.ids[self.doc_span.clone()]
    }
}

/// Encode a query/document pair. The query is truncated to
/// `max_query_len` tokens, the document to whatever fits in `max_len`
/// after the query and the three specials.
pub fn encode_pair(
    vocab: &Vocabulary,
    query: &str,
    document: &str,
    max_query_len: usize,
    max_len: usize,
) -> Result<EncodedPair> {
    if max_query_len + 3 >= max_len {
        return Err(Error::Config(format!(
            "max_query_len {max_query_len} + 3 specials must leave document room under max_len {max_len}"
        )));
    }
    let mut q_tokens = tokenize(query);
    q_tokens.truncate(max_query_len);
    let m = q_tokens.len();
    let mut d_tokens = tokenize(document);
    d_tokens.truncate(max_len - m - 3);
    let k = d_tokens.len();

    let mut ids = Vec::with_capacity(m + k + 3);
    ids.push(CLS);
    ids.extend(q_tokens.iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    ids.extend(d_tokens.iter().map(|t| vocab.id(t)));
    ids.push(SEP);

    let mut segment = vec![0u8; m + 2];
    segment.extend(std::iter::repeat(1).take(k + 1));
    let attention_mask = vec![1u8; ids.len()];

    Ok(EncodedPair {
        ids,
        segment,
        attention_mask,
        query_span: 1..1 + m,
        doc_span: m + 2..m + 2 + k,
    })
}

/// Boolean matrix over (query position, document position) marking equal
/// token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactMatchMask {
    pub rows: usize,
    pub cols: usize,
    bits: Vec<bool>,
}

impl ExactMatchMask {
    /// Build from explicit rows; rows must share a width.
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<ExactMatchMask> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Shape("mask rows differ in width".into()));
        }
        Ok(ExactMatchMask { rows: nrows, cols: ncols, bits: rows.concat() })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|b| *b)
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }
}

/// M[i][j] ⇔ query token i and document token j share an id. Two UNKs
/// compare equal only when `unk_matches` is set; distinct ids never match.
pub fn exact_match_mask(pair: &EncodedPair, unk_matches: bool) -> ExactMatchMask {
    let q = pair.query_ids();
    let d = pair.doc_ids();
    let mut bits = Vec::with_capacity(q.len() * d.len());
    for qi in q {
        for dj in d {
            let hit = qi == dj && (*qi != UNK || unk_matches);
            bits.push(hit);
        }
    }
    ExactMatchMask { rows: q.len(), cols: d.len(), bits }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_and_lowercases() {
        assert_eq!(tokenize("What is BM25?"), vec!["what", "is", "bm25"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("  a,  b. "), vec!["a", "b"]);
    }

    #[test]
    fn tokenize_is_idempotent_on_its_own_output() {
        let once = tokenize("The,  quick?? BROWN fox's \t den.");
        let again = tokenize(&once.join(" "));
        assert_eq!(once, again);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let v = Vocabulary::build(["a b", "a"], [], 1).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);

        let v2 = Vocabulary::build(["a b", "a"], [], 2).unwrap();
        assert_eq!(v2.size(), 5);
        assert_eq!(v2.id("a"), 4);
        assert_eq!(v2.id("b"), UNK);
    }

    #[test]
    fn vocab_counts_queries_too() {
        let v = Vocabulary::build(["x"], ["y y y"], 2).unwrap();
        assert_eq!(v.id("y"), 4);
        assert_eq!(v.id("x"), UNK);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let a = Vocabulary::build(["c a b", "b c"], ["c"], 1).unwrap();
        let b = Vocabulary::build(["c a b", "b c"], ["c"], 1).unwrap();
        assert_eq!(a, b);
        // c:3, b:2, a:1
        assert_eq!(a.id("c"), 4);
        assert_eq!(a.id("b"), 5);
        assert_eq!(a.id("a"), 6);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build([], ["q"], 1).is_err());
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = Vocabulary::build(["alpha beta beta", "gamma"], ["alpha"], 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);

        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\n"));
    }

    #[test]
    fn vocab_load_rejects_tampered_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(&path, "[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\na\t5\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
        std::fs::write(&path, "[PAD]\t0\n[UNK]\t1\n[SEP]\t2\n[CLS]\t3\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    fn tiny_vocab() -> Vocabulary {
        // a:4 b:5 c:6 by frequency.
        Vocabulary::build(["a a a b b c"], [], 1).unwrap()
    }

    #[test]
    fn encode_pair_layout_and_spans() {
        let v = tiny_vocab();
        let p = encode_pair(&v, "a b", "c", 64, 256).unwrap();
        assert_eq!(p.ids, vec![CLS, 4, 5, SEP, 6, SEP]);
        assert_eq!(p.segment, vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(p.attention_mask, vec![1; 6]);
        assert_eq!(p.query_span, 1..3);
        assert_eq!(p.doc_span, 4..5);
        assert_eq!(p.query_ids(), &[4, 5]);
        assert_eq!(p.doc_ids(), &[6]);
    }

    #[test]
    fn encode_pair_maps_oov_to_unk() {
        let v = tiny_vocab();
        let p = encode_pair(&v, "a zzz", "c", 64, 256).unwrap();
        assert_eq!(p.ids[2], UNK);
    }

    #[test]
    fn encode_pair_truncates_doc_to_budget() {
        let v = tiny_vocab();
        let doc = vec!["c"; 50].join(" ");
        let p = encode_pair(&v, "a b", &doc, 8, 16).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.doc_span.len(), 16 - 2 - 3);
        assert_eq!(*p.ids.last().unwrap(), SEP);
    }

    #[test]
    fn encode_pair_truncates_query() {
        let v = tiny_vocab();
        let q = vec!["a"; 10].join(" ");
        let p = encode_pair(&v, &q, "c", 4, 64).unwrap();
        assert_eq!(p.query_span.len(), 4);
    }

    #[test]
    fn encode_pair_rejects_bad_budgets() {
        let v = tiny_vocab();
        assert!(encode_pair(&v, "a", "c", 64, 64).is_err());
        assert!(encode_pair(&v, "a", "c", 61, 64).is_err());
        assert!(encode_pair(&v, "a", "c", 60, 64).is_ok());
    }

    #[test]
    fn padded_to_extends_with_masked_pads() {
        let v = tiny_vocab();
        let p = encode_pair(&v, "a", "c", 64, 256).unwrap();
        let padded = p.padded_to(10);
        assert_eq!(padded.len(), 10);
        assert_eq!(&padded.ids[5..], &[PAD; 5]);
        assert_eq!(&padded.attention_mask[5..], &[0; 5]);
        assert_eq!(padded.query_span, p.query_span);
        assert_eq!(padded.doc_span, p.doc_span);
    }

    #[test]
    fn exact_match_mask_elementwise() {
        let v = tiny_vocab();
        // query "a b" -> [4,5], doc "b c" -> [5,6]
        let p = encode_pair(&v, "a b", "b c", 64, 256).unwrap();
        let m = exact_match_mask(&p, true);
        assert_eq!((m.rows, m.cols), (2, 2));
        assert!(!m.get(0, 0) && !m.get(0, 1));
        assert!(m.get(1, 0) && !m.get(1, 1));
    }

    #[test]
    fn exact_match_mask_disjoint_and_identical() {
        let v = tiny_vocab();
        let disjoint = exact_match_mask(&encode_pair(&v, "a b", "c", 64, 256).unwrap(), true);
        assert!(!disjoint.any());

        let same = exact_match_mask(&encode_pair(&v, "a b c", "a b c", 64, 256).unwrap(), true);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(same.get(i, j), i == j);
            }
        }
    }

    #[test]
    fn exact_match_mask_unk_knob() {
        let v = tiny_vocab();
        let p = encode_pair(&v, "zzz a", "yyy a", 64, 256).unwrap();
        let with = exact_match_mask(&p, true);
        assert!(with.get(0, 0));
        assert!(with.get(1, 1));
        let without = exact_match_mask(&p, false);
        assert!(!without.get(0, 0));
        assert!(without.get(1, 1));
    }

    #[test]
    fn mask_shape_tracks_spans() {
        let v = tiny_vocab();
        let p = encode_pair(&v, "a b c", "c b", 64, 256).unwrap();
        let m = exact_match_mask(&p, true);
        assert_eq!(m.rows, p.query_span.len());
        assert_eq!(m.cols, p.doc_span.len());
    }
}
