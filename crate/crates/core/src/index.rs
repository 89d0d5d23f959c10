//! Inverted index with BM25, Dirichlet query likelihood and TF-IDF weighting.
//!
//! # Index file format
//!
//! All integers little-endian; strings are a `u32` byte length followed by
//! UTF-8 bytes.
//!
//! ```text
//! magic        4 bytes  "HPIX"
//! version      u32      currently 1
//! doc_count    u64
//! doc_count x  { id: string, length: u32 }            in corpus order
//! term_count   u64
//! term_count x { term: string, cf: u64, df: u32,
//!                df x { doc: u32, tf: u32 } }          terms sorted bytewise,
//!                                                      postings by doc number
//! ```
//!
//! The forward (doc -> terms) view is rebuilt on load.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, TokenizerConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HPIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 < 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidConfig(format!(
                "bm25 needs k1 >= 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub mu: f64,
}

impl Default for DirichletParams {
    fn default() -> Self {
        Self { mu: 1500.0 }
    }
}

impl DirichletParams {
    pub fn validate(&self) -> Result<()> {
        if self.mu.is_nan() || self.mu <= 0.0 {
            return Err(Error::InvalidConfig(format!("mu must be > 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// First-pass scoring function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scorer")]
pub enum Scorer {
    Bm25(Bm25Params),
    Ql(DirichletParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

/// Passages in descending score order, ties broken by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList(Vec<Scored>);

fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

impl RankedList {
    /// Sorts `scores` into rank order and keeps the first `k`.
    pub fn from_scores(scores: impl IntoIterator<Item = (String, f64)>, k: usize) -> Self {
        let mut v: Vec<Scored> = scores
            .into_iter()
            .map(|(id, score)| Scored { id, score })
            .collect();
        v.sort_by(rank_order);
        v.truncate(k);
        Self(v)
    }

    pub fn entries(&self) -> &[Scored] {
        &self.0
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|s| s.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self(self.0.iter().take(k).cloned().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

/// Result of a query-likelihood evaluation: the log-likelihood over the
/// query terms seen in the collection, and how many query tokens were
/// skipped because their collection frequency is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QlScore {
    pub score: f64,
    pub skipped: usize,
}

/// Term statistics a scorer needs for one document, whether or not that
/// document is in the index.
pub trait TermCounts {
    fn tf(&self, term: &str) -> u32;
    fn doc_len(&self) -> u32;
}

impl TermCounts for (HashMap<String, u32>, u32) {
    fn tf(&self, term: &str) -> u32 {
        self.0.get(term).copied().unwrap_or(0)
    }
    fn doc_len(&self) -> u32 {
        self.1
    }
}

/// Counts the tokens of `text` for use with the `*_counts` scorers.
pub fn term_counts(text: &str, tokenizer: &TokenizerConfig) -> (HashMap<String, u32>, u32) {
    let mut tf = HashMap::new();
    let mut n = 0;
    for t in tokenize(text, tokenizer) {
        *tf.entry(t).or_insert(0) += 1;
        n += 1;
    }
    (tf, n)
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    terms: Vec<String>,
    collection_freq: Vec<u64>,
    postings: Vec<Vec<Posting>>,
    total_tokens: u64,
    // derived
    forward: Vec<Vec<(u32, u32)>>,
    term_lookup: HashMap<String, u32>,
    doc_lookup: HashMap<String, u32>,
}

struct DocView<'a> {
    index: &'a InvertedIndex,
    doc: u32,
}

impl TermCounts for DocView<'_> {
    fn tf(&self, term: &str) -> u32 {
        self.index
            .term_id(term)
            .map_or(0, |t| self.index.doc_tf(self.doc, t))
    }
    fn doc_len(&self) -> u32 {
        self.index.doc_lens[self.doc as usize]
    }
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Self {
        let tok = corpus.tokenizer();
        let per_doc: Vec<(BTreeMap<String, u32>, u32)> = corpus
            .passages()
            .par_iter()
            .map(|p| {
                let mut counts = BTreeMap::new();
                let mut n = 0u32;
                for t in tokenize(&p.text, tok) {
                    *counts.entry(t).or_insert(0) += 1;
                    n += 1;
                }
                (counts, n)
            })
            .collect();

        let mut merged: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(per_doc.len());
        for (doc, (counts, n)) in per_doc.into_iter().enumerate() {
            doc_lens.push(n);
            for (term, tf) in counts {
                merged.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        let mut terms = Vec::with_capacity(merged.len());
        let mut postings = Vec::with_capacity(merged.len());
        let mut collection_freq = Vec::with_capacity(merged.len());
        for (term, list) in merged {
            collection_freq.push(list.iter().map(|p| p.tf as u64).sum());
            terms.push(term);
            postings.push(list);
        }
        let doc_ids = corpus.passages().iter().map(|p| p.id.clone()).collect();
        Self::assemble(doc_ids, doc_lens, terms, collection_freq, postings)
    }

    fn assemble(
        doc_ids: Vec<String>,
        doc_lens: Vec<u32>,
        terms: Vec<String>,
        collection_freq: Vec<u64>,
        postings: Vec<Vec<Posting>>,
    ) -> Self {
        let mut forward = vec![Vec::new(); doc_ids.len()];
        for (t, list) in postings.iter().enumerate() {
            for p in list {
                forward[p.doc as usize].push((t as u32, p.tf));
            }
        }
        let term_lookup = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let doc_lookup = doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i as u32))
            .collect();
        let total_tokens = doc_lens.iter().map(|&l| l as u64).sum();
        Self {
            doc_ids,
            doc_lens,
            terms,
            collection_freq,
            postings,
            total_tokens,
            forward,
            term_lookup,
            doc_lookup,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.doc_ids.is_empty() {
            0.0
        } else {
            self.total_tokens as f64 / self.doc_ids.len() as f64
        }
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.terms
    }

    fn term_id(&self, term: &str) -> Option<u32> {
        self.term_lookup.get(term).copied()
    }

    fn doc_number(&self, id: &str) -> Result<u32> {
        self.doc_lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownPassage(id.to_string()))
    }

    fn doc_tf(&self, doc: u32, term: u32) -> u32 {
        let fwd = &self.forward[doc as usize];
        fwd.binary_search_by_key(&term, |&(t, _)| t)
            .map_or(0, |i| fwd[i].1)
    }

    pub fn doc_length(&self, id: &str) -> Result<u32> {
        Ok(self.doc_lens[self.doc_number(id)? as usize])
    }

    pub fn df(&self, term: &str) -> usize {
        self.term_id(term)
            .map_or(0, |t| self.postings[t as usize].len())
    }

    pub fn collection_freq(&self, term: &str) -> u64 {
        self.term_id(term)
            .map_or(0, |t| self.collection_freq[t as usize])
    }

    /// P(t|C): collection frequency over total tokens.
    pub fn collection_prob(&self, term: &str) -> f64 {
        if self.total_tokens == 0 {
            return 0.0;
        }
        self.collection_freq(term) as f64 / self.total_tokens as f64
    }

    /// Ids of the passages containing `term`, in index order.
    pub fn docs_with_term<'a>(&'a self, term: &str) -> impl Iterator<Item = &'a str> + 'a {
        self.term_id(term)
            .map(|t| self.postings[t as usize].as_slice())
            .unwrap_or(&[])
            .iter()
            .map(move |p| self.doc_ids[p.doc as usize].as_str())
    }

    /// (term, tf) pairs of an indexed passage in term order.
    pub fn doc_term_freqs(&self, id: &str) -> Result<Vec<(&str, u32)>> {
        let d = self.doc_number(id)?;
        Ok(self.forward[d as usize]
            .iter()
            .map(|&(t, tf)| (self.terms[t as usize].as_str(), tf))
            .collect())
    }

    /// Term frequency of `term` in passage `id`.
    pub fn tf(&self, id: &str, term: &str) -> Result<u32> {
        let d = self.doc_number(id)?;
        Ok(self.term_id(term).map_or(0, |t| self.doc_tf(d, t)))
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn bm25_idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 over arbitrary term counts, using this index's collection statistics.
    pub fn bm25_counts(&self, query_terms: &[String], doc: &impl TermCounts, params: Bm25Params) -> f64 {
        let avgdl = self.avg_doc_len();
        let dl = doc.doc_len() as f64;
        let norm = if avgdl > 0.0 {
            params.k1 * (1.0 - params.b + params.b * dl / avgdl)
        } else {
            params.k1
        };
        let mut score = 0.0;
        for t in query_terms {
            let tf = doc.tf(t) as f64;
            if tf == 0.0 {
                continue;
            }
            score += self.bm25_idf(t) * tf * (params.k1 + 1.0) / (tf + norm);
        }
        score
    }

    pub fn bm25_score(&self, query_terms: &[String], id: &str, params: Bm25Params) -> Result<f64> {
        let doc = self.doc_number(id)?;
        Ok(self.bm25_counts(query_terms, &DocView { index: self, doc }, params))
    }

    /// Smoothed `P(t|d) = (c(t,d) + mu P(t|C)) / (|d| + mu)`.
    pub fn smoothed_prob(&self, term: &str, doc: &impl TermCounts, params: DirichletParams) -> f64 {
        let pc = self.collection_prob(term);
        (doc.tf(term) as f64 + params.mu * pc) / (doc.doc_len() as f64 + params.mu)
    }

    pub fn ql_counts(&self, query_terms: &[String], doc: &impl TermCounts, params: DirichletParams) -> QlScore {
        let mut score = 0.0;
        let mut skipped = 0;
        for t in query_terms {
            if self.collection_freq(t) == 0 {
                skipped += 1;
                continue;
            }
            score += self.smoothed_prob(t, doc, params).ln();
        }
        QlScore { score, skipped }
    }

    pub fn ql_dirichlet_score(
        &self,
        query_terms: &[String],
        id: &str,
        params: DirichletParams,
    ) -> Result<QlScore> {
        let doc = self.doc_number(id)?;
        Ok(self.ql_counts(query_terms, &DocView { index: self, doc }, params))
    }

    /// Smoothed `log P(t|d)` for an indexed passage.
    pub fn smoothed_log_prob(&self, term: &str, id: &str, params: DirichletParams) -> Result<f64> {
        let doc = self.doc_number(id)?;
        Ok(self
            .smoothed_prob(term, &DocView { index: self, doc }, params)
            .ln())
    }

    pub fn retrieve(&self, query: &str, tokenizer: &TokenizerConfig, scorer: Scorer, k: usize) -> RankedList {
        self.retrieve_terms(&tokenize(query, tokenizer), scorer, k)
    }

    /// Top-`k` passages for a tokenized query. BM25 keeps only passages with
    /// a positive score; query likelihood scores every passage.
    pub fn retrieve_terms(&self, terms: &[String], scorer: Scorer, k: usize) -> RankedList {
        if self.doc_count() == 0 || k == 0 {
            return RankedList::default();
        }
        match scorer {
            Scorer::Bm25(params) => {
                let mut candidates: Vec<u32> = terms
                    .iter()
                    .filter_map(|t| self.term_id(t))
                    .flat_map(|t| self.postings[t as usize].iter().map(|p| p.doc))
                    .collect();
                candidates.sort_unstable();
                candidates.dedup();
                let scores = candidates.into_iter().filter_map(|doc| {
                    let s = self.bm25_counts(terms, &DocView { index: self, doc }, params);
                    (s > 0.0).then(|| (self.doc_ids[doc as usize].clone(), s))
                });
                RankedList::from_scores(scores, k)
            }
            Scorer::Ql(params) => {
                let scores = (0..self.doc_count() as u32).map(|doc| {
                    let s = self.ql_counts(terms, &DocView { index: self, doc }, params);
                    (self.doc_ids[doc as usize].clone(), s.score)
                });
                RankedList::from_scores(scores, k)
            }
        }
    }

    /// `tf(t) * ln(N / df(t))` over the terms of `text` that occur in the index.
    pub fn tfidf_text(&self, text: &str, tokenizer: &TokenizerConfig) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(text, tokenizer) {
            *tf.entry(t).or_insert(0) += 1;
        }
        self.tfidf_weights(tf.into_iter())
    }

    pub fn tfidf_passage(&self, id: &str) -> Result<BTreeMap<String, f64>> {
        let d = self.doc_number(id)?;
        Ok(self.tfidf_weights(
            self.forward[d as usize]
                .iter()
                .map(|&(t, tf)| (self.terms[t as usize].clone(), tf)),
        ))
    }

    fn tfidf_weights(&self, counts: impl Iterator<Item = (String, u32)>) -> BTreeMap<String, f64> {
        let n = self.doc_count() as f64;
        counts
            .filter_map(|(t, tf)| {
                let df = self.df(&t);
                (df > 0).then(|| {
                    let w = tf as f64 * (n / df as f64).ln();
                    (t, w)
                })
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.doc_ids.len() as u64).to_le_bytes())?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lens) {
            put_str(&mut w, id)?;
            w.write_all(&len.to_le_bytes())?;
        }
        w.write_all(&(self.terms.len() as u64).to_le_bytes())?;
        for ((term, cf), list) in self.terms.iter().zip(&self.collection_freq).zip(&self.postings) {
            put_str(&mut w, term)?;
            w.write_all(&cf.to_le_bytes())?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for p in list {
                w.write_all(&p.doc.to_le_bytes())?;
                w.write_all(&p.tf.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::IndexFormat(msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut rd = Reader(r);
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let n_docs = rd.u64()? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_lens = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            doc_ids.push(rd.string()?);
            doc_lens.push(rd.u32()?);
        }
        let n_terms = rd.u64()? as usize;
        let mut terms = Vec::with_capacity(n_terms.min(1 << 20));
        let mut cfs = Vec::with_capacity(n_terms.min(1 << 20));
        let mut postings = Vec::with_capacity(n_terms.min(1 << 20));
        for _ in 0..n_terms {
            terms.push(rd.string()?);
            cfs.push(rd.u64()?);
            let df = rd.u32()? as usize;
            let mut list = Vec::with_capacity(df.min(n_docs));
            for _ in 0..df {
                let doc = rd.u32()?;
                if doc as usize >= n_docs {
                    return Err(bad("posting references an unknown document"));
                }
                list.push(Posting { doc, tf: rd.u32()? });
            }
            postings.push(list);
        }
        Ok(Self::assemble(doc_ids, doc_lens, terms, cfs, postings))
    }
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::IndexFormat("truncated file".into()))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::IndexFormat("truncated string".into()))?;
        String::from_utf8(buf).map_err(|_| Error::IndexFormat("invalid utf-8".into()))
    }
}

/// Cosine similarity between two sparse vectors; 0 when either is all-zero.
pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(t, w)| large.get(t).map(|v| w * v))
        .sum();
    let na = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
