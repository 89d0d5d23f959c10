//! Pseudo-relevance feedback: Rocchio over TF-IDF vectors and the RM3
//! relevance model over Dirichlet-smoothed document models.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenizerConfig};
use crate::error::{Error, Result};
use crate::index::{cosine, DirichletParams, InvertedIndex, RankedList};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocchioParams {
    pub alpha: f64,
    pub beta: f64,
    pub fb_docs: usize,
    pub fb_terms: usize,
}

impl Default for RocchioParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.75,
            fb_docs: 10,
            fb_terms: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rm3Params {
    /// Weight of the original query model.
    pub lambda: f64,
    pub fb_docs: usize,
    pub fb_terms: usize,
    pub mu: f64,
}

impl Default for Rm3Params {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            fb_docs: 10,
            fb_terms: 10,
            mu: DirichletParams::default().mu,
        }
    }
}

/// Term weights of an expanded query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightedQuery(pub BTreeMap<String, f64>);

impl WeightedQuery {
    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn get(&self, term: &str) -> f64 {
        self.0.get(term).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Maximum-likelihood query model: token counts over query length.
    pub fn mle(terms: &[String]) -> Self {
        let mut m = BTreeMap::new();
        for t in terms {
            *m.entry(t.clone()).or_insert(0.0) += 1.0;
        }
        let n = terms.len() as f64;
        m.values_mut().for_each(|v| *v /= n);
        Self(m)
    }
}

/// Second-pass scoring for a weighted query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightedScorer {
    /// Cosine between the query weights and the passage TF-IDF vector.
    TfidfCosine,
    /// `sum_w wq(w) * log P_smoothed(w|d)`.
    Ql(DirichletParams),
}

/// Highest-weight `n` entries of `weights` that are not in `keep`, by
/// descending weight then ascending term.
fn top_expansion_terms<'a>(
    weights: &'a BTreeMap<String, f64>,
    keep: &BTreeMap<String, f64>,
    n: usize,
) -> Vec<(&'a String, f64)> {
    let mut cands: Vec<_> = weights
        .iter()
        .filter(|(t, &w)| w > 0.0 && !keep.contains_key(*t))
        .map(|(t, &w)| (t, w))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    cands.truncate(n);
    cands
}

/// `q' = alpha * tfidf(q) + beta / |Dr| * sum_{d in Dr} tfidf(d)`, kept to
/// the original query terms plus the `fb_terms` best expansion terms.
pub fn rocchio_expand(
    index: &InvertedIndex,
    tokenizer: &TokenizerConfig,
    query: &str,
    first_pass: &RankedList,
    params: RocchioParams,
) -> Result<WeightedQuery> {
    if first_pass.is_empty() {
        return Err(Error::NoFeedbackDocs);
    }
    let original = index.tfidf_text(query, tokenizer);
    let feedback: Vec<&str> = first_pass.ids().take(params.fb_docs.max(1)).collect();

    let mut centroid: BTreeMap<String, f64> = BTreeMap::new();
    for id in &feedback {
        for (t, w) in index.tfidf_passage(id)? {
            *centroid.entry(t).or_insert(0.0) += w;
        }
    }
    let scale = params.beta / feedback.len() as f64;

    let mut combined: BTreeMap<String, f64> = original
        .iter()
        .map(|(t, w)| (t.clone(), params.alpha * w))
        .collect();
    for (t, w) in &centroid {
        *combined.entry(t.clone()).or_insert(0.0) += scale * w;
    }

    let mut out: BTreeMap<String, f64> = original
        .keys()
        .map(|t| (t.clone(), combined[t]))
        .collect();
    for (t, w) in top_expansion_terms(&combined, &original, params.fb_terms) {
        out.insert(t.clone(), w);
    }
    Ok(WeightedQuery(out))
}

/// RM3: interpolates the query MLE with a relevance model estimated from the
/// top `fb_docs` of a query-likelihood first pass.
///
/// `P(w|R) ∝ sum_d P(w|d) * P(q|d)`, where `P(q|d)` is recovered from the
/// first-pass log scores with a max shift so the largest weight is 1.
pub fn rm3_expand(
    index: &InvertedIndex,
    tokenizer: &TokenizerConfig,
    query: &str,
    first_pass: &RankedList,
    params: Rm3Params,
) -> Result<WeightedQuery> {
    if first_pass.is_empty() {
        return Err(Error::NoFeedbackDocs);
    }
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(Error::InvalidConfig(format!(
            "rm3 lambda must be in [0, 1], got {}",
            params.lambda
        )));
    }
    let terms = tokenize(query, tokenizer);
    if terms.is_empty() {
        return Err(Error::InvalidConfig("rm3 needs a non-empty query".into()));
    }
    let dirichlet = DirichletParams { mu: params.mu };
    dirichlet.validate()?;

    let feedback: Vec<_> = first_pass
        .entries()
        .iter()
        .take(params.fb_docs.max(1))
        .collect();
    let max = feedback
        .iter()
        .map(|s| s.score)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut relevance: BTreeMap<String, f64> = BTreeMap::new();
    for doc in &feedback {
        let weight = (doc.score - max).exp();
        for (t, _) in index.doc_term_freqs(&doc.id)? {
            let p = index.smoothed_log_prob(t, &doc.id, dirichlet)?.exp();
            *relevance.entry(t.to_string()).or_insert(0.0) += p * weight;
        }
    }
    let mut kept: Vec<(String, f64)> = relevance.into_iter().collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(params.fb_terms.max(1));
    let norm: f64 = kept.iter().map(|(_, w)| w).sum();

    let mle = WeightedQuery::mle(&terms);
    let mut out: BTreeMap<String, f64> = mle
        .0
        .iter()
        .map(|(t, w)| (t.clone(), params.lambda * w))
        .collect();
    for (t, w) in kept {
        let w = (1.0 - params.lambda) * w / norm;
        if w > 0.0 {
            *out.entry(t).or_insert(0.0) += w;
        }
    }
    Ok(WeightedQuery(out))
}

/// Second-pass retrieval with an expanded query.
pub fn retrieve_weighted(
    index: &InvertedIndex,
    wq: &WeightedQuery,
    scorer: WeightedScorer,
    k: usize,
) -> RankedList {
    if wq.is_empty() || index.doc_count() == 0 {
        return RankedList::default();
    }
    match scorer {
        WeightedScorer::TfidfCosine => {
            let cands: HashSet<&str> = wq
                .0
                .iter()
                .filter(|(_, &w)| w > 0.0)
                .flat_map(|(t, _)| index.docs_with_term(t))
                .collect();
            let scores = cands.into_iter().filter_map(|id| {
                let v = index.tfidf_passage(id).ok()?;
                let s = cosine(&wq.0, &v);
                (s > 0.0).then(|| (id.to_string(), s))
            });
            RankedList::from_scores(scores, k)
        }
        WeightedScorer::Ql(params) => {
            let live: Vec<(&String, f64)> = wq
                .0
                .iter()
                .filter(|(t, _)| index.collection_freq(t) > 0)
                .map(|(t, &w)| (t, w))
                .collect();
            let scores = index.doc_ids().iter().map(|id| {
                let s: f64 = live
                    .iter()
                    .map(|(t, w)| w * index.smoothed_log_prob(t, id, params).unwrap_or(0.0))
                    .sum();
                (id.clone(), s)
            });
            RankedList::from_scores(scores, k)
        }
    }
}
