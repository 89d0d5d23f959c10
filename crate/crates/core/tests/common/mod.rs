//! Brute-force reference implementations written directly from the scoring
//! formulas, over plain token lists. They share no code with the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hoprank::corpus::{Corpus, Passage, TokenizerConfig};
use hoprank::index::InvertedIndex;
use rand::Rng;

pub struct Toy {
    pub ids: Vec<String>,
    pub toks: Vec<Vec<String>>,
    pub corpus: Corpus,
    pub index: InvertedIndex,
}

const WORDS: &[&str] = &["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"];

pub fn random_tokens<R: Rng>(rng: &mut R, max_len: usize, vocab: usize) -> Vec<String> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| WORDS[rng.gen_range(0..vocab)].to_string()).collect()
}

/// Up to 10 passages over a vocabulary of up to 10 words.
pub fn random_toy<R: Rng>(rng: &mut R) -> Toy {
    let n = rng.gen_range(1..=10);
    let vocab = rng.gen_range(2..=WORDS.len());
    let toks: Vec<Vec<String>> = (0..n).map(|_| random_tokens(rng, 12, vocab)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let passages = ids
        .iter()
        .zip(&toks)
        .map(|(id, t)| Passage::new(id.clone(), id.clone(), t.join(" ")))
        .collect();
    let corpus = Corpus::from_passages(passages, &TokenizerConfig::default()).unwrap();
    let index = InvertedIndex::build(&corpus);
    Toy {
        ids,
        toks,
        corpus,
        index,
    }
}

fn count(doc: &[String], t: &str) -> f64 {
    doc.iter().filter(|x| *x == t).count() as f64
}

fn df(toks: &[Vec<String>], t: &str) -> f64 {
    toks.iter().filter(|d| d.iter().any(|x| x == t)).count() as f64
}

pub fn bm25(toks: &[Vec<String>], query: &[String], d: usize, k1: f64, b: f64) -> f64 {
    let n = toks.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let dl = toks[d].len() as f64;
    query
        .iter()
        .map(|t| {
            let f = count(&toks[d], t);
            let df = df(toks, t);
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * dl / avgdl))
        })
        .sum()
}

/// Sum of `log P(t|d)` over query tokens seen in the collection, and the
/// number of skipped tokens.
pub fn ql(toks: &[Vec<String>], query: &[String], d: usize, mu: f64) -> (f64, usize) {
    let total: f64 = toks.iter().map(Vec::len).sum::<usize>() as f64;
    let mut s = 0.0;
    let mut skipped = 0;
    for t in query {
        let cf: f64 = toks.iter().map(|doc| count(doc, t)).sum();
        if cf == 0.0 {
            skipped += 1;
            continue;
        }
        s += ((count(&toks[d], t) + mu * cf / total) / (toks[d].len() as f64 + mu)).ln();
    }
    (s, skipped)
}

pub fn tfidf(toks: &[Vec<String>], text: &[String]) -> BTreeMap<String, f64> {
    let n = toks.len() as f64;
    let mut out = BTreeMap::new();
    for t in text.iter().collect::<BTreeSet<_>>() {
        let df = df(toks, t);
        if df > 0.0 {
            out.insert(t.clone(), count(text, t) * (n / df).ln());
        }
    }
    out
}

pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(t, w)| w * b.get(t).copied().unwrap_or(0.0)).sum();
    let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn top_terms(weights: &BTreeMap<String, f64>, skip: &BTreeMap<String, f64>, n: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = weights
        .iter()
        .filter(|(t, w)| **w > 0.0 && !skip.contains_key(*t))
        .map(|(t, w)| (t.clone(), *w))
        .collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v.truncate(n);
    v
}

/// `alpha q + beta/|F| sum_F d`, restricted to the query's terms plus the
/// `fb_terms` largest positive expansion terms.
pub fn rocchio(
    toks: &[Vec<String>],
    ids: &[String],
    query: &[String],
    feedback: &[String],
    alpha: f64,
    beta: f64,
    fb_terms: usize,
) -> BTreeMap<String, f64> {
    let q = tfidf(toks, query);
    let mut combined: BTreeMap<String, f64> = q.iter().map(|(t, w)| (t.clone(), alpha * w)).collect();
    for id in feedback {
        let d = ids.iter().position(|x| x == id).unwrap();
        for (t, w) in tfidf(toks, &toks[d]) {
            *combined.entry(t).or_insert(0.0) += beta / feedback.len() as f64 * w;
        }
    }
    let mut out: BTreeMap<String, f64> = q.keys().map(|t| (t.clone(), combined[t])).collect();
    out.extend(top_terms(&combined, &q, fb_terms));
    out
}

/// `lambda MLE(q) + (1 - lambda) P(w|R)`, with `P(w|R)` truncated to the
/// top `fb_terms` and renormalized.
#[allow(clippy::too_many_arguments)]
pub fn rm3(
    toks: &[Vec<String>],
    ids: &[String],
    query: &[String],
    feedback: &[(String, f64)],
    lambda: f64,
    fb_terms: usize,
    mu: f64,
) -> BTreeMap<String, f64> {
    let total: f64 = toks.iter().map(Vec::len).sum::<usize>() as f64;
    let max = feedback.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
    let mut rel: BTreeMap<String, f64> = BTreeMap::new();
    for (id, score) in feedback {
        let d = ids.iter().position(|x| x == id).unwrap();
        for t in toks[d].iter().collect::<BTreeSet<_>>() {
            let cf: f64 = toks.iter().map(|doc| count(doc, t)).sum();
            let p = (count(&toks[d], t) + mu * cf / total) / (toks[d].len() as f64 + mu);
            *rel.entry(t.clone()).or_insert(0.0) += p * (score - max).exp();
        }
    }
    let kept = top_terms(&rel, &BTreeMap::new(), fb_terms);
    let norm: f64 = kept.iter().map(|k| k.1).sum();
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for t in query {
        *out.entry(t.clone()).or_insert(0.0) += lambda / query.len() as f64;
    }
    for (t, w) in kept {
        let w = (1.0 - lambda) * w / norm;
        if w > 0.0 {
            *out.entry(t).or_insert(0.0) += w;
        }
    }
    out
}

/// Largest absolute difference; infinite when the key sets differ.
pub fn max_diff(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    if a.keys().ne(b.keys()) {
        return f64::INFINITY;
    }
    a.values().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// For every retrieved gold passage, the share of gold passages at or above
/// its rank divided by that rank; summed in rank order over |gold|.
pub fn brute_ap(ranking: &[String], gold: &[String]) -> f64 {
    let mut ranks: Vec<usize> = gold
        .iter()
        .filter_map(|g| ranking.iter().position(|x| x == g).map(|p| p + 1))
        .collect();
    ranks.sort_unstable();
    let mut sum = 0.0;
    for &r in &ranks {
        let above = ranks.iter().filter(|&&o| o <= r).count();
        sum += above as f64 / r as f64;
    }
    sum / gold.len() as f64
}
