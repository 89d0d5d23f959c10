//! Strict multi-evidence metrics and comparison reports.
//!
//! A question counts as answered at `k` only when every supporting passage
//! is in the top `k`. Average precision divides by the number of gold
//! passages, so unretrieved gold passages cost precision.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, Corpus, Question};
use crate::error::{Error, Result};
use crate::index::RankedList;

pub const CUTOFFS: [usize; 4] = [2, 5, 10, 20];

/// 1 iff every gold id is among the first `k` distinct ids of `ranked`.
pub fn accuracy_at_k(ranked: &RankedList, gold: &HashSet<&str>, k: usize) -> Result<u8> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut found = 0;
    for id in ranked.ids() {
        if seen.len() == k {
            break;
        }
        if seen.insert(id) && gold.contains(id) {
            found += 1;
        }
    }
    Ok(u8::from(found == gold.len()))
}

pub fn average_precision(ranked: &RankedList, gold: &HashSet<&str>) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let mut seen = HashSet::new();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for id in ranked.ids() {
        if !seen.insert(id) {
            continue;
        }
        if gold.contains(id) {
            hits += 1;
            sum += hits as f64 / seen.len() as f64;
        }
    }
    Ok(sum / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopClass {
    SingleHop,
    MultiHop,
    Unclassified,
}

impl HopClass {
    pub fn as_str(self) -> &'static str {
        match self {
            HopClass::SingleHop => "single_hop",
            HopClass::MultiHop => "multi_hop",
            HopClass::Unclassified => "unclassified",
        }
    }
}

fn contains_tokens(haystack: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Single-hop when the answer occurs in every supporting passage, multi-hop
/// when it occurs in exactly one of several, unclassified otherwise.
/// Matching is on whole normalized tokens.
pub fn classify_hop(question: &Question, corpus: &Corpus) -> HopClass {
    let answer = normalize(&question.answer);
    let needle: Vec<&str> = answer.split(' ').filter(|t| !t.is_empty()).collect();
    let total = question.supporting_ids.len();
    let count = question
        .supporting_ids
        .iter()
        .filter_map(|id| corpus.get(id))
        .filter(|p| {
            let text = normalize(&p.text);
            let hay: Vec<&str> = text.split(' ').collect();
            contains_tokens(&hay, &needle)
        })
        .count();
    if total > 0 && count == total {
        HopClass::SingleHop
    } else if count == 1 && total > 1 {
        HopClass::MultiHop
    } else {
        HopClass::Unclassified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRow {
    pub qid: String,
    /// Hits at each cutoff in [`CUTOFFS`].
    pub acc: [u8; 4],
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub questions: usize,
    #[serde(rename = "acc@2")]
    pub acc2: f64,
    #[serde(rename = "acc@5")]
    pub acc5: f64,
    #[serde(rename = "acc@10")]
    pub acc10: f64,
    #[serde(rename = "acc@20")]
    pub acc20: f64,
    pub map: f64,
}

impl Metrics {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a QuestionRow>) -> Self {
        let mut n = 0usize;
        let mut acc = [0u64; 4];
        let mut ap = 0.0;
        for r in rows {
            n += 1;
            for (a, h) in acc.iter_mut().zip(r.acc) {
                *a += u64::from(h);
            }
            ap += r.ap;
        }
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            questions: n,
            acc2: mean(acc[0] as f64),
            acc5: mean(acc[1] as f64),
            acc10: mean(acc[2] as f64),
            acc20: mean(acc[3] as f64),
            map: mean(ap),
        }
    }

    pub fn acc(&self) -> [f64; 4] {
        [self.acc2, self.acc5, self.acc10, self.acc20]
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|i| self.acc()[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: Metrics,
    /// Sorted by qid.
    pub rows: Vec<QuestionRow>,
}

/// Scores `runs[qid]` against every question. Questions without a ranking
/// are an error; rankings for unknown qids are ignored.
pub fn evaluate(runs: &BTreeMap<String, RankedList>, questions: &[Question]) -> Result<EvalResult> {
    let mut rows = questions
        .iter()
        .map(|q| {
            let ranked = runs
                .get(&q.qid)
                .ok_or_else(|| Error::MissingQuestion(q.qid.clone()))?;
            let gold = q.supporting();
            let mut acc = [0u8; 4];
            for (a, k) in acc.iter_mut().zip(CUTOFFS) {
                *a = accuracy_at_k(ranked, &gold, k)?;
            }
            Ok(QuestionRow {
                qid: q.qid.clone(),
                acc,
                ap: average_precision(ranked, &gold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.qid.cmp(&b.qid));
    // Sum in qid order so the means do not depend on question order.
    Ok(EvalResult {
        metrics: Metrics::from_rows(&rows),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    /// `all`, or a hop class name when split.
    pub slice: String,
    /// `measured`, or a note for rows copied from elsewhere.
    pub source: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REFERENCE_SOURCE: &str = "published, full-scale";

/// Published full-corpus numbers for the analogous systems. They come from
/// a 5M-passage corpus with a pretrained encoder and are shown for layout
/// comparison only.
pub fn published_reference() -> Vec<ReportRow> {
    let row = |system: &str, v: [f64; 5]| ReportRow {
        system: system.to_string(),
        slice: "all".to_string(),
        source: REFERENCE_SOURCE.to_string(),
        metrics: Metrics {
            questions: 0,
            acc2: v[0],
            acc5: v[1],
            acc10: v[2],
            acc20: v[3],
            map: v[4],
        },
    };
    vec![
        row("bm25", [0.093, 0.191, 0.259, 0.324, 0.412]),
        row("prf-rocchio", [0.088, 0.157, 0.204, 0.258, 0.317]),
        row("prf-rm3", [0.083, 0.175, 0.242, 0.296, 0.406]),
        row("pointwise", [0.146, 0.271, 0.347, 0.409, 0.470]),
        row("entity-only", [0.101, 0.223, 0.301, 0.367, 0.568]),
        row("entity-hop", [0.230, 0.482, 0.612, 0.674, 0.654]),
    ]
}

impl Report {
    /// Adds one `all` row per system in the given order and, when `hop` is
    /// given, one row per (system, hop class) present in the questions.
    pub fn build(
        systems: &[(String, EvalResult)],
        hop: Option<&BTreeMap<String, HopClass>>,
    ) -> Self {
        let mut rows = Vec::new();
        for (name, res) in systems {
            rows.push(ReportRow {
                system: name.clone(),
                slice: "all".into(),
                source: "measured".into(),
                metrics: res.metrics.clone(),
            });
        }
        if let Some(hop) = hop {
            let classes: std::collections::BTreeSet<HopClass> = hop.values().copied().collect();
            for class in classes {
                for (name, res) in systems {
                    let slice = res
                        .rows
                        .iter()
                        .filter(|r| hop.get(&r.qid) == Some(&class));
                    rows.push(ReportRow {
                        system: name.clone(),
                        slice: class.as_str().into(),
                        source: "measured".into(),
                        metrics: Metrics::from_rows(slice),
                    });
                }
            }
        }
        Self { rows }
    }

    pub fn with_reference(mut self) -> Self {
        self.rows.extend(published_reference());
        self
    }

    pub fn find(&self, system: &str, slice: &str) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.system == system && r.slice == slice && r.source == "measured")
            .map(|r| &r.metrics)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,slice,source,questions,acc@2,acc@5,acc@10,acc@20,map\n");
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.system, r.slice, r.source, m.questions, m.acc2, m.acc5, m.acc10, m.acc20, m.map
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Model | Slice | Source | @2 | @5 | @10 | @20 | map |\n|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                s,
                "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.system, r.slice, r.source, m.acc2, m.acc5, m.acc10, m.acc20, m.map
            )
            .unwrap();
        }
        s
    }
}

/// One ranking per line: `{"qid": .., "ranking": [{"id": .., "score": ..}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub qid: String,
    pub ranking: RankedList,
}

pub fn write_run<W: std::io::Write>(runs: &BTreeMap<String, RankedList>, mut out: W) -> std::io::Result<()> {
    for (qid, ranking) in runs {
        let line = RunLine {
            qid: qid.clone(),
            ranking: ranking.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_run<R: std::io::BufRead>(reader: R) -> Result<BTreeMap<String, RankedList>> {
    let mut runs = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if runs.insert(rec.qid.clone(), rec.ranking).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate qid {:?}", rec.qid),
            });
        }
    }
    Ok(runs)
}
