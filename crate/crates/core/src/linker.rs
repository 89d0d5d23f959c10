//! Alias-table entity linking.
//!
//! Mention surfaces (and, optionally, passage titles) are mapped to the
//! passages they link to. Passages in the exclusion set never become link
//! targets, so passages a first-pass retriever already surfaces for held-out
//! questions cannot leak into the table. Two link-free modes cover corpora
//! without hyperlinks: a passage describes the entity it mentions first, and
//! mentions are linked to such descriptions by exact normalized match.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, Corpus, MentionSpan, Question, TokenizerConfig};
use crate::error::{Error, Result};
use crate::index::{Bm25Params, InvertedIndex, Scorer};

/// Default number of first-pass passages per held-out question excluded from the table.
pub const DEFAULT_EXCLUSION_TOP_N: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAnnotation {
    pub source: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub target: String,
}

pub fn read_links<R: BufRead>(reader: R) -> Result<Vec<LinkAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_links<W: Write>(links: &[LinkAnnotation], mut out: W) -> std::io::Result<()> {
    for l in links {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Normalized surface -> candidate passage ids, most-linked first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AliasTable(BTreeMap<String, Vec<String>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasOptions {
    /// Map every passage title to its own passage.
    pub include_titles: bool,
}

impl Default for AliasOptions {
    fn default() -> Self {
        Self {
            include_titles: true,
        }
    }
}

/// Counts of link annotations that did not make it into the table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AliasReport {
    pub dangling: usize,
    pub bad_source: usize,
    pub excluded: usize,
}

impl AliasTable {
    pub fn build(
        corpus: &Corpus,
        links: &[LinkAnnotation],
        exclude: &BTreeSet<String>,
        options: AliasOptions,
    ) -> (Self, AliasReport) {
        let mut counts: BTreeMap<String, BTreeMap<&str, u64>> = BTreeMap::new();
        let mut report = AliasReport::default();

        for l in links {
            if !corpus.contains(&l.target) {
                report.dangling += 1;
                continue;
            }
            let source_ok = corpus.get(&l.source).is_some_and(|p| {
                l.start < l.end
                    && p.text.get(l.start..l.end).is_some_and(|s| s == l.surface)
            });
            if !source_ok {
                report.bad_source += 1;
                continue;
            }
            if exclude.contains(&l.target) {
                report.excluded += 1;
                continue;
            }
            let key = normalize(&l.surface);
            if key.is_empty() {
                continue;
            }
            *counts.entry(key).or_default().entry(&l.target).or_insert(0) += 1;
        }
        if options.include_titles {
            for p in corpus.passages() {
                let key = normalize(&p.title);
                if key.is_empty() || exclude.contains(&p.id) {
                    continue;
                }
                *counts.entry(key).or_default().entry(&p.id).or_insert(0) += 1;
            }
        }

        let table = counts
            .into_iter()
            .map(|(key, targets)| {
                let mut v: Vec<(&str, u64)> = targets.into_iter().collect();
                v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                (key, v.into_iter().map(|(id, _)| id.to_string()).collect())
            })
            .collect();
        (AliasTable(table), report)
    }

    /// Candidates for a mention; unknown surfaces give an empty slice.
    pub fn link(&self, mention: &MentionSpan) -> &[String] {
        self.lookup(&mention.surface)
    }

    pub fn lookup(&self, surface: &str) -> &[String] {
        self.0
            .get(&normalize(surface))
            .map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("alias table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Union of the top-`top_n` BM25 passages over `questions`.
pub fn build_exclusion_set(
    index: &InvertedIndex,
    tokenizer: &TokenizerConfig,
    questions: &[Question],
    top_n: usize,
    params: Bm25Params,
) -> BTreeSet<String> {
    questions
        .iter()
        .flat_map(|q| {
            index
                .retrieve(&q.text, tokenizer, Scorer::Bm25(params), top_n)
                .ids()
                .map(String::from)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Entity surface -> the passage whose first mention is that surface.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptions(BTreeMap<String, String>);

impl Descriptions {
    /// Each passage describes its first mention; on conflicts the lowest id wins.
    pub fn from_first_mentions(corpus: &Corpus) -> Self {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for p in corpus.passages() {
            let Some(first) = p.mentions.first() else {
                continue;
            };
            let key = normalize(&first.surface);
            if key.is_empty() {
                continue;
            }
            match map.get(&key) {
                Some(existing) if existing.as_str() <= p.id.as_str() => {}
                _ => {
                    map.insert(key, p.id.clone());
                }
            }
        }
        Self(map)
    }

    pub fn get(&self, surface: &str) -> Option<&str> {
        self.0.get(&normalize(surface)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn first_mention_descriptions(corpus: &Corpus) -> Descriptions {
    Descriptions::from_first_mentions(corpus)
}

pub fn string_match_link(descriptions: &Descriptions, mention: &MentionSpan) -> Vec<String> {
    descriptions
        .get(&mention.surface)
        .map(|id| vec![id.to_string()])
        .unwrap_or_default()
}

/// How mentions are resolved to candidate passages.
#[derive(Debug, Clone, Copy)]
pub enum Linker<'a> {
    Alias(&'a AliasTable),
    StringMatch(&'a Descriptions),
}

impl Linker<'_> {
    pub fn candidates(&self, mention: &MentionSpan) -> Vec<String> {
        match self {
            Linker::Alias(t) => t.link(mention).to_vec(),
            Linker::StringMatch(d) => string_match_link(d, mention),
        }
    }

    pub fn mode(&self) -> &'static str {
        match self {
            Linker::Alias(_) => "alias",
            Linker::StringMatch(_) => "string-match",
        }
    }
}
