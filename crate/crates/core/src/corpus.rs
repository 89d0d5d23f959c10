//! Passages, questions, tokenization and line-delimited JSON ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "had", "has", "have",
    "he", "her", "his", "how", "i", "in", "is", "it", "its", "of", "on", "or", "she", "that",
    "the", "their", "there", "they", "this", "to", "was", "we", "were", "what", "when", "where",
    "which", "who", "whom", "why", "with", "you",
];

/// Tokenizer settings. Tokens are always lowercased; the stopword list is
/// only consulted by callers that ask for it (mention tagging), never at
/// ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub stopwords: Vec<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TokenizerConfig {
    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.iter().any(|s| s == token)
    }
}

/// Byte ranges of the alphanumeric runs in `text`.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Lowercased alphanumeric tokens. The config is accepted for interface
/// stability; no token is dropped here.
pub fn tokenize(text: &str, _config: &TokenizerConfig) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Tokenize-and-rejoin normalization used for alias keys and answer matching.
pub fn normalize(text: &str) -> String {
    tokenize(text, &TokenizerConfig::default()).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MentionSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<MentionSpan>,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
            mentions: Vec::new(),
        }
    }

    fn check_mention(&self, m: &MentionSpan) -> Result<()> {
        let bad = |msg: &str| Error::BadMention {
            passage: self.id.clone(),
            start: m.start,
            end: m.end,
            msg: msg.to_string(),
        };
        if m.start >= m.end || m.end > self.text.len() {
            return Err(bad("out of bounds"));
        }
        if !self.text.is_char_boundary(m.start) || !self.text.is_char_boundary(m.end) {
            return Err(bad("not on a character boundary"));
        }
        if self.text[m.start..m.end] != m.surface {
            return Err(bad(&format!("surface {:?} does not match text", m.surface)));
        }
        Ok(())
    }
}

/// Keeps the longest span of every overlapping group (earliest on ties) and
/// returns the survivors in document order.
pub fn resolve_overlaps(mut mentions: Vec<MentionSpan>) -> Vec<MentionSpan> {
    mentions.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
    });
    let mut kept: Vec<MentionSpan> = Vec::with_capacity(mentions.len());
    for m in mentions {
        if kept.iter().all(|k| m.end <= k.start || m.start >= k.end) {
            kept.push(m);
        }
    }
    kept.sort_by_key(|m| m.start);
    kept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub qid: String,
    #[serde(rename = "question")]
    pub text: String,
    pub answer: String,
    pub supporting_ids: Vec<String>,
}

impl Question {
    pub fn supporting(&self) -> HashSet<&str> {
        self.supporting_ids.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_tokens: u64,
    pub collection_freq: BTreeMap<String, u64>,
}

/// An immutable, id-indexed passage collection with collection statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    stats: CorpusStats,
    tokenizer: TokenizerConfig,
}

impl Corpus {
    /// Validates ids and mentions, resolves overlapping mentions, and computes
    /// collection statistics. Passage order is preserved.
    pub fn from_passages(passages: Vec<Passage>, tokenizer: &TokenizerConfig) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        let mut stats = CorpusStats::default();
        let mut out = Vec::with_capacity(passages.len());
        for (i, mut p) in passages.into_iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::InvalidConfig(format!("passage {i} has an empty id")));
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id));
            }
            for m in &p.mentions {
                p.check_mention(m)?;
            }
            p.mentions = resolve_overlaps(std::mem::take(&mut p.mentions));
            for tok in tokenize(&p.text, tokenizer) {
                stats.total_tokens += 1;
                *stats.collection_freq.entry(tok).or_insert(0) += 1;
            }
            out.push(p);
        }
        Ok(Self {
            passages: out,
            by_id,
            stats,
            tokenizer: tokenizer.clone(),
        })
    }

    pub fn empty() -> Self {
        Self {
            passages: Vec::new(),
            by_id: HashMap::new(),
            stats: CorpusStats::default(),
            tokenizer: TokenizerConfig::default(),
        }
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn require(&self, id: &str) -> Result<&Passage> {
        self.get(id).ok_or_else(|| Error::UnknownPassage(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    /// Returns a new corpus where every passage without mentions is run
    /// through [`heuristic_tag_mentions`].
    pub fn with_heuristic_mentions(&self) -> Corpus {
        let passages = self
            .passages
            .iter()
            .map(|p| {
                if p.mentions.is_empty() {
                    heuristic_tag_mentions(p, &self.tokenizer)
                } else {
                    p.clone()
                }
            })
            .collect();
        Corpus::from_passages(passages, &self.tokenizer).expect("tagger output is valid")
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_lines<T, R>(reader: R) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Parses corpus lines from any reader.
pub fn read_corpus<R: BufRead>(reader: R, tokenizer: &TokenizerConfig) -> Result<Corpus> {
    let passages: Vec<Passage> = parse_lines(reader)?;
    Corpus::from_passages(passages, tokenizer)
}

pub fn ingest_corpus(path: impl AsRef<Path>, tokenizer: &TokenizerConfig) -> Result<Corpus> {
    let path = path.as_ref();
    read_corpus(open(path)?, tokenizer)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    for p in corpus.passages() {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_questions<R: BufRead>(reader: R) -> Result<Vec<Question>> {
    let mut qs: Vec<Question> = parse_lines(reader)?;
    let mut seen = HashSet::new();
    for q in &mut qs {
        if !seen.insert(q.qid.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate question id {:?}", q.qid)));
        }
        let mut ids = HashSet::new();
        q.supporting_ids.retain(|id| ids.insert(id.clone()));
    }
    Ok(qs)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    read_questions(open(path)?)
}

pub fn write_questions<W: Write>(questions: &[Question], mut out: W) -> std::io::Result<()> {
    for q in questions {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Tags maximal runs of capitalized tokens as mentions, replacing any
/// existing mentions. Tokens in a run may be separated by whitespace or
/// hyphens; any other punctuation ends the run. A sentence-initial token
/// only starts a run when it is not a stopword.
pub fn heuristic_tag_mentions(passage: &Passage, tokenizer: &TokenizerConfig) -> Passage {
    let text = passage.text.as_str();
    let spans = token_spans(text);
    let mut mentions = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    let mut prev_end = 0usize;

    let flush = |run: &mut Option<(usize, usize)>, mentions: &mut Vec<MentionSpan>| {
        if let Some((s, e)) = run.take() {
            mentions.push(MentionSpan {
                start: s,
                end: e,
                surface: text[s..e].to_string(),
            });
        }
    };

    for (idx, &(s, e)) in spans.iter().enumerate() {
        let gap = &text[prev_end..s];
        let sentence_initial = idx == 0 || gap.trim_end().ends_with(['.', '!', '?']);
        let capitalized = text[s..e].chars().next().is_some_and(char::is_uppercase);
        let joined = idx > 0 && gap.chars().all(|c| c.is_whitespace() || c == '-');

        if !capitalized {
            flush(&mut run, &mut mentions);
        } else if let (Some(r), true) = (run.as_mut(), joined) {
            r.1 = e;
        } else {
            flush(&mut run, &mut mentions);
            let lower = text[s..e].to_lowercase();
            if !(sentence_initial && tokenizer.is_stopword(&lower)) {
                run = Some((s, e));
            }
        }
        prev_end = e;
    }
    flush(&mut run, &mut mentions);

    Passage {
        mentions,
        ..passage.clone()
    }
}
