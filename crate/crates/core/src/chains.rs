//! Length-2 evidence chains: every initial passage paired with itself and
//! with each passage its mentions link to.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Question};
use crate::index::RankedList;
use crate::linker::Linker;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Hop {
    SelfLink,
    Mention {
        surface: String,
        start: usize,
        end: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub first: String,
    pub last: String,
    pub hop: Hop,
}

impl Chain {
    pub fn self_link(id: &str) -> Self {
        Self {
            first: id.to_string(),
            last: id.to_string(),
            hop: Hop::SelfLink,
        }
    }

    pub fn is_self_link(&self) -> bool {
        matches!(self.hop, Hop::SelfLink)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainCaps {
    pub per_mention: usize,
    pub per_question: usize,
}

impl Default for ChainCaps {
    fn default() -> Self {
        Self {
            per_mention: 8,
            per_question: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSet {
    pub qid: String,
    pub chains: Vec<Chain>,
    pub initial_k: usize,
    pub linker: String,
}

/// Emits `(D, D)` and then `(D, E)` for each candidate `E` of each mention
/// of `D`, walking `initial` in rank order. The first occurrence of a
/// `(first, last)` pair wins, so a mention that links back to `D` folds into
/// the self-link.
pub fn enumerate_chains(
    qid: &str,
    initial: &RankedList,
    corpus: &Corpus,
    linker: Linker<'_>,
    caps: ChainCaps,
) -> ChainSet {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut chains = Vec::new();
    let mut push = |chain: Chain, chains: &mut Vec<Chain>| {
        if chains.len() < caps.per_question
            && seen.insert((chain.first.clone(), chain.last.clone()))
        {
            chains.push(chain);
        }
    };

    for d in initial.ids() {
        push(Chain::self_link(d), &mut chains);
        let Some(passage) = corpus.get(d) else {
            continue;
        };
        for m in &passage.mentions {
            for e in linker
                .candidates(m)
                .into_iter()
                .filter(|e| corpus.contains(e))
                .take(caps.per_mention)
            {
                push(
                    Chain {
                        first: d.to_string(),
                        last: e,
                        hop: Hop::Mention {
                            surface: m.surface.clone(),
                            start: m.start,
                            end: m.end,
                        },
                    },
                    &mut chains,
                );
            }
        }
    }

    ChainSet {
        qid: qid.to_string(),
        chains,
        initial_k: initial.len(),
        linker: linker.mode().to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }
}

/// Positive iff the chain ends at a supporting passage.
pub fn gold_label(chain: &Chain, question: &Question) -> Label {
    if question.supporting_ids.contains(&chain.last) {
        Label::Positive
    } else {
        Label::Negative
    }
}

#[derive(Serialize)]
struct ChainRecord<'a> {
    qid: &'a str,
    first: &'a str,
    last: &'a str,
    hop: &'a Hop,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
}

/// Writes one JSON line per chain; labels are included when a question is given.
pub fn write_chain_set<W: Write>(
    set: &ChainSet,
    question: Option<&Question>,
    mut out: W,
) -> std::io::Result<()> {
    for c in &set.chains {
        let rec = ChainRecord {
            qid: &set.qid,
            first: &c.first,
            last: &c.last,
            hop: &c.hop,
            label: question.map(|q| gold_label(c, q)),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
