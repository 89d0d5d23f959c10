//! Synthetic bridge-entity corpora with planted two-hop questions.
//!
//! Every passage describes one named entity, mentions a few others and ends
//! with a unique attribute token. A two-hop question mixes terms from a
//! source passage with a controlled share of terms from a bridge passage the
//! source mentions; its answer is the bridge's attribute. Distractor passages
//! carry question terms so that term matching alone ranks the bridge poorly.
//!
//! Content words end in a vowel, entity names are `CVCVC` and attributes
//! contain a consonant cluster, so the three token sets never collide.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_questions, MentionSpan, Passage, Question, TokenizerConfig};
use crate::error::{Error, Result};
use crate::linker::{write_links, LinkAnnotation};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
/// Content words per passage lie in `MIN_WORDS..=MAX_WORDS`.
const MIN_WORDS: usize = 20;
const MAX_WORDS: usize = 32;
/// Word `i` of the vocabulary is drawn with weight `1 / (i + ZIPF_OFFSET)^ZIPF_EXPONENT`.
const ZIPF_EXPONENT: f64 = 0.7;
const ZIPF_OFFSET: f64 = 10.0;
const MENTIONS: usize = 3;
const QUESTION_TERMS: usize = 10;
/// Questions each distractor is seeded with.
const DISTRACTOR_SPREAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_distractors: usize,
    pub n_questions: usize,
    pub vocab_size: usize,
    /// Share of question terms taken from the passage holding the answer.
    pub overlap: f64,
    pub single_hop_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 1000,
            n_distractors: 1000,
            n_questions: 200,
            vocab_size: 2000,
            overlap: 0.3,
            single_hop_fraction: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_entities <= MENTIONS {
            return bad(format!("n_entities must exceed {MENTIONS}"));
        }
        if self.n_questions == 0 {
            return bad("n_questions must be at least 1".into());
        }
        if self.n_questions > self.n_entities {
            return bad(format!(
                "n_questions ({}) cannot exceed n_entities ({})",
                self.n_questions, self.n_entities
            ));
        }
        if self.vocab_size < 2 * MAX_WORDS {
            return bad(format!(
                "vocab_size {} is too small: passages need up to {MAX_WORDS} distinct words and \
                 questions need words unique to each of two passages (at least {})",
                self.vocab_size,
                2 * MAX_WORDS
            ));
        }
        let word_space = (CONSONANTS.len() * VOWELS.len()).pow(3);
        if self.vocab_size > word_space / 2 {
            return bad(format!("vocab_size {} exceeds {}", self.vocab_size, word_space / 2));
        }
        let name_space = (CONSONANTS.len() * VOWELS.len()).pow(2) * CONSONANTS.len();
        if self.n_entities + self.n_distractors > name_space / 2 {
            return bad(format!(
                "{} passages exceed the {} available entity names",
                self.n_entities + self.n_distractors,
                name_space / 2
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.single_hop_fraction) {
            return bad("overlap and single_hop_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    TwoHop,
    SingleHop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedGold {
    pub qid: String,
    pub kind: QuestionKind,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge: Option<String>,
    pub answer: String,
    /// Question terms drawn from the answer passage.
    pub answer_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub files: Vec<String>,
    pub gold: Vec<PlantedGold>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub passages: Vec<Passage>,
    pub links: Vec<LinkAnnotation>,
    pub questions: Vec<Question>,
    pub manifest: SynthManifest,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LINKS_FILE: &str = "links.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

impl SynthBundle {
    pub fn corpus(&self) -> Result<crate::corpus::Corpus> {
        crate::corpus::Corpus::from_passages(self.passages.clone(), &TokenizerConfig::default())
    }

    pub fn corpus_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.passages {
            serde_json::to_writer(&mut out, p).expect("passage serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn links_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_links(&self.links, &mut out).expect("in-memory write");
        out
    }

    pub fn questions_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_questions(&self.questions, &mut out).expect("in-memory write");
        out
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        s.push(b'\n');
        s
    }

    /// Writes the four bundle files into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in [
            (CORPUS_FILE, self.corpus_bytes()),
            (LINKS_FILE, self.links_bytes()),
            (QUESTIONS_FILE, self.questions_bytes()),
            (MANIFEST_FILE, self.manifest_bytes()),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn syllable<R: Rng>(rng: &mut R, out: &mut String) {
    out.push(*CONSONANTS.choose(rng).unwrap() as char);
    out.push(*VOWELS.choose(rng).unwrap() as char);
}

fn consonant<R: Rng>(rng: &mut R, out: &mut String) {
    out.push(*CONSONANTS.choose(rng).unwrap() as char);
}

/// `n` distinct tokens from `make`, rejecting stopwords and repeats.
fn distinct<R: Rng>(rng: &mut R, n: usize, stop: &TokenizerConfig, make: impl Fn(&mut R) -> String) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make(rng);
        if !stop.is_stopword(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Draft {
    id: String,
    name: String,
    words: Vec<String>,
    mentions: Vec<usize>,
    attribute: String,
}

/// Appends text while recording mention offsets.
struct TextBuilder {
    text: String,
    mentions: Vec<MentionSpan>,
}

impl TextBuilder {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn mention(&mut self, surface: &str) {
        let start = self.text.len();
        self.text.push_str(surface);
        self.mentions.push(MentionSpan {
            start,
            end: self.text.len(),
            surface: surface.to_string(),
        });
    }
}

fn render(d: &Draft, names: &[String]) -> Passage {
    let w = &d.words;
    let m = |i: usize| names[d.mentions[i]].as_str();
    let mut b = TextBuilder {
        text: String::new(),
        mentions: Vec::new(),
    };
    b.mention(&d.name);
    b.push(&format!(" is a {} {} {}. ", w[0], w[1], w[2]));
    b.mention(&d.name);
    b.push(&format!(" {} {} {} with ", w[3], w[4], w[5]));
    b.mention(m(0));
    b.push(&format!(" and {} {}. It {} {} {} {} near ", w[6], w[7], w[8], w[9], w[10], w[11]));
    b.mention(m(1));
    b.push(&format!(". {} {} {} {} {} ", w[12], w[13], w[14], w[15], w[16]));
    b.mention(m(2));
    b.push(&format!(". Its {} {} is {}. {}.", w[17], w[18], d.attribute, w[19..].join(" ")));
    Passage {
        id: d.id.clone(),
        title: d.name.clone(),
        text: b.text,
        mentions: b.mentions,
    }
}

/// Words of `from` absent from `other`, attribute-phrase words first.
fn unique_words<'a>(from: &'a Draft, other: Option<&Draft>) -> Vec<&'a str> {
    let order = [17, 18].into_iter().chain((0..from.words.len()).filter(|i| *i != 17 && *i != 18));
    order
        .map(|i| from.words[i].as_str())
        .filter(|w| other.is_none_or(|o| !o.words.iter().any(|x| x == w)))
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthBundle> {
    config.validate()?;
    let stop = TokenizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let vocab = distinct(&mut rng, config.vocab_size, &stop, |r| {
        let mut w = String::new();
        for _ in 0..r.gen_range(2..=3) {
            syllable(r, &mut w);
        }
        w
    });
    let n_passages = config.n_entities + config.n_distractors;
    let names: Vec<String> = distinct(&mut rng, n_passages, &stop, |r| {
        let mut w = String::new();
        syllable(r, &mut w);
        syllable(r, &mut w);
        consonant(r, &mut w);
        w
    })
    .into_iter()
    .map(|w| capitalize(&w))
    .collect();
    let attributes = distinct(&mut rng, n_passages, &stop, |r| {
        let mut w = String::new();
        syllable(r, &mut w);
        consonant(r, &mut w);
        syllable(r, &mut w);
        consonant(r, &mut w);
        w
    });

    let zipf = WeightedIndex::new((0..vocab.len()).map(|i| (i as f64 + ZIPF_OFFSET).powf(-ZIPF_EXPONENT)))
        .expect("positive weights");
    let mut drafts: Vec<Draft> = (0..n_passages)
        .map(|i| {
            let len = rng.gen_range(MIN_WORDS..=MAX_WORDS);
            let mut picked = BTreeSet::new();
            let mut words = Vec::with_capacity(len);
            while words.len() < len {
                let j = zipf.sample(&mut rng);
                if picked.insert(j) {
                    words.push(vocab[j].clone());
                }
            }
            let mentions = loop {
                let m: Vec<usize> = sample(&mut rng, config.n_entities, MENTIONS).into_vec();
                if !m.contains(&i) {
                    break m;
                }
            };
            let id = if i < config.n_entities {
                format!("e{i:05}")
            } else {
                format!("x{:05}", i - config.n_entities)
            };
            Draft {
                id,
                name: names[i].clone(),
                words,
                mentions,
                attribute: attributes[i].clone(),
            }
        })
        .collect();

    let sources = sample(&mut rng, config.n_entities, config.n_questions).into_vec();
    let n_single = (config.single_hop_fraction * config.n_questions as f64).round() as usize;
    let single: BTreeSet<usize> = sample(&mut rng, config.n_questions, n_single).into_iter().collect();

    let mut gold = Vec::with_capacity(config.n_questions);
    let mut terms_by_question: Vec<Vec<String>> = Vec::new();
    let mut questions = Vec::with_capacity(config.n_questions);
    for (qi, &s) in sources.iter().enumerate() {
        let qid = format!("q{qi:04}");
        let (kind, bridge, answer_terms, other_terms) = if single.contains(&qi) {
            let own: Vec<String> = unique_words(&drafts[s], None)
                .into_iter()
                .take(QUESTION_TERMS - 1)
                .map(String::from)
                .collect();
            (QuestionKind::SingleHop, None, own, Vec::new())
        } else {
            // A bridge that mentions the source back would carry the source
            // name, which the question always contains.
            let mut cands: Vec<usize> = drafts[s]
                .mentions
                .iter()
                .copied()
                .filter(|&m| !drafts[m].mentions.contains(&s))
                .collect();
            if cands.is_empty() {
                cands.clone_from(&drafts[s].mentions);
            }
            let b = *cands.choose(&mut rng).unwrap();
            let n_b = (config.overlap * QUESTION_TERMS as f64).round() as usize;
            let from_b: Vec<String> = unique_words(&drafts[b], Some(&drafts[s]))
                .into_iter()
                .take(n_b)
                .map(String::from)
                .collect();
            let from_s: Vec<String> = unique_words(&drafts[s], Some(&drafts[b]))
                .into_iter()
                .take((QUESTION_TERMS - n_b).saturating_sub(1))
                .map(String::from)
                .collect();
            (QuestionKind::TwoHop, Some(b), from_b, from_s)
        };

        // The source entity's name is always part of the question.
        let mut tokens: Vec<String> = answer_terms.iter().chain(&other_terms).cloned().collect();
        tokens.shuffle(&mut rng);
        let at = rng.gen_range(0..=tokens.len());
        tokens.insert(at, drafts[s].name.clone());
        let answer_passage = bridge.unwrap_or(s);

        let mut supporting = vec![drafts[s].id.clone()];
        if let Some(b) = bridge {
            supporting.push(drafts[b].id.clone());
        }
        questions.push(Question {
            qid: qid.clone(),
            text: format!("{}?", tokens.join(" ")),
            answer: drafts[answer_passage].attribute.clone(),
            supporting_ids: supporting,
        });
        gold.push(PlantedGold {
            qid,
            kind,
            source: drafts[s].id.clone(),
            bridge: bridge.map(|b| drafts[b].id.clone()),
            answer: drafts[answer_passage].attribute.clone(),
            answer_terms: answer_terms.clone(),
        });
        let mut pool = answer_terms;
        pool.extend(other_terms);
        pool.push(drafts[s].name.to_lowercase());
        terms_by_question.push(pool);
    }

    // Seed each distractor with 2 to 5 random terms from each of a few
    // questions, so distractors straddle the answer passage's match count.
    for j in 0..config.n_distractors {
        let di = config.n_entities + j;
        let mut chosen: Vec<String> = Vec::new();
        for _ in 0..DISTRACTOR_SPREAD {
            let pool = &terms_by_question[rng.gen_range(0..config.n_questions)];
            let n = rng.gen_range(1..=5);
            chosen.extend(pool.choose_multiple(&mut rng, n).cloned());
        }
        let d = &mut drafts[di];
        let mut seen: BTreeSet<String> = BTreeSet::new();
        chosen.retain(|w| seen.insert(w.clone()));
        let keep: Vec<String> = d.words.iter().filter(|w| !seen.contains(*w)).cloned().collect();
        let len = d.words.len();
        let mut words: Vec<String> = chosen.into_iter().take(len).collect();
        words.extend(keep.into_iter().take(len - words.len()));
        words.shuffle(&mut rng);
        d.words = words;
    }

    let passages: Vec<Passage> = drafts.iter().map(|d| render(d, &names)).collect();
    let mut links = Vec::new();
    for (d, p) in drafts.iter().zip(&passages) {
        // The first two spans are the passage's own name.
        for (m, &target) in p.mentions[2..].iter().zip(&d.mentions) {
            links.push(LinkAnnotation {
                source: d.id.clone(),
                start: m.start,
                end: m.end,
                surface: m.surface.clone(),
                target: drafts[target].id.clone(),
            });
        }
    }

    Ok(SynthBundle {
        passages,
        links,
        questions,
        manifest: SynthManifest {
            generator: "hoprank-synth-v1".into(),
            seed: config.seed,
            config: *config,
            files: [CORPUS_FILE, LINKS_FILE, QUESTIONS_FILE]
                .into_iter()
                .map(String::from)
                .collect(),
            gold,
        },
    })
}
