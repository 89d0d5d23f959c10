//! Per-question retrieval for every system, training-set construction, and
//! a full train-then-evaluate experiment.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chains::{enumerate_chains, gold_label, ChainCaps, ChainSet};
use crate::corpus::{Corpus, Question};
use crate::encoder::{Encoder, LexicalEncoder};
use crate::error::{Error, Result};
use crate::eval::{classify_hop, evaluate, EvalResult, HopClass, Report};
use crate::index::{Bm25Params, DirichletParams, InvertedIndex, RankedList, Scorer};
use crate::linker::{build_exclusion_set, AliasOptions, AliasTable, LinkAnnotation, Linker};
use crate::prf::{retrieve_weighted, rm3_expand, rocchio_expand, Rm3Params, RocchioParams, WeightedQuery, WeightedScorer};
use crate::reranker::{
    chain_input, rank_passages, rerank_pointwise, train, Dataset, Head, ReprCache, RerankModel, Sample,
    TrainConfig, TrainLog,
};

pub type Runs = BTreeMap<String, RankedList>;

/// Retriever feeding PRF feedback documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstPass {
    Bm25,
    Ql,
    Tfidf,
}

impl std::str::FromStr for FirstPass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bm25" => Ok(Self::Bm25),
            "ql" => Ok(Self::Ql),
            "tfidf" => Ok(Self::Tfidf),
            _ => Err(format!("unknown first pass {s:?} (bm25, ql, tfidf)")),
        }
    }
}

/// Ranks for `query` with the chosen first pass.
pub fn first_pass(
    index: &InvertedIndex,
    corpus: &Corpus,
    query: &str,
    pass: FirstPass,
    bm25: Bm25Params,
    dirichlet: DirichletParams,
    k: usize,
) -> RankedList {
    let tok = corpus.tokenizer();
    match pass {
        FirstPass::Bm25 => index.retrieve(query, tok, Scorer::Bm25(bm25), k),
        FirstPass::Ql => index.retrieve(query, tok, Scorer::Ql(dirichlet), k),
        FirstPass::Tfidf => retrieve_weighted(
            index,
            &WeightedQuery(index.tfidf_text(query, tok)),
            WeightedScorer::TfidfCosine,
            k,
        ),
    }
}

fn per_question<F>(questions: &[Question], f: F) -> Result<Runs>
where
    F: Fn(&Question) -> Result<RankedList> + Sync,
{
    questions
        .par_iter()
        .map(|q| Ok((q.qid.clone(), f(q)?)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

pub fn run_scorer(index: &InvertedIndex, corpus: &Corpus, questions: &[Question], scorer: Scorer, k: usize) -> Runs {
    per_question(questions, |q| Ok(index.retrieve(&q.text, corpus.tokenizer(), scorer, k)))
        .expect("first-pass retrieval does not fail")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfConfig {
    pub first_pass: FirstPass,
    pub bm25: Bm25Params,
    pub dirichlet: DirichletParams,
}

impl Default for PrfConfig {
    fn default() -> Self {
        Self {
            first_pass: FirstPass::Ql,
            bm25: Bm25Params::default(),
            dirichlet: DirichletParams::default(),
        }
    }
}

/// Rocchio-expanded query and the first pass it came from; `None` when the
/// first pass is empty.
pub fn rocchio_query(
    index: &InvertedIndex,
    corpus: &Corpus,
    query: &str,
    prf: PrfConfig,
    params: RocchioParams,
) -> Result<(Option<WeightedQuery>, RankedList)> {
    let fp = first_pass(index, corpus, query, prf.first_pass, prf.bm25, prf.dirichlet, params.fb_docs);
    match rocchio_expand(index, corpus.tokenizer(), query, &fp, params) {
        Ok(wq) => Ok((Some(wq), fp)),
        Err(Error::NoFeedbackDocs) => Ok((None, fp)),
        Err(e) => Err(e),
    }
}

/// RM3-expanded query over a query-likelihood first pass; `None` when the
/// first pass is empty.
pub fn rm3_query(
    index: &InvertedIndex,
    corpus: &Corpus,
    query: &str,
    params: Rm3Params,
) -> Result<(Option<WeightedQuery>, RankedList)> {
    let fp = index.retrieve(query, corpus.tokenizer(), Scorer::Ql(DirichletParams { mu: params.mu }), params.fb_docs);
    match rm3_expand(index, corpus.tokenizer(), query, &fp, params) {
        Ok(wq) => Ok((Some(wq), fp)),
        Err(Error::NoFeedbackDocs) => Ok((None, fp)),
        Err(e) => Err(e),
    }
}

/// Expands each query with Rocchio over TF-IDF and re-retrieves by cosine.
/// A query with no feedback documents keeps its first-pass ranking.
pub fn run_rocchio(
    index: &InvertedIndex,
    corpus: &Corpus,
    questions: &[Question],
    prf: PrfConfig,
    params: RocchioParams,
    k: usize,
) -> Result<Runs> {
    per_question(questions, |q| {
        Ok(match rocchio_query(index, corpus, &q.text, prf, params)? {
            (Some(wq), _) => retrieve_weighted(index, &wq, WeightedScorer::TfidfCosine, k),
            (None, fp) => fp.truncated(k),
        })
    })
}

/// RM3 expansion from a query-likelihood first pass, re-retrieved by
/// weighted log-likelihood.
pub fn run_rm3(
    index: &InvertedIndex,
    corpus: &Corpus,
    questions: &[Question],
    params: Rm3Params,
    k: usize,
) -> Result<Runs> {
    let dirichlet = DirichletParams { mu: params.mu };
    per_question(questions, |q| {
        Ok(match rm3_query(index, corpus, &q.text, params)? {
            (Some(wq), _) => retrieve_weighted(index, &wq, WeightedScorer::Ql(dirichlet), k),
            (None, fp) => fp.truncated(k),
        })
    })
}

/// Settings shared by the chain and pointwise re-rankers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopConfig {
    /// First-pass depth feeding chain enumeration.
    pub initial_k: usize,
    pub first_pass: Scorer,
    pub caps: ChainCaps,
}

impl Default for HopConfig {
    fn default() -> Self {
        Self {
            initial_k: 25,
            first_pass: Scorer::Bm25(Bm25Params::default()),
            caps: ChainCaps::default(),
        }
    }
}

pub fn chains_for(
    index: &InvertedIndex,
    corpus: &Corpus,
    linker: Linker<'_>,
    question: &Question,
    cfg: HopConfig,
) -> ChainSet {
    let initial = index.retrieve(&question.text, corpus.tokenizer(), cfg.first_pass, cfg.initial_k);
    enumerate_chains(&question.qid, &initial, corpus, linker, cfg.caps)
}

/// Labelled examples for `head`. Chain heads take every enumerated chain;
/// the pointwise head takes every first-pass passage. Sample groups follow
/// question order.
pub fn build_dataset(
    index: &InvertedIndex,
    corpus: &Corpus,
    linker: Linker<'_>,
    encoder: &dyn Encoder,
    questions: &[Question],
    head: Head,
    cfg: HopConfig,
) -> Result<Dataset> {
    let groups = questions
        .par_iter()
        .enumerate()
        .map(|(group, q)| -> Result<Vec<Sample>> {
            let gold = q.supporting();
            let mut cache = ReprCache::new(encoder, &q.text);
            if head == Head::Pointwise {
                let initial = index.retrieve(&q.text, corpus.tokenizer(), cfg.first_pass, cfg.initial_k);
                cache.fill(corpus, initial.ids())?;
                return Ok(initial
                    .ids()
                    .map(|id| Sample {
                        group,
                        x: cache.get(id).expect("encoded").to_vec(),
                        y: if gold.contains(id) { 1.0 } else { 0.0 },
                    })
                    .collect());
            }
            let set = chains_for(index, corpus, linker, q, cfg);
            cache.fill(
                corpus,
                set.chains
                    .iter()
                    .flat_map(|c| [c.first.as_str(), c.last.as_str()]),
            )?;
            Ok(set
                .chains
                .iter()
                .map(|c| Sample {
                    group,
                    x: chain_input(head, c, &cache),
                    y: gold_label(c, q).target(),
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples: groups.into_iter().flatten().collect(),
    })
}

/// Ranks passages by their best-scoring chain. The model's head decides
/// whether the first passage contributes.
#[allow(clippy::too_many_arguments)]
pub fn run_hop(
    model: &RerankModel,
    encoder: &dyn Encoder,
    index: &InvertedIndex,
    corpus: &Corpus,
    linker: Linker<'_>,
    questions: &[Question],
    cfg: HopConfig,
    k: usize,
) -> Result<Runs> {
    per_question(questions, |q| {
        let set = chains_for(index, corpus, linker, q, cfg);
        rank_passages(model, encoder, &q.text, &set, corpus, k)
    })
}

pub fn run_pointwise(
    model: &RerankModel,
    encoder: &dyn Encoder,
    index: &InvertedIndex,
    corpus: &Corpus,
    questions: &[Question],
    cfg: HopConfig,
    k: usize,
) -> Result<Runs> {
    per_question(questions, |q| {
        let initial = index.retrieve(&q.text, corpus.tokenizer(), cfg.first_pass, cfg.initial_k);
        rerank_pointwise(model, encoder, &q.text, &initial, corpus, k)
    })
}

/// Even positions train, odd positions evaluate.
pub fn split_questions(questions: &[Question]) -> (Vec<Question>, Vec<Question>) {
    let (train, test): (Vec<_>, Vec<_>) = questions.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
    (
        train.into_iter().map(|(_, q)| q).collect(),
        test.into_iter().map(|(_, q)| q).collect(),
    )
}

pub const SYSTEMS: [&str; 7] = [
    "bm25",
    "ql",
    "prf-rocchio",
    "prf-rm3",
    "pointwise",
    "entity-only",
    "entity-hop",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub bm25: Bm25Params,
    pub dirichlet: DirichletParams,
    pub prf: PrfConfig,
    pub rocchio: RocchioParams,
    pub rm3: Rm3Params,
    pub hop: HopConfig,
    pub pointwise_initial_k: usize,
    pub train: TrainConfig,
    /// Held-out questions' top-n BM25 passages are dropped from the alias
    /// table; 0 disables the exclusion.
    pub exclusion_top_n: usize,
    /// Depth of every output ranking.
    pub k: usize,
    /// Systems to run, from [`SYSTEMS`].
    pub systems: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bm25: Bm25Params::default(),
            dirichlet: DirichletParams::default(),
            prf: PrfConfig::default(),
            rocchio: RocchioParams::default(),
            rm3: Rm3Params::default(),
            hop: HopConfig::default(),
            pointwise_initial_k: 200,
            train: TrainConfig::default(),
            exclusion_top_n: 0,
            k: 20,
            systems: SYSTEMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub index: InvertedIndex,
    pub alias: AliasTable,
    pub models: BTreeMap<String, (RerankModel, TrainLog)>,
    /// Rankings for the held-out questions, per system.
    pub runs: BTreeMap<String, Runs>,
    pub results: Vec<(String, EvalResult)>,
    pub report: Report,
}

impl ExperimentOutput {
    pub fn metrics(&self, system: &str) -> Option<&crate::eval::Metrics> {
        self.report.find(system, "all")
    }
}

#[allow(clippy::too_many_arguments)]
fn train_head(
    head: Head,
    encoder: &dyn Encoder,
    index: &InvertedIndex,
    corpus: &Corpus,
    linker: Linker<'_>,
    train_qs: &[Question],
    hop: HopConfig,
    cfg: &TrainConfig,
) -> Result<(RerankModel, TrainLog)> {
    let data = build_dataset(index, corpus, linker, encoder, train_qs, head, hop)?;
    let (params, log) = train(&data, cfg)?;
    Ok((RerankModel::new(head, encoder, params), log))
}

/// Builds the index and alias table, trains the re-rankers on the even
/// questions and evaluates every requested system on the odd ones, with a
/// per-hop-class breakdown.
pub fn run_experiment(
    corpus: &Corpus,
    links: &[LinkAnnotation],
    questions: &[Question],
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    for s in &cfg.systems {
        if !SYSTEMS.contains(&s.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown system {s:?}")));
        }
    }
    let index = InvertedIndex::build(corpus);
    let (train_qs, test_qs) = split_questions(questions);
    if train_qs.is_empty() || test_qs.is_empty() {
        return Err(Error::InvalidConfig("need at least two questions to split".into()));
    }
    let exclude: BTreeSet<String> = if cfg.exclusion_top_n > 0 {
        build_exclusion_set(&index, corpus.tokenizer(), &test_qs, cfg.exclusion_top_n, cfg.bm25)
    } else {
        BTreeSet::new()
    };
    let (alias, _) = AliasTable::build(corpus, links, &exclude, AliasOptions::default());
    let linker = Linker::Alias(&alias);
    let mut encoder = LexicalEncoder::new(&index, corpus.tokenizer());
    encoder.bm25 = cfg.bm25;
    encoder.dirichlet = cfg.dirichlet;
    let pointwise_cfg = HopConfig {
        initial_k: cfg.pointwise_initial_k,
        ..cfg.hop
    };

    let mut models = BTreeMap::new();
    let mut runs = BTreeMap::new();
    for system in &cfg.systems {
        let run = match system.as_str() {
            "bm25" => run_scorer(&index, corpus, &test_qs, Scorer::Bm25(cfg.bm25), cfg.k),
            "ql" => run_scorer(&index, corpus, &test_qs, Scorer::Ql(cfg.dirichlet), cfg.k),
            "prf-rocchio" => run_rocchio(&index, corpus, &test_qs, cfg.prf, cfg.rocchio, cfg.k)?,
            "prf-rm3" => run_rm3(&index, corpus, &test_qs, cfg.rm3, cfg.k)?,
            "pointwise" => {
                let (m, log) = train_head(
                    Head::Pointwise,
                    &encoder,
                    &index,
                    corpus,
                    linker,
                    &train_qs,
                    pointwise_cfg,
                    &cfg.train,
                )?;
                let run = run_pointwise(&m, &encoder, &index, corpus, &test_qs, pointwise_cfg, cfg.k)?;
                models.insert(system.clone(), (m, log));
                run
            }
            "entity-only" | "entity-hop" => {
                let head = if system == "entity-hop" { Head::Chain } else { Head::EntityOnly };
                let (m, log) = train_head(head, &encoder, &index, corpus, linker, &train_qs, cfg.hop, &cfg.train)?;
                let run = run_hop(&m, &encoder, &index, corpus, linker, &test_qs, cfg.hop, cfg.k)?;
                models.insert(system.clone(), (m, log));
                run
            }
            _ => unreachable!("validated above"),
        };
        runs.insert(system.clone(), run);
    }

    let results = cfg
        .systems
        .iter()
        .map(|s| Ok((s.clone(), evaluate(&runs[s], &test_qs)?)))
        .collect::<Result<Vec<_>>>()?;
    let hop: BTreeMap<String, HopClass> = test_qs
        .iter()
        .map(|q| (q.qid.clone(), classify_hop(q, corpus)))
        .collect();
    let report = Report::build(&results, Some(&hop));
    Ok(ExperimentOutput {
        index,
        alias,
        models,
        runs,
        results,
        report,
    })
}
