//! In-browser demo. [`Demo`] is plain Rust returning JSON strings so it can
//! be tested natively; [`WebDemo`] is the thin wasm-bindgen face over it.

use hoprank::chains::Hop;
use hoprank::corpus::{Corpus, Question};
use hoprank::encoder::LexicalEncoder;
use hoprank::eval::Metrics;
use hoprank::index::{Bm25Params, DirichletParams, RankedList, Scorer};
use hoprank::linker::Linker;
use hoprank::pipeline::{chains_for, rm3_query, rocchio_query, run_experiment, ExperimentConfig, ExperimentOutput, FirstPass, HopConfig, PrfConfig};
use hoprank::prf::{retrieve_weighted, Rm3Params, RocchioParams, WeightedScorer};
use hoprank::reranker::{aggregate_max, score_chains, RerankModel};
use hoprank::synth::{generate, PlantedGold, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Bundle and training knobs exposed on the page.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub seed: u64,
    pub entities: usize,
    pub distractors: usize,
    pub questions: usize,
    pub overlap: f64,
    pub single_hop_fraction: f64,
    pub epochs: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            entities: 300,
            distractors: 300,
            questions: 60,
            overlap: 0.3,
            single_hop_fraction: 0.0,
            epochs: 60,
        }
    }
}

/// Retrieval settings for one search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    /// bm25, ql, prf-rocchio, prf-rm3, entity-only or entity-hop
    pub mode: String,
    pub k: usize,
    pub k1: f64,
    pub b: f64,
    pub mu: f64,
    pub fb_docs: usize,
    pub fb_terms: usize,
    pub beta: f64,
    pub lambda: f64,
    /// Marks gold passages in the result when given.
    pub qid: Option<String>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        let r = RocchioParams::default();
        Self {
            mode: "bm25".into(),
            k: 10,
            k1: Bm25Params::default().k1,
            b: Bm25Params::default().b,
            mu: DirichletParams::default().mu,
            fb_docs: r.fb_docs,
            fb_terms: r.fb_terms,
            beta: r.beta,
            lambda: Rm3Params::default().lambda,
            qid: None,
        }
    }
}

pub struct Demo {
    corpus: Corpus,
    questions: Vec<Question>,
    gold: Vec<PlantedGold>,
    out: ExperimentOutput,
    hop: HopConfig,
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({"questions": m.questions, "acc@2": m.acc2, "acc@5": m.acc5, "acc@10": m.acc10, "acc@20": m.acc20, "map": m.map})
}

impl Demo {
    /// Generates a bundle, trains both chain heads on the even questions and
    /// evaluates the baselines and heads on the odd ones.
    pub fn build(opts: &BuildOptions) -> Result<Self, String> {
        let bundle = generate(&SynthConfig {
            n_entities: opts.entities,
            n_distractors: opts.distractors,
            n_questions: opts.questions,
            overlap: opts.overlap,
            single_hop_fraction: opts.single_hop_fraction,
            seed: opts.seed,
            vocab_size: (opts.entities + opts.distractors).clamp(500, 2000),
        })
        .map_err(|e| e.to_string())?;
        let corpus = bundle.corpus().map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig {
            systems: ["bm25", "prf-rocchio", "prf-rm3", "entity-only", "entity-hop"]
                .map(String::from)
                .to_vec(),
            ..ExperimentConfig::default()
        };
        cfg.train.epochs = opts.epochs;
        let out = run_experiment(&corpus, &bundle.links, &bundle.questions, &cfg).map_err(|e| e.to_string())?;
        Ok(Self {
            corpus,
            questions: bundle.questions,
            gold: bundle.manifest.gold,
            out,
            hop: cfg.hop,
        })
    }

    /// Corpus size, held-out metrics per system, and the questions with their
    /// planted gold.
    pub fn summary_json(&self) -> String {
        let systems: Vec<_> = self
            .out
            .report
            .rows
            .iter()
            .filter(|r| r.slice == "all")
            .map(|r| json!({"system": r.system, "metrics": metrics_json(&r.metrics)}))
            .collect();
        let questions: Vec<_> = self
            .questions
            .iter()
            .zip(&self.gold)
            .enumerate()
            .map(|(i, (q, g))| {
                json!({
                    "qid": q.qid,
                    "text": q.text,
                    "answer": q.answer,
                    "supporting_ids": q.supporting_ids,
                    "kind": g.kind,
                    "held_out": i % 2 == 1,
                })
            })
            .collect();
        json!({"passages": self.corpus.len(), "systems": systems, "questions": questions}).to_string()
    }

    fn model(&self, system: &str) -> Result<&RerankModel, String> {
        self.out
            .models
            .get(system)
            .map(|(m, _)| m)
            .ok_or_else(|| format!("no trained {system} model"))
    }

    fn encoder(&self) -> LexicalEncoder<'_> {
        LexicalEncoder::new(&self.out.index, self.corpus.tokenizer())
    }

    fn gold_for(&self, qid: Option<&str>) -> Vec<String> {
        qid.and_then(|id| self.questions.iter().find(|q| q.qid == id))
            .map(|q| q.supporting_ids.clone())
            .unwrap_or_default()
    }

    /// Ranks passages for `query`. The learned modes use the models trained
    /// at build time with default lexical features.
    pub fn search_json(&self, query: &str, opts: &SearchOptions) -> Result<String, String> {
        let bm25 = Bm25Params { k1: opts.k1, b: opts.b };
        bm25.validate().map_err(|e| e.to_string())?;
        let dirichlet = DirichletParams { mu: opts.mu };
        dirichlet.validate().map_err(|e| e.to_string())?;
        let index = &self.out.index;
        let tok = self.corpus.tokenizer();
        let mut expansion = None;
        let ranked: RankedList = match opts.mode.as_str() {
            "bm25" => index.retrieve(query, tok, Scorer::Bm25(bm25), opts.k),
            "ql" => index.retrieve(query, tok, Scorer::Ql(dirichlet), opts.k),
            "prf-rocchio" => {
                let params = RocchioParams {
                    beta: opts.beta,
                    fb_docs: opts.fb_docs,
                    fb_terms: opts.fb_terms,
                    ..RocchioParams::default()
                };
                let prf = PrfConfig {
                    first_pass: FirstPass::Ql,
                    bm25,
                    dirichlet,
                };
                match rocchio_query(index, &self.corpus, query, prf, params).map_err(|e| e.to_string())? {
                    (Some(wq), _) => {
                        let r = retrieve_weighted(index, &wq, WeightedScorer::TfidfCosine, opts.k);
                        expansion = Some(wq.0);
                        r
                    }
                    (None, fp) => fp.truncated(opts.k),
                }
            }
            "prf-rm3" => {
                let params = Rm3Params {
                    lambda: opts.lambda,
                    fb_docs: opts.fb_docs,
                    fb_terms: opts.fb_terms,
                    mu: opts.mu,
                };
                match rm3_query(index, &self.corpus, query, params).map_err(|e| e.to_string())? {
                    (Some(wq), _) => {
                        let r = retrieve_weighted(index, &wq, WeightedScorer::Ql(dirichlet), opts.k);
                        expansion = Some(wq.0);
                        r
                    }
                    (None, fp) => fp.truncated(opts.k),
                }
            }
            "entity-hop" | "entity-only" => {
                let model = self.model(&opts.mode)?;
                let chains = self.chain_scores(query, model)?;
                aggregate_max(&chains, opts.k)
            }
            other => return Err(format!("unknown mode {other:?}")),
        };
        let gold = self.gold_for(opts.qid.as_deref());
        let results: Vec<_> = ranked
            .entries()
            .iter()
            .map(|s| {
                let p = self.corpus.get(&s.id);
                json!({
                    "id": s.id,
                    "title": p.map(|p| p.title.as_str()),
                    "text": p.map(|p| p.text.as_str()),
                    "score": s.score,
                    "gold": gold.contains(&s.id),
                })
            })
            .collect();
        Ok(json!({"mode": opts.mode, "results": results, "expansion": expansion}).to_string())
    }

    fn chain_scores(&self, query: &str, model: &RerankModel) -> Result<Vec<hoprank::reranker::ChainScore>, String> {
        let q = Question {
            qid: "demo".into(),
            text: query.to_string(),
            answer: String::new(),
            supporting_ids: Vec::new(),
        };
        let set = chains_for(&self.out.index, &self.corpus, Linker::Alias(&self.out.alias), &q, self.hop);
        score_chains(model, &self.encoder(), query, &set.chains, &self.corpus).map_err(|e| e.to_string())
    }

    /// The `k` most probable chains under the entity-hop model.
    pub fn chains_json(&self, query: &str, k: usize) -> Result<String, String> {
        let mut scores = self.chain_scores(query, self.model("entity-hop")?)?;
        scores.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then_with(|| (&a.chain.first, &a.chain.last).cmp(&(&b.chain.first, &b.chain.last)))
        });
        let title = |id: &str| self.corpus.get(id).map(|p| p.title.clone());
        let rows: Vec<_> = scores
            .iter()
            .take(k)
            .map(|s| {
                let via = match &s.chain.hop {
                    Hop::SelfLink => None,
                    Hop::Mention { surface, .. } => Some(surface.as_str()),
                };
                json!({
                    "first": s.chain.first,
                    "first_title": title(&s.chain.first),
                    "last": s.chain.last,
                    "last_title": title(&s.chain.last),
                    "via": via,
                    "probability": s.probability,
                })
            })
            .collect();
        Ok(json!({"total": scores.len(), "chains": rows}).to_string())
    }
}

fn parse<T: for<'de> Deserialize<'de> + Default>(s: &str) -> Result<T, String> {
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(s).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

#[wasm_bindgen]
impl WebDemo {
    /// `options` is a JSON object of [`BuildOptions`] fields; missing fields
    /// take their defaults.
    #[wasm_bindgen(constructor)]
    pub fn new(options: &str) -> Result<WebDemo, JsError> {
        let opts: BuildOptions = parse(options).map_err(|e| JsError::new(&e))?;
        Demo::build(&opts).map(WebDemo).map_err(|e| JsError::new(&e))
    }

    pub fn summary(&self) -> String {
        self.0.summary_json()
    }

    pub fn search(&self, query: &str, options: &str) -> Result<String, JsError> {
        let opts: SearchOptions = parse(options).map_err(|e| JsError::new(&e))?;
        self.0.search_json(query, &opts).map_err(|e| JsError::new(&e))
    }

    pub fn chains(&self, query: &str, k: usize) -> Result<String, JsError> {
        self.0.chains_json(query, k).map_err(|e| JsError::new(&e))
    }
}
