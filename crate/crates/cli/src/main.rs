mod config;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hoprank::chains::{write_chain_set, ChainCaps};
use hoprank::corpus::{ingest_corpus, load_questions, write_corpus, Corpus, Question, TokenizerConfig};
use hoprank::encoder::{Encoder, LexicalEncoder, RemoteEncoder, ENDPOINT_ENV};
use hoprank::eval::{classify_hop, evaluate, read_run, write_run, EvalResult, HopClass, Report};
use hoprank::index::{Bm25Params, DirichletParams, InvertedIndex, Scorer};
use hoprank::linker::{
    build_exclusion_set, first_mention_descriptions, read_links, AliasOptions, AliasTable, Descriptions, Linker,
};
use hoprank::pipeline::{
    build_dataset, chains_for, rm3_query, rocchio_query, run_experiment, run_hop, run_pointwise, run_rm3,
    run_rocchio, run_scorer, ExperimentConfig, FirstPass, HopConfig, PrfConfig, Runs, SYSTEMS,
};
use hoprank::prf::{Rm3Params, RocchioParams};
use hoprank::reranker::{train, Head, Optimizer, RerankModel, TrainConfig};
use hoprank::synth::{generate, SynthConfig, CORPUS_FILE, LINKS_FILE, MANIFEST_FILE, QUESTIONS_FILE};
use serde::Serialize;

use manifest::{beside, RunManifest};

const DEFAULT_ENDPOINT: &str = "127.0.0.1:7878";

/// Failure classes, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Encoder(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Encoder(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Encoder(m) => m,
        }
    }
}

/// Wraps a library error with the file or step it came from.
fn ctx(what: impl std::fmt::Display) -> impl FnOnce(hoprank::Error) -> Failure {
    move |e| {
        let msg = format!("{what}: {e}");
        match &e {
            e if e.is_encoder() => Failure::Encoder(msg),
            hoprank::Error::InvalidConfig(_) => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

type Res<T = ()> = Result<T, Failure>;

/// Entity-hop passage retrieval with classical baselines.
#[derive(Parser)]
#[command(name = "hoprank", version, about)]
struct Cli {
    /// key = value file of long flag names; flags on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Cap on worker threads [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-hop bundle
    Synth(SynthArgs),
    /// Validate a corpus file and write it in canonical form
    Ingest(IngestArgs),
    /// Add heuristic mention spans to passages that have none
    Tag(IngestArgs),
    /// Build the inverted index
    Index(IndexArgs),
    /// Build the alias table from link annotations
    Alias(AliasArgs),
    /// Enumerate labelled entity chains per question
    Chains(ChainsArgs),
    /// Rank passages for every question
    Retrieve(RetrieveArgs),
    /// Train a re-ranker
    Train(TrainArgs),
    /// Score ranking files against gold supporting passages
    Eval(EvalArgs),
    /// Index, link, train on even questions and evaluate every system on odd ones
    Run(RunArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Entity passages
    #[arg(long, default_value_t = 1000)]
    entities: usize,
    /// Distractor passages
    #[arg(long, default_value_t = 1000)]
    distractors: usize,
    #[arg(long, default_value_t = 200)]
    questions: usize,
    /// Content vocabulary size
    #[arg(long, default_value_t = 2000)]
    vocab: usize,
    /// Share of two-hop question terms taken from the bridge passage
    #[arg(long, default_value_t = 0.3)]
    overlap: f64,
    /// Share of questions answerable from one passage
    #[arg(long, default_value_t = 0.0)]
    single_hop_fraction: f64,
}

#[derive(Args, Serialize)]
struct IngestArgs {
    /// Corpus JSONL: {"id","title","text","mentions"?}
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone, Copy)]
struct Bm25Flags {
    /// BM25 term-frequency saturation
    #[arg(long, default_value_t = 1.2)]
    k1: f64,
    /// BM25 length normalization
    #[arg(long, default_value_t = 0.75)]
    b: f64,
}

impl Bm25Flags {
    fn params(self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Args, Serialize)]
struct AliasArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Link annotations JSONL
    #[arg(long)]
    links: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Questions whose top BM25 passages are excluded as link targets
    #[arg(long, value_name = "QUESTIONS")]
    exclude_from: Option<PathBuf>,
    /// Depth of the exclusion retrieval per question
    #[arg(long, default_value_t = hoprank::linker::DEFAULT_EXCLUSION_TOP_N)]
    top_n: usize,
    /// Prebuilt index for the exclusion retrieval [default: built from --corpus]
    #[arg(long)]
    index: Option<PathBuf>,
    /// Write the excluded passage ids here, one per line
    #[arg(long)]
    exclusion_out: Option<PathBuf>,
    /// Do not map passage titles to their own passage
    #[arg(long)]
    no_titles: bool,
    #[command(flatten)]
    bm25: Bm25Flags,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum LinkerMode {
    Alias,
    StringMatch,
}

#[derive(Args, Serialize, Clone)]
struct LinkFlags {
    /// Alias table from `hoprank alias`
    #[arg(long)]
    alias: Option<PathBuf>,
    /// How mentions resolve to passages
    #[arg(long, value_enum, default_value_t = LinkerMode::Alias)]
    linker: LinkerMode,
    /// Candidates kept per mention
    #[arg(long, default_value_t = ChainCaps::default().per_mention)]
    per_mention: usize,
    /// Chains kept per question
    #[arg(long, default_value_t = ChainCaps::default().per_question)]
    per_question: usize,
}

impl LinkFlags {
    fn caps(&self) -> ChainCaps {
        ChainCaps {
            per_mention: self.per_mention,
            per_question: self.per_question,
        }
    }
}

#[derive(Args, Serialize)]
struct ChainsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// First-pass BM25 depth
    #[arg(long, default_value_t = 25)]
    initial_k: usize,
    #[command(flatten)]
    link: LinkFlags,
    #[command(flatten)]
    bm25: Bm25Flags,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Bm25,
    Ql,
    PrfRocchio,
    PrfRm3,
    Pointwise,
    EntityHop,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Ablation {
    EntityOnly,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum EncoderKind {
    Lexical,
    Remote,
}

#[derive(Args, Serialize, Clone)]
struct EncoderFlags {
    /// Passage representation
    #[arg(long, value_enum, default_value_t = EncoderKind::Lexical)]
    encoder: EncoderKind,
    /// Embedding service host:port [default: $HOPRANK_ENCODER_ADDR, else 127.0.0.1:7878]
    #[arg(long)]
    encoder_addr: Option<String>,
    /// Required vector width from the service [default: whatever it advertises]
    #[arg(long)]
    encoder_dim: Option<usize>,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum FirstPassArg {
    Bm25,
    Ql,
    Tfidf,
}

impl From<FirstPassArg> for FirstPass {
    fn from(f: FirstPassArg) -> Self {
        match f {
            FirstPassArg::Bm25 => FirstPass::Bm25,
            FirstPassArg::Ql => FirstPass::Ql,
            FirstPassArg::Tfidf => FirstPass::Tfidf,
        }
    }
}

#[derive(Args, Serialize)]
struct RetrieveArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    corpus: PathBuf,
    /// Index from `hoprank index`
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    questions: PathBuf,
    /// Ranking JSONL
    #[arg(long)]
    out: PathBuf,
    /// Passages kept per question
    #[arg(short, long, default_value_t = 20)]
    k: usize,
    #[command(flatten)]
    bm25: Bm25Flags,
    /// Dirichlet prior for query likelihood and RM3
    #[arg(long, default_value_t = 1500.0)]
    mu: f64,
    /// Rocchio feedback retriever
    #[arg(long, value_enum, default_value_t = FirstPassArg::Ql)]
    first_pass: FirstPassArg,
    /// Rocchio weight of the original query
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Rocchio weight of the feedback centroid
    #[arg(long, default_value_t = 0.75)]
    beta: f64,
    /// RM3 weight of the original query model
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Feedback documents
    #[arg(long, default_value_t = 10)]
    fb_docs: usize,
    /// Expansion terms
    #[arg(long, default_value_t = 10)]
    fb_terms: usize,
    /// Write each expanded query as {"qid","weights":{term: weight}}
    #[arg(long)]
    dump_expansions: Option<PathBuf>,
    /// Re-ranker from `hoprank train`
    #[arg(long)]
    model: Option<PathBuf>,
    /// First-pass depth [default: 25 for entity-hop, 200 for pointwise]
    #[arg(long)]
    initial_k: Option<usize>,
    /// Score chains by their final passage only
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[command(flatten)]
    link: LinkFlags,
    #[command(flatten)]
    encoder: EncoderFlags,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum HeadArg {
    Chain,
    EntityOnly,
    Pointwise,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Chain => Head::Chain,
            HeadArg::EntityOnly => Head::EntityOnly,
            HeadArg::Pointwise => Head::Pointwise,
        }
    }
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args, Serialize, Clone, Copy)]
struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Negatives sampled per positive within a question each epoch; 0 keeps all
    #[arg(long, default_value_t = TrainConfig::default().neg_per_pos)]
    neg_per_pos: usize,
    /// Hidden units
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
}

impl TrainFlags {
    fn config(self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            neg_per_pos: self.neg_per_pos,
            hidden: self.hidden,
            seed: self.seed,
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => Optimizer::Sgd,
                OptimizerArg::Adam => Optimizer::Adam,
            },
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = HeadArg::Chain)]
    head: HeadArg,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Training questions with gold supporting ids
    #[arg(long)]
    questions: PathBuf,
    /// Model JSON
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    /// First-pass depth [default: 25 for chain heads, 200 for pointwise]
    #[arg(long)]
    initial_k: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    bm25: Bm25Flags,
    /// Dirichlet prior used by the lexical encoder
    #[arg(long, default_value_t = 1500.0)]
    mu: f64,
    #[command(flatten)]
    link: LinkFlags,
    #[command(flatten)]
    encoder: EncoderFlags,
}

#[derive(ValueEnum, Serialize, Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Csv,
    Json,
    Md,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    questions: PathBuf,
    /// Ranking file as NAME=PATH or PATH (named by file stem); repeatable
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Report path prefix; one file per format
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json, Format::Md])]
    format: Vec<Format>,
    /// Break metrics out by single-hop and multi-hop questions (needs --corpus)
    #[arg(long)]
    hop_split: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Append the published full-scale numbers as reference rows
    #[arg(long)]
    reference: bool,
}

#[derive(Args, Serialize)]
struct RunArgs {
    /// Directory with corpus.jsonl, links.jsonl, questions.jsonl
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated systems
    #[arg(long, value_delimiter = ',', default_values_t = SYSTEMS.map(String::from))]
    systems: Vec<String>,
    #[arg(short, long, default_value_t = 20)]
    k: usize,
    /// Exclude the held-out questions' top-n BM25 passages from the alias table; 0 disables
    #[arg(long, default_value_t = 0)]
    exclusion_top_n: usize,
    #[arg(long, default_value_t = 25)]
    initial_k: usize,
    #[arg(long, default_value_t = 200)]
    pointwise_initial_k: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    reference: bool,
}

fn tokenizer() -> TokenizerConfig {
    TokenizerConfig::default()
}

fn load_corpus(path: &Path) -> Res<Corpus> {
    ingest_corpus(path, &tokenizer()).map_err(ctx(format!("corpus {}", path.display())))
}

fn load_qs(path: &Path) -> Res<Vec<Question>> {
    load_questions(path).map_err(ctx(format!("questions {}", path.display())))
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str, how: &str) -> Res<&'a Path> {
    match path {
        Some(p) if p.exists() => Ok(p),
        Some(p) => Err(Failure::Data(format!(
            "{what} {} not found; produce it with `{how}`",
            p.display()
        ))),
        None => Err(Failure::Data(format!("missing {what}: pass {flag} FILE (produce it with `{how}`)"))),
    }
}

/// Loads the index and checks that it was built from `corpus`.
fn load_index(path: &Option<PathBuf>, corpus: &Corpus, m: &mut RunManifest) -> Res<InvertedIndex> {
    let path = require(path, "index", "--index", "hoprank index --corpus C --out FILE")?;
    m.input(path)?;
    let f = File::open(path).map_err(io_ctx(path))?;
    let index = InvertedIndex::read_from(BufReader::new(f)).map_err(ctx(path.display()))?;
    let same = index.doc_count() == corpus.len()
        && index.doc_ids().iter().all(|id| corpus.contains(id));
    if !same {
        return Err(Failure::Data(format!("index {} was not built from this corpus", path.display())));
    }
    Ok(index)
}

fn load_alias(path: &Option<PathBuf>, m: &mut RunManifest) -> Res<AliasTable> {
    let path = require(path, "alias table", "--alias", "hoprank alias --corpus C --links L --out FILE")?;
    m.input(path)?;
    let text = fs::read_to_string(path).map_err(io_ctx(path))?;
    AliasTable::from_json(&text).map_err(ctx(path.display()))
}

fn load_model(path: &Option<PathBuf>, m: &mut RunManifest) -> Res<RerankModel> {
    let path = require(path, "model", "--model", "hoprank train ... --out FILE")?;
    m.input(path)?;
    let text = fs::read_to_string(path).map_err(io_ctx(path))?;
    RerankModel::from_json(&text).map_err(ctx(path.display()))
}

enum LinkSource {
    Alias(AliasTable),
    Descriptions(Descriptions),
}

impl LinkSource {
    fn load(flags: &LinkFlags, corpus: &Corpus, m: &mut RunManifest) -> Res<Self> {
        Ok(match flags.linker {
            LinkerMode::Alias => LinkSource::Alias(load_alias(&flags.alias, m)?),
            LinkerMode::StringMatch => LinkSource::Descriptions(first_mention_descriptions(corpus)),
        })
    }

    fn linker(&self) -> Linker<'_> {
        match self {
            LinkSource::Alias(t) => Linker::Alias(t),
            LinkSource::Descriptions(d) => Linker::StringMatch(d),
        }
    }
}

/// Opens the requested encoder and records the resolved endpoint.
fn open_encoder<'a>(
    flags: &EncoderFlags,
    index: &'a InvertedIndex,
    bm25: Bm25Params,
    mu: f64,
    m: &mut RunManifest,
) -> Res<Box<dyn Encoder + 'a>> {
    match flags.encoder {
        EncoderKind::Lexical => {
            let mut enc = LexicalEncoder::new(index, &tokenizer());
            enc.bm25 = bm25;
            enc.dirichlet = DirichletParams { mu };
            Ok(Box::new(enc))
        }
        EncoderKind::Remote => {
            let addr = flags
                .encoder_addr
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV).ok())
                .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string());
            m.resolve("resolved_encoder_addr", &addr);
            let enc = RemoteEncoder::connect(&addr, flags.encoder_dim).map_err(ctx("remote encoder"))?;
            Ok(Box::new(enc))
        }
    }
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_ctx(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_ctx(path))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Res {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_ctx(path))
}

fn finish(m: &mut RunManifest, outputs: &[&Path], at: PathBuf) -> Res {
    for o in outputs {
        m.output(o)?;
    }
    m.write(at)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Res {
    let cfg = SynthConfig {
        n_entities: a.entities,
        n_distractors: a.distractors,
        n_questions: a.questions,
        vocab_size: a.vocab,
        overlap: a.overlap,
        single_hop_fraction: a.single_hop_fraction,
        seed: a.seed,
    };
    let bundle = generate(&cfg).map_err(ctx("synth"))?;
    bundle.write_to(&a.out).map_err(ctx(a.out.display()))?;
    let mut m = RunManifest::new("synth", a, Some(a.seed));
    let files: Vec<PathBuf> = [CORPUS_FILE, LINKS_FILE, QUESTIONS_FILE, MANIFEST_FILE]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    finish(&mut m, &refs, a.out.join("run.manifest.json"))?;
    println!(
        "{} passages, {} links, {} questions -> {}",
        bundle.passages.len(),
        bundle.links.len(),
        bundle.questions.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_ingest(a: &IngestArgs, tag: bool) -> Res {
    let mut m = RunManifest::new(if tag { "tag" } else { "ingest" }, a, None);
    m.input(&a.corpus)?;
    let mut corpus = load_corpus(&a.corpus)?;
    if tag {
        corpus = corpus.with_heuristic_mentions();
    }
    write_file(&a.out, |w| write_corpus(&corpus, w))?;
    finish(&mut m, &[&a.out], beside(&a.out))?;
    let mentions: usize = corpus.passages().iter().map(|p| p.mentions.len()).sum();
    println!("{} passages, {mentions} mentions -> {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_index(a: &IndexArgs) -> Res {
    let mut m = RunManifest::new("index", a, None);
    m.input(&a.corpus)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = InvertedIndex::build(&corpus);
    write_file(&a.out, |w| index.write_to(w))?;
    finish(&mut m, &[&a.out], beside(&a.out))?;
    println!(
        "{} passages, {} terms, {} tokens -> {}",
        index.doc_count(),
        index.vocabulary().len(),
        index.total_tokens(),
        a.out.display()
    );
    Ok(())
}

fn cmd_alias(a: &AliasArgs) -> Res {
    let mut m = RunManifest::new("alias", a, None);
    m.input(&a.corpus)?;
    m.input(&a.links)?;
    let corpus = load_corpus(&a.corpus)?;
    let f = File::open(&a.links).map_err(io_ctx(&a.links))?;
    let links = read_links(BufReader::new(f)).map_err(ctx(format!("links {}", a.links.display())))?;
    let exclude: BTreeSet<String> = match &a.exclude_from {
        Some(qpath) => {
            m.input(qpath)?;
            let qs = load_qs(qpath)?;
            let index = match &a.index {
                Some(_) => load_index(&a.index, &corpus, &mut m)?,
                None => InvertedIndex::build(&corpus),
            };
            build_exclusion_set(&index, corpus.tokenizer(), &qs, a.top_n, a.bm25.params())
        }
        None => BTreeSet::new(),
    };
    let options = AliasOptions {
        include_titles: !a.no_titles,
    };
    let (table, report) = AliasTable::build(&corpus, &links, &exclude, options);
    write_file(&a.out, |w| w.write_all(table.to_json().as_bytes()))?;
    let mut outs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.exclusion_out {
        write_file(p, |w| exclude.iter().try_for_each(|id| writeln!(w, "{id}")))?;
        outs.push(p);
    }
    finish(&mut m, &outs, beside(&a.out))?;
    println!(
        "{} surfaces; {} excluded passages; links dropped: {} excluded, {} dangling, {} bad source -> {}",
        table.len(),
        exclude.len(),
        report.excluded,
        report.dangling,
        report.bad_source,
        a.out.display()
    );
    Ok(())
}

fn cmd_chains(a: &ChainsArgs) -> Res {
    let mut m = RunManifest::new("chains", a, None);
    m.input(&a.corpus)?;
    m.input(&a.questions)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = load_index(&a.index, &corpus, &mut m)?;
    let qs = load_qs(&a.questions)?;
    let links = LinkSource::load(&a.link, &corpus, &mut m)?;
    let cfg = HopConfig {
        initial_k: a.initial_k,
        first_pass: Scorer::Bm25(a.bm25.params()),
        caps: a.link.caps(),
    };
    let mut total = 0;
    write_file(&a.out, |w| {
        for q in &qs {
            let set = chains_for(&index, &corpus, links.linker(), q, cfg);
            total += set.chains.len();
            write_chain_set(&set, Some(q), &mut *w)?;
        }
        Ok(())
    })?;
    finish(&mut m, &[&a.out], beside(&a.out))?;
    println!("{total} chains for {} questions -> {}", qs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ExpansionLine<'a> {
    qid: &'a str,
    weights: &'a BTreeMap<String, f64>,
}

fn check_model(model: &RerankModel, want: Head, encoder: &dyn Encoder) -> Res {
    if model.head != want {
        return Err(Failure::Usage(format!(
            "model head is {:?} but this mode needs {want:?}",
            model.head
        )));
    }
    model.check_encoder(encoder).map_err(ctx("model"))
}

fn cmd_retrieve(a: &RetrieveArgs) -> Res {
    if a.ablation.is_some() && a.mode != Mode::EntityHop {
        return Err(Failure::Usage("--ablation applies to --mode entity-hop only".into()));
    }
    if a.dump_expansions.is_some() && !matches!(a.mode, Mode::PrfRocchio | Mode::PrfRm3) {
        return Err(Failure::Usage("--dump-expansions applies to prf modes only".into()));
    }
    let mut m = RunManifest::new("retrieve", a, None);
    m.input(&a.corpus)?;
    m.input(&a.questions)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = load_index(&a.index, &corpus, &mut m)?;
    let qs = load_qs(&a.questions)?;
    let bm25 = a.bm25.params();
    bm25.validate().map_err(ctx("bm25"))?;
    let dirichlet = DirichletParams { mu: a.mu };
    dirichlet.validate().map_err(ctx("ql"))?;
    let rocchio = RocchioParams {
        alpha: a.alpha,
        beta: a.beta,
        fb_docs: a.fb_docs,
        fb_terms: a.fb_terms,
    };
    let prf = PrfConfig {
        first_pass: a.first_pass.into(),
        bm25,
        dirichlet,
    };
    let rm3 = Rm3Params {
        lambda: a.lambda,
        fb_docs: a.fb_docs,
        fb_terms: a.fb_terms,
        mu: a.mu,
    };
    let initial_k = a.initial_k.unwrap_or(if a.mode == Mode::Pointwise { 200 } else { 25 });
    if matches!(a.mode, Mode::Pointwise | Mode::EntityHop) {
        m.resolve("initial_k", initial_k);
    }
    let hop = HopConfig {
        initial_k,
        first_pass: Scorer::Bm25(bm25),
        caps: a.link.caps(),
    };
    let runs: Runs = match a.mode {
        Mode::Bm25 => run_scorer(&index, &corpus, &qs, Scorer::Bm25(bm25), a.k),
        Mode::Ql => run_scorer(&index, &corpus, &qs, Scorer::Ql(dirichlet), a.k),
        Mode::PrfRocchio => run_rocchio(&index, &corpus, &qs, prf, rocchio, a.k).map_err(ctx("rocchio"))?,
        Mode::PrfRm3 => run_rm3(&index, &corpus, &qs, rm3, a.k).map_err(ctx("rm3"))?,
        Mode::Pointwise => {
            let model = load_model(&a.model, &mut m)?;
            let enc = open_encoder(&a.encoder, &index, bm25, a.mu, &mut m)?;
            check_model(&model, Head::Pointwise, enc.as_ref())?;
            run_pointwise(&model, enc.as_ref(), &index, &corpus, &qs, hop, a.k).map_err(ctx("pointwise"))?
        }
        Mode::EntityHop => {
            let model = load_model(&a.model, &mut m)?;
            let links = LinkSource::load(&a.link, &corpus, &mut m)?;
            let enc = open_encoder(&a.encoder, &index, bm25, a.mu, &mut m)?;
            let head = if a.ablation.is_some() { Head::EntityOnly } else { Head::Chain };
            check_model(&model, head, enc.as_ref())?;
            run_hop(&model, enc.as_ref(), &index, &corpus, links.linker(), &qs, hop, a.k)
                .map_err(ctx("entity-hop"))?
        }
    };
    write_file(&a.out, |w| write_run(&runs, w))?;
    let mut outs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.dump_expansions {
        write_file(p, |w| {
            for q in &qs {
                let expanded = match a.mode {
                    Mode::PrfRocchio => rocchio_query(&index, &corpus, &q.text, prf, rocchio),
                    _ => rm3_query(&index, &corpus, &q.text, rm3),
                };
                let (wq, _) = expanded.map_err(std::io::Error::other)?;
                if let Some(wq) = wq {
                    serde_json::to_writer(&mut *w, &ExpansionLine { qid: &q.qid, weights: &wq.0 })?;
                    w.write_all(b"\n")?;
                }
            }
            Ok(())
        })?;
        outs.push(p);
    }
    finish(&mut m, &outs, beside(&a.out))?;
    println!("{} questions -> {}", runs.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Res {
    let mut m = RunManifest::new("train", a, Some(a.train.seed));
    m.input(&a.corpus)?;
    m.input(&a.questions)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = load_index(&a.index, &corpus, &mut m)?;
    let qs = load_qs(&a.questions)?;
    let head: Head = a.head.into();
    let links = match head {
        Head::Pointwise => LinkSource::Descriptions(Descriptions::default()),
        _ => LinkSource::load(&a.link, &corpus, &mut m)?,
    };
    let bm25 = a.bm25.params();
    let enc = open_encoder(&a.encoder, &index, bm25, a.mu, &mut m)?;
    let initial_k = a.initial_k.unwrap_or(if head == Head::Pointwise { 200 } else { 25 });
    m.resolve("initial_k", initial_k);
    let hop = HopConfig {
        initial_k,
        first_pass: Scorer::Bm25(bm25),
        caps: a.link.caps(),
    };
    let data = build_dataset(&index, &corpus, links.linker(), enc.as_ref(), &qs, head, hop)
        .map_err(ctx("building training set"))?;
    let (params, log) = train(&data, &a.train.config()).map_err(ctx("train"))?;
    let model = RerankModel::new(head, enc.as_ref(), params);
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut n = a.out.file_name().unwrap_or_default().to_os_string();
        n.push(".log.csv");
        a.out.with_file_name(n)
    });
    m.resolve("log", &log_path);
    write_file(&a.out, |w| w.write_all(model.to_json().as_bytes()))?;
    write_file(&log_path, |w| log.write_csv(w))?;
    finish(&mut m, &[&a.out, &log_path], beside(&a.out))?;
    println!(
        "{} samples ({} positive), final loss {:.6} -> {}",
        data.samples.len(),
        data.positives(),
        log.final_loss(),
        a.out.display()
    );
    Ok(())
}

fn report_files(report: &Report, prefix: &Path, formats: &[Format]) -> Res<Vec<PathBuf>> {
    let formats: BTreeSet<Format> = formats.iter().copied().collect();
    let mut out = Vec::new();
    for f in formats {
        let (ext, body) = match f {
            Format::Csv => ("csv", report.to_csv()),
            Format::Json => ("json", report.to_json()),
            Format::Md => ("md", report.to_markdown()),
        };
        let mut name = prefix.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".{ext}"));
        let path = prefix.with_file_name(name);
        write_file(&path, |w| w.write_all(body.as_bytes()))?;
        out.push(path);
    }
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> Res {
    let mut m = RunManifest::new("eval", a, None);
    m.input(&a.questions)?;
    let qs = load_qs(&a.questions)?;
    let known: BTreeSet<&str> = qs.iter().map(|q| q.qid.as_str()).collect();
    let mut results: Vec<(String, EvalResult)> = Vec::new();
    for spec in &a.runs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        if results.iter().any(|(n, _)| *n == name) {
            return Err(Failure::Usage(format!("system name {name:?} given twice")));
        }
        m.input(&path)?;
        let f = File::open(&path).map_err(io_ctx(&path))?;
        let runs = read_run(BufReader::new(f)).map_err(ctx(path.display()))?;
        if let Some(extra) = runs.keys().find(|q| !known.contains(q.as_str())) {
            return Err(Failure::Data(format!(
                "{}: question {extra:?} is not in {}",
                path.display(),
                a.questions.display()
            )));
        }
        let res = evaluate(&runs, &qs).map_err(ctx(path.display()))?;
        results.push((name, res));
    }
    let hop: Option<BTreeMap<String, HopClass>> = if a.hop_split {
        let Some(cpath) = &a.corpus else {
            return Err(Failure::Usage("--hop-split needs --corpus".into()));
        };
        m.input(cpath)?;
        let corpus = load_corpus(cpath)?;
        Some(qs.iter().map(|q| (q.qid.clone(), classify_hop(q, &corpus))).collect())
    } else {
        None
    };
    let mut report = Report::build(&results, hop.as_ref());
    if a.reference {
        report = report.with_reference();
    }
    let files = report_files(&report, &a.out, &a.format)?;
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let mut at = a.out.file_name().unwrap_or_default().to_os_string();
    at.push(".manifest.json");
    finish(&mut m, &refs, a.out.with_file_name(at))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Res {
    let mut m = RunManifest::new("run", a, Some(a.train.seed));
    let cpath = a.data.join(CORPUS_FILE);
    let lpath = a.data.join(LINKS_FILE);
    let qpath = a.data.join(QUESTIONS_FILE);
    for p in [&cpath, &lpath, &qpath] {
        m.input(p)?;
    }
    let corpus = load_corpus(&cpath)?;
    let f = File::open(&lpath).map_err(io_ctx(&lpath))?;
    let links = read_links(BufReader::new(f)).map_err(ctx(format!("links {}", lpath.display())))?;
    let qs = load_qs(&qpath)?;
    let cfg = ExperimentConfig {
        hop: HopConfig {
            initial_k: a.initial_k,
            ..HopConfig::default()
        },
        pointwise_initial_k: a.pointwise_initial_k,
        train: a.train.config(),
        exclusion_top_n: a.exclusion_top_n,
        k: a.k,
        systems: a.systems.clone(),
        ..ExperimentConfig::default()
    };
    m.resolve("experiment", &cfg);
    let out = run_experiment(&corpus, &links, &qs, &cfg).map_err(ctx("experiment"))?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (system, runs) in &out.runs {
        let p = a.out.join("runs").join(format!("{system}.jsonl"));
        write_file(&p, |w| write_run(runs, w))?;
        written.push(p);
    }
    for (system, (model, log)) in &out.models {
        let p = a.out.join("models").join(format!("{system}.json"));
        write_file(&p, |w| w.write_all(model.to_json().as_bytes()))?;
        written.push(p);
        let p = a.out.join("models").join(format!("{system}.log.csv"));
        write_file(&p, |w| log.write_csv(w))?;
        written.push(p);
    }
    let p = a.out.join("alias.json");
    write_file(&p, |w| w.write_all(out.alias.to_json().as_bytes()))?;
    written.push(p);
    let report = if a.reference { out.report.clone().with_reference() } else { out.report.clone() };
    written.extend(report_files(&report, &a.out.join("report"), &[Format::Csv, Format::Json, Format::Md])?);
    let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    finish(&mut m, &refs, a.out.join("run.manifest.json"))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn dispatch(cli: &Cli) -> Res {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a, false),
        Command::Tag(a) => cmd_ingest(a, true),
        Command::Index(a) => cmd_index(a),
        Command::Alias(a) => cmd_alias(a),
        Command::Chains(a) => cmd_chains(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a),
    }
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("hoprank: error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hoprank: error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
