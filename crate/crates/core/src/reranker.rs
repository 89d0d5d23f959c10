//! Chain scorer: a two-layer ReLU network over query-aware passage vectors,
//! trained with binary cross-entropy.
//!
//! Three heads share the network code and differ only in their input:
//! the chain head sees `[d; e]`, the entity-only ablation sees `e`, and the
//! pointwise baseline sees a single passage vector.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chains::{Chain, ChainSet};
use crate::corpus::{Corpus, Passage};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::index::RankedList;

pub const MODEL_VERSION: u32 = 1;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p = sigmoid(logit)`, evaluated
/// without forming `p`.
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub input: usize,
    pub hidden: usize,
    /// Row-major `hidden x input`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Gradients with the same shapes as [`FfnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FfnGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl FfnGrads {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + 2 * self.b1.len() + 1);
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    fn scale(&mut self, s: f64) {
        self.w1.iter_mut().for_each(|g| *g *= s);
        self.b1.iter_mut().for_each(|g| *g *= s);
        self.w2.iter_mut().for_each(|g| *g *= s);
        self.b2 *= s;
    }
}

impl FfnParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init_uniform<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let a1 = 1.0 / (input as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let mut draw = |a: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-a..=a)).collect() };
        let w1 = draw(a1, input * hidden);
        let b1 = draw(a1, hidden);
        let w2 = draw(a2, hidden);
        let b2 = draw(a2, 1)[0];
        Self {
            input,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
            .all(|x| x.is_finite())
    }

    fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        self.w1
            .chunks_exact(self.input)
            .zip(&self.b1)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    /// `w2 . relu(W1 x + b1) + b2`
    pub fn forward(&self, x: &[f64]) -> f64 {
        self.pre_activations(x)
            .iter()
            .zip(&self.w2)
            .map(|(z, w)| w * z.max(0.0))
            .sum::<f64>()
            + self.b2
    }

    /// Adds the gradient of `bce(forward(x), y)` into `grads` and returns the loss.
    fn accumulate(&self, x: &[f64], y: f64, grads: &mut FfnGrads) -> f64 {
        let z = self.pre_activations(x);
        let logit: f64 = z
            .iter()
            .zip(&self.w2)
            .map(|(z, w)| w * z.max(0.0))
            .sum::<f64>()
            + self.b2;
        let dlogit = sigmoid(logit) - y;
        grads.b2 += dlogit;
        for (j, &zj) in z.iter().enumerate() {
            grads.w2[j] += dlogit * zj.max(0.0);
            if zj > 0.0 {
                let dz = dlogit * self.w2[j];
                grads.b1[j] += dz;
                let row = &mut grads.w1[j * self.input..(j + 1) * self.input];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dz * xi;
                }
            }
        }
        bce_with_logit(logit, y)
    }

    /// Mean BCE and its gradient over `(x, y)` pairs.
    pub fn loss_and_grad<'a>(&self, batch: impl IntoIterator<Item = (&'a [f64], f64)>) -> (f64, FfnGrads) {
        let mut grads = FfnGrads::zeros(self.input, self.hidden);
        let mut loss = 0.0;
        let mut n = 0usize;
        for (x, y) in batch {
            loss += self.accumulate(x, y, &mut grads);
            n += 1;
        }
        if n > 0 {
            grads.scale(1.0 / n as f64);
            loss /= n as f64;
        }
        (loss, grads)
    }

    pub fn mean_loss<'a>(&self, batch: impl IntoIterator<Item = (&'a [f64], f64)>) -> f64 {
        let (sum, n) = batch
            .into_iter()
            .fold((0.0, 0usize), |(s, n), (x, y)| (s + bce_with_logit(self.forward(x), y), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (n1, n2, n3) = (self.w1.len(), self.b1.len(), self.w2.len());
        if i < n1 {
            &mut self.w1[i]
        } else if i < n1 + n2 {
            &mut self.b1[i - n1]
        } else if i < n1 + n2 + n3 {
            &mut self.w2[i - n1 - n2]
        } else {
            &mut self.b2
        }
    }
}

/// Largest relative disagreement between the analytic gradient of the mean
/// BCE over `samples` and central finite differences with step `1e-5`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// parameters with a vanishing gradient from dividing round-off by zero.
pub fn gradient_check(model: &FfnParams, samples: &[(Vec<f64>, f64)]) -> f64 {
    const STEP: f64 = 1e-5;
    let batch = || samples.iter().map(|(x, y)| (x.as_slice(), *y));
    let analytic = model.loss_and_grad(batch()).1.flat();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.into_iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + STEP;
        let up = probe.mean_loss(batch());
        *probe.param_mut(i) = orig - STEP;
        let down = probe.mean_loss(batch());
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Which representation feeds the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// `[d; e]` for a chain `(D, E)`.
    Chain,
    /// `e` only: the final passage of the chain.
    EntityOnly,
    /// One passage scored on its own.
    Pointwise,
}

impl Head {
    pub fn input_dim(self, encoder_dim: usize) -> usize {
        match self {
            Head::Chain => 2 * encoder_dim,
            Head::EntityOnly | Head::Pointwise => encoder_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankModel {
    pub version: u32,
    pub head: Head,
    pub encoder: String,
    pub params: FfnParams,
}

impl RerankModel {
    pub fn new(head: Head, encoder: &dyn Encoder, params: FfnParams) -> Self {
        Self {
            version: MODEL_VERSION,
            head,
            encoder: encoder.fingerprint(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: RerankModel = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {}", m.version)));
        }
        let p = &m.params;
        if p.w1.len() != p.input * p.hidden || p.b1.len() != p.hidden || p.w2.len() != p.hidden {
            return Err(Error::ModelFormat("weight shapes do not match dimensions".into()));
        }
        if !p.is_finite() {
            return Err(Error::ModelFormat("non-finite weight".into()));
        }
        Ok(m)
    }

    /// Fails unless this model was trained on `encoder`'s representation.
    pub fn check_encoder(&self, encoder: &dyn Encoder) -> Result<()> {
        let want = self.head.input_dim(encoder.dim());
        if self.params.input != want {
            return Err(Error::ModelFormat(format!(
                "model input {} but encoder gives {want}",
                self.params.input
            )));
        }
        if self.encoder != encoder.fingerprint() {
            return Err(Error::ModelFormat(format!(
                "model trained on encoder {:?}, running with {:?}",
                self.encoder,
                encoder.fingerprint()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainScore {
    pub chain: Chain,
    pub logit: f64,
    pub probability: f64,
}

impl ChainScore {
    fn new(chain: Chain, logit: f64) -> Self {
        Self {
            chain,
            logit,
            probability: sigmoid(logit),
        }
    }
}

/// Encodes each distinct passage once per query.
pub struct ReprCache<'e> {
    encoder: &'e dyn Encoder,
    query: String,
    vectors: HashMap<String, Vec<f64>>,
}

impl<'e> ReprCache<'e> {
    pub fn new(encoder: &'e dyn Encoder, query: &str) -> Self {
        Self {
            encoder,
            query: query.to_string(),
            vectors: HashMap::new(),
        }
    }

    /// Encodes every passage in `ids` not yet cached, in one batch.
    pub fn fill<'a>(&mut self, corpus: &Corpus, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut missing: Vec<&Passage> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for id in ids {
            if !self.vectors.contains_key(id) && seen.insert(id) {
                missing.push(corpus.require(id)?);
            }
        }
        let reprs = self.encoder.encode_batch(&self.query, &missing)?;
        for (p, r) in missing.into_iter().zip(reprs) {
            self.vectors.insert(p.id.clone(), r.v);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }
}

/// Network input for a chain under `head`. Every passage of the chain must
/// already be in `cache`.
pub fn chain_input(head: Head, chain: &Chain, cache: &ReprCache<'_>) -> Vec<f64> {
    let e = cache.get(&chain.last).expect("last passage encoded");
    match head {
        Head::Chain => {
            let d = cache.get(&chain.first).expect("first passage encoded");
            let mut x = Vec::with_capacity(d.len() + e.len());
            x.extend_from_slice(d);
            x.extend_from_slice(e);
            x
        }
        Head::EntityOnly | Head::Pointwise => e.to_vec(),
    }
}

/// Scores every chain with `model`, encoding each passage once.
pub fn score_chains(
    model: &RerankModel,
    encoder: &dyn Encoder,
    query: &str,
    chains: &[Chain],
    corpus: &Corpus,
) -> Result<Vec<ChainScore>> {
    let mut cache = ReprCache::new(encoder, query);
    cache.fill(
        corpus,
        chains
            .iter()
            .flat_map(|c| [c.first.as_str(), c.last.as_str()]),
    )?;
    Ok(chains
        .iter()
        .map(|c| {
            let logit = model.params.forward(&chain_input(model.head, c, &cache));
            ChainScore::new(c.clone(), logit)
        })
        .collect())
}

pub fn score_chain(
    model: &RerankModel,
    encoder: &dyn Encoder,
    query: &str,
    chain: &Chain,
    corpus: &Corpus,
) -> Result<ChainScore> {
    Ok(score_chains(model, encoder, query, std::slice::from_ref(chain), corpus)?.remove(0))
}

/// Entity-only ablation: the score depends on `chain.last` alone.
pub fn score_entity_only(
    model: &RerankModel,
    encoder: &dyn Encoder,
    query: &str,
    chain: &Chain,
    corpus: &Corpus,
) -> Result<ChainScore> {
    let model = RerankModel {
        head: Head::EntityOnly,
        ..model.clone()
    };
    score_chain(&model, encoder, query, chain, corpus)
}

pub fn score_pointwise(
    model: &RerankModel,
    encoder: &dyn Encoder,
    query: &str,
    passage: &Passage,
) -> Result<ChainScore> {
    let v = encoder.encode(query, passage)?.v;
    Ok(ChainScore::new(
        Chain::self_link(&passage.id),
        model.params.forward(&v),
    ))
}

/// Re-ranks `initial` with a pointwise model.
pub fn rerank_pointwise(
    model: &RerankModel,
    encoder: &dyn Encoder,
    query: &str,
    initial: &RankedList,
    corpus: &Corpus,
    k: usize,
) -> Result<RankedList> {
    let passages = initial
        .ids()
        .map(|id| corpus.require(id))
        .collect::<Result<Vec<_>>>()?;
    let reprs = encoder.encode_batch(query, &passages)?;
    let scores = passages
        .iter()
        .zip(reprs)
        .map(|(p, r)| (p.id.clone(), sigmoid(model.params.forward(&r.v))));
    Ok(RankedList::from_scores(scores, k))
}

/// Each passage ending a chain takes the highest probability among the
/// chains ending at it.
pub fn aggregate_max(scores: &[ChainScore], k: usize) -> RankedList {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for s in scores {
        let e = best.entry(s.chain.last.as_str()).or_insert(f64::NEG_INFINITY);
        *e = e.max(s.probability);
    }
    RankedList::from_scores(best.into_iter().map(|(id, p)| (id.to_string(), p)), k)
}

pub fn rank_passages(
    model: &RerankModel,
    encoder: &dyn Encoder,
    query: &str,
    chain_set: &ChainSet,
    corpus: &Corpus,
    k: usize,
) -> Result<RankedList> {
    let scores = score_chains(model, encoder, query, &chain_set.chains, corpus)?;
    Ok(aggregate_max(&scores, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives kept per positive within each question; 0 keeps all.
    pub neg_per_pos: usize,
    pub hidden: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 32,
            neg_per_pos: 10,
            hidden: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Question the sample came from; negatives are subsampled per group.
    pub group: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.y > 0.5).count()
    }

    fn pairs(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.samples.iter().map(|s| (s.x.as_slice(), s.y))
    }
}

/// Per-epoch mean BCE. Entry 0 is the loss over the full dataset before any
/// update; entry `n` is the mean pre-update batch loss during epoch `n`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,mean_loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut FfnParams, grads: &FfnGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, g) in grads.flat().into_iter().enumerate() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            *params.param_mut(i) -= update;
        }
    }
}

fn sgd_step(params: &mut FfnParams, grads: &FfnGrads, lr: f64) {
    for (i, g) in grads.flat().into_iter().enumerate() {
        *params.param_mut(i) -= lr * g;
    }
}

/// Indices of the samples used in one epoch: every positive, plus up to
/// `neg_per_pos` negatives per positive from the same group.
fn epoch_indices<R: Rng>(by_group: &[(Vec<usize>, Vec<usize>)], neg_per_pos: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    for (pos, neg) in by_group {
        out.extend(pos);
        if neg_per_pos == 0 {
            out.extend(neg);
        } else {
            let want = (neg_per_pos * pos.len()).min(neg.len());
            out.extend(neg.choose_multiple(rng, want));
        }
    }
    out
}

/// Trains a fresh network on `dataset`. Fully determined by `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(FfnParams, TrainLog)> {
    let input = dataset
        .input_dim()
        .ok_or_else(|| Error::DegenerateTrainingSet("no examples".into()))?;
    let positives = dataset.positives();
    if positives == 0 {
        return Err(Error::DegenerateTrainingSet("no positive examples".into()));
    }
    if positives == dataset.samples.len() {
        return Err(Error::DegenerateTrainingSet("no negative examples".into()));
    }
    if dataset.samples.iter().any(|s| s.x.len() != input) {
        return Err(Error::DegenerateTrainingSet("inconsistent input widths".into()));
    }
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 || config.batch_size == 0 || config.hidden == 0 {
        return Err(Error::InvalidConfig(
            "training needs learning_rate > 0, batch_size >= 1 and hidden >= 1".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = FfnParams::init_uniform(input, config.hidden, &mut rng);
    train_from(dataset, config, params, &mut rng)
}

/// Continues training from `params`.
pub fn train_from<R: Rng>(
    dataset: &Dataset,
    config: &TrainConfig,
    mut params: FfnParams,
    rng: &mut R,
) -> Result<(FfnParams, TrainLog)> {
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let g = groups.entry(s.group).or_default();
        if s.y > 0.5 {
            g.0.push(i);
        } else {
            g.1.push(i);
        }
    }
    let by_group: Vec<_> = groups.into_values().collect();

    let mut log = TrainLog {
        losses: vec![params.mean_loss(dataset.pairs())],
    };
    let mut adam = Adam::new(params.num_params());

    for _ in 0..config.epochs {
        let mut idx = epoch_indices(&by_group, config.neg_per_pos, rng);
        idx.shuffle(rng);
        let mut total = 0.0;
        for batch in idx.chunks(config.batch_size) {
            let (loss, grads) = params.loss_and_grad(
                batch
                    .iter()
                    .map(|&i| (dataset.samples[i].x.as_slice(), dataset.samples[i].y)),
            );
            total += loss * batch.len() as f64;
            match config.optimizer {
                Optimizer::Adam => adam.step(&mut params, &grads, config.learning_rate),
                Optimizer::Sgd => sgd_step(&mut params, &grads, config.learning_rate),
            }
        }
        log.losses.push(if idx.is_empty() {
            0.0
        } else {
            total / idx.len() as f64
        });
    }
    Ok((params, log))
}
