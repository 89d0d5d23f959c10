//! Query-aware passage representations.
//!
//! An [`Encoder`] maps `(query, passage)` to a fixed-width vector. The
//! built-in [`LexicalEncoder`] derives eight retrieval features from the
//! index; [`RemoteEncoder`] talks to an external embedding service over
//! newline-delimited JSON on TCP:
//!
//! ```text
//! -> {"op":"hello"}                                  <- {"op":"hello","dim":D}
//! -> {"op":"encode","query":q,"text":t}              <- {"op":"vec","v":[..D]}
//! -> {"op":"encode_batch","query":q,"texts":[t..]}   <- {"op":"vecs","vs":[[..D]..]}
//!                                        any error:  <- {"op":"err","msg":m}
//! ```

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Passage, TokenizerConfig};
use crate::error::{Error, Result};
use crate::index::{cosine, term_counts, Bm25Params, DirichletParams, InvertedIndex};

pub const LEXICAL_DIM: usize = 8;

/// Environment variable that overrides the remote encoder address.
pub const ENDPOINT_ENV: &str = "HOPRANK_ENCODER_ADDR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Lexical,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAwareRepr {
    pub v: Vec<f64>,
    pub provider: Provider,
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn provider(&self) -> Provider;

    /// Identifies the representation a model was trained on.
    fn fingerprint(&self) -> String;

    fn encode(&self, query: &str, passage: &Passage) -> Result<QueryAwareRepr>;

    /// Element-wise identical to [`Encoder::encode`]; the first failure fails
    /// the batch and names its position.
    fn encode_batch(&self, query: &str, passages: &[&Passage]) -> Result<Vec<QueryAwareRepr>> {
        passages
            .iter()
            .enumerate()
            .map(|(index, p)| {
                self.encode(query, p).map_err(|e| Error::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// Eight lexical features, in order:
///
/// 1. fraction of distinct query terms present in the passage
/// 2. BM25 score `s` squashed to `s / (1 + s)`
/// 3. TF-IDF cosine between query and passage
/// 4. query likelihood per scored query term, as `exp(score / n)` (the
///    geometric-mean smoothed term probability)
/// 5. fraction of the passage's mentions sharing a term with the query
/// 6. `ln(1 + passage length)`
/// 7. fraction of distinct query bigrams present in the passage
/// 8. constant 1
pub struct LexicalEncoder<'a> {
    index: &'a InvertedIndex,
    tokenizer: TokenizerConfig,
    pub bm25: Bm25Params,
    pub dirichlet: DirichletParams,
    /// Disabled features are emitted as 0.
    pub mask: [bool; LEXICAL_DIM],
}

impl<'a> LexicalEncoder<'a> {
    pub fn new(index: &'a InvertedIndex, tokenizer: &TokenizerConfig) -> Self {
        Self {
            index,
            tokenizer: tokenizer.clone(),
            bm25: Bm25Params::default(),
            dirichlet: DirichletParams::default(),
            mask: [true; LEXICAL_DIM],
        }
    }

    pub fn features(&self, query: &str, passage: &Passage) -> [f64; LEXICAL_DIM] {
        let q = tokenize(query, &self.tokenizer);
        let qset: HashSet<&str> = q.iter().map(String::as_str).collect();
        let ptoks = tokenize(&passage.text, &self.tokenizer);
        let counts = term_counts(&passage.text, &self.tokenizer);

        let coverage = if qset.is_empty() {
            0.0
        } else {
            qset.iter().filter(|t| counts.0.contains_key(**t)).count() as f64 / qset.len() as f64
        };

        let bm25 = self.index.bm25_counts(&q, &counts, self.bm25);
        let bm25 = bm25 / (1.0 + bm25);

        let tfidf = cosine(
            &self.index.tfidf_text(query, &self.tokenizer),
            &self.index.tfidf_text(&passage.text, &self.tokenizer),
        );

        let ql = self.index.ql_counts(&q, &counts, self.dirichlet);
        let scored = q.len() - ql.skipped;
        let ql = if scored == 0 {
            0.0
        } else {
            (ql.score / scored as f64).exp()
        };

        let mention_overlap = if passage.mentions.is_empty() {
            0.0
        } else {
            passage
                .mentions
                .iter()
                .filter(|m| {
                    tokenize(&m.surface, &self.tokenizer)
                        .iter()
                        .any(|t| qset.contains(t.as_str()))
                })
                .count() as f64
                / passage.mentions.len() as f64
        };

        let length = (1.0 + ptoks.len() as f64).ln();

        let qbigrams: HashSet<(&str, &str)> = q
            .windows(2)
            .map(|w| (w[0].as_str(), w[1].as_str()))
            .collect();
        let bigrams = if qbigrams.is_empty() {
            0.0
        } else {
            let pbigrams: HashSet<(&str, &str)> = ptoks
                .windows(2)
                .map(|w| (w[0].as_str(), w[1].as_str()))
                .collect();
            qbigrams.iter().filter(|b| pbigrams.contains(*b)).count() as f64 / qbigrams.len() as f64
        };

        let mut f = [
            coverage,
            bm25,
            tfidf,
            ql,
            mention_overlap,
            length,
            bigrams,
            1.0,
        ];
        for (x, on) in f.iter_mut().zip(self.mask) {
            if !on {
                *x = 0.0;
            }
        }
        f
    }
}

impl Encoder for LexicalEncoder<'_> {
    fn dim(&self) -> usize {
        LEXICAL_DIM
    }

    fn provider(&self) -> Provider {
        Provider::Lexical
    }

    fn fingerprint(&self) -> String {
        let mask: String = self.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        format!(
            "lexical-v1 mask={mask} k1={} b={} mu={}",
            self.bm25.k1, self.bm25.b, self.dirichlet.mu
        )
    }

    fn encode(&self, query: &str, passage: &Passage) -> Result<QueryAwareRepr> {
        Ok(QueryAwareRepr {
            v: self.features(query, passage).to_vec(),
            provider: Provider::Lexical,
        })
    }
}

#[derive(Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request<'a> {
    Hello,
    Encode { query: &'a str, text: &'a str },
    EncodeBatch { query: &'a str, texts: Vec<&'a str> },
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Reply {
    Hello { dim: usize },
    Vec { v: Vec<f64> },
    Vecs { vs: Vec<Vec<f64>> },
    Err { msg: String },
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Client for the embedding service. Requests on one client are serialized;
/// open several clients for parallelism.
pub struct RemoteEncoder {
    endpoint: String,
    dim: usize,
    conn: Mutex<Connection>,
}

impl RemoteEncoder {
    /// Connects and performs the handshake. When `expected_dim` is given, a
    /// different advertised dimension is an error.
    pub fn connect(endpoint: &str, expected_dim: Option<usize>) -> Result<Self> {
        let fail = |cause: String| Error::Encoder {
            endpoint: endpoint.to_string(),
            cause,
        };
        let stream = TcpStream::connect(endpoint).map_err(|e| fail(format!("connect: {e}")))?;
        stream
            .set_read_timeout(Some(Duration::from_secs(120)))
            .map_err(|e| fail(e.to_string()))?;
        let writer = stream.try_clone().map_err(|e| fail(e.to_string()))?;
        let mut conn = Connection {
            reader: BufReader::new(stream),
            writer,
        };
        let dim = match roundtrip(endpoint, &mut conn, &Request::Hello)? {
            Reply::Hello { dim } => dim,
            other => return Err(fail(format!("unexpected handshake reply {}", reply_name(&other)))),
        };
        if dim == 0 {
            return Err(fail("service advertised dim 0".into()));
        }
        if let Some(want) = expected_dim {
            if want != dim {
                return Err(fail(format!("service dim {dim} does not match configured {want}")));
            }
        }
        Ok(Self {
            endpoint: endpoint.to_string(),
            dim,
            conn: Mutex::new(conn),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn fail(&self, cause: String) -> Error {
        Error::Encoder {
            endpoint: self.endpoint.clone(),
            cause,
        }
    }

    fn check(&self, v: Vec<f64>) -> Result<QueryAwareRepr> {
        if v.len() != self.dim {
            return Err(self.fail(format!("vector length {} != dim {}", v.len(), self.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.fail("non-finite vector entry".into()));
        }
        Ok(QueryAwareRepr {
            v,
            provider: Provider::Remote,
        })
    }

    fn call(&self, req: &Request<'_>) -> Result<Reply> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        roundtrip(&self.endpoint, &mut conn, req)
    }
}

fn reply_name(r: &Reply) -> &'static str {
    match r {
        Reply::Hello { .. } => "hello",
        Reply::Vec { .. } => "vec",
        Reply::Vecs { .. } => "vecs",
        Reply::Err { .. } => "err",
    }
}

fn roundtrip(endpoint: &str, conn: &mut Connection, req: &Request<'_>) -> Result<Reply> {
    let fail = |cause: String| Error::Encoder {
        endpoint: endpoint.to_string(),
        cause,
    };
    let mut line = serde_json::to_vec(req).map_err(|e| fail(e.to_string()))?;
    line.push(b'\n');
    conn.writer
        .write_all(&line)
        .and_then(|_| conn.writer.flush())
        .map_err(|e| fail(format!("send: {e}")))?;
    let mut buf = String::new();
    let n = conn
        .reader
        .read_line(&mut buf)
        .map_err(|e| fail(format!("receive: {e}")))?;
    if n == 0 {
        return Err(fail("connection closed".into()));
    }
    let reply: Reply =
        serde_json::from_str(buf.trim_end()).map_err(|e| fail(format!("bad reply: {e}")))?;
    if let Reply::Err { msg } = reply {
        return Err(fail(format!("service error: {msg}")));
    }
    Ok(reply)
}

impl Encoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn provider(&self) -> Provider {
        Provider::Remote
    }

    fn fingerprint(&self) -> String {
        format!("remote dim={}", self.dim)
    }

    fn encode(&self, query: &str, passage: &Passage) -> Result<QueryAwareRepr> {
        match self.call(&Request::Encode {
            query,
            text: &passage.text,
        })? {
            Reply::Vec { v } => self.check(v),
            other => Err(self.fail(format!("expected vec, got {}", reply_name(&other)))),
        }
    }

    fn encode_batch(&self, query: &str, passages: &[&Passage]) -> Result<Vec<QueryAwareRepr>> {
        if passages.is_empty() {
            return Ok(Vec::new());
        }
        let texts = passages.iter().map(|p| p.text.as_str()).collect();
        match self.call(&Request::EncodeBatch { query, texts })? {
            Reply::Vecs { vs } => {
                if vs.len() != passages.len() {
                    return Err(self.fail(format!(
                        "expected {} vectors, got {}",
                        passages.len(),
                        vs.len()
                    )));
                }
                vs.into_iter()
                    .enumerate()
                    .map(|(index, v)| {
                        self.check(v).map_err(|e| Error::Batch {
                            index,
                            source: Box::new(e),
                        })
                    })
                    .collect()
            }
            other => Err(self.fail(format!("expected vecs, got {}", reply_name(&other)))),
        }
    }
}
