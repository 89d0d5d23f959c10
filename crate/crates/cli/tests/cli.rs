use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};

fn hoprank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoprank"))
        .current_dir(dir)
        .args(args)
        .env_remove("HOPRANK_ENCODER_ADDR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hoprank(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = hoprank(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

const SMALL: &[&str] = &[
    "synth", "--out", "b", "--entities", "150", "--distractors", "150", "--questions", "30", "--vocab", "500",
];

/// Small bundle plus index and alias table in a fresh directory.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    ok(d, &["index", "--corpus", "b/corpus.jsonl", "--out", "idx.bin"]);
    ok(d, &["alias", "--corpus", "b/corpus.jsonl", "--links", "b/links.jsonl", "--out", "alias.json"]);
    dir
}

const BASE: &[&str] = &["--corpus", "b/corpus.jsonl", "--index", "idx.bin", "--questions", "b/questions.jsonl"];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(BASE).chain(tail).copied().collect()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn every_subcommand_has_help_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth", "ingest", "tag", "index", "alias", "chains", "retrieve", "train", "eval", "run"] {
        let help = ok(dir.path(), &[sub, "--help"]);
        assert!(help.contains("--out"), "{sub}");
        if sub != "ingest" && sub != "tag" && sub != "index" {
            assert!(help.contains("[default:"), "{sub} help lists no defaults");
        }
    }
    let help = ok(dir.path(), &["retrieve", "--help"]);
    for flag in ["--k1", "--b", "--mu", "--alpha", "--beta", "--lambda", "--fb-docs", "--fb-terms", "--initial-k", "--ablation"] {
        assert!(help.contains(flag), "retrieve --help lacks {flag}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fails(dir.path(), &["retrieve", "--mode", "nope"], 1);
    fails(dir.path(), &["frobnicate"], 1);
    let err = fails(dir.path(), &["synth", "--out", "x", "--vocab", "10"], 1);
    assert!(err.lines().count() == 1 && err.contains("vocab"), "{err}");
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SMALL);
    let first = snapshot(&dir.path().join("b"));
    fs::remove_dir_all(dir.path().join("b")).unwrap();
    ok(dir.path(), SMALL);
    assert_eq!(first, snapshot(&dir.path().join("b")));
    assert!(first.contains_key(Path::new("run.manifest.json")));
}

#[test]
fn ingest_reports_the_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines: Vec<String> = (0..9)
        .map(|i| json!({"id": format!("p{i}"), "title": "T", "text": "some text"}).to_string())
        .collect();
    lines[6] = "{\"id\": \"p6\", \"title\": ".into();
    fs::write(dir.path().join("c.jsonl"), lines.join("\n")).unwrap();
    let err = fails(dir.path(), &["ingest", "--corpus", "c.jsonl", "--out", "corpus.bin"], 2);
    assert!(err.contains("line 7"), "{err}");
    assert_eq!(err.lines().count(), 1);

    lines[6] = json!({"id": "p6", "title": "T", "text": "x"}).to_string();
    fs::write(dir.path().join("c.jsonl"), lines.join("\n")).unwrap();
    ok(dir.path(), &["ingest", "--corpus", "c.jsonl", "--out", "corpus.bin"]);
    assert!(dir.path().join("corpus.bin").exists());
    assert!(dir.path().join("corpus.bin.manifest.json").exists());
}

/// BM25 straight from the formula over whitespace tokens.
fn bm25_oracle(docs: &[(&str, &str)], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs
        .iter()
        .map(|(_, t)| t.split_whitespace().map(str::to_lowercase).collect())
        .collect();
    let n = toks.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .zip(&toks)
        .map(|((id, _), d)| {
            let s: f64 = query
                .split_whitespace()
                .map(|q| {
                    let tf = d.iter().filter(|t| *t == q).count() as f64;
                    let df = toks.iter().filter(|d| d.iter().any(|t| t == q)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl))
                })
                .sum();
            (id.to_string(), s)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

#[test]
fn bm25_retrieval_matches_the_formula() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let docs = [
        ("a", "river bank flood river"),
        ("b", "bank loan rate"),
        ("c", "the river delta"),
        ("d", "flood insurance bank bank bank"),
        ("e", "mountain pass"),
    ];
    let corpus: Vec<String> = docs
        .iter()
        .map(|(id, t)| json!({"id": id, "title": id, "text": t}).to_string())
        .collect();
    fs::write(d.join("c.jsonl"), corpus.join("\n")).unwrap();
    let q = "river bank flood";
    fs::write(
        d.join("q.jsonl"),
        json!({"qid": "q1", "question": q, "answer": "", "supporting_ids": ["a"]}).to_string(),
    )
    .unwrap();
    ok(d, &["index", "--corpus", "c.jsonl", "--out", "i.bin"]);
    ok(
        d,
        &[
            "retrieve", "--mode", "bm25", "--corpus", "c.jsonl", "--index", "i.bin", "--questions", "q.jsonl",
            "--out", "r.jsonl", "-k", "3", "--k1", "0.9", "--b", "0.4",
        ],
    );
    let run = read_jsonl(&d.join("r.jsonl"));
    let got: Vec<(String, f64)> = run[0]["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["id"].as_str().unwrap().to_string(), s["score"].as_f64().unwrap()))
        .collect();
    let want = bm25_oracle(&docs, q, 0.9, 0.4);
    assert_eq!(got.len(), 3);
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.0, w.0);
        assert!((g.1 - w.1).abs() < 1e-9);
    }
}

#[test]
fn missing_artifacts_name_the_flag() {
    let dir = prepared();
    let d = dir.path();
    let err = fails(d, &with(&["retrieve", "--mode", "entity-hop", "--out", "r.jsonl", "--alias", "alias.json"], &[]), 2);
    assert!(err.contains("--model") && err.contains("hoprank train"), "{err}");
    let args = ["retrieve", "--mode", "bm25", "--corpus", "b/corpus.jsonl", "--questions", "b/questions.jsonl", "--out", "r.jsonl"];
    let err = fails(d, &args, 2);
    assert!(err.contains("--index") && err.contains("hoprank index"), "{err}");
}

#[test]
fn training_is_seeded_and_modes_dispatch_on_the_head() {
    let dir = prepared();
    let d = dir.path();
    let train = |out: &str, head: &str| {
        ok(d, &with(&["train", "--alias", "alias.json", "--out", out, "--head", head, "--seed", "7", "--epochs", "20"], &[]));
    };
    train("m1.json", "chain");
    train("m2.json", "chain");
    assert_eq!(fs::read(d.join("m1.json")).unwrap(), fs::read(d.join("m2.json")).unwrap());
    assert_eq!(fs::read(d.join("m1.json.log.csv")).unwrap(), fs::read(d.join("m2.json.log.csv")).unwrap());
    let log = fs::read_to_string(d.join("m1.json.log.csv")).unwrap();
    assert!(log.starts_with("epoch,mean_loss\n0,"));
    assert_eq!(log.lines().count(), 22);

    train("eo.json", "entity-only");
    train("pw.json", "pointwise");
    let hop = |model: &str, extra: &[&str]| -> Output {
        let mut args = vec!["retrieve", "--mode", "entity-hop", "--alias", "alias.json", "--model", model, "--out", "r.jsonl"];
        args.extend_from_slice(extra);
        hoprank(d, &with(&args, &[]))
    };
    assert!(hop("m1.json", &[]).status.success());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("r.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["initial_k"], 25);
    assert!(hop("eo.json", &["--ablation", "entity-only"]).status.success());
    assert_eq!(hop("m1.json", &["--ablation", "entity-only"]).status.code(), Some(1));
    assert_eq!(hop("eo.json", &[]).status.code(), Some(1));

    ok(d, &with(&["retrieve", "--mode", "pointwise", "--model", "pw.json", "--out", "p.jsonl"], &[]));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("p.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["initial_k"], 200);
}

#[test]
fn training_without_positives_is_degenerate() {
    let dir = prepared();
    let d = dir.path();
    let qs: Vec<String> = read_jsonl(&d.join("b/questions.jsonl"))
        .into_iter()
        .map(|mut q| {
            q["supporting_ids"] = json!(["nowhere"]);
            q.to_string()
        })
        .collect();
    fs::write(d.join("bad.jsonl"), qs.join("\n")).unwrap();
    let err = fails(
        d,
        &[
            "train", "--corpus", "b/corpus.jsonl", "--index", "idx.bin", "--alias", "alias.json", "--questions",
            "bad.jsonl", "--out", "m.json",
        ],
        2,
    );
    assert!(err.contains("degenerate training set"), "{err}");
}

#[test]
fn eval_reports_rows_in_order_and_checks_qids() {
    let dir = prepared();
    let d = dir.path();
    let perfect: Vec<String> = read_jsonl(&d.join("b/questions.jsonl"))
        .iter()
        .map(|q| {
            let ranking: Vec<Value> = q["supporting_ids"]
                .as_array()
                .unwrap()
                .iter()
                .enumerate()
                .map(|(i, id)| json!({"id": id, "score": -(i as f64)}))
                .collect();
            json!({"qid": q["qid"], "ranking": ranking}).to_string()
        })
        .collect();
    fs::write(d.join("perfect.jsonl"), perfect.join("\n")).unwrap();
    ok(d, &with(&["retrieve", "--mode", "bm25", "--out", "bm25.jsonl"], &[]));
    let md = ok(
        d,
        &[
            "eval", "--questions", "b/questions.jsonl", "--run", "oracle=perfect.jsonl", "--run", "bm25.jsonl",
            "--out", "rep", "--hop-split", "--corpus", "b/corpus.jsonl", "--reference",
        ],
    );
    assert!(md.contains("| oracle | all | measured | 1.000 | 1.000 | 1.000 | 1.000 | 1.000 |"), "{md}");
    let csv = fs::read_to_string(d.join("rep.csv")).unwrap();
    let systems: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(&systems[..2], ["oracle", "bm25"]);
    assert!(csv.contains(",multi_hop,measured,"));
    assert!(csv.contains("published, full-scale"));
    assert!(d.join("rep.json").exists() && d.join("rep.md").exists());

    fs::write(d.join("extra.jsonl"), format!("{}\n{}", perfect.join("\n"), json!({"qid": "zzz", "ranking": []}))).unwrap();
    let err = fails(d, &["eval", "--questions", "b/questions.jsonl", "--run", "extra.jsonl", "--out", "x"], 2);
    assert!(err.contains("zzz"), "{err}");
    fs::write(d.join("short.jsonl"), perfect[1..].join("\n")).unwrap();
    let err = fails(d, &["eval", "--questions", "b/questions.jsonl", "--run", "short.jsonl", "--out", "x"], 2);
    assert!(err.contains("no ranking for question"), "{err}");
}

#[test]
fn alias_exclusion_leaves_no_excluded_target() {
    let dir = prepared();
    let d = dir.path();
    ok(
        d,
        &[
            "alias", "--corpus", "b/corpus.jsonl", "--links", "b/links.jsonl", "--out", "ex.json", "--exclude-from",
            "b/questions.jsonl", "--top-n", "40", "--exclusion-out", "ex.txt",
        ],
    );
    let excluded: BTreeSet<String> = fs::read_to_string(d.join("ex.txt")).unwrap().lines().map(String::from).collect();
    assert!(!excluded.is_empty());
    let table: BTreeMap<String, Vec<String>> = serde_json::from_str(&fs::read_to_string(d.join("ex.json")).unwrap()).unwrap();
    assert!(table.values().flatten().all(|id| !excluded.contains(id)));
}

#[test]
fn config_file_fills_in_and_flags_win() {
    let dir = prepared();
    let d = dir.path();
    fs::write(d.join("run.conf"), "# retrieval\nmode = bm25\nk = 3\nk1 = 0.5\n").unwrap();
    ok(d, &with(&["retrieve", "--config", "run.conf", "--out", "r.jsonl", "--k1", "2.0"], &[]));
    let run = read_jsonl(&d.join("r.jsonl"));
    assert!(run.iter().all(|l| l["ranking"].as_array().unwrap().len() <= 3));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("r.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["bm25"]["k1"], 2.0);
    assert_eq!(manifest["config"]["k"], 3);
}

#[test]
fn prf_expansions_can_be_dumped() {
    let dir = prepared();
    let d = dir.path();
    for mode in ["prf-rocchio", "prf-rm3"] {
        ok(d, &with(&["retrieve", "--mode", mode, "--out", "r.jsonl", "--dump-expansions", "x.jsonl", "--fb-terms", "5"], &[]));
        let lines = read_jsonl(&d.join("x.jsonl"));
        assert_eq!(lines.len(), 30);
        if mode == "prf-rm3" {
            for l in &lines {
                let total: f64 = l["weights"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn full_run_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    let args = ["run", "--data", "b", "--out", "out", "--epochs", "20", "--threads", "2"];
    let md = ok(d, &args);
    assert!(md.contains("| entity-hop | all | measured |"));
    let first = snapshot(&d.join("out"));
    fs::remove_dir_all(d.join("out")).unwrap();
    ok(d, &args);
    assert_eq!(first, snapshot(&d.join("out")));
    assert!(first.contains_key(Path::new("models/entity-hop.json")));
    assert!(first.contains_key(Path::new("report.csv")));
}

fn fake_service(dim: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            thread::spawn(move || {
                let mut out = stream.try_clone().unwrap();
                let vector = |q: &str, t: &str| -> Vec<f64> {
                    // a few crude overlap features, enough to train on
                    let qs: BTreeSet<String> = q.split(|c: char| !c.is_alphanumeric()).map(str::to_lowercase).collect();
                    let words: Vec<String> = t.split(|c: char| !c.is_alphanumeric()).map(str::to_lowercase).collect();
                    let hits = words.iter().filter(|w| qs.contains(*w)).count() as f64;
                    (0..dim).map(|i| (hits / (1.0 + i as f64)).tanh()).collect()
                };
                for line in BufReader::new(stream).lines() {
                    let Ok(line) = line else { break };
                    let req: Value = serde_json::from_str(&line).unwrap();
                    let q = req["query"].as_str().unwrap_or("");
                    let reply = match req["op"].as_str().unwrap() {
                        "hello" => json!({"op": "hello", "dim": dim}),
                        "encode" => json!({"op": "vec", "v": vector(q, req["text"].as_str().unwrap())}),
                        "encode_batch" => {
                            let vs: Vec<Vec<f64>> = req["texts"]
                                .as_array()
                                .unwrap()
                                .iter()
                                .map(|t| vector(q, t.as_str().unwrap()))
                                .collect();
                            json!({"op": "vecs", "vs": vs})
                        }
                        op => json!({"op": "err", "msg": format!("unknown op {op}")}),
                    };
                    if writeln!(out, "{reply}").is_err() {
                        break;
                    }
                }
            });
        }
    });
    addr
}

#[test]
fn remote_encoder_runs_end_to_end() {
    let dir = prepared();
    let d = dir.path();
    let addr = fake_service(4);
    let remote = ["--encoder", "remote", "--encoder-addr", addr.as_str()];
    ok(d, &with(&["train", "--alias", "alias.json", "--out", "m.json", "--epochs", "10"], &remote));
    ok(d, &with(&["retrieve", "--mode", "entity-hop", "--alias", "alias.json", "--model", "m.json", "--out", "r.jsonl"], &remote));
    let md = ok(d, &["eval", "--questions", "b/questions.jsonl", "--run", "hop=r.jsonl", "--out", "rep"]);
    assert!(md.contains("| hop | all | measured |"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("r.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["resolved_encoder_addr"], addr.as_str());

    // a lexical model cannot run on remote vectors
    ok(d, &with(&["train", "--alias", "alias.json", "--out", "lex.json", "--epochs", "5"], &[]));
    let err = fails(d, &with(&["retrieve", "--mode", "entity-hop", "--alias", "alias.json", "--model", "lex.json", "--out", "r.jsonl"], &remote), 2);
    assert!(err.contains("encoder"), "{err}");

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dead = format!("127.0.0.1:{port}");
    let err = fails(
        d,
        &with(&["retrieve", "--mode", "entity-hop", "--alias", "alias.json", "--model", "m.json", "--out", "r.jsonl"], &["--encoder", "remote", "--encoder-addr", &dead]),
        3,
    );
    assert!(err.contains(&dead), "{err}");
}
