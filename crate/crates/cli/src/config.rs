//! `--config FILE`: `key = value` lines whose keys are long flag names.
//! Flags given on the command line win over the file.

use std::ffi::OsString;
use std::fs;

/// Finds `--config PATH` or `--config=PATH` in `args`.
fn config_path(args: &[OsString]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(|p| p.to_string_lossy().into_owned());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn given(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_eq = format!("--{key}=");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&with_eq)
    })
}

/// Parses the file into `(key, value)` pairs. `#` starts a comment line;
/// values may be quoted.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Appends the config file's settings to `args` as flags, skipping any key
/// already present. `key = true` becomes a bare switch and `key = false` is
/// dropped. A key may repeat for flags that take several values.
pub fn merge(mut args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("config {path}: {e}"))?;
    let pairs = parse(&text).map_err(|e| format!("config {path}: {e}"))?;
    let explicit: Vec<OsString> = args.clone();
    for (k, v) in pairs {
        if k == "config" || given(&explicit, &k) {
            continue;
        }
        match v.as_str() {
            "false" => {}
            "true" => args.push(format!("--{k}").into()),
            _ => {
                args.push(format!("--{k}").into());
                args.push(v.into());
            }
        }
    }
    Ok(args)
}
