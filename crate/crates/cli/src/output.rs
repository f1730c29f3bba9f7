use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use dynorank::trace_store::write_atomic;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_atomic(path, |w| w.write_all(body.as_bytes()))?;
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Input(format!("cannot create {}: {e}", path.display())))
}

/// Maps spec ids to distinct file stems.
pub fn file_stems(ids: &[&str]) -> Result<Vec<String>, Failure> {
    let stems: Vec<String> = ids
        .iter()
        .map(|id| {
            id.chars()
                .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
                .collect()
        })
        .collect();
    let mut seen = BTreeMap::new();
    for (stem, id) in stems.iter().zip(ids) {
        if let Some(prev) = seen.insert(stem.as_str(), id) {
            return Err(Failure::Input(format!(
                "spec ids {prev:?} and {id:?} map to the same file name {stem:?}"
            )));
        }
    }
    Ok(stems)
}

/// Reads a score vector keyed by id. Accepts a `ranking.json` written by
/// `rank`, an object with a `scores` map, a plain `{id: number}` object or
/// a bare array of numbers.
pub fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)?;
    let bad = || Failure::Input(format!("{}: not a recognised score file", path.display()));
    let number = |v: &Value| v.as_f64().ok_or_else(bad);
    let mut out = BTreeMap::new();
    if let Some(entries) = v.get("entries").and_then(Value::as_array) {
        for e in entries {
            let id = e.get("spec_id").and_then(Value::as_str).ok_or_else(bad)?;
            out.insert(id.to_string(), number(e.get("mean_mmd").ok_or_else(bad)?)?);
        }
    } else if let Some(map) = v.get("scores").and_then(Value::as_object).or(v.as_object()) {
        for (k, x) in map {
            out.insert(k.clone(), number(x)?);
        }
    } else if let Some(arr) = v.as_array() {
        for (i, x) in arr.iter().enumerate() {
            out.insert(format!("{i:08}"), number(x)?);
        }
    } else {
        return Err(bad());
    }
    Ok(out)
}

pub fn relative(base: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}
