use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_trace, TraceTensor};
use crate::error::{Error, Result};

/// One training run: realization `realization_id` of specification `spec_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec_id: String,
    pub realization_id: String,
    pub seed: i64,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, serde_json::Value>,
    /// Relative paths resolve against the manifest's directory.
    pub trace_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub runs: Vec<RunManifest>,
    pub trace_sample_ids: Vec<i64>,
}

impl EnsembleManifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        super::write_atomic(path.as_ref(), |w| std::io::Write::write_all(w, body.as_bytes()))
    }

    /// Spec ids in first-appearance order.
    pub fn spec_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for run in &self.runs {
            if !out.contains(&run.spec_id) {
                out.push(run.spec_id.clone());
            }
        }
        out
    }
}

/// A manifest inconsistency that makes the ensemble unusable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// `spec_id/realization_id` of every run involved; empty for
    /// ensemble-wide problems.
    pub runs: Vec<String>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.runs.is_empty() {
            write!(f, "{}: {}", self.field, self.message)
        } else {
            write!(f, "[{}] {}: {}", self.runs.join(", "), self.field, self.message)
        }
    }
}

fn run_label(run: &RunManifest) -> String {
    format!("{}/{}", run.spec_id, run.realization_id)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Checks every ensemble invariant, loading each trace to learn its shape.
///
/// Returns an empty list iff the ensemble is usable by the ranking pipeline.
pub fn validate_ensemble(manifest: &EnsembleManifest, base_dir: &Path) -> Vec<Violation> {
    inspect(manifest, base_dir).1
}

fn inspect(
    manifest: &EnsembleManifest,
    base_dir: &Path,
) -> (Vec<Option<TraceTensor>>, Vec<Violation>) {
    let mut violations = Vec::new();
    let mut push = |runs: Vec<String>, field: &str, message: String| {
        violations.push(Violation {
            runs,
            field: field.to_string(),
            message,
        })
    };

    if manifest.runs.is_empty() {
        push(vec![], "runs", "ensemble has no runs".into());
    }

    let ids = &manifest.trace_sample_ids;
    let mut seen_ids = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|&&i| !seen_ids.insert(i)) {
        push(vec![], "trace_sample_ids", format!("duplicate trace sample id {dup}"));
    }
    if ids.iter().any(|&i| i < 0) {
        push(vec![], "trace_sample_ids", "negative trace sample id".into());
    }

    let mut keys: HashMap<(&str, &str), usize> = HashMap::new();
    for (idx, run) in manifest.runs.iter().enumerate() {
        if run.spec_id.is_empty() || run.realization_id.is_empty() {
            push(vec![run_label(run)], "spec_id", "empty spec_id or realization_id".into());
        }
        if let Some(&first) = keys.get(&(run.spec_id.as_str(), run.realization_id.as_str())) {
            push(
                vec![run_label(&manifest.runs[first]), run_label(run)],
                "realization_id",
                format!("runs {first} and {idx} share (spec_id, realization_id)"),
            );
        } else {
            keys.insert((&run.spec_id, &run.realization_id), idx);
        }
        for (k, v) in &run.hyperparams {
            if v.is_array() || v.is_object() {
                push(vec![run_label(run)], "hyperparams", format!("{k:?} is not a scalar"));
            }
        }
    }

    let traces: Vec<Option<TraceTensor>> = manifest
        .runs
        .iter()
        .map(|run| match load_trace(resolve(base_dir, &run.trace_path)) {
            Ok(t) => Some(t),
            Err(e) => {
                push(vec![run_label(run)], "trace_path", e.to_string());
                None
            }
        })
        .collect();

    for (run, trace) in manifest.runs.iter().zip(&traces) {
        if let Some(t) = trace {
            if t.m_samples() != ids.len() {
                push(
                    vec![run_label(run)],
                    "m_samples",
                    format!(
                        "trace has {} samples but {} trace_sample_ids are declared",
                        t.m_samples(),
                        ids.len()
                    ),
                );
            }
        }
    }

    let mut counts: Vec<(String, usize)> = Vec::new();
    for spec in manifest.spec_ids() {
        let members: Vec<usize> = (0..manifest.runs.len())
            .filter(|&i| manifest.runs[i].spec_id == spec)
            .collect();
        counts.push((spec.clone(), members.len()));

        // majority shape / epoch ids within the group are the reference
        let reference = |key: &dyn Fn(&TraceTensor) -> String| -> Option<String> {
            let mut tally: BTreeMap<String, usize> = BTreeMap::new();
            for &i in &members {
                if let Some(t) = &traces[i] {
                    *tally.entry(key(t)).or_default() += 1;
                }
            }
            let best = tally.values().copied().max()?;
            // first-appearing key among the most frequent ones
            members.iter().filter_map(|&i| traces[i].as_ref().map(key)).find(|k| tally[k] == best)
        };
        let shape_key = |t: &TraceTensor| format!("{:?}", t.shape());
        let epoch_key = |t: &TraceTensor| format!("{:?}", t.epoch_ids());
        let ref_shape = reference(&shape_key);
        let ref_epochs = reference(&epoch_key);
        for &i in &members {
            let Some(t) = &traces[i] else { continue };
            let label = run_label(&manifest.runs[i]);
            if Some(shape_key(t)) != ref_shape {
                let (n, m, p) = t.shape();
                push(
                    vec![label],
                    "shape",
                    format!(
                        "(n_epochs, m_samples, p_units) = ({n}, {m}, {p}) differs from the group's {}",
                        ref_shape.clone().unwrap_or_default()
                    ),
                );
            } else if Some(epoch_key(t)) != ref_epochs {
                push(vec![label], "epoch_ids", "epoch ids differ from the rest of the group".into());
            }
        }
    }

    for (spec, n) in &counts {
        if *n < 2 {
            push(
                vec![spec.clone()],
                "realizations",
                format!("spec {spec:?} has {n} realization(s); at least 2 are required"),
            );
        }
    }
    let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, n) in &counts {
        *tally.entry(*n).or_default() += 1;
    }
    if tally.len() > 1 {
        let best = tally.values().copied().max().unwrap_or(0);
        let majority = counts.iter().map(|c| c.1).find(|n| tally[n] == best).unwrap_or(0);
        for (spec, n) in &counts {
            if *n != majority {
                push(
                    vec![spec.clone()],
                    "realizations",
                    format!("spec {spec:?} has {n} realizations, others have {majority}"),
                );
            }
        }
    }

    (traces, violations)
}

/// A validated ensemble with its traces loaded and grouped by spec.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub manifest: EnsembleManifest,
    /// `(spec_id, runs)` in first-appearance order; runs keep manifest order.
    pub groups: Vec<(String, Vec<(RunManifest, TraceTensor)>)>,
}

impl Ensemble {
    /// Loads and validates. Any violation aborts with [`Error::Validation`].
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = EnsembleManifest::from_path(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, base)
    }

    pub fn from_manifest(manifest: EnsembleManifest, base_dir: &Path) -> Result<Self> {
        let (traces, violations) = inspect(&manifest, base_dir);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let mut groups: Vec<(String, Vec<(RunManifest, TraceTensor)>)> = Vec::new();
        for (run, trace) in manifest.runs.iter().zip(traces) {
            let trace = trace.expect("validated traces are loaded");
            match groups.iter_mut().find(|g| g.0 == run.spec_id) {
                Some(g) => g.1.push((run.clone(), trace)),
                None => groups.push((run.spec_id.clone(), vec![(run.clone(), trace)])),
            }
        }
        Ok(Self { manifest, groups })
    }

    pub fn group(&self, spec_id: &str) -> Option<&[(RunManifest, TraceTensor)]> {
        self.groups
            .iter()
            .find(|g| g.0 == spec_id)
            .map(|g| g.1.as_slice())
    }
}
