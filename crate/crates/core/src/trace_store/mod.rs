//! Activation traces, ensemble manifests and factor-labelled datasets.
//!
//! A trace is an `(epochs, samples, units)` array of decoder activations
//! recorded on a fixed set of trace samples after every epoch. Traces are
//! stored as little-endian 32-bit float `.npy` files in C order; an optional
//! JSON sidecar next to the trace (same stem, `.json` extension) may carry
//! the `epoch_ids` the slices were recorded at.

mod dataset;
mod manifest;
pub mod npy;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    load_dsprites, load_dsprites_with, select_trace_samples, write_factor_archive, DspritesOptions,
    FactorDataset, FactorTag, SampleStrategy, DSPRITES_TAGS,
};
pub use manifest::{validate_ensemble, Ensemble, EnsembleManifest, RunManifest, Violation};

/// Activations of `p_units` hidden units on `m_samples` trace samples at
/// each of `n_epochs` recorded epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTensor {
    values: Array3<f32>,
    epoch_ids: Vec<i64>,
}

impl TraceTensor {
    /// Builds a trace with epoch ids `0..n`.
    pub fn new(values: Array3<f32>) -> Result<Self> {
        let n = values.dim().0;
        Self::with_epoch_ids(values, (0..n as i64).collect())
    }

    pub fn with_epoch_ids(values: Array3<f32>, epoch_ids: Vec<i64>) -> Result<Self> {
        let (n, m, p) = values.dim();
        if n < 2 || m < 2 || p < 1 {
            return Err(Error::InvalidTrace(format!(
                "need at least 2 epochs, 2 samples and 1 unit, got shape ({n}, {m}, {p})"
            )));
        }
        if epoch_ids.len() != n {
            return Err(Error::InvalidTrace(format!(
                "{} epoch ids for {n} epochs",
                epoch_ids.len()
            )));
        }
        if let Some(w) = epoch_ids.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidTrace(format!(
                "epoch ids not strictly increasing at position {}",
                w + 1
            )));
        }
        if let Some(((i, j, k), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: vec![i, j, k],
                value: *v as f64,
            });
        }
        Ok(Self { values, epoch_ids })
    }

    /// Converts from `f64`, rounding to the storage precision.
    pub fn from_f64(values: &Array3<f64>) -> Result<Self> {
        Self::new(values.mapv(|v| v as f32))
    }

    pub fn n_epochs(&self) -> usize {
        self.values.dim().0
    }

    pub fn m_samples(&self) -> usize {
        self.values.dim().1
    }

    pub fn p_units(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn epoch_ids(&self) -> &[i64] {
        &self.epoch_ids
    }

    pub fn values(&self) -> ArrayView3<'_, f32> {
        self.values.view()
    }

    /// Activations widened to `f64`, the precision all kernels work in.
    pub fn to_f64(&self) -> Array3<f64> {
        self.values.mapv(f64::from)
    }

    /// Reorders trace samples: slot `i` of the result holds old sample `perm[i]`.
    pub fn permute_samples(&self, perm: &[usize]) -> Result<Self> {
        let m = self.m_samples();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&i| i >= m || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidParameter(format!(
                "not a permutation of 0..{m}"
            )));
        }
        let values = self.values.select(ndarray::Axis(1), perm);
        Ok(Self {
            values,
            epoch_ids: self.epoch_ids.clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EpochSidecar {
    epoch_ids: Vec<i64>,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Loads a trace from a 3-dimensional `.npy` file.
///
/// Float and integer dtypes are accepted and narrowed to `f32`; values that
/// do not survive the narrowing are reported as non-finite.
pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceTensor> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let arr = npy::NpyArray::read(&mut BufReader::new(file))?;
    if arr.shape.len() != 3 {
        return Err(Error::Rank {
            expected: 3,
            found: arr.shape,
        });
    }
    let shape = (arr.shape[0], arr.shape[1], arr.shape[2]);
    let flat: Vec<f32> = match arr.data {
        npy::NpyData::F32(v) => v,
        ref other => {
            let wide = match other {
                npy::NpyData::F64(v) => v.clone(),
                _ => arr.to_f64(),
            };
            wide.into_iter().map(|v| v as f32).collect()
        }
    };
    let values = Array3::from_shape_vec(shape, flat)
        .map_err(|e| Error::Npy(format!("payload does not fit shape: {e}")))?;

    let sidecar = sidecar_path(path);
    let epoch_ids = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str::<EpochSidecar>(&text)?.epoch_ids
    } else {
        (0..shape.0 as i64).collect()
    };
    TraceTensor::with_epoch_ids(values, epoch_ids)
}

/// Writes a trace as a C-order `<f4` `.npy` file, plus an epoch-id sidecar
/// when the ids are not `0..n`. The file is written to a temporary name and
/// renamed into place.
pub fn save_trace(trace: &TraceTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (n, m, p) = trace.shape();
    let flat: Vec<f32> = trace.values.iter().copied().collect();
    write_atomic(path, |w| npy::write_f32(w, &[n, m, p], &flat))?;

    let default_ids = trace.epoch_ids.iter().copied().eq(0..n as i64);
    if !default_ids {
        let sidecar = sidecar_path(path);
        let body = serde_json::to_string_pretty(&EpochSidecar {
            epoch_ids: trace.epoch_ids.clone(),
        })?;
        write_atomic(&sidecar, |w| w.write_all(body.as_bytes()))?;
    }
    Ok(())
}

/// Writes through a temporary sibling file and renames it over `path`.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut writer = BufWriter::new(file);
    body(&mut writer)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(writer);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
