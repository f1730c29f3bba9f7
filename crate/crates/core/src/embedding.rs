//! Joint spectral embedding of all realizations of one specification.

use ndarray::{s, Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multislice::{diffusion_kernel, KernelParams};
use crate::svd::{concatenate_kernels, truncated_left_svd, SvdOptions};
use crate::trace_store::TraceTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Raw left singular vectors.
    None,
    /// Left singular vectors scaled by their singular values.
    #[default]
    Singular,
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "singular" => Ok(Self::Singular),
            other => Err(Error::InvalidParameter(format!("unknown weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams {
    pub kernel: KernelParams,
    /// Diffusion time.
    pub t: usize,
    /// Requested embedding dimension, capped at `n_epochs * m`.
    pub d: usize,
    pub weighting: Weighting,
    pub svd: SvdOptions,
}

impl Default for EmbedParams {
    fn default() -> Self {
        Self {
            kernel: KernelParams::default(),
            t: 8,
            d: 20,
            weighting: Weighting::Singular,
            svd: SvdOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointEmbedding {
    /// Rows ordered by (realization, epoch, sample).
    pub coords: Array2<f64>,
    pub singular_values: Array1<f64>,
    /// Orthonormal left singular vectors, same row order as `coords`.
    pub u: Array2<f64>,
    pub realization_offsets: Vec<usize>,
    pub n_epochs: usize,
    pub m_samples: usize,
    pub d: usize,
    pub warnings: Vec<String>,
}

impl JointEmbedding {
    pub fn n_realizations(&self) -> usize {
        self.realization_offsets.len()
    }

    pub fn block_len(&self) -> usize {
        self.coords.nrows() / self.realization_offsets.len().max(1)
    }

    pub fn block(&self, r: usize) -> ArrayView2<'_, f64> {
        let start = self.realization_offsets[r];
        self.coords.slice(s![start..start + self.block_len(), ..])
    }
}

/// Embeds the realizations of one spec group into shared coordinates.
pub fn embed_group(traces: &[&TraceTensor], params: &EmbedParams) -> Result<JointEmbedding> {
    let Some(first) = traces.first() else {
        return Err(Error::InvalidParameter("empty spec group".into()));
    };
    let (n, m, p) = first.shape();
    for (r, tr) in traces.iter().enumerate() {
        if tr.shape() != (n, m, p) {
            return Err(Error::ShapeMismatch(format!(
                "realization {r} has shape {:?}, expected {:?}",
                tr.shape(),
                (n, m, p)
            )));
        }
    }
    if params.d == 0 {
        return Err(Error::InvalidParameter("embedding dimension must be >= 1".into()));
    }
    let size = n * m;
    let d = params.d.min(size);

    let built: Vec<(Array2<f64>, Vec<String>)> = traces
        .par_iter()
        .map(|tr| diffusion_kernel(tr.to_f64().view(), &params.kernel, params.t))
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    let mut kernels = Vec::with_capacity(built.len());
    for (r, (k, w)) in built.into_iter().enumerate() {
        warnings.extend(w.into_iter().map(|w| format!("realization {r}: {w}")));
        kernels.push(k);
    }
    if d < params.d {
        warnings.push(format!("embedding dimension capped at {d}"));
    }

    let stacked = concatenate_kernels(kernels)?;
    let svd = truncated_left_svd(&stacked, d, &params.svd)?;
    let coords = match params.weighting {
        Weighting::None => svd.u.clone(),
        Weighting::Singular => svd.weighted,
    };
    Ok(JointEmbedding {
        coords,
        singular_values: svd.s,
        u: svd.u,
        realization_offsets: (0..traces.len()).map(|r| r * size).collect(),
        n_epochs: n,
        m_samples: m,
        d,
        warnings,
    })
}
