//! Multislice affinity kernel over `(epoch, sample)` pairs of one trace,
//! its row-normalized random walk, and diffusion powers of that walk.
//!
//! Points are indexed `a = epoch * m + sample`. Two samples at the same
//! epoch are linked by an adaptive-bandwidth Gaussian on their activation
//! distance (intraslice); one sample is linked to itself at other epochs
//! by a Gaussian with a global bandwidth (interslice). Every other pair has
//! zero affinity.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{median_in_place, par_dot, sq_dist};

/// How the interslice bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// Median of all nonzero same-sample distances across epochs.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Exponent applied to intraslice distances.
    pub alpha: f64,
    /// Neighbour rank whose distance sets a sample's intraslice bandwidth.
    pub knn_k: usize,
    pub epsilon: EpsilonMode,
    /// Lower bound for every bandwidth.
    pub bandwidth_floor: f64,
    /// Z-score each unit within an epoch before intraslice distances.
    pub standardize: bool,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            knn_k: 5,
            epsilon: EpsilonMode::Median,
            bandwidth_floor: 1e-12,
            standardize: false,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidParameter("knn_k must be >= 1".into()));
        }
        if !(self.bandwidth_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth_floor must be > 0, got {}",
                self.bandwidth_floor
            )));
        }
        if let EpsilonMode::Fixed(e) = self.epsilon {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::InvalidParameter(format!("fixed epsilon must be > 0, got {e}")));
            }
        }
        Ok(())
    }
}

fn standardized(t: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = t.to_owned();
    for mut slice in out.axis_iter_mut(Axis(0)) {
        for mut unit in slice.axis_iter_mut(Axis(1)) {
            let n = unit.len() as f64;
            let mean = unit.sum() / n;
            let var = unit.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            unit.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
        }
    }
    out
}

/// Intraslice affinities at epoch `tau`:
/// `exp(-|T(tau,i) - T(tau,j)|^alpha / sigma_i^2)`, where `sigma_i` is the
/// distance from sample `i` to its `knn_k`-th nearest neighbour at that
/// epoch (clamped to `m - 1`), floored at `bandwidth_floor`.
///
/// The block is not symmetric: the bandwidth belongs to the row sample.
pub fn intraslice_block(t: ArrayView3<'_, f64>, tau: usize, params: &KernelParams) -> Array2<f64> {
    let (n, m, _) = t.dim();
    assert!(tau < n, "epoch {tau} out of range ({n} epochs)");
    let slice = t.index_axis(Axis(0), tau);
    let mut dist = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let d = sq_dist(slice.row(i), slice.row(j)).sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let k = params.knn_k.min(m.saturating_sub(1));
    let sigma: Vec<f64> = (0..m)
        .map(|i| {
            if k == 0 {
                return params.bandwidth_floor;
            }
            let mut others: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| dist[[i, j]]).collect();
            let (_, &mut kth, _) = others.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            kth.max(params.bandwidth_floor)
        })
        .collect();
    Array2::from_shape_fn((m, m), |(i, j)| {
        let d = dist[[i, j]];
        let num = if params.alpha == 2.0 { d * d } else { d.powf(params.alpha) };
        (-num / (sigma[i] * sigma[i])).exp()
    })
}

/// Interslice bandwidth and an optional note when it fell back to the floor.
pub fn interslice_epsilon(t: ArrayView3<'_, f64>, params: &KernelParams) -> (f64, Option<String>) {
    match params.epsilon {
        EpsilonMode::Fixed(e) => (e, None),
        EpsilonMode::Median => {
            let (n, m, _) = t.dim();
            let mut d: Vec<f64> = (0..m)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let mut local = Vec::with_capacity(n * (n - 1) / 2);
                    for a in 0..n {
                        for b in (a + 1)..n {
                            let v = sq_dist(t.slice(ndarray::s![a, i, ..]), t.slice(ndarray::s![b, i, ..]))
                                .sqrt();
                            if v > 0.0 {
                                local.push(v);
                            }
                        }
                    }
                    local
                })
                .collect();
            if d.is_empty() {
                (
                    params.bandwidth_floor,
                    Some("all interslice distances are zero; epsilon set to the bandwidth floor".into()),
                )
            } else {
                (median_in_place(&mut d).max(params.bandwidth_floor), None)
            }
        }
    }
}

fn stripe_with(t: ArrayView3<'_, f64>, i: usize, eps: f64) -> Array2<f64> {
    let n = t.dim().0;
    let mut out = Array2::<f64>::ones((n, n));
    for a in 0..n {
        for b in (a + 1)..n {
            let d2 = sq_dist(t.slice(ndarray::s![a, i, ..]), t.slice(ndarray::s![b, i, ..]));
            let v = (-d2 / (eps * eps)).exp();
            out[[a, b]] = v;
            out[[b, a]] = v;
        }
    }
    out
}

/// Interslice affinities of sample `i` with itself across epochs:
/// `exp(-|T(tau,i) - T(nu,i)|^2 / epsilon^2)`.
pub fn interslice_stripe(t: ArrayView3<'_, f64>, i: usize, params: &KernelParams) -> Array2<f64> {
    assert!(i < t.dim().1, "sample {i} out of range");
    let (eps, _) = interslice_epsilon(t, params);
    stripe_with(t, i, eps)
}

/// Compressed sparse rows with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                out[[r, c]] = v;
            }
        }
        out
    }
}

/// Symmetrized multislice kernel `K' = (K + K^T) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultisliceKernel {
    pub n_epochs: usize,
    pub m_samples: usize,
    pub matrix: CsrMatrix,
    pub epsilon: f64,
    pub warnings: Vec<String>,
}

/// Builds the symmetrized multislice kernel of one trace.
pub fn assemble_multislice(t: ArrayView3<'_, f64>, params: &KernelParams) -> Result<MultisliceKernel> {
    params.validate()?;
    let (n, m, _) = t.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidTrace(format!("empty trace of shape {:?}", t.dim())));
    }
    let mut warnings = Vec::new();
    if params.knn_k >= m && m > 1 {
        warnings.push(format!("knn_k = {} clamped to m - 1 = {}", params.knn_k, m - 1));
    }

    let std_owned;
    let intra_src = if params.standardize {
        std_owned = standardized(t);
        std_owned.view()
    } else {
        t
    };
    let blocks: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|tau| intraslice_block(intra_src, tau, params))
        .collect();
    let (eps, note) = interslice_epsilon(t, params);
    warnings.extend(note);
    let stripes: Vec<Array2<f64>> = (0..m).into_par_iter().map(|i| stripe_with(t, i, eps)).collect();

    let size = n * m;
    let row_nnz = m + n - 1;
    let mut indptr = Vec::with_capacity(size + 1);
    let mut indices = Vec::with_capacity(size * row_nnz);
    let mut values = Vec::with_capacity(size * row_nnz);
    indptr.push(0);
    for tau in 0..n {
        let block = &blocks[tau];
        for i in 0..m {
            let stripe = &stripes[i];
            for nu in 0..tau {
                indices.push(nu * m + i);
                values.push(stripe[[tau, nu]]);
            }
            for j in 0..m {
                indices.push(tau * m + j);
                values.push(0.5 * (block[[i, j]] + block[[j, i]]));
            }
            for nu in (tau + 1)..n {
                indices.push(nu * m + i);
                values.push(stripe[[tau, nu]]);
            }
            indptr.push(indices.len());
        }
    }
    Ok(MultisliceKernel {
        n_epochs: n,
        m_samples: m,
        matrix: CsrMatrix {
            n: size,
            indptr,
            indices,
            values,
        },
        epsilon: eps,
        warnings,
    })
}

/// Row-stochastic random walk `P = D^-1 K'` over the trace points.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOperator {
    pub matrix: CsrMatrix,
}

impl DiffusionOperator {
    pub fn size(&self) -> usize {
        self.matrix.n
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.matrix.to_dense()
    }
}

pub fn row_normalize(k: &MultisliceKernel) -> DiffusionOperator {
    let mut matrix = k.matrix.clone();
    for r in 0..matrix.n {
        let span = matrix.indptr[r]..matrix.indptr[r + 1];
        let sum: f64 = matrix.values[span.clone()].iter().sum();
        // the diagonal is 1, so sum >= 1
        for v in &mut matrix.values[span] {
            *v /= sum;
        }
    }
    DiffusionOperator { matrix }
}

/// `P^t` by repeated squaring with a fixed multiplication order.
pub fn diffuse(p: &DiffusionOperator, t: usize) -> Result<Array2<f64>> {
    matrix_power(&p.to_dense(), t)
}

pub fn matrix_power(p: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::InvalidParameter("diffusion time must be >= 1".into()));
    }
    let mut result: Option<Array2<f64>> = None;
    let mut base = p.clone();
    let mut e = t;
    loop {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => par_dot(r.view(), base.view()),
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        base = par_dot(base.view(), base.view());
    }
    Ok(result.expect("t >= 1"))
}

/// Diffusion kernel `P^t` of one trace.
pub fn diffusion_kernel(t: ArrayView3<'_, f64>, params: &KernelParams, time: usize) -> Result<(Array2<f64>, Vec<String>)> {
    let k = assemble_multislice(t, params)?;
    let p = row_normalize(&k);
    Ok((diffuse(&p, time)?, k.warnings))
}
