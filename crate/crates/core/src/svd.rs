//! Truncated SVD of tall operators by block subspace iteration.
//!
//! Iterates an orthonormal basis `X` of the right (column) space through
//! `A^T A`, and reads left singular vectors off `Y = A X` with a right
//! multiplication only. Row blocks of `A` that are bitwise identical
//! therefore produce bitwise identical rows of the weighted coordinates
//! `U diag(S)`.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::par_dot;

/// A matrix that can be applied to blocks of vectors.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A x`
    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
    /// `A^T y`
    fn apply_t(&self, y: ArrayView2<'_, f64>) -> Array2<f64>;
    /// Applies `A` and then right-multiplies by `m`, without mixing rows.
    fn apply_then(&self, x: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> Array2<f64> {
        par_dot(self.apply(x).view(), m)
    }
}

impl LinearOperator for Array2<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        par_dot(self.view(), x)
    }
    fn apply_t(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        par_dot(self.t(), y)
    }
}

/// Square blocks stacked vertically: `[K_0; K_1; ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedKernels {
    blocks: Vec<Array2<f64>>,
}

impl StackedKernels {
    pub fn new(blocks: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::InvalidParameter("no kernels to stack".into()));
        };
        let size = first.nrows();
        for (r, b) in blocks.iter().enumerate() {
            if b.dim() != (size, size) {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {r} is {:?}, expected ({size}, {size})",
                    b.dim()
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn block_size(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Array2<f64>] {
        &self.blocks
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let views: Vec<_> = self.blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("blocks share a width")
    }
}

impl LinearOperator for StackedKernels {
    fn nrows(&self) -> usize {
        self.blocks.len() * self.block_size()
    }
    fn ncols(&self) -> usize {
        self.block_size()
    }
    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let parts: Vec<Array2<f64>> = self.blocks.iter().map(|b| par_dot(b.view(), x)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("blocks share a width")
    }
    fn apply_t(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        let size = self.block_size();
        let mut acc = Array2::zeros((size, y.ncols()));
        for (r, b) in self.blocks.iter().enumerate() {
            acc += &par_dot(b.t(), y.slice(s![r * size..(r + 1) * size, ..]));
        }
        acc
    }
    fn apply_then(&self, x: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> Array2<f64> {
        let parts: Vec<Array2<f64>> = self
            .blocks
            .iter()
            .map(|b| par_dot(par_dot(b.view(), x).view(), m))
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("blocks share a width")
    }
}

/// Stacks diffusion kernels of one spec group, realization blocks in order.
pub fn concatenate_kernels(kernels: Vec<Array2<f64>>) -> Result<StackedKernels> {
    StackedKernels::new(kernels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdOptions {
    /// Extra basis vectors carried beyond the requested rank.
    pub oversample: usize,
    /// Stop when no leading singular value moves by more than
    /// `tol * sigma_1` between iterations...
    pub tol: f64,
    /// ...and every Ritz pair of `A^T A` has residual below
    /// `residual_tol * sigma_1^2`.
    pub residual_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            oversample: 10,
            tol: 1e-10,
            residual_tol: 1e-12,
            max_iter: 2000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Left singular vectors, orthonormal columns.
    pub u: Array2<f64>,
    /// Nonincreasing singular values.
    pub s: Array1<f64>,
    /// Right singular vectors.
    pub v: Array2<f64>,
    /// `A V`, equal to `U diag(S)` and computed without mixing rows.
    pub weighted: Array2<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Orthonormal basis of the columns of `y` (Householder QR, thin Q).
fn orthonormalize(y: ArrayView2<'_, f64>) -> Array2<f64> {
    from_na(&to_na(y).qr().q())
}

/// Top-`d` singular triplets of `a`.
pub fn truncated_left_svd<A: LinearOperator + ?Sized>(
    a: &A,
    d: usize,
    opts: &SvdOptions,
) -> Result<TruncatedSvd> {
    let (rows, cols) = (a.nrows(), a.ncols());
    if d == 0 || d > rows.min(cols) {
        return Err(Error::InvalidParameter(format!(
            "rank {d} outside 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    let b = (d + opts.oversample).min(cols).min(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = Array2::from_shape_fn((cols, b), |_| StandardNormal.sample(&mut rng));
    let mut x = orthonormalize(start.view());

    let mut prev: Option<Array1<f64>> = None;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let y = a.apply(x.view());
        let z = a.apply_t(y.view());

        // Ritz values of A on span(X): singular values of R where Y = QR.
        let qr = to_na(y.view()).qr();
        let r = qr.r();
        let svd = r.clone().svd(true, true);
        let sigma = Array1::from_iter(svd.singular_values.iter().copied());
        let w = from_na(&svd.v_t.as_ref().expect("computed").transpose());
        let s0 = sigma[0].max(f64::MIN_POSITIVE);

        // eigen-residual of A^T A for the leading d Ritz pairs
        let zw = par_dot(z.view(), w.slice(s![.., ..d]));
        let xw = par_dot(x.view(), w.slice(s![.., ..d]));
        residual = (0..d)
            .map(|i| {
                let lam = sigma[i] * sigma[i];
                let diff = &zw.column(i) - &(&xw.column(i) * lam);
                diff.dot(&diff).sqrt() / (s0 * s0)
            })
            .fold(0.0, f64::max);

        let moved = prev.as_ref().map(|p| {
            (0..d).map(|i| (sigma[i] - p[i]).abs()).fold(0.0, f64::max) / s0
        });
        let converged = matches!(moved, Some(m) if m <= opts.tol) && residual <= opts.residual_tol;
        if converged || (b == cols && it >= 2) {
            return Ok(finish(a, &x, &y, &qr.q(), &svd, d, it, residual));
        }
        prev = Some(sigma);
        x = orthonormalize(z.view());
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish<A: LinearOperator + ?Sized>(
    a: &A,
    x: &Array2<f64>,
    y: &Array2<f64>,
    q: &DMatrix<f64>,
    svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    d: usize,
    iterations: usize,
    residual: f64,
) -> TruncatedSvd {
    let s = Array1::from_iter(svd.singular_values.iter().take(d).copied());
    let w = from_na(&svd.v_t.as_ref().expect("computed").transpose());
    let w_d = w.slice(s![.., ..d]).to_owned();
    let v = par_dot(x.view(), w_d.view());
    let weighted = a.apply_then(x.view(), w_d.view());

    // U = A V / S where that is well conditioned; Q U_R otherwise.
    let s0 = s[0];
    let qu = from_na(&(q * svd.u.as_ref().expect("computed")));
    let mut u = Array2::zeros((y.nrows(), d));
    for i in 0..d {
        if s[i] > 1e-6 * s0 {
            u.column_mut(i).assign(&(&weighted.column(i) / s[i]));
        } else {
            u.column_mut(i).assign(&qu.column(i));
        }
    }
    TruncatedSvd {
        u,
        s,
        v,
        weighted,
        iterations,
        residual,
    }
}
