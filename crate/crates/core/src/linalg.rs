//! Small dense helpers shared by the kernel and embedding code.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, ArrayView2, Axis};

/// Row-block size for [`par_dot`]. Fixed so results do not depend on the
/// size of the thread pool.
const ROW_CHUNK: usize = 64;

/// `a · b`, parallel over fixed-size row blocks of `a`.
pub fn par_dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, inner) = a.dim();
    assert_eq!(inner, b.nrows(), "inner dimensions differ");
    let mut out = Array2::zeros((rows, b.ncols()));
    out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(k, mut chunk)| {
            let start = k * ROW_CHUNK;
            let len = chunk.nrows();
            general_mat_mul(1.0, &a.slice(s![start..start + len, ..]), &b, 0.0, &mut chunk);
        });
    out
}

pub fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of a non-empty slice (mean of the two middle values for even
/// lengths). Reorders the slice.
pub fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    assert!(n > 0, "median of empty slice");
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}
