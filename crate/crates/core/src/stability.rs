//! Pairwise MMD between realization blocks, per-spec stability scores and
//! the resulting ranking.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::JointEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{median_in_place, sq_dist};

pub const BANDWIDTH_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// V-statistic; keeps `i == j` terms, so it is nonnegative and exactly
    /// zero on identical sets.
    #[default]
    Biased,
    /// U-statistic; drops `i == j` terms from the within-set sums.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled points.
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One point set per realization holding every (epoch, sample) row.
    #[default]
    Pooled,
    /// MMD per epoch slice, averaged over epochs.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MmdParams {
    pub estimator: Estimator,
    pub bandwidth: Bandwidth,
    pub pooling: Pooling,
}

impl MmdParams {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

fn pooled_row<'a>(x: &ArrayView2<'a, f64>, y: &ArrayView2<'a, f64>, i: usize) -> ndarray::ArrayView1<'a, f64> {
    if i < x.nrows() {
        x.index_axis_move(ndarray::Axis(0), i)
    } else {
        y.index_axis_move(ndarray::Axis(0), i - x.nrows())
    }
}

/// Median Euclidean distance over all pairs of the pooled set `x ∪ y`,
/// floored at [`BANDWIDTH_FLOOR`].
pub fn median_heuristic_bandwidth(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    let total = x.nrows() + y.nrows();
    if total < 2 {
        return Err(Error::InvalidParameter("need at least two points for a bandwidth".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch(format!("point dimensions {} and {}", x.ncols(), y.ncols())));
    }
    let mut dists: Vec<f64> = (0..total)
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = pooled_row(&x, &y, i);
            (i + 1..total).map(move |j| sq_dist(a, pooled_row(&x, &y, j)).sqrt())
        })
        .collect();
    Ok(median_in_place(&mut dists).max(BANDWIDTH_FLOOR))
}

/// `sum_{i,j} k(a_i, b_j)`, optionally skipping `i == j`. Rows are summed
/// in parallel and combined in index order.
fn kernel_sum(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: f64, skip_diag: bool) -> f64 {
    let rows: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let mut acc = 0.0;
            for j in 0..b.nrows() {
                if skip_diag && i == j {
                    continue;
                }
                acc += (-gamma * sq_dist(ai, b.row(j))).exp();
            }
            acc
        })
        .collect();
    rows.iter().sum()
}

/// Squared MMD between two point sets under a Gaussian kernel
/// `exp(-|a - b|^2 / (2 h^2))`. `params.pooling` is ignored here.
pub fn mmd2(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, params: &MmdParams) -> Result<f64> {
    params.validate()?;
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::InvalidParameter(format!(
            "mmd needs at least two points per set, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch(format!("point dimensions {} and {}", x.ncols(), y.ncols())));
    }
    let h = match params.bandwidth {
        Bandwidth::MedianHeuristic => median_heuristic_bandwidth(x, y)?,
        Bandwidth::Fixed(h) => h,
    };
    let gamma = 1.0 / (2.0 * h * h);
    let (nx, ny) = (x.nrows() as f64, y.nrows() as f64);
    let unbiased = params.estimator == Estimator::Unbiased;
    let (dx, dy) = if unbiased { (nx * (nx - 1.0), ny * (ny - 1.0)) } else { (nx * nx, ny * ny) };
    let kxx = kernel_sum(x, x, gamma, unbiased) / dx;
    let kyy = kernel_sum(y, y, gamma, unbiased) / dy;
    let kxy = kernel_sum(x, y, gamma, false) / (nx * ny);
    Ok((kxx + kyy) - 2.0 * kxy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub spec_id: String,
    /// Symmetric, zero diagonal.
    pub values: Array2<f64>,
}

impl ScoreMatrix {
    /// Upper-triangle entries as `(a, b, value)`, row-major.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let n = self.values.nrows();
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .map(|(a, b)| (a, b, self.values[[a, b]]))
            .collect()
    }
}

fn block_mmd(e: &JointEmbedding, a: usize, b: usize, params: &MmdParams) -> Result<f64> {
    let (x, y) = (e.block(a), e.block(b));
    match params.pooling {
        Pooling::Pooled => mmd2(x, y, params),
        Pooling::PerEpoch => {
            let m = e.m_samples;
            let mut total = 0.0;
            for tau in 0..e.n_epochs {
                let rows = s![tau * m..(tau + 1) * m, ..];
                total += mmd2(x.slice(rows), y.slice(rows), params)?;
            }
            Ok(total / e.n_epochs as f64)
        }
    }
}

/// MMD between every pair of realization blocks.
pub fn pairwise_scores(spec_id: &str, e: &JointEmbedding, params: &MmdParams) -> Result<ScoreMatrix> {
    let n = e.n_realizations();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "spec {spec_id:?} has {n} realization(s); pairwise scores need at least 2"
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| block_mmd(e, a, b, params))
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((n, n));
    for (&(a, b), v) in pairs.iter().zip(vals) {
        values[[a, b]] = v;
        values[[b, a]] = v;
    }
    Ok(ScoreMatrix {
        spec_id: spec_id.to_string(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecScore {
    pub spec_id: String,
    pub mean: f64,
    /// Population standard deviation over the upper-triangle pairs.
    pub std: f64,
}

/// Mean and standard deviation of the upper-triangle entries.
pub fn spec_score(s: &ScoreMatrix) -> Result<SpecScore> {
    let vals: Vec<f64> = s.pairs().into_iter().map(|(_, _, v)| v).collect();
    if vals.is_empty() {
        return Err(Error::InvalidParameter(format!("spec {:?} has fewer than 2 realizations", s.spec_id)));
    }
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    Ok(SpecScore {
        spec_id: s.spec_id.clone(),
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub spec_id: String,
    pub mean_mmd: f64,
    pub std_mmd: f64,
    /// Another spec has exactly the same mean; order between them is by id.
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub entries: Vec<RankEntry>,
    pub tie_break: String,
}

impl RankingReport {
    pub fn order(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.spec_id.as_str()).collect()
    }
}

/// Ascending by mean score; rank 1 is the most stable spec.
pub fn rank_specs(scores: &[SpecScore]) -> Result<RankingReport> {
    if scores.is_empty() {
        return Err(Error::InvalidParameter("nothing to rank".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.mean.is_finite()) {
        return Err(Error::NonFinite {
            index: vec![],
            value: bad.mean,
        });
    }
    let mut sorted: Vec<&SpecScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.mean.total_cmp(&b.mean).then_with(|| a.spec_id.cmp(&b.spec_id)));
    let entries = sorted
        .iter()
        .enumerate()
        .map(|(i, s)| RankEntry {
            rank: i + 1,
            spec_id: s.spec_id.clone(),
            mean_mmd: s.mean,
            std_mmd: s.std,
            tied: scores.iter().filter(|o| o.mean == s.mean).count() > 1,
        })
        .collect();
    Ok(RankingReport {
        entries,
        tie_break: "spec_id ascending".into(),
    })
}
