//! Rank and product-moment correlation, and the spread of a ranking's
//! agreement with a reference as realizations are subsampled.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::midranks;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("correlation needs at least 2 points".into()));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: vec![], value: *v });
    }
    Ok(())
}

/// Centered product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of midranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&midranks(a), &midranks(b)).map_err(|_| Error::Undefined("rank variance is zero".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spearman,
    Pearson,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spearman" => Ok(Self::Spearman),
            "pearson" => Ok(Self::Pearson),
            other => Err(Error::InvalidParameter(format!("unknown correlation method {other:?}"))),
        }
    }
}

pub fn correlate(a: &[f64], b: &[f64], method: Method) -> Result<f64> {
    match method {
        Method::Spearman => spearman(a, b),
        Method::Pearson => pearson(a, b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSummary {
    pub subset_size: usize,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
    pub trials: usize,
}

/// For each subset size, draws `trials` random realization subsets per
/// spec, recomputes each spec's mean pairwise score on its subset, and
/// correlates the negated scores (higher = more stable) with `reference`.
pub fn subsample_stability(
    pairwise: &[Array2<f64>],
    reference: &[f64],
    subset_sizes: &[usize],
    trials: usize,
    seed: u64,
    method: Method,
) -> Result<Vec<SubsampleSummary>> {
    if pairwise.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score matrices for {} reference values",
            pairwise.len(),
            reference.len()
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let available = pairwise.iter().map(|m| m.nrows()).min().unwrap_or(0);
    subset_sizes
        .iter()
        .enumerate()
        .map(|(si, &size)| {
            if size < 2 || size > available {
                return Err(Error::InvalidParameter(format!(
                    "subset size {size} outside 2..={available} available realizations"
                )));
            }
            let values: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((si as u64) << 32) | trial as u64);
                    let scores: Vec<f64> = pairwise
                        .iter()
                        .map(|m| {
                            let mut idx = sample(&mut rng, m.nrows(), size).into_vec();
                            idx.sort_unstable();
                            -subset_mean(m, &idx)
                        })
                        .collect();
                    correlate(&scores, reference, method)
                })
                .collect::<Result<_>>()?;
            let k = values.len() as f64;
            let mean = values.iter().sum::<f64>() / k;
            let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k).sqrt();
            Ok(SubsampleSummary {
                subset_size: size,
                mean,
                std,
                trials,
            })
        })
        .collect()
}

fn subset_mean(m: &Array2<f64>, idx: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            total += m[[i, j]];
            count += 1;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&a, &[1.0; 4]), Err(Error::Undefined(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let a = [0.5, -1.0, 2.0, 3.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_subset_single_trial() {
        let m = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { (i + j) as f64 });
        let m2 = &m * 2.0;
        let out = subsample_stability(&[m.clone(), m2], &[1.0, 0.0], &[4], 1, 3, Method::Spearman).unwrap();
        assert_eq!(out[0].std, 0.0);
        assert_eq!(out[0].mean, 1.0);
        assert!(subsample_stability(&[m.clone(), m], &[1.0, 0.0], &[5], 1, 3, Method::Spearman).is_err());
    }
}
