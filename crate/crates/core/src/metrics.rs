//! Supervised disentanglement metrics, label-noise models and the
//! total-variation unfairness score.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_store::{FactorDataset, FactorTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub batches: usize,
    pub samples_per_batch: usize,
    pub seed: u64,
    /// Equal-occupancy bins per latent for MIG.
    pub bins: usize,
    /// Latents with global variance below this are ignored by the
    /// FactorVAE metric.
    pub variance_prune_threshold: f64,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            batches: 800,
            samples_per_batch: 64,
            seed: 0,
            bins: 20,
            variance_prune_threshold: 0.05,
            classifier_lr: 0.5,
            classifier_epochs: 2000,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches < 2 {
            return Err(Error::InvalidParameter("need at least 2 batches (votes)".into()));
        }
        if self.samples_per_batch < 2 {
            return Err(Error::InvalidParameter("samples_per_batch must be >= 2".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParameter("bins must be >= 2".into()));
        }
        if !(self.variance_prune_threshold >= 0.0) || !(self.classifier_lr > 0.0) {
            return Err(Error::InvalidParameter(
                "prune threshold must be >= 0 and classifier_lr > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOutcome {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// Per-factor probability of corrupting a label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p_shape: f64,
    pub p_scale: f64,
    pub p_orient: f64,
    pub p_pos: f64,
    /// Std of the Gaussian step, in class-index units, for ordinal factors.
    pub continuous_sigma: f64,
}

impl NoiseModel {
    pub const fn new(p_shape: f64, p_scale: f64, p_orient: f64, p_pos: f64) -> Self {
        Self {
            p_shape,
            p_scale,
            p_orient,
            p_pos,
            continuous_sigma: 1.0,
        }
    }

    pub const fn none() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    /// The three graded noisy-label regimes, `1` being the mildest.
    pub fn preset(level: u8) -> Result<Self> {
        match level {
            1 => Ok(Self::new(0.05, 0.1, 0.05, 0.05)),
            2 => Ok(Self::new(0.1, 0.2, 0.1, 0.1)),
            3 => Ok(Self::new(0.3, 0.3, 0.3, 0.3)),
            _ => Err(Error::InvalidParameter(format!("noise model {level} not in 1..=3"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_shape, self.p_scale, self.p_orient, self.p_pos] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.continuous_sigma >= 0.0) || !self.continuous_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "continuous_sigma must be finite and >= 0, got {}",
                self.continuous_sigma
            )));
        }
        Ok(())
    }

    fn probability(&self, tag: FactorTag) -> Option<f64> {
        match tag {
            FactorTag::Shape => Some(self.p_shape),
            FactorTag::Scale => Some(self.p_scale),
            FactorTag::Orientation => Some(self.p_orient),
            FactorTag::Position => Some(self.p_pos),
            FactorTag::Fixed => Some(0.0),
            FactorTag::Untagged => None,
        }
    }

    fn is_noop(&self) -> bool {
        [self.p_shape, self.p_scale, self.p_orient, self.p_pos].iter().all(|p| *p == 0.0)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Corrupts factor labels: categorical factors are resampled uniformly,
/// ordinal ones take a rounded Gaussian step clipped to the valid range.
pub fn perturb_factors(dataset: &FactorDataset, noise: &NoiseModel, seed: u64) -> Result<FactorDataset> {
    noise.validate()?;
    let mut out = dataset.clone();
    if noise.is_noop() {
        return Ok(out);
    }
    let step = Normal::new(0.0, noise.continuous_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for (f, &tag) in dataset.factor_tags.iter().enumerate() {
        let p = noise.probability(tag).ok_or_else(|| {
            Error::InvalidParameter(format!("factor {f} has no tag; cannot choose a perturbation rule"))
        })?;
        if p == 0.0 {
            continue;
        }
        let size = dataset.factor_sizes[f];
        let mut lookup: Vec<Option<f64>> = vec![None; size];
        for (c, v) in dataset.factor_classes.column(f).iter().zip(dataset.factor_values.column(f)) {
            lookup[*c].get_or_insert(*v);
        }
        let mut rng = stream(seed, f as u64);
        // Every entry consumes the same draws whatever `p` is, so a noisier
        // model corrupts a superset of the entries a milder one does.
        for i in 0..dataset.len() {
            let u: f64 = rng.random();
            let resample = rng.random_range(0..size);
            let jump = step.sample(&mut rng).round();
            if u >= p {
                continue;
            }
            let old = dataset.factor_classes[[i, f]];
            let new = if tag == FactorTag::Shape {
                resample
            } else {
                (old as f64 + jump).clamp(0.0, (size - 1) as f64) as usize
            };
            out.factor_classes[[i, f]] = new;
            out.factor_values[[i, f]] = lookup[new].unwrap_or(new as f64);
        }
    }
    Ok(out)
}

fn check_aligned(codes: ArrayView2<'_, f64>, dataset: &FactorDataset) -> Result<()> {
    if codes.nrows() != dataset.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latent codes for {} dataset rows",
            codes.nrows(),
            dataset.len()
        )));
    }
    if codes.ncols() == 0 {
        return Err(Error::ShapeMismatch("latent codes have no dimensions".into()));
    }
    if let Some((idx, v)) = codes.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: vec![idx.0, idx.1],
            value: *v,
        });
    }
    Ok(())
}

/// Row indices grouped by class, for every factor that has at least two
/// populated classes.
struct ClassIndex {
    factors: Vec<usize>,
    by_class: Vec<Vec<Vec<usize>>>,
    /// Class label to position in `by_class`, per factor.
    group_of: Vec<Vec<usize>>,
}

impl ClassIndex {
    fn new(d: &FactorDataset, warnings: &mut Vec<String>) -> Result<Self> {
        let mut factors = Vec::new();
        let mut by_class = Vec::new();
        let mut group_of = Vec::new();
        for f in 0..d.n_factors() {
            let mut groups = vec![Vec::new(); d.factor_sizes[f]];
            for (i, &c) in d.factor_classes.column(f).iter().enumerate() {
                groups[c].push(i);
            }
            let mut map = vec![usize::MAX; groups.len()];
            let mut next = 0;
            for (c, g) in groups.iter().enumerate() {
                if !g.is_empty() {
                    map[c] = next;
                    next += 1;
                }
            }
            groups.retain(|g| !g.is_empty());
            if groups.len() < 2 {
                warnings.push(format!("factor {f} has a single class and is excluded"));
                continue;
            }
            factors.push(f);
            by_class.push(groups);
            group_of.push(map);
        }
        if factors.is_empty() {
            return Err(Error::Undefined("no factor has more than one class".into()));
        }
        Ok(Self {
            factors,
            by_class,
            group_of,
        })
    }

    /// Rows sharing `row`'s class of the factor in `slot`.
    fn peers(&self, d: &FactorDataset, slot: usize, row: usize) -> &[usize] {
        let c = d.factor_classes[[row, self.factors[slot]]];
        &self.by_class[slot][self.group_of[slot][c]]
    }
}

fn label_view<'a>(dataset: &'a FactorDataset, noise: Option<&NoiseModel>, seed: u64) -> Result<std::borrow::Cow<'a, FactorDataset>> {
    Ok(match noise {
        Some(n) => std::borrow::Cow::Owned(perturb_factors(dataset, n, seed ^ 0x006e_6f69_7365)?),
        None => std::borrow::Cow::Borrowed(dataset),
    })
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features. Returns accuracy on the evaluation set.
fn logistic_accuracy(
    train_x: &Array2<f64>,
    train_y: &[usize],
    eval_x: &Array2<f64>,
    eval_y: &[usize],
    classes: usize,
    lr: f64,
    epochs: usize,
) -> f64 {
    let mean = train_x.mean_axis(Axis(0)).expect("nonempty");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let norm = |x: &Array2<f64>| (x - &mean) / &std;
    let (xt, xe) = (norm(train_x), norm(eval_x));
    let (n, p) = xt.dim();
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((p, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let softmax = |logits: &mut Array2<f64>| {
        for mut row in logits.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row /= s;
        }
    };
    for _ in 0..epochs {
        let mut prob = xt.dot(&w) + &b;
        softmax(&mut prob);
        let err = (prob - &onehot) / n as f64;
        w.scaled_add(-lr, &xt.t().dot(&err));
        b.scaled_add(-lr, &err.sum_axis(Axis(0)));
    }
    let logits = xe.dot(&w) + &b;
    let correct = logits
        .rows()
        .into_iter()
        .zip(eval_y)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    correct as f64 / eval_y.len() as f64
}

fn argmax(v: ArrayView1<'_, f64>) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

fn argmin(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) }).0
}

/// Accuracy of a linear classifier predicting which factor was held fixed
/// from mean absolute code differences over pairs sharing that factor.
pub fn betavae_metric(
    codes: ArrayView2<'_, f64>,
    dataset: &FactorDataset,
    cfg: &MetricConfig,
    noise: Option<&NoiseModel>,
) -> Result<MetricOutcome> {
    cfg.validate()?;
    check_aligned(codes, dataset)?;
    let labels = label_view(dataset, noise, cfg.seed)?;
    let mut warnings = Vec::new();
    let index = ClassIndex::new(&labels, &mut warnings)?;
    let n = dataset.len();
    let dz = codes.ncols();

    let votes: Vec<(Array1<f64>, usize)> = (0..cfg.batches)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream(cfg.seed, v as u64);
            let slot = rng.random_range(0..index.factors.len());
            let mut feat = Array1::<f64>::zeros(dz);
            for _ in 0..cfg.samples_per_batch {
                let a = rng.random_range(0..n);
                let group = index.peers(&labels, slot, a);
                let b = group[rng.random_range(0..group.len())];
                feat += &(&codes.row(a) - &codes.row(b)).mapv(f64::abs);
            }
            (feat / cfg.samples_per_batch as f64, slot)
        })
        .collect();

    let split = cfg.batches / 2;
    let stack = |part: &[(Array1<f64>, usize)]| {
        let x = Array2::from_shape_fn((part.len(), dz), |(i, j)| part[i].0[j]);
        let y: Vec<usize> = part.iter().map(|v| v.1).collect();
        (x, y)
    };
    let (tx, ty) = stack(&votes[..split]);
    let (ex, ey) = stack(&votes[split..]);
    let value = logistic_accuracy(&tx, &ty, &ex, &ey, index.factors.len(), cfg.classifier_lr, cfg.classifier_epochs);
    Ok(MetricOutcome { value, warnings })
}

/// Majority-vote accuracy of the lowest-variance latent as a predictor of
/// the fixed factor, on codes scaled by their global standard deviation.
pub fn factorvae_metric(
    codes: ArrayView2<'_, f64>,
    dataset: &FactorDataset,
    cfg: &MetricConfig,
    noise: Option<&NoiseModel>,
) -> Result<MetricOutcome> {
    cfg.validate()?;
    check_aligned(codes, dataset)?;
    let labels = label_view(dataset, noise, cfg.seed)?;
    let mut warnings = Vec::new();
    let index = ClassIndex::new(&labels, &mut warnings)?;

    let var = codes.var_axis(Axis(0), 0.0);
    let kept: Vec<usize> = (0..codes.ncols()).filter(|&j| var[j] >= cfg.variance_prune_threshold && var[j] > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::Undefined(format!(
            "every latent has variance below {}",
            cfg.variance_prune_threshold
        )));
    }
    if kept.len() < codes.ncols() {
        warnings.push(format!("{} of {} latents pruned", codes.ncols() - kept.len(), codes.ncols()));
    }
    let scale: Vec<f64> = kept.iter().map(|&j| var[j].sqrt()).collect();

    let votes: Vec<(usize, usize)> = (0..cfg.batches)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream(cfg.seed, v as u64);
            let slot = rng.random_range(0..index.factors.len());
            let groups = &index.by_class[slot];
            let group = &groups[rng.random_range(0..groups.len())];
            let rows: Vec<usize> = (0..cfg.samples_per_batch).map(|_| group[rng.random_range(0..group.len())]).collect();
            let vars: Vec<f64> = kept
                .iter()
                .zip(&scale)
                .map(|(&j, s)| {
                    let vals: Vec<f64> = rows.iter().map(|&r| codes[[r, j]] / s).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64
                })
                .collect();
            (argmin(&vars), slot)
        })
        .collect();

    let split = cfg.batches / 2;
    let mut table: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(dim, slot) in &votes[..split] {
        table.entry(dim).or_insert_with(|| vec![0; index.factors.len()])[slot] += 1;
    }
    let assign: BTreeMap<usize, usize> = table
        .into_iter()
        .map(|(dim, counts)| {
            let best = counts.iter().enumerate().fold((0, 0), |(bi, bc), (i, &c)| if c > bc { (i, c) } else { (bi, bc) }).0;
            (dim, best)
        })
        .collect();
    let eval = &votes[split..];
    let correct = eval.iter().filter(|(dim, slot)| assign.get(dim) == Some(slot)).count();
    Ok(MetricOutcome {
        value: correct as f64 / eval.len() as f64,
        warnings,
    })
}

/// Equal-occupancy bin of every entry, by midrank so tied values share a bin.
pub fn equal_occupancy_bins(x: ArrayView1<'_, f64>, bins: usize) -> Vec<usize> {
    let n = x.len();
    let ranks = midranks(x.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| x.to_vec()).as_slice());
    ranks
        .iter()
        .map(|r| (((r - 1.0) * bins as f64 / n as f64).floor() as usize).min(bins - 1))
        .collect()
}

/// 1-based average ranks.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Discrete mutual information (nats) between two label vectors.
pub fn mutual_information(a: &[usize], a_size: usize, b: &[usize], b_size: usize) -> f64 {
    let n = a.len();
    let mut joint = vec![0usize; a_size * b_size];
    let mut ca = vec![0usize; a_size];
    let mut cb = vec![0usize; b_size];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * b_size + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    (entropy(&ca, n) + entropy(&cb, n) - entropy(&joint, n)).max(0.0)
}

/// Mean over factors of the gap between the two largest latent mutual
/// informations, normalized by the factor entropy.
pub fn mig(codes: ArrayView2<'_, f64>, dataset: &FactorDataset, cfg: &MetricConfig) -> Result<MetricOutcome> {
    cfg.validate()?;
    check_aligned(codes, dataset)?;
    let n = dataset.len();
    let binned: Vec<Vec<usize>> = (0..codes.ncols())
        .into_par_iter()
        .map(|j| equal_occupancy_bins(codes.column(j), cfg.bins))
        .collect();
    let mut warnings = Vec::new();
    let mut scores = Vec::new();
    for f in 0..dataset.n_factors() {
        let labels: Vec<usize> = dataset.factor_classes.column(f).to_vec();
        let size = dataset.factor_sizes[f];
        let mut counts = vec![0usize; size];
        for &c in &labels {
            counts[c] += 1;
        }
        let h = entropy(&counts, n);
        if h <= 1e-12 {
            warnings.push(format!("factor {f} has zero entropy and is excluded"));
            continue;
        }
        let mut mi: Vec<f64> = binned.iter().map(|z| mutual_information(z, cfg.bins, &labels, size)).collect();
        mi.sort_by(|a, b| b.total_cmp(a));
        let second = mi.get(1).copied().unwrap_or(0.0);
        scores.push(((mi[0] - second) / h).clamp(0.0, 1.0));
    }
    if scores.is_empty() {
        return Err(Error::Undefined("every factor has zero entropy".into()));
    }
    Ok(MetricOutcome {
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        warnings,
    })
}

/// `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("supports of size {} and {}", p.len(), q.len())));
    }
    for d in [p, q] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 || d.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("not a distribution (sums to {s})")));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Mean over sensitive classes of the total variation between the
/// prediction histogram and the histogram within that class.
pub fn unfairness(predictions: &[i64], sensitive: &[i64]) -> Result<MetricOutcome> {
    if predictions.len() != sensitive.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} sensitive labels",
            predictions.len(),
            sensitive.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParameter("no predictions".into()));
    }
    if let Some(s) = sensitive.iter().find(|s| **s < 0) {
        return Err(Error::InvalidParameter(format!("negative sensitive class {s}")));
    }
    let support: Vec<i64> = {
        let mut v = predictions.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let hist = |rows: &mut dyn Iterator<Item = i64>| {
        let mut h = vec![0.0; support.len()];
        let mut total = 0.0;
        for y in rows {
            h[support.binary_search(&y).expect("in support")] += 1.0;
            total += 1.0;
        }
        h.iter_mut().for_each(|v| *v /= total);
        h
    };
    let marginal = hist(&mut predictions.iter().copied());
    let n_classes = *sensitive.iter().max().expect("nonempty") as usize + 1;
    let mut warnings = Vec::new();
    let mut terms = Vec::new();
    for s in 0..n_classes {
        if !sensitive.contains(&(s as i64)) {
            warnings.push(format!("sensitive class {s} is empty and is excluded"));
            continue;
        }
        let cond = hist(&mut predictions.iter().zip(sensitive).filter(|(_, &c)| c == s as i64).map(|(y, _)| *y));
        terms.push(total_variation(&marginal, &cond)?);
    }
    Ok(MetricOutcome {
        value: terms.iter().sum::<f64>() / terms.len() as f64,
        warnings,
    })
}

/// [`unfairness`] averaged over several prediction targets.
pub fn mean_unfairness(targets: &[Vec<i64>], sensitive: &[i64]) -> Result<MetricOutcome> {
    if targets.is_empty() {
        return Err(Error::InvalidParameter("no targets".into()));
    }
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for t in targets {
        let r = unfairness(t, sensitive)?;
        total += r.value;
        warnings.extend(r.warnings);
    }
    warnings.dedup();
    Ok(MetricOutcome {
        value: total / targets.len() as f64,
        warnings,
    })
}
