//! Desk-scale ensembles with known stability: a linear autoencoder trained
//! on linearly mixed factors, and directly perturbed trajectories.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::par_dot;
use crate::trace_store::{FactorDataset, FactorTag, TraceTensor};

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDataConfig {
    pub k: usize,
    pub n: usize,
    pub obs_dim: usize,
    /// Per-factor variances; default halves from 4 so every gap is 2x.
    pub variances: Option<Vec<f64>>,
    /// Grid levels per factor.
    pub levels: usize,
    /// Std of isotropic observation noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for FactorDataConfig {
    fn default() -> Self {
        Self {
            k: 4,
            n: 2000,
            obs_dim: 12,
            variances: None,
            levels: 8,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl FactorDataConfig {
    pub fn factor_variances(&self) -> Vec<f64> {
        match &self.variances {
            Some(v) => v.clone(),
            None => (0..self.k).map(|f| 4.0 * 0.5f64.powi(f as i32)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// Observations plus factor labels; factor values are the centered
    /// latent coordinates before mixing.
    pub dataset: FactorDataset,
    /// `(obs_dim, k)` with orthonormal columns.
    pub mixing: Array2<f64>,
    pub variances: Vec<f64>,
}

impl SynthData {
    pub fn observations(&self) -> ArrayView2<'_, f64> {
        self.dataset.observations.view()
    }
}

const SYNTH_TAGS: [FactorTag; 4] = [FactorTag::Shape, FactorTag::Scale, FactorTag::Orientation, FactorTag::Position];

/// Factors drawn uniformly from a centered grid with the requested
/// variances, mixed into `obs_dim` dimensions by a random isometry.
pub fn gen_factor_data(cfg: &FactorDataConfig) -> Result<SynthData> {
    let (k, n, obs) = (cfg.k, cfg.n, cfg.obs_dim);
    if k == 0 || obs < k {
        return Err(Error::InvalidParameter(format!("need 1 <= k <= obs_dim, got k={k}, obs_dim={obs}")));
    }
    if cfg.levels < 2 {
        return Err(Error::InvalidParameter("need at least 2 levels per factor".into()));
    }
    let variances = cfg.factor_variances();
    if variances.len() != k || variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter(format!("need {k} positive variances, got {variances:?}")));
    }
    let mut rng = stream(cfg.seed, 0);
    let g = gaussian(&mut rng, (obs, k), 1.0);
    let q = DMatrix::from_fn(obs, k, |i, j| g[[i, j]]).qr().q();
    let mixing = Array2::from_shape_fn((obs, k), |(i, j)| q[(i, j)]);

    let l = cfg.levels;
    let centre = (l as f64 - 1.0) / 2.0;
    let steps: Vec<f64> = variances.iter().map(|v| (12.0 * v / (l * l - 1) as f64).sqrt()).collect();
    let classes = Array2::from_shape_simple_fn((n, k), || rng.random_range(0..l));
    let values = Array2::from_shape_fn((n, k), |(i, f)| (classes[[i, f]] as f64 - centre) * steps[f]);
    let mut x = par_dot(values.view(), mixing.t());
    if cfg.noise_std > 0.0 {
        x += &gaussian(&mut rng, (n, obs), cfg.noise_std);
    }
    let tags = (0..k).map(|f| SYNTH_TAGS[f.min(3)]).collect();
    let dataset = FactorDataset::new(x, classes, values, vec![l; k], tags)?;
    Ok(SynthData {
        dataset,
        mixing,
        variances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "delta")]
pub enum Regime {
    /// Latent-wise ordered weight decay pins each latent to one principal
    /// direction.
    AxisAligned,
    /// Plain reconstruction loss; solutions agree only up to rotation.
    RotationFree,
    /// Base trajectory plus a scaled random field per realization.
    Perturbed(f64),
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis_aligned" => Ok(Self::AxisAligned),
            "rotation_free" => Ok(Self::RotationFree),
            _ => {
                let delta = s
                    .strip_prefix("perturbed:")
                    .and_then(|d| d.parse::<f64>().ok())
                    .filter(|d| *d >= 0.0 && d.is_finite());
                delta.map(Self::Perturbed).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "unknown regime {s:?}; expected axis_aligned, rotation_free or perturbed:<delta>"
                    ))
                })
            }
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::AxisAligned => f.write_str("axis_aligned"),
            Self::RotationFree => f.write_str("rotation_free"),
            Self::Perturbed(d) => write!(f, "perturbed:{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub regime: Regime,
    pub k_factors: usize,
    pub obs_dim: usize,
    pub n_epochs: usize,
    pub m_trace: usize,
    pub learning_rate: f64,
    /// Gradient steps between recorded epochs.
    pub steps_per_epoch: usize,
    /// Std of the initial weights.
    pub init_scale: f64,
    pub reg_weight: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            regime: Regime::AxisAligned,
            k_factors: 4,
            obs_dim: 12,
            n_epochs: 15,
            m_trace: 64,
            learning_rate: 0.05,
            steps_per_epoch: 200,
            init_scale: 0.2,
            reg_weight: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k_factors == 0 || self.obs_dim < self.k_factors {
            return bad(format!("need 1 <= k_factors <= obs_dim, got {} and {}", self.k_factors, self.obs_dim));
        }
        if self.n_epochs < 2 || self.m_trace < 2 {
            return bad("need at least 2 epochs and 2 trace samples".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.reg_weight >= 0.0) || !(self.init_scale >= 0.0) {
            return bad("learning_rate, reg_weight and init_scale must be nonnegative".into());
        }
        if let Regime::Perturbed(d) = self.regime {
            if !(d >= 0.0) {
                return bad(format!("delta must be nonnegative, got {d}"));
            }
        }
        Ok(())
    }

    /// Weight decay per latent: `reg_weight * (j + 1) / k`.
    pub fn decay(&self) -> Array1<f64> {
        match self.regime {
            Regime::AxisAligned => Array1::from_shape_fn(self.k_factors, |j| {
                self.reg_weight * (j + 1) as f64 / self.k_factors as f64
            }),
            _ => Array1::zeros(self.k_factors),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `(k, obs_dim)`
    pub encoder: Array2<f64>,
    /// `(obs_dim, k)`
    pub decoder: Array2<f64>,
}

impl LinearModel {
    /// Latent codes `E x` for each row of `x`.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        par_dot(x, self.encoder.t())
    }

    pub fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        par_dot(self.encode(x).view(), self.decoder.t())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub trace: TraceTensor,
    pub model: LinearModel,
    /// Reconstruction loss after each epoch.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on mean squared reconstruction error plus
/// the regime's weight decay. Records decoder outputs on the first
/// `m_trace` observations after every epoch.
pub fn train_linear_ae(spec: &SynthSpec, data: &SynthData) -> Result<TrainedModel> {
    spec.validate()?;
    if matches!(spec.regime, Regime::Perturbed(_)) {
        return Err(Error::InvalidParameter("perturbed regime is generated, not trained".into()));
    }
    let x = data.observations();
    let (n, obs) = x.dim();
    if obs != spec.obs_dim {
        return Err(Error::ShapeMismatch(format!("data has {obs} dims, spec expects {}", spec.obs_dim)));
    }
    if n < spec.m_trace {
        return Err(Error::InvalidParameter(format!("{n} observations but m_trace = {}", spec.m_trace)));
    }
    let k = spec.k_factors;
    let cov = par_dot(x.t(), x) / n as f64;
    let trace_x = x.slice(s![..spec.m_trace, ..]);
    let lam = spec.decay();

    let mut rng = stream(spec.seed, 1);
    let mut e = gaussian(&mut rng, (k, obs), spec.init_scale);
    let mut d = gaussian(&mut rng, (obs, k), spec.init_scale);
    let eye = Array2::<f64>::eye(obs);
    let lr = spec.learning_rate;

    let mut values = Array3::<f64>::zeros((spec.n_epochs, spec.m_trace, obs));
    let mut losses = Vec::with_capacity(spec.n_epochs);
    for epoch in 0..spec.n_epochs {
        let mut loss = 0.0;
        for _ in 0..spec.steps_per_epoch {
            // residual operator R = DE - I; loss = tr(R C R^T)
            let r = d.dot(&e) - &eye;
            let rc = r.dot(&cov);
            loss = (&rc * &r).sum();
            let grad_d = 2.0 * rc.dot(&e.t()) + 2.0 * &d * lam.view().insert_axis(Axis(0));
            let grad_e = 2.0 * d.t().dot(&rc) + 2.0 * &e * lam.view().insert_axis(Axis(1));
            d.scaled_add(-lr, &grad_d);
            e.scaled_add(-lr, &grad_e);
        }
        if !loss.is_finite() || d.iter().chain(e.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss });
        }
        let model = LinearModel {
            encoder: e.clone(),
            decoder: d.clone(),
        };
        values.slice_mut(s![epoch, .., ..]).assign(&model.reconstruct(trace_x));
        losses.push(loss);
    }
    let trace = TraceTensor::from_f64(&values)?;
    Ok(TrainedModel {
        trace,
        model: LinearModel { encoder: e, decoder: d },
        losses,
    })
}

/// Trains `n_realizations` copies of `spec` with seeds `spec.seed + r`.
pub fn train_ensemble(spec: &SynthSpec, data: &SynthData, n_realizations: usize) -> Result<Vec<TrainedModel>> {
    (0..n_realizations)
        .into_par_iter()
        .map(|r| {
            let s = SynthSpec {
                seed: spec.seed.wrapping_add(r as u64),
                ..spec.clone()
            };
            train_linear_ae(&s, data)
        })
        .collect()
}

/// A smooth random field over `(epoch, sample, unit)`: per-entry offset
/// plus two low-frequency sinusoids in epoch.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> Array3<f64> {
    let mut f = Array3::zeros((n, m, p));
    let span = (n.max(2) - 1) as f64;
    for i in 0..m {
        for u in 0..p {
            let offset: f64 = StandardNormal.sample(rng);
            let mut waves = [(0.0, 0.0, 0.0); 2];
            for (h, w) in waves.iter_mut().enumerate() {
                let amp: f64 = StandardNormal.sample(rng);
                let freq = (h + 1) as f64 * std::f64::consts::PI * rng.random_range(0.5..1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                *w = (amp, freq, phase);
            }
            for tau in 0..n {
                let x = tau as f64 / span;
                f[[tau, i, u]] = offset + waves.iter().map(|(a, fr, ph)| a * (fr * x + ph).sin()).sum::<f64>();
            }
        }
    }
    f
}

fn unit_rms(mut f: Array3<f64>) -> Array3<f64> {
    let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    if rms > 0.0 {
        f /= rms;
    }
    f
}

/// Realization `r` is `base + delta * field_r` with `field_r` smooth in
/// epoch and of unit RMS.
pub fn gen_perturbed_trajectories(
    base_seed: u64,
    delta: f64,
    n_realizations: usize,
    n_epochs: usize,
    m: usize,
    p: usize,
) -> Result<Vec<TraceTensor>> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("delta must be finite and nonnegative, got {delta}")));
    }
    let base = smooth_field(&mut stream(base_seed, 0), n_epochs, m, p);
    (0..n_realizations)
        .map(|r| {
            let field = unit_rms(smooth_field(&mut stream(base_seed, r as u64 + 1), n_epochs, m, p));
            TraceTensor::from_f64(&(&base + &(field * delta)))
        })
        .collect()
}
