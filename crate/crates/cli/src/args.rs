use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynorank::embedding::{EmbedParams, Weighting};
use dynorank::metrics::{MetricConfig, NoiseModel};
use dynorank::multislice::{EpsilonMode, KernelParams};
use dynorank::pipeline::RankParams;
use dynorank::rank_stats::Method;
use dynorank::stability::{Bandwidth, Estimator, MmdParams, Pooling};
use dynorank::svd::SvdOptions;

pub const DEFAULTS: &str = "\
Defaults:
  trace samples (m)      64
  diffusion time (t)     8
  embedding dim (d)      20
  kNN rank (knn_k)       5
  intraslice exponent    2
  interslice epsilon     median
  singular weighting     on
  MMD estimator          biased
  MMD bandwidth          median heuristic
  MMD pooling            pooled";

#[derive(Debug, Parser)]
#[command(name = "dynorank", version, about = "Rank VAE specifications by the stability of their decoder dynamics")]
#[command(after_help = DEFAULTS)]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "DYNORANK_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every spec of an ensemble and write the ranking.
    #[command(after_help = DEFAULTS)]
    Rank(RankArgs),
    /// Dump the joint embedding of one spec group.
    #[command(after_help = DEFAULTS)]
    Embed(EmbedArgs),
    /// Supervised disentanglement and fairness scores.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Correlate two score files.
    Correlate(CorrelateArgs),
    /// Write a synthetic ensemble that `rank` can consume.
    Synth(SynthArgs),
    /// Summarise a dSprites-style archive.
    DspritesInspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Pooled,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Singular,
    None,
}

/// `median` or a positive number.
#[derive(Debug, Clone, Copy)]
pub enum Scale {
    Median,
    Fixed(f64),
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    if s == "median" {
        return Ok(Scale::Median);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Scale::Fixed(v)),
        _ => Err(format!("expected `median` or a positive number, got {s:?}")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Intraslice distance exponent.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// Neighbour rank for the adaptive intraslice bandwidth.
    #[arg(long, default_value_t = 5)]
    pub knn_k: usize,
    /// Interslice bandwidth: `median` or a fixed value.
    #[arg(long, default_value = "median", value_parser = parse_scale)]
    pub epsilon: Scale,
    /// Z-score units within each epoch before intraslice distances.
    #[arg(long)]
    pub standardize: bool,
    /// Diffusion time.
    #[arg(short = 't', long = "time", default_value_t = 8)]
    pub t: usize,
    /// Embedding dimension.
    #[arg(short = 'd', long = "dim", default_value_t = 20)]
    pub d: usize,
    #[arg(long, value_enum, default_value = "singular")]
    pub weighting: WeightingArg,
    #[arg(long, default_value_t = 0x5eed)]
    pub svd_seed: u64,
    #[arg(long, value_enum, default_value = "biased")]
    pub estimator: EstimatorArg,
    /// MMD bandwidth: `median` or a fixed value.
    #[arg(long, default_value = "median", value_parser = parse_scale)]
    pub bandwidth: Scale,
    #[arg(long, value_enum, default_value = "pooled")]
    pub pooling: PoolingArg,
}

impl PipelineArgs {
    pub fn embed_params(&self) -> EmbedParams {
        EmbedParams {
            kernel: KernelParams {
                alpha: self.alpha,
                knn_k: self.knn_k,
                epsilon: match self.epsilon {
                    Scale::Median => EpsilonMode::Median,
                    Scale::Fixed(v) => EpsilonMode::Fixed(v),
                },
                standardize: self.standardize,
                ..KernelParams::default()
            },
            t: self.t,
            d: self.d,
            weighting: match self.weighting {
                WeightingArg::Singular => Weighting::Singular,
                WeightingArg::None => Weighting::None,
            },
            svd: SvdOptions {
                seed: self.svd_seed,
                ..SvdOptions::default()
            },
        }
    }

    pub fn rank_params(&self) -> RankParams {
        RankParams {
            embed: self.embed_params(),
            mmd: MmdParams {
                estimator: match self.estimator {
                    EstimatorArg::Biased => Estimator::Biased,
                    EstimatorArg::Unbiased => Estimator::Unbiased,
                },
                bandwidth: match self.bandwidth {
                    Scale::Median => Bandwidth::MedianHeuristic,
                    Scale::Fixed(v) => Bandwidth::Fixed(v),
                },
                pooling: match self.pooling {
                    PoolingArg::Pooled => Pooling::Pooled,
                    PoolingArg::PerEpoch => Pooling::PerEpoch,
                },
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Ensemble manifest (JSON).
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub spec: String,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    BetaVae(CodeMetricArgs),
    FactorVae(CodeMetricArgs),
    Mig(CodeMetricArgs),
    /// Mean total-variation unfairness of predictions w.r.t. a sensitive attribute.
    Unfairness(UnfairnessArgs),
}

#[derive(Debug, Args)]
pub struct CodeMetricArgs {
    /// `(N, dz)` latent codes (NPY).
    #[arg(long)]
    pub codes: PathBuf,
    /// Labelled dataset archive (`.npz`, dSprites layout).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub samples_per_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.05)]
    pub variance_prune_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub classifier_lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub classifier_epochs: usize,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

impl CodeMetricArgs {
    pub fn config(&self) -> MetricConfig {
        MetricConfig {
            batches: self.batches,
            samples_per_batch: self.samples_per_batch,
            seed: self.seed,
            bins: self.bins,
            variance_prune_threshold: self.variance_prune_threshold,
            classifier_lr: self.classifier_lr,
            classifier_epochs: self.classifier_epochs,
        }
    }
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// Label noise: 1, 2, 3 or `custom` (uses the --p-* flags).
    #[arg(long)]
    pub noise_model: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub p_shape: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_orient: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_pos: f64,
    #[arg(long, default_value_t = 1.0)]
    pub continuous_sigma: f64,
}

impl NoiseArgs {
    pub fn resolve(&self) -> dynorank::Result<Option<NoiseModel>> {
        let Some(kind) = self.noise_model.as_deref() else {
            return Ok(None);
        };
        let mut model = match kind {
            "custom" => NoiseModel::new(self.p_shape, self.p_scale, self.p_orient, self.p_pos),
            level => {
                let level = level.parse::<u8>().map_err(|_| {
                    dynorank::Error::InvalidParameter(format!("noise model must be 1, 2, 3 or custom, got {level:?}"))
                })?;
                NoiseModel::preset(level)?
            }
        };
        model.continuous_sigma = self.continuous_sigma;
        model.validate()?;
        Ok(Some(model))
    }
}

#[derive(Debug, Args)]
pub struct UnfairnessArgs {
    /// Integer predictions, `(N,)` or `(targets, N)` (NPY).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Integer sensitive attribute, `(N,)` (NPY).
    #[arg(long)]
    pub sensitive: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Spearman,
    Pearson,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Spearman => Method::Spearman,
            MethodArg::Pearson => Method::Pearson,
        }
    }
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    pub scores_a: PathBuf,
    pub scores_b: PathBuf,
    #[arg(long, value_enum, default_value = "spearman")]
    pub method: MethodArg,
    /// Negate the first score vector (MMD is lower-is-better).
    #[arg(long)]
    pub negate_a: bool,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `axis_aligned`, `rotation_free` or `perturbed:<delta>`; repeat for several specs.
    #[arg(long = "regime", required = true)]
    pub regimes: Vec<String>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub realizations: usize,
    /// Seed of the first realization of the first spec.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Added to the seed for each further spec.
    #[arg(long, default_value_t = 1000)]
    pub seed_stride: u64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n_data: usize,
    #[arg(long, default_value_t = 4)]
    pub k_factors: usize,
    #[arg(long, default_value_t = 12)]
    pub obs_dim: usize,
    #[arg(long, default_value_t = 15)]
    pub n_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub m_trace: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 200)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 0.6)]
    pub reg_weight: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub archive: PathBuf,
    /// Also decode and check the image array.
    #[arg(long)]
    pub images: bool,
}
