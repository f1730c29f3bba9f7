use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::npy;
use crate::error::{Error, Result};

/// How a factor column is perturbed by a noise model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorTag {
    /// Categorical; perturbed by uniform resampling.
    Shape,
    /// Ordinal factors, perturbed by rounded Gaussian index noise.
    Scale,
    Orientation,
    Position,
    /// Never perturbed (e.g. the constant colour column of dSprites).
    Fixed,
    /// No perturbation rule known; noise models refuse to touch it.
    Untagged,
}

impl FromStr for FactorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shape" => FactorTag::Shape,
            "scale" | "size" => FactorTag::Scale,
            "orientation" | "rotation" => FactorTag::Orientation,
            "position" | "pos_x" | "pos_y" => FactorTag::Position,
            "fixed" | "color" => FactorTag::Fixed,
            other => return Err(Error::InvalidParameter(format!("unknown factor tag {other:?}"))),
        })
    }
}

/// Column layout of the public dSprites archive:
/// colour, shape, scale, orientation, x position, y position.
pub const DSPRITES_TAGS: [FactorTag; 6] = [
    FactorTag::Fixed,
    FactorTag::Shape,
    FactorTag::Scale,
    FactorTag::Orientation,
    FactorTag::Position,
    FactorTag::Position,
];

/// Observations paired with ground-truth generative factor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    /// `(N, obs_dim)`; `obs_dim` may be 0 when images were not loaded.
    pub observations: Array2<f64>,
    /// `(N, F)` class index of every factor.
    pub factor_classes: Array2<usize>,
    /// `(N, F)` physical factor values.
    pub factor_values: Array2<f64>,
    pub factor_sizes: Vec<usize>,
    pub factor_tags: Vec<FactorTag>,
}

impl FactorDataset {
    pub fn new(
        observations: Array2<f64>,
        factor_classes: Array2<usize>,
        factor_values: Array2<f64>,
        factor_sizes: Vec<usize>,
        factor_tags: Vec<FactorTag>,
    ) -> Result<Self> {
        let d = Self {
            observations,
            factor_classes,
            factor_values,
            factor_sizes,
            factor_tags,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, f) = self.factor_classes.dim();
        if self.observations.nrows() != n || self.factor_values.dim() != (n, f) {
            return Err(Error::ShapeMismatch(format!(
                "{} observations, {:?} class labels, {:?} factor values",
                self.observations.nrows(),
                (n, f),
                self.factor_values.dim()
            )));
        }
        if self.factor_sizes.len() != f || self.factor_tags.len() != f {
            return Err(Error::ShapeMismatch(format!(
                "{f} factor columns but {} sizes and {} tags",
                self.factor_sizes.len(),
                self.factor_tags.len()
            )));
        }
        for ((row, col), &c) in self.factor_classes.indexed_iter() {
            if c >= self.factor_sizes[col] {
                return Err(Error::InvalidParameter(format!(
                    "class {c} at ({row}, {col}) exceeds factor size {}",
                    self.factor_sizes[col]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.factor_classes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_factors(&self) -> usize {
        self.factor_sizes.len()
    }

    pub fn classes_of(&self, factor: usize) -> ArrayView1<'_, usize> {
        self.factor_classes.column(factor)
    }

    /// Full factorial grid over `sizes` without observations; factor values
    /// equal class indices.
    pub fn grid(sizes: &[usize], tags: Vec<FactorTag>) -> Result<Self> {
        let n: usize = sizes.iter().product();
        let f = sizes.len();
        let mut classes = Array2::zeros((n, f));
        for row in 0..n {
            let mut rem = row;
            for col in (0..f).rev() {
                classes[[row, col]] = rem % sizes[col];
                rem /= sizes[col];
            }
        }
        let values = classes.mapv(|c| c as f64);
        Self::new(Array2::zeros((n, 0)), classes, values, sizes.to_vec(), tags)
    }

    /// True when every combination of factor classes occurs exactly once.
    pub fn is_full_grid(&self) -> bool {
        let n: usize = self.factor_sizes.iter().product();
        if n != self.len() {
            return false;
        }
        let mut seen = vec![false; n];
        for row in self.factor_classes.rows() {
            let mut flat = 0;
            for (c, s) in row.iter().zip(&self.factor_sizes) {
                flat = flat * s + c;
            }
            if std::mem::replace(&mut seen[flat], true) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct DspritesOptions {
    /// Decode the image array into `observations` (12 GB as f64 for the
    /// full archive). When false only its shape is checked.
    pub images: bool,
    /// Overrides the default column tags.
    pub tags: Option<Vec<FactorTag>>,
}

/// Loads labels and images from a dSprites-style `.npz` archive.
pub fn load_dsprites(path: impl AsRef<Path>) -> Result<FactorDataset> {
    load_dsprites_with(
        path,
        &DspritesOptions {
            images: true,
            tags: None,
        },
    )
}

/// Loads a dSprites-style archive with members `imgs`, `latents_classes`
/// and `latents_values`. Other members (the pickled `metadata`) are ignored.
pub fn load_dsprites_with(path: impl AsRef<Path>, opts: &DspritesOptions) -> Result<FactorDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = zip::ZipArchive::new(std::io::BufReader::new(file))
        .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;

    fn member<'a, R: Read + std::io::Seek>(
        archive: &'a mut zip::ZipArchive<R>,
        name: &str,
    ) -> Result<zip::read::ZipFile<'a, R>> {
        let with_ext = format!("{name}.npy");
        if archive.index_for_name(&with_ext).is_some() {
            archive.by_name(&with_ext)
        } else {
            archive.by_name(name)
        }
        .map_err(|_| Error::Archive(format!("archive has no member {name:?}")))
    }

    let classes = npy::NpyArray::read(&mut member(&mut archive, "latents_classes")?)?;
    let values = npy::NpyArray::read(&mut member(&mut archive, "latents_values")?)?;
    let (observations, n_images) = {
        let mut imgs = member(&mut archive, "imgs")?;
        if opts.images {
            let arr = npy::NpyArray::read(&mut imgs)?;
            let n = *arr.shape.first().unwrap_or(&0);
            let dim = arr.shape.iter().skip(1).product::<usize>();
            let obs = Array2::from_shape_vec((n, dim), arr.to_f64())
                .map_err(|e| Error::Npy(e.to_string()))?;
            (Some(obs), n)
        } else {
            let header = npy::Header::read(&mut imgs)?;
            (None, *header.shape.first().unwrap_or(&0))
        }
    };

    if classes.shape.len() != 2 || values.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "label arrays must be 2-d, got {:?} and {:?}",
            classes.shape, values.shape
        )));
    }
    if classes.shape != values.shape || classes.shape[0] != n_images {
        return Err(Error::ShapeMismatch(format!(
            "{n_images} images, latents_classes {:?}, latents_values {:?}",
            classes.shape, values.shape
        )));
    }
    let (n, f) = (classes.shape[0], classes.shape[1]);
    let raw = classes.to_i64()?;
    if let Some(bad) = raw.iter().position(|&c| c < 0) {
        return Err(Error::InvalidParameter(format!(
            "negative class label at ({}, {})",
            bad / f.max(1),
            bad % f.max(1)
        )));
    }
    let factor_classes = Array2::from_shape_vec((n, f), raw.into_iter().map(|c| c as usize).collect())
        .map_err(|e| Error::Npy(e.to_string()))?;
    let factor_values = Array2::from_shape_vec((n, f), values.to_f64())
        .map_err(|e| Error::Npy(e.to_string()))?;
    let factor_sizes = (0..f)
        .map(|col| factor_classes.column(col).iter().max().map_or(0, |m| m + 1))
        .collect();
    let factor_tags = match &opts.tags {
        Some(t) => t.clone(),
        None if f == 6 => DSPRITES_TAGS.to_vec(),
        None if f == 5 => DSPRITES_TAGS[1..].to_vec(),
        None => vec![FactorTag::Untagged; f],
    };
    FactorDataset::new(
        observations.unwrap_or_else(|| Array2::zeros((n, 0))),
        factor_classes,
        factor_values,
        factor_sizes,
        factor_tags,
    )
}

/// Writes a dataset as a dSprites-layout archive. Observations are stored
/// as `<f8` with shape `(N, obs_dim)`.
pub fn write_factor_archive(d: &FactorDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let zip_err = |e: zip::result::ZipError| Error::Archive(e.to_string());

    let (n, f) = d.factor_classes.dim();
    zip.start_file("imgs.npy", opts).map_err(zip_err)?;
    let obs: Vec<f64> = d.observations.iter().copied().collect();
    npy::write_f64(&mut zip, &[n, d.observations.ncols()], &obs).map_err(io_err)?;
    zip.start_file("latents_classes.npy", opts).map_err(zip_err)?;
    let cls: Vec<i64> = d.factor_classes.iter().map(|&c| c as i64).collect();
    npy::write_i64(&mut zip, &[n, f], &cls).map_err(io_err)?;
    zip.start_file("latents_values.npy", opts).map_err(zip_err)?;
    let vals: Vec<f64> = d.factor_values.iter().copied().collect();
    npy::write_f64(&mut zip, &[n, f], &vals).map_err(io_err)?;
    zip.finish().map_err(zip_err)?.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleStrategy {
    Uniform,
    /// Balance counts across the classes of one factor.
    Stratified { factor: usize },
}

/// Picks `m` distinct dataset rows to serve as trace samples. The result
/// is sorted and depends only on `(d, m, seed, strategy)`.
pub fn select_trace_samples(
    d: &FactorDataset,
    m: usize,
    seed: u64,
    strategy: SampleStrategy,
) -> Result<Vec<usize>> {
    let n = d.len();
    if m > n {
        return Err(Error::InvalidParameter(format!(
            "cannot select {m} trace samples from {n} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = match strategy {
        SampleStrategy::Uniform => index::sample(&mut rng, n, m).into_vec(),
        SampleStrategy::Stratified { factor } => {
            if factor >= d.n_factors() {
                return Err(Error::InvalidParameter(format!(
                    "factor {factor} out of range ({} factors)",
                    d.n_factors()
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); d.factor_sizes[factor]];
            for (row, &c) in d.classes_of(factor).iter().enumerate() {
                pools[c].push(row);
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            // round-robin over classes in a seeded order: quotas differ by at most one
            let mut order: Vec<usize> = (0..pools.len()).collect();
            order.shuffle(&mut rng);
            let mut cursor = vec![0usize; pools.len()];
            let mut out = Vec::with_capacity(m);
            while out.len() < m {
                for &c in &order {
                    if out.len() == m {
                        break;
                    }
                    if cursor[c] < pools[c].len() {
                        out.push(pools[c][cursor[c]]);
                        cursor[c] += 1;
                    }
                }
            }
            out
        }
    };
    out.sort_unstable();
    Ok(out)
}
