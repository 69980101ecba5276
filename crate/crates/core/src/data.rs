//! Labeled input sources with disjoint meta-train / meta-test class splits.
//!
//! Samples are addressed by `(class, index)` and are a pure function of that
//! pair, so any consumer can draw reproducible, non-repeating samples without
//! sharing RNG state.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Globally unique class identifier across all sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

/// First sample index reserved for held-out measurements. Pre-training draws
/// below it, accuracy probes at or above it.
pub const HELDOUT_BASE: usize = 1 << 20;

/// Produces inputs for a class. Implementations must be deterministic.
pub trait ClassSampler: Send + Sync + fmt::Debug {
    fn input_shape(&self) -> &[usize];
    /// Number of stored samples for `class`; `None` for unbounded procedural sources.
    fn capacity(&self, class: ClassId) -> Option<usize>;
    fn sample(&self, class: ClassId, index: usize) -> Result<Vec<f64>>;
}

/// One split of one source.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub source_id: String,
    pub class_ids: Vec<ClassId>,
    pub input_shape: Vec<usize>,
    pub split: Split,
    sampler: Arc<dyn ClassSampler>,
}

impl DataSource {
    pub fn new(
        source_id: impl Into<String>,
        class_ids: Vec<ClassId>,
        split: Split,
        sampler: Arc<dyn ClassSampler>,
    ) -> Self {
        Self {
            source_id: source_id.into(),
            input_shape: sampler.input_shape().to_vec(),
            class_ids,
            split,
            sampler,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.class_ids.contains(&class)
    }

    pub fn capacity(&self, class: ClassId) -> Option<usize> {
        self.sampler.capacity(class)
    }

    pub fn sample(&self, class: ClassId, index: usize) -> Result<Vec<f64>> {
        if !self.contains(class) {
            return Err(Error::Input(format!(
                "class {class} is not part of the {:?} split of {}",
                self.split, self.source_id
            )));
        }
        self.sampler.sample(class, index)
    }

    /// Batch of samples for `(class, index)` pairs.
    pub fn batch(&self, items: &[(ClassId, usize)]) -> Result<Tensor> {
        let rows = items
            .iter()
            .map(|&(c, i)| self.sample(c, i))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&self.input_shape, &rows)
    }

    /// Indices usable for training samples of `class`, bounded by `wanted`.
    pub fn train_indices(&self, class: ClassId, wanted: usize) -> Vec<usize> {
        match self.capacity(class) {
            Some(n) => (0..wanted.min(n.saturating_sub(n / 5).max(1))).collect(),
            None => (0..wanted).collect(),
        }
    }

    /// Held-out indices for `class`, disjoint from [`Self::train_indices`].
    pub fn heldout_indices(&self, class: ClassId, wanted: usize) -> Vec<usize> {
        match self.capacity(class) {
            Some(n) => {
                let start = n.saturating_sub(n / 5).max(1).min(n);
                let avail: Vec<usize> = (start..n).collect();
                if avail.is_empty() {
                    return Vec::new();
                }
                (0..wanted).map(|k| avail[k % avail.len()]).collect()
            }
            None => (HELDOUT_BASE..HELDOUT_BASE + wanted).collect(),
        }
    }
}

/// Serializable description of a source family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// Gaussian class clusters living in a random low-dimensional subspace of
    /// `[0,1]^dim`, with isotropic nuisance noise on the complement.
    Gaussian {
        id: String,
        dim: usize,
        informative_dims: usize,
        train_classes: usize,
        test_classes: usize,
        spread: f64,
        within: f64,
        noise: f64,
        seed: u64,
    },
    /// Procedurally rendered single-channel stroke glyphs.
    Glyphs { id: String, img_size: usize, train_classes: usize, test_classes: usize, strokes: usize, seed: u64 },
    /// `root/<class>/<image>` directory tree; the last `test_fraction` of the
    /// sorted class folders form the meta-test split.
    Folder { id: String, root: PathBuf, img_size: usize, channels: usize, test_fraction: f64 },
}

impl SourceSpec {
    pub fn id(&self) -> &str {
        match self {
            SourceSpec::Gaussian { id, .. } | SourceSpec::Glyphs { id, .. } | SourceSpec::Folder { id, .. } => id,
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(match self {
            SourceSpec::Gaussian { train_classes, test_classes, .. }
            | SourceSpec::Glyphs { train_classes, test_classes, .. } => train_classes + test_classes,
            SourceSpec::Folder { root, .. } => list_class_dirs(root)?.len(),
        })
    }

    /// Builds the (meta-train, meta-test) splits with class ids starting at `offset`.
    pub fn build(&self, offset: u32) -> Result<SourcePair> {
        let (sampler, n_train, n_test): (Arc<dyn ClassSampler>, usize, usize) = match self {
            SourceSpec::Gaussian { dim, informative_dims, train_classes, test_classes, spread, within, noise, seed, .. } => {
                let s = GaussianClusters::new(
                    *dim,
                    *informative_dims,
                    train_classes + test_classes,
                    offset,
                    *spread,
                    *within,
                    *noise,
                    *seed,
                )?;
                (Arc::new(s), *train_classes, *test_classes)
            }
            SourceSpec::Glyphs { img_size, train_classes, test_classes, strokes, seed, .. } => {
                let s = Glyphs::new(*img_size, train_classes + test_classes, offset, *strokes, *seed)?;
                (Arc::new(s), *train_classes, *test_classes)
            }
            SourceSpec::Folder { root, img_size, channels, test_fraction, .. } => {
                let s = ImageFolder::load(root, *img_size, *channels, offset)?;
                let n = s.classes.len();
                let n_test = ((n as f64) * test_fraction).round() as usize;
                if n_test == 0 || n_test >= n {
                    return Err(Error::Config(format!(
                        "folder source {} with {n} classes cannot be split at fraction {test_fraction}",
                        root.display()
                    )));
                }
                (Arc::new(s), n - n_test, n_test)
            }
        };
        let train: Vec<ClassId> = (0..n_train as u32).map(|k| ClassId(offset + k)).collect();
        let test: Vec<ClassId> = (n_train as u32..(n_train + n_test) as u32).map(|k| ClassId(offset + k)).collect();
        Ok(SourcePair {
            train: DataSource::new(self.id(), train, Split::MetaTrain, sampler.clone()),
            test: DataSource::new(self.id(), test, Split::MetaTest, sampler),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SourcePair {
    pub train: DataSource,
    pub test: DataSource,
}

/// Builds every source with non-overlapping global class ids.
pub fn build_sources(specs: &[SourceSpec]) -> Result<Vec<SourcePair>> {
    let mut ids = BTreeSet::new();
    let mut offset = 0u32;
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        if !ids.insert(spec.id().to_string()) {
            return Err(Error::Config(format!("duplicate source id {}", spec.id())));
        }
        let pair = spec.build(offset)?;
        offset += (pair.train.class_ids.len() + pair.test.class_ids.len()) as u32;
        out.push(pair);
    }
    Ok(out)
}

/// splitmix64 finalizer; decorrelates nearby seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug)]
struct GaussianClusters {
    shape: Vec<usize>,
    basis: Vec<Vec<f64>>, // dim orthonormal columns, first `informative` span the class subspace
    means: Vec<Vec<f64>>,
    informative: usize,
    offset: u32,
    within: f64,
    noise: f64,
    seed: u64,
}

impl GaussianClusters {
    #[allow(clippy::too_many_arguments)]
    fn new(
        dim: usize,
        informative: usize,
        classes: usize,
        offset: u32,
        spread: f64,
        within: f64,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || informative == 0 || informative > dim {
            return Err(Error::Config(format!(
                "gaussian source needs 0 < informative_dims ({informative}) <= dim ({dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1]));
        // Gram-Schmidt on a Gaussian matrix gives a uniformly random rotation.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let means = (0..classes)
            .map(|_| (0..informative).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Ok(Self { shape: vec![dim], basis, means, informative, offset, within, noise, seed })
    }
}

impl ClassSampler for GaussianClusters {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn capacity(&self, _class: ClassId) -> Option<usize> {
        None
    }

    fn sample(&self, class: ClassId, index: usize) -> Result<Vec<f64>> {
        let k = class
            .0
            .checked_sub(self.offset)
            .map(|k| k as usize)
            .filter(|&k| k < self.means.len())
            .ok_or_else(|| Error::Input(format!("class {class} unknown to gaussian source")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 2, class.0 as u64, index as u64]));
        let dim = self.shape[0];
        let mut x = vec![0.5; dim];
        for (j, b) in self.basis.iter().enumerate() {
            let coef = if j < self.informative {
                self.means[k][j] + self.within * rng.sample::<f64, _>(StandardNormal)
            } else {
                self.noise * rng.sample::<f64, _>(StandardNormal)
            };
            x.iter_mut().zip(b).for_each(|(xi, bi)| *xi += coef * bi);
        }
        Ok(x)
    }
}

#[derive(Debug)]
struct Glyphs {
    shape: Vec<usize>,
    strokes: Vec<Vec<[f64; 4]>>,
    offset: u32,
    seed: u64,
}

impl Glyphs {
    fn new(img_size: usize, classes: usize, offset: u32, strokes: usize, seed: u64) -> Result<Self> {
        if img_size < 4 || strokes == 0 {
            return Err(Error::Config("glyph source needs img_size >= 4 and strokes >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 3]));
        let strokes = (0..classes)
            .map(|_| {
                (0..strokes)
                    .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                    .collect()
            })
            .collect();
        Ok(Self { shape: vec![1, img_size, img_size], strokes, offset, seed })
    }
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 < 1e-12 { 0.0 } else { (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (s[0] + t * dx - px, s[1] + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

impl ClassSampler for Glyphs {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn capacity(&self, _class: ClassId) -> Option<usize> {
        None
    }

    fn sample(&self, class: ClassId, index: usize) -> Result<Vec<f64>> {
        let k = class
            .0
            .checked_sub(self.offset)
            .map(|k| k as usize)
            .filter(|&k| k < self.strokes.len())
            .ok_or_else(|| Error::Input(format!("class {class} unknown to glyph source")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 4, class.0 as u64, index as u64]));
        let n = self.shape[1];
        let (sx, sy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
        let width = rng.random_range(0.05..0.09);
        let gain = rng.random_range(0.75..1.0);
        let mut img = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (px, py) = ((j as f64 + 0.5) / n as f64 - sx, (i as f64 + 0.5) / n as f64 - sy);
                let d = self.strokes[k].iter().map(|s| segment_distance(px, py, s)).fold(f64::INFINITY, f64::min);
                let ink = gain * (-(d / width).powi(2)).exp();
                let noise: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
                img.push((ink + noise).clamp(0.0, 1.0));
            }
        }
        Ok(img)
    }
}

#[derive(Debug)]
struct ImageFolder {
    shape: Vec<usize>,
    classes: Vec<Vec<Vec<f64>>>,
    offset: u32,
}

fn list_class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

impl ImageFolder {
    fn load(root: &Path, img_size: usize, channels: usize, offset: u32) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("folder source supports 1 or 3 channels, not {channels}")));
        }
        let mut classes = Vec::new();
        for dir in list_class_dirs(root)? {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut samples = Vec::new();
            for f in files {
                let img = match image::open(&f) {
                    Ok(img) => img,
                    Err(e) => {
                        log::warn!("skipping unreadable image {}: {e}", f.display());
                        continue;
                    }
                };
                let img = img.resize_exact(img_size as u32, img_size as u32, image::imageops::FilterType::Triangle);
                samples.push(image_to_chw(&img, channels));
            }
            if samples.is_empty() {
                return Err(Error::Config(format!("class folder {} holds no readable images", dir.display())));
            }
            classes.push(samples);
        }
        if classes.is_empty() {
            return Err(Error::Config(format!("no class folders under {}", root.display())));
        }
        Ok(Self { shape: vec![channels, img_size, img_size], classes, offset })
    }
}

fn image_to_chw(img: &image::DynamicImage, channels: usize) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if channels == 1 {
        img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect()
    } else {
        let rgb = img.to_rgb8();
        let mut out = vec![0.0; 3 * w * h];
        for (k, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * w * h + k] = p.0[c] as f64 / 255.0;
            }
        }
        out
    }
}

impl ClassSampler for ImageFolder {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn capacity(&self, class: ClassId) -> Option<usize> {
        class.0.checked_sub(self.offset).and_then(|k| self.classes.get(k as usize)).map(|c| c.len())
    }

    fn sample(&self, class: ClassId, index: usize) -> Result<Vec<f64>> {
        let c = class
            .0
            .checked_sub(self.offset)
            .and_then(|k| self.classes.get(k as usize))
            .ok_or_else(|| Error::Input(format!("class {class} unknown to folder source")))?;
        c.get(index)
            .cloned()
            .ok_or_else(|| Error::Sampling(format!("class {class} has {} images, index {index} requested", c.len())))
    }
}
