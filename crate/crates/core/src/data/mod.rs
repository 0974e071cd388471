//! Datasets: IDX digits, spectral CSV tables and synthetic uniform patterns.

mod idx;
mod spectral;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use idx::{
    encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, read_idx_images,
    read_idx_labels, write_idx_images, write_idx_labels, IdxImages, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use spectral::{load_spectral_csv, read_spectral_csv, SpectralOptions};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::noise::RngStream;
use crate::scalar::Scalar;

/// Environment variable overriding the dataset directory.
pub const DATA_DIR_ENV: &str = "SPC_DATA_DIR";

/// `$SPC_DATA_DIR`, or `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Samples as matrix rows in `[0, 1]`, with labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    samples: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: String,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        samples: Matrix<T>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: samples.rows(),
                actual: labels.len(),
                context: "label count vs sample count",
            });
        }
        if num_classes == 0 {
            return Err(Error::Parameter("class count must be positive".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {} of sample {i} is outside [0, {num_classes})",
                labels[i]
            )));
        }
        if let Some(pos) = samples
            .as_slice()
            .iter()
            .position(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            let n = samples.cols().max(1);
            return Err(Error::Domain(format!(
                "sample {} pixel {} is outside [0, 1]",
                pos / n,
                pos % n
            )));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            provenance: provenance.into(),
        })
    }

    /// A single-class dataset.
    pub fn unlabeled(samples: Matrix<T>, provenance: impl Into<String>) -> Result<Self> {
        let labels = vec![0; samples.rows()];
        Self::new(samples, labels, 1, provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_pixels(&self) -> usize {
        self.samples.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &Matrix<T> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[T] {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.num_pixels();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            samples: Matrix::new(indices.len(), n, data).expect("row lengths are uniform"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// IDX images with pixels scaled to `[0, 1]`, before any preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages<T> {
    pub images: Matrix<T>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Scalar> RawImages<T> {
    pub fn from_idx(images: &IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.count() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: images.count(),
                actual: labels.len(),
                context: "IDX label count vs image count",
            });
        }
        let inv = T::lit(1.0 / 255.0);
        let data = images
            .pixels
            .iter()
            .map(|&p| if p == 255 { T::one() } else { T::lit(p as f64) * inv })
            .collect();
        Ok(Self {
            images: Matrix::new(labels.len(), images.rows * images.cols, data)?,
            labels,
            rows: images.rows,
            cols: images.cols,
        })
    }
}

pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<RawImages<T>> {
    let img = read_idx_images(images)?;
    let lbl = read_idx_labels(labels)?;
    if img.count() != lbl.len() {
        return Err(Error::Parse {
            source_name: labels.display().to_string(),
            offset: 4,
            message: format!("{} labels for {} images", lbl.len(), img.count()),
        });
    }
    RawImages::from_idx(&img, lbl)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MnistPart {
    Train,
    Test,
}

/// Standard file names of an MNIST part under `dir`.
pub fn mnist_paths(dir: &Path, part: MnistPart) -> (PathBuf, PathBuf) {
    let prefix = match part {
        MnistPart::Train => "train",
        MnistPart::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Side of the padded digit frame.
pub const MNIST_PADDED_SIDE: usize = 32;
/// Value of a black pixel after preprocessing.
pub const MNIST_FLOOR: f64 = 0.3;

/// Zero-pads 28×28 digits to 32×32, then maps every pixel `p → 0.3 + 0.7 p`
/// so the padding lands at 0.3 too.
pub fn preprocess_mnist<T: Scalar>(raw: &RawImages<T>) -> Result<LabeledDataset<T>> {
    if raw.rows != 28 || raw.cols != 28 {
        return Err(Error::InvalidDimension(format!(
            "expected 28x28 digits, got {}x{}",
            raw.rows, raw.cols
        )));
    }
    let side = MNIST_PADDED_SIDE;
    let pad = (side - 28) / 2;
    let lo = T::lit(MNIST_FLOOR);
    let span = T::lit(1.0 - MNIST_FLOOR);
    let count = raw.labels.len();
    let mut data = vec![lo; count * side * side];
    for (i, img) in raw.images.row_iter().enumerate() {
        let out = &mut data[i * side * side..(i + 1) * side * side];
        for r in 0..28 {
            for c in 0..28 {
                let p = img[r * 28 + c];
                out[(r + pad) * side + c + pad] = if p == T::one() { T::one() } else { lo + span * p };
            }
        }
    }
    let labels: Vec<usize> = raw.labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    LabeledDataset::new(
        Matrix::new(count, side * side, data)?,
        labels,
        num_classes,
        "mnist",
    )
}

/// Loads and preprocesses one MNIST part from `dir`.
pub fn load_mnist<T: Scalar>(dir: &Path, part: MnistPart) -> Result<LabeledDataset<T>> {
    let (images, labels) = mnist_paths(dir, part);
    preprocess_mnist(&load_idx::<T>(&images, &labels)?)
}

/// `count` i.i.d. `U(0, 1)` vectors of length `n`.
pub fn random_patterns<T: Scalar>(count: usize, n: usize, seed: u64) -> Result<LabeledDataset<T>> {
    PatternSource::new(count, n, seed, None)?.generation(0)
}

/// Uniform random training patterns, optionally redrawn every `k` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSource {
    pub count: usize,
    pub num_pixels: usize,
    pub seed: u64,
    pub regenerate_every: Option<usize>,
}

impl PatternSource {
    pub fn new(count: usize, num_pixels: usize, seed: u64, regenerate_every: Option<usize>) -> Result<Self> {
        if count == 0 || num_pixels == 0 {
            return Err(Error::Parameter(format!(
                "pattern count and length must be positive, got {count}x{num_pixels}"
            )));
        }
        if regenerate_every == Some(0) {
            return Err(Error::Parameter("regeneration period must be positive".into()));
        }
        Ok(Self {
            count,
            num_pixels,
            seed,
            regenerate_every,
        })
    }

    /// Index of the pattern generation used at `epoch`.
    pub fn generation_for_epoch(&self, epoch: usize) -> usize {
        self.regenerate_every.map_or(0, |k| epoch / k)
    }

    pub fn generation<T: Scalar>(&self, g: usize) -> Result<LabeledDataset<T>> {
        let mut rng = RngStream::new(self.seed, g as u64).rng();
        let data = (0..self.count * self.num_pixels)
            .map(|_| T::lit(rng.gen::<f64>()))
            .collect();
        LabeledDataset::unlabeled(Matrix::new(self.count, self.num_pixels, data)?, "uniform")
    }
}

/// Fractions of a seeded shuffle assigned to training and validation; the
/// remainder is the test partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, seed: u64) -> Result<Self> {
        let s = Self {
            train,
            validation,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train) || !ok(self.validation) || self.train + self.validation > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to at most 1, got {} + {}",
                self.train, self.validation
            )));
        }
        Ok(())
    }

    pub fn test_fraction(&self) -> f64 {
        (1.0 - self.train - self.validation).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: LabeledDataset<T>,
    pub validation: LabeledDataset<T>,
    pub test: LabeledDataset<T>,
}

impl<T: Scalar> Split<T> {
    /// Per-partition class counts in (train, validation, test) order.
    pub fn class_counts(&self) -> [Vec<usize>; 3] {
        [
            self.train.class_counts(),
            self.validation.class_counts(),
            self.test.class_counts(),
        ]
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    permutation(n, &mut RngStream::new(seed, 0).rng())
}

pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub fn split<T: Scalar>(dataset: &LabeledDataset<T>, spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    let n = dataset.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.validation * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, frac, size) in [
        ("train", spec.train, n_train),
        ("validation", spec.validation, n_val),
        ("test", spec.test_fraction(), n_test),
    ] {
        if frac > 1e-12 && size == 0 {
            return Err(Error::Config(format!(
                "{name} partition is empty ({frac} of {n} samples)"
            )));
        }
    }
    if n_train == 0 {
        return Err(Error::Config("train partition is empty".into()));
    }
    let idx = shuffled_indices(n, spec.seed);
    Ok(Split {
        train: dataset.subset(&idx[..n_train]),
        validation: dataset.subset(&idx[n_train..n_train + n_val]),
        test: dataset.subset(&idx[n_train + n_val..]),
    })
}

/// Order-sensitive fingerprint of a label/index sequence, used to compare
/// permutations.
pub fn sequence_fingerprint(values: &[usize]) -> u64 {
    let mut h = DefaultHasher::new();
    values.hash(&mut h);
    h.finish()
}
