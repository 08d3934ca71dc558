//! Local datasets: declarative loader specs, IDX/CSV parsing, deterministic
//! train/validation splits, label histograms, and a synthetic digit-like
//! dataset for machines without MNIST.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idx;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        num_classes: usize,
    },
    #[error("invalid data loader spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    MnistIdx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    #[serde(rename = "none")]
    None,
    #[default]
    #[serde(rename = "scale_0_1")]
    Scale01,
}

fn default_val_fraction() -> f64 {
    0.1
}
fn default_num_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLoaderSpec {
    pub format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
}

impl DataLoaderSpec {
    pub fn mnist_idx(images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            format: DataFormat::MnistIdx,
            train_images: Some(images.into()),
            train_labels: Some(labels.into()),
            train_csv: None,
            val_fraction: default_val_fraction(),
            shuffle_seed: 0,
            normalization: Normalization::Scale01,
            num_classes: default_num_classes(),
        }
    }

    pub fn csv(path: impl Into<PathBuf>) -> Self {
        Self {
            format: DataFormat::Csv,
            train_images: None,
            train_labels: None,
            train_csv: Some(path.into()),
            ..Self::mnist_idx("", "")
        }
    }

    /// Resolves relative paths against `base` (usually the config file's
    /// directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        for path in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.train_csv,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

/// Which part of a [`LocalDataset`] to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Row-major feature matrix, labels, and a fixed train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset<T: Scalar> {
    features: Vec<T>,
    n_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl<T: Scalar> LocalDataset<T> {
    /// Builds a dataset and splits it: the first `⌊val_fraction · n⌋` rows of
    /// a seeded permutation become the validation set.
    pub fn new(
        features: Vec<T>,
        n_features: usize,
        labels: Vec<usize>,
        num_classes: usize,
        val_fraction: f64,
        shuffle_seed: u64,
    ) -> Result<Self, DataError> {
        if n_features == 0 && !labels.is_empty() {
            return Err(DataError::InvalidSpec("rows have no features".into()));
        }
        if features.len() != n_features * labels.len() {
            return Err(DataError::InvalidSpec(format!(
                "{} feature values do not fill {} rows of {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if !(0.0..=0.5).contains(&val_fraction) {
            return Err(DataError::InvalidSpec(
                "val_fraction must be in [0, 0.5]".into(),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                row,
                label: label as i64,
                num_classes,
            });
        }
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let n_val = (val_fraction * n as f64).floor() as usize;
        let mut val = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            features,
            n_features,
            labels,
            num_classes,
            train,
            val,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Label counts over every local row, train and validation alike.
    pub fn label_histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &label in &self.labels {
            counts[label] += 1;
        }
        counts
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn required<'a>(path: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, DataError> {
    path.as_deref()
        .ok_or_else(|| DataError::InvalidSpec(format!("{field} is required for this format")))
}

pub fn load_dataset<T: Scalar>(spec: &DataLoaderSpec) -> Result<LocalDataset<T>, DataError> {
    match spec.format {
        DataFormat::MnistIdx => load_idx(spec),
        DataFormat::Csv => load_csv(spec),
    }
}

fn load_idx<T: Scalar>(spec: &DataLoaderSpec) -> Result<LocalDataset<T>, DataError> {
    let images_path = required(&spec.train_images, "train_images")?;
    let labels_path = required(&spec.train_labels, "train_labels")?;
    let parse_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: idx::IdxError| DataError::Parse {
            path,
            offset: e.offset,
            reason: e.reason,
        }
    };
    let images = idx::parse_images(&read(images_path)?).map_err(parse_err(images_path))?;
    let labels = idx::parse_labels(&read(labels_path)?).map_err(parse_err(labels_path))?;
    if labels.len() != images.count {
        return Err(DataError::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            reason: format!(
                "{} labels for {} images",
                labels.len(),
                images.count
            ),
        });
    }
    let scale = match spec.normalization {
        Normalization::None => 1.0,
        Normalization::Scale01 => 1.0 / 255.0,
    };
    let features = images
        .pixels
        .iter()
        .map(|&p| T::of(p as f64 * scale))
        .collect();
    LocalDataset::new(
        features,
        images.rows * images.cols,
        labels.into_iter().map(usize::from).collect(),
        spec.num_classes,
        spec.val_fraction,
        spec.shuffle_seed,
    )
}

fn load_csv<T: Scalar>(spec: &DataLoaderSpec) -> Result<LocalDataset<T>, DataError> {
    let path = required(&spec.train_csv, "train_csv")?;
    let bytes = read(path)?;
    let parse = |offset: usize, reason: String| DataError::Parse {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| parse(0, e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| parse(0, "no column named \"label\"".into()))?;
    let n_features = headers.len() - 1;
    let mut features: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let offset = |r: &csv::StringRecord| r.position().map_or(0, |p| p.byte() as usize);
        let record = record.map_err(|e| {
            parse(
                e.position().map_or(0, |p| p.byte() as usize),
                e.to_string(),
            )
        })?;
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                parse(
                    offset(&record),
                    format!("row {row}, column {:?}: {field:?} is not a number", &headers[col]),
                )
            })?;
            if col == label_col {
                if value.fract() != 0.0 || value < 0.0 || value >= spec.num_classes as f64 {
                    return Err(DataError::LabelOutOfRange {
                        row,
                        label: value as i64,
                        num_classes: spec.num_classes,
                    });
                }
                labels.push(value as usize);
            } else {
                if !value.is_finite() {
                    return Err(parse(
                        offset(&record),
                        format!("row {row}: non-finite feature"),
                    ));
                }
                features.push(value);
            }
        }
    }
    if spec.normalization == Normalization::Scale01 && n_features > 0 {
        for col in 0..n_features {
            let column = features.iter().skip(col).step_by(n_features);
            let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let span = hi - lo;
            for v in features.iter_mut().skip(col).step_by(n_features) {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }
    LocalDataset::new(
        features.into_iter().map(T::of).collect(),
        n_features,
        labels,
        spec.num_classes,
        spec.val_fraction,
        spec.shuffle_seed,
    )
}

/// Synthetic 28x28 u8 "digits": ten seeded stroke prototypes, each sample
/// jittered, blended with a distractor class and corrupted with noise.
/// Deterministic for a given `(count, seed)`.
pub fn synthetic_digits(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    const SIDE: usize = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            let mut img = vec![0.0; SIDE * SIDE];
            for _ in 0..3 {
                // a stroke: a short random walk painted with a soft brush
                let (mut y, mut x) = (rng.random_range(6.0..22.0), rng.random_range(6.0..22.0));
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let (dy, dx) = (angle.sin(), angle.cos());
                for _ in 0..10 {
                    for py in 0..SIDE {
                        for px in 0..SIDE {
                            let d2 = (py as f64 - y).powi(2) + (px as f64 - x).powi(2);
                            img[py * SIDE + px] += (-d2 / 2.0).exp();
                        }
                    }
                    y = (y + dy).clamp(3.0, 24.0);
                    x = (x + dx).clamp(3.0, 24.0);
                }
            }
            let max = img.iter().cloned().fold(0.0, f64::max);
            img.iter_mut().for_each(|v| *v = (*v / max).min(1.0));
            img
        })
        .collect();

    let mut pixels = Vec::with_capacity(count * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 10) as u8;
        let distractor = (label as usize + rng.random_range(1..10)) % 10;
        let mix: f64 = rng.random_range(0.0..0.45);
        let (sy, sx): (i64, i64) = (rng.random_range(-3..=3), rng.random_range(-3..=3));
        let gain: f64 = rng.random_range(0.5..1.0);
        for py in 0..SIDE as i64 {
            for px in 0..SIDE as i64 {
                let (qy, qx) = (py - sy, px - sx);
                let inside = (0..SIDE as i64).contains(&qy) && (0..SIDE as i64).contains(&qx);
                let base = if inside {
                    let j = qy as usize * SIDE + qx as usize;
                    (1.0 - mix) * prototypes[label as usize][j] + mix * prototypes[distractor][j]
                } else {
                    0.0
                };
                let noise: f64 = rng.random_range(-0.2..0.2);
                let v = (gain * base + noise).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
        labels.push(label);
    }
    // shuffle sample order so equal contiguous shards stay class balanced
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut shuffled_pixels = Vec::with_capacity(pixels.len());
    let mut shuffled_labels = Vec::with_capacity(count);
    for &i in &order {
        shuffled_pixels.extend_from_slice(&pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]);
        shuffled_labels.push(labels[i]);
    }
    (shuffled_pixels, shuffled_labels)
}

/// Splits `0..count` into `shards` contiguous, equally sized chunks; the
/// remainder (if any) is spread one row at a time over the first shards.
pub fn equal_partition(count: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let base = count / shards;
    let extra = count % shards;
    let mut start = 0;
    (0..shards)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}
