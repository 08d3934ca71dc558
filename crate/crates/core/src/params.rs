//! Flat model parameters with a named-tensor layout.
//!
//! A [`Parameters`] value is the unit of model exchange between the server
//! and the agents. The binary codec is bit-exact:
//!
//! ```text
//! "FSPV" | version: u16 | entry count: u32
//! per entry: name length: u32 | UTF-8 name | rank: u32 | dims: u32 * rank
//! payload: f64 * total_len
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const BLOB_MAGIC: &[u8; 4] = b"FSPV";
pub const BLOB_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("weights must be non-negative with a positive sum")]
    DegenerateWeights,
    #[error("weight count {weights} does not match vector count {vectors}")]
    WeightCount { weights: usize, vectors: usize },
    #[error("cannot combine an empty set of vectors")]
    Empty,
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("expected {expected} values for layout, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("malformed parameter blob: {0}")]
    MalformedBlob(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<u32>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().map(|&d| d as usize).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor names and shapes describing how a flat vector is sliced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelLayout {
    entries: Vec<LayoutEntry>,
    #[serde(skip)]
    total_len: usize,
}

impl ModelLayout {
    pub fn new(entries: Vec<LayoutEntry>) -> Result<Self, ParamsError> {
        let mut seen = HashSet::new();
        for entry in &entries {
            if entry.name.is_empty() {
                return Err(ParamsError::InvalidLayout("empty tensor name".into()));
            }
            if !seen.insert(entry.name.as_str()) {
                return Err(ParamsError::InvalidLayout(format!(
                    "duplicate tensor name {:?}",
                    entry.name
                )));
            }
            if entry.shape.contains(&0) {
                return Err(ParamsError::InvalidLayout(format!(
                    "tensor {:?} has a zero dimension",
                    entry.name
                )));
            }
        }
        let total_len = entries.iter().map(LayoutEntry::len).sum();
        Ok(Self { entries, total_len })
    }

    /// Convenience constructor from `(name, shape)` pairs.
    pub fn from_pairs<S: Into<String>>(
        pairs: impl IntoIterator<Item = (S, Vec<u32>)>,
    ) -> Result<Self, ParamsError> {
        Self::new(
            pairs
                .into_iter()
                .map(|(name, shape)| LayoutEntry {
                    name: name.into(),
                    shape,
                })
                .collect(),
        )
    }

    /// Single tensor named `"w"` of the given length.
    pub fn flat(len: usize) -> Self {
        Self::from_pairs([("w", vec![len as u32])]).expect("flat layout is valid")
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Offset and length of a named tensor within the flat vector.
    pub fn slice_of(&self, name: &str) -> Option<(usize, usize)> {
        let mut offset = 0;
        for entry in &self.entries {
            let len = entry.len();
            if entry.name == name {
                return Some((offset, len));
            }
            offset += len;
        }
        None
    }
}

impl<'de> Deserialize<'de> for ModelLayout {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            entries: Vec<LayoutEntry>,
        }
        let raw = Raw::deserialize(deserializer)?;
        ModelLayout::new(raw.entries).map_err(serde::de::Error::custom)
    }
}

/// Model weights: a layout plus one finite value per layout element.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Scalar> {
    layout: Arc<ModelLayout>,
    values: Vec<T>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new(layout: Arc<ModelLayout>, values: Vec<T>) -> Result<Self, ParamsError> {
        if values.len() != layout.total_len() {
            return Err(ParamsError::LengthMismatch {
                expected: layout.total_len(),
                actual: values.len(),
            });
        }
        let params = Self { layout, values };
        params.ensure_finite()?;
        Ok(params)
    }

    pub fn zeros(layout: Arc<ModelLayout>) -> Self {
        let values = vec![T::zero(); layout.total_len()];
        Self { layout, values }
    }

    pub fn filled(layout: Arc<ModelLayout>, value: T) -> Self {
        let values = vec![value; layout.total_len()];
        Self { layout, values }
    }

    /// Flat layout wrapper, mostly for tests and toy problems.
    pub fn from_flat(values: Vec<T>) -> Result<Self, ParamsError> {
        Self::new(Arc::new(ModelLayout::flat(values.len())), values)
    }

    pub fn layout(&self) -> &Arc<ModelLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .slice_of(name)
            .map(|(offset, len)| &self.values[offset..offset + len])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn ensure_finite(&self) -> Result<(), ParamsError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(ParamsError::NonFinite { index }),
            None => Ok(()),
        }
    }

    fn check_layout(&self, other: &Self) -> Result<(), ParamsError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(ParamsError::LayoutMismatch)
        }
    }

    /// Element-wise `f(self[i], other[i])`.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, ParamsError> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            layout: Arc::clone(&self.layout),
            values,
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            layout: Arc::clone(&self.layout),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self, ParamsError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self, ParamsError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `alpha * x + self`.
    pub fn axpy(&self, alpha: T, x: &Self) -> Result<Self, ParamsError> {
        axpy(alpha, x, self)
    }

    pub fn l2_norm(&self) -> T {
        l2_norm(self)
    }

    /// Converts the element type; `f32 -> f64 -> f32` is lossless.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            layout: Arc::clone(&self.layout),
            values: self.values.iter().map(|v| U::of(v.widen())).collect(),
        }
    }
}

/// `alpha * x + y`, element-wise.
pub fn axpy<T: Scalar>(
    alpha: T,
    x: &Parameters<T>,
    y: &Parameters<T>,
) -> Result<Parameters<T>, ParamsError> {
    x.zip_map(y, |xi, yi| alpha * xi + yi)
}

/// Euclidean norm. Scales by the largest magnitude first so huge vectors do
/// not overflow the sum of squares.
pub fn l2_norm<T: Scalar>(v: &Parameters<T>) -> T {
    let max = v
        .values
        .iter()
        .fold(T::zero(), |acc, x| acc.max(x.abs()));
    if max == T::zero() {
        return T::zero();
    }
    let sum: T = v
        .values
        .iter()
        .map(|&x| {
            let s = x / max;
            s * s
        })
        .sum();
    max * sum.sqrt()
}

/// `Σ_k w_k · v_k / Σ_k w_k`, element-wise.
pub fn weighted_mean<T: Scalar>(
    vectors: &[&Parameters<T>],
    weights: &[T],
) -> Result<Parameters<T>, ParamsError> {
    let first = vectors.first().ok_or(ParamsError::Empty)?;
    if weights.len() != vectors.len() {
        return Err(ParamsError::WeightCount {
            weights: weights.len(),
            vectors: vectors.len(),
        });
    }
    if vectors.iter().any(|v| !first.same_layout(v)) {
        return Err(ParamsError::LayoutMismatch);
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(ParamsError::DegenerateWeights);
    }
    let total: T = weights.iter().copied().sum();
    if total <= T::zero() {
        return Err(ParamsError::DegenerateWeights);
    }
    let mut acc = vec![T::zero(); first.len()];
    for (v, &w) in vectors.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(&v.values) {
            *a = *a + w * x;
        }
    }
    for a in &mut acc {
        *a = *a / total;
    }
    Ok(Parameters {
        layout: Arc::clone(&first.layout),
        values: acc,
    })
}

/// Encodes parameters into the `FSPV` blob format.
pub fn serialize<T: Scalar>(v: &Parameters<T>) -> Vec<u8> {
    let layout = &v.layout;
    let header_len: usize = layout
        .entries
        .iter()
        .map(|e| 8 + e.name.len() + 4 * e.shape.len())
        .sum();
    let mut out = Vec::with_capacity(10 + header_len + 8 * v.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(layout.entries.len() as u32).to_le_bytes());
    for entry in &layout.entries {
        out.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        out.extend_from_slice(entry.name.as_bytes());
        out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
        for &dim in &entry.shape {
            out.extend_from_slice(&dim.to_le_bytes());
        }
    }
    for value in &v.values {
        out.extend_from_slice(&value.widen().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ParamsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                ParamsError::MalformedBlob(format!("truncated while reading {what}"))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ParamsError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes an `FSPV` blob, rejecting bad magic, truncation, trailing bytes
/// and non-finite payload values.
pub fn deserialize<T: Scalar>(bytes: &[u8]) -> Result<Parameters<T>, ParamsError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != BLOB_MAGIC {
        return Err(ParamsError::MalformedBlob("bad magic".into()));
    }
    let version = r.take(2, "version")?;
    let version = u16::from_le_bytes([version[0], version[1]]);
    if version != BLOB_VERSION {
        return Err(ParamsError::MalformedBlob(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| ParamsError::MalformedBlob("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank > (bytes.len() - r.pos) / 4 {
            return Err(ParamsError::MalformedBlob(
                "truncated while reading dims".into(),
            ));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dim"))
            .collect::<Result<Vec<_>, _>>()?;
        entries.push(LayoutEntry { name, shape });
    }
    let layout = ModelLayout::new(entries)
        .map_err(|e| ParamsError::MalformedBlob(format!("bad layout: {e}")))?;
    let payload = &bytes[r.pos..];
    let expected = layout
        .total_len()
        .checked_mul(8)
        .ok_or_else(|| ParamsError::MalformedBlob("layout too large".into()))?;
    if payload.len() != expected {
        return Err(ParamsError::MalformedBlob(format!(
            "payload has {} bytes, layout needs {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| {
            T::of(f64::from_le_bytes([
                c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
            ]))
        })
        .collect();
    Parameters::new(Arc::new(layout), values).map_err(|e| match e {
        ParamsError::NonFinite { index } => {
            ParamsError::MalformedBlob(format!("non-finite value at index {index}"))
        }
        other => other,
    })
}
