//! Parameter sets, task vectors and the `EPMC v1` container.
//!
//! Layout of a container (all integers little-endian):
//!
//! ```text
//! "EPMC" | u32 version = 1 | u32 count
//! count x { u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | ndim x u64 dim | u64 offset }
//! data region (offsets are relative to its first byte)
//! ```
//!
//! Records are sorted by name and the data region is packed in record order,
//! so encoding is a pure function of the parameter set.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EPMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Errors raised while decoding a container.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"EPMC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated while reading {0}")]
    Truncated(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{0}` has an empty or non-UTF-8 name")]
    BadName(String),
    #[error("records out of order: `{prev}` precedes `{next}`")]
    Unsorted { prev: String, next: String },
    #[error("unknown dtype code {code} for tensor `{name}`")]
    UnknownDType { name: String, code: u8 },
    #[error("tensor `{name}`: offset {offset} does not match packed layout (expected {expected})")]
    ShapeOffsetMismatch {
        name: String,
        offset: u64,
        expected: u64,
    },
    #[error("data region has {extra} trailing bytes after the last tensor")]
    TrailingData { extra: u64 },
    #[error("tensor `{name}`: shape {shape:?} implies {expected} values but {actual} were given")]
    DataLength {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

/// A dense row-major tensor. Values are held in `f64`; `dtype` records the storage width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self, FormatError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(FormatError::DataLength {
                name: String::new(),
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// An `f64` tensor; panics if `data` does not fill `shape`.
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::new(DType::F64, shape, data).expect("tensor data length must match shape")
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            dtype,
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.dtype, self.shape.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    /// Same values with a new data vector of identical length.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "replacement data length");
        Tensor {
            dtype: self.dtype,
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self.shape.as_slice() {
            [r, c] if *r >= 2 && *c >= 2 => LayerKind::Matrix,
            _ => LayerKind::Auxiliary,
        }
    }

    /// Row-major view as a matrix; `None` unless the tensor is rank 2.
    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        match self.shape.as_slice() {
            [r, c] => Some(DMatrix::from_row_slice(*r, *c, &self.data)),
            _ => None,
        }
    }

    pub fn from_matrix(dtype: DType, m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Tensor {
            dtype,
            shape: vec![r, c],
            data,
        }
    }

    fn same_layout(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype && self.shape == other.shape
    }
}

/// Named collection of tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), FormatError> {
        let name = name.into();
        if name.is_empty() {
            return Err(FormatError::BadName(name));
        }
        if self.entries.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Inserts or overwrites a tensor.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!name.is_empty(), "layer names must be non-empty");
        self.entries.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Identical name/shape/dtype tables.
    pub fn is_aligned_with(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.same_layout(tb))
    }

    pub fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        if self.is_aligned_with(other) {
            return Ok(());
        }
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::misaligned(format!("layer `{name}` missing"))),
                Some(o) if !t.same_layout(o) => {
                    return Err(Error::misaligned(format!(
                        "layer `{name}`: {:?}/{:?} vs {:?}/{:?}",
                        t.shape, t.dtype, o.shape, o.dtype
                    )))
                }
                _ => {}
            }
        }
        let extra = other
            .names()
            .find(|n| !self.entries.contains_key(*n))
            .unwrap_or_default();
        Err(Error::misaligned(format!("unexpected layer `{extra}`")))
    }

    /// Elementwise combination of two aligned sets.
    pub fn zip_map(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_aligned(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((name, a), b)| {
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                (name.clone(), a.with_data(data))
            })
            .collect();
        Ok(ParameterSet { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), t.with_data(t.data.iter().map(|&x| f(x)).collect())))
            .collect();
        ParameterSet { entries }
    }

    /// `self + delta`, keeping this set's dtypes.
    pub fn add_delta(&self, delta: &TaskVector) -> Result<Self> {
        let mut out = self.clone();
        for (name, t) in out.entries.iter_mut() {
            let d = delta
                .get(name)
                .ok_or_else(|| Error::misaligned(format!("delta lacks layer `{name}`")))?;
            if d.shape != t.shape {
                return Err(Error::misaligned(format!(
                    "layer `{name}`: shape {:?} vs delta {:?}",
                    t.shape, d.shape
                )));
            }
            for (x, y) in t.data.iter_mut().zip(&d.data) {
                *x += *y;
            }
        }
        if delta.len() != self.len() {
            return Err(Error::misaligned("delta has layers absent from the base"));
        }
        Ok(out)
    }

    /// All values as one vector in layer order then row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten) using this set as the layout template.
    pub fn unflatten_like(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.numel() {
            return Err(Error::invalid(format!(
                "flat vector has {} values, layout needs {}",
                values.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.numel();
                let out = t.with_data(values[offset..offset + n].to_vec());
                offset += n;
                (name.clone(), out)
            })
            .collect();
        Ok(ParameterSet { entries })
    }
}

impl FromIterator<(String, Tensor)> for ParameterSet {
    /// Later duplicates overwrite earlier ones.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParameterSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Per-layer difference between a fine-tuned set and its base. Always stored as `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskVector(ParameterSet);

impl TaskVector {
    pub fn from_set(set: ParameterSet) -> Self {
        TaskVector(set.with_all_dtypes(DType::F64))
    }

    pub fn as_set(&self) -> &ParameterSet {
        &self.0
    }

    pub fn into_set(self) -> ParameterSet {
        self.0
    }

    pub fn negate(&self) -> Self {
        TaskVector(self.0.map(|x| -x))
    }

    pub fn scale(&self, s: f64) -> Self {
        TaskVector(self.0.map(|x| s * x))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.0.set(name, tensor.with_dtype(DType::F64));
    }

    pub fn norm_sq(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x * x)
            .sum()
    }
}

impl Deref for TaskVector {
    type Target = ParameterSet;

    fn deref(&self) -> &ParameterSet {
        &self.0
    }
}

impl ParameterSet {
    fn with_all_dtypes(mut self, dtype: DType) -> Self {
        for t in self.entries.values_mut() {
            t.dtype = dtype;
        }
        self
    }
}

/// `fine_tuned - base`, elementwise.
pub fn task_vector(fine_tuned: &ParameterSet, base: &ParameterSet) -> Result<TaskVector> {
    let diff = fine_tuned.zip_map(base, |a, b| a - b)?;
    Ok(TaskVector(diff.with_all_dtypes(DType::F64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Rank-2 with both dimensions at least 2; hosts an SVD basis.
    Matrix,
    /// Everything else (vectors, scalars, degenerate matrices).
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerClass {
    pub name: String,
    pub kind: LayerKind,
}

pub fn classify_layers(set: &ParameterSet) -> Vec<LayerClass> {
    set.iter()
        .map(|(name, t)| LayerClass {
            name: name.to_string(),
            kind: t.kind(),
        })
        .collect()
}

pub fn encode(set: &ParameterSet) -> Vec<u8> {
    let header_len: usize = 12
        + set
            .iter()
            .map(|(n, t)| 2 + n.len() + 2 + 8 * t.shape.len() + 8)
            .sum::<usize>();
    let data_len: usize = set.iter().map(|(_, t)| t.numel() * t.dtype.size()).sum();
    let mut out = Vec::with_capacity(header_len + data_len);

    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in set.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype.code());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.numel() * t.dtype.size()) as u64;
    }
    for (_, t) in set.iter() {
        match t.dtype {
            DType::F32 => {
                for &x in &t.data {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Record {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet, FormatError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")? as usize;

    let mut records: Vec<Record> = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let what = format!("record {i}");
        let name_len = cur.u16(&what)? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &what)?)
            .map_err(|_| FormatError::BadName(format!("<record {i}>")))?
            .to_string();
        if name.is_empty() {
            return Err(FormatError::BadName(format!("<record {i}>")));
        }
        let code = cur.u8(&what)?;
        let dtype = DType::from_code(code).ok_or(FormatError::UnknownDType {
            name: name.clone(),
            code,
        })?;
        let ndim = cur.u8(&what)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u64(&what)?;
            shape.push(usize::try_from(d).map_err(|_| FormatError::Truncated(what.clone()))?);
        }
        let offset = cur.u64(&what)?;
        if let Some(prev) = records.last() {
            match prev.name.as_str().cmp(name.as_str()) {
                std::cmp::Ordering::Equal => return Err(FormatError::DuplicateName(name)),
                std::cmp::Ordering::Greater => {
                    return Err(FormatError::Unsorted {
                        prev: prev.name.clone(),
                        next: name,
                    })
                }
                std::cmp::Ordering::Less => {}
            }
        }
        records.push(Record {
            name,
            dtype,
            shape,
            offset,
        });
    }

    let data = &bytes[cur.pos..];
    let mut expected = 0u64;
    let mut set = ParameterSet::new();
    for rec in records {
        if rec.offset != expected {
            return Err(FormatError::ShapeOffsetMismatch {
                name: rec.name,
                offset: rec.offset,
                expected,
            });
        }
        let numel = rec
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Truncated(format!("tensor `{}`", rec.name)))?;
        let nbytes = numel
            .checked_mul(rec.dtype.size())
            .ok_or_else(|| FormatError::Truncated(format!("tensor `{}`", rec.name)))?;
        let start = rec.offset as usize;
        let end = start
            .checked_add(nbytes)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| FormatError::Truncated(format!("data of tensor `{}`", rec.name)))?;
        let raw = &data[start..end];
        let values: Vec<f64> = match rec.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        expected += nbytes as u64;
        let tensor = Tensor {
            dtype: rec.dtype,
            shape: rec.shape,
            data: values,
        };
        set.entries.insert(rec.name, tensor);
    }
    let extra = data.len() as u64 - expected;
    if extra != 0 {
        return Err(FormatError::TrailingData { extra });
    }
    Ok(set)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

pub fn write_checkpoint(set: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(set)).map_err(|e| Error::io(path, e))
}
