//! Tensors, named checkpoints and the `.ct` container format.
//!
//! Container layout:
//!   [8 bytes LE u64: header length N]
//!   [N bytes: JSON header]
//!   [concatenated little-endian tensor bytes]
//!
//! The header maps each tensor name to `{"dtype","shape","data_offsets":[begin,end]}`
//! with offsets relative to the end of the header, plus an optional
//! `"__metadata__"` object of string values. Writers emit `__metadata__` first
//! (only when non-empty) and tensors in ascending name order with contiguous
//! offsets, so identical checkpoints always produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use half::f16;
use serde_json::Value;
use thiserror::Error;

/// Upper bound on the JSON header; larger length fields are treated as corruption.
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

const METADATA_KEY: &str = "__metadata__";

#[derive(Error, Debug)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("tensor name must not be empty")]
    EmptyName,
    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("incompatible checkpoints at `{0}`")]
    Incompatible(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            other => Err(StoreError::UnknownDtype(other.to_string())),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element storage. f16 values are kept as-is so that a read/write cycle is bit exact.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
        }
    }
}

/// A dense, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(StoreError::Invalid(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        Self::new(shape, TensorData::F16(data))
    }

    pub fn zeros(dtype: Dtype, shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        let data = match dtype {
            Dtype::F32 => TensorData::F32(vec![0.0; n]),
            Dtype::F16 => TensorData::F16(vec![f16::ZERO; n]),
        };
        Self { shape, data }
    }

    /// Builds a tensor of the given dtype from f32 values, rounding when the dtype is f16.
    pub fn from_values(dtype: Dtype, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        match dtype {
            Dtype::F32 => Self::from_f32(shape, values),
            Dtype::F16 => Self::from_f16(shape, values.into_iter().map(f16::from_f32).collect()),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F16(_) => Dtype::F16,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Elements widened to f32.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }

    pub fn get(&self, i: usize) -> f32 {
        match &self.data {
            TensorData::F32(v) => v[i],
            TensorData::F16(v) => v[i].to_f32(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F16(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn same_layout(&self, other: &Tensor) -> bool {
        self.dtype() == other.dtype() && self.shape == other.shape
    }

    fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_of()
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
        };
        Self::new(shape, data)
    }
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        if name == METADATA_KEY {
            return Err(StoreError::Invalid(format!("`{METADATA_KEY}` is reserved")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn with_tensor(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Tensors in ascending name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Returns the first tensor name at which the two checkpoints disagree, if any.
    pub fn first_incompatibility(&self, other: &Checkpoint) -> Option<String> {
        let mut a = self.tensors.iter();
        let mut b = other.tensors.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return None,
                (Some((na, _)), None) => return Some(na.clone()),
                (None, Some((nb, _))) => return Some(nb.clone()),
                (Some((na, ta)), Some((nb, tb))) => {
                    if na != nb {
                        return Some(na.min(nb).clone());
                    }
                    if !ta.same_layout(tb) {
                        return Some(na.clone());
                    }
                }
            }
        }
    }

    pub fn is_compatible(&self, other: &Checkpoint) -> bool {
        self.first_incompatibility(other).is_none()
    }

    /// Applies `f` to every tensor, keeping names and metadata.
    pub fn map_tensors<F>(&self, mut f: F) -> Result<Checkpoint>
    where
        F: FnMut(&str, &Tensor) -> Result<Tensor>,
    {
        let mut out = Checkpoint {
            tensors: BTreeMap::new(),
            metadata: self.metadata.clone(),
        };
        for (name, t) in &self.tensors {
            out.tensors.insert(name.clone(), f(name, t)?);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Fails with the first offending tensor name unless every checkpoint matches the first.
pub fn ensure_compatible<'a, I>(ckpts: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Checkpoint>,
{
    let mut it = ckpts.into_iter();
    let Some(first) = it.next() else {
        return Ok(());
    };
    for c in it {
        if let Some(name) = first.first_incompatibility(c) {
            return Err(StoreError::Incompatible(name));
        }
    }
    Ok(())
}

/// Per name, per element: `out[i] = sum_j coeffs[j] * ckpts[j][i]`, accumulated in f32.
///
/// The output keeps the input dtype and the metadata of the first checkpoint.
pub fn axpy_map(ckpts: &[&Checkpoint], coeffs: &[f32]) -> Result<Checkpoint> {
    if ckpts.is_empty() {
        return Err(StoreError::Invalid("axpy_map needs at least one checkpoint".into()));
    }
    if ckpts.len() != coeffs.len() {
        return Err(StoreError::Invalid(format!(
            "{} checkpoints but {} coefficients",
            ckpts.len(),
            coeffs.len()
        )));
    }
    ensure_compatible(ckpts.iter().copied())?;
    ckpts[0].map_tensors(|name, t| {
        let mut acc = vec![0.0f32; t.len()];
        for (c, &a) in ckpts.iter().zip(coeffs) {
            let src = c.get(name).expect("compatibility checked");
            match src.data() {
                TensorData::F32(v) => acc.iter_mut().zip(v).for_each(|(o, x)| *o += a * x),
                TensorData::F16(v) => acc.iter_mut().zip(v).for_each(|(o, x)| *o += a * x.to_f32()),
            }
        }
        Tensor::from_values(t.dtype(), t.shape().to_vec(), acc)
    })
}

fn header_json(ckpt: &Checkpoint) -> Result<String> {
    // Built by hand so the key order is fixed: metadata first, then tensors by name.
    let mut parts = Vec::with_capacity(ckpt.len() + 1);
    if !ckpt.metadata.is_empty() {
        let meta = serde_json::to_string(&ckpt.metadata).map_err(|e| StoreError::Invalid(e.to_string()))?;
        parts.push(format!("\"{METADATA_KEY}\":{meta}"));
    }
    let mut offset = 0usize;
    for (name, t) in &ckpt.tensors {
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        let end = offset + t.byte_len();
        let entry = serde_json::json!({
            "dtype": t.dtype().as_str(),
            "shape": t.shape(),
            "data_offsets": [offset, end],
        });
        let key = serde_json::to_string(name).map_err(|e| StoreError::Invalid(e.to_string()))?;
        // serde_json sorts object keys alphabetically: data_offsets, dtype, shape.
        parts.push(format!("{key}:{entry}"));
        offset = end;
    }
    Ok(format!("{{{}}}", parts.join(",")))
}

/// Serializes a checkpoint to container bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = header_json(ckpt)?;
    let data_len: usize = ckpt.tensors.values().map(Tensor::byte_len).sum();
    let mut out = Vec::with_capacity(8 + header.len() + data_len);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in ckpt.tensors.values() {
        t.write_le(&mut out);
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> StoreError {
    StoreError::Corrupt(msg.into())
}

/// Parses container bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(corrupt(format!(
            "file is {} bytes, shorter than the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN {
        return Err(corrupt(format!(
            "header length {header_len} exceeds the {MAX_HEADER_LEN} byte limit"
        )));
    }
    let header_end = 8 + header_len as usize;
    if header_end > bytes.len() {
        return Err(corrupt(format!(
            "header length {header_len} runs past end of file ({} bytes)",
            bytes.len()
        )));
    }
    let header: Value =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| corrupt(format!("malformed header JSON: {e}")))?;
    let Value::Object(entries) = header else {
        return Err(corrupt("header is not a JSON object"));
    };
    let data = &bytes[header_end..];

    let mut ckpt = Checkpoint::new();
    let mut spans: Vec<(usize, usize, String)> = Vec::new();
    for (name, entry) in entries {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(corrupt("__metadata__ is not an object"));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(corrupt(format!("metadata value for `{k}` is not a string")));
                };
                ckpt.metadata.insert(k, s);
            }
            continue;
        }
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        let dtype = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| corrupt(format!("tensor `{name}` has no dtype")))?;
        let dtype = Dtype::parse(dtype)?;
        let shape = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| corrupt(format!("tensor `{name}` has no shape")))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt(format!("tensor `{name}` has a non-integer extent")))?;
        let offsets = entry
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
            .ok_or_else(|| corrupt(format!("tensor `{name}` has malformed data_offsets")))?;
        let (begin, end) = offsets;
        if begin > end || end > data.len() {
            return Err(corrupt(format!(
                "tensor `{name}` offsets [{begin},{end}] exceed the {} byte data region",
                data.len()
            )));
        }
        let expected = shape
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("tensor `{name}` shape overflows")))?;
        if end - begin != expected {
            return Err(corrupt(format!(
                "tensor `{name}` spans {} bytes but {dtype} {:?} needs {expected}",
                end - begin,
                shape
            )));
        }
        let t = Tensor::read_le(dtype, shape, &data[begin..end])?;
        spans.push((begin, end, name.clone()));
        ckpt.tensors.insert(name, t);
    }
    spans.sort();
    // tensors must tile the data region: no overlap, no gaps, no trailing bytes
    let mut covered = 0;
    for (begin, end, name) in &spans {
        if *begin < covered {
            return Err(corrupt(format!("tensor `{name}` overlaps its predecessor")));
        }
        if *begin > covered {
            return Err(corrupt(format!(
                "gap of {} bytes before tensor `{name}`",
                begin - covered
            )));
        }
        covered = *end;
    }
    if covered != data.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after the last tensor",
            data.len() - covered
        )));
    }
    Ok(ckpt)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
