//! Single-file checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! [0..8)        u64 N, byte length of the header
//! [8..8+N)      UTF-8 JSON object: name -> {"dtype", "shape", "data_offsets": [begin, end]}
//!               plus an optional "__metadata__" string -> string map
//! [8+N..)       tensor data; offsets are relative to the start of this section
//! ```
//!
//! This is the layout model hubs publish weights in, so hub checkpoints can be
//! read and merged unchanged. Writes are canonical: tensors sorted by name,
//! packed contiguously, header serialized with sorted keys and no whitespace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?} overlaps tensor {other:?} in the data section")]
    OffsetOverlap { name: String, other: String },
    #[error("truncated data: tensor {name:?} ends at byte {end} but the data section holds {available}")]
    TruncatedData { name: String, end: u64, available: u64 },
    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDType { name: String, dtype: String },
    #[error("tensor {name:?} holds a non-finite value")]
    NonFiniteValue { name: String },
    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Storage element type. All arithmetic happens in f32 after upcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(tag: &str) -> Option<DType> {
        match tag {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How tensors are narrowed when a map is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DTypePolicy {
    /// Keep each tensor's own storage dtype.
    #[default]
    Preserve,
    /// Widen everything to f32.
    ForceF32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    pub dtype_policy: DTypePolicy,
    /// Reject NaN/Inf values with [`CheckpointError::NonFiniteValue`].
    pub strict: bool,
}

/// A dense tensor held as raw little-endian bytes in its storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Tensor> {
        Tensor::from_f32_as(DType::F32, shape, values)
    }

    /// Builds a tensor stored as `dtype`, narrowing with round-to-nearest-even.
    pub fn from_f32_as(dtype: DType, shape: Vec<usize>, values: &[f32]) -> Result<Tensor> {
        let numel = element_count(&shape).ok_or_else(|| CheckpointError::InvalidTensor {
            name: String::new(),
            reason: format!("shape {shape:?} overflows"),
        })?;
        if numel != values.len() {
            return Err(CheckpointError::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            });
        }
        let mut data = Vec::with_capacity(numel * dtype.width());
        match dtype {
            DType::F32 => values.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => values
                .iter()
                .for_each(|v| data.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|v| data.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_raw(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Tensor> {
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| CheckpointError::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} overflows"),
            })?;
        if expected != data.len() {
            return Err(CheckpointError::InvalidTensor {
                name: String::new(),
                reason: format!(
                    "{} bytes do not match shape {shape:?} x {dtype} ({expected} bytes)",
                    data.len()
                ),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.width()
    }

    pub fn raw_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Decodes the buffer to the f32 working representation.
    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::BF16 => self
                .data
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Tensor::from_f32_as(dtype, self.shape.clone(), &self.to_f32()).expect("shape already validated")
    }

    pub fn is_finite(&self) -> bool {
        self.to_f32().iter().all(|v| v.is_finite())
    }
}

/// Placement of one tensor inside a container's data section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_range: (u64, u64),
}

/// Named tensors plus free-form string metadata. Iteration is name-sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Canonical placement of every tensor: name order, packed from offset 0.
    pub fn layout(&self) -> Vec<TensorMeta> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let begin = offset;
                offset += t.data.len() as u64;
                TensorMeta {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    byte_range: (begin, offset),
                }
            })
            .collect()
    }

    /// SHA-256 over tensor names, dtypes, shapes and bytes; metadata excluded.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update(t.dtype.as_str().as_bytes());
            hasher.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update((t.data.len() as u64).to_le_bytes());
            hasher.update(&t.data);
        }
        hex::encode(hasher.finalize())
    }
}

/// Outcome of comparing two parameter layouts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompatReport {
    pub shared_keys: BTreeSet<String>,
    pub missing_in_a: BTreeSet<String>,
    pub missing_in_b: BTreeSet<String>,
    pub shape_mismatches: Vec<(String, Vec<usize>, Vec<usize>)>,
    pub dtype_mismatches: Vec<(String, DType, DType)>,
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.missing_in_a.is_empty()
            && self.missing_in_b.is_empty()
            && self.shape_mismatches.is_empty()
            && self.dtype_mismatches.is_empty()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_compatible() {
            return write!(f, "compatible ({} shared tensors)", self.shared_keys.len());
        }
        let mut parts = Vec::new();
        if !self.missing_in_a.is_empty() {
            parts.push(format!("missing in a: {:?}", self.missing_in_a));
        }
        if !self.missing_in_b.is_empty() {
            parts.push(format!("missing in b: {:?}", self.missing_in_b));
        }
        for (name, sa, sb) in &self.shape_mismatches {
            parts.push(format!("shape mismatch {name:?}: {sa:?} vs {sb:?}"));
        }
        for (name, da, db) in &self.dtype_mismatches {
            parts.push(format!("dtype mismatch {name:?}: {da} vs {db}"));
        }
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_compatibility(a: &TensorMap, b: &TensorMap) -> CompatReport {
    let mut report = CompatReport::default();
    for (name, ta) in &a.tensors {
        match b.tensors.get(name) {
            None => {
                report.missing_in_b.insert(name.clone());
            }
            Some(tb) => {
                report.shared_keys.insert(name.clone());
                if ta.shape != tb.shape {
                    report
                        .shape_mismatches
                        .push((name.clone(), ta.shape.clone(), tb.shape.clone()));
                }
                if ta.dtype != tb.dtype {
                    report.dtype_mismatches.push((name.clone(), ta.dtype, tb.dtype));
                }
            }
        }
    }
    for name in b.tensors.keys() {
        if !a.tensors.contains_key(name) {
            report.missing_in_a.insert(name.clone());
        }
    }
    report
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::MalformedHeader(msg.into())
}

fn parse_usize_array(value: &Value, what: &str, name: &str) -> Result<Vec<u64>> {
    let arr = value
        .as_array()
        .ok_or_else(|| malformed(format!("{what} of {name:?} is not an array")))?;
    arr.iter()
        .map(|v| {
            v.as_u64()
                .ok_or_else(|| malformed(format!("{what} of {name:?} holds a non-integer")))
        })
        .collect()
}

/// Parses a container from memory. Never reads outside declared ranges.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(malformed(format!(
            "file is {} bytes, shorter than the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(malformed(format!(
            "length prefix {header_len} exceeds the {available} bytes that follow"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header_text =
        std::str::from_utf8(&bytes[8..header_end]).map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let header: Value =
        serde_json::from_str(header_text).map_err(|e| malformed(format!("header is not valid JSON: {e}")))?;
    let entries = header
        .as_object()
        .ok_or_else(|| malformed("header is not a JSON object"))?;
    let data = &bytes[header_end..];

    let mut map = TensorMap::new();
    let mut metas = Vec::with_capacity(entries.len());
    for (name, entry) in entries {
        if name == METADATA_KEY {
            let obj = entry
                .as_object()
                .ok_or_else(|| malformed("__metadata__ is not an object"))?;
            for (k, v) in obj {
                let s = v
                    .as_str()
                    .ok_or_else(|| malformed(format!("metadata value for {k:?} is not a string")))?;
                map.metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        let obj = entry
            .as_object()
            .ok_or_else(|| malformed(format!("entry {name:?} is not an object")))?;
        let tag = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("entry {name:?} has no dtype string")))?;
        let dtype = DType::parse(tag).ok_or_else(|| CheckpointError::UnsupportedDType {
            name: name.clone(),
            dtype: tag.to_string(),
        })?;
        let shape = parse_usize_array(
            obj.get("shape")
                .ok_or_else(|| malformed(format!("entry {name:?} has no shape")))?,
            "shape",
            name,
        )?
        .into_iter()
        .map(|d| usize::try_from(d).map_err(|_| malformed(format!("dimension {d} too large"))))
        .collect::<Result<Vec<usize>>>()?;
        let offsets = parse_usize_array(
            obj.get("data_offsets")
                .ok_or_else(|| malformed(format!("entry {name:?} has no data_offsets")))?,
            "data_offsets",
            name,
        )?;
        let [begin, end] = offsets[..] else {
            return Err(malformed(format!("data_offsets of {name:?} must have two entries")));
        };
        if end < begin {
            return Err(malformed(format!(
                "data_offsets of {name:?} are reversed ({begin} > {end})"
            )));
        }
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| malformed(format!("shape {shape:?} of {name:?} overflows")))?;
        if end - begin != expected as u64 {
            return Err(malformed(format!(
                "{name:?} declares {} bytes but shape {shape:?} x {dtype} needs {expected}",
                end - begin
            )));
        }
        if end > data.len() as u64 {
            return Err(CheckpointError::TruncatedData {
                name: name.clone(),
                end,
                available: data.len() as u64,
            });
        }
        metas.push(TensorMeta {
            name: name.clone(),
            dtype,
            shape,
            byte_range: (begin, end),
        });
    }

    metas.sort_by(|a, b| a.byte_range.cmp(&b.byte_range).then(a.name.cmp(&b.name)));
    let mut cursor = 0u64;
    let mut previous: Option<&TensorMeta> = None;
    for meta in &metas {
        let (begin, end) = meta.byte_range;
        if begin < cursor {
            return Err(CheckpointError::OffsetOverlap {
                name: meta.name.clone(),
                other: previous.map(|p| p.name.clone()).unwrap_or_default(),
            });
        }
        if begin > cursor {
            return Err(malformed(format!(
                "gap in data section before {:?} (bytes {cursor}..{begin})",
                meta.name
            )));
        }
        cursor = end;
        previous = Some(meta);
    }
    if cursor != data.len() as u64 {
        return Err(malformed(format!(
            "data section holds {} bytes but tensors cover {cursor}",
            data.len()
        )));
    }

    for meta in metas {
        let (begin, end) = meta.byte_range;
        let raw = data[begin as usize..end as usize].to_vec();
        let tensor = Tensor {
            dtype: meta.dtype,
            shape: meta.shape,
            data: raw,
        };
        map.tensors.insert(meta.name, tensor);
    }
    Ok(map)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&bytes)
}

/// Serializes a map to canonical container bytes.
pub fn encode_checkpoint(map: &TensorMap, options: WriteOptions) -> Result<Vec<u8>> {
    let tensors: Vec<(&String, std::borrow::Cow<'_, Tensor>)> = map
        .tensors
        .iter()
        .map(|(name, t)| {
            let t = match options.dtype_policy {
                DTypePolicy::ForceF32 if t.dtype != DType::F32 => std::borrow::Cow::Owned(t.cast(DType::F32)),
                _ => std::borrow::Cow::Borrowed(t),
            };
            (name, t)
        })
        .collect();

    // keys in name order; per-tensor fields as dtype, shape, data_offsets
    let quote = |s: &str| Value::String(s.to_string()).to_string();
    let mut entries = Vec::with_capacity(tensors.len() + 1);
    if !map.metadata.is_empty() {
        let meta: Map<String, Value> = map
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        entries.push(format!("{}:{}", quote(METADATA_KEY), Value::Object(meta)));
    }
    let mut offset = 0u64;
    for (name, t) in &tensors {
        if options.strict && !t.is_finite() {
            return Err(CheckpointError::NonFiniteValue { name: (*name).clone() });
        }
        let begin = offset;
        offset += t.data.len() as u64;
        entries.push(format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":{},\"data_offsets\":[{begin},{offset}]}}",
            quote(name),
            t.dtype.as_str(),
            json!(t.shape),
        ));
    }
    let header_text = format!("{{{}}}", entries.join(","));

    let mut out = Vec::with_capacity(8 + header_text.len() + offset as usize);
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    for (_, t) in &tensors {
        out.extend_from_slice(&t.data);
    }
    Ok(out)
}

/// Writes a canonical container. The file is replaced atomically.
pub fn write_checkpoint(map: &TensorMap, path: impl AsRef<Path>, options: WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(map, options)?;
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(&bytes).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent byte-level writer: builds a container by hand.
    fn hand_built(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn two_tensor_file() -> Vec<u8> {
        let header = r#"{"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]},"b":{"dtype":"F32","shape":[3],"data_offsets":[16,28]}}"#;
        let data: Vec<u8> = (0..7u32).flat_map(|i| (i as f32).to_le_bytes()).collect();
        hand_built(header, &data)
    }

    #[test]
    fn parses_hand_built_two_tensor_file() {
        let map = parse_checkpoint(&two_tensor_file()).unwrap();
        assert_eq!(map.get("a").unwrap().numel(), 4);
        assert_eq!(map.get("b").unwrap().numel(), 3);
        assert_eq!(map.get("b").unwrap().to_f32(), vec![4.0, 5.0, 6.0]);
        let layout = map.layout();
        assert_eq!(layout[0].byte_range, (0, 16));
        assert_eq!(layout[1].byte_range, (16, 28));
    }

    #[test]
    fn canonical_file_round_trips_byte_exact() {
        let bytes = two_tensor_file();
        let map = parse_checkpoint(&bytes).unwrap();
        let again = encode_checkpoint(&map, WriteOptions::default()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn declared_range_past_end_is_truncated() {
        let header = r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#;
        let err = parse_checkpoint(&hand_built(header, &[0u8; 8])).unwrap_err();
        assert!(matches!(err, CheckpointError::TruncatedData { end: 16, .. }), "{err}");
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let err = parse_checkpoint(&hand_built(header, &[0u8; 12])).unwrap_err();
        assert!(matches!(err, CheckpointError::OffsetOverlap { .. }), "{err}");
    }

    #[test]
    fn unknown_dtype_is_unsupported() {
        let header = r#"{"a":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let err = parse_checkpoint(&hand_built(header, &[0u8; 8])).unwrap_err();
        assert!(matches!(err, CheckpointError::UnsupportedDType { .. }), "{err}");
    }

    #[test]
    fn bad_length_prefix_is_malformed() {
        let mut bytes = two_tensor_file();
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(CheckpointError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_checkpoint(&[1, 2, 3]),
            Err(CheckpointError::MalformedHeader(_))
        ));
    }

    #[test]
    fn empty_map_writes_valid_file() {
        let bytes = encode_checkpoint(&TensorMap::new(), WriteOptions::default()).unwrap();
        assert_eq!(&bytes[8..], b"{}");
        assert!(parse_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn strict_write_rejects_nan() {
        let mut map = TensorMap::new();
        map.insert("w", Tensor::from_f32(vec![2], &[1.0, f32::NAN]).unwrap());
        let err = encode_checkpoint(
            &map,
            WriteOptions {
                strict: true,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, CheckpointError::NonFiniteValue { .. }));
        assert!(encode_checkpoint(&map, WriteOptions::default()).is_ok());
    }

    #[test]
    fn force_f32_widens_half_tensors() {
        let mut map = TensorMap::new();
        map.insert("h", Tensor::from_f32_as(DType::BF16, vec![2], &[1.5, -2.0]).unwrap());
        let bytes = encode_checkpoint(
            &map,
            WriteOptions {
                dtype_policy: DTypePolicy::ForceF32,
                strict: false,
            },
        )
        .unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back.get("h").unwrap().dtype(), DType::F32);
        assert_eq!(back.get("h").unwrap().to_f32(), vec![1.5, -2.0]);
    }

    #[test]
    fn compatibility_reports_each_mismatch_kind() {
        let mut a = TensorMap::new();
        a.insert("w", Tensor::from_f32(vec![4, 4], &[0.0; 16]).unwrap());
        a.insert("lm_head.bias", Tensor::from_f32(vec![4], &[0.0; 4]).unwrap());
        assert!(validate_compatibility(&a, &a).is_compatible());

        let mut b = TensorMap::new();
        b.insert("w", Tensor::from_f32(vec![4, 1], &[0.0; 4]).unwrap());
        let report = validate_compatibility(&a, &b);
        assert_eq!(report.missing_in_b, BTreeSet::from(["lm_head.bias".to_string()]));
        assert_eq!(report.shape_mismatches.len(), 1);
        assert!(!report.is_compatible());
    }
}
