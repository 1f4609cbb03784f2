//! Single-file checkpoint tensor stores.
//!
//! The on-disk layout is compatible with the de-facto single-file format
//! used by public model hubs: an unsigned 64-bit little-endian header
//! length, a UTF-8 JSON header mapping tensor names to
//! `{"dtype", "shape", "data_offsets"}` (plus an optional `"__metadata__"`
//! string map), and a raw little-endian data section addressed by offsets
//! relative to the end of the header.
//!
//! Stores are immutable after [`TensorStore::open`]; tensors are read
//! lazily so whole-store traversals keep peak transient memory at
//! O(largest tensor). Canonical files lay tensor data out contiguously in
//! ascending name order with a minimal (unpadded) header, so re-encoding a
//! canonical file is byte-stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
    U64,
}

impl DType {
    /// Size of one element in bytes.
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::U64 => 8,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::U64 => "U64",
        }
    }

    pub fn parse(tag: &str) -> Result<DType> {
        match tag {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            "U64" => Ok(DType::U64),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    pub const fn is_float(self) -> bool {
        !matches!(self, DType::U64)
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Header entry for one tensor: dtype, shape, and the byte span of its
/// data region (relative to the end of the header).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    /// Number of elements implied by the shape.
    pub fn element_count(&self) -> usize {
        element_count(&self.shape).expect("validated at construction")
    }

    /// Number of data bytes.
    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Decoded tensor payload. Floating tensors widen to 32-bit work
/// precision; index tensors pass through as unsigned integers.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Float(Vec<f32>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Float(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            TensorData::Float(v) => Some(v),
            TensorData::U64(_) => None,
        }
    }
}

#[derive(Debug)]
enum Backing {
    File { file: Arc<File>, data_start: u64 },
    Memory(BTreeMap<String, TensorData>),
}

/// An immutable named-tensor store, either backed by an open file (lazy
/// per-tensor reads) or held in memory.
#[derive(Debug)]
pub struct TensorStore {
    entries: BTreeMap<String, TensorMeta>,
    metadata: BTreeMap<String, String>,
    backing: Backing,
}

impl TensorStore {
    /// Open a checkpoint file and validate its header.
    ///
    /// No tensor data is loaded; reads happen per tensor on demand.
    pub fn open(path: impl AsRef<Path>) -> Result<TensorStore> {
        let file = File::open(path.as_ref())?;
        let file_len = file.metadata()?.len();
        if file_len < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {file_len} bytes; too short for a header length field"
            )));
        }
        let mut len_buf = [0u8; 8];
        file.read_exact_at(&mut len_buf, 0)?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len.checked_add(8).map_or(true, |end| end > file_len) {
            return Err(Error::MalformedHeader(format!(
                "declared header length {header_len} exceeds file size {file_len}"
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact_at(&mut header, 8)?;
        let data_start = 8 + header_len;
        let data_len = file_len - data_start;

        let (entries, metadata) = parse_header(&header, data_len)?;
        Ok(TensorStore {
            entries,
            metadata,
            backing: Backing::File {
                file: Arc::new(file),
                data_start,
            },
        })
    }

    /// Tensor names in ascending lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = &TensorMeta> {
        self.entries.values()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Decode one tensor, rejecting NaN/Inf with the offending index.
    pub fn read(&self, name: &str) -> Result<TensorData> {
        let data = self.read_unchecked(name)?;
        if let TensorData::Float(values) = &data {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index: index as u64,
                });
            }
        }
        Ok(data)
    }

    /// Decode one tensor without the finite-value check. Diagnostics use
    /// this to report non-finite values instead of failing on them.
    pub fn read_unchecked(&self, name: &str) -> Result<TensorData> {
        let meta = self
            .entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        match &self.backing {
            Backing::Memory(data) => Ok(data[name].clone()),
            Backing::File { file, data_start } => {
                let mut buf = vec![0u8; meta.byte_len() as usize];
                file.read_exact_at(&mut buf, data_start + meta.data_offsets.0)?;
                Ok(decode(meta.dtype, &buf))
            }
        }
    }

    /// Decode a floating-point tensor to work precision.
    pub fn read_f32(&self, name: &str) -> Result<Vec<f32>> {
        match self.read(name)? {
            TensorData::Float(v) => Ok(v),
            TensorData::U64(_) => Err(Error::NotFloat(name.to_string())),
        }
    }

    /// Write the store to `path` in canonical form (ascending-name
    /// contiguous data layout, minimal header).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut out = BufWriter::new(file);
        self.encode_canonical(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// SHA-256 digest of the store: raw file bytes for file-backed
    /// stores, canonical encoding for in-memory stores.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        match &self.backing {
            Backing::File { file, .. } => {
                let mut reader = file.as_ref();
                let mut pos = 0u64;
                let mut buf = vec![0u8; 1 << 16];
                loop {
                    let n = read_at_cursor(&mut reader, &mut buf, &mut pos)?;
                    if n == 0 {
                        break;
                    }
                    hasher.update(&buf[..n]);
                }
            }
            Backing::Memory(_) => {
                self.encode_canonical(&mut HashWriter(&mut hasher))?;
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn encode_canonical(&self, out: &mut impl Write) -> Result<()> {
        let specs: Vec<TensorSpec> = self
            .entries
            .values()
            .map(|m| TensorSpec {
                name: m.name.clone(),
                dtype: m.dtype,
                shape: m.shape.clone(),
            })
            .collect();
        let header = canonical_header(&specs, &self.metadata)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for meta in self.entries.values() {
            let data = self.read_unchecked(&meta.name)?;
            let bytes = encode(&meta.name, meta.dtype, &data)?;
            out.write_all(&bytes)?;
        }
        Ok(())
    }
}

fn read_at_cursor(file: &mut &File, buf: &mut [u8], pos: &mut u64) -> Result<usize> {
    let n = FileExt::read_at(*file, buf, *pos)?;
    *pos += n as u64;
    Ok(n)
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

fn parse_header(
    header: &[u8],
    data_len: u64,
) -> Result<(BTreeMap<String, TensorMeta>, BTreeMap<String, String>)> {
    let doc: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(header)
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;

    let mut entries = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (key, value) in doc {
        if key == "__metadata__" {
            metadata = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("__metadata__ is not a string map: {e}"))
            })?;
            continue;
        }
        let raw: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry '{key}': {e}")))?;
        let dtype = DType::parse(&raw.dtype)?;
        let shape: Vec<usize> = raw.shape.iter().map(|&d| d as usize).collect();
        let count = element_count(&shape).ok_or_else(|| {
            Error::MalformedHeader(format!("entry '{key}': shape {shape:?} overflows"))
        })?;
        let (begin, end) = (raw.data_offsets[0], raw.data_offsets[1]);
        let expected = (count as u64) * (dtype.byte_width() as u64);
        if end < begin || end - begin != expected {
            return Err(Error::MalformedHeader(format!(
                "entry '{key}': declared size mismatch; offsets [{begin}, {end}] \
                 but shape {shape:?} with dtype {dtype} needs {expected} bytes"
            )));
        }
        if end > data_len {
            return Err(Error::MalformedHeader(format!(
                "entry '{key}': data_offsets end {end} exceeds data section of {data_len} bytes"
            )));
        }
        entries.insert(
            key.clone(),
            TensorMeta {
                name: key,
                dtype,
                shape,
                data_offsets: (begin, end),
            },
        );
    }

    // Non-overlap across distinct data regions.
    let mut spans: Vec<(u64, u64, &str)> = entries
        .values()
        .map(|m| (m.data_offsets.0, m.data_offsets.1, m.name.as_str()))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(Error::MalformedHeader(format!(
                "overlapping data regions for tensors '{}' and '{}'",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok((entries, metadata))
}

/// Name, dtype and shape of a tensor scheduled for writing.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dtype: DType, shape: &[usize]) -> TensorSpec {
        TensorSpec {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
        }
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Meta(&'a BTreeMap<String, String>),
    Entry {
        dtype: &'static str,
        shape: &'a [usize],
        data_offsets: [u64; 2],
    },
}

/// Serialize the canonical header for the given specs (ascending name
/// order, contiguous offsets from zero).
fn canonical_header(specs: &[TensorSpec], metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut doc: BTreeMap<&str, HeaderValue> = BTreeMap::new();
    if !metadata.is_empty() {
        doc.insert("__metadata__", HeaderValue::Meta(metadata));
    }
    let mut offset = 0u64;
    let mut offsets = Vec::with_capacity(specs.len());
    for spec in specs {
        let count = element_count(&spec.shape)
            .ok_or_else(|| Error::InvalidParameter(format!("shape {:?} overflows", spec.shape)))?;
        let len = (count as u64) * (spec.dtype.byte_width() as u64);
        offsets.push([offset, offset + len]);
        offset += len;
    }
    for (spec, span) in specs.iter().zip(&offsets) {
        doc.insert(
            &spec.name,
            HeaderValue::Entry {
                dtype: spec.dtype.as_str(),
                shape: &spec.shape,
                data_offsets: *span,
            },
        );
    }
    Ok(serde_json::to_vec(&doc).expect("header serialization cannot fail"))
}

fn decode(dtype: DType, bytes: &[u8]) -> TensorData {
    match dtype {
        DType::F32 => TensorData::Float(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::F16 => TensorData::Float(
            bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
        ),
        DType::BF16 => TensorData::Float(
            bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
        ),
        DType::U64 => TensorData::U64(
            bytes
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

/// Encode decoded values back to raw little-endian bytes. Narrowing from
/// F32 to F16/BF16 rounds to nearest-even; a finite value that narrows to
/// infinity is an error.
fn encode(name: &str, dtype: DType, data: &TensorData) -> Result<Vec<u8>> {
    match (dtype, data) {
        (DType::F32, TensorData::Float(values)) => {
            Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
        }
        (DType::F16, TensorData::Float(values)) => {
            let mut out = Vec::with_capacity(values.len() * 2);
            for (i, &v) in values.iter().enumerate() {
                let narrowed = half::f16::from_f32(v);
                if v.is_finite() && !narrowed.is_finite() {
                    return Err(Error::Unencodable {
                        name: name.to_string(),
                        index: i as u64,
                        value: v,
                        dtype: "F16".to_string(),
                    });
                }
                out.extend_from_slice(&narrowed.to_bits().to_le_bytes());
            }
            Ok(out)
        }
        (DType::BF16, TensorData::Float(values)) => {
            let mut out = Vec::with_capacity(values.len() * 2);
            for (i, &v) in values.iter().enumerate() {
                let narrowed = half::bf16::from_f32(v);
                if v.is_finite() && !narrowed.is_finite() {
                    return Err(Error::Unencodable {
                        name: name.to_string(),
                        index: i as u64,
                        value: v,
                        dtype: "BF16".to_string(),
                    });
                }
                out.extend_from_slice(&narrowed.to_bits().to_le_bytes());
            }
            Ok(out)
        }
        (DType::U64, TensorData::U64(values)) => {
            Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
        }
        (dtype, _) => Err(Error::InvalidParameter(format!(
            "tensor '{name}': payload does not match declared dtype {dtype}"
        ))),
    }
}

/// Snap a work-precision value onto the storage grid of `dtype`.
///
/// Values held in memory for F16/BF16 tensors are kept pre-snapped so the
/// in-memory store and its file form decode identically.
fn snap(dtype: DType, v: f32) -> f32 {
    match dtype {
        DType::F32 | DType::U64 => v,
        DType::F16 => half::f16::from_f32(v).to_f32(),
        DType::BF16 => half::bf16::from_f32(v).to_f32(),
    }
}

/// Accumulates tensors in memory, then materializes an in-memory store or
/// writes a canonical file.
#[derive(Debug)]
pub struct StoreBuilder {
    entries: BTreeMap<String, (TensorSpec, TensorData)>,
    metadata: BTreeMap<String, String>,
}

impl StoreBuilder {
    pub fn new() -> StoreBuilder {
        StoreBuilder {
            entries: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> StoreBuilder {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn metadata_map(mut self, map: &BTreeMap<String, String>) -> StoreBuilder {
        self.metadata
            .extend(map.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }

    /// Add a floating tensor stored as `dtype` (narrowing applies now).
    pub fn add_f32(
        mut self,
        name: impl Into<String>,
        dtype: DType,
        shape: &[usize],
        values: Vec<f32>,
    ) -> Result<StoreBuilder> {
        let name = name.into();
        if !dtype.is_float() {
            return Err(Error::InvalidParameter(format!(
                "tensor '{name}': add_f32 requires a floating dtype, got {dtype}"
            )));
        }
        self.check_new(&name, shape, values.len())?;
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name,
                index: index as u64,
            });
        }
        // Detect narrowing overflow up front; snap the rest.
        let mut snapped = values;
        if dtype != DType::F32 {
            for (i, v) in snapped.iter_mut().enumerate() {
                let s = snap(dtype, *v);
                if !s.is_finite() {
                    return Err(Error::Unencodable {
                        name: name.clone(),
                        index: i as u64,
                        value: *v,
                        dtype: dtype.as_str().to_string(),
                    });
                }
                *v = s;
            }
        }
        self.entries.insert(
            name.clone(),
            (
                TensorSpec::new(name, dtype, shape),
                TensorData::Float(snapped),
            ),
        );
        Ok(self)
    }

    /// Add an unsigned integer tensor (U64 dtype).
    pub fn add_u64(
        mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<u64>,
    ) -> Result<StoreBuilder> {
        let name = name.into();
        self.check_new(&name, shape, values.len())?;
        self.entries.insert(
            name.clone(),
            (
                TensorSpec::new(name, DType::U64, shape),
                TensorData::U64(values),
            ),
        );
        Ok(self)
    }

    fn check_new(&self, name: &str, shape: &[usize], got: usize) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        let expected = element_count(shape)
            .ok_or_else(|| Error::InvalidParameter(format!("shape {shape:?} overflows")))?;
        if expected != got {
            return Err(Error::CountMismatch {
                name: name.to_string(),
                shape: shape.to_vec(),
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Materialize as an in-memory store.
    pub fn build(self) -> TensorStore {
        let mut offset = 0u64;
        let mut entries = BTreeMap::new();
        let mut data = BTreeMap::new();
        for (name, (spec, values)) in self.entries {
            let len = (values.len() as u64) * (spec.dtype.byte_width() as u64);
            entries.insert(
                name.clone(),
                TensorMeta {
                    name: name.clone(),
                    dtype: spec.dtype,
                    shape: spec.shape,
                    data_offsets: (offset, offset + len),
                },
            );
            offset += len;
            data.insert(name, values);
        }
        TensorStore {
            entries,
            metadata: self.metadata,
            backing: Backing::Memory(data),
        }
    }

    /// Write as a canonical file.
    pub fn write(self, path: impl AsRef<Path>) -> Result<()> {
        self.build().write(path)
    }
}

impl Default for StoreBuilder {
    fn default() -> Self {
        StoreBuilder::new()
    }
}

/// Streaming writer: the full entry table is declared up front, then
/// tensor payloads are appended one at a time in ascending name order.
pub struct StoreWriter {
    out: BufWriter<File>,
    order: Vec<TensorSpec>,
    next: usize,
}

impl StoreWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: &[TensorSpec],
        metadata: &BTreeMap<String, String>,
    ) -> Result<StoreWriter> {
        let mut seen = BTreeSet::new();
        for spec in specs {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::DuplicateTensor(spec.name.clone()));
            }
        }
        let mut order = specs.to_vec();
        order.sort_by(|a, b| a.name.cmp(&b.name));
        let header = canonical_header(&order, metadata)?;
        let file = File::create(path.as_ref())?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        Ok(StoreWriter {
            out,
            order,
            next: 0,
        })
    }

    /// Append the payload for the next tensor in ascending name order.
    pub fn write_f32(&mut self, name: &str, values: &[f32]) -> Result<()> {
        self.write_data(name, &TensorData::Float(values.to_vec()))
    }

    pub fn write_u64(&mut self, name: &str, values: &[u64]) -> Result<()> {
        self.write_data(name, &TensorData::U64(values.to_vec()))
    }

    fn write_data(&mut self, name: &str, data: &TensorData) -> Result<()> {
        let spec = self.order.get(self.next).ok_or_else(|| {
            Error::InvalidParameter(format!("tensor '{name}': all declared tensors written"))
        })?;
        if spec.name != name {
            return Err(Error::InvalidParameter(format!(
                "tensor '{name}' written out of order; expected '{}'",
                spec.name
            )));
        }
        let expected = element_count(&spec.shape).expect("validated at create");
        if data.len() != expected {
            return Err(Error::CountMismatch {
                name: name.to_string(),
                shape: spec.shape.clone(),
                expected,
                got: data.len(),
            });
        }
        if let TensorData::Float(values) = data {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index: index as u64,
                });
            }
        }
        let bytes = encode(name, spec.dtype, data)?;
        self.out.write_all(&bytes)?;
        self.next += 1;
        Ok(())
    }

    /// Flush and verify that every declared tensor was written.
    pub fn finish(mut self) -> Result<()> {
        if self.next != self.order.len() {
            return Err(Error::InvalidParameter(format!(
                "store incomplete: {} of {} tensors written",
                self.next,
                self.order.len()
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}
