//! Elementwise arithmetic and inner products over aligned tensor stores.
//!
//! Every operation here is strict about alignment: the stores must share
//! the exact tensor name set and per-name shapes, and a mismatch names the
//! offending tensor. Elementwise math widens the 32-bit work values to
//! f64, evaluates the formula, and narrows once at the output; reductions
//! accumulate sequentially in f64 in flat-index order so results are
//! bit-identical across runs and thread counts.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{DType, StoreWriter, TensorSpec, TensorStore};

/// Minimum elements per rayon work unit; keeps small tensors sequential.
const PAR_CHUNK: usize = 8192;

/// Verify that all stores carry identical name sets and, per name,
/// identical shapes. Roles label the error message.
pub(crate) fn validate_aligned(stores: &[(&str, &TensorStore)]) -> Result<()> {
    let (first_role, first) = stores[0];
    for &(role, other) in &stores[1..] {
        for name in first.names() {
            if !other.contains(name) {
                return Err(Error::Misaligned {
                    name: name.to_string(),
                    side: role.to_string(),
                });
            }
        }
        for name in other.names() {
            if !first.contains(name) {
                return Err(Error::Misaligned {
                    name: name.to_string(),
                    side: first_role.to_string(),
                });
            }
            let left = &first.meta(name).unwrap().shape;
            let right = &other.meta(name).unwrap().shape;
            if left != right {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: left.clone(),
                    right: right.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Output dtype policy for streamed transforms.
pub(crate) enum OutDtype {
    /// Every output tensor persists as F32 (delta convention).
    AllF32,
    /// Mirror the dtype of the first input store, tensor by tensor.
    MirrorFirst,
}

/// Stream aligned stores tensor-by-tensor through `per_tensor`, writing a
/// canonical output file. Peak transient memory is proportional to the
/// largest single tensor, independent of store size.
pub(crate) fn stream_transform(
    inputs: &[(&str, &TensorStore)],
    out_dtype: OutDtype,
    metadata: BTreeMap<String, String>,
    out_path: &Path,
    per_tensor: impl Fn(&str, &[Vec<f32>]) -> Result<Vec<f32>>,
) -> Result<TensorStore> {
    validate_aligned(inputs)?;
    let first = inputs[0].1;
    let specs: Vec<TensorSpec> = first
        .entries()
        .map(|meta| {
            if !meta.dtype.is_float() {
                return Err(Error::NotFloat(meta.name.clone()));
            }
            let dtype = match out_dtype {
                OutDtype::AllF32 => DType::F32,
                OutDtype::MirrorFirst => meta.dtype,
            };
            Ok(TensorSpec::new(meta.name.clone(), dtype, &meta.shape))
        })
        .collect::<Result<_>>()?;
    for (_, store) in inputs {
        for meta in store.entries() {
            if !meta.dtype.is_float() {
                return Err(Error::NotFloat(meta.name.clone()));
            }
        }
    }

    let mut writer = StoreWriter::create(out_path, &specs, &metadata)?;
    for spec in &specs {
        let decoded: Vec<Vec<f32>> = inputs
            .iter()
            .map(|(_, store)| store.read_f32(&spec.name))
            .collect::<Result<_>>()?;
        let values = per_tensor(&spec.name, &decoded)?;
        writer.write_f32(&spec.name, &values)?;
    }
    writer.finish()?;
    TensorStore::open(out_path)
}

/// Evaluate `f` for every flat index, in parallel chunks with a
/// deterministic gather. `f` must be a pure function of its index.
pub(crate) fn map_elements(n: usize, f: impl Fn(usize) -> f32 + Sync + Send) -> Vec<f32> {
    (0..n)
        .into_par_iter()
        .with_min_len(PAR_CHUNK)
        .map(f)
        .collect()
}

/// Elementwise `minuend − subtrahend`, persisted as an F32 delta store.
pub fn diff(minuend: &TensorStore, subtrahend: &TensorStore, out: &Path) -> Result<TensorStore> {
    let metadata = BTreeMap::from([
        ("kind".to_string(), "delta".to_string()),
        ("stage".to_string(), "diff".to_string()),
        ("minuend_digest".to_string(), minuend.digest()?),
        ("subtrahend_digest".to_string(), subtrahend.digest()?),
    ]);
    stream_transform(
        &[("minuend", minuend), ("subtrahend", subtrahend)],
        OutDtype::AllF32,
        metadata,
        out,
        |_, decoded| {
            let (a, b) = (&decoded[0], &decoded[1]);
            Ok(map_elements(a.len(), |i| {
                (a[i] as f64 - b[i] as f64) as f32
            }))
        },
    )
}

/// Elementwise `Σ coefficient_k · value_k`, accumulated in f64 in term
/// order. Zero-coefficient terms contribute nothing and are skipped.
pub fn linear_combine(terms: &[(&TensorStore, f64)], out: &Path) -> Result<TensorStore> {
    if terms.is_empty() {
        return Err(Error::InvalidParameter(
            "linear_combine requires at least one term".to_string(),
        ));
    }
    let inputs: Vec<(&str, &TensorStore)> = terms.iter().map(|(s, _)| ("term", *s)).collect();
    let coefficients: Vec<f64> = terms.iter().map(|(_, c)| *c).collect();
    let mut metadata = BTreeMap::from([
        ("kind".to_string(), "delta".to_string()),
        ("stage".to_string(), "linear_combine".to_string()),
    ]);
    metadata.insert(
        "coefficients".to_string(),
        coefficients
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    stream_transform(&inputs, OutDtype::AllF32, metadata, out, |_, decoded| {
        let n = decoded[0].len();
        Ok(map_elements(n, |i| {
            let mut acc = 0.0f64;
            for (values, &c) in decoded.iter().zip(&coefficients) {
                if c != 0.0 {
                    acc += c * values[i] as f64;
                }
            }
            acc as f32
        }))
    })
}

fn read_pair(a: &TensorStore, b: &TensorStore, name: &str) -> Result<(Vec<f32>, Vec<f32>)> {
    let meta_a = a
        .meta(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
    let meta_b = b
        .meta(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
    if meta_a.shape != meta_b.shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            left: meta_a.shape.clone(),
            right: meta_b.shape.clone(),
        });
    }
    Ok((a.read_f32(name)?, b.read_f32(name)?))
}

/// Flat dot product of one named tensor, accumulated sequentially in f64.
pub fn tensor_dot(a: &TensorStore, b: &TensorStore, name: &str) -> Result<f64> {
    let (va, vb) = read_pair(a, b, name)?;
    Ok(dot64(&va, &vb))
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + (x as f64) * (y as f64))
}

pub(crate) fn norm_sq64(v: &[f32]) -> f64 {
    v.iter()
        .fold(0.0f64, |acc, &x| acc + (x as f64) * (x as f64))
}

/// Cosine similarity of one named tensor; both operands must have a
/// nonzero norm. The denominator is `sqrt(‖a‖² · ‖b‖²)` so that
/// self-similarity is exactly 1.
pub fn tensor_cosine(a: &TensorStore, b: &TensorStore, name: &str) -> Result<f64> {
    let (va, vb) = read_pair(a, b, name)?;
    let (na, nb) = (norm_sq64(&va), norm_sq64(&vb));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm(name.to_string()));
    }
    Ok((dot64(&va, &vb) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// L1 distance `Σ |a_j − b_j|` of one named tensor.
pub fn tensor_l1(a: &TensorStore, b: &TensorStore, name: &str) -> Result<f64> {
    let (va, vb) = read_pair(a, b, name)?;
    Ok(va
        .iter()
        .zip(&vb)
        .fold(0.0f64, |acc, (&x, &y)| acc + (x as f64 - y as f64).abs()))
}
