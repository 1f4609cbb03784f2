//! Store diagnostics: per-layer delta similarity and per-tensor summary
//! statistics.
//!
//! Layer grouping keys each tensor on the first embedded integer in its
//! name (`layers.12.attn.q` → layer 12); tensors without one land in the
//! "other" group. Group similarity treats the group as one concatenated
//! flat vector, accumulated in f64.

use serde::Serialize;
use std::collections::BTreeMap;

use crate::delta::validate_aligned;
use crate::error::Result;
use crate::store::{TensorData, TensorStore};

/// Grouping key: the first embedded integer, or "other".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum LayerKey {
    Layer(u64),
    Other,
}

impl LayerKey {
    fn of(name: &str) -> LayerKey {
        let mut digits = String::new();
        for c in name.chars() {
            if c.is_ascii_digit() {
                digits.push(c);
            } else if !digits.is_empty() {
                break;
            }
        }
        match digits.parse() {
            Ok(n) => LayerKey::Layer(n),
            Err(_) => LayerKey::Other,
        }
    }

    fn label(&self) -> String {
        match self {
            LayerKey::Layer(n) => n.to_string(),
            LayerKey::Other => "other".to_string(),
        }
    }
}

/// One row of a per-layer comparison.
#[derive(Debug, Clone, Serialize)]
pub struct LayerRow {
    pub layer: String,
    /// Cosine over the concatenated group; `None` when either side has
    /// zero norm (rendered as "undefined").
    pub cosine: Option<f64>,
    pub l1: f64,
    pub tensor_count: usize,
}

/// Per-layer similarity between two aligned delta stores.
#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub rows: Vec<LayerRow>,
}

impl LayerReport {
    pub fn render(&self) -> String {
        let mut text = String::from("layer\tcosine\tl1\ttensors\n");
        for row in &self.rows {
            let cosine = row
                .cosine
                .map(|c| c.to_string())
                .unwrap_or_else(|| "undefined".to_string());
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.layer, cosine, row.l1, row.tensor_count
            ));
        }
        text
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compare two aligned stores layer by layer: cosine similarity and L1
/// distance over each layer's concatenated tensors.
pub fn compare_layers(a: &TensorStore, b: &TensorStore) -> Result<LayerReport> {
    validate_aligned(&[("left", a), ("right", b)])?;
    // Group tensor names; every tensor lands in exactly one group.
    let mut groups: BTreeMap<LayerKey, Vec<String>> = BTreeMap::new();
    for name in a.names() {
        groups
            .entry(LayerKey::of(name))
            .or_default()
            .push(name.to_string());
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (key, names) in groups {
        let mut dot = 0.0f64;
        let mut norm_a = 0.0f64;
        let mut norm_b = 0.0f64;
        let mut l1 = 0.0f64;
        for name in &names {
            let va = a.read_f32(name)?;
            let vb = b.read_f32(name)?;
            for (&x, &y) in va.iter().zip(&vb) {
                let (x, y) = (x as f64, y as f64);
                dot += x * y;
                norm_a += x * x;
                norm_b += y * y;
                l1 += (x - y).abs();
            }
        }
        let cosine = if norm_a == 0.0 || norm_b == 0.0 {
            None
        } else {
            Some((dot / (norm_a * norm_b).sqrt()).clamp(-1.0, 1.0))
        };
        rows.push(LayerRow {
            layer: key.label(),
            cosine,
            l1,
            tensor_count: names.len(),
        });
    }
    Ok(LayerReport { rows })
}

/// Summary statistics of one tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorStats {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub l2: f64,
    pub zero_fraction: f64,
    /// Count of NaN/Inf values; stats above cover finite values only.
    pub nonfinite: u64,
}

/// Per-tensor summary of any store. Non-finite values are flagged per
/// tensor rather than failing the whole pass.
pub fn summarize(store: &TensorStore) -> Result<Vec<TensorStats>> {
    let mut rows = Vec::with_capacity(store.len());
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let values: Vec<f64> = match store.read_unchecked(&name)? {
            TensorData::Float(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U64(v) => v.iter().map(|&x| x as f64).collect(),
        };
        let total = values.len();
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut zeros = 0u64;
        let mut nonfinite = 0u64;
        let mut finite = 0u64;
        for &v in &values {
            if !v.is_finite() {
                nonfinite += 1;
                continue;
            }
            finite += 1;
            min = min.min(v);
            max = max.max(v);
            sum += v;
            sq += v * v;
            if v == 0.0 {
                zeros += 1;
            }
        }
        let (min, max) = if finite == 0 { (0.0, 0.0) } else { (min, max) };
        rows.push(TensorStats {
            name,
            min,
            max,
            mean: if finite == 0 { 0.0 } else { sum / finite as f64 },
            l2: sq.sqrt(),
            zero_fraction: if total == 0 {
                0.0
            } else {
                zeros as f64 / total as f64
            },
            nonfinite,
        });
    }
    Ok(rows)
}

/// Render summary rows as a tab-separated table.
pub fn render_stats(rows: &[TensorStats]) -> String {
    let mut text = String::from("tensor\tmin\tmax\tmean\tl2\tzero_fraction\tnonfinite\n");
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.name, r.min, r.max, r.mean, r.l2, r.zero_fraction, r.nonfinite
        ));
    }
    text
}
