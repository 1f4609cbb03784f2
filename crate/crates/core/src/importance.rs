//! Neuron importance scoring and key-neuron masks.
//!
//! Importance approximates per-neuron relevance by the magnitude of the
//! value change between a base checkpoint and a briefly trained probe
//! checkpoint. The top-k% units across all eligible tensors jointly form
//! a [`NeuronMask`]; masks can be exported for external trainers and
//! applied after the fact with [`project_update`], which keeps a trained
//! checkpoint's updates only where the mask allows.

use std::collections::BTreeMap;
use std::path::Path;

use crate::delta::{stream_transform, validate_aligned, OutDtype};
use crate::error::{Error, Result};
use crate::pattern::PatternFilter;
use crate::store::{StoreBuilder, TensorData, TensorStore};

/// Unit of selection for importance scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Every scalar parameter is a unit.
    Scalar,
    /// Every leading-dimension row is a unit; selecting a row selects all
    /// of its elements.
    Row,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Scalar => "scalar",
            Granularity::Row => "row",
        }
    }

    pub fn parse(s: &str) -> Result<Granularity> {
        match s {
            "scalar" => Ok(Granularity::Scalar),
            "row" => Ok(Granularity::Row),
            other => Err(Error::InvalidParameter(format!(
                "unknown granularity '{other}' (expected 'scalar' or 'row')"
            ))),
        }
    }
}

fn row_count(shape: &[usize]) -> usize {
    if shape.iter().product::<usize>() == 0 {
        0
    } else {
        shape.first().copied().unwrap_or(1)
    }
}

/// Per-tensor non-negative importance scores, one per selection unit.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    scores: BTreeMap<String, Vec<f64>>,
    shapes: BTreeMap<String, Vec<usize>>,
    granularity: Granularity,
    lambda_scale: f64,
}

impl ImportanceMap {
    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn lambda_scale(&self) -> f64 {
        self.lambda_scale
    }

    pub fn tensors(&self) -> impl Iterator<Item = &str> {
        self.scores.keys().map(String::as_str)
    }

    pub fn scores(&self, name: &str) -> Option<&[f64]> {
        self.scores.get(name).map(Vec::as_slice)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.get(name).map(Vec::as_slice)
    }

    /// Multiply every score by a positive constant. Rescaling never
    /// changes which units a top-k selection picks.
    pub fn scale(&mut self, lambda: f64) -> Result<()> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        for scores in self.scores.values_mut() {
            for s in scores.iter_mut() {
                *s *= lambda;
            }
        }
        self.lambda_scale *= lambda;
        Ok(())
    }

    /// Serialize as a tensor store: one F32 score tensor per entry, with
    /// original shapes recorded in the metadata.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut builder = StoreBuilder::new()
            .metadata("kind", "importance")
            .metadata("granularity", self.granularity.as_str())
            .metadata("lambda_scale", self.lambda_scale.to_string())
            .metadata(
                "shapes",
                serde_json::to_string(&self.shapes).expect("shape map serializes"),
            );
        for (name, scores) in &self.scores {
            let values: Vec<f32> = scores.iter().map(|&s| s as f32).collect();
            builder = builder.add_f32(name, crate::store::DType::F32, &[values.len()], values)?;
        }
        builder.write(path)
    }

    pub fn import(path: impl AsRef<Path>) -> Result<ImportanceMap> {
        let store = TensorStore::open(path)?;
        if store.metadata().get("kind").map(String::as_str) != Some("importance") {
            return Err(Error::InvalidParameter(
                "store is not an importance map (metadata kind != 'importance')".to_string(),
            ));
        }
        let granularity = Granularity::parse(
            store
                .metadata()
                .get("granularity")
                .map(String::as_str)
                .unwrap_or("scalar"),
        )?;
        let lambda_scale = store
            .metadata()
            .get("lambda_scale")
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(1.0);
        let shapes: BTreeMap<String, Vec<usize>> = store
            .metadata()
            .get("shapes")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| Error::InvalidParameter(format!("bad shapes metadata: {e}")))?
            .unwrap_or_default();
        let mut scores = BTreeMap::new();
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let values = store.read_f32(&name)?;
            if values.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "importance scores for '{name}' contain negative values"
                )));
            }
            scores.insert(name.clone(), values.iter().map(|&v| v as f64).collect());
        }
        for name in scores.keys() {
            if !shapes.contains_key(name) {
                return Err(Error::InvalidParameter(format!(
                    "importance map is missing the shape of tensor '{name}'"
                )));
            }
        }
        Ok(ImportanceMap {
            scores,
            shapes,
            granularity,
            lambda_scale,
        })
    }
}

/// Score every floating tensor by the value change between `base` and
/// `probe`: per element `|θ̃ − θ|`, or per row the L2 norm of the row's
/// difference vector.
pub fn importance(
    base: &TensorStore,
    probe: &TensorStore,
    granularity: Granularity,
) -> Result<ImportanceMap> {
    validate_aligned(&[("base", base), ("probe", probe)])?;
    let mut scores = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    for meta in base.entries() {
        if !meta.dtype.is_float() {
            continue;
        }
        let b = base.read_f32(&meta.name)?;
        let p = probe.read_f32(&meta.name)?;
        let tensor_scores = match granularity {
            Granularity::Scalar => b
                .iter()
                .zip(&p)
                .map(|(&x, &y)| (y as f64 - x as f64).abs())
                .collect(),
            Granularity::Row => {
                let rows = row_count(&meta.shape);
                let row_size = if rows == 0 { 0 } else { b.len() / rows };
                (0..rows)
                    .map(|r| {
                        let span = r * row_size..(r + 1) * row_size;
                        b[span.clone()]
                            .iter()
                            .zip(&p[span])
                            .fold(0.0f64, |acc, (&x, &y)| {
                                let d = y as f64 - x as f64;
                                acc + d * d
                            })
                            .sqrt()
                    })
                    .collect()
            }
        };
        scores.insert(meta.name.clone(), tensor_scores);
        shapes.insert(meta.name.clone(), meta.shape.clone());
    }
    Ok(ImportanceMap {
        scores,
        shapes,
        granularity,
        lambda_scale: 1.0,
    })
}

/// A global sparse set of (tensor, flat index) pairs over a fixed tensor
/// universe.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMask {
    selected: BTreeMap<String, Vec<u64>>,
    universe: BTreeMap<String, u64>,
    total_units: u64,
    k_percent: f64,
}

impl NeuronMask {
    /// Build a mask from per-tensor ascending index lists and the
    /// element-count universe they live in.
    pub fn new(
        selected: BTreeMap<String, Vec<u64>>,
        universe: BTreeMap<String, u64>,
        total_units: u64,
        k_percent: f64,
    ) -> Result<NeuronMask> {
        for (name, indices) in &selected {
            let numel = *universe.get(name).ok_or_else(|| {
                Error::MalformedMask(format!("tensor '{name}' is not in the mask universe"))
            })?;
            for pair in indices.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::MalformedMask(format!(
                        "indices for '{name}' are not strictly ascending"
                    )));
                }
            }
            if let Some(&last) = indices.last() {
                if last >= numel {
                    return Err(Error::MalformedMask(format!(
                        "index {last} out of range for '{name}' ({numel} elements)"
                    )));
                }
            }
        }
        Ok(NeuronMask {
            selected,
            universe,
            total_units,
            k_percent,
        })
    }

    /// The empty mask over the same universe as `self`.
    pub fn empty_like(&self) -> NeuronMask {
        NeuronMask {
            selected: BTreeMap::new(),
            universe: self.universe.clone(),
            total_units: 0,
            k_percent: 0.0,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &str> {
        self.selected.keys().map(String::as_str)
    }

    pub fn indices(&self, name: &str) -> Option<&[u64]> {
        self.selected.get(name).map(Vec::as_slice)
    }

    pub fn universe(&self) -> &BTreeMap<String, u64> {
        &self.universe
    }

    /// Number of selected flat indices across all tensors.
    pub fn selected_count(&self) -> u64 {
        self.selected.values().map(|v| v.len() as u64).sum()
    }

    pub fn total_units(&self) -> u64 {
        self.total_units
    }

    pub fn k_percent(&self) -> f64 {
        self.k_percent
    }

    pub fn is_empty(&self) -> bool {
        self.selected.values().all(Vec::is_empty)
    }

    /// Serialize as a tensor store of U64 index lists named
    /// `<tensor>.idx`.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut builder = StoreBuilder::new()
            .metadata("kind", "mask")
            .metadata("k_percent", self.k_percent.to_string())
            .metadata("total_units", self.total_units.to_string())
            .metadata(
                "universe",
                serde_json::to_string(&self.universe).expect("universe serializes"),
            );
        for (name, indices) in &self.selected {
            if indices.is_empty() {
                continue;
            }
            builder = builder.add_u64(format!("{name}.idx"), &[indices.len()], indices.clone())?;
        }
        builder.write(path)
    }

    pub fn import(path: impl AsRef<Path>) -> Result<NeuronMask> {
        let store = TensorStore::open(path)?;
        if store.metadata().get("kind").map(String::as_str) != Some("mask") {
            return Err(Error::MalformedMask(
                "store is not a mask (metadata kind != 'mask')".to_string(),
            ));
        }
        let universe: BTreeMap<String, u64> = store
            .metadata()
            .get("universe")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| Error::MalformedMask(format!("bad universe metadata: {e}")))?
            .ok_or_else(|| Error::MalformedMask("missing universe metadata".to_string()))?;
        let k_percent = store
            .metadata()
            .get("k_percent")
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(0.0);
        let total_units = store
            .metadata()
            .get("total_units")
            .and_then(|s| s.parse::<u64>().ok())
            .unwrap_or(0);
        let mut selected = BTreeMap::new();
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let tensor = name.strip_suffix(".idx").ok_or_else(|| {
                Error::MalformedMask(format!("tensor '{name}' does not end in '.idx'"))
            })?;
            match store.read(&name)? {
                TensorData::U64(indices) => {
                    selected.insert(tensor.to_string(), indices);
                }
                TensorData::Float(_) => {
                    return Err(Error::MalformedMask(format!(
                        "index tensor '{name}' is not U64"
                    )));
                }
            }
        }
        NeuronMask::new(selected, universe, total_units, k_percent)
    }
}

struct Candidate {
    score: f64,
    name: String,
    unit: u64,
}

/// Descending score, then ascending (name, unit): the deterministic
/// preference order for top-k selection.
fn preferred(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.name.cmp(&b.name))
        .then_with(|| a.unit.cmp(&b.unit))
}

/// Select the top `k_percent` of eligible units by importance score,
/// jointly across all tensors that pass `filter`.
///
/// The selection size is `ceil(k/100 × N_eligible)`; ties break by
/// ascending (tensor name, unit index). Positive rescaling of all scores
/// leaves the result unchanged.
pub fn top_k_mask(
    imp: &ImportanceMap,
    k_percent: f64,
    filter: &PatternFilter,
) -> Result<NeuronMask> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "k_percent must be in (0, 100], got {k_percent}"
        )));
    }
    let eligible: Vec<&str> = imp.tensors().filter(|name| filter.matches(name)).collect();
    let total: u64 = eligible
        .iter()
        .map(|name| imp.scores(name).unwrap().len() as u64)
        .sum();
    if total == 0 {
        return Err(Error::InvalidParameter(
            "no eligible units for mask selection".to_string(),
        ));
    }
    let want = ((k_percent / 100.0) * total as f64).ceil() as u64;
    let want = want.clamp(1, total) as usize;

    // Per-tensor candidate lists pruned to the global budget, then one
    // deterministic reduction.
    let mut candidates: Vec<Candidate> = Vec::new();
    for name in &eligible {
        let scores = imp.scores(name).unwrap();
        let mut local: Vec<Candidate> = scores
            .iter()
            .enumerate()
            .map(|(unit, &score)| Candidate {
                score,
                name: name.to_string(),
                unit: unit as u64,
            })
            .collect();
        local.sort_unstable_by(preferred);
        local.truncate(want);
        candidates.extend(local);
    }
    candidates.sort_unstable_by(preferred);
    candidates.truncate(want);

    let mut selected_units: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for c in candidates {
        selected_units.entry(c.name).or_default().push(c.unit);
    }
    let mut selected = BTreeMap::new();
    for (name, mut units) in selected_units {
        units.sort_unstable();
        let indices = match imp.granularity {
            Granularity::Scalar => units,
            Granularity::Row => {
                let shape = imp.shape(&name).unwrap();
                let numel: usize = shape.iter().product();
                let rows = row_count(shape);
                let row_size = (numel / rows) as u64;
                units
                    .iter()
                    .flat_map(|&r| (r * row_size)..((r + 1) * row_size))
                    .collect()
            }
        };
        selected.insert(name, indices);
    }
    let universe: BTreeMap<String, u64> = imp
        .shapes
        .iter()
        .map(|(name, shape)| (name.clone(), shape.iter().product::<usize>() as u64))
        .collect();
    NeuronMask::new(selected, universe, total, k_percent)
}

fn check_same_universe(a: &NeuronMask, b: &NeuronMask) -> Result<()> {
    if a.universe != b.universe {
        return Err(Error::InvalidParameter(
            "masks have incompatible tensor universes".to_string(),
        ));
    }
    Ok(())
}

fn recompute_ratio(selected: &BTreeMap<String, Vec<u64>>, universe: &BTreeMap<String, u64>) -> (u64, f64) {
    let count: u64 = selected.values().map(|v| v.len() as u64).sum();
    let total: u64 = universe.values().sum();
    let k = if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    };
    (total, k)
}

/// Per-tensor set union of two masks over the same universe.
pub fn mask_union(a: &NeuronMask, b: &NeuronMask) -> Result<NeuronMask> {
    check_same_universe(a, b)?;
    let mut selected = a.selected.clone();
    for (name, indices) in &b.selected {
        let entry = selected.entry(name.clone()).or_default();
        entry.extend_from_slice(indices);
        entry.sort_unstable();
        entry.dedup();
    }
    selected.retain(|_, v| !v.is_empty());
    let (total, k) = recompute_ratio(&selected, &a.universe);
    NeuronMask::new(selected, a.universe.clone(), total, k)
}

/// Per-tensor set intersection of two masks over the same universe.
pub fn mask_intersect(a: &NeuronMask, b: &NeuronMask) -> Result<NeuronMask> {
    check_same_universe(a, b)?;
    let mut selected = BTreeMap::new();
    for (name, left) in &a.selected {
        if let Some(right) = b.selected.get(name) {
            let set: Vec<u64> = left.iter().copied().filter(|i| right.binary_search(i).is_ok()).collect();
            if !set.is_empty() {
                selected.insert(name.clone(), set);
            }
        }
    }
    let (total, k) = recompute_ratio(&selected, &a.universe);
    NeuronMask::new(selected, a.universe.clone(), total, k)
}

/// Rebuild a checkpoint that equals `base` everywhere except at masked
/// indices, where it takes the values of `trained`. This enforces masked
/// training after the fact when a trainer updated all parameters.
pub fn project_update(
    base: &TensorStore,
    trained: &TensorStore,
    mask: &NeuronMask,
    out: &Path,
) -> Result<TensorStore> {
    let float_universe: BTreeMap<String, u64> = base
        .entries()
        .filter(|m| m.dtype.is_float())
        .map(|m| (m.name.clone(), m.element_count() as u64))
        .collect();
    if float_universe != mask.universe {
        return Err(Error::InvalidParameter(
            "mask universe does not match the store's floating tensors".to_string(),
        ));
    }
    let metadata = BTreeMap::from([
        ("kind".to_string(), "checkpoint".to_string()),
        ("stage".to_string(), "project".to_string()),
        ("base_digest".to_string(), base.digest()?),
        ("trained_digest".to_string(), trained.digest()?),
        ("mask_k_percent".to_string(), mask.k_percent.to_string()),
    ]);
    stream_transform(
        &[("base", base), ("trained", trained)],
        OutDtype::MirrorFirst,
        metadata,
        out,
        |name, decoded| {
            let (b, t) = (&decoded[0], &decoded[1]);
            let mut values = b.clone();
            if let Some(indices) = mask.indices(name) {
                for &i in indices {
                    values[i as usize] = t[i as usize];
                }
            }
            Ok(values)
        },
    )
}
