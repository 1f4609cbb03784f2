//! Multi-lingual weight combination.
//!
//! Folds per-language weights into one multi-lingual weight
//! `R_Lang = Σ μ_i · R(L_i)`. Items are re-ordered by language id before
//! accumulation so the result is bit-identical no matter how the caller
//! ordered the inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::delta::{map_elements, stream_transform, OutDtype};
use crate::error::{Error, Result};
use crate::extract::{AbilityWeight, WeightKind};

/// Ordered set of per-language weights and their mixing coefficients.
pub struct LanguageWeightSet {
    items: Vec<(String, AbilityWeight, f64)>,
}

impl LanguageWeightSet {
    /// Build a set with explicit coefficients. Language ids must be
    /// unique; a `None` coefficient map assigns the uniform 1/n default.
    pub fn new(
        weights: Vec<(String, AbilityWeight)>,
        mu: Option<&BTreeMap<String, f64>>,
    ) -> Result<LanguageWeightSet> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter(
                "language weight set must contain at least one language".to_string(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (id, _) in &weights {
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate language id '{id}'"
                )));
            }
        }
        if let Some(mu) = mu {
            for id in mu.keys() {
                if !seen.contains(id) {
                    return Err(Error::InvalidParameter(format!(
                        "mu refers to unknown language '{id}'"
                    )));
                }
            }
        }
        let uniform = 1.0 / weights.len() as f64;
        let items = weights
            .into_iter()
            .map(|(id, weight)| {
                let coefficient = mu.and_then(|m| m.get(&id).copied()).unwrap_or(uniform);
                (id, weight, coefficient)
            })
            .collect();
        Ok(LanguageWeightSet { items })
    }

    pub fn items(&self) -> &[(String, AbilityWeight, f64)] {
        &self.items
    }
}

/// Combine language weights into the multi-lingual weight.
///
/// Accumulates `Σ μ_i · R(L_i)` per element in f64, iterating languages
/// in ascending id order; zero-μ terms are skipped.
pub fn combine(set: &LanguageWeightSet, out: &Path) -> Result<AbilityWeight> {
    let mut order: Vec<&(String, AbilityWeight, f64)> = set.items.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));

    let mut metadata = BTreeMap::from([
        ("kind".to_string(), WeightKind::Multilingual.as_str().to_string()),
        ("stage".to_string(), "combine".to_string()),
    ]);
    for (id, weight, mu) in &order {
        metadata.insert(format!("mu.{id}"), mu.to_string());
        metadata.insert(format!("source_digest.{id}"), weight.store().digest()?);
    }

    let inputs: Vec<(&str, &crate::store::TensorStore)> = order
        .iter()
        .map(|(id, weight, _)| (id.as_str(), weight.store()))
        .collect();
    let coefficients: Vec<f64> = order.iter().map(|(_, _, mu)| *mu).collect();

    let store = stream_transform(&inputs, OutDtype::AllF32, metadata, out, |_, decoded| {
        let n = decoded[0].len();
        Ok(map_elements(n, |i| {
            let mut acc = 0.0f64;
            for (values, &mu) in decoded.iter().zip(&coefficients) {
                if mu != 0.0 {
                    acc += mu * values[i] as f64;
                }
            }
            acc as f32
        }))
    })?;
    AbilityWeight::from_store(store)
}
