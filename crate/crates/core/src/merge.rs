//! Transfer merge: assemble the final checkpoint.
//!
//! For each tensor τ of the base model:
//!
//! ```text
//! τ̃ = τ_base + γ·R_ability[τ] + η·R_multilingual[τ]    if τ is selected
//! τ̃ = τ_base + R_multilingual[τ]                        otherwise
//! ```
//!
//! The unselected branch applies the multi-lingual weight with
//! coefficient one, exactly as published; `uniform_eta` applies η on both
//! branches for sensitivity studies. Per-element accumulation happens in
//! f64 and narrows once; each output tensor mirrors the base tensor's
//! storage dtype.

use std::collections::BTreeMap;
use std::path::Path;

use crate::delta::{map_elements, stream_transform, validate_aligned, OutDtype};
use crate::error::{Error, Result};
use crate::extract::AbilityWeight;
use crate::select::TensorSelection;
use crate::store::{DType, TensorStore};

/// Inputs and hyper-parameters of one merge.
pub struct MergePlan<'a> {
    pub base: &'a TensorStore,
    pub ability: &'a AbilityWeight,
    pub multilingual: &'a AbilityWeight,
    pub selection: &'a TensorSelection,
    pub gamma: f64,
    pub eta: f64,
    /// Apply η to the multi-lingual weight outside the selection too.
    pub uniform_eta: bool,
}

impl MergePlan<'_> {
    fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma and eta must be finite, got gamma={}, eta={}",
                self.gamma, self.eta
            )));
        }
        validate_aligned(&[
            ("base", self.base),
            ("ability", self.ability.store()),
            ("multilingual", self.multilingual.store()),
        ])?;
        for name in self.selection.names() {
            if !self.base.contains(name) {
                return Err(Error::UnknownTensor(name.clone()));
            }
        }
        Ok(())
    }

    fn metadata(&self) -> Result<BTreeMap<String, String>> {
        Ok(BTreeMap::from([
            ("kind".to_string(), "checkpoint".to_string()),
            ("stage".to_string(), "merge".to_string()),
            ("gamma".to_string(), self.gamma.to_string()),
            ("eta".to_string(), self.eta.to_string()),
            ("uniform_eta".to_string(), self.uniform_eta.to_string()),
            ("k2_percent".to_string(), self.selection.k2_percent().to_string()),
            ("base_digest".to_string(), self.base.digest()?),
            ("ability_digest".to_string(), self.ability.store().digest()?),
            (
                "multilingual_digest".to_string(),
                self.multilingual.store().digest()?,
            ),
        ]))
    }
}

#[inline]
fn add_term(acc: &mut f64, coefficient: f64, value: f32) {
    // Terms with a zero coefficient or zero value contribute nothing;
    // skipping them keeps degenerate merges bit-identical to the base.
    if coefficient != 0.0 && value != 0.0 {
        *acc += coefficient * value as f64;
    }
}

/// Merge the plan into a new checkpoint at `out`.
pub fn merge(plan: &MergePlan, out: &Path) -> Result<TensorStore> {
    plan.validate()?;
    let metadata = plan.metadata()?;
    stream_transform(
        &[
            ("base", plan.base),
            ("ability", plan.ability.store()),
            ("multilingual", plan.multilingual.store()),
        ],
        OutDtype::MirrorFirst,
        metadata,
        out,
        |name, decoded| {
            let (base, ability, lingual) = (&decoded[0], &decoded[1], &decoded[2]);
            let selected = plan.selection.contains(name);
            Ok(map_elements(base.len(), |i| {
                let mut acc = base[i] as f64;
                if selected {
                    add_term(&mut acc, plan.gamma, ability[i]);
                    add_term(&mut acc, plan.eta, lingual[i]);
                } else if plan.uniform_eta {
                    add_term(&mut acc, plan.eta, lingual[i]);
                } else {
                    add_term(&mut acc, 1.0, lingual[i]);
                }
                acc as f32
            }))
        },
    )
}

/// One row of a dry-run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSummaryRow {
    pub name: String,
    pub selected: bool,
    pub max_abs_update: f64,
    pub dtype: DType,
}

/// Per-tensor account of what a merge would do, computed without writing
/// anything.
#[derive(Debug, Clone)]
pub struct MergeSummary {
    pub rows: Vec<MergeSummaryRow>,
}

impl MergeSummary {
    pub fn render(&self) -> String {
        let mut text = String::from("tensor\tselected\tmax_abs_update\tdtype\n");
        for row in &self.rows {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.name, row.selected, row.max_abs_update, row.dtype
            ));
        }
        text
    }
}

/// Evaluate the merge per tensor, reporting the branch taken and the
/// largest absolute update, and surfacing any merge error without
/// writing a file.
pub fn dry_run(plan: &MergePlan) -> Result<MergeSummary> {
    plan.validate()?;
    let mut rows = Vec::with_capacity(plan.base.len());
    for meta in plan.base.entries() {
        let name = &meta.name;
        let base = plan.base.read_f32(name)?;
        let ability = plan.ability.store().read_f32(name)?;
        let lingual = plan.multilingual.store().read_f32(name)?;
        let selected = plan.selection.contains(name);
        let mut max_abs_update = 0.0f64;
        for i in 0..base.len() {
            let mut acc = base[i] as f64;
            if selected {
                add_term(&mut acc, plan.gamma, ability[i]);
                add_term(&mut acc, plan.eta, lingual[i]);
            } else if plan.uniform_eta {
                add_term(&mut acc, plan.eta, lingual[i]);
            } else {
                add_term(&mut acc, 1.0, lingual[i]);
            }
            if !(acc as f32).is_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index: i as u64,
                });
            }
            max_abs_update = max_abs_update.max((acc - base[i] as f64).abs());
        }
        rows.push(MergeSummaryRow {
            name: name.clone(),
            selected,
            max_abs_update,
            dtype: meta.dtype,
        });
    }
    Ok(MergeSummary { rows })
}
