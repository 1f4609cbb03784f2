//! Similarity-ranked tensor selection.
//!
//! Scores every parameter tensor by the similarity between the ability
//! weight and the multi-lingual weight, ranks descending, and selects the
//! low-similarity tail: the tensors with low linguistic effects that will
//! receive the ability update during merging. Name-pattern filters
//! restrict scoring to tensor families for sub-network experiments.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::delta::{tensor_cosine, tensor_dot, validate_aligned};
use crate::error::{Error, Result};
use crate::extract::AbilityWeight;
use crate::pattern::PatternFilter;

/// Similarity function between per-tensor weight slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Raw dot product (the default).
    Dot,
    /// Cosine similarity; errors on zero-norm tensors.
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        match s {
            "dot" => Ok(Metric::Dot),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric '{other}' (expected 'dot' or 'cosine')"
            ))),
        }
    }
}

/// Per-tensor similarity scores, sorted descending by score with ties
/// broken by ascending name.
#[derive(Debug, Clone)]
pub struct SimilarityReport {
    metric: Metric,
    rows: Vec<(String, f64)>,
}

impl SimilarityReport {
    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Rows in report order: descending score, ties by ascending name.
    pub fn rows(&self) -> &[(String, f64)] {
        &self.rows
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
    }
}

fn sort_report(rows: &mut Vec<(String, f64)>) {
    rows.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Score every tensor of the ability weight against the multi-lingual
/// weight.
pub fn similarity_report(
    ability: &AbilityWeight,
    multilingual: &AbilityWeight,
    metric: Metric,
) -> Result<SimilarityReport> {
    validate_aligned(&[
        ("ability", ability.store()),
        ("multilingual", multilingual.store()),
    ])?;
    let mut rows = Vec::with_capacity(ability.store().len());
    for name in ability.store().names().map(str::to_string).collect::<Vec<_>>() {
        let score = match metric {
            Metric::Dot => tensor_dot(ability.store(), multilingual.store(), &name)?,
            Metric::Cosine => tensor_cosine(ability.store(), multilingual.store(), &name)?,
        };
        rows.push((name, score));
    }
    sort_report(&mut rows);
    Ok(SimilarityReport { metric, rows })
}

/// Keep only rows whose names match the include patterns (all, when
/// empty) and none of the exclude patterns.
pub fn filter_patterns(
    report: &SimilarityReport,
    include: &[String],
    exclude: &[String],
) -> Result<SimilarityReport> {
    let filter = PatternFilter::new(include, exclude)?;
    let rows: Vec<(String, f64)> = report
        .rows
        .iter()
        .filter(|(name, _)| filter.matches(name))
        .cloned()
        .collect();
    Ok(SimilarityReport {
        metric: report.metric,
        rows,
    })
}

/// The set of tensor names chosen for the ability update.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSelection {
    names: BTreeSet<String>,
    k2_percent: f64,
}

impl TensorSelection {
    pub fn from_names(names: BTreeSet<String>, k2_percent: f64) -> TensorSelection {
        TensorSelection { names, k2_percent }
    }

    pub fn names(&self) -> &BTreeSet<String> {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn k2_percent(&self) -> f64 {
        self.k2_percent
    }

    /// The empty selection (merge then applies only the multi-lingual
    /// weight).
    pub fn empty() -> TensorSelection {
        TensorSelection {
            names: BTreeSet::new(),
            k2_percent: 0.0,
        }
    }
}

/// Select the `ceil(k2/100 × M)` lowest-scoring tensors of the report.
///
/// Ties at the selection boundary resolve by ascending name going into
/// the selection. `from_top` inverts the reading and takes the
/// highest-scoring tensors instead.
pub fn select_last(
    report: &SimilarityReport,
    k2_percent: f64,
    from_top: bool,
) -> Result<TensorSelection> {
    if !(k2_percent > 0.0 && k2_percent <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "k2_percent must be in (0, 100], got {k2_percent}"
        )));
    }
    if report.rows.is_empty() {
        return Err(Error::InvalidParameter(
            "similarity report is empty after filtering".to_string(),
        ));
    }
    let total = report.rows.len();
    let want = (((k2_percent / 100.0) * total as f64).ceil() as usize).clamp(1, total);
    let mut order: Vec<&(String, f64)> = report.rows.iter().collect();
    if from_top {
        order.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    } else {
        order.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    }
    let names: BTreeSet<String> = order[..want].iter().map(|(n, _)| n.clone()).collect();
    Ok(TensorSelection {
        names,
        k2_percent,
    })
}

/// On-disk form of a report plus its selection: one row per tensor with
/// name, score and selected flag.
#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub metric: Metric,
    pub k2_percent: f64,
    pub rows: Vec<SelectionRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionRow {
    pub name: String,
    pub score: f64,
    pub selected: bool,
}

impl SelectionFile {
    pub fn new(report: &SimilarityReport, selection: &TensorSelection) -> SelectionFile {
        SelectionFile {
            metric: report.metric,
            k2_percent: selection.k2_percent,
            rows: report
                .rows
                .iter()
                .map(|(name, score)| SelectionRow {
                    name: name.clone(),
                    score: *score,
                    selected: selection.contains(name),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidParameter(format!("selection serialization: {e}")))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SelectionFile> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("malformed selection file: {e}")))
    }

    pub fn selection(&self) -> TensorSelection {
        TensorSelection {
            names: self
                .rows
                .iter()
                .filter(|r| r.selected)
                .map(|r| r.name.clone())
                .collect(),
            k2_percent: self.k2_percent,
        }
    }
}
