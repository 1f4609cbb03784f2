//! Ability- and language-specific weight extraction.
//!
//! The extraction decomposes parameter changes around the base model:
//!
//! ```text
//! R(A) = α · (Θ_ability_lang − Θ_base) − β · (Θ_lang − Θ_base)
//! ```
//!
//! The first delta captures ability plus language learning, the second
//! pure language learning; subtracting a β-scaled share of the latter
//! leaves a weight dominated by the ability. Language weights are the
//! degenerate α = 1, β = 0 case against the base alone.

use std::collections::BTreeMap;
use std::path::Path;

use crate::delta::{map_elements, stream_transform, OutDtype};
use crate::error::{Error, Result};
use crate::store::TensorStore;

/// Role of an extracted weight store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Ability,
    Language,
    Multilingual,
}

impl WeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Ability => "ability",
            WeightKind::Language => "language",
            WeightKind::Multilingual => "multilingual",
        }
    }

    pub fn parse(s: &str) -> Result<WeightKind> {
        match s {
            "ability" => Ok(WeightKind::Ability),
            "language" => Ok(WeightKind::Language),
            "multilingual" => Ok(WeightKind::Multilingual),
            other => Err(Error::InvalidParameter(format!(
                "unknown weight kind '{other}'"
            ))),
        }
    }
}

/// A delta-valued tensor store tagged with its extraction role and
/// coefficients.
pub struct AbilityWeight {
    store: TensorStore,
    kind: WeightKind,
    source: String,
    alpha: f64,
    beta: f64,
}

impl AbilityWeight {
    pub fn store(&self) -> &TensorStore {
        &self.store
    }

    pub fn into_store(self) -> TensorStore {
        self.store
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Reinterpret an opened store as a weight, reading role and
    /// coefficients from metadata.
    pub fn from_store(store: TensorStore) -> Result<AbilityWeight> {
        let kind = WeightKind::parse(
            store
                .metadata()
                .get("kind")
                .map(String::as_str)
                .unwrap_or(""),
        )?;
        let source = store
            .metadata()
            .get("source")
            .cloned()
            .unwrap_or_default();
        let alpha = store
            .metadata()
            .get("alpha")
            .and_then(|s| s.parse().ok())
            .unwrap_or(1.0);
        let beta = store
            .metadata()
            .get("beta")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0.0);
        Ok(AbilityWeight {
            store,
            kind,
            source,
            alpha,
            beta,
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<AbilityWeight> {
        AbilityWeight::from_store(TensorStore::open(path)?)
    }
}

/// Extract the ability-specific weight
/// `α · (θ_ability_lang − θ_base) − β · (θ_lang − θ_base)`.
///
/// Each element is evaluated in f64 and narrowed once; zero coefficients
/// drop their term entirely, so β = 0 reproduces the plain delta
/// bit-identically.
pub fn extract_ability(
    theta_ability_lang: &TensorStore,
    theta_lang: &TensorStore,
    theta_base: &TensorStore,
    alpha: f64,
    beta: f64,
    source: &str,
    out: &Path,
) -> Result<AbilityWeight> {
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "alpha and beta must be finite, got alpha={alpha}, beta={beta}"
        )));
    }
    let metadata = BTreeMap::from([
        ("kind".to_string(), WeightKind::Ability.as_str().to_string()),
        ("stage".to_string(), "extract".to_string()),
        ("source".to_string(), source.to_string()),
        ("alpha".to_string(), alpha.to_string()),
        ("beta".to_string(), beta.to_string()),
        ("ability_lang_digest".to_string(), theta_ability_lang.digest()?),
        ("lang_digest".to_string(), theta_lang.digest()?),
        ("base_digest".to_string(), theta_base.digest()?),
    ]);
    let store = stream_transform(
        &[
            ("ability_lang", theta_ability_lang),
            ("lang", theta_lang),
            ("base", theta_base),
        ],
        OutDtype::AllF32,
        metadata,
        out,
        |_, decoded| {
            let (al, lg, base) = (&decoded[0], &decoded[1], &decoded[2]);
            Ok(map_elements(base.len(), |i| {
                let mut acc = 0.0f64;
                if alpha != 0.0 {
                    acc += alpha * (al[i] as f64 - base[i] as f64);
                }
                if beta != 0.0 {
                    acc -= beta * (lg[i] as f64 - base[i] as f64);
                }
                acc as f32
            }))
        },
    )?;
    Ok(AbilityWeight {
        store,
        kind: WeightKind::Ability,
        source: source.to_string(),
        alpha,
        beta,
    })
}

/// Extract a language weight as the plain delta `θ_lang_trained − θ_base`
/// (extraction with α = 1, β = 0).
pub fn extract_language(
    theta_lang_trained: &TensorStore,
    theta_base: &TensorStore,
    language_id: &str,
    out: &Path,
) -> Result<AbilityWeight> {
    let metadata = BTreeMap::from([
        ("kind".to_string(), WeightKind::Language.as_str().to_string()),
        ("stage".to_string(), "extract".to_string()),
        ("source".to_string(), language_id.to_string()),
        ("alpha".to_string(), "1".to_string()),
        ("beta".to_string(), "0".to_string()),
        ("lang_digest".to_string(), theta_lang_trained.digest()?),
        ("base_digest".to_string(), theta_base.digest()?),
    ]);
    let store = stream_transform(
        &[("lang", theta_lang_trained), ("base", theta_base)],
        OutDtype::AllF32,
        metadata,
        out,
        |_, decoded| {
            let (lg, base) = (&decoded[0], &decoded[1]);
            Ok(map_elements(base.len(), |i| {
                (lg[i] as f64 - base[i] as f64) as f32
            }))
        },
    )?;
    Ok(AbilityWeight {
        store,
        kind: WeightKind::Language,
        source: language_id.to_string(),
        alpha: 1.0,
        beta: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::diff;
    use crate::store::{DType, StoreBuilder};
    use tempfile::TempDir;

    fn store(values: Vec<f32>) -> TensorStore {
        StoreBuilder::new()
            .add_f32("w", DType::F32, &[values.len()], values)
            .unwrap()
            .build()
    }

    #[test]
    fn matches_scalar_arithmetic() {
        let dir = TempDir::new().unwrap();
        // Θ_AL − Θ_o = [1, 0]; Θ_L − Θ_o = [0.5, 0.5]
        let base = store(vec![0.0, 0.0]);
        let al = store(vec![1.0, 0.0]);
        let lg = store(vec![0.5, 0.5]);
        let w = extract_ability(&al, &lg, &base, 0.8, 0.2, "math", &dir.path().join("r.st"))
            .unwrap();
        let got = w.store().read_f32("w").unwrap();
        assert!((got[0] - 0.7).abs() < 1e-7);
        assert!((got[1] + 0.1).abs() < 1e-7);
        assert_eq!(w.store().metadata()["alpha"], "0.8");
        assert_eq!(w.store().metadata()["beta"], "0.2");
    }

    #[test]
    fn beta_zero_equals_plain_delta_bit_identically() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![0.125, -7.25, 3.5, 0.1]);
        let al = store(vec![1.5, 2.25, -0.75, 0.1]);
        let lg = store(vec![9.0, 9.0, 9.0, 9.0]);
        let w =
            extract_ability(&al, &lg, &base, 1.0, 0.0, "tv", &dir.path().join("r.st")).unwrap();
        let d = diff(&al, &base, &dir.path().join("d.st")).unwrap();
        let wv = w.store().read_f32("w").unwrap();
        let dv = d.read_f32("w").unwrap();
        for (x, y) in wv.iter().zip(&dv) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn language_weight_is_the_plain_delta() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![1.0, 1.0]);
        let trained = store(vec![1.25, 0.5]);
        let w = extract_language(&trained, &base, "es", &dir.path().join("l.st")).unwrap();
        assert_eq!(w.store().read_f32("w").unwrap(), vec![0.25, -0.5]);
        assert_eq!(w.kind(), WeightKind::Language);
        assert_eq!(w.source(), "es");
    }

    #[test]
    fn untrained_language_gives_zero_weight() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![0.5, -2.0]);
        let w = extract_language(&base, &base, "es", &dir.path().join("l.st")).unwrap();
        assert_eq!(w.store().read_f32("w").unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn language_extraction_equals_degenerate_ability_extraction() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![0.5, -2.0, 0.75]);
        let trained = store(vec![0.75, -2.5, 0.75]);
        let lang = extract_language(&trained, &base, "es", &dir.path().join("l.st")).unwrap();
        let degenerate = extract_ability(
            &trained,
            &base,
            &base,
            1.0,
            0.0,
            "es",
            &dir.path().join("d.st"),
        )
        .unwrap();
        let lv = lang.store().read_f32("w").unwrap();
        let dv = degenerate.store().read_f32("w").unwrap();
        for (x, y) in lv.iter().zip(&dv) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_law_for_any_coefficients() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![0.5, -2.0]);
        for (alpha, beta) in [(0.8, 0.2), (1.0, 0.0), (-3.0, 7.5)] {
            let w = extract_ability(
                &base,
                &base,
                &base,
                alpha,
                beta,
                "x",
                &dir.path().join("z.st"),
            )
            .unwrap();
            assert_eq!(w.store().read_f32("w").unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn bilinearity_in_alpha_and_beta() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![0.0, 1.0, -1.0]);
        let al = store(vec![0.5, 1.5, -1.25]);
        let lg = store(vec![0.25, 0.5, -1.5]);
        // Doubling alpha doubles the alpha component exactly: compare
        // R(2α, 0) with 2 · R(α, 0).
        let single =
            extract_ability(&al, &lg, &base, 0.3, 0.0, "x", &dir.path().join("a1.st")).unwrap();
        let double =
            extract_ability(&al, &lg, &base, 0.6, 0.0, "x", &dir.path().join("a2.st")).unwrap();
        let sv = single.store().read_f32("w").unwrap();
        let dv = double.store().read_f32("w").unwrap();
        for (x, y) in sv.iter().zip(&dv) {
            assert_eq!(2.0 * x, *y);
        }
        // Same in beta.
        let single =
            extract_ability(&al, &lg, &base, 0.0, 0.3, "x", &dir.path().join("b1.st")).unwrap();
        let double =
            extract_ability(&al, &lg, &base, 0.0, 0.6, "x", &dir.path().join("b2.st")).unwrap();
        let sv = single.store().read_f32("w").unwrap();
        let dv = double.store().read_f32("w").unwrap();
        for (x, y) in sv.iter().zip(&dv) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn weight_reopens_with_metadata() {
        let dir = TempDir::new().unwrap();
        let base = store(vec![0.0]);
        let al = store(vec![1.0]);
        let path = dir.path().join("r.st");
        extract_ability(&al, &base, &base, 0.8, 0.2, "math", &path).unwrap();
        let reopened = AbilityWeight::open(&path).unwrap();
        assert_eq!(reopened.kind(), WeightKind::Ability);
        assert_eq!(reopened.source(), "math");
        assert_eq!(reopened.alpha(), 0.8);
        assert_eq!(reopened.beta(), 0.2);
    }
}
