//! Constraint declarations as they appear in run configs.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::families::{disc_constraint, gen_constraint, gen_constraints};
use super::keyword::{keyword_set_constraint, KeywordConstraint, DEFAULT_DELTA, DEFAULT_TAU};
use super::ConstraintSpec;
use crate::error::{Error, Result};
use crate::model::{AttributeClassifier, ConditionalLM, EmbeddingTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Discriminative,
    Generative,
    Keyword,
    KeywordSet,
}

/// `{type, parameters, threshold}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDecl {
    #[serde(rename = "type")]
    pub kind: ConstraintKind,
    pub parameters: Value,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscParams {
    model: String,
    label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenParams {
    model: String,
    desired: String,
    #[serde(default)]
    other: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeywordParams {
    phrase: String,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_delta")]
    delta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeywordSetParams {
    words: Vec<String>,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_delta")]
    delta: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

/// Constraint models available to declarations, keyed by the `model`
/// parameter (a checkpoint path in practice).
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub table: Arc<EmbeddingTable>,
    pub classifiers: BTreeMap<String, Arc<AttributeClassifier>>,
    pub conditionals: BTreeMap<String, Arc<ConditionalLM>>,
}

fn params<T: serde::de::DeserializeOwned>(decl: &ConstraintDecl, index: usize) -> Result<T> {
    serde_json::from_value(decl.parameters.clone())
        .map_err(|e| Error::invalid(format!("constraint #{index} ({:?}) parameters: {e}", decl.kind)))
}

fn label_index(labels: &[String], name: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| Error::invalid(format!("unknown label {name:?}; known: {labels:?}")))
}

impl ConstraintDecl {
    /// The `model` parameter, if this declaration needs one.
    pub fn model_path(&self) -> Option<String> {
        match self.kind {
            ConstraintKind::Discriminative | ConstraintKind::Generative => {
                self.parameters.get("model").and_then(Value::as_str).map(String::from)
            }
            _ => None,
        }
    }

    /// Builds the specs for this declaration; generative declarations
    /// without `other` expand to one spec per competing label.
    pub fn build(&self, index: usize, models: &ModelSet) -> Result<Vec<ConstraintSpec>> {
        let missing = |what: &str, key: &str| Error::invalid(format!("constraint #{index}: no {what} loaded for {key:?}"));
        match self.kind {
            ConstraintKind::Discriminative => {
                let p: DiscParams = params(self, index)?;
                let clf = models.classifiers.get(&p.model).ok_or_else(|| missing("classifier", &p.model))?;
                let label = label_index(clf.labels(), &p.label)?;
                let p_min = self
                    .threshold
                    .ok_or_else(|| Error::invalid(format!("constraint #{index}: discriminative needs a threshold (p_min)")))?;
                Ok(vec![disc_constraint(clf.clone(), label, p_min)?])
            }
            ConstraintKind::Generative => {
                let p: GenParams = params(self, index)?;
                if self.threshold.is_some_and(|t| t != 0.0) {
                    return Err(Error::invalid(format!("constraint #{index}: generative threshold is fixed at 0")));
                }
                let cond = models.conditionals.get(&p.model).ok_or_else(|| missing("conditional LM", &p.model))?;
                let desired = label_index(cond.labels(), &p.desired)?;
                match p.other {
                    Some(o) => Ok(vec![gen_constraint(cond.clone(), desired, label_index(cond.labels(), &o)?)?]),
                    None => gen_constraints(cond.clone(), desired),
                }
            }
            ConstraintKind::Keyword => {
                let p: KeywordParams = params(self, index)?;
                self.reject_threshold(index)?;
                let ids = models.table.lexicon().encode(&p.phrase)?;
                let kc = KeywordConstraint::new(&models.table, ids, p.tau, p.delta)?;
                Ok(vec![kc.into_spec(format!("keyword:{}", p.phrase))?])
            }
            ConstraintKind::KeywordSet => {
                let p: KeywordSetParams = params(self, index)?;
                self.reject_threshold(index)?;
                let words = p
                    .words
                    .iter()
                    .map(|w| models.table.lexicon().encode(w))
                    .collect::<Result<Vec<_>>>()?;
                let set = keyword_set_constraint(&models.table, &words, p.tau, p.delta)?;
                Ok(vec![set.into_spec(format!("keyword_set:{}", p.words.join("|")))?])
            }
        }
    }

    fn reject_threshold(&self, index: usize) -> Result<()> {
        if self.threshold.is_some() {
            return Err(Error::invalid(format!(
                "constraint #{index}: keyword thresholds are derived from the table and cannot be set"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::Lexicon;

    fn models() -> ModelSet {
        let lex = Lexicon::build(["a b c d e f"], &[]);
        let table = Arc::new(EmbeddingTable::new(Tensor::identity(lex.len()), lex).unwrap());
        let clf = Arc::new(AttributeClassifier::zeros(table.clone(), vec!["neg".into(), "pos".into()], 2).unwrap());
        ModelSet {
            table,
            classifiers: [("clf.bin".to_string(), clf)].into(),
            conditionals: BTreeMap::new(),
        }
    }

    fn parse(json: &str) -> Result<Vec<ConstraintSpec>> {
        let decls: Vec<ConstraintDecl> = serde_json::from_str(json)?;
        let m = models();
        let mut out = Vec::new();
        for (i, d) in decls.iter().enumerate() {
            out.extend(d.build(i, &m)?);
        }
        Ok(out)
    }

    #[test]
    fn declarations_build_specs() {
        let specs = parse(
            r#"[{"type": "discriminative", "parameters": {"model": "clf.bin", "label": "pos"}, "threshold": 0.9},
                {"type": "keyword", "parameters": {"phrase": "c d"}},
                {"type": "keyword_set", "parameters": {"words": ["a", "e f"], "tau": 0.3}}]"#,
        )
        .unwrap();
        assert_eq!(specs.len(), 3);
        assert!((specs[0].epsilon + 0.9f64.ln()).abs() < 1e-15);
        assert_eq!(specs[1].f.holds_on_tokens(&[4, 5]), Some(true));
    }

    #[test]
    fn bad_declarations_are_rejected() {
        assert!(parse(r#"[{"type": "keyword", "parameters": {"phrase": "a"}, "threshold": 1.0}]"#).is_err());
        assert!(parse(r#"[{"type": "keyword", "parameters": {"phrase": "zzz"}}]"#).is_err());
        assert!(parse(r#"[{"type": "keyword", "parameters": {"phrase": "a", "extra": 1}}]"#).is_err());
        assert!(parse(r#"[{"type": "discriminative", "parameters": {"model": "x", "label": "pos"}, "threshold": 0.9}]"#).is_err());
        assert!(parse(r#"[{"type": "discriminative", "parameters": {"model": "clf.bin", "label": "pos"}}]"#).is_err());
        assert!(parse(r#"[{"type": "bogus", "parameters": {}}]"#).is_err());
        assert!(parse(r#"[{"type": "keyword", "parameters": {"phrase": "a"}, "oops": 1}]"#).is_err());
    }
}
