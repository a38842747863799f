//! Features `φ(x, c)` and the builtin feature registry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Context, Sequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Any finite real.
    General,
    /// Strictly positive, so `log φ` is defined.
    Positive,
    /// Exactly 0 or 1; usable as a pointwise constraint.
    Boolean,
}

type FeatureFn = dyn Fn(&Sequence, &Context) -> f64 + Send + Sync;

/// A named real-valued function of a sample and its context.
#[derive(Clone)]
pub struct Feature {
    name: String,
    kind: FeatureKind,
    spec: Option<FeatureSpec>,
    func: Arc<FeatureFn>,
}

impl fmt::Debug for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Feature")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("spec", &self.spec)
            .finish()
    }
}

impl Feature {
    pub fn new(
        name: impl Into<String>,
        kind: FeatureKind,
        func: impl Fn(&Sequence, &Context) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            spec: None,
            func: Arc::new(func),
        }
    }

    pub fn boolean(
        name: impl Into<String>,
        pred: impl Fn(&Sequence, &Context) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, FeatureKind::Boolean, move |s, c| pred(s, c) as u8 as f64)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn is_boolean(&self) -> bool {
        self.kind == FeatureKind::Boolean
    }

    /// The registry entry this feature was built from, if any.
    pub fn spec(&self) -> Option<&FeatureSpec> {
        self.spec.as_ref()
    }

    /// Evaluates without validation.
    pub fn raw(&self, sequence: &Sequence, context: &Context) -> f64 {
        (self.func)(sequence, context)
    }

    pub fn evaluate(&self, sequence: &Sequence, context: &Context) -> Result<f64> {
        self.checked(self.raw(sequence, context), 0)
    }

    fn checked(&self, value: f64, sample: usize) -> Result<f64> {
        let reason = if !value.is_finite() {
            "non-finite value"
        } else {
            match self.kind {
                FeatureKind::General => return Ok(value),
                FeatureKind::Positive if value > 0.0 => return Ok(value),
                FeatureKind::Positive => "positive feature returned a non-positive value",
                FeatureKind::Boolean if value == 0.0 || value == 1.0 => return Ok(value),
                FeatureKind::Boolean => "boolean feature returned a value other than 0 or 1",
            }
        };
        Err(Error::FeatureValue {
            feature: self.name.clone(),
            sample,
            value,
            reason,
        })
    }

    /// Pointwise product. Boolean times boolean stays boolean.
    pub fn product(&self, other: &Feature) -> Feature {
        let kind = match (self.kind, other.kind) {
            (FeatureKind::Boolean, FeatureKind::Boolean) => FeatureKind::Boolean,
            (FeatureKind::General, _) | (_, FeatureKind::General) => FeatureKind::General,
            _ => FeatureKind::Positive,
        };
        let (a, b) = (self.func.clone(), other.func.clone());
        Feature {
            name: format!("{}*{}", self.name, other.name),
            kind,
            spec: None,
            func: Arc::new(move |s, c| a(s, c) * b(s, c)),
        }
    }
}

/// `[i][j]` = feature `j` on sample `i`. Errors carry the sample index.
pub fn batch_evaluate(
    features: &[Feature],
    samples: &[Sequence],
    context: &Context,
) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            features
                .iter()
                .map(|f| f.checked(f.raw(s, context), i))
                .collect()
        })
        .collect()
}

/// A builtin feature reference as it appears in config files:
/// `{"name": ..., "builtin": ..., "args": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub builtin: String,
    #[serde(default = "empty_args")]
    pub args: Value,
}

fn empty_args() -> Value {
    Value::Object(Default::default())
}

pub const BUILTINS: &[&str] = &[
    "contains_token",
    "count_token",
    "token_fraction",
    "length_fraction",
    "subset_of_context",
    "min_distinct_tokens",
    "table_reward",
    "constant",
];

fn arg<'a>(spec: &'a FeatureSpec, key: &str) -> Result<&'a Value> {
    spec.args.get(key).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "feature {:?} ({}) needs argument {key:?}",
            spec.name, spec.builtin
        ))
    })
}

fn token_arg(spec: &FeatureSpec, vocab: &Vocab) -> Result<usize> {
    let raw = arg(spec, "token")?;
    let id = match raw {
        Value::String(s) => vocab.id_of(s),
        Value::Number(n) => n.as_u64().map(|n| n as usize).filter(|&i| i < vocab.len()),
        _ => None,
    };
    id.filter(|&i| i != vocab.eos()).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "feature {:?}: {raw} is not a content token",
            spec.name
        ))
    })
}

fn number_arg(spec: &FeatureSpec, key: &str) -> Result<f64> {
    arg(spec, key)?.as_f64().ok_or_else(|| {
        Error::InvalidConfig(format!("feature {:?}: {key:?} must be a number", spec.name))
    })
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, builtin: impl Into<String>, args: Value) -> Self {
        Self {
            name: name.into(),
            builtin: builtin.into(),
            args,
        }
    }

    /// Resolves the builtin against a vocabulary and horizon.
    pub fn build(&self, vocab: &Vocab, t_max: usize) -> Result<Feature> {
        use FeatureKind::*;
        let (kind, func): (FeatureKind, Arc<FeatureFn>) = match self.builtin.as_str() {
            "contains_token" => {
                let tok = token_arg(self, vocab)?;
                (Boolean, Arc::new(move |s, _| s.body().contains(&tok) as u8 as f64))
            }
            "count_token" => {
                let tok = token_arg(self, vocab)?;
                (
                    General,
                    Arc::new(move |s, _| s.body().iter().filter(|&&t| t == tok).count() as f64),
                )
            }
            "token_fraction" => {
                let tok = token_arg(self, vocab)?;
                (
                    General,
                    Arc::new(move |s, _| {
                        if s.is_empty() {
                            0.0
                        } else {
                            s.body().iter().filter(|&&t| t == tok).count() as f64 / s.len() as f64
                        }
                    }),
                )
            }
            "length_fraction" => {
                let t = t_max as f64;
                (General, Arc::new(move |s, _| s.len() as f64 / t))
            }
            "subset_of_context" => {
                let vocab = vocab.clone();
                (
                    Boolean,
                    Arc::new(move |s, c| {
                        let allowed: BTreeSet<usize> = vocab.tokenize(&c.text).into_iter().collect();
                        s.body().iter().all(|t| allowed.contains(t)) as u8 as f64
                    }),
                )
            }
            "min_distinct_tokens" => {
                let min = number_arg(self, "min")?;
                (
                    Boolean,
                    Arc::new(move |s, _| {
                        let distinct: BTreeSet<&usize> = s.body().iter().collect();
                        (distinct.len() as f64 >= min) as u8 as f64
                    }),
                )
            }
            "table_reward" => {
                let table: BTreeMap<String, f64> =
                    serde_json::from_value(arg(self, "table")?.clone()).map_err(|e| {
                        Error::InvalidConfig(format!("feature {:?}: bad table: {e}", self.name))
                    })?;
                let default = match self.args.get("default") {
                    Some(_) => number_arg(self, "default")?,
                    None => 0.0,
                };
                (
                    General,
                    Arc::new(move |s, _| table.get(s.text()).copied().unwrap_or(default)),
                )
            }
            "constant" => {
                let value = number_arg(self, "value")?;
                let kind = if value > 0.0 { Positive } else { General };
                (kind, Arc::new(move |_, _| value))
            }
            other => return Err(Error::UnknownFeature(other.to_string())),
        };
        Ok(Feature {
            name: self.name.clone(),
            kind,
            spec: Some(self.clone()),
            func,
        })
    }
}

/// Features paired with the moments the target distribution must match.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub features: Vec<Feature>,
    pub target_moments: Vec<f64>,
}

impl ConstraintSpec {
    pub fn new(features: Vec<Feature>, target_moments: Vec<f64>) -> Result<Self> {
        let spec = Self {
            features,
            target_moments,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.target_moments.len() {
            return Err(Error::InvalidConfig(format!(
                "{} features but {} target moments",
                self.features.len(),
                self.target_moments.len()
            )));
        }
        if self.features.is_empty() {
            return Err(Error::InvalidConfig("no constraints given".into()));
        }
        for (f, &mu) in self.features.iter().zip(&self.target_moments) {
            if !mu.is_finite() {
                return Err(Error::InvalidConfig(format!("moment for {:?} is not finite", f.name())));
            }
            if f.is_boolean() && !(0.0..=1.0).contains(&mu) {
                return Err(Error::Infeasible(format!(
                    "boolean feature {:?} cannot have moment {mu}",
                    f.name()
                )));
            }
        }
        Ok(())
    }

    /// Every constraint is a boolean feature required with probability one.
    pub fn is_pointwise(&self) -> bool {
        self.features
            .iter()
            .zip(&self.target_moments)
            .all(|(f, &mu)| f.is_boolean() && mu == 1.0)
    }
}
