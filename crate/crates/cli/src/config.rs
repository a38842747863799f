//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use gdc::ebm::ContextDistribution;
use gdc::scorers::{ConstraintSpec, Feature, FeatureSpec};
use gdc::{LambdaFitConfig, ModelSpec, TunerConfig, Vocab};
use serde::{Deserialize, Serialize};

/// One experiment: base model, constraints, and the settings of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub features: Vec<FeatureSpec>,
    /// `μ̄`, one per feature.
    #[serde(default)]
    pub target_moments: Vec<f64>,
    /// Replaces the constraints with the reward-shaped target `a(x) exp(r(x)/β)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rlhf: Option<RlhfSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<ContextSource>,
    /// Contexts never seen in training, used only by verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_contexts: Option<ContextSource>,
    #[serde(default)]
    pub lambda_fit: LambdaFitConfig,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qrs: Option<QrsSection>,
    #[serde(default)]
    pub verify: VerifySection,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlhfSection {
    pub reward: FeatureSpec,
    pub beta: f64,
}

/// Either an inline list of contexts or a file with one context per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextSource {
    Inline(Vec<String>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrsSection {
    pub betas: Vec<f64>,
    /// Read `betas` as multiples of the partition estimate `Ẑ`.
    #[serde(default)]
    pub beta_normalized: bool,
    /// β used to draw the samples file; defaults to the largest grid value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_beta: Option<f64>,
    #[serde(default = "default_qrs_samples")]
    pub n_samples: usize,
    #[serde(default = "default_qrs_estimate")]
    pub n_estimate: usize,
    #[serde(default = "default_qrs_batch")]
    pub batch_size: usize,
    /// Context to sample in; defaults to the first training context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_qrs_samples() -> usize {
    1000
}

fn default_qrs_estimate() -> usize {
    100_000
}

fn default_qrs_batch() -> usize {
    256
}

/// Oracle checks applied by `--verify`. Absent checks are skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Upper bound on the final `KL(p ‖ πθ)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_kl: Option<f64>,
    /// Lower bound on every boolean feature's satisfaction rate under `πθ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_satisfaction: Option<f64>,
    /// Minimum fraction of the initial `KL(p ‖ a)` removed by tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_kl_reduction: Option<f64>,
    /// Features whose held-out moment must strictly increase from base to tuned.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub held_out_improves: Vec<String>,
    /// Every constrained feature's moment must end closer to `μ̄` than the base's.
    #[serde(default)]
    pub moments_move_toward_targets: bool,
    /// β-sweep oracle TVD must be non-increasing.
    #[serde(default)]
    pub qrs_tvd_monotone: bool,
}

impl ExperimentConfig {
    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| gdc::Error::InvalidConfig(format!("reading {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| gdc::Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for src in [&mut cfg.contexts, &mut cfg.held_out_contexts].into_iter().flatten() {
            if let ContextSource::File(p) = src {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.model.vocab()?;
        let features = self.build_features(&vocab)?;
        if self.rlhf.is_none() {
            if features.is_empty() {
                bail!(gdc::Error::InvalidConfig("no features and no rlhf section".into()));
            }
            ConstraintSpec::new(features.clone(), self.target_moments.clone())?;
        } else if let Some(r) = &self.rlhf {
            r.reward.build(&vocab, self.model.t_max)?;
        }
        let names: Vec<&str> = features.iter().map(Feature::name).collect();
        for n in &self.verify.held_out_improves {
            if !names.contains(&n.as_str()) {
                bail!(gdc::Error::InvalidConfig(format!("verify.held_out_improves names unknown feature {n:?}")));
            }
        }
        if !self.verify.held_out_improves.is_empty() && self.held_out_contexts.is_none() {
            bail!(gdc::Error::InvalidConfig("verify.held_out_improves needs held_out_contexts".into()));
        }
        for src in [&self.contexts, &self.held_out_contexts].into_iter().flatten() {
            if let ContextSource::File(p) = src {
                if !p.is_file() {
                    bail!(gdc::Error::InvalidConfig(format!("context file {} not found", p.display())));
                }
            }
        }
        self.lambda_fit.validate()?;
        self.tuner.validate()?;
        if let Some(q) = &self.qrs {
            if q.betas.is_empty() || q.betas.iter().any(|b| !(*b > 0.0)) {
                bail!(gdc::Error::InvalidConfig("qrs.betas must be a non-empty list of positive values".into()));
            }
            if q.n_samples == 0 || q.n_estimate == 0 || q.batch_size == 0 {
                bail!(gdc::Error::InvalidConfig("qrs counts must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn build_features(&self, vocab: &Vocab) -> Result<Vec<Feature>> {
        self.features
            .iter()
            .map(|f| f.build(vocab, self.model.t_max).map_err(Into::into))
            .collect()
    }

    pub fn training_contexts(&self) -> Result<ContextDistribution> {
        load_contexts(self.contexts.as_ref())
    }

    pub fn held_out(&self) -> Result<Option<ContextDistribution>> {
        self.held_out_contexts.as_ref().map(|s| load_contexts(Some(s))).transpose()
    }

    /// Applies a `--seed` override to every stochastic stage except model init.
    pub fn reseed(&mut self, seed: u64) {
        self.lambda_fit.seed = seed;
        self.tuner.seed = seed;
        if let Some(q) = &mut self.qrs {
            q.seed = seed;
        }
    }
}

fn load_contexts(src: Option<&ContextSource>) -> Result<ContextDistribution> {
    Ok(match src {
        None => ContextDistribution::unconditional(),
        Some(ContextSource::Inline(lines)) => ContextDistribution::uniform(lines.iter().cloned())?,
        Some(ContextSource::File(p)) => ContextDistribution::from_file(p)?,
    })
}
