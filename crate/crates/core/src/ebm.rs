//! Energy-based targets built from feature constraints.
//!
//! * pointwise: `P(x|c) = a(x|c) · Π_i φ_i(x, c)` for boolean features required
//!   with probability one;
//! * exponential: `P(x|c) = a(x|c) · exp(λ · φ(x, c))`, with `λ` fitted so the
//!   context-averaged moments of the normalized target match `μ̄`.
//!
//! `λ` is fitted by stochastic gradient descent on `E_τ E_{p_c} φ − μ̄`, the moments
//! being estimated by self-normalized importance sampling with the base model as
//! proposal.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AutoregressiveModel, Context, Scorer, Sequence, Vocab};
use crate::scorers::{batch_evaluate, ConstraintSpec, Feature, FeatureSpec};
use crate::snis::normalize_log_weights;

pub const TARGET_FORMAT_VERSION: u32 = 1;

/// `‖λ‖∞` beyond which a fit that has not met its tolerance is declared infeasible.
pub const LAMBDA_CAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbmForm {
    Pointwise,
    Exponential,
}

/// An unnormalized target `P(x|c)`. It scores sequences but cannot sample them.
#[derive(Debug, Clone)]
pub struct EbmTarget {
    base: Arc<AutoregressiveModel>,
    form: EbmForm,
    features: Vec<Feature>,
    lambda: Vec<f64>,
    conditional: bool,
}

impl EbmTarget {
    pub fn pointwise(base: Arc<AutoregressiveModel>, features: Vec<Feature>) -> Result<Self> {
        if let Some(f) = features.iter().find(|f| !f.is_boolean()) {
            return Err(Error::InvalidConfig(format!(
                "pointwise targets need boolean features; {:?} is {:?}",
                f.name(),
                f.kind()
            )));
        }
        Self::checked(base, EbmForm::Pointwise, features, Vec::new())
    }

    pub fn exponential(
        base: Arc<AutoregressiveModel>,
        features: Vec<Feature>,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != lambda.len() {
            return Err(Error::InvalidConfig(format!(
                "{} features but {} coefficients",
                features.len(),
                lambda.len()
            )));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidConfig("coefficients must be finite".into()));
        }
        Self::checked(base, EbmForm::Exponential, features, lambda)
    }

    fn checked(
        base: Arc<AutoregressiveModel>,
        form: EbmForm,
        features: Vec<Feature>,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::InvalidConfig("the base model of a target must be frozen".into()));
        }
        Ok(Self {
            base,
            form,
            features,
            lambda,
            conditional: true,
        })
    }

    /// When false, features are evaluated against the empty context.
    pub fn with_conditional_features(mut self, conditional: bool) -> Self {
        self.conditional = conditional;
        self
    }

    pub fn base(&self) -> &AutoregressiveModel {
        &self.base
    }

    pub fn base_arc(&self) -> Arc<AutoregressiveModel> {
        self.base.clone()
    }

    pub fn form(&self) -> EbmForm {
        self.form
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    fn feature_context<'a>(&self, context: &'a Context) -> std::borrow::Cow<'a, Context> {
        if self.conditional {
            std::borrow::Cow::Borrowed(context)
        } else {
            std::borrow::Cow::Owned(Context::empty())
        }
    }

    /// The energy term added to the base log-probability.
    fn energy(&self, phi: &[f64]) -> f64 {
        match self.form {
            EbmForm::Exponential => self.lambda.iter().zip(phi).map(|(l, f)| l * f).sum(),
            EbmForm::Pointwise => {
                if phi.iter().all(|&v| v == 1.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn to_document(&self, base_model_ref: impl Into<String>) -> Result<TargetDocument> {
        let features = self
            .features
            .iter()
            .map(|f| {
                f.spec().cloned().ok_or_else(|| {
                    Error::Unsupported(format!(
                        "feature {:?} is not a registry builtin and cannot be serialized",
                        f.name()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(TargetDocument {
            version: TARGET_FORMAT_VERSION,
            base_model_ref: base_model_ref.into(),
            form: self.form,
            features,
            lambda: self.lambda.clone(),
            conditional: self.conditional,
        })
    }

    pub fn from_document(doc: &TargetDocument, base: Arc<AutoregressiveModel>) -> Result<Self> {
        if doc.version != TARGET_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported target format version {}",
                doc.version
            )));
        }
        let features = doc
            .features
            .iter()
            .map(|s| s.build(base.vocab(), base.t_max()))
            .collect::<Result<Vec<_>>>()?;
        let target = match doc.form {
            EbmForm::Pointwise => Self::pointwise(base, features)?,
            EbmForm::Exponential => Self::exponential(base, features, doc.lambda.clone())?,
        };
        Ok(target.with_conditional_features(doc.conditional))
    }

    /// Writes the target document; `base_model_ref` is stored verbatim and
    /// resolved relative to the target file when loading.
    pub fn save(&self, path: impl AsRef<Path>, base_model_ref: &str) -> Result<()> {
        let doc = self.to_document(base_model_ref)?;
        fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let doc: TargetDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&doc.base_model_ref);
        let base = AutoregressiveModel::load(base_path)?.clone_model(true);
        Self::from_document(&doc, Arc::new(base))
    }
}

impl Scorer for EbmTarget {
    fn log_score_one(&self, sequence: &Sequence, context: &Context) -> Result<f64> {
        Ok(self.log_score(std::slice::from_ref(sequence), context)?[0])
    }

    fn log_score(&self, sequences: &[Sequence], context: &Context) -> Result<Vec<f64>> {
        let base = self.base.log_score(sequences, context)?;
        let phi = batch_evaluate(&self.features, sequences, &self.feature_context(context))?;
        Ok(base
            .into_iter()
            .zip(&phi)
            .map(|(b, row)| {
                if b == f64::NEG_INFINITY {
                    b
                } else {
                    b + self.energy(row)
                }
            })
            .collect())
    }

    fn vocab(&self) -> &Vocab {
        self.base.vocab()
    }

    fn t_max(&self) -> usize {
        self.base.t_max()
    }
}

/// Serialized form of a target:
/// `{version, base_model_ref, form, features, lambda, conditional}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDocument {
    pub version: u32,
    pub base_model_ref: String,
    pub form: EbmForm,
    pub features: Vec<FeatureSpec>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default = "yes")]
    pub conditional: bool,
}

fn yes() -> bool {
    true
}

/// A finite distribution `τ(c)` over contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDistribution {
    entries: Vec<(Context, f64)>,
}

impl ContextDistribution {
    /// Weights are normalized to sum to one.
    pub fn new(entries: Vec<(Context, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidConfig("context distribution is empty".into()));
        }
        if entries.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("context weights must be finite and non-negative".into()));
        }
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig("context weights sum to zero".into()));
        }
        Ok(Self {
            entries: entries.into_iter().map(|(c, w)| (c, w / total)).collect(),
        })
    }

    pub fn singleton(context: Context) -> Self {
        Self {
            entries: vec![(context, 1.0)],
        }
    }

    /// The single empty context of unconditional generation.
    pub fn unconditional() -> Self {
        Self::singleton(Context::empty())
    }

    pub fn uniform<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(texts.into_iter().map(|t| (Context::new(t), 1.0)).collect())
    }

    /// One context per non-blank line, uniformly weighted.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::uniform(text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_lines(&fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[(Context, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn context(&self, index: usize) -> &Context {
        &self.entries[index].0
    }

    /// True for a single empty context.
    pub fn is_unconditional(&self) -> bool {
        self.entries.len() == 1 && self.entries[0].0.text.is_empty()
    }

    /// `k` i.i.d. entry indices drawn from `τ`.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<usize> {
        if self.entries.len() == 1 {
            return vec![0; k];
        }
        let dist = WeightedIndex::new(self.entries.iter().map(|(_, w)| *w))
            .expect("weights validated at construction");
        (0..k).map(|_| dist.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaFitConfig {
    pub n_iterations: usize,
    /// Proposal samples per drawn context per iteration.
    pub samples_per_iteration: usize,
    /// Contexts drawn from `τ` per iteration.
    pub context_sampling_size: usize,
    pub learning_rate: f64,
    /// Allowed `‖μ̂ − μ̄‖∞` of the final moment estimate.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for LambdaFitConfig {
    fn default() -> Self {
        Self {
            n_iterations: 500,
            samples_per_iteration: 1024,
            context_sampling_size: 1,
            learning_rate: 0.5,
            tolerance: 0.05,
            seed: 0,
        }
    }
}

impl LambdaFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 || self.samples_per_iteration == 0 || self.context_sampling_size == 0 {
            return Err(Error::InvalidConfig("lambda fit counts must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "lambda fit learning_rate and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trajectory of a `λ` fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// `‖ĝ‖∞` at each iteration.
    pub gap_norms: Vec<f64>,
    /// `λ` after each iteration.
    pub lambda_trajectory: Vec<Vec<f64>>,
    /// Moments estimated at the final `λ` on a fresh batch.
    pub final_moments: Vec<f64>,
    pub final_gap: f64,
    pub converged: bool,
}

/// `E_τ E_{p_c} φ` estimated by SNIS with the base model as proposal.
fn snis_moments<R: Rng + ?Sized>(
    base: &AutoregressiveModel,
    features: &[Feature],
    lambda: &[f64],
    conditional: bool,
    contexts: &[(&Context, f64)],
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut moments = vec![0.0; features.len()];
    let empty = Context::empty();
    for &(ctx, weight) in contexts {
        let seqs: Vec<Sequence> = base.sample(ctx, n, rng)?.into_iter().map(|(s, _)| s).collect();
        let phi = batch_evaluate(features, &seqs, if conditional { ctx } else { &empty })?;
        let log_w: Vec<f64> = phi
            .iter()
            .map(|row| lambda.iter().zip(row).map(|(l, f)| l * f).sum())
            .collect();
        let Some(w) = normalize_log_weights(&log_w) else {
            let (j, _) = lambda
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, l)| if l.abs() > acc.1 { (j, l.abs()) } else { acc });
            return Err(Error::Starvation(format!(
                "all importance weights vanished in context {:?}; feature {:?} has coefficient {}",
                ctx.text,
                features[j].name(),
                lambda[j]
            )));
        };
        for (j, m) in moments.iter_mut().enumerate() {
            let col: Vec<f64> = phi.iter().map(|row| row[j]).collect();
            *m += weight * w.mean(&col);
        }
    }
    Ok(moments)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Fits `λ` by SGD on the SNIS estimate of `E_τ E_{p_c(·;λ)} φ − μ̄`, starting
/// from zero and drawing fresh base samples at every iteration.
pub fn fit_lambda(
    base: &AutoregressiveModel,
    spec: &ConstraintSpec,
    contexts: &ContextDistribution,
    cfg: &LambdaFitConfig,
) -> Result<(Vec<f64>, FitDiagnostics)> {
    spec.validate()?;
    cfg.validate()?;
    let conditional = !contexts.is_unconditional();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = spec.features.len();
    let mut lambda = vec![0.0; d];
    let mut diag = FitDiagnostics {
        gap_norms: Vec::with_capacity(cfg.n_iterations),
        lambda_trajectory: Vec::with_capacity(cfg.n_iterations),
        final_moments: Vec::new(),
        final_gap: f64::INFINITY,
        converged: false,
    };
    let k = cfg.context_sampling_size;
    for _ in 0..cfg.n_iterations {
        let drawn: Vec<(&Context, f64)> = contexts
            .sample_indices(&mut rng, k)
            .into_iter()
            .map(|i| (contexts.context(i), 1.0 / k as f64))
            .collect();
        let moments = snis_moments(
            base,
            &spec.features,
            &lambda,
            conditional,
            &drawn,
            cfg.samples_per_iteration,
            &mut rng,
        )?;
        let gap: Vec<f64> = moments.iter().zip(&spec.target_moments).map(|(m, t)| m - t).collect();
        let gap_norm = inf_norm(&gap);
        for (l, g) in lambda.iter_mut().zip(&gap) {
            *l -= cfg.learning_rate * g;
        }
        diag.gap_norms.push(gap_norm);
        diag.lambda_trajectory.push(lambda.clone());
        if inf_norm(&lambda) > LAMBDA_CAP && gap_norm > cfg.tolerance {
            return Err(Error::Infeasible(format!(
                "coefficients diverged (‖λ‖∞ = {:.1}) with moment gap {gap_norm:.4}; target moments {:?} look unattainable",
                inf_norm(&lambda),
                spec.target_moments
            )));
        }
    }
    let all: Vec<(&Context, f64)> = contexts.entries().iter().map(|(c, w)| (c, *w)).collect();
    let final_moments = snis_moments(
        base,
        &spec.features,
        &lambda,
        conditional,
        &all,
        4 * cfg.samples_per_iteration,
        &mut rng,
    )?;
    diag.final_gap = inf_norm(
        &final_moments
            .iter()
            .zip(&spec.target_moments)
            .map(|(m, t)| m - t)
            .collect::<Vec<_>>(),
    );
    diag.final_moments = final_moments;
    diag.converged = diag.final_gap <= cfg.tolerance;
    Ok((lambda, diag))
}

/// Builds the target that satisfies `spec` while staying closest to `base`:
/// pointwise when every constraint is a boolean required with probability one,
/// exponential with fitted `λ` otherwise.
pub fn constrain(
    base: Arc<AutoregressiveModel>,
    spec: &ConstraintSpec,
    contexts: &ContextDistribution,
    cfg: &LambdaFitConfig,
) -> Result<EbmTarget> {
    constrain_with_diagnostics(base, spec, contexts, cfg).map(|(t, _)| t)
}

pub fn constrain_with_diagnostics(
    base: Arc<AutoregressiveModel>,
    spec: &ConstraintSpec,
    contexts: &ContextDistribution,
    cfg: &LambdaFitConfig,
) -> Result<(EbmTarget, Option<FitDiagnostics>)> {
    spec.validate()?;
    cfg.validate()?;
    if !base.is_frozen() {
        return Err(Error::InvalidConfig("constrain needs a frozen base model".into()));
    }
    let conditional = !contexts.is_unconditional();
    if spec.is_pointwise() {
        let target = EbmTarget::pointwise(base.clone(), spec.features.clone())?
            .with_conditional_features(conditional);
        probe_support(&target, contexts, cfg)?;
        return Ok((target, None));
    }
    let (lambda, diag) = fit_lambda(&base, spec, contexts, cfg)?;
    if !diag.converged {
        return Err(Error::NotConverged {
            iterations: cfg.n_iterations,
            gap: diag.final_gap,
            tolerance: cfg.tolerance,
        });
    }
    let target = EbmTarget::exponential(base, spec.features.clone(), lambda)?
        .with_conditional_features(conditional);
    Ok((target, Some(diag)))
}

/// Fails when no base sample in any context satisfies a pointwise target.
fn probe_support(target: &EbmTarget, contexts: &ContextDistribution, cfg: &LambdaFitConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (ctx, _) in contexts.entries() {
        let seqs: Vec<Sequence> = target
            .base()
            .sample(ctx, cfg.samples_per_iteration, &mut rng)?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        if target.log_score(&seqs, ctx)?.iter().any(|l| l.is_finite()) {
            return Ok(());
        }
    }
    Err(Error::Infeasible(format!(
        "no base sample out of {} per context satisfies every pointwise constraint",
        cfg.samples_per_iteration
    )))
}

/// Temperature-scaled reward shaping: the target `a(x) exp(r(x)/β)`.
#[derive(Debug, Clone)]
pub struct RlhfConfig {
    pub reward: Feature,
    pub beta_rlhf: f64,
}

pub fn rlhf_target(base: Arc<AutoregressiveModel>, cfg: &RlhfConfig) -> Result<EbmTarget> {
    if !(cfg.beta_rlhf > 0.0) || !cfg.beta_rlhf.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "beta_rlhf must be positive and finite, got {}",
            cfg.beta_rlhf
        )));
    }
    EbmTarget::exponential(base, vec![cfg.reward.clone()], vec![1.0 / cfg.beta_rlhf])
}
