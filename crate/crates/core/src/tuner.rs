//! Fine-tuning a softmax model toward an EBM target by distributional policy
//! gradients.
//!
//! Each step draws contexts from `τ`, samples from the proposal `q` in each, and
//! ascends `Σ_c (n_c/N) Σ_i w̃_i ∇θ log πθ(x_i|c)` with `w_i ∝ P_c(x_i)/q(x_i|c)`
//! normalized within the context. That is the self-normalized estimate of
//! `(1/Z_c) E_q[(P_c/q) ∇θ log πθ]`, the negative gradient of the cross-entropy
//! `CE(p_c, πθ)` averaged over contexts. Unconditional tuning is the special case
//! of a single empty context.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ebm::{ContextDistribution, EbmTarget};
use crate::error::{Error, Result};
use crate::metrics::{
    estimate_kl_target_model, kl_model_base_from_batch, kl_target_model_from_batch, moments_from_batch, Logger,
    ScoredBatch, SnisEstimate, StepMetrics,
};
use crate::model::{AutoregressiveModel, Context, Scorer, Sequence};
use crate::scorers::{batch_evaluate, Feature};
use crate::snis::normalize_log_weights;

/// Decay of the running partition estimate kept for logging.
pub const Z_RUNNING_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalPolicy {
    /// `q = πθ`, refreshed every step.
    #[default]
    OnPolicy,
    /// `q` is a frozen snapshot of `πθ`, replaced only when the estimated
    /// `D_KL(p, πθ)` has improved by more than one standard error.
    KlAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    pub n_gradient_steps: usize,
    pub n_samples_per_step: usize,
    /// Sampling micro-batch size.
    pub sampling_size: usize,
    /// Scoring micro-batch size.
    pub scoring_size: usize,
    /// Contexts drawn from `τ` per step.
    pub context_sampling_size: usize,
    pub learning_rate: f64,
    pub proposal_policy: ProposalPolicy,
    /// Proposal samples per context for the KL-adaptive refresh test.
    pub kl_eval_samples: usize,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            n_gradient_steps: 1000,
            n_samples_per_step: 1024,
            sampling_size: 64,
            scoring_size: 64,
            context_sampling_size: 1,
            learning_rate: 0.1,
            proposal_policy: ProposalPolicy::OnPolicy,
            kl_eval_samples: 1024,
            seed: 0,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_samples_per_step", self.n_samples_per_step),
            ("sampling_size", self.sampling_size),
            ("scoring_size", self.scoring_size),
            ("context_sampling_size", self.context_sampling_size),
            ("kl_eval_samples", self.kl_eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.n_samples_per_step % self.sampling_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_samples_per_step ({}) must be divisible by sampling_size ({})",
                self.n_samples_per_step, self.sampling_size
            )));
        }
        if self.context_sampling_size > self.n_samples_per_step {
            return Err(Error::InvalidConfig(
                "context_sampling_size exceeds n_samples_per_step".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Proposal samples drawn in one context.
#[derive(Debug, Clone)]
pub struct ContextBatch {
    pub context: Context,
    pub sequences: Vec<Sequence>,
    pub log_proposal: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DpgGradient {
    /// Ascent direction on `−E_τ CE(p_c, πθ)`.
    pub gradient: Vec<f64>,
    /// Per-batch `log Ẑ_c`; `None` where every weight was zero.
    pub log_z: Vec<Option<f64>>,
    /// Batches whose weights were all zero and so contributed nothing.
    pub starved: usize,
}

struct ScoredGroup {
    entry: usize,
    batch: ContextBatch,
    log_target: Vec<f64>,
}

fn chunked_gradient(
    model: &AutoregressiveModel,
    context: &Context,
    sequences: &[Sequence],
    scales: &[f64],
    chunk: usize,
) -> Result<Vec<f64>> {
    let partials: Vec<Vec<f64>> = sequences
        .par_chunks(chunk)
        .zip(scales.par_chunks(chunk))
        .map(|(s, w)| {
            let mut g = vec![0.0; model.n_params()];
            model.accumulate_grad_batch(s, w, context, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; model.n_params()];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(total)
}

fn gradient_from_scored(
    model: &AutoregressiveModel,
    groups: &[(&ContextBatch, &[f64])],
    chunk: usize,
) -> Result<DpgGradient> {
    let total: usize = groups.iter().map(|(b, _)| b.sequences.len()).sum();
    let mut gradient = vec![0.0; model.n_params()];
    let mut log_z = Vec::with_capacity(groups.len());
    let mut starved = 0;
    for (batch, log_target) in groups {
        let log_w: Vec<f64> = log_target.iter().zip(&batch.log_proposal).map(|(p, q)| p - q).collect();
        let Some(w) = normalize_log_weights(&log_w) else {
            starved += 1;
            log_z.push(None);
            continue;
        };
        log_z.push(Some(w.log_z));
        let share = batch.sequences.len() as f64 / total as f64;
        let scales: Vec<f64> = w.weights.iter().map(|x| share * x).collect();
        let g = chunked_gradient(model, &batch.context, &batch.sequences, &scales, chunk)?;
        for (t, v) in gradient.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(DpgGradient {
        gradient,
        log_z,
        starved,
    })
}

/// The DPG gradient of a batch of proposal samples grouped by context, with the
/// partition estimate `Ẑ_c` taken from each group's own weights.
pub fn dpg_gradient<T: Scorer + ?Sized>(
    model: &AutoregressiveModel,
    target: &T,
    batches: &[ContextBatch],
) -> Result<DpgGradient> {
    let scored: Vec<Vec<f64>> = batches
        .iter()
        .map(|b| target.log_score(&b.sequences, &b.context))
        .collect::<Result<_>>()?;
    let groups: Vec<(&ContextBatch, &[f64])> = batches.iter().zip(scored.iter().map(Vec::as_slice)).collect();
    gradient_from_scored(model, &groups, 256)
}

/// Tuning state: the model being trained, its proposal, and running estimates.
pub struct Tuner {
    model: AutoregressiveModel,
    proposal: Option<AutoregressiveModel>,
    target: EbmTarget,
    contexts: ContextDistribution,
    features: Vec<Feature>,
    cfg: TunerConfig,
    rng: ChaCha8Rng,
    step: usize,
    best_kl_estimate: f64,
    z_running: Vec<Option<f64>>,
    starvation_count: usize,
}

impl Tuner {
    pub fn new(
        model: AutoregressiveModel,
        target: EbmTarget,
        contexts: ContextDistribution,
        cfg: TunerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.is_frozen() {
            return Err(Error::FrozenModel);
        }
        if model.n_params() == 0 {
            return Err(Error::Unsupported("only softmax_parametric models can be tuned".into()));
        }
        if model.vocab() != target.vocab() || model.t_max() != target.t_max() {
            return Err(Error::InvalidConfig(
                "model and target live on different sequence spaces".into(),
            ));
        }
        let proposal = match cfg.proposal_policy {
            ProposalPolicy::OnPolicy => None,
            ProposalPolicy::KlAdaptive => Some(model.clone_model(true)),
        };
        let features = target.features().to_vec();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            z_running: vec![None; contexts.len()],
            model,
            proposal,
            target,
            contexts,
            features,
            cfg,
            step: 0,
            best_kl_estimate: f64::INFINITY,
            starvation_count: 0,
        })
    }

    /// Features whose moments under `πθ` are reported each step (defaults to the
    /// target's own features).
    pub fn with_features(mut self, features: Vec<Feature>) -> Self {
        self.features = features;
        self
    }

    pub fn model(&self) -> &AutoregressiveModel {
        &self.model
    }

    pub fn into_model(self) -> AutoregressiveModel {
        self.model
    }

    /// The sampling distribution currently used for gradient estimates.
    pub fn proposal(&self) -> &AutoregressiveModel {
        self.proposal.as_ref().unwrap_or(&self.model)
    }

    pub fn target(&self) -> &EbmTarget {
        &self.target
    }

    pub fn config(&self) -> &TunerConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn best_kl_estimate(&self) -> f64 {
        self.best_kl_estimate
    }

    /// Running (exponentially weighted) partition estimate per context of `τ`.
    pub fn z_estimates(&self) -> &[Option<f64>] {
        &self.z_running
    }

    /// Batches in which every sample had zero target weight.
    pub fn starvation_count(&self) -> usize {
        self.starvation_count
    }

    /// Replaces the model under training (e.g. for tests that pin `πθ`).
    pub fn set_model_params(&mut self, params: &[f64]) -> Result<()> {
        self.model.set_params(params)
    }

    fn draw_batches(&mut self) -> Result<Vec<(usize, ContextBatch)>> {
        let k = self.cfg.context_sampling_size;
        let n = self.cfg.n_samples_per_step;
        let drawn = self.contexts.sample_indices(&mut self.rng, k);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..n {
            *counts.entry(drawn[i % k]).or_default() += 1;
        }
        let mut jobs = Vec::new();
        for (&entry, &count) in &counts {
            let mut left = count;
            while left > 0 {
                let size = left.min(self.cfg.sampling_size);
                jobs.push((entry, size, self.rng.next_u64()));
                left -= size;
            }
        }
        let proposal = self.proposal.as_ref().unwrap_or(&self.model);
        let contexts = &self.contexts;
        let drawn: Vec<(usize, Vec<(Sequence, f64)>)> = jobs
            .par_iter()
            .map(|&(entry, size, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((entry, proposal.sample(contexts.context(entry), size, &mut rng)?))
            })
            .collect::<Result<_>>()?;
        let mut grouped: BTreeMap<usize, ContextBatch> = BTreeMap::new();
        for (entry, samples) in drawn {
            let batch = grouped.entry(entry).or_insert_with(|| ContextBatch {
                context: contexts.context(entry).clone(),
                sequences: Vec::new(),
                log_proposal: Vec::new(),
            });
            for (s, lp) in samples {
                batch.sequences.push(s);
                batch.log_proposal.push(lp);
            }
        }
        Ok(grouped.into_iter().collect())
    }

    fn score_chunked<S: Scorer + ?Sized>(&self, scorer: &S, batch: &ContextBatch) -> Result<Vec<f64>> {
        let parts: Vec<Vec<f64>> = batch
            .sequences
            .par_chunks(self.cfg.scoring_size)
            .map(|c| scorer.log_score(c, &batch.context))
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    /// One gradient step; returns the metrics of the batch it used.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batches = self.draw_batches()?;
        let groups: Vec<ScoredGroup> = batches
            .into_iter()
            .map(|(entry, batch)| {
                let log_target = self.score_chunked(&self.target, &batch)?;
                Ok(ScoredGroup {
                    entry,
                    batch,
                    log_target,
                })
            })
            .collect::<Result<_>>()?;

        let metrics = self.step_metrics(step, &groups)?;

        let refs: Vec<(&ContextBatch, &[f64])> = groups.iter().map(|g| (&g.batch, g.log_target.as_slice())).collect();
        let grad = gradient_from_scored(&self.model, &refs, self.cfg.scoring_size)?;
        self.starvation_count += grad.starved;
        for (g, lz) in groups.iter().zip(&grad.log_z) {
            if let Some(lz) = lz {
                let z = lz.exp();
                let slot = &mut self.z_running[g.entry];
                *slot = Some(match *slot {
                    Some(prev) => Z_RUNNING_DECAY * prev + (1.0 - Z_RUNNING_DECAY) * z,
                    None => z,
                });
            }
        }
        if grad.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        self.model.apply_update(&grad.gradient, self.cfg.learning_rate)?;
        if !self.model.parameters_finite() {
            return Err(Error::NumericalAbort {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        let refreshed = match self.cfg.proposal_policy {
            ProposalPolicy::OnPolicy => true,
            ProposalPolicy::KlAdaptive => self.update_proposal_if_improved()?,
        };
        self.step += 1;
        let mut metrics = metrics;
        metrics.proposal_refreshed = refreshed;
        if grad.starved > 0 {
            metrics.extra.insert("starved_contexts".into(), grad.starved.into());
        }
        Ok(metrics)
    }

    fn step_metrics(&self, step: usize, groups: &[ScoredGroup]) -> Result<StepMetrics> {
        let total: usize = groups.iter().map(|g| g.batch.sequences.len()).sum();
        let on_policy = self.proposal.is_none();
        let mut kl_target = Vec::new();
        let mut kl_base = Vec::new();
        let mut z = Vec::new();
        let mut moments: Vec<Vec<(f64, f64)>> = vec![Vec::new(); self.features.len()];
        for g in groups {
            let share = g.batch.sequences.len() as f64 / total as f64;
            let log_model = if on_policy {
                g.batch.log_proposal.clone()
            } else {
                self.score_chunked(&self.model, &g.batch)?
            };
            let log_base = self.score_chunked(self.target.base(), &g.batch)?;
            if let Some(e) = kl_target_model_from_batch(
                ScoredBatch {
                    log_target: &g.log_target,
                    log_proposal: &g.batch.log_proposal,
                },
                &log_model,
            ) {
                kl_target.push((share, e));
            }
            if let Some(e) = kl_model_base_from_batch(&log_model, &g.batch.log_proposal, &log_base) {
                kl_base.push((share, e));
            }
            let log_w: Vec<f64> = g.log_target.iter().zip(&g.batch.log_proposal).map(|(p, q)| p - q).collect();
            if let Some(w) = normalize_log_weights(&log_w) {
                z.push((share, w.z()));
            }
            if !self.features.is_empty() {
                let phi = batch_evaluate(&self.features, &g.batch.sequences, &g.batch.context)?;
                let model_w: Vec<f64> = log_model.iter().zip(&g.batch.log_proposal).map(|(m, q)| m - q).collect();
                if let Some(est) = moments_from_batch(&model_w, &phi) {
                    for (slot, e) in moments.iter_mut().zip(est) {
                        slot.push((share, e.value));
                    }
                }
            }
        }
        let weighted = |parts: &[(f64, SnisEstimate)]| -> f64 {
            let mass: f64 = parts.iter().map(|(s, _)| s).sum();
            if mass == 0.0 {
                f64::NAN
            } else {
                parts.iter().map(|(s, e)| s * e.value).sum::<f64>() / mass
            }
        };
        let plain = |parts: &[(f64, f64)]| -> f64 {
            let mass: f64 = parts.iter().map(|(s, _)| s).sum();
            if mass == 0.0 {
                f64::NAN
            } else {
                parts.iter().map(|(s, v)| s * v).sum::<f64>() / mass
            }
        };
        Ok(StepMetrics {
            step,
            kl_target_model: weighted(&kl_target),
            kl_model_base: weighted(&kl_base),
            z_estimate: plain(&z),
            feature_moments: self
                .features
                .iter()
                .zip(&moments)
                .map(|(f, m)| (f.name().to_string(), plain(m)))
                .collect(),
            proposal_refreshed: false,
            acceptance_diag: None,
            extra: BTreeMap::new(),
        })
    }

    /// KL-adaptive refresh: estimates `D_KL(p, πθ)` on fresh proposal samples and
    /// replaces the proposal with a frozen copy of `πθ` when the estimate beats the
    /// best so far by more than its standard error. The first call always
    /// refreshes.
    pub fn update_proposal_if_improved(&mut self) -> Result<bool> {
        if self.cfg.proposal_policy != ProposalPolicy::KlAdaptive {
            return Err(Error::Unsupported(
                "proposal refresh only applies to the kl_adaptive policy".into(),
            ));
        }
        let proposal = self.proposal.as_ref().expect("kl_adaptive keeps a proposal");
        let n = self.cfg.kl_eval_samples.max(2);
        let estimate = match estimate_kl_target_model(&self.target, &self.model, proposal, &self.contexts, n, &mut self.rng) {
            Ok(e) => e,
            Err(Error::Starvation(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        let improved = estimate.value.is_finite()
            && (self.best_kl_estimate == f64::INFINITY || estimate.value < self.best_kl_estimate - estimate.std_error);
        if improved {
            self.proposal = Some(self.model.clone_model(true));
            self.best_kl_estimate = estimate.value;
        }
        Ok(improved)
    }

    /// Runs the remaining configured steps, logging each, and returns the metric
    /// history of this call.
    pub fn tune(&mut self, logger: &mut dyn Logger) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::with_capacity(self.cfg.n_gradient_steps.saturating_sub(self.step));
        while self.step < self.cfg.n_gradient_steps {
            let m = self.step()?;
            logger.log(&m)?;
            history.push(m);
        }
        Ok(history)
    }
}
