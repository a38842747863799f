//! Importance-sampling estimates of training metrics, and metric loggers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::ebm::ContextDistribution;
use crate::error::{Error, Result};
use crate::model::{AutoregressiveModel, Scorer, Sequence};
use crate::scorers::{batch_evaluate, Feature};
use crate::snis::normalize_log_weights;

/// Log-ratio contributions are clamped to this magnitude before weighting.
pub const LOG_RATIO_CLAMP: f64 = 1e6;

/// A self-normalized importance-sampling estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnisEstimate {
    /// May be `+∞` for divergences when the model misses target mass.
    pub value: f64,
    pub std_error: f64,
    pub effective_sample_size: f64,
}

/// Per-sample log-scores of one proposal batch drawn in a single context.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBatch<'a> {
    /// Unnormalized target `log P(x)`.
    pub log_target: &'a [f64],
    /// Proposal `log q(x)`.
    pub log_proposal: &'a [f64],
}

/// `D_KL(p ‖ π)` from one batch: `Σ w̃ (log P − log Ẑ − log π)` with `w ∝ P/q`.
pub fn kl_target_model_from_batch(batch: ScoredBatch<'_>, log_model: &[f64]) -> Option<SnisEstimate> {
    let log_w: Vec<f64> = batch
        .log_target
        .iter()
        .zip(batch.log_proposal)
        .map(|(p, q)| p - q)
        .collect();
    let w = normalize_log_weights(&log_w)?;
    // Ẑ from the same batch
    let log_z = w.log_z;
    let mut missing_mass = false;
    let h: Vec<f64> = batch
        .log_target
        .iter()
        .zip(log_model)
        .zip(&w.weights)
        .map(|((p, m), wi)| {
            if *wi > 0.0 && *m == f64::NEG_INFINITY {
                missing_mass = true;
            }
            (p - m).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
        })
        .collect();
    if missing_mass {
        return Some(SnisEstimate {
            value: f64::INFINITY,
            std_error: f64::INFINITY,
            effective_sample_size: w.effective_sample_size(),
        });
    }
    Some(SnisEstimate {
        value: w.mean(&h) - log_z,
        std_error: w.std_error_less_log_z(&h),
        effective_sample_size: w.effective_sample_size(),
    })
}

/// `D_KL(π ‖ a)` from a proposal batch, weighting by `π/q`.
pub fn kl_model_base_from_batch(log_model: &[f64], log_proposal: &[f64], log_base: &[f64]) -> Option<SnisEstimate> {
    let log_w: Vec<f64> = log_model.iter().zip(log_proposal).map(|(m, q)| m - q).collect();
    let w = normalize_log_weights(&log_w)?;
    let mut missing_mass = false;
    let h: Vec<f64> = log_model
        .iter()
        .zip(log_base)
        .zip(&w.weights)
        .map(|((m, a), wi)| {
            if *wi > 0.0 && *a == f64::NEG_INFINITY {
                missing_mass = true;
            }
            (m - a).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
        })
        .collect();
    if missing_mass {
        return Some(SnisEstimate {
            value: f64::INFINITY,
            std_error: f64::INFINITY,
            effective_sample_size: w.effective_sample_size(),
        });
    }
    Some(SnisEstimate {
        value: w.mean(&h),
        std_error: w.std_error(&h),
        effective_sample_size: w.effective_sample_size(),
    })
}

/// SNIS moments `Σ w̃ φ_j` for log-weights `log_w` and a feature matrix.
pub fn moments_from_batch(log_w: &[f64], phi: &[Vec<f64>]) -> Option<Vec<SnisEstimate>> {
    let w = normalize_log_weights(log_w)?;
    let d = phi.first().map_or(0, Vec::len);
    Some(
        (0..d)
            .map(|j| {
                let col: Vec<f64> = phi.iter().map(|row| row[j]).collect();
                SnisEstimate {
                    value: w.mean(&col),
                    std_error: w.std_error(&col),
                    effective_sample_size: w.effective_sample_size(),
                }
            })
            .collect(),
    )
}

fn zero_weight(what: &str, context: &str) -> Error {
    Error::Starvation(format!("{what}: all importance weights are zero in context {context:?}"))
}

/// Combines per-context estimates with the context weights `τ`.
fn mix(parts: &[(f64, SnisEstimate)]) -> SnisEstimate {
    let value = parts.iter().map(|(t, e)| t * e.value).sum();
    let var: f64 = parts.iter().map(|(t, e)| (t * e.std_error).powi(2)).sum();
    SnisEstimate {
        value,
        std_error: var.sqrt(),
        effective_sample_size: parts.iter().map(|(_, e)| e.effective_sample_size).sum(),
    }
}

fn draw<R: Rng + ?Sized>(
    proposal: &AutoregressiveModel,
    context: &crate::model::Context,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Sequence>, Vec<f64>)> {
    Ok(proposal.sample(context, n, rng)?.into_iter().unzip())
}

/// SNIS estimate of `E_τ D_KL(p_c ‖ π(·|c))`, drawing `n` proposal samples in
/// every context of `τ`. Zero total weight in some context is an error.
pub fn estimate_kl_target_model<T: Scorer + ?Sized, R: Rng + ?Sized>(
    target: &T,
    model: &AutoregressiveModel,
    proposal: &AutoregressiveModel,
    contexts: &ContextDistribution,
    n: usize,
    rng: &mut R,
) -> Result<SnisEstimate> {
    if n < 2 {
        return Err(Error::InvalidConfig("need at least two samples".into()));
    }
    let mut parts = Vec::with_capacity(contexts.len());
    for (ctx, tau) in contexts.entries() {
        let (seqs, log_q) = draw(proposal, ctx, n, rng)?;
        let log_p = target.log_score(&seqs, ctx)?;
        let log_m = model.log_score(&seqs, ctx)?;
        let est = kl_target_model_from_batch(
            ScoredBatch {
                log_target: &log_p,
                log_proposal: &log_q,
            },
            &log_m,
        )
        .ok_or_else(|| zero_weight("kl_target_model", &ctx.text))?;
        parts.push((*tau, est));
    }
    Ok(mix(&parts))
}

/// SNIS estimate of `E_τ E_{p_c} φ` for each feature.
pub fn estimate_feature_moments<T: Scorer + ?Sized, R: Rng + ?Sized>(
    target: &T,
    features: &[Feature],
    proposal: &AutoregressiveModel,
    contexts: &ContextDistribution,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SnisEstimate>> {
    if n < 2 {
        return Err(Error::InvalidConfig("need at least two samples".into()));
    }
    let mut per_feature: Vec<Vec<(f64, SnisEstimate)>> = vec![Vec::new(); features.len()];
    for (ctx, tau) in contexts.entries() {
        let (seqs, log_q) = draw(proposal, ctx, n, rng)?;
        let log_p = target.log_score(&seqs, ctx)?;
        let log_w: Vec<f64> = log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect();
        let phi = batch_evaluate(features, &seqs, ctx)?;
        let est = moments_from_batch(&log_w, &phi).ok_or_else(|| zero_weight("feature moments", &ctx.text))?;
        for (slot, e) in per_feature.iter_mut().zip(est) {
            slot.push((*tau, e));
        }
    }
    Ok(per_feature.iter().map(|p| mix(p)).collect())
}

/// Summary of a QRS run attached to a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceDiag {
    pub beta: f64,
    pub acceptance_rate: f64,
    pub accepted: usize,
    pub attempts: usize,
}

/// Metrics emitted once per tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(with = "flagged_float")]
    pub kl_target_model: f64,
    #[serde(with = "flagged_float")]
    pub kl_model_base: f64,
    #[serde(with = "flagged_float")]
    pub z_estimate: f64,
    pub feature_moments: BTreeMap<String, f64>,
    pub proposal_refreshed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_diag: Option<AcceptanceDiag>,
    /// Keys this version does not know about, preserved on replay.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Finite floats as JSON numbers; infinities and NaN as `"inf"`, `"-inf"`, `"nan"`.
mod flagged_float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Flag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Flag(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unexpected float flag {other:?}"))),
            },
        }
    }
}

pub trait Logger {
    fn log(&mut self, metrics: &StepMetrics) -> Result<()>;
}

/// One human-readable line per step.
pub struct ConsoleLogger<W: Write = io::Stdout> {
    out: W,
}

impl ConsoleLogger<io::Stdout> {
    pub fn stdout() -> Self {
        Self { out: io::stdout() }
    }
}

impl<W: Write> ConsoleLogger<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Logger for ConsoleLogger<W> {
    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        let mut line = format!(
            "step {:>5}  kl_target_model {:>9.5}  kl_model_base {:>9.5}  z {:.4e}",
            m.step, m.kl_target_model, m.kl_model_base, m.z_estimate
        );
        for (name, v) in &m.feature_moments {
            line.push_str(&format!("  {name} {v:.4}"));
        }
        if m.proposal_refreshed {
            line.push_str("  [proposal refreshed]");
        }
        writeln!(self.out, "{line}").map_err(|source| Error::Logging { step: m.step, source })
    }
}

/// One JSON object per line, flushed after every write.
pub struct JsonlLogger<W: Write = BufWriter<File>> {
    out: W,
}

impl JsonlLogger<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> JsonlLogger<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Logger for JsonlLogger<W> {
    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|source| Error::Logging { step: m.step, source })
    }
}

/// Keeps every payload in memory.
#[derive(Debug, Default)]
pub struct MemoryLogger {
    pub history: Vec<StepMetrics>,
}

impl Logger for MemoryLogger {
    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        self.history.push(m.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullLogger;

impl Logger for NullLogger {
    fn log(&mut self, _: &StepMetrics) -> Result<()> {
        Ok(())
    }
}

/// Fans one payload out to several loggers, in order.
#[derive(Default)]
pub struct LoggerSet {
    loggers: Vec<Box<dyn Logger>>,
}

impl LoggerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, logger: impl Logger + 'static) -> Self {
        self.loggers.push(Box::new(logger));
        self
    }

    pub fn push(&mut self, logger: Box<dyn Logger>) {
        self.loggers.push(logger);
    }

    pub fn len(&self) -> usize {
        self.loggers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loggers.is_empty()
    }
}

impl Logger for LoggerSet {
    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        for l in &mut self.loggers {
            l.log(m)?;
        }
        Ok(())
    }
}

impl<L: Logger + ?Sized> Logger for &mut L {
    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        (**self).log(m)
    }
}

/// Replays a JSONL metrics file.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
