//! Quasi-rejection sampling.
//!
//! A proposal sample `x ~ q` is kept with probability `min(1, P(x) / (β q(x)))`,
//! so accepted samples follow `r_β(x) ∝ min(P(x), β q(x))`. Raising β lowers the
//! acceptance rate and moves `r_β` toward the normalized target `p`; once β
//! exceeds `max_x P(x)/q(x)`, `r_β = p`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ebm::EbmTarget;
use crate::error::{Error, Result};
use crate::model::{AutoregressiveModel, Context, Scorer, Sequence};
use crate::snis::log_sum_exp;

/// Attempts allowed per wanted sample before a run with no acceptances aborts.
pub const STARVATION_FACTOR: usize = 10_000;

/// Proposal batches drawn concurrently per round.
const JOBS_PER_ROUND: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrsConfig {
    /// Scale on the unnormalized target `P`.
    pub beta: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    256
}

impl QrsConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            batch_size: default_batch_size(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be positive and finite, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of [`qrs_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct QrsOutput {
    /// Accepted sequences with their target log-score `log P(x)`.
    pub accepted: Vec<(Sequence, f64)>,
    /// Proposal draws consumed, including the rejected ones.
    pub attempts: usize,
}

impl QrsOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted.len() as f64 / self.attempts as f64
        }
    }
}

struct Draw {
    sequence: Sequence,
    log_target: f64,
    accept: bool,
}

fn draw_batch(
    target: &EbmTarget,
    proposal: &AutoregressiveModel,
    log_beta: f64,
    context: &Context,
    n: usize,
    seed: u64,
) -> Result<Vec<Draw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (seqs, log_q): (Vec<Sequence>, Vec<f64>) = proposal.sample(context, n, &mut rng)?.into_iter().unzip();
    let log_p = target.log_score(&seqs, context)?;
    Ok(seqs
        .into_iter()
        .zip(log_p.into_iter().zip(log_q))
        .map(|(sequence, (lp, lq))| {
            let log_accept = (lp - log_beta - lq).min(0.0);
            let u: f64 = rng.random();
            Draw {
                sequence,
                log_target: lp,
                accept: lp > f64::NEG_INFINITY && u < log_accept.exp(),
            }
        })
        .collect())
}

/// Draws from `proposal` and keeps each sample independently with probability
/// `min(1, P/(βq))` until `n_wanted` are accepted.
///
/// Proposal batches are drawn in parallel, each from its own seeded stream, and
/// merged in a fixed order, so the output depends only on `cfg.seed`. A run
/// that reaches `STARVATION_FACTOR · n_wanted` attempts stops there: with no
/// acceptances that is an error, otherwise the partial result is returned.
pub fn qrs_sample(
    target: &EbmTarget,
    proposal: &AutoregressiveModel,
    cfg: &QrsConfig,
    context: &Context,
    n_wanted: usize,
) -> Result<QrsOutput> {
    cfg.validate()?;
    if proposal.vocab() != target.vocab() || proposal.t_max() != target.t_max() {
        return Err(Error::InvalidConfig("proposal and target live on different sequence spaces".into()));
    }
    let limit = STARVATION_FACTOR.saturating_mul(n_wanted.max(1));
    let log_beta = cfg.beta.ln();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = QrsOutput {
        accepted: Vec::with_capacity(n_wanted),
        attempts: 0,
    };
    while out.accepted.len() < n_wanted && out.attempts < limit {
        let seeds: Vec<u64> = (0..JOBS_PER_ROUND).map(|_| master.next_u64()).collect();
        let rounds: Vec<Vec<Draw>> = seeds
            .par_iter()
            .map(|&s| draw_batch(target, proposal, log_beta, context, cfg.batch_size, s))
            .collect::<Result<_>>()?;
        for d in rounds.into_iter().flatten() {
            if out.accepted.len() == n_wanted || out.attempts == limit {
                break;
            }
            out.attempts += 1;
            if d.accept {
                out.accepted.push((d.sequence, d.log_target));
            }
        }
    }
    if out.accepted.is_empty() && n_wanted > 0 {
        return Err(Error::Starvation(format!(
            "no sample accepted in {} attempts at beta = {}: β too large or proposal mismatched",
            out.attempts, cfg.beta
        )));
    }
    Ok(out)
}

/// An f-divergence generator `f` with `f(1) = 0`, giving `D_f(p, r) = E_r[f(p/r)]`.
pub type Generator = fn(f64) -> f64;

/// `f(t) = t log t`, which makes `D_f(p, r) = KL(p ‖ r)`.
pub fn kl_generator(t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * t.ln()
    }
}

/// `f(t) = |t − 1| / 2`, the total variation distance.
pub fn tvd_generator(t: f64) -> f64 {
    0.5 * (t - 1.0).abs()
}

/// Proposal samples scored once and reused for every β.
#[derive(Debug, Clone)]
pub struct ScoredPool {
    /// `log P(x) − log q(x)` per sample.
    pub log_ratio: Vec<f64>,
}

impl ScoredPool {
    pub fn draw<R: Rng + ?Sized>(
        target: &EbmTarget,
        proposal: &AutoregressiveModel,
        context: &Context,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (seqs, log_q): (Vec<Sequence>, Vec<f64>) = proposal.sample(context, n, rng)?.into_iter().unzip();
        let log_p = target.log_score(&seqs, context)?;
        Ok(Self {
            log_ratio: log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.log_ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_ratio.is_empty()
    }

    /// `E_q[min(1, P/(βq))]`.
    pub fn acceptance_rate(&self, beta: f64) -> f64 {
        let lb = beta.ln();
        self.log_ratio.iter().map(|l| (l - lb).min(0.0).exp()).sum::<f64>() / self.len() as f64
    }

    /// `D_f(p, r_β)` with both laws weighted against the shared proposal pool:
    /// `p ∝ (P/q)·q` and `r_β ∝ min(P/q, β)·q`. `None` if the pool has no
    /// target mass.
    pub fn divergence(&self, beta: f64, f: Generator) -> Option<f64> {
        let lb = beta.ln();
        let log_c: Vec<f64> = self.log_ratio.iter().map(|l| l.min(lb)).collect();
        let log_zp = log_sum_exp(&self.log_ratio);
        let log_zr = log_sum_exp(&log_c);
        if !log_zp.is_finite() || !log_zr.is_finite() {
            return None;
        }
        let total: f64 = self
            .log_ratio
            .iter()
            .zip(&log_c)
            .filter(|(_, c)| **c > f64::NEG_INFINITY)
            .map(|(l, c)| {
                let r = (c - log_zr).exp();
                let t = ((l - log_zp) - (c - log_zr)).exp();
                r * f(t)
            })
            .sum();
        Some(total)
    }
}

impl ScoredPool {
    /// `D_f(p, q)` for the proposal itself, the baseline QRS improves on.
    pub fn proposal_divergence(&self, f: Generator) -> Option<f64> {
        let log_zp = log_sum_exp(&self.log_ratio);
        if !log_zp.is_finite() {
            return None;
        }
        let n = self.len() as f64;
        let shift = log_zp - n.ln();
        Some(self.log_ratio.iter().map(|l| f((l - shift).exp())).sum::<f64>() / n)
    }

    /// `log Ẑ = log mean(P/q)`.
    pub fn log_partition(&self) -> f64 {
        log_sum_exp(&self.log_ratio) - (self.len() as f64).ln()
    }
}

/// Per-β estimates from [`qrs_estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    pub beta: f64,
    pub acceptance_rate: f64,
    /// `KL(p ‖ r_β)`.
    pub kl_to_target: f64,
    pub tvd_to_target: f64,
}

/// Acceptance rate and divergences to `p` over a β grid, all from one shared
/// pool of `n_samples` proposal draws.
pub fn qrs_estimate<R: Rng + ?Sized>(
    target: &EbmTarget,
    proposal: &AutoregressiveModel,
    beta_grid: &[f64],
    context: &Context,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<BetaEstimate>> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    if let Some(b) = beta_grid.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {b}")));
    }
    let pool = ScoredPool::draw(target, proposal, context, n_samples, rng)?;
    Ok(estimates_from_pool(&pool, beta_grid))
}

pub fn estimates_from_pool(pool: &ScoredPool, beta_grid: &[f64]) -> Vec<BetaEstimate> {
    beta_grid
        .iter()
        .map(|&beta| BetaEstimate {
            beta,
            acceptance_rate: pool.acceptance_rate(beta),
            kl_to_target: pool.divergence(beta, kl_generator).unwrap_or(f64::NAN),
            tvd_to_target: pool.divergence(beta, tvd_generator).unwrap_or(f64::NAN),
        })
        .collect()
}

/// Writes the β sweep as CSV with header `beta,acceptance_rate,kl_to_target,tvd_to_target`.
pub fn write_estimates_csv<W: Write>(out: W, rows: &[BetaEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_estimates_csv(path: impl AsRef<Path>, rows: &[BetaEstimate]) -> Result<()> {
    write_estimates_csv(std::fs::File::create(path)?, rows)
}

/// Writes accepted samples as CSV with header `text,log_target`.
pub fn write_samples_csv<W: Write>(out: W, samples: &[(Sequence, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["text", "log_target"])?;
    for (s, lp) in samples {
        w.write_record([s.text(), lp.to_string().as_str()])?;
    }
    w.flush()?;
    Ok(())
}
