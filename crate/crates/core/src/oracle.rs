//! Exact ground truth by enumerating the finite sequence space.
//!
//! Every sum runs over all eos-terminated sequences with at most `t_max` content
//! tokens, in chunks, so nothing larger than [`MAX_MATERIALIZED`] entries is held
//! in memory unless a caller asks for a full table.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ebm::{ContextDistribution, EbmTarget};
use crate::error::{Error, Result};
use crate::model::{for_each_prefix, AutoregressiveModel, Context, Scorer, Sequence, Vocab};
use crate::scorers::{batch_evaluate, ConstraintSpec, Feature};

/// Largest space the oracle will enumerate.
pub const MAX_ENUMERATION: u128 = 10_000_000;
/// Largest table the oracle will materialize.
pub const MAX_MATERIALIZED: u128 = 1_000_000;

const CHUNK: usize = 4096;
const NEWTON_TOLERANCE: f64 = 1e-10;
const NEWTON_DAMPING: f64 = 1e-9;
const NEWTON_MAX_ITERATIONS: usize = 100;

/// All eos-terminated sequences over `vocab` with at most `t_max` content tokens,
/// ordered by length and then lexicographically by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpace {
    vocab: Vocab,
    t_max: usize,
}

impl SequenceSpace {
    pub fn new(vocab: Vocab, t_max: usize) -> Self {
        Self { vocab, t_max }
    }

    pub fn of<S: Scorer + ?Sized>(scorer: &S) -> Self {
        Self::new(scorer.vocab().clone(), scorer.t_max())
    }

    /// `Σ_{t=0..t_max} m^t` with `m` content tokens.
    pub fn size(&self) -> u128 {
        let m = self.vocab.n_content() as u128;
        let mut total: u128 = 0;
        let mut level: u128 = 1;
        for _ in 0..=self.t_max {
            total = total.saturating_add(level);
            level = level.saturating_mul(m);
        }
        total
    }

    fn guard(&self, limit: u128) -> Result<()> {
        let size = self.size();
        if size > limit {
            return Err(Error::SpaceTooLarge { size, limit });
        }
        Ok(())
    }

    /// Visits the space in chunks of at most 4096 sequences.
    pub fn for_each_chunk(&self, mut f: impl FnMut(&[Sequence]) -> Result<()>) -> Result<()> {
        self.guard(MAX_ENUMERATION)?;
        let mut chunk = Vec::with_capacity(CHUNK);
        for depth in 0..=self.t_max {
            for_each_prefix(&self.vocab, depth, |body| {
                chunk.push(Sequence::from_body(&self.vocab, body)?);
                if chunk.len() == CHUNK {
                    f(&chunk)?;
                    chunk.clear();
                }
                Ok(())
            })?;
        }
        if !chunk.is_empty() {
            f(&chunk)?;
        }
        Ok(())
    }

    pub fn sequences(&self) -> Result<Vec<Sequence>> {
        self.guard(MAX_MATERIALIZED)?;
        let mut out = Vec::with_capacity(self.size() as usize);
        self.for_each_chunk(|c| {
            out.extend_from_slice(c);
            Ok(())
        })?;
        Ok(out)
    }
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Unnormalized log-scores of the whole space, in enumeration order.
pub fn log_table<S: Scorer + ?Sized>(scorer: &S, space: &SequenceSpace, context: &Context) -> Result<Vec<f64>> {
    space.guard(MAX_MATERIALIZED)?;
    let mut out = Vec::with_capacity(space.size() as usize);
    space.for_each_chunk(|c| {
        out.extend(scorer.log_score(c, context)?);
        Ok(())
    })?;
    Ok(out)
}

/// Normalized probabilities of the whole space, in enumeration order.
pub fn probability_table<S: Scorer + ?Sized>(
    scorer: &S,
    space: &SequenceSpace,
    context: &Context,
) -> Result<Vec<f64>> {
    let logs = log_table(scorer, space, context)?;
    let mut acc = LogSum::new();
    logs.iter().for_each(|&l| acc.add(l));
    let log_z = acc.value();
    if !log_z.is_finite() {
        return Err(Error::Infeasible(format!(
            "scorer assigns zero total mass in context {:?}",
            context.text
        )));
    }
    Ok(logs.into_iter().map(|l| (l - log_z).exp()).collect())
}

pub fn exact_log_partition<S: Scorer + ?Sized>(target: &S, space: &SequenceSpace, context: &Context) -> Result<f64> {
    let mut acc = LogSum::new();
    space.for_each_chunk(|c| {
        target.log_score(c, context)?.into_iter().for_each(|l| acc.add(l));
        Ok(())
    })?;
    Ok(acc.value())
}

/// `Z_c = Σ_x P_c(x)`.
pub fn exact_partition<S: Scorer + ?Sized>(target: &S, space: &SequenceSpace, context: &Context) -> Result<f64> {
    exact_log_partition(target, space, context).map(f64::exp)
}

fn normalized_log_partition<S: Scorer + ?Sized>(s: &S, space: &SequenceSpace, context: &Context) -> Result<f64> {
    let log_z = exact_log_partition(s, space, context)?;
    if !log_z.is_finite() {
        return Err(Error::Infeasible(format!(
            "zero total mass in context {:?}",
            context.text
        )));
    }
    Ok(log_z)
}

/// `E_τ E_{p_c} φ`.
pub fn exact_moments<S: Scorer + ?Sized>(
    target: &S,
    features: &[Feature],
    space: &SequenceSpace,
    contexts: &ContextDistribution,
) -> Result<Vec<f64>> {
    let mut moments = vec![0.0; features.len()];
    for (ctx, tau) in contexts.entries() {
        let log_z = normalized_log_partition(target, space, ctx)?;
        space.for_each_chunk(|c| {
            let logs = target.log_score(c, ctx)?;
            let phi = batch_evaluate(features, c, ctx)?;
            for (l, row) in logs.iter().zip(&phi) {
                let p = (l - log_z).exp();
                if p > 0.0 {
                    for (m, v) in moments.iter_mut().zip(row) {
                        *m += tau * p * v;
                    }
                }
            }
            Ok(())
        })?;
    }
    Ok(moments)
}

/// `E_τ D_KL(p_c ‖ q_c)` in nats; `+∞` when `q` misses mass that `p` has. Both
/// scorers are normalized by their exact partition functions.
pub fn exact_kl<P: Scorer + ?Sized, Q: Scorer + ?Sized>(
    p: &P,
    q: &Q,
    space: &SequenceSpace,
    contexts: &ContextDistribution,
) -> Result<f64> {
    let mut total = 0.0;
    for (ctx, tau) in contexts.entries() {
        let log_zp = normalized_log_partition(p, space, ctx)?;
        let log_zq = normalized_log_partition(q, space, ctx)?;
        let mut kl = 0.0;
        space.for_each_chunk(|c| {
            let lp = p.log_score(c, ctx)?;
            let lq = q.log_score(c, ctx)?;
            for (a, b) in lp.iter().zip(&lq) {
                let la = a - log_zp;
                if la == f64::NEG_INFINITY {
                    continue;
                }
                let lb = b - log_zq;
                if lb == f64::NEG_INFINITY {
                    kl = f64::INFINITY;
                } else {
                    kl += la.exp() * (la - lb);
                }
            }
            Ok(())
        })?;
        total += tau * kl;
    }
    Ok(total.max(0.0))
}

/// `E_τ ½ Σ_x |p_c(x) − q_c(x)|`.
pub fn exact_tvd<P: Scorer + ?Sized, Q: Scorer + ?Sized>(
    p: &P,
    q: &Q,
    space: &SequenceSpace,
    contexts: &ContextDistribution,
) -> Result<f64> {
    let mut total = 0.0;
    for (ctx, tau) in contexts.entries() {
        let log_zp = normalized_log_partition(p, space, ctx)?;
        let log_zq = normalized_log_partition(q, space, ctx)?;
        let mut tvd = 0.0;
        space.for_each_chunk(|c| {
            let lp = p.log_score(c, ctx)?;
            let lq = q.log_score(c, ctx)?;
            for (a, b) in lp.iter().zip(&lq) {
                tvd += ((a - log_zp).exp() - (b - log_zq).exp()).abs();
            }
            Ok(())
        })?;
        total += tau * 0.5 * tvd;
    }
    Ok(total)
}

/// `½ Σ |p_i − q_i|` for two aligned probability tables.
pub fn tvd_tables(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `Σ p_i ln(p_i / q_i)` for two aligned probability tables.
pub fn kl_tables(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| if *b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}

/// `E_τ E_{p_c} ∇θ log π(x|c)`, the exact ascent direction of the expected
/// log-likelihood (the negative cross-entropy gradient).
pub fn exact_log_likelihood_gradient<S: Scorer + ?Sized>(
    target: &S,
    model: &AutoregressiveModel,
    space: &SequenceSpace,
    contexts: &ContextDistribution,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.n_params()];
    for (ctx, tau) in contexts.entries() {
        let log_z = normalized_log_partition(target, space, ctx)?;
        space.for_each_chunk(|c| {
            let logs = target.log_score(c, ctx)?;
            let scales: Vec<f64> = logs.iter().map(|l| tau * (l - log_z).exp()).collect();
            model.accumulate_grad_batch(c, &scales, ctx, &mut grad)
        })?;
    }
    Ok(grad)
}

/// The exact solution of the moment-matching problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolution {
    pub lambda: Vec<f64>,
    pub moments: Vec<f64>,
    pub iterations: usize,
}

struct SupportTable {
    tau: f64,
    log_base: Vec<f64>,
    phi: Vec<Vec<f64>>,
}

struct Evaluation {
    dual: f64,
    moments: DVector<f64>,
    covariance: DMatrix<f64>,
}

fn evaluate_tilt(tables: &[SupportTable], lambda: &DVector<f64>, target: &DVector<f64>) -> Evaluation {
    let d = lambda.len();
    let mut dual = -lambda.dot(target);
    let mut moments = DVector::zeros(d);
    let mut covariance = DMatrix::zeros(d, d);
    for t in tables {
        let energies: Vec<f64> = t
            .log_base
            .iter()
            .zip(&t.phi)
            .map(|(a, row)| a + row.iter().zip(lambda.iter()).map(|(f, l)| f * l).sum::<f64>())
            .collect();
        let mut acc = LogSum::new();
        energies.iter().for_each(|&e| acc.add(e));
        let log_z = acc.value();
        dual += t.tau * log_z;
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for (e, row) in energies.iter().zip(&t.phi) {
            let p = (e - log_z).exp();
            let v = DVector::from_column_slice(row);
            mean += p * &v;
            second += p * &v * v.transpose();
        }
        covariance += t.tau * (second - &mean * mean.transpose());
        moments += t.tau * mean;
    }
    Evaluation {
        dual,
        moments,
        covariance,
    }
}

/// Solves `E_τ E_{p_c(·;λ)} φ = μ̄` exactly by damped Newton iteration on the
/// enumerated moments, with a backtracking line search on the convex dual
/// `E_τ log Z_c(λ) − λ·μ̄`.
pub fn exact_lambda(
    base: &AutoregressiveModel,
    spec: &ConstraintSpec,
    space: &SequenceSpace,
    contexts: &ContextDistribution,
) -> Result<LambdaSolution> {
    spec.validate()?;
    space.guard(MAX_MATERIALIZED)?;
    let d = spec.features.len();
    let mut tables = Vec::with_capacity(contexts.len());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (ctx, tau) in contexts.entries() {
        if *tau == 0.0 {
            continue;
        }
        let mut table = SupportTable {
            tau: *tau,
            log_base: Vec::new(),
            phi: Vec::new(),
        };
        space.for_each_chunk(|c| {
            let logs = base.log_score(c, ctx)?;
            let phi = batch_evaluate(&spec.features, c, ctx)?;
            for (l, row) in logs.into_iter().zip(phi) {
                if l > f64::NEG_INFINITY {
                    for j in 0..d {
                        lo[j] = lo[j].min(row[j]);
                        hi[j] = hi[j].max(row[j]);
                    }
                    table.log_base.push(l);
                    table.phi.push(row);
                }
            }
            Ok(())
        })?;
        tables.push(table);
    }
    for (j, mu) in spec.target_moments.iter().enumerate() {
        if !(lo[j] < *mu && *mu < hi[j]) {
            return Err(Error::Infeasible(format!(
                "moment {mu} of feature {:?} is not strictly inside its attainable range [{}, {}]",
                spec.features[j].name(),
                lo[j],
                hi[j]
            )));
        }
    }
    let target = DVector::from_column_slice(&spec.target_moments);
    let mut lambda = DVector::zeros(d);
    let mut eval = evaluate_tilt(&tables, &lambda, &target);
    for iteration in 0..=NEWTON_MAX_ITERATIONS {
        let gap = &eval.moments - &target;
        if gap.amax() < NEWTON_TOLERANCE {
            return Ok(LambdaSolution {
                lambda: lambda.iter().copied().collect(),
                moments: eval.moments.iter().copied().collect(),
                iterations: iteration,
            });
        }
        let damped = &eval.covariance + DMatrix::identity(d, d) * NEWTON_DAMPING;
        let step = damped
            .lu()
            .solve(&gap)
            .ok_or_else(|| Error::Infeasible("singular feature covariance".into()))?;
        let slope = gap.dot(&step);
        let mut t = 1.0;
        loop {
            let candidate = &lambda - t * &step;
            let next = evaluate_tilt(&tables, &candidate, &target);
            let sufficient = next.dual <= eval.dual - 1e-4 * t * slope;
            if sufficient || (&next.moments - &target).amax() < gap.amax() || t < 1e-12 {
                lambda = candidate;
                eval = next;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NotConverged {
        iterations: NEWTON_MAX_ITERATIONS,
        gap: (&eval.moments - &target).amax(),
        tolerance: NEWTON_TOLERANCE,
    })
}

/// The output law of quasi-rejection sampling, `r_β(x) ∝ min(P(x), β q(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct QrsLaw {
    /// Normalized, in enumeration order.
    pub probs: Vec<f64>,
    /// `Σ_x q(x) min(1, P(x) / (β q(x)))`.
    pub acceptance_rate: f64,
}

pub fn exact_qrs_law(
    target: &EbmTarget,
    proposal: &AutoregressiveModel,
    beta: f64,
    space: &SequenceSpace,
    context: &Context,
) -> Result<QrsLaw> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let lp = log_table(target, space, context)?;
    let lq = log_table(proposal, space, context)?;
    let log_beta = beta.ln();
    let clipped: Vec<f64> = lp
        .iter()
        .zip(&lq)
        .map(|(p, q)| p.min(log_beta + q).exp())
        .collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(Error::Infeasible("proposal and target supports do not overlap".into()));
    }
    Ok(QrsLaw {
        probs: clipped.iter().map(|c| c / total).collect(),
        acceptance_rate: total / beta,
    })
}

/// `max_x P(x) / q(x)` over the proposal's support: the smallest β at which QRS
/// stops clipping.
pub fn max_ratio(target: &EbmTarget, proposal: &AutoregressiveModel, space: &SequenceSpace, context: &Context) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    space.for_each_chunk(|c| {
        let lp = target.log_score(c, context)?;
        let lq = proposal.log_score(c, context)?;
        for (p, q) in lp.iter().zip(&lq) {
            if *q > f64::NEG_INFINITY {
                best = best.max(p - q);
            }
        }
        Ok(())
    })?;
    Ok(best.exp())
}
