//! Vocabularies, sequences, and autoregressive distributions.
//!
//! A model defines `π(x | c)` over eos-terminated token strings with at most
//! `t_max` content tokens: after `t_max` content tokens the eos symbol is forced,
//! so the sequence space is finite and every model is exactly normalized over it.
//!
//! Two parameterizations are supported:
//!
//! * [`ModelKind::Tabular`]: explicit next-token probabilities for every full
//!   prefix, optionally one table per context key.
//! * [`ModelKind::SoftmaxParametric`]: next-token logits `θ[state] + Σ_{v ∈ c} W[v]`
//!   mapped through a softmax, where `state` is either the last token or the full
//!   prefix and `W` is a bag-of-context-tokens offset matrix. This is the tunable kind.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Upper bound on the number of stored next-token entries of a full-prefix model.
pub const MAX_TABLE_ENTRIES: usize = 50_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    eos_index: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    eos_index: usize,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(r.tokens, r.eos_index)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            eos_index: v.eos_index,
        }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_index: usize) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidVocab(
                "need at least one content token besides eos".into(),
            ));
        }
        if eos_index >= tokens.len() {
            return Err(Error::InvalidVocab(format!(
                "eos_index {eos_index} out of range for {} tokens",
                tokens.len()
            )));
        }
        let distinct: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
        if distinct.len() != tokens.len() {
            return Err(Error::InvalidVocab("duplicate symbols".into()));
        }
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidVocab("empty symbol".into()));
        }
        Ok(Self { tokens, eos_index })
    }

    /// Content symbols followed by a trailing `<eos>`.
    pub fn with_eos(symbols: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = symbols.iter().map(|s| s.to_string()).collect();
        tokens.push("<eos>".to_string());
        let eos = tokens.len() - 1;
        Self::new(tokens, eos)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn eos(&self) -> usize {
        self.eos_index
    }

    /// Number of non-eos symbols.
    pub fn n_content(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == symbol)
    }

    pub fn content_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.len()).filter(move |&i| i != self.eos_index)
    }

    /// Position of a content token among the content tokens.
    pub(crate) fn digit(&self, id: usize) -> usize {
        if id < self.eos_index {
            id
        } else {
            id - 1
        }
    }

    pub(crate) fn content_id(&self, digit: usize) -> usize {
        if digit < self.eos_index {
            digit
        } else {
            digit + 1
        }
    }

    /// Greedy longest-match tokenization over the content symbols. Characters that
    /// start no symbol are skipped.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.scan(text).0
    }

    /// Like [`Vocab::tokenize`] but fails on characters that start no symbol.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<usize>> {
        let (ids, skipped) = self.scan(text);
        match skipped {
            Some(c) => Err(Error::InvalidSequence(format!(
                "{text:?} contains {c:?}, which starts no vocabulary symbol"
            ))),
            None => Ok(ids),
        }
    }

    fn scan(&self, text: &str) -> (Vec<usize>, Option<char>) {
        let mut ids = Vec::new();
        let mut first_skipped = None;
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            let best = self
                .content_ids()
                .filter(|&id| rest.starts_with(self.tokens[id].as_str()))
                .max_by_key(|&id| self.tokens[id].len());
            match best {
                Some(id) => {
                    ids.push(id);
                    rest = &rest[self.tokens[id].len()..];
                }
                None => {
                    if first_skipped.is_none() && !c.is_whitespace() {
                        first_skipped = Some(c);
                    }
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        (ids, first_skipped)
    }

    /// Concatenated symbols, eos omitted.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_index)
            .filter_map(|&id| self.symbol(id))
            .collect()
    }
}

/// An eos-terminated token string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence {
    token_ids: Vec<usize>,
    text: String,
}

impl Sequence {
    pub fn new(vocab: &Vocab, token_ids: Vec<usize>) -> Result<Self> {
        let Some((&last, body)) = token_ids.split_last() else {
            return Err(Error::InvalidSequence("empty token list".into()));
        };
        if last != vocab.eos() {
            return Err(Error::InvalidSequence(
                "sequence must end with eos".into(),
            ));
        }
        for &id in &token_ids {
            if id >= vocab.len() {
                return Err(Error::OutOfVocab {
                    id,
                    vocab_size: vocab.len(),
                });
            }
        }
        if body.contains(&vocab.eos()) {
            return Err(Error::InvalidSequence(
                "eos may only appear at the final position".into(),
            ));
        }
        let text = vocab.render(body);
        Ok(Self { token_ids, text })
    }

    /// Builds a sequence from its content tokens, appending eos.
    pub fn from_body(vocab: &Vocab, body: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(body.len() + 1);
        ids.extend_from_slice(body);
        ids.push(vocab.eos());
        Self::new(vocab, ids)
    }

    pub fn parse(vocab: &Vocab, text: &str) -> Result<Self> {
        Self::from_body(vocab, &vocab.tokenize_strict(text)?)
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    /// Content tokens (everything but the trailing eos).
    pub fn body(&self) -> &[usize] {
        &self.token_ids[..self.token_ids.len() - 1]
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Number of content tokens.
    pub fn len(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The conditioning input `c`. Unconditional models use the empty context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub text: String,
}

impl Context {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn empty() -> Self {
        Self::default()
    }
}

/// Anything that assigns (possibly unnormalized) log-scores to sequences.
pub trait Scorer: Send + Sync {
    fn log_score_one(&self, sequence: &Sequence, context: &Context) -> Result<f64>;

    fn log_score(&self, sequences: &[Sequence], context: &Context) -> Result<Vec<f64>> {
        sequences
            .iter()
            .map(|s| self.log_score_one(s, context))
            .collect()
    }

    fn vocab(&self) -> &Vocab;

    fn t_max(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tabular,
    SoftmaxParametric,
}

/// What a softmax model's per-state logits are indexed by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    LastToken,
    FullPrefix,
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    Tabular {
        contexts: Vec<String>,
        /// One flat `n_states × |V|` table per context (a single shared one when
        /// `contexts` is empty).
        probs: Vec<Vec<f64>>,
    },
    Softmax {
        conditioning: Conditioning,
        state_logits: Vec<f64>,
        /// `|V| × |V|`: row = context token, column = next token.
        context_logits: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressiveModel {
    vocab: Vocab,
    t_max: usize,
    params: Params,
    frozen: bool,
    /// `prefix_offsets[t]` = number of full-prefix states shorter than `t`.
    prefix_offsets: Vec<usize>,
}

enum ResolvedContext {
    Table(usize),
    Bag(Vec<usize>),
}

#[derive(Clone, Copy)]
struct Cursor {
    depth: usize,
    local: usize,
    last: Option<usize>,
}

impl Cursor {
    const ROOT: Cursor = Cursor {
        depth: 0,
        local: 0,
        last: None,
    };

    fn advance(self, digit: usize, radix: usize) -> Cursor {
        Cursor {
            depth: self.depth + 1,
            local: self.local.wrapping_mul(radix).wrapping_add(digit),
            last: Some(digit),
        }
    }
}

fn prefix_offsets(n_content: usize, t_max: usize) -> Result<Vec<usize>> {
    let mut offsets = Vec::with_capacity(t_max + 1);
    let mut total: usize = 0;
    let mut level: usize = 1;
    for _ in 0..t_max {
        offsets.push(total);
        total = total.checked_add(level).ok_or_else(too_large)?;
        level = level.checked_mul(n_content).ok_or_else(too_large)?;
    }
    offsets.push(total);
    Ok(offsets)
}

fn too_large() -> Error {
    Error::InvalidConfig("full-prefix state table too large".into())
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidConfig(
            "tabular probabilities must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "tabular row sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

impl AutoregressiveModel {
    /// Builds a full-prefix tabular model by querying `row(context_index, prefix)`
    /// for every non-forced prefix. With an empty `contexts` list the table is
    /// shared by all contexts and `context_index` is 0.
    pub fn tabular_from_fn(
        vocab: Vocab,
        t_max: usize,
        contexts: Vec<String>,
        mut row: impl FnMut(usize, &[usize]) -> Vec<f64>,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        let offsets = prefix_offsets(vocab.n_content(), t_max)?;
        let n_states = offsets[t_max];
        if n_states.saturating_mul(vocab.len()) > MAX_TABLE_ENTRIES {
            return Err(too_large());
        }
        let n_tables = contexts.len().max(1);
        let mut probs = Vec::with_capacity(n_tables);
        for ctx in 0..n_tables {
            let mut table = Vec::with_capacity(n_states * vocab.len());
            for depth in 0..t_max {
                for_each_prefix(&vocab, depth, |prefix| {
                    let r = row(ctx, prefix);
                    table.extend_from_slice(&r);
                    if r.len() != vocab.len() {
                        return Err(Error::InvalidConfig(format!(
                            "row for prefix {prefix:?} has {} entries, expected {}",
                            r.len(),
                            vocab.len()
                        )));
                    }
                    check_row(&r)
                })?;
            }
            probs.push(table);
        }
        Ok(Self {
            vocab,
            t_max,
            params: Params::Tabular { contexts, probs },
            frozen: true,
            prefix_offsets: offsets,
        })
    }

    /// Tabular model whose next-token distribution is the same at every
    /// non-forced step.
    pub fn tabular_iid(vocab: Vocab, t_max: usize, row: &[f64]) -> Result<Self> {
        let row = row.to_vec();
        Self::tabular_from_fn(vocab, t_max, Vec::new(), |_, _| row.clone())
    }

    pub fn softmax(
        vocab: Vocab,
        t_max: usize,
        conditioning: Conditioning,
        state_logits: Vec<f64>,
        context_logits: Vec<f64>,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        let offsets = prefix_offsets(vocab.n_content(), t_max)?;
        let n_states = softmax_state_count(&vocab, conditioning, &offsets);
        let v = vocab.len();
        if n_states.saturating_mul(v) > MAX_TABLE_ENTRIES {
            return Err(too_large());
        }
        if state_logits.len() != n_states * v {
            return Err(Error::InvalidConfig(format!(
                "expected {} state logits, got {}",
                n_states * v,
                state_logits.len()
            )));
        }
        if context_logits.len() != v * v {
            return Err(Error::InvalidConfig(format!(
                "expected {} context logits, got {}",
                v * v,
                context_logits.len()
            )));
        }
        if state_logits
            .iter()
            .chain(&context_logits)
            .any(|l| !l.is_finite())
        {
            return Err(Error::InvalidConfig("logits must be finite".into()));
        }
        Ok(Self {
            vocab,
            t_max,
            params: Params::Softmax {
                conditioning,
                state_logits,
                context_logits,
            },
            frozen: true,
            prefix_offsets: offsets,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            Params::Tabular { .. } => ModelKind::Tabular,
            Params::Softmax { .. } => ModelKind::SoftmaxParametric,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Deep copy with the requested frozen flag.
    pub fn clone_model(&self, freeze: bool) -> Self {
        let mut m = self.clone();
        m.frozen = freeze;
        m
    }

    /// Number of free parameters of a softmax model (0 for tabular models).
    pub fn n_params(&self) -> usize {
        match &self.params {
            Params::Tabular { .. } => 0,
            Params::Softmax {
                state_logits,
                context_logits,
                ..
            } => state_logits.len() + context_logits.len(),
        }
    }

    /// Flat parameter vector `[state logits ..., context logits ...]`.
    pub fn params(&self) -> Result<Vec<f64>> {
        match &self.params {
            Params::Tabular { .. } => Err(Error::Unsupported(
                "tabular models have no logit parameters".into(),
            )),
            Params::Softmax {
                state_logits,
                context_logits,
                ..
            } => Ok(state_logits.iter().chain(context_logits).copied().collect()),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.check_mutable()?;
        if flat.len() != self.n_params() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let Params::Softmax {
            state_logits,
            context_logits,
            ..
        } = &mut self.params
        else {
            unreachable!()
        };
        let (s, c) = flat.split_at(state_logits.len());
        state_logits.copy_from_slice(s);
        context_logits.copy_from_slice(c);
        Ok(())
    }

    /// `θ ← θ + step · direction`.
    pub fn apply_update(&mut self, direction: &[f64], step: f64) -> Result<()> {
        self.check_mutable()?;
        if direction.len() != self.n_params() {
            return Err(Error::InvalidConfig(format!(
                "update has {} entries, model has {} parameters",
                direction.len(),
                self.n_params()
            )));
        }
        let Params::Softmax {
            state_logits,
            context_logits,
            ..
        } = &mut self.params
        else {
            unreachable!()
        };
        for (p, d) in state_logits
            .iter_mut()
            .chain(context_logits.iter_mut())
            .zip(direction)
        {
            *p += step * d;
        }
        Ok(())
    }

    fn check_mutable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        if self.kind() == ModelKind::Tabular {
            return Err(Error::Unsupported(
                "tabular models cannot be trained by gradient".into(),
            ));
        }
        Ok(())
    }

    pub fn parameters_finite(&self) -> bool {
        match &self.params {
            Params::Tabular { .. } => true,
            Params::Softmax {
                state_logits,
                context_logits,
                ..
            } => state_logits.iter().chain(context_logits).all(|p| p.is_finite()),
        }
    }

    fn resolve(&self, context: &Context) -> Result<ResolvedContext> {
        match &self.params {
            Params::Tabular { contexts, .. } => {
                if contexts.is_empty() {
                    Ok(ResolvedContext::Table(0))
                } else {
                    contexts
                        .iter()
                        .position(|c| *c == context.text)
                        .map(ResolvedContext::Table)
                        .ok_or_else(|| Error::UnknownContext(context.text.clone()))
                }
            }
            Params::Softmax { .. } => {
                let bag: BTreeSet<usize> = self.vocab.tokenize(&context.text).into_iter().collect();
                Ok(ResolvedContext::Bag(bag.into_iter().collect()))
            }
        }
    }

    fn state_index(&self, cursor: Cursor) -> usize {
        match &self.params {
            Params::Softmax {
                conditioning: Conditioning::LastToken,
                ..
            } => cursor.last.map_or(0, |d| d + 1),
            _ => self.prefix_offsets[cursor.depth] + cursor.local,
        }
    }

    /// Writes next-token log-probabilities at a non-forced cursor into `out`
    /// (and the raw logits into `scratch` for softmax models).
    fn step_log_probs(&self, ctx: &ResolvedContext, cursor: Cursor, scratch: &mut [f64], out: &mut [f64]) {
        let v = self.vocab.len();
        if cursor.depth == self.t_max {
            out.fill(f64::NEG_INFINITY);
            out[self.vocab.eos()] = 0.0;
            return;
        }
        let state = self.state_index(cursor);
        match (&self.params, ctx) {
            (Params::Tabular { probs, .. }, ResolvedContext::Table(t)) => {
                let row = &probs[*t][state * v..(state + 1) * v];
                for (o, &p) in out.iter_mut().zip(row) {
                    *o = p.ln();
                }
            }
            (
                Params::Softmax {
                    state_logits,
                    context_logits,
                    ..
                },
                ResolvedContext::Bag(bag),
            ) => {
                scratch.copy_from_slice(&state_logits[state * v..(state + 1) * v]);
                for &c in bag {
                    for (s, w) in scratch.iter_mut().zip(&context_logits[c * v..(c + 1) * v]) {
                        *s += w;
                    }
                }
                log_softmax_into(scratch, out);
            }
            _ => unreachable!("context resolved against a different parameterization"),
        }
    }

    fn check_sequence(&self, sequence: &Sequence) -> Result<()> {
        for &id in sequence.token_ids() {
            if id >= self.vocab.len() {
                return Err(Error::OutOfVocab {
                    id,
                    vocab_size: self.vocab.len(),
                });
            }
        }
        if sequence.token_ids().last() != Some(&self.vocab.eos())
            || sequence.body().contains(&self.vocab.eos())
        {
            return Err(Error::InvalidSequence(
                "sequence is not eos-terminated under this vocabulary".into(),
            ));
        }
        if sequence.len() > self.t_max {
            return Err(Error::InvalidSequence(format!(
                "{} content tokens exceed the horizon {}",
                sequence.len(),
                self.t_max
            )));
        }
        Ok(())
    }

    fn log_score_resolved(&self, ctx: &ResolvedContext, sequence: &Sequence, scratch: &mut [f64], row: &mut [f64]) -> f64 {
        let m = self.vocab.n_content();
        let mut cursor = Cursor::ROOT;
        let mut total = 0.0;
        for &tok in sequence.token_ids() {
            self.step_log_probs(ctx, cursor, scratch, row);
            total += row[tok];
            if total == f64::NEG_INFINITY {
                return total;
            }
            if tok != self.vocab.eos() {
                cursor = cursor.advance(self.vocab.digit(tok), m);
            }
        }
        total
    }

    /// Draws `n` sequences ancestrally, each with its log-probability.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        context: &Context,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(Sequence, f64)>> {
        let ctx = self.resolve(context)?;
        let v = self.vocab.len();
        let m = self.vocab.n_content();
        let mut scratch = vec![0.0; v];
        let mut row = vec![0.0; v];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ids = Vec::with_capacity(self.t_max + 1);
            let mut cursor = Cursor::ROOT;
            let mut total = 0.0;
            loop {
                self.step_log_probs(&ctx, cursor, &mut scratch, &mut row);
                let tok = sample_log_row(&row, rng);
                total += row[tok];
                ids.push(tok);
                if tok == self.vocab.eos() {
                    break;
                }
                cursor = cursor.advance(self.vocab.digit(tok), m);
            }
            let text = self.vocab.render(&ids);
            out.push((Sequence { token_ids: ids, text }, total));
        }
        Ok(out)
    }

    /// Adds `scale · ∂ log π(x|c)/∂θ` to `grad`.
    pub fn accumulate_grad_log_score(
        &self,
        sequence: &Sequence,
        context: &Context,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let ctx = self.resolve(context)?;
        self.accumulate_resolved(&ctx, sequence, scale, grad)
    }

    fn accumulate_resolved(
        &self,
        ctx: &ResolvedContext,
        sequence: &Sequence,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let Params::Softmax { state_logits, .. } = &self.params else {
            return Err(Error::Unsupported(
                "gradients are only defined for softmax_parametric models".into(),
            ));
        };
        self.check_sequence(sequence)?;
        if grad.len() != self.n_params() {
            return Err(Error::InvalidConfig("gradient buffer has the wrong size".into()));
        }
        let ResolvedContext::Bag(bag) = ctx else {
            unreachable!()
        };
        let v = self.vocab.len();
        let m = self.vocab.n_content();
        let n_state = state_logits.len();
        let mut scratch = vec![0.0; v];
        let mut row = vec![0.0; v];
        let mut cursor = Cursor::ROOT;
        for &tok in sequence.token_ids() {
            if cursor.depth == self.t_max {
                break;
            }
            self.step_log_probs(ctx, cursor, &mut scratch, &mut row);
            let state = self.state_index(cursor);
            for k in 0..v {
                let g = scale * ((k == tok) as u8 as f64 - row[k].exp());
                grad[state * v + k] += g;
                for &c in bag {
                    grad[n_state + c * v + k] += g;
                }
            }
            if tok == self.vocab.eos() {
                break;
            }
            cursor = cursor.advance(self.vocab.digit(tok), m);
        }
        Ok(())
    }

    pub fn grad_log_score(&self, sequence: &Sequence, context: &Context) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.n_params()];
        self.accumulate_grad_log_score(sequence, context, 1.0, &mut g)?;
        Ok(g)
    }

    /// `Σ_i scale_i · ∇θ log π(x_i | c)` for a batch sharing one context.
    pub fn accumulate_grad_batch(
        &self,
        sequences: &[Sequence],
        scales: &[f64],
        context: &Context,
        grad: &mut [f64],
    ) -> Result<()> {
        let ctx = self.resolve(context)?;
        for (s, &w) in sequences.iter().zip(scales) {
            if w != 0.0 {
                self.accumulate_resolved(&ctx, s, w, grad)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn softmax_state_count(vocab: &Vocab, conditioning: Conditioning, offsets: &[usize]) -> usize {
    match conditioning {
        Conditioning::LastToken => vocab.n_content() + 1,
        Conditioning::FullPrefix => *offsets.last().unwrap(),
    }
}

fn sample_log_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &lp) in row.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last_positive = k;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Calls `f` with every content-token prefix of the given depth, in state-index
/// order.
pub(crate) fn for_each_prefix(
    vocab: &Vocab,
    depth: usize,
    mut f: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let m = vocab.n_content();
    let mut digits = vec![0usize; depth];
    let mut prefix: Vec<usize> = digits.iter().map(|&d| vocab.content_id(d)).collect();
    loop {
        f(&prefix)?;
        let mut pos = depth;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < m {
                prefix[pos] = vocab.content_id(digits[pos]);
                break;
            }
            digits[pos] = 0;
            prefix[pos] = vocab.content_id(0);
        }
    }
}

impl Scorer for AutoregressiveModel {
    fn log_score_one(&self, sequence: &Sequence, context: &Context) -> Result<f64> {
        Ok(self.log_score(std::slice::from_ref(sequence), context)?[0])
    }

    fn log_score(&self, sequences: &[Sequence], context: &Context) -> Result<Vec<f64>> {
        let ctx = self.resolve(context)?;
        let v = self.vocab.len();
        let mut scratch = vec![0.0; v];
        let mut row = vec![0.0; v];
        sequences
            .iter()
            .map(|s| {
                self.check_sequence(s)?;
                Ok(self.log_score_resolved(&ctx, s, &mut scratch, &mut row))
            })
            .collect()
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn t_max(&self) -> usize {
        self.t_max
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    vocab: Vocab,
    t_max: usize,
    #[serde(default)]
    frozen: bool,
    #[serde(flatten)]
    params: ParamsDocument,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
enum ParamsDocument {
    Tabular {
        #[serde(default)]
        contexts: Vec<String>,
        /// `[context][state][token]`
        probs: Vec<Vec<Vec<f64>>>,
    },
    SoftmaxParametric {
        #[serde(default)]
        conditioning: Conditioning,
        state_logits: Vec<Vec<f64>>,
        context_logits: Vec<Vec<f64>>,
    },
}

impl From<&AutoregressiveModel> for ModelDocument {
    fn from(m: &AutoregressiveModel) -> Self {
        let v = m.vocab.len();
        let rows = |flat: &[f64]| flat.chunks(v).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let params = match &m.params {
            Params::Tabular { contexts, probs } => ParamsDocument::Tabular {
                contexts: contexts.clone(),
                probs: probs.iter().map(|t| rows(t)).collect(),
            },
            Params::Softmax {
                conditioning,
                state_logits,
                context_logits,
            } => ParamsDocument::SoftmaxParametric {
                conditioning: *conditioning,
                state_logits: rows(state_logits),
                context_logits: rows(context_logits),
            },
        };
        ModelDocument {
            version: MODEL_FORMAT_VERSION,
            vocab: m.vocab.clone(),
            t_max: m.t_max,
            frozen: m.frozen,
            params,
        }
    }
}

impl TryFrom<ModelDocument> for AutoregressiveModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model format version {}",
                doc.version
            )));
        }
        let mut model = match doc.params {
            ParamsDocument::Tabular { contexts, probs } => {
                let n_tables = contexts.len().max(1);
                if probs.len() != n_tables {
                    return Err(Error::InvalidConfig(format!(
                        "expected {n_tables} probability tables, got {}",
                        probs.len()
                    )));
                }
                let offsets = prefix_offsets(doc.vocab.n_content(), doc.t_max)?;
                let n_states = offsets[doc.t_max];
                for table in &probs {
                    if table.len() != n_states {
                        return Err(Error::InvalidConfig(format!(
                            "expected {n_states} tabular states, got {}",
                            table.len()
                        )));
                    }
                }
                let mut tables: Vec<std::vec::IntoIter<Vec<f64>>> =
                    probs.into_iter().map(|t| t.into_iter()).collect();
                AutoregressiveModel::tabular_from_fn(doc.vocab, doc.t_max, contexts, |c, _| {
                    tables[c].next().unwrap_or_default()
                })?
            }
            ParamsDocument::SoftmaxParametric {
                conditioning,
                state_logits,
                context_logits,
            } => AutoregressiveModel::softmax(
                doc.vocab,
                doc.t_max,
                conditioning,
                state_logits.concat(),
                context_logits.concat(),
            )?,
        };
        model.frozen = doc.frozen;
        Ok(model)
    }
}

/// Random initialization recipe for a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Content symbols; `<eos>` is appended.
    pub tokens: Vec<String>,
    pub t_max: usize,
    pub kind: ModelKind,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub init_seed: u64,
    /// Standard deviation of the random state logits.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Constant added to every eos logit (negative values favour longer sequences).
    #[serde(default)]
    pub eos_bias: f64,
    /// Standard deviation of the random context-token offsets (softmax models).
    #[serde(default)]
    pub context_scale: f64,
    /// Context keys for per-context tables (tabular models).
    #[serde(default)]
    pub contexts: Vec<String>,
}

fn default_init_scale() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        let symbols: Vec<&str> = self.tokens.iter().map(String::as_str).collect();
        Vocab::with_eos(&symbols)
    }

    pub fn build(&self) -> Result<AutoregressiveModel> {
        let vocab = self.vocab()?;
        let v = vocab.len();
        let eos = vocab.eos();
        let normal = Normal::new(0.0, self.init_scale.max(0.0))
            .map_err(|e| Error::InvalidConfig(format!("init_scale: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let logit_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut row: Vec<f64> = (0..v).map(|_| normal.sample(rng)).collect();
            row[eos] += self.eos_bias;
            row
        };
        match self.kind {
            ModelKind::Tabular => AutoregressiveModel::tabular_from_fn(
                vocab,
                self.t_max,
                self.contexts.clone(),
                |_, _| {
                    let logits = logit_row(&mut rng);
                    let mut out = vec![0.0; v];
                    log_softmax_into(&logits, &mut out);
                    let mut probs: Vec<f64> = out.iter().map(|l| l.exp()).collect();
                    let sum: f64 = probs.iter().sum();
                    probs.iter_mut().for_each(|p| *p /= sum);
                    probs
                },
            ),
            ModelKind::SoftmaxParametric => {
                if self.t_max == 0 {
                    return Err(Error::InvalidConfig("t_max must be at least 1".into()));
                }
                let offsets = prefix_offsets(vocab.n_content(), self.t_max)?;
                let n_states = softmax_state_count(&vocab, self.conditioning, &offsets);
                if n_states.saturating_mul(v) > MAX_TABLE_ENTRIES {
                    return Err(too_large());
                }
                let state_logits: Vec<f64> = (0..n_states).flat_map(|_| logit_row(&mut rng)).collect();
                let ctx_normal = Normal::new(0.0, self.context_scale.max(0.0))
                    .map_err(|e| Error::InvalidConfig(format!("context_scale: {e}")))?;
                let context_logits: Vec<f64> = (0..v * v)
                    .map(|i| {
                        if i / v == eos {
                            0.0
                        } else {
                            ctx_normal.sample(&mut rng)
                        }
                    })
                    .collect();
                AutoregressiveModel::softmax(vocab, self.t_max, self.conditioning, state_logits, context_logits)
            }
        }
    }
}
