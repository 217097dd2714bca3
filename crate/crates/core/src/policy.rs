//! Autoregressive tabular policies with exact log-probabilities, parameter
//! gradients, ancestral sampling, and full-distribution enumeration.
//!
//! # Conventions
//!
//! * A policy of order `k` conditions each token on the preceding `k` tokens.
//!   Contexts shorter than `k` are left-padded with the reserved begin token,
//!   which is id `0`; a context window of `[0, 0, .., 0]` therefore means
//!   "sequence start" and aliases genuine runs of token `0`.
//! * The end-of-sequence token is the last vocabulary id, `vocab_size - 1`.
//!   Responses passed to [`TabularPolicy::eval_sequence`] are scored exactly
//!   as given, with no implicit terminator; EOS only has meaning inside
//!   [`TabularPolicy::sample_sequence`] (stop symbol, not emitted) and
//!   [`TabularPolicy::enumerate_distribution`] (listed sequences carry their
//!   trailing EOS).
//! * Prompt conditioning is context initialization: the last `k` prompt
//!   tokens seed the context window.
//! * Context rows are indexed by Horner's rule over the window, oldest token
//!   first: `idx = ((t_0 * V) + t_1) * V + ...`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::SplitMix64;
use crate::seq::{make_stats, SequenceStats, TokenSequence};

/// Upper bound on `vocab^max_len * max_len` accepted by enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// Hard cap on the logit table size accepted at construction.
const MAX_TABLE_ENTRIES: usize = 16_000_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("vocab size must be at least 2 (one content token plus EOS)")]
    VocabTooSmall,
    #[error("logit table would need {required} entries, above the {limit} cap")]
    TableTooLarge { required: u128, limit: usize },
    #[error("logit table has {got} entries, expected {expected}")]
    TableShapeMismatch { got: usize, expected: usize },
    #[error("non-finite logit at index {index}")]
    NonFiniteLogit { index: usize },
    #[error("vocab size mismatch: policy {policy} vs sequence {sequence}")]
    VocabMismatch { policy: u32, sequence: u32 },
    #[error("response must be nonempty")]
    EmptyResponse,
    #[error("sequence log-likelihood is non-finite (saturated logits)")]
    NonFiniteLogprob,
    #[error(
        "enumeration needs a budget of {required} entries but only {budget} is allowed"
    )]
    BudgetExceeded { required: u128, budget: u128 },
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
}

/// An order-`k` conditional categorical policy with explicit logits.
///
/// Each context row holds one unnormalized logit per vocabulary token; the
/// token conditional for a context is the softmax of its row.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: u32,
    context_order: usize,
    logits: Vec<f64>,
}

/// Dense gradient with respect to a policy's logit table.
///
/// Values are nats of objective per unit logit, in the same row-major layout
/// as the policy's table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    vocab_size: u32,
    context_order: usize,
    values: Vec<f64>,
}

/// All sequences terminating with EOS within `max_len` tokens, plus the
/// aggregate mass of everything longer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedDistribution {
    pub entries: Vec<(TokenSequence, f64)>,
    pub overflow_mass: f64,
    pub vocab_size: u32,
    pub max_len: usize,
}

impl EnumeratedDistribution {
    /// Enumerated mass plus overflow; 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum::<f64>() + self.overflow_mass
    }
}

fn context_count(vocab_size: u32, context_order: usize) -> Result<usize, PolicyError> {
    let mut count: u128 = 1;
    for _ in 0..context_order {
        count *= vocab_size as u128;
        if count * vocab_size as u128 > MAX_TABLE_ENTRIES as u128 {
            return Err(PolicyError::TableTooLarge {
                required: count * vocab_size as u128,
                limit: MAX_TABLE_ENTRIES,
            });
        }
    }
    Ok(count as usize)
}

impl TabularPolicy {
    /// Uniform policy: every logit zero.
    pub fn uniform(vocab_size: u32, context_order: usize) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::VocabTooSmall);
        }
        let contexts = context_count(vocab_size, context_order)?;
        Ok(Self {
            vocab_size,
            context_order,
            logits: vec![0.0; contexts * vocab_size as usize],
        })
    }

    /// Policy from an explicit row-major logit table of shape
    /// `vocab_size^context_order x vocab_size`.
    pub fn from_logits(
        vocab_size: u32,
        context_order: usize,
        logits: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::VocabTooSmall);
        }
        let contexts = context_count(vocab_size, context_order)?;
        let expected = contexts * vocab_size as usize;
        if logits.len() != expected {
            return Err(PolicyError::TableShapeMismatch {
                got: logits.len(),
                expected,
            });
        }
        if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteLogit { index });
        }
        Ok(Self {
            vocab_size,
            context_order,
            logits,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    /// Number of context rows, `vocab_size^context_order`.
    pub fn context_count(&self) -> usize {
        self.logits.len() / self.vocab_size as usize
    }

    /// End-of-sequence token id (the last vocabulary id).
    pub fn eos_token(&self) -> u32 {
        self.vocab_size - 1
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context_index: usize) -> &[f64] {
        let v = self.vocab_size as usize;
        &self.logits[context_index * v..(context_index + 1) * v]
    }

    /// Deep, immutable snapshot; later updates to `self` do not affect it.
    /// This is how the frozen reference policy is produced.
    pub fn freeze(&self) -> TabularPolicy {
        self.clone()
    }

    /// Context index after consuming `prompt`, starting from the all-begin
    /// window.
    fn initial_context(&self, prompt: &TokenSequence) -> usize {
        let mut ctx = 0usize;
        for &t in prompt.tokens() {
            ctx = self.roll_context(ctx, t);
        }
        ctx
    }

    /// Slide `token` into the context window.
    fn roll_context(&self, ctx: usize, token: u32) -> usize {
        if self.context_order == 0 {
            return 0;
        }
        (ctx * self.vocab_size as usize + token as usize) % self.context_count()
    }

    /// Token conditional for one context row (softmax of the row).
    pub fn conditional(&self, context_index: usize) -> Vec<f64> {
        let row = self.row(context_index);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = row.iter().map(|&l| math::exp(l - max)).collect();
        let sum: f64 = out.iter().sum();
        for p in &mut out {
            *p /= sum;
        }
        out
    }

    /// Log-softmax of one context row.
    fn log_conditional(&self, context_index: usize) -> Vec<f64> {
        let row = self.row(context_index);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(row.iter().map(|&l| math::exp(l - max)).sum::<f64>());
        row.iter().map(|&l| l - lse).collect()
    }

    fn check_sequences(
        &self,
        prompt: &TokenSequence,
        response: Option<&TokenSequence>,
    ) -> Result<(), PolicyError> {
        if prompt.vocab_size() != self.vocab_size {
            return Err(PolicyError::VocabMismatch {
                policy: self.vocab_size,
                sequence: prompt.vocab_size(),
            });
        }
        if let Some(response) = response {
            if response.vocab_size() != self.vocab_size {
                return Err(PolicyError::VocabMismatch {
                    policy: self.vocab_size,
                    sequence: response.vocab_size(),
                });
            }
            if response.is_empty() {
                return Err(PolicyError::EmptyResponse);
            }
        }
        Ok(())
    }

    /// Exact log-likelihood summary of `response` given `prompt`:
    /// `sum_logprob = sum_i log softmax(row(ctx_i))[y_i]`.
    pub fn eval_sequence(
        &self,
        prompt: &TokenSequence,
        response: &TokenSequence,
    ) -> Result<SequenceStats, PolicyError> {
        self.check_sequences(prompt, Some(response))?;
        let mut ctx = self.initial_context(prompt);
        let mut sum = 0.0;
        for &t in response.tokens() {
            let logp = self.log_conditional(ctx);
            sum += logp[t as usize];
            ctx = self.roll_context(ctx, t);
        }
        // A log-softmax entry underflows to -inf once a row's logit gap
        // exceeds ~745 nats; surface that as the divergence regime.
        if !sum.is_finite() {
            return Err(PolicyError::NonFiniteLogprob);
        }
        Ok(make_stats(sum, response.len()).expect("log-softmax sums are finite and nonpositive"))
    }

    /// Adds `scale * d(log pi(response | prompt))/d(logits)` into `grad`.
    ///
    /// Each token contributes `scale * (onehot(y_i) - softmax(row))` to its
    /// context row, which is the exact softmax log-likelihood gradient.
    pub(crate) fn accumulate_logprob_grad(
        &self,
        prompt: &TokenSequence,
        response: &TokenSequence,
        scale: f64,
        grad: &mut PolicyGradient,
    ) -> Result<(), PolicyError> {
        self.check_sequences(prompt, Some(response))?;
        let v = self.vocab_size as usize;
        let mut ctx = self.initial_context(prompt);
        for &t in response.tokens() {
            let probs = self.conditional(ctx);
            let row = &mut grad.values[ctx * v..(ctx + 1) * v];
            for (g, p) in row.iter_mut().zip(probs.iter()) {
                *g -= scale * p;
            }
            row[t as usize] += scale;
            ctx = self.roll_context(ctx, t);
        }
        Ok(())
    }

    /// Gradient of the length-normalized log-likelihood
    /// `(1/|y|) log pi(response | prompt)` with respect to the logit table.
    pub fn grad_avg_logprob(
        &self,
        prompt: &TokenSequence,
        response: &TokenSequence,
    ) -> Result<PolicyGradient, PolicyError> {
        let mut grad = PolicyGradient::zeros_like(self);
        let scale = 1.0 / response.len().max(1) as f64;
        self.accumulate_logprob_grad(prompt, response, scale, &mut grad)?;
        Ok(grad)
    }

    /// Enumerates every sequence that terminates with EOS within `max_len`
    /// tokens (the trailing EOS is included in the listed tokens), plus one
    /// aggregate overflow entry for all longer sequences.
    pub fn enumerate_distribution(
        &self,
        prompt: &TokenSequence,
        max_len: usize,
    ) -> Result<EnumeratedDistribution, PolicyError> {
        self.enumerate_distribution_with_budget(prompt, max_len, DEFAULT_ENUMERATION_BUDGET)
    }

    /// As [`enumerate_distribution`](Self::enumerate_distribution) with an
    /// explicit budget on `vocab^max_len * max_len`.
    pub fn enumerate_distribution_with_budget(
        &self,
        prompt: &TokenSequence,
        max_len: usize,
        budget: u128,
    ) -> Result<EnumeratedDistribution, PolicyError> {
        self.check_sequences(prompt, None)?;
        if max_len == 0 {
            return Err(PolicyError::ZeroMaxLen);
        }
        let mut required: u128 = 1;
        for _ in 0..max_len {
            required = required.saturating_mul(self.vocab_size as u128);
        }
        required = required.saturating_mul(max_len as u128);
        if required > budget {
            return Err(PolicyError::BudgetExceeded { required, budget });
        }

        let eos = self.eos_token();
        let mut entries = Vec::new();
        let mut overflow = 0.0;
        let mut prefix: Vec<u32> = Vec::new();
        self.enumerate_walk(
            self.initial_context(prompt),
            1.0,
            max_len,
            eos,
            &mut prefix,
            &mut entries,
            &mut overflow,
        );
        Ok(EnumeratedDistribution {
            entries,
            overflow_mass: overflow,
            vocab_size: self.vocab_size,
            max_len,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_walk(
        &self,
        ctx: usize,
        prob: f64,
        remaining: usize,
        eos: u32,
        prefix: &mut Vec<u32>,
        entries: &mut Vec<(TokenSequence, f64)>,
        overflow: &mut f64,
    ) {
        if remaining == 0 {
            *overflow += prob;
            return;
        }
        let probs = self.conditional(ctx);
        // Terminated sequence first, then content continuations in id order.
        let mut terminated = prefix.clone();
        terminated.push(eos);
        entries.push((
            TokenSequence::new(terminated, self.vocab_size).expect("tokens are in range"),
            prob * probs[eos as usize],
        ));
        for t in 0..eos {
            prefix.push(t);
            self.enumerate_walk(
                self.roll_context(ctx, t),
                prob * probs[t as usize],
                remaining - 1,
                eos,
                prefix,
                entries,
                overflow,
            );
            prefix.pop();
        }
    }

    /// Ancestral sampling, truncated at `max_len` content tokens.
    ///
    /// Draws one uniform per step from a [`SplitMix64`] stream seeded with
    /// `rng_seed` and walks the softmax row's cumulative sum in token-id
    /// order. EOS stops generation and is not emitted, so the result may be
    /// empty. Deterministic given the seed.
    pub fn sample_sequence(
        &self,
        prompt: &TokenSequence,
        rng_seed: u64,
        max_len: usize,
    ) -> Result<TokenSequence, PolicyError> {
        self.check_sequences(prompt, None)?;
        let mut rng = SplitMix64::new(rng_seed);
        let mut ctx = self.initial_context(prompt);
        let mut tokens = Vec::new();
        let eos = self.eos_token();
        for _ in 0..max_len {
            let probs = self.conditional(ctx);
            let t = rng.categorical(&probs) as u32;
            if t == eos {
                break;
            }
            tokens.push(t);
            ctx = self.roll_context(ctx, t);
        }
        Ok(TokenSequence::new(tokens, self.vocab_size).expect("sampled tokens are in range"))
    }
}

impl PolicyGradient {
    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        Self {
            vocab_size: policy.vocab_size,
            context_order: policy.context_order,
            values: vec![0.0; policy.logits.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn row(&self, context_index: usize) -> &[f64] {
        let v = self.vocab_size as usize;
        &self.values[context_index * v..(context_index + 1) * v]
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        math::sqrt(self.values.iter().map(|g| g * g).sum())
    }

    /// `self += s * other`, entrywise. Shapes must match.
    pub fn scaled_add(&mut self, other: &PolicyGradient, s: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
