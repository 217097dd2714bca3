//! Token sequences, preference pairs, and per-response likelihood summaries.

use alloc::vec::Vec;

use crate::math;

/// Errors from constructing the domain types in this module.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SeqError {
    #[error("token id {token} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("vocab size must be positive")]
    ZeroVocab,
    #[error("vocab size mismatch: {left} vs {right}")]
    VocabMismatch { left: u32, right: u32 },
    #[error("{side} response must be nonempty")]
    EmptyResponse { side: &'static str },
    #[error("sum_logprob must be finite and <= 0, got {value}")]
    BadLogprob { value: f64 },
    #[error("sequence length must be >= 1")]
    ZeroLength,
}

/// A sequence of token ids over a fixed vocabulary.
///
/// Token ids are opaque nonnegative integers below `vocab_size`. Responses
/// are required to be nonempty wherever they are consumed; prompts may be
/// empty, so emptiness is permitted at construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    vocab_size: u32,
}

impl TokenSequence {
    /// Validates every token id against `vocab_size`.
    pub fn new(tokens: Vec<u32>, vocab_size: u32) -> Result<Self, SeqError> {
        if vocab_size == 0 {
            return Err(SeqError::ZeroVocab);
        }
        for &token in &tokens {
            if token >= vocab_size {
                return Err(SeqError::TokenOutOfRange { token, vocab_size });
            }
        }
        Ok(Self { tokens, vocab_size })
    }

    /// The empty sequence, used as the default prompt.
    pub fn empty(vocab_size: u32) -> Self {
        Self {
            tokens: Vec::new(),
            vocab_size,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A (prompt, chosen, rejected) token triple: one preference judgment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceExample {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
}

impl PreferenceExample {
    /// Requires nonempty responses sharing the prompt's vocabulary.
    pub fn new(
        prompt: TokenSequence,
        chosen: TokenSequence,
        rejected: TokenSequence,
    ) -> Result<Self, SeqError> {
        if chosen.is_empty() {
            return Err(SeqError::EmptyResponse { side: "chosen" });
        }
        if rejected.is_empty() {
            return Err(SeqError::EmptyResponse { side: "rejected" });
        }
        for seq in [&chosen, &rejected] {
            if seq.vocab_size() != prompt.vocab_size() {
                return Err(SeqError::VocabMismatch {
                    left: prompt.vocab_size(),
                    right: seq.vocab_size(),
                });
            }
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.prompt.vocab_size()
    }
}

/// Per-response log-likelihood summary under some policy.
///
/// Carries the total and per-token log-likelihood in nats, together with
/// the derived geometric-mean token probability and perplexity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceStats {
    /// Total log-likelihood of the response, nats, `<= 0`.
    pub sum_logprob: f64,
    /// `sum_logprob / length`, nats per token.
    pub avg_logprob: f64,
    /// Response length in tokens, `>= 1`.
    pub length: usize,
    /// `exp(avg_logprob)`, in `(0, 1]`.
    pub geo_mean_prob: f64,
    /// `exp(-avg_logprob)`, in `[1, inf)`; the inverse of `geo_mean_prob`.
    pub perplexity: f64,
}

/// Builds a [`SequenceStats`] from a total log-likelihood and a length.
pub fn make_stats(sum_logprob: f64, length: usize) -> Result<SequenceStats, SeqError> {
    if !sum_logprob.is_finite() || sum_logprob > 0.0 {
        return Err(SeqError::BadLogprob { value: sum_logprob });
    }
    if length == 0 {
        return Err(SeqError::ZeroLength);
    }
    let avg_logprob = sum_logprob / length as f64;
    Ok(SequenceStats {
        sum_logprob,
        avg_logprob,
        length,
        geo_mean_prob: math::exp(avg_logprob),
        perplexity: math::exp(-avg_logprob),
    })
}
