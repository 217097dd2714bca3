//! Synthetic target distributions and Bradley-Terry preference datasets.
//!
//! Datasets are generated from a single sequential [`SplitMix64`] stream
//! seeded by [`DatasetSpec::rng_seed`], with a pinned draw order per example
//! (documented on [`build_dataset`]), so files are bit-reproducible.

use alloc::vec::Vec;

use crate::math::{ln, sigmoid};
use crate::policy::EnumeratedDistribution;
use crate::rng::SplitMix64;
use crate::seq::{PreferenceExample, TokenSequence};

/// Largest support accepted when materializing a target distribution.
const MAX_SUPPORT: u128 = 1_000_000;

/// Retry budget for drawing a second response distinct from the first.
const REDRAW_LIMIT: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("n_examples must be >= 1")]
    ZeroExamples,
    #[error("vocab size must be at least 2 (one content token plus EOS)")]
    VocabTooSmall,
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
    #[error("mode_mass = {0} must lie strictly inside (0, 1)")]
    BadModeMass(f64),
    #[error("shared_token_rate = {0} must lie in [0, 1]")]
    BadSharedTokenRate(f64),
    #[error("target needs at least 2 distinct sequences, found {available}")]
    InsufficientSupport { available: usize },
    #[error("target support would hold {required} sequences, above the {limit} cap")]
    SupportTooLarge { required: u128, limit: u128 },
    #[error("target support is empty")]
    EmptyTarget,
    #[error("target support sequences must be nonempty")]
    EmptySupportSequence,
    #[error("support masses sum to {total}, expected 1")]
    UnnormalizedMass { total: f64 },
    #[error("support mass {mass} must be positive and finite")]
    BadMass { mass: f64 },
    #[error("support sequences must be distinct")]
    DuplicateSequence,
    #[error("need one reward per support sequence: {rewards} rewards for {sequences} sequences")]
    RewardCountMismatch { rewards: usize, sequences: usize },
    #[error("reward {0} must be finite")]
    BadReward(f64),
    #[error("support vocab sizes disagree")]
    MixedVocab,
    #[error("support sequence exceeds max_len {max_len}")]
    SequenceTooLong { max_len: usize },
    #[error("support sequence contains the EOS token id")]
    EosInSupport,
    #[error("redraw limit exceeded while sampling example {example}")]
    RedrawLimitExceeded { example: usize },
}

/// Parameters of one synthetic preference dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub n_examples: usize,
    pub vocab_size: u32,
    pub max_len: usize,
    /// Probability mass on the dominant mode of the constructed target.
    pub mode_mass: f64,
    /// Expected fraction of aligned token positions where chosen and
    /// rejected coincide.
    pub shared_token_rate: f64,
    pub rng_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_examples == 0 {
            return Err(DatagenError::ZeroExamples);
        }
        if self.vocab_size < 2 {
            return Err(DatagenError::VocabTooSmall);
        }
        if self.max_len == 0 {
            return Err(DatagenError::ZeroMaxLen);
        }
        if !(self.mode_mass.is_finite() && self.mode_mass > 0.0 && self.mode_mass < 1.0) {
            return Err(DatagenError::BadModeMass(self.mode_mass));
        }
        if !(self.shared_token_rate.is_finite()
            && (0.0..=1.0).contains(&self.shared_token_rate))
        {
            return Err(DatagenError::BadSharedTokenRate(self.shared_token_rate));
        }
        Ok(())
    }
}

/// A distribution over response sequences plus a preference score per
/// sequence; the ground truth the preference oracle judges against.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    support: Vec<(TokenSequence, f64)>,
    rewards: Vec<f64>,
}

impl TargetDistribution {
    /// Validates normalization, positivity, distinctness, and reward
    /// alignment.
    pub fn new(
        support: Vec<(TokenSequence, f64)>,
        rewards: Vec<f64>,
    ) -> Result<Self, DatagenError> {
        if support.is_empty() {
            return Err(DatagenError::EmptyTarget);
        }
        if rewards.len() != support.len() {
            return Err(DatagenError::RewardCountMismatch {
                rewards: rewards.len(),
                sequences: support.len(),
            });
        }
        let vocab = support[0].0.vocab_size();
        let mut total = 0.0;
        for (seq, mass) in &support {
            if seq.is_empty() {
                return Err(DatagenError::EmptySupportSequence);
            }
            if seq.vocab_size() != vocab {
                return Err(DatagenError::MixedVocab);
            }
            if !(mass.is_finite() && *mass > 0.0) {
                return Err(DatagenError::BadMass { mass: *mass });
            }
            total += mass;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(DatagenError::UnnormalizedMass { total });
        }
        for reward in &rewards {
            if !reward.is_finite() {
                return Err(DatagenError::BadReward(*reward));
            }
        }
        let mut sorted: Vec<&TokenSequence> = support.iter().map(|(s, _)| s).collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(DatagenError::DuplicateSequence);
        }
        Ok(Self { support, rewards })
    }

    pub fn support(&self) -> &[(TokenSequence, f64)] {
        &self.support
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn vocab_size(&self) -> u32 {
        self.support[0].0.vocab_size()
    }

    pub fn reward_of(&self, sequence: &TokenSequence) -> Option<f64> {
        self.support
            .iter()
            .position(|(s, _)| s == sequence)
            .map(|i| self.rewards[i])
    }

    /// Casts the target into the EOS-terminated space that policy
    /// enumeration lives in: each support sequence gains its trailing EOS
    /// and the overflow mass is zero. Support sequences must be free of the
    /// EOS id and no longer than `max_len - 1` so the terminated form fits.
    pub fn to_enumerated(&self, max_len: usize) -> Result<EnumeratedDistribution, DatagenError> {
        let vocab = self.vocab_size();
        let eos = vocab - 1;
        let mut entries = Vec::with_capacity(self.support.len());
        for (seq, mass) in &self.support {
            if seq.tokens().contains(&eos) {
                return Err(DatagenError::EosInSupport);
            }
            if seq.len() + 1 > max_len {
                return Err(DatagenError::SequenceTooLong { max_len });
            }
            let mut tokens = seq.tokens().to_vec();
            tokens.push(eos);
            entries.push((
                TokenSequence::new(tokens, vocab).expect("tokens are in range"),
                *mass,
            ));
        }
        Ok(EnumeratedDistribution {
            entries,
            overflow_mass: 0.0,
            vocab_size: vocab,
            max_len,
        })
    }
}

/// Every content sequence (ids `0..vocab-1`, EOS excluded) of length
/// `1..=max_len`, in length-then-lexicographic order.
fn all_content_sequences(vocab_size: u32, max_len: usize) -> Result<Vec<Vec<u32>>, DatagenError> {
    let alphabet = (vocab_size - 1) as u128;
    let mut required: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..max_len {
        pow = pow.saturating_mul(alphabet);
        required = required.saturating_add(pow);
        if required > MAX_SUPPORT {
            return Err(DatagenError::SupportTooLarge {
                required,
                limit: MAX_SUPPORT,
            });
        }
    }
    let alphabet = alphabet as u32;
    let mut out = Vec::with_capacity(required as usize);
    let mut current: Vec<Vec<u32>> = alloc::vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(current.len() * alphabet as usize);
        for prefix in &current {
            for t in 0..alphabet {
                let mut seq = prefix.clone();
                seq.push(t);
                next.push(seq);
            }
        }
        out.extend(next.iter().cloned());
        current = next;
    }
    Ok(out)
}

/// Builds the bimodal target: one dominant sequence carrying `mode_mass`
/// and a long tail of every other content sequence sharing the remaining
/// mass geometrically, in length-then-lexicographic order.
///
/// The dominant mode is the maximal run of token 0. The geometric ratio is
/// 1/2, widened for very large tails so that the smallest tail mass stays
/// at least `1e-30` of the largest and never underflows. Rewards are the
/// log of each sequence's target mass, so Bradley-Terry judgments
/// concentrate preference on the mode.
pub fn make_bimodal_target(spec: &DatasetSpec) -> Result<TargetDistribution, DatagenError> {
    spec.validate()?;
    let sequences = all_content_sequences(spec.vocab_size, spec.max_len)?;
    if sequences.len() < 2 {
        return Err(DatagenError::InsufficientSupport {
            available: sequences.len(),
        });
    }
    let mode: Vec<u32> = alloc::vec![0; spec.max_len];
    let tail: Vec<&Vec<u32>> = sequences.iter().filter(|s| **s != mode).collect();
    let tail_count = tail.len();

    // Geometric tail weights r^i normalized to the remaining mass.
    let r: f64 = if tail_count > 1 {
        0.5f64.max(crate::math::powf(1e-30, 1.0 / (tail_count - 1) as f64))
    } else {
        0.5
    };
    let norm = (1.0 - crate::math::powf(r, tail_count as f64)) / (1.0 - r);
    let tail_mass = 1.0 - spec.mode_mass;

    let mut support = Vec::with_capacity(tail_count + 1);
    support.push((
        TokenSequence::new(mode, spec.vocab_size).expect("mode tokens are in range"),
        spec.mode_mass,
    ));
    let mut weight = 1.0;
    for seq in tail {
        support.push((
            TokenSequence::new(seq.clone(), spec.vocab_size).expect("tokens are in range"),
            tail_mass * weight / norm,
        ));
        weight *= r;
    }
    let rewards = support.iter().map(|(_, mass)| ln(*mass)).collect();
    TargetDistribution::new(support, rewards)
}

/// One Bradley-Terry judgment: `true` (a preferred) with probability
/// `sigmoid(reward_a - reward_b)`, from a single draw of a fresh stream.
pub fn bt_preference(reward_a: f64, reward_b: f64, rng_seed: u64) -> bool {
    SplitMix64::new(rng_seed).bernoulli(sigmoid(reward_a - reward_b))
}

fn bt_preference_with(rng: &mut SplitMix64, reward_a: f64, reward_b: f64) -> bool {
    rng.bernoulli(sigmoid(reward_a - reward_b))
}

/// Draws a preference dataset from `target`.
///
/// Per example the stream is consumed in this pinned order:
///
/// 1. first response: one categorical draw over the target masses;
/// 2. shared prefix length `L`: one Bernoulli(`shared_token_rate`) draw per
///    token of the first response (`L` = number of successes);
/// 3. second response: repeated uniform draws (at most 1000) over the
///    support sequences other than the first that share its `L`-prefix,
///    with `L` relaxed downward until such a candidate exists — or over the
///    whole support when none exists even at `L = 0` — until the draw
///    differs from the first;
/// 4. winner: one Bernoulli draw at `sigmoid(reward_a - reward_b)`.
///
/// The uniform second draw ignores the target masses, which biases it
/// toward the tail relative to an independent target draw. Prompts are
/// empty.
pub fn build_dataset(
    target: &TargetDistribution,
    spec: &DatasetSpec,
) -> Result<Vec<PreferenceExample>, DatagenError> {
    spec.validate()?;
    let support = target.support();
    if support.is_empty() {
        return Err(DatagenError::EmptyTarget);
    }
    let masses: Vec<f64> = support.iter().map(|(_, m)| *m).collect();
    let mut rng = SplitMix64::new(spec.rng_seed);
    let vocab = target.vocab_size();
    let prompt = TokenSequence::empty(vocab);
    let mut out = Vec::with_capacity(spec.n_examples);

    for example in 0..spec.n_examples {
        let idx_a = rng.categorical(&masses);
        let first = &support[idx_a].0;

        let mut prefix_len = 0usize;
        for _ in 0..first.len() {
            if rng.bernoulli(spec.shared_token_rate) {
                prefix_len += 1;
            }
        }
        let candidates: Vec<usize> = loop {
            let prefix = &first.tokens()[..prefix_len];
            let found: Vec<usize> = support
                .iter()
                .enumerate()
                .filter(|(i, (s, _))| {
                    *i != idx_a
                        && s.len() >= prefix_len
                        && &s.tokens()[..prefix_len] == prefix
                })
                .map(|(i, _)| i)
                .collect();
            if !found.is_empty() || prefix_len == 0 {
                break found;
            }
            prefix_len -= 1;
        };

        let mut idx_b = idx_a;
        let mut distinct = false;
        for _ in 0..REDRAW_LIMIT {
            idx_b = if candidates.is_empty() {
                rng.index(support.len())
            } else {
                candidates[rng.index(candidates.len())]
            };
            if idx_b != idx_a {
                distinct = true;
                break;
            }
        }
        if !distinct {
            return Err(DatagenError::RedrawLimitExceeded { example });
        }

        let (reward_a, reward_b) = (target.rewards()[idx_a], target.rewards()[idx_b]);
        let a_preferred = bt_preference_with(&mut rng, reward_a, reward_b);
        let (chosen, rejected) = if a_preferred {
            (support[idx_a].0.clone(), support[idx_b].0.clone())
        } else {
            (support[idx_b].0.clone(), support[idx_a].0.clone())
        };
        out.push(
            PreferenceExample::new(prompt.clone(), chosen, rejected)
                .expect("target sequences are nonempty and share a vocabulary"),
        );
    }
    Ok(out)
}
