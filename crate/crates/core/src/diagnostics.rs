//! Analytical instruments: gradient-weight records, exact TVD/KLD between
//! enumerable sequence distributions, the token-level total-variation
//! factorization bound, Spearman rank correlation, and perplexity
//! histograms.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::losses::{LossConfig, Method};
use crate::math::{abs, exp, ln, sigmoid, sqrt};
use crate::policy::{EnumeratedDistribution, PolicyError, TabularPolicy};
use crate::seq::{PreferenceExample, TokenSequence};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("gradient weights are defined for DPO, SimPO, and SimPER, not {method}")]
    UnsupportedMethod { method: &'static str },
    #[error("DPO gradient weights require a reference policy")]
    MissingReference,
    #[error("distributions enumerate different spaces: vocab {vocab_a} x max_len {max_len_a} vs vocab {vocab_b} x max_len {max_len_b}")]
    EnumerationMismatch {
        vocab_a: u32,
        max_len_a: usize,
        vocab_b: u32,
        max_len_b: usize,
    },
    #[error("policies must share a vocabulary: {left} vs {right}")]
    VocabMismatch { left: u32, right: u32 },
    #[error("inputs must have equal lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("input is empty")]
    EmptyInput,
    #[error("bin count must be >= 1")]
    ZeroBins,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Closed-form gradient weights of one example under the current policy.
///
/// `dpo_ratio` is the likelihood-level imbalance diagnostic
/// `pi(y_w|x) / pi(y_l|x)`, which grows without bound as the rejected
/// likelihood collapses; it is reported for every supported method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientWeightRecord {
    pub method: Method,
    /// DPO weight `sigma(beta log-ratio(l) - beta log-ratio(w))`, in (0,1).
    pub w_theta: Option<f64>,
    /// SimPO weight `sigma(beta a_l - beta a_w + gamma)`, in (0,1).
    pub d_theta: Option<f64>,
    /// SimPER weight pair `(-exp(a_w), +exp(a_l))`; magnitudes at most 1,
    /// and exactly `(-1, +1)` at the geometric-mean level.
    pub simper_weights: Option<(f64, f64)>,
    pub dpo_ratio: f64,
}

/// Evaluates the closed-form gradient weights at the current policy.
pub fn gradient_weights(
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    example: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<GradientWeightRecord, DiagnosticsError> {
    let chosen = policy.eval_sequence(&example.prompt, &example.chosen)?;
    let rejected = policy.eval_sequence(&example.prompt, &example.rejected)?;
    let dpo_ratio = exp(chosen.sum_logprob - rejected.sum_logprob);
    let mut record = GradientWeightRecord {
        method: cfg.method(),
        w_theta: None,
        d_theta: None,
        simper_weights: None,
        dpo_ratio,
    };
    match cfg.method() {
        Method::Dpo => {
            let reference = reference.ok_or(DiagnosticsError::MissingReference)?;
            let ref_chosen = reference.eval_sequence(&example.prompt, &example.chosen)?;
            let ref_rejected = reference.eval_sequence(&example.prompt, &example.rejected)?;
            let beta = cfg.beta();
            record.w_theta = Some(sigmoid(
                beta * (rejected.sum_logprob - ref_rejected.sum_logprob)
                    - beta * (chosen.sum_logprob - ref_chosen.sum_logprob),
            ));
        }
        Method::SimPo => {
            record.d_theta = Some(sigmoid(
                cfg.beta() * rejected.avg_logprob - cfg.beta() * chosen.avg_logprob + cfg.gamma(),
            ));
        }
        Method::SimPer => {
            record.simper_weights = Some((-exp(chosen.avg_logprob), exp(rejected.avg_logprob)));
        }
        other => {
            return Err(DiagnosticsError::UnsupportedMethod {
                method: other.name(),
            })
        }
    }
    Ok(record)
}

/// Exact total variation and KL divergence between two enumerations of the
/// same sequence space, with the overflow masses compared as single atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceReport {
    /// `1/2 sum |p_a - p_b|` over the union support plus the overflow atom.
    pub tvd: f64,
    /// `sum p_a log(p_a / p_b)` in nats; `+inf` on support mismatch,
    /// with the conventions `0 log 0 = 0`.
    pub kld: f64,
    pub overflow_mass_a: f64,
    pub overflow_mass_b: f64,
}

fn kld_term(p_a: f64, p_b: f64) -> f64 {
    if p_a <= 0.0 {
        0.0
    } else if p_b <= 0.0 {
        f64::INFINITY
    } else {
        p_a * ln(p_a / p_b)
    }
}

/// Computes [`DivergenceReport`] between two enumerated distributions.
pub fn exact_divergences(
    dist_a: &EnumeratedDistribution,
    dist_b: &EnumeratedDistribution,
) -> Result<DivergenceReport, DiagnosticsError> {
    if dist_a.vocab_size != dist_b.vocab_size || dist_a.max_len != dist_b.max_len {
        return Err(DiagnosticsError::EnumerationMismatch {
            vocab_a: dist_a.vocab_size,
            max_len_a: dist_a.max_len,
            vocab_b: dist_b.vocab_size,
            max_len_b: dist_b.max_len,
        });
    }
    let mut union: BTreeMap<&TokenSequence, (f64, f64)> = BTreeMap::new();
    for (seq, p) in &dist_a.entries {
        union.entry(seq).or_insert((0.0, 0.0)).0 += p;
    }
    for (seq, p) in &dist_b.entries {
        union.entry(seq).or_insert((0.0, 0.0)).1 += p;
    }
    let mut abs_sum = abs(dist_a.overflow_mass - dist_b.overflow_mass);
    let mut kld = kld_term(dist_a.overflow_mass, dist_b.overflow_mass);
    for (p_a, p_b) in union.values() {
        abs_sum += abs(p_a - p_b);
        kld += kld_term(*p_a, *p_b);
    }
    Ok(DivergenceReport {
        tvd: 0.5 * abs_sum,
        kld,
        overflow_mass_a: dist_a.overflow_mass,
        overflow_mass_b: dist_b.overflow_mass,
    })
}

/// Total variation between two token conditionals, `1/2 sum |p - q|`.
fn conditional_tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| abs(a - b)).sum::<f64>()
}

/// Both sides of the token-level factorization bound on sequence TVD.
///
/// Returns `(lhs, rhs)`. `lhs` is the sequence-level total variation
/// between the two policies over the truncated sequence space whose atoms
/// are every EOS-terminated sequence of length at most `max_len` plus every
/// still-unterminated prefix of length exactly `max_len` (each frontier
/// prefix kept distinct). `rhs` is the expectation, under the data policy,
/// of the per-step total variation between the token conditionals, over the
/// same `max_len` steps. The bound `lhs <= rhs` holds exactly on this
/// truncated space and is tight for `max_len = 1`.
pub fn tv_factorization_bound(
    data_policy: &TabularPolicy,
    model_policy: &TabularPolicy,
    prompt: &TokenSequence,
    max_len: usize,
) -> Result<(f64, f64), DiagnosticsError> {
    if data_policy.vocab_size() != model_policy.vocab_size() {
        return Err(DiagnosticsError::VocabMismatch {
            left: data_policy.vocab_size(),
            right: model_policy.vocab_size(),
        });
    }
    if prompt.vocab_size() != data_policy.vocab_size() {
        return Err(DiagnosticsError::Policy(PolicyError::VocabMismatch {
            policy: data_policy.vocab_size(),
            sequence: prompt.vocab_size(),
        }));
    }
    // The walk visits the same tree as enumeration; enforce its budget.
    if max_len == 0 {
        return Err(DiagnosticsError::Policy(PolicyError::ZeroMaxLen));
    }
    let mut required: u128 = max_len as u128;
    for _ in 0..max_len {
        required = required.saturating_mul(data_policy.vocab_size() as u128);
    }
    if required > crate::policy::DEFAULT_ENUMERATION_BUDGET {
        return Err(DiagnosticsError::Policy(PolicyError::BudgetExceeded {
            required,
            budget: crate::policy::DEFAULT_ENUMERATION_BUDGET,
        }));
    }

    let eos = data_policy.eos_token();
    let mut abs_sum = 0.0;
    let mut rhs = 0.0;
    // Stack of (data ctx, model ctx, data prefix prob, model prefix prob,
    // depth) over alive content prefixes.
    let mut stack: Vec<(usize, usize, f64, f64, usize)> = Vec::new();
    stack.push((
        data_ctx_for_prompt(data_policy, prompt),
        data_ctx_for_prompt(model_policy, prompt),
        1.0,
        1.0,
        0usize,
    ));
    while let Some((ctx_d, ctx_m, prob_d, prob_m, depth)) = stack.pop() {
        if depth == max_len {
            // Unterminated frontier prefix: one atom per prefix.
            abs_sum += abs(prob_d - prob_m);
            continue;
        }
        let cond_d = data_policy.conditional(ctx_d);
        let cond_m = model_policy.conditional(ctx_m);
        rhs += prob_d * conditional_tv(&cond_d, &cond_m);
        // Terminated-here atom.
        abs_sum += abs(prob_d * cond_d[eos as usize] - prob_m * cond_m[eos as usize]);
        for t in 0..eos {
            stack.push((
                roll(data_policy, ctx_d, t),
                roll(model_policy, ctx_m, t),
                prob_d * cond_d[t as usize],
                prob_m * cond_m[t as usize],
                depth + 1,
            ));
        }
    }
    Ok((0.5 * abs_sum, rhs))
}

fn data_ctx_for_prompt(policy: &TabularPolicy, prompt: &TokenSequence) -> usize {
    let mut ctx = 0usize;
    for &t in prompt.tokens() {
        ctx = roll(policy, ctx, t);
    }
    ctx
}

fn roll(policy: &TabularPolicy, ctx: usize, token: u32) -> usize {
    if policy.context_order() == 0 {
        0
    } else {
        (ctx * policy.vocab_size() as usize + token as usize) % policy.context_count()
    }
}

/// Total variation between a one-hot observation and a token conditional:
/// `1 - conditional[observed]`.
///
/// The conditional must sum to 1; the token id must index into it.
pub fn onehot_token_tv(policy_conditional: &[f64], observed_token: u32) -> f64 {
    1.0 - policy_conditional[observed_token as usize]
}

/// Spearman rank correlation with average-rank tie handling.
///
/// Returns `Ok(None)` when either input is constant (the coefficient is
/// undefined there).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, DiagnosticsError> {
    if xs.len() != ys.len() {
        return Err(DiagnosticsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(DiagnosticsError::TooFewPoints(xs.len()));
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let n = xs.len() as f64;
    let mean_x = rx.iter().sum::<f64>() / n;
    let mean_y = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mean_x) * (b - mean_y);
        var_x += (a - mean_x) * (a - mean_x);
        var_y += (b - mean_y) * (b - mean_y);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / sqrt(var_x * var_y)))
}

/// Fractional ranks starting at 1, ties getting the average of their
/// positions.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ties; average their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One equal-width histogram bin over `[lo, hi)` (the last bin is closed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]` of the observed values.
///
/// A degenerate range (all values equal) collapses every count into the
/// first bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>, DiagnosticsError> {
    if values.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    if bins == 0 {
        return Err(DiagnosticsError::ZeroBins);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: min + i as f64 * width,
            hi: if i + 1 == bins {
                max
            } else {
                min + (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - min) / width) as usize).min(bins - 1)
        };
        out[idx].count += 1;
    }
    Ok(out)
}

/// Histogram of sequence perplexities under `policy`, each sequence scored
/// with an empty prompt.
pub fn perplexity_histogram(
    policy: &TabularPolicy,
    sequences: &[TokenSequence],
    bins: usize,
) -> Result<Vec<HistogramBin>, DiagnosticsError> {
    if sequences.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let prompt = TokenSequence::empty(policy.vocab_size());
    let mut values = Vec::with_capacity(sequences.len());
    for seq in sequences {
        values.push(policy.eval_sequence(&prompt, seq)?.perplexity);
    }
    histogram(&values, bins)
}
