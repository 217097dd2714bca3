//! Deterministic full-batch and mini-batch optimization of a tabular policy
//! under any configured loss, emitting trace telemetry.

use alloc::vec;
use alloc::vec::Vec;

use crate::losses::{batch_loss_and_grad, LossConfig, LossError};
use crate::math::{powf, sqrt};
use crate::policy::{PolicyError, TabularPolicy};
use crate::rng::SplitMix64;
use crate::seq::PreferenceExample;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("dataset must be nonempty")]
    EmptyDataset,
    #[error("learning_rate = {0} must be finite and >= 0")]
    BadLearningRate(f64),
    #[error("steps must be >= 1")]
    ZeroSteps,
    #[error("trace_every must be >= 1")]
    ZeroTraceEvery,
    #[error("mini-batch size must be >= 1")]
    ZeroBatchSize,
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Batch selection: the whole dataset every step, or fixed-size chunks of a
/// per-epoch Fisher-Yates permutation drawn from the config stream (a final
/// short chunk is used as-is).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Fixed(usize),
}

/// Optimizer choice. Adam runs with the fixed moments
/// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8` and bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: BatchSize,
    pub optimizer: OptimizerKind,
    pub rng_seed: u64,
    pub trace_every: usize,
}

impl TrainConfig {
    /// Full-batch SGD at learning rate 0.5; the configuration used by the
    /// acceptance experiments.
    pub fn full_batch_sgd(steps: usize) -> Self {
        Self {
            learning_rate: 0.5,
            steps,
            batch_size: BatchSize::Full,
            optimizer: OptimizerKind::Sgd,
            rng_seed: 0,
            trace_every: 100,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        if self.steps == 0 {
            return Err(TrainError::ZeroSteps);
        }
        if self.trace_every == 0 {
            return Err(TrainError::ZeroTraceEvery);
        }
        if self.batch_size == BatchSize::Fixed(0) {
            return Err(TrainError::ZeroBatchSize);
        }
        Ok(())
    }
}

/// One traced optimization state: dataset-mean statistics of the policy
/// after `step` updates, with the full-dataset loss and gradient norm at
/// that state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub avg_lp_chosen: f64,
    pub avg_lp_rejected: f64,
    /// `avg_lp_chosen - avg_lp_rejected`, exactly.
    pub margin: f64,
    pub ppl_chosen: f64,
    pub ppl_rejected: f64,
    pub grad_norm: f64,
}

/// Dataset means of the per-response statistics; no parameter updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub mean_avg_lp_chosen: f64,
    pub mean_avg_lp_rejected: f64,
    pub mean_margin: f64,
    pub mean_ppl_chosen: f64,
    pub mean_ppl_rejected: f64,
}

/// Read-only dataset evaluation.
pub fn evaluate(
    policy: &TabularPolicy,
    dataset: &[PreferenceExample],
) -> Result<EvalSummary, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut avg_w = 0.0;
    let mut avg_l = 0.0;
    let mut ppl_w = 0.0;
    let mut ppl_l = 0.0;
    for ex in dataset {
        let chosen = policy.eval_sequence(&ex.prompt, &ex.chosen)?;
        let rejected = policy.eval_sequence(&ex.prompt, &ex.rejected)?;
        avg_w += chosen.avg_logprob;
        avg_l += rejected.avg_logprob;
        ppl_w += chosen.perplexity;
        ppl_l += rejected.perplexity;
    }
    let n = dataset.len() as f64;
    let mean_avg_lp_chosen = avg_w / n;
    let mean_avg_lp_rejected = avg_l / n;
    Ok(EvalSummary {
        mean_avg_lp_chosen,
        mean_avg_lp_rejected,
        mean_margin: mean_avg_lp_chosen - mean_avg_lp_rejected,
        mean_ppl_chosen: ppl_w / n,
        mean_ppl_rejected: ppl_l / n,
    })
}

/// Attributes a saturation failure (non-finite log-likelihood) to the
/// optimizer step that produced it.
fn guard_step<T>(result: Result<T, LossError>, step: usize) -> Result<T, TrainError> {
    match result {
        Err(LossError::Policy(PolicyError::NonFiniteLogprob)) => {
            Err(TrainError::NonFinite { step })
        }
        other => Ok(other?),
    }
}

fn trace_row(
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    dataset: &[PreferenceExample],
    loss_cfg: &LossConfig,
    step: usize,
) -> Result<TraceRow, TrainError> {
    let summary = match evaluate(policy, dataset) {
        Err(TrainError::Policy(PolicyError::NonFiniteLogprob)) => {
            return Err(TrainError::NonFinite { step })
        }
        other => other?,
    };
    let (loss, grad) = guard_step(
        batch_loss_and_grad(policy, reference, dataset, loss_cfg),
        step,
    )?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(TrainError::NonFinite { step });
    }
    Ok(TraceRow {
        step,
        loss,
        avg_lp_chosen: summary.mean_avg_lp_chosen,
        avg_lp_rejected: summary.mean_avg_lp_rejected,
        margin: summary.mean_margin,
        ppl_chosen: summary.mean_ppl_chosen,
        ppl_rejected: summary.mean_ppl_rejected,
        grad_norm: grad.norm(),
    })
}

struct MiniBatcher {
    permutation: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl MiniBatcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut batcher = Self {
            permutation: (0..n).collect(),
            cursor: 0,
            rng: SplitMix64::new(seed),
        };
        batcher.shuffle();
        batcher
    }

    fn shuffle(&mut self) {
        // Fisher-Yates over the index permutation.
        for i in (1..self.permutation.len()).rev() {
            let j = self.rng.index(i + 1);
            self.permutation.swap(i, j);
        }
        self.cursor = 0;
    }

    fn next_batch(
        &mut self,
        dataset: &[PreferenceExample],
        size: usize,
    ) -> Vec<PreferenceExample> {
        if self.cursor >= self.permutation.len() {
            self.shuffle();
        }
        let end = (self.cursor + size).min(self.permutation.len());
        let batch = self.permutation[self.cursor..end]
            .iter()
            .map(|&i| dataset[i].clone())
            .collect();
        self.cursor = end;
        batch
    }
}

/// Runs `steps` optimizer updates of `policy` on the dataset, returning the
/// final policy and the trace.
///
/// Trace rows are emitted for the initial state (step 0), after every
/// `trace_every`-th update, and for the final state. Any non-finite loss,
/// gradient, or parameter aborts with the offending step index rather than
/// clipping. Bit-reproducible given the seeds.
pub fn train(
    policy: TabularPolicy,
    reference: Option<&TabularPolicy>,
    dataset: &[PreferenceExample],
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(TabularPolicy, Vec<TraceRow>), TrainError> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut policy = policy;
    let mut trace = Vec::new();
    trace.push(trace_row(&policy, reference, dataset, loss_cfg, 0)?);

    let mut batcher = match train_cfg.batch_size {
        BatchSize::Full => None,
        BatchSize::Fixed(_) => Some(MiniBatcher::new(dataset.len(), train_cfg.rng_seed)),
    };
    let n_params = policy.logits().len();
    let mut adam_m = vec![0.0f64; n_params];
    let mut adam_v = vec![0.0f64; n_params];
    let lr = train_cfg.learning_rate;

    for step in 1..=train_cfg.steps {
        let result = match (train_cfg.batch_size, batcher.as_mut()) {
            (BatchSize::Fixed(size), Some(batcher)) => {
                let batch = batcher.next_batch(dataset, size);
                batch_loss_and_grad(&policy, reference, &batch, loss_cfg)
            }
            _ => batch_loss_and_grad(&policy, reference, dataset, loss_cfg),
        };
        let (loss, grad) = guard_step(result, step)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(TrainError::NonFinite { step });
        }

        match train_cfg.optimizer {
            OptimizerKind::Sgd => {
                for (theta, g) in policy.logits_mut().iter_mut().zip(grad.values()) {
                    *theta -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = step as f64;
                let bias1 = 1.0 - powf(ADAM_BETA1, t);
                let bias2 = 1.0 - powf(ADAM_BETA2, t);
                for ((theta, g), (m, v)) in policy
                    .logits_mut()
                    .iter_mut()
                    .zip(grad.values())
                    .zip(adam_m.iter_mut().zip(adam_v.iter_mut()))
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *theta -= lr * m_hat / (sqrt(v_hat) + ADAM_EPS);
                }
            }
        }
        if policy.logits().iter().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite { step });
        }

        if step % train_cfg.trace_every == 0 || step == train_cfg.steps {
            trace.push(trace_row(&policy, reference, dataset, loss_cfg, step)?);
        }
    }
    Ok((policy, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, make_bimodal_target, DatasetSpec};
    use crate::seq::TokenSequence;

    fn small_dataset(seed: u64) -> Vec<PreferenceExample> {
        let spec = DatasetSpec {
            n_examples: 40,
            vocab_size: 4,
            max_len: 3,
            mode_mass: 0.8,
            shared_token_rate: 0.5,
            rng_seed: seed,
        };
        let target = make_bimodal_target(&spec).unwrap();
        build_dataset(&target, &spec).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let dataset = small_dataset(1);
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let mut cfg = TrainConfig::full_batch_sgd(10);
        cfg.learning_rate = 0.0;
        let (trained, _) = train(
            policy.clone(),
            None,
            &dataset,
            &LossConfig::simper(),
            &cfg,
        )
        .unwrap();
        assert_eq!(trained.logits(), policy.logits());
    }

    #[test]
    fn sft_chosen_likelihood_is_nondecreasing() {
        let dataset = small_dataset(2);
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let mut cfg = TrainConfig::full_batch_sgd(200);
        cfg.trace_every = 1;
        let (_, trace) = train(policy, None, &dataset, &LossConfig::sft(), &cfg).unwrap();
        for pair in trace.windows(2) {
            assert!(
                pair[1].avg_lp_chosen >= pair[0].avg_lp_chosen - 1e-9,
                "step {}: {} -> {}",
                pair[1].step,
                pair[0].avg_lp_chosen,
                pair[1].avg_lp_chosen
            );
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let dataset = small_dataset(3);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            steps: 57,
            batch_size: BatchSize::Fixed(7),
            optimizer: OptimizerKind::Adam,
            rng_seed: 9,
            trace_every: 10,
        };
        let loss_cfg = LossConfig::simpo(2.0, 0.5).unwrap();
        let run = |seed_policy: &TabularPolicy| {
            train(seed_policy.clone(), None, &dataset, &loss_cfg, &cfg).unwrap()
        };
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let (p1, t1) = run(&policy);
        let (p2, t2) = run(&policy);
        assert_eq!(p1.logits(), p2.logits());
        assert_eq!(t1, t2);
    }

    #[test]
    fn evaluate_matches_step_zero_trace_and_is_read_only() {
        let dataset = small_dataset(4);
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let before = policy.logits().to_vec();
        let summary = evaluate(&policy, &dataset).unwrap();
        assert_eq!(policy.logits(), &before[..]);

        let (_, trace) = train(
            policy,
            None,
            &dataset,
            &LossConfig::simper(),
            &TrainConfig::full_batch_sgd(1),
        )
        .unwrap();
        let row0 = &trace[0];
        assert_eq!(row0.step, 0);
        assert_eq!(row0.avg_lp_chosen, summary.mean_avg_lp_chosen);
        assert_eq!(row0.avg_lp_rejected, summary.mean_avg_lp_rejected);
        assert_eq!(row0.margin, summary.mean_margin);
        assert_eq!(row0.ppl_chosen, summary.mean_ppl_chosen);
        assert_eq!(row0.ppl_rejected, summary.mean_ppl_rejected);
    }

    #[test]
    fn uniform_policy_mean_perplexity_is_vocab_size_exactly() {
        let dataset = small_dataset(5);
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let summary = evaluate(&policy, &dataset).unwrap();
        assert_eq!(summary.mean_ppl_chosen, 4.0);
        assert_eq!(summary.mean_ppl_rejected, 4.0);
    }

    #[test]
    fn margin_is_consistent_with_operands() {
        let dataset = small_dataset(6);
        let mut policy = TabularPolicy::uniform(4, 1).unwrap();
        let mut rng = crate::rng::SplitMix64::new(8);
        for l in policy.logits_mut() {
            *l = (rng.next_f64() - 0.5) * 2.0;
        }
        let (_, trace) = train(
            policy,
            None,
            &dataset,
            &LossConfig::simper(),
            &TrainConfig::full_batch_sgd(5),
        )
        .unwrap();
        for row in &trace {
            assert!((row.margin - (row.avg_lp_chosen - row.avg_lp_rejected)).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_guard_aborts_with_step_index() {
        let dataset = small_dataset(7);
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let mut cfg = TrainConfig::full_batch_sgd(50);
        // An absurd learning rate saturates the logits within a few CPO
        // steps, driving log-likelihoods non-finite.
        cfg.learning_rate = f64::MAX;
        let err = train(
            policy,
            None,
            &dataset,
            &LossConfig::cpo(0.1, 1.0).unwrap(),
            &cfg,
        )
        .unwrap_err();
        match err {
            TrainError::NonFinite { step } => assert!(step >= 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trace_includes_initial_and_final_steps() {
        let dataset = small_dataset(8);
        let policy = TabularPolicy::uniform(4, 0).unwrap();
        let mut cfg = TrainConfig::full_batch_sgd(25);
        cfg.trace_every = 10;
        let (_, trace) = train(policy, None, &dataset, &LossConfig::simper(), &cfg).unwrap();
        let steps: Vec<usize> = trace.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
    }

    #[test]
    fn full_and_minibatch_both_run_with_reference_methods() {
        let dataset = small_dataset(9);
        let policy = TabularPolicy::uniform(4, 1).unwrap();
        let reference = policy.freeze();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            steps: 12,
            batch_size: BatchSize::Fixed(16),
            optimizer: OptimizerKind::Sgd,
            rng_seed: 4,
            trace_every: 6,
        };
        let (_, trace) = train(
            policy,
            Some(&reference),
            &dataset,
            &LossConfig::dpo(0.1).unwrap(),
            &cfg,
        )
        .unwrap();
        // At the reference, DPO's loss is ln 2.
        assert!((trace[0].loss - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::full_batch_sgd(0).validate().is_err());
        let mut cfg = TrainConfig::full_batch_sgd(5);
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 0.5;
        cfg.trace_every = 0;
        assert!(cfg.validate().is_err());
        cfg.trace_every = 1;
        cfg.batch_size = BatchSize::Fixed(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let policy = TabularPolicy::uniform(3, 0).unwrap();
        assert!(matches!(
            evaluate(&policy, &[]),
            Err(TrainError::EmptyDataset)
        ));
        let _ = TokenSequence::empty(3);
        assert!(matches!(
            train(
                policy,
                None,
                &[],
                &LossConfig::simper(),
                &TrainConfig::full_batch_sgd(1)
            ),
            Err(TrainError::EmptyDataset)
        ));
    }
}
