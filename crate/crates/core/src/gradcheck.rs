//! Finite-difference verification of the analytic loss gradients.
//!
//! The numeric side perturbs each logit by a central-difference step and
//! re-evaluates the batch loss; it never touches the analytic gradient
//! path. For KTO the batch KL estimate is frozen at its base-policy value,
//! matching the analytic convention that no gradient flows through it.

use alloc::vec::Vec;

use crate::losses::{
    batch_loss, batch_loss_and_grad, kto_batch_z_ref, LossConfig, LossError, Method,
};
use crate::math::abs;
use crate::policy::{PolicyGradient, TabularPolicy};
use crate::rng::SplitMix64;
use crate::seq::{PreferenceExample, TokenSequence};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// Pass threshold on the worst relative error.
pub const FD_TOLERANCE: f64 = 1e-6;

/// One random (policy, batch, config) instance for a method.
#[derive(Debug, Clone)]
pub struct Instance {
    pub policy: TabularPolicy,
    pub reference: Option<TabularPolicy>,
    pub batch: Vec<PreferenceExample>,
    pub cfg: LossConfig,
    pub seed: u64,
}

/// Worst-case outcome of checking one method over many instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Seed of the instance attaining `max_rel_error`.
    pub worst_seed: u64,
}

impl MethodReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

/// Central finite differences of the batch loss through every logit.
///
/// `z_ref_override` must carry the base-policy KTO estimate so the numeric
/// gradient matches the detached analytic one; it is ignored by the other
/// methods.
pub fn finite_diff_batch_grad(
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    batch: &[PreferenceExample],
    cfg: &LossConfig,
    step: f64,
    z_ref_override: Option<f64>,
) -> Result<PolicyGradient, LossError> {
    let mut grad = PolicyGradient::zeros_like(policy);
    let mut perturbed = policy.clone();
    for i in 0..policy.logits().len() {
        let base = policy.logits()[i];
        perturbed.logits_mut()[i] = base + step;
        let plus = batch_loss(&perturbed, reference, batch, cfg, z_ref_override)?;
        perturbed.logits_mut()[i] = base - step;
        let minus = batch_loss(&perturbed, reference, batch, cfg, z_ref_override)?;
        perturbed.logits_mut()[i] = base;
        grad.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Worst per-component relative error `|a - n| / max(|a|, |n|, 1)`.
///
/// The unit floor measures near-zero components absolutely, which is what
/// central differences can actually resolve there.
pub fn max_rel_error(analytic: &PolicyGradient, numeric: &PolicyGradient) -> f64 {
    analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(a, n)| abs(a - n) / abs(*a).max(abs(*n)).max(1.0))
        .fold(0.0, f64::max)
}

fn random_sequence(rng: &mut SplitMix64, vocab: u32, min_len: usize, max_len: usize) -> TokenSequence {
    let len = min_len + rng.index(max_len - min_len + 1);
    let tokens = (0..len).map(|_| rng.index(vocab as usize) as u32).collect();
    TokenSequence::new(tokens, vocab).expect("tokens are in range")
}

fn random_policy(rng: &mut SplitMix64, vocab: u32, order: usize) -> TabularPolicy {
    let contexts = (vocab as usize).pow(order as u32);
    let logits = (0..contexts * vocab as usize)
        .map(|_| (rng.next_f64() - 0.5) * 4.0)
        .collect();
    TabularPolicy::from_logits(vocab, order, logits).expect("table shape is consistent")
}

fn random_cfg(rng: &mut SplitMix64, method: Method) -> LossConfig {
    let uniform = |rng: &mut SplitMix64, lo: f64, hi: f64| lo + (hi - lo) * rng.next_f64();
    match method {
        Method::Sft => LossConfig::sft(),
        Method::SimPer => {
            if rng.bernoulli(0.5) {
                LossConfig::simper()
            } else {
                LossConfig::simper_without_length_norm()
            }
        }
        Method::Dpo => LossConfig::dpo(uniform(rng, 0.05, 2.5)).expect("range is valid"),
        Method::Ipo => LossConfig::ipo(uniform(rng, 0.05, 1.0)).expect("range is valid"),
        Method::SimPo => LossConfig::simpo(uniform(rng, 0.5, 2.5), uniform(rng, 0.0, 1.6))
            .expect("range is valid"),
        Method::Kto => LossConfig::kto(
            uniform(rng, 0.05, 1.0),
            uniform(rng, 0.5, 1.5),
            uniform(rng, 0.5, 1.5),
        )
        .expect("range is valid"),
        Method::Cpo => LossConfig::cpo(uniform(rng, 0.05, 1.0), uniform(rng, 0.1, 2.0))
            .expect("range is valid"),
        Method::Slic => LossConfig::slic(uniform(rng, 0.1, 2.0), uniform(rng, 0.1, 2.0))
            .expect("range is valid"),
    }
}

fn build_instance(method: Method, seed: u64) -> Instance {
    let mut rng = SplitMix64::new(seed);
    let vocab = 2 + rng.index(4) as u32;
    let order = rng.index(2);
    let policy = random_policy(&mut rng, vocab, order);
    let reference = method
        .needs_reference()
        .then(|| random_policy(&mut rng, vocab, order));
    let n = 1 + rng.index(3);
    let batch = (0..n)
        .map(|_| {
            let prompt_len = rng.index(3);
            let prompt = if prompt_len == 0 {
                TokenSequence::empty(vocab)
            } else {
                random_sequence(&mut rng, vocab, prompt_len, prompt_len)
            };
            PreferenceExample::new(
                prompt,
                random_sequence(&mut rng, vocab, 1, 4),
                random_sequence(&mut rng, vocab, 1, 4),
            )
            .expect("responses are nonempty")
        })
        .collect();
    let cfg = random_cfg(&mut rng, method);
    Instance {
        policy,
        reference,
        batch,
        cfg,
        seed,
    }
}

/// Margin around SLiC's hinge kink inside which an instance is rediscarded:
/// central differences straddle the kink there and are meaningless.
const SLIC_KINK_CLEARANCE: f64 = 1e-3;

fn slic_clear_of_kink(instance: &Instance) -> bool {
    instance.batch.iter().all(|ex| {
        let chosen = instance
            .policy
            .eval_sequence(&ex.prompt, &ex.chosen)
            .expect("instance sequences match the policy");
        let rejected = instance
            .policy
            .eval_sequence(&ex.prompt, &ex.rejected)
            .expect("instance sequences match the policy");
        let hinge = instance.cfg.delta() - chosen.sum_logprob + rejected.sum_logprob;
        abs(hinge) > SLIC_KINK_CLEARANCE
    })
}

/// Deterministic random instance for `(method, seed)`.
pub fn random_instance(method: Method, seed: u64) -> Instance {
    let mut attempt_seed = seed;
    loop {
        let instance = build_instance(method, attempt_seed);
        if method != Method::Slic || slic_clear_of_kink(&instance) {
            return instance;
        }
        attempt_seed = attempt_seed.wrapping_add(0x9E37_79B9);
    }
}

/// Relative error of one instance's analytic gradient against the
/// finite-difference oracle.
pub fn check_instance(instance: &Instance) -> Result<f64, LossError> {
    let reference = instance.reference.as_ref();
    let (_, analytic) =
        batch_loss_and_grad(&instance.policy, reference, &instance.batch, &instance.cfg)?;
    let z_ref = if instance.cfg.method() == Method::Kto {
        Some(kto_batch_z_ref(
            &instance.policy,
            reference.expect("KTO instances carry a reference"),
            &instance.batch,
            instance.cfg.beta(),
        )?)
    } else {
        None
    };
    let numeric = finite_diff_batch_grad(
        &instance.policy,
        reference,
        &instance.batch,
        &instance.cfg,
        FD_STEP,
        z_ref,
    )?;
    Ok(max_rel_error(&analytic, &numeric))
}

/// Checks one method over `instances` random instances derived from
/// `base_seed`.
pub fn check_method(
    method: Method,
    instances: usize,
    base_seed: u64,
) -> Result<MethodReport, LossError> {
    let mut worst = 0.0f64;
    let mut worst_seed = base_seed;
    for i in 0..instances {
        let seed = base_seed.wrapping_add(i as u64);
        let instance = random_instance(method, seed);
        let err = check_instance(&instance)?;
        if err > worst {
            worst = err;
            worst_seed = seed;
        }
    }
    Ok(MethodReport {
        method,
        instances,
        max_rel_error: worst,
        worst_seed,
    })
}

/// Checks all eight losses; one report per method.
pub fn check_all(instances: usize, base_seed: u64) -> Result<Vec<MethodReport>, LossError> {
    Method::ALL
        .iter()
        .map(|&m| check_method(m, instances, base_seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_method_passes_a_quick_check() {
        for report in check_all(10, 1234).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel error {} at seed {}",
                report.method.name(),
                report.max_rel_error,
                report.worst_seed
            );
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let instance = random_instance(Method::Dpo, 7);
        let (_, mut analytic) = batch_loss_and_grad(
            &instance.policy,
            instance.reference.as_ref(),
            &instance.batch,
            &instance.cfg,
        )
        .unwrap();
        analytic.scale(-1.0);
        let numeric = finite_diff_batch_grad(
            &instance.policy,
            instance.reference.as_ref(),
            &instance.batch,
            &instance.cfg,
            FD_STEP,
            None,
        )
        .unwrap();
        assert!(max_rel_error(&analytic, &numeric) > FD_TOLERANCE);
    }

    #[test]
    fn instances_are_deterministic() {
        let a = random_instance(Method::SimPo, 42);
        let b = random_instance(Method::SimPo, 42);
        assert_eq!(a.policy.logits(), b.policy.logits());
        assert_eq!(a.batch, b.batch);
    }
}
