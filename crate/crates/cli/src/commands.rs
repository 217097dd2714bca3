//! The four experiment commands: `gen-data`, `train`, `diagnose`, and
//! `gradcheck`.
//!
//! Every command reads one flat config file and writes plain-text outputs
//! into the `--out` directory; identical config and seeds produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prefopt_core::datagen::{make_bimodal_target, build_dataset, DatagenError};
use prefopt_core::diagnostics::{
    exact_divergences, gradient_weights, histogram, spearman, DiagnosticsError,
};
use prefopt_core::gradcheck::{
    check_instance, finite_diff_batch_grad, max_rel_error, random_instance, MethodReport,
    FD_STEP, FD_TOLERANCE,
};
use prefopt_core::losses::{
    batch_loss_and_grad, kto_batch_z_ref, LossError, Method,
};
use prefopt_core::policy::PolicyError;
use prefopt_core::trainer::{train, TrainError, TraceRow};
use prefopt_core::{TabularPolicy, TokenSequence};

use crate::checkpoint::{save_policy, load_policy, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset_io::{read_dataset, write_dataset, DatasetIoError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetIoError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("data generation error: {0}")]
    Datagen(#[from] DatagenError),
    #[error("diagnostics error: {0}")]
    Diagnostics(#[from] DiagnosticsError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("training aborted: {0}")]
    Train(TrainError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("gradient check failed for {methods} (worst instance seed {worst_seed})")]
    GradcheckFailed { methods: String, worst_seed: u64 },
    #[error("loss evaluation error: {0}")]
    Loss(#[from] LossError),
}

impl CliError {
    /// Exit-code contract: 0 success, 1 check/run failure, 2 usage or
    /// config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradcheckFailed { .. } => 1,
            CliError::Train(TrainError::NonFinite { .. }) => 1,
            _ => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|source| CliError::Write {
        path: out.to_path_buf(),
        source,
    })
}

/// Generates a dataset file plus a sidecar manifest echoing the spec.
pub fn cmd_gen_data(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let spec = cfg.dataset_spec()?;
    ensure_out_dir(out)?;

    let target = make_bimodal_target(&spec)?;
    let examples = build_dataset(&target, &spec)?;
    write_dataset(&out.join("dataset.tsv"), &examples)?;

    let mut manifest = String::from("#prefopt-manifest v1\n");
    let _ = writeln!(manifest, "records={}", examples.len());
    let _ = writeln!(manifest, "seed={}", spec.rng_seed);
    let _ = writeln!(manifest, "vocab_size={}", spec.vocab_size);
    let _ = writeln!(manifest, "max_len={}", spec.max_len);
    let _ = writeln!(manifest, "mode_mass={}", spec.mode_mass);
    let _ = writeln!(manifest, "shared_token_rate={}", spec.shared_token_rate);
    let _ = writeln!(manifest, "support_size={}", target.support().len());
    write_file(&out.join("manifest.txt"), &manifest)?;

    println!(
        "gen-data: wrote {} examples (vocab {}, max_len {}) to {}",
        examples.len(),
        spec.vocab_size,
        spec.max_len,
        out.display()
    );
    Ok(())
}

pub const TRACE_HEADER: &str =
    "step,loss,avg_lp_chosen,avg_lp_rejected,margin,ppl_chosen,ppl_rejected,grad_norm";

fn trace_csv(trace: &[TraceRow]) -> String {
    let mut csv = String::from(TRACE_HEADER);
    csv.push('\n');
    for row in trace {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.step,
            row.loss,
            row.avg_lp_chosen,
            row.avg_lp_rejected,
            row.margin,
            row.ppl_chosen,
            row.ppl_rejected,
            row.grad_norm
        );
    }
    csv
}

/// Trains a fresh uniform policy on the configured dataset and writes the
/// trace CSV and final checkpoint.
///
/// The policy starts from uniform logits; reference-based methods freeze a
/// copy of that initialization as the reference.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let loss_cfg = cfg.loss_config()?;
    let train_cfg = cfg.train_config()?;
    let order = cfg.policy_order()?;
    let dataset = read_dataset(&cfg.dataset_path()?)?;
    if dataset.is_empty() {
        return Err(CliError::InvalidInput(
            "dataset file holds no examples".to_string(),
        ));
    }
    ensure_out_dir(out)?;

    let vocab = dataset[0].vocab_size();
    let initial = TabularPolicy::uniform(vocab, order)
        .map_err(|e| CliError::InvalidInput(e.to_string()))?;
    let reference = loss_cfg.method().needs_reference().then(|| initial.freeze());

    let (final_policy, trace) = train(initial, reference.as_ref(), &dataset, &loss_cfg, &train_cfg)?;

    write_file(&out.join("trace.csv"), &trace_csv(&trace))?;
    save_policy(&out.join("checkpoint.txt"), &final_policy)?;

    let last = trace.last().expect("trace always holds the initial row");
    println!(
        "train: {} for {} steps; final loss {} margin {} -> {}",
        loss_cfg.method().name(),
        train_cfg.steps,
        last.loss,
        last.margin,
        out.display()
    );
    Ok(())
}

fn optional_number(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Emits the gradient-weight table, perplexity histogram, Spearman scalar,
/// and, when the enumeration budget permits, the divergence report against
/// the configured target distribution.
pub fn cmd_diagnose(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let loss_cfg = cfg.loss_config()?;
    let bins = cfg.diag_bins()?;
    let policy = load_policy(&cfg.checkpoint_path()?)?;
    let dataset = read_dataset(&cfg.dataset_path()?)?;
    if dataset.is_empty() {
        return Err(CliError::InvalidInput(
            "dataset file holds no examples".to_string(),
        ));
    }
    ensure_out_dir(out)?;

    // Gradient-weight table. Weights are defined for DPO, SimPO, and
    // SimPER; for other methods the table is left empty.
    let mut weights_csv = String::from(
        "example,method,w_theta,d_theta,simper_weight_chosen,simper_weight_rejected,dpo_ratio\n",
    );
    let method = loss_cfg.method();
    if matches!(method, Method::Dpo | Method::SimPo | Method::SimPer) {
        // Reference convention matches cmd_train: the uniform initialization.
        let reference = method
            .needs_reference()
            .then(|| TabularPolicy::uniform(policy.vocab_size(), policy.context_order()))
            .transpose()
            .map_err(|e: PolicyError| CliError::InvalidInput(e.to_string()))?;
        for (i, example) in dataset.iter().enumerate() {
            let record = gradient_weights(&policy, reference.as_ref(), example, &loss_cfg)?;
            let (sw, sl) = record
                .simper_weights
                .map(|(w, l)| (Some(w), Some(l)))
                .unwrap_or((None, None));
            let _ = writeln!(
                weights_csv,
                "{},{},{},{},{},{},{}",
                i,
                method.name(),
                optional_number(record.w_theta),
                optional_number(record.d_theta),
                optional_number(sw),
                optional_number(sl),
                record.dpo_ratio
            );
        }
    } else {
        println!(
            "diagnose: gradient weights are not defined for {}; table left empty",
            method.name()
        );
    }
    write_file(&out.join("weights.csv"), &weights_csv)?;

    // Perplexity histogram and length/log-probability Spearman over the
    // chosen responses, scored with their own prompts.
    let mut perplexities = Vec::with_capacity(dataset.len());
    let mut lengths = Vec::with_capacity(dataset.len());
    let mut sum_logprobs = Vec::with_capacity(dataset.len());
    for example in &dataset {
        let stats = policy
            .eval_sequence(&example.prompt, &example.chosen)
            .map_err(DiagnosticsError::from)?;
        perplexities.push(stats.perplexity);
        lengths.push(example.chosen.len() as f64);
        sum_logprobs.push(stats.sum_logprob);
    }
    let mut hist_csv = String::from("bin_lo,bin_hi,count\n");
    for bin in histogram(&perplexities, bins)? {
        let _ = writeln!(hist_csv, "{},{},{}", bin.lo, bin.hi, bin.count);
    }
    write_file(&out.join("perplexity_histogram.csv"), &hist_csv)?;

    let rho = spearman(&lengths, &sum_logprobs)?;
    let mut spearman_csv = String::from("metric,value\n");
    let _ = writeln!(
        spearman_csv,
        "length_logprob_spearman,{}",
        rho.map(|v| v.to_string())
            .unwrap_or_else(|| "undefined".to_string())
    );
    write_file(&out.join("spearman.csv"), &spearman_csv)?;

    // Divergence against the configured target, in the EOS-terminated
    // space one step deeper than the longest target sequence.
    let spec = cfg.dataset_spec()?;
    if spec.vocab_size != policy.vocab_size() {
        return Err(CliError::InvalidInput(format!(
            "checkpoint vocab {} does not match data.vocab_size {}",
            policy.vocab_size(),
            spec.vocab_size
        )));
    }
    let horizon = spec.max_len + 1;
    let prompt = TokenSequence::empty(policy.vocab_size());
    match policy.enumerate_distribution(&prompt, horizon) {
        Err(PolicyError::BudgetExceeded { required, budget }) => {
            println!(
                "diagnose: divergence skipped, enumeration needs {required} entries (budget {budget})"
            );
        }
        Err(other) => return Err(CliError::Diagnostics(other.into())),
        Ok(policy_dist) => {
            let target = make_bimodal_target(&spec)?;
            let target_dist = target.to_enumerated(horizon)?;
            let report = exact_divergences(&target_dist, &policy_dist)?;
            let mut csv = String::from("tvd,kld,overflow_mass_target,overflow_mass_policy\n");
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                report.tvd, report.kld, report.overflow_mass_a, report.overflow_mass_b
            );
            write_file(&out.join("divergence.csv"), &csv)?;
        }
    }

    println!("diagnose: wrote reports to {}", out.display());
    Ok(())
}

/// Test fixture: flip the analytic gradient's sign for one method before
/// comparing against the finite-difference oracle, exercising the failure
/// path end to end. Reached only through the library API, never from the
/// command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    SignFlip(Method),
}

fn flipped_rel_error(instance: &prefopt_core::gradcheck::Instance) -> Result<f64, LossError> {
    let reference = instance.reference.as_ref();
    let (_, mut analytic) =
        batch_loss_and_grad(&instance.policy, reference, &instance.batch, &instance.cfg)?;
    analytic.scale(-1.0);
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

/// Finite-difference check of all eight losses; exits nonzero when any
/// method's worst relative error reaches the tolerance.
pub fn cmd_gradcheck(
    config_path: &Path,
    out: &Path,
    fault: Option<FaultInjection>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let instances = cfg.gradcheck_instances()?;
    let base_seed = cfg.gradcheck_seed()?;
    ensure_out_dir(out)?;

    let mut reports: Vec<MethodReport> = Vec::with_capacity(Method::ALL.len());
    for &method in &Method::ALL {
        let flip = fault == Some(FaultInjection::SignFlip(method));
        let mut worst = 0.0f64;
        let mut worst_seed = base_seed;
        for i in 0..instances {
            let seed = base_seed.wrapping_add(i as u64);
            let instance = random_instance(method, seed);
            let err = if flip {
                flipped_rel_error(&instance)?
            } else {
                check_instance(&instance)?
            };
            if err > worst {
                worst = err;
                worst_seed = seed;
            }
        }
        reports.push(MethodReport {
            method,
            instances,
            max_rel_error: worst,
            worst_seed,
        });
    }

    let mut csv = String::from("method,instances,max_rel_error,worst_seed,passed\n");
    for report in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            report.method.name(),
            report.instances,
            report.max_rel_error,
            report.worst_seed,
            report.passed()
        );
        println!(
            "gradcheck: {:6} max_rel_error={:<12.3e} worst_seed={} {}",
            report.method.name(),
            report.max_rel_error,
            report.worst_seed,
            if report.passed() { "PASS" } else { "FAIL" }
        );
    }
    write_file(&out.join("gradcheck_report.csv"), &csv)?;

    let failures: Vec<&MethodReport> = reports.iter().filter(|r| !r.passed()).collect();
    if let Some(worst) = failures
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    {
        return Err(CliError::GradcheckFailed {
            methods: failures
                .iter()
                .map(|r| r.method.name())
                .collect::<Vec<_>>()
                .join(", "),
            worst_seed: worst.worst_seed,
        });
    }
    println!(
        "gradcheck: all {} methods within {} on {} instances each",
        reports.len(),
        FD_TOLERANCE,
        instances
    );
    Ok(())
}
