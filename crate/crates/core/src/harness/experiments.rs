//! Experiment drivers: single training runs, paired reward-regime runs, r0
//! sweeps, the entropy-forecast check and the surrogate gradient check.
//!
//! Every driver writes into its own output directory and refuses to replace
//! existing files unless `overwrite` is set. Independent runs execute in
//! parallel; summaries are reduced serially afterwards.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecvgpo::{self, Granularity, ReshapeParams};
use crate::entropy_lab::{self, TheoremReport};
use crate::envs::Environment;
use crate::error::{LabError, Result};
use crate::grpo::{self, RolloutGroup, TrainConfig};
use crate::policy::{surrogate_gradient, surrogate_objective, FactoredPolicy, ReshapedAdvantage, Rollout, SurrogateConfig};
use crate::rewards::RewardBreakdown;
use crate::rng::{domain, stream, stream_seed};

use super::config::{EnvKind, ExperimentConfig, R0Arm};
use super::telemetry::{self, final_window_mean, StepRecord};

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const FINAL_SNAPSHOT_FILE: &str = "policy_final.txt";

pub fn snapshot_file(step: usize) -> String {
    format!("policy_step{step:06}.txt")
}

/// Training seed of the run started from master seed `master`.
pub fn run_seed(master: u64) -> u64 {
    stream_seed(master, &[domain::RUN])
}

/// Telemetry and policies of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub records: Vec<StepRecord>,
    pub initial: FactoredPolicy,
    pub final_policy: FactoredPolicy,
    /// `(step, policy after that step)` every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, FactoredPolicy)>,
}

/// Trains the environment's initial policy for `cfg.steps` steps, with the
/// initial policy as KL reference.
pub fn train(env: &dyn Environment, cfg: &TrainConfig, checkpoint_every: usize) -> Result<TrainingRun> {
    cfg.validate()?;
    let initial = env.initial_policy()?;
    let mut policy = initial.clone();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let (next, record) = grpo::train_step(&policy, &initial, env, cfg, step)?;
        policy = next;
        if !record.is_finite() {
            return Err(LabError::Precondition(format!("non-finite telemetry at step {step}")));
        }
        records.push(record);
        if checkpoint_every > 0 && step % checkpoint_every == 0 {
            checkpoints.push((step, policy.clone()));
        }
    }
    Ok(TrainingRun {
        records,
        initial,
        final_policy: policy,
        checkpoints,
    })
}

fn ensure_writable(paths: &[PathBuf], overwrite: bool) -> Result<()> {
    if !overwrite {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(LabError::OutputExists(p.clone()));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn run_files(out: &Path, steps: usize, checkpoint_every: usize) -> Vec<PathBuf> {
    let mut files = vec![out.join(TELEMETRY_FILE), out.join(snapshot_file(0)), out.join(FINAL_SNAPSHOT_FILE)];
    if checkpoint_every > 0 {
        files.extend((1..=steps).filter(|s| s % checkpoint_every == 0).map(|s| out.join(snapshot_file(s))));
    }
    files
}

fn write_run(run: &TrainingRun, out: &Path) -> Result<()> {
    write_file(&out.join(TELEMETRY_FILE), &telemetry::to_csv(&run.records))?;
    write_file(&out.join(snapshot_file(0)), &run.initial.to_snapshot())?;
    for (step, p) in &run.checkpoints {
        write_file(&out.join(snapshot_file(*step)), &p.to_snapshot())?;
    }
    write_file(&out.join(FINAL_SNAPSHOT_FILE), &run.final_policy.to_snapshot())
}

/// One training run of the configured environment with training seed
/// `run_seed(cfg.train.seed)`. Writes `telemetry.csv`, the initial snapshot
/// `policy_step000000.txt`, periodic checkpoints and `policy_final.txt`.
pub fn run_training(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<TrainingRun> {
    cfg.validate()?;
    let every = cfg.experiment.checkpoint_every;
    ensure_writable(&run_files(out, cfg.train.steps, every), overwrite)?;
    let env = cfg.env.build()?;
    let tcfg = TrainConfig {
        seed: run_seed(cfg.train.seed),
        ..cfg.train.clone()
    };
    let run = train(env.as_ref(), &tcfg, every)?;
    write_run(&run, out)?;
    Ok(run)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Across-seed standard error of the mean (sample standard deviation over
/// `sqrt(n)`); 0 for fewer than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Final-window statistics of one arm across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Exact policy entropy of each seed's initial policy.
    pub initial_entropy: Vec<f64>,
    /// Final-window mean exact entropy of each seed.
    pub final_entropy: Vec<f64>,
    pub initial_mean: f64,
    pub final_mean: f64,
    pub final_se: f64,
    pub final_eval_mean: f64,
    /// Post-warm-up steps whose seed-averaged numeric-token probability is
    /// below the seed-averaged other-token probability, as a fraction of the
    /// post-warm-up steps with any positive-advantage rollout.
    pub numeric_below_other: Option<f64>,
}

fn summarize(label: String, seeds: &[u64], runs: &[TrainingRun], final_window: f64, warmup: f64) -> ArmSummary {
    let initial_entropy: Vec<f64> = runs.iter().map(|r| r.initial.exact_policy_entropy()).collect();
    let column = |run: &TrainingRun, f: fn(&StepRecord) -> f64| -> Vec<f64> { run.records.iter().map(f).collect() };
    let final_entropy: Vec<f64> = runs
        .iter()
        .zip(&initial_entropy)
        .map(|(r, h0)| final_window_mean(&column(r, |s| s.entropy_exact), final_window).unwrap_or(*h0))
        .collect();
    let evals: Vec<f64> = runs
        .iter()
        .filter_map(|r| final_window_mean(&column(r, |s| s.eval_score), final_window))
        .collect();

    let steps = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let skip = (steps as f64 * warmup).ceil() as usize;
    let mut counted = 0usize;
    let mut below = 0usize;
    for k in skip..steps {
        let with_pos: Vec<&StepRecord> = runs
            .iter()
            .map(|r| &r.records[k])
            .filter(|s| s.positive_rollouts > 0)
            .collect();
        if with_pos.is_empty() {
            continue;
        }
        let n = with_pos.len() as f64;
        let numeric = with_pos.iter().map(|s| s.prob_numeric).sum::<f64>() / n;
        let other = with_pos.iter().map(|s| s.prob_other).sum::<f64>() / n;
        counted += 1;
        below += usize::from(numeric < other);
    }

    ArmSummary {
        label,
        seeds: seeds.to_vec(),
        initial_mean: mean(&initial_entropy),
        final_mean: mean(&final_entropy),
        final_se: standard_error(&final_entropy),
        final_eval_mean: if evals.is_empty() { f64::NAN } else { mean(&evals) },
        numeric_below_other: (counted > 0).then(|| below as f64 / counted as f64),
        initial_entropy,
        final_entropy,
    }
}

/// Runs every `(arm, seed)` pair in parallel and writes each run under
/// `out/<arm label>/seed_<seed>/`.
fn run_arms(
    arms: &[(String, Box<dyn Environment>, TrainConfig)],
    seeds: &[u64],
    out: &Path,
    overwrite: bool,
    checkpoint_every: usize,
) -> Result<Vec<Vec<TrainingRun>>> {
    let dir = |label: &str, seed: u64| out.join(label).join(format!("seed_{seed}"));
    let files: Vec<PathBuf> = arms
        .iter()
        .flat_map(|(label, _, cfg)| seeds.iter().flat_map(move |&s| run_files(&dir(label, s), cfg.steps, checkpoint_every)))
        .collect();
    ensure_writable(&files, overwrite)?;
    arms.par_iter()
        .map(|(label, env, cfg)| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let tcfg = TrainConfig {
                        seed: run_seed(seed),
                        ..cfg.clone()
                    };
                    let run = train(env.as_ref(), &tcfg, checkpoint_every)?;
                    write_run(&run, &dir(label, seed))?;
                    Ok(run)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub arms: Vec<ArmSummary>,
    /// Final grounding entropy over final reasoning entropy, when both arms
    /// are present.
    pub entropy_ratio: Option<f64>,
    /// Final over initial entropy of the reasoning arm.
    pub reasoning_retention: Option<f64>,
}

/// Matched runs of the configured reward regimes (same queries, vocabulary,
/// prior, hyperparameters and seeds). Writes per-run telemetry plus
/// `compare.json`.
pub fn run_compare_rewards(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<CompareReport> {
    cfg.validate()?;
    let x = &cfg.experiment;
    if x.seeds.len() < 2 {
        return Err(LabError::config("experiment.seeds", "comparisons need at least 2 seeds"));
    }
    if x.compare_arms.is_empty() {
        return Err(LabError::config("experiment.compare_arms", "need at least one arm"));
    }
    ensure_writable(&[out.join("compare.json")], overwrite)?;
    let arms: Vec<(String, Box<dyn Environment>, TrainConfig)> = x
        .compare_arms
        .iter()
        .map(|&k| Ok((k.name().to_string(), cfg.env.build_kind(k)?, cfg.train.clone())))
        .collect::<Result<_>>()?;
    let runs = run_arms(&arms, &x.seeds, out, overwrite, x.checkpoint_every)?;
    let summaries: Vec<ArmSummary> = arms
        .iter()
        .zip(&runs)
        .map(|((label, _, _), r)| summarize(label.clone(), &x.seeds, r, x.final_window, x.warmup))
        .collect();
    let find = |k: EnvKind| summaries.iter().find(|s| s.label == k.name());
    let reasoning = find(EnvKind::Reasoning);
    let report = CompareReport {
        entropy_ratio: find(EnvKind::Grounding).zip(reasoning).map(|(g, r)| g.final_mean / r.final_mean),
        reasoning_retention: reasoning.map(|r| r.final_mean / r.initial_mean),
        arms: summaries,
    };
    write_json(&out.join("compare.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub arms: Vec<ArmSummary>,
    /// Whether every positive-r0 arm sits below the `off` arm and every
    /// negative-r0 arm above it, each gap exceeding the larger of the two
    /// standard errors. Absent unless the sweep has an `off` arm and at
    /// least one arm of either sign.
    pub ordered: Option<bool>,
}

fn arm_dir(arm: &R0Arm) -> String {
    format!("r0_{}", arm.label())
}

/// Ordering verdict over `(arm, summary)` pairs.
pub fn sweep_verdict(arms: &[(R0Arm, ArmSummary)]) -> Option<bool> {
    let off = arms.iter().find(|(a, _)| *a == R0Arm::Off).map(|(_, s)| s)?;
    let signed = |positive: bool| -> Vec<&ArmSummary> {
        arms.iter()
            .filter(|(a, _)| matches!(a, R0Arm::Value(v) if (*v > 0.0) == positive))
            .map(|(_, s)| s)
            .collect()
    };
    let (pos, neg) = (signed(true), signed(false));
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let below = |lo: &ArmSummary, hi: &ArmSummary| hi.final_mean - lo.final_mean > lo.final_se.max(hi.final_se);
    Some(pos.iter().all(|p| below(p, off)) && neg.iter().all(|n| below(off, n)))
}

/// One arm per configured r0 value (`off` is plain GRPO) on the configured
/// environment. Writes per-run telemetry plus `sweep.json`.
pub fn run_sweep_r0(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<SweepReport> {
    cfg.validate()?;
    let x = &cfg.experiment;
    if x.r0_values.is_empty() {
        return Err(LabError::config("experiment.r0_values", "need at least one arm"));
    }
    ensure_writable(&[out.join("sweep.json")], overwrite)?;
    let arms: Vec<(String, Box<dyn Environment>, TrainConfig)> = x
        .r0_values
        .iter()
        .map(|a| {
            let tcfg = a.apply(&cfg.train);
            tcfg.validate()?;
            Ok((arm_dir(a), cfg.env.build()?, tcfg))
        })
        .collect::<Result<_>>()?;
    let runs = run_arms(&arms, &x.seeds, out, overwrite, x.checkpoint_every)?;
    let pairs: Vec<(R0Arm, ArmSummary)> = x
        .r0_values
        .iter()
        .zip(arms.iter().zip(&runs))
        .map(|(a, ((label, _, _), r))| (*a, summarize(label.clone(), &x.seeds, r, x.final_window, x.warmup)))
        .collect();
    let report = SweepReport {
        ordered: sweep_verdict(&pairs),
        arms: pairs.into_iter().map(|(_, s)| s).collect(),
    };
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}

/// Forecast check at `experiment.theorem_eta` and half of it over
/// `experiment.theorem_instances` random instances. Writes `theorem.json`.
pub fn run_verify_theorem(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<TheoremReport> {
    cfg.validate()?;
    let path = out.join("theorem.json");
    ensure_writable(&[path.clone()], overwrite)?;
    let x = &cfg.experiment;
    let report = entropy_lab::verify_theorem(x.theorem_instances, x.theorem_eta, cfg.train.seed)?;
    write_json(&path, &report)?;
    Ok(report)
}

/// Finite-difference step of the gradient check.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Instances with a clip boundary closer than this (in ratio units) are
/// skipped: the surrogate is not differentiable there.
pub const KINK_MARGIN: f64 = 1e-3;
/// Lower bound on the error denominator. Groups whose rollouts coincide have
/// an exactly zero gradient, and central differences then return pure
/// round-off (about 1e-12) that would otherwise read as a relative error of 1.
pub const GRADCHECK_SCALE_FLOOR: f64 = 1e-6;

/// One objective variant of the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub beta: f64,
    /// `None` is plain GRPO.
    pub reshape: Option<Granularity>,
}

impl GradcheckCase {
    pub fn all() -> Vec<Self> {
        let mut cases = Vec::new();
        for beta in [0.0, 0.04] {
            for reshape in [None, Some(Granularity::Sequence), Some(Granularity::Token)] {
                cases.push(Self { beta, reshape });
            }
        }
        cases
    }

    pub fn label(&self) -> String {
        let r = self.reshape.map_or("grpo", |g| g.name());
        format!("beta={} reshape={r}", self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCaseResult {
    pub case: GradcheckCase,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub step: f64,
    pub cases: Vec<GradcheckCaseResult>,
    pub max_rel_error: f64,
}

/// Random policy, reference and standardized (optionally reshaped) group
/// for one gradient-check instance. The sampling snapshot is a perturbation
/// of the current policy so ratios differ from 1 and clipping is exercised.
pub fn gradcheck_instance(seed: u64, index: usize, case: &GradcheckCase) -> Result<(FactoredPolicy, FactoredPolicy, RolloutGroup)> {
    let mut rng = stream(seed, &[domain::GRADCHECK, index as u64]);
    let q = rng.gen_range(1..=2);
    let l = rng.gen_range(1..=3);
    let v = rng.gen_range(2..=5);
    let n = rng.gen_range(2..=6);
    let mut normal = |scale: f64, count: usize| -> Vec<f64> {
        (0..count).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let base = normal(1.0, q * l * v);
    let old_noise = normal(0.3, q * l * v);
    let ref_noise = normal(0.5, q * l * v);
    let policy = FactoredPolicy::from_logits(q, l, v, base.clone())?;
    let old = FactoredPolicy::from_logits(q, l, v, base.iter().zip(&old_noise).map(|(a, b)| a + b).collect())?;
    let reference = FactoredPolicy::from_logits(q, l, v, base.iter().zip(&ref_noise).map(|(a, b)| a + b).collect())?;

    let mut rng = stream(seed, &[domain::GRADCHECK, index as u64, 1]);
    let query = rng.gen_range(0..q);
    let rollouts: Vec<Rollout> = (0..n)
        .map(|_| {
            let mut r = old.sample_rollout(query, &mut rng);
            policy.refresh_logprobs(&mut r);
            r.reward = RewardBreakdown::accuracy_only(rng.gen_range(0.0..1.0));
            r
        })
        .collect();
    let mut group = RolloutGroup::from_rollouts(query, rollouts);
    group.standardize(1e-8)?;
    if let Some(granularity) = case.reshape {
        let params = ReshapeParams {
            r0: if rng.gen_bool(0.5) { rng.gen_range(2.0..20.0) } else { -rng.gen_range(2.0..60.0) },
            l0: rng.gen_range(1.5..30.0),
            delta: f64::INFINITY,
            granularity,
        };
        ecvgpo::reshape_group(&mut group, &params)?;
    }
    Ok((policy, reference, group))
}

fn near_kink(policy: &FactoredPolicy, group: &RolloutGroup, epsilon: f64) -> bool {
    let close = |ratio: f64| [1.0 - epsilon, 1.0 + epsilon].iter().any(|b| (ratio - b).abs() < KINK_MARGIN);
    group.rollouts.iter().any(|r| {
        let token_ratios: Vec<f64> = (0..r.len())
            .map(|t| (policy.token_logprob(r.query, t, r.tokens[t]) - r.old_logprobs[t]).exp())
            .collect();
        match r.reshaped {
            Some(ReshapedAdvantage::Token(_)) => token_ratios.iter().any(|&x| close(x)),
            _ => close(token_ratios.iter().product()),
        }
    })
}

/// Normwise relative error `|analytic - numeric|_inf / max(|analytic|_inf,
/// |numeric|_inf, GRADCHECK_SCALE_FLOOR)` of the surrogate gradient against central differences, or
/// `None` when the instance sits on a clip boundary.
pub fn gradcheck_error(
    policy: &FactoredPolicy,
    reference: &FactoredPolicy,
    group: &RolloutGroup,
    cfg: &SurrogateConfig,
    h: f64,
) -> Result<Option<f64>> {
    if near_kink(policy, group, cfg.epsilon) {
        return Ok(None);
    }
    let analytic = surrogate_gradient(policy, reference, group, cfg)?;
    let mut numeric = Vec::with_capacity(analytic.values().len());
    let mut probe = policy.clone();
    let (q, l, _) = policy.shape();
    for qi in 0..q {
        for t in 0..l {
            for v in 0..policy.vocab_size() {
                let x0 = probe.logits(qi, t)[v];
                let mut at = |x: f64| -> Result<f64> {
                    probe.logits_mut(qi, t)[v] = x;
                    let mut g = group.clone();
                    for r in &mut g.rollouts {
                        probe.refresh_logprobs(r);
                    }
                    surrogate_objective(&probe, reference, &g, cfg)
                };
                let d = (at(x0 + h)? - at(x0 - h)?) / (2.0 * h);
                probe.logits_mut(qi, t)[v] = x0;
                numeric.push(d);
            }
        }
    }
    let diff = analytic
        .values()
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.max_abs().max(numeric.iter().fold(0.0f64, |m, n| m.max(n.abs())));
    Ok(Some(diff / scale.max(GRADCHECK_SCALE_FLOOR)))
}

/// Checks the analytic surrogate gradient against central differences on
/// `experiment.gradcheck_instances` random instances for every
/// [`GradcheckCase`]. Writes `gradcheck.json`.
pub fn run_gradcheck(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<GradcheckReport> {
    cfg.validate()?;
    let path = out.join("gradcheck.json");
    ensure_writable(&[path.clone()], overwrite)?;
    let report = gradcheck(cfg.experiment.gradcheck_instances, cfg.train.epsilon, cfg.train.seed)?;
    write_json(&path, &report)?;
    Ok(report)
}

/// In-memory gradient check; see [`run_gradcheck`].
pub fn gradcheck(instances: usize, epsilon: f64, seed: u64) -> Result<GradcheckReport> {
    let cases: Vec<GradcheckCaseResult> = GradcheckCase::all()
        .into_par_iter()
        .map(|case| {
            let scfg = SurrogateConfig { epsilon, beta: case.beta };
            let errors: Vec<Option<f64>> = (0..instances)
                .into_par_iter()
                .map(|i| {
                    let (p, r, g) = gradcheck_instance(seed, i, &case)?;
                    gradcheck_error(&p, &r, &g, &scfg, GRADCHECK_STEP)
                })
                .collect::<Result<_>>()?;
            let checked: Vec<f64> = errors.iter().flatten().copied().collect();
            Ok(GradcheckCaseResult {
                case,
                checked: checked.len(),
                skipped: instances - checked.len(),
                max_rel_error: checked.iter().fold(0.0f64, |m, &e| m.max(e)),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradcheckReport {
        instances,
        step: GRADCHECK_STEP,
        max_rel_error: cases.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error)),
        cases,
    })
}
