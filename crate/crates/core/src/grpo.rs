//! Group rollouts, advantage standardization and the GRPO update step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecvgpo::{self, ReshapeParams};
use crate::entropy_lab;
use crate::envs::{evaluate_policy, Environment, EvalMode};
use crate::error::{LabError, Result};
use crate::harness::telemetry::{StepRecord, HIGH_ENTROPY_FACTOR};
use crate::policy::{categorical_kl, surrogate_gradient, FactoredPolicy, LogitGradient, Rollout, SurrogateConfig};
use crate::rng::{domain, stream};

/// The N rollouts of one query plus their reward statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query: usize,
    pub rollouts: Vec<Rollout>,
    /// Per-rollout objective weights; `None` means `1/N` each.
    pub weights: Option<Vec<f64>>,
    pub reward_mean: f64,
    /// Population standard deviation of the rewards.
    pub reward_std: f64,
    /// Square root of the summed squared deviations (no `1/N`).
    pub r_std: f64,
    pub gate_open: bool,
}

impl RolloutGroup {
    /// Wraps rollouts whose rewards are already set and computes the group
    /// statistics. Advantages are left untouched.
    pub fn from_rollouts(query: usize, rollouts: Vec<Rollout>) -> Self {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
        let n = rewards.len().max(1) as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
        Self {
            query,
            rollouts,
            weights: None,
            reward_mean: mean,
            reward_std: (ss / n).sqrt(),
            r_std: ss.sqrt(),
            gate_open: false,
        }
    }

    /// One single-token rollout per action of state `query`, weighted by its
    /// probability, so the objective becomes the exact expectation over
    /// actions. Used to compare against tabular policy-gradient updates.
    pub fn enumerated(policy: &FactoredPolicy, query: usize, advantages: &[f64]) -> Self {
        assert_eq!(policy.positions(), 1, "enumerated groups need single-step policies");
        let logp = policy.log_probs(query, 0);
        let rollouts = advantages
            .iter()
            .enumerate()
            .map(|(a, &adv)| {
                let mut r = Rollout::new(query, vec![a], vec![logp[a]]);
                r.advantage = adv;
                r
            })
            .collect();
        let mut group = Self::from_rollouts(query, rollouts);
        group.weights = Some(logp.iter().map(|lp| lp.exp()).collect());
        group
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.rollouts.len() as f64,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward.total).collect()
    }

    /// Replaces every advantage with its group-standardized reward.
    pub fn standardize(&mut self, std_floor: f64) -> Result<()> {
        let adv = standardize_advantages(&self.rewards(), std_floor)?;
        for (r, a) in self.rollouts.iter_mut().zip(adv) {
            r.advantage = a;
        }
        Ok(())
    }
}

/// `(r_i - mean) / popstd`, or all zeros when `popstd <= std_floor`.
pub fn standardize_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LabError::InvalidArgument(format!(
            "advantage standardization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std <= std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `sqrt(sum_i (r_i - mean)^2)`, without the `1/N` normalization.
pub fn reward_std_gate(rewards: &[f64]) -> f64 {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>().sqrt()
}

/// Exact `sum_t KL(pi(.|q,t) || pi_ref(.|q,t))`.
pub fn kl_to_reference(policy: &FactoredPolicy, reference: &FactoredPolicy, query: usize) -> Result<f64> {
    policy.same_shape(reference)?;
    let kl: f64 = (0..policy.positions())
        .map(|t| categorical_kl(policy.logits(query, t), reference.logits(query, t)).0)
        .sum();
    if !kl.is_finite() {
        return Err(LabError::Precondition(format!("KL to reference is not finite for query {query}")));
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rollouts: usize,
    pub temperature: f64,
    pub iterations: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Queries per step; 0 means every query.
    pub queries_per_batch: usize,
    pub reshape_enabled: bool,
    pub reshape: ReshapeParams,
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rollouts: 8,
            temperature: 1.0,
            iterations: 1,
            beta: 0.04,
            epsilon: 0.2,
            learning_rate: 0.1,
            steps: 200,
            queries_per_batch: 0,
            reshape_enabled: false,
            reshape: ReshapeParams::default(),
            std_floor: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts < 2 {
            return Err(LabError::config("train.rollouts", "need at least 2 rollouts per group"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LabError::config("train.temperature", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(LabError::config("train.iterations", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::config("train.learning_rate", "must be non-negative"));
        }
        if !(self.std_floor >= 0.0) {
            return Err(LabError::config("train.std_floor", "must be non-negative"));
        }
        let prefix = |e: LabError| match e {
            LabError::InvalidConfig { key, reason } => LabError::config(format!("train.{key}"), reason),
            other => other,
        };
        self.surrogate().validate().map_err(prefix)?;
        if self.reshape_enabled {
            self.reshape.validate().map_err(prefix)?;
        } else {
            self.reshape.validate_bounds().map_err(prefix)?;
        }
        Ok(())
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            epsilon: self.epsilon,
            beta: self.beta,
        }
    }

    /// Query indices trained at `step`; batches rotate through the query set.
    pub fn batch(&self, step: usize, queries: usize) -> Vec<usize> {
        if self.queries_per_batch == 0 || self.queries_per_batch >= queries {
            return (0..queries).collect();
        }
        let b = self.queries_per_batch;
        (0..b).map(|i| (step * b + i) % queries).collect()
    }
}

/// Samples `cfg.rollouts` outputs for `query` from the frozen snapshot and
/// scores them. Rollout `i` draws tokens and reward noise from the stream
/// keyed by `(seed, step, query, i)`.
pub fn collect_group(
    policy: &FactoredPolicy,
    query: usize,
    env: &dyn Environment,
    cfg: &TrainConfig,
    step: usize,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let rollouts: Vec<Rollout> = (0..cfg.rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, &[domain::ROLLOUT, step as u64, query as u64, i as u64]);
            let mut r = policy.sample_rollout(query, &mut rng);
            r.reward = env.reward(query, &r.tokens, &mut rng);
            r
        })
        .collect();
    let mut group = RolloutGroup::from_rollouts(query, rollouts);
    group.gate_open = group.r_std < cfg.reshape.delta;
    Ok(group)
}

/// Collect, standardize and (optionally) reshape one group.
pub fn prepare_group(
    policy: &FactoredPolicy,
    query: usize,
    env: &dyn Environment,
    cfg: &TrainConfig,
    step: usize,
) -> Result<RolloutGroup> {
    let mut group = collect_group(policy, query, env, cfg, step)?;
    group.standardize(cfg.std_floor)?;
    if cfg.reshape_enabled {
        ecvgpo::reshape_group(&mut group, &cfg.reshape)?;
    }
    Ok(group)
}

/// One optimization step: every batch query gets a group from the frozen
/// snapshot, then `iterations` gradient-ascent updates are committed against
/// that snapshot. `step` is 1-based and keys the random streams.
pub fn train_step(
    policy: &FactoredPolicy,
    reference: &FactoredPolicy,
    env: &dyn Environment,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(FactoredPolicy, StepRecord)> {
    cfg.validate()?;
    policy.same_shape(reference)?;
    let snapshot = policy.clone().with_temperature(cfg.temperature)?;
    let batch = cfg.batch(step, policy.queries());
    let mut groups: Vec<RolloutGroup> = batch
        .par_iter()
        .map(|&q| prepare_group(&snapshot, q, env, cfg, step))
        .collect::<Result<_>>()?;

    let scfg = cfg.surrogate();
    let mut current = policy.clone();
    for _ in 0..cfg.iterations {
        let grads: Vec<LogitGradient> = groups
            .par_iter()
            .map(|g| surrogate_gradient(&current, reference, g, &scfg))
            .collect::<Result<_>>()?;
        let mut total = LogitGradient::zeros_like(&current);
        for g in &grads {
            total.add_assign(g);
        }
        current.apply_ascent(&total, cfg.learning_rate)?;
    }
    for r in groups.iter_mut().flat_map(|g| g.rollouts.iter_mut()) {
        current.refresh_logprobs(r);
    }

    let record = step_record(step, &current, reference, env, &groups)?;
    Ok((current, record))
}

fn step_record(
    step: usize,
    policy: &FactoredPolicy,
    reference: &FactoredPolicy,
    env: &dyn Environment,
    groups: &[RolloutGroup],
) -> Result<StepRecord> {
    let rollouts: Vec<Rollout> = groups.iter().flat_map(|g| g.rollouts.iter().cloned()).collect();
    let n_groups = groups.len().max(1) as f64;
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };

    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
    let positive: Vec<&Rollout> = rollouts.iter().filter(|r| r.advantage > 0.0).collect();
    let self_info: Vec<f64> = positive
        .iter()
        .map(|r| ecvgpo::self_information_sequence(r))
        .collect::<Result<_>>()?;
    let class_probs = entropy_lab::token_class_probability(&rollouts, env.vocab());
    let kls: Vec<f64> = (0..policy.queries())
        .map(|q| kl_to_reference(policy, reference, q))
        .collect::<Result<_>>()?;
    let high = entropy_lab::high_entropy_token_report(policy, &env.slot_classes(), HIGH_ENTROPY_FACTOR)?;
    let eval = evaluate_policy(env, policy, EvalMode::Greedy)?;

    Ok(StepRecord {
        step,
        entropy_exact: policy.exact_policy_entropy(),
        entropy_sampled: crate::policy::sampled_policy_entropy(&rollouts)?,
        reward_mean: mean(&rewards),
        reward_std: groups.iter().map(|g| g.reward_std).sum::<f64>() / n_groups,
        r_std: groups.iter().map(|g| g.r_std).sum::<f64>() / n_groups,
        gate_open_frac: groups.iter().filter(|g| g.gate_open).count() as f64 / n_groups,
        self_info_pos: mean(&self_info),
        kl_ref: mean(&kls),
        prob_numeric: class_probs.and_then(|c| c.numeric).unwrap_or(0.0),
        prob_other: class_probs.and_then(|c| c.other).unwrap_or(0.0),
        positive_rollouts: positive.len(),
        high_entropy_count: high.flagged,
        eval_score: eval.mean_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn standardize_examples() {
        let a = standardize_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let expected = [1.7320508075688772, -0.5773502691896258, -0.5773502691896258, -0.5773502691896258];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(standardize_advantages(&[1.0, 0.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        assert_eq!(standardize_advantages(&[0.3; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert!(standardize_advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn r_std_examples() {
        assert!((reward_std_gate(&[1.0, 0.0, 0.0, 0.0]) - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(reward_std_gate(&[2.0, 2.0, 2.0]), 0.0);
        assert!((reward_std_gate(&[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = FactoredPolicy::from_logits(1, 1, 2, vec![9f64.ln(), 0.0]).unwrap();
        let r = FactoredPolicy::zeros(1, 1, 2);
        let kl = kl_to_reference(&p, &r, 0).unwrap();
        assert!((kl - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-12);
        assert!((kl - 0.36806).abs() < 1e-5);
        assert_eq!(kl_to_reference(&p, &p, 0).unwrap(), 0.0);
        assert!(kl_to_reference(&p, &FactoredPolicy::zeros(1, 1, 3), 0).is_err());
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = TrainConfig { rollouts: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(LabError::InvalidConfig { key, .. }) if key == "train.rollouts"));
        let bad = TrainConfig { epsilon: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(LabError::InvalidConfig { key, .. }) if key == "train.epsilon"));
        let mut bad = TrainConfig { reshape_enabled: true, ..Default::default() };
        bad.reshape.r0 = 0.5;
        assert!(matches!(bad.validate(), Err(LabError::InvalidConfig { key, .. }) if key == "train.r0"));
        bad.reshape_enabled = false;
        assert!(bad.validate().is_ok());
    }

    #[test]
    fn batches_rotate() {
        let cfg = TrainConfig { queries_per_batch: 3, ..Default::default() };
        assert_eq!(cfg.batch(0, 8), vec![0, 1, 2]);
        assert_eq!(cfg.batch(3, 8), vec![1, 2, 3]);
        assert_eq!(TrainConfig::default().batch(5, 4), vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn standardized_moments(rewards in proptest::collection::vec(-10.0f64..10.0, 2..16)) {
            let a = standardize_advantages(&rewards, 1e-8).unwrap();
            let n = a.len() as f64;
            let popstd = reward_std_gate(&rewards) / n.sqrt();
            if popstd > 1e-8 {
                let m = a.iter().sum::<f64>() / n;
                let sd = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() <= 1e-9);
                prop_assert!((sd - 1.0).abs() <= 1e-6);
            } else {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn affine_reward_invariance(seed in 0u64..500, shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let mut rng = stream(seed, &[]);
            let rewards: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
            let base = standardize_advantages(&rewards, 1e-8).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            for (x, y) in base.iter().zip(standardize_advantages(&shifted, 1e-8).unwrap()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            for (x, y) in base.iter().zip(standardize_advantages(&scaled, 1e-8).unwrap()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
