//! Entropy diagnostics.
//!
//! For a tabular softmax policy updated by vanilla policy gradient with
//! advantages centered under the policy, the entropy at state `s` changes by
//!
//! ```text
//! H(pi_{k+1}|s) - H(pi_k|s) ~= -eta * Cov_{a~pi}(log pi(a|s), pi(a|s) * A(s,a))
//! ```
//!
//! to first order in `eta`. This module computes that forecast, applies the
//! matching logit update, and measures the remainder against exact entropy
//! recomputation. It also hosts the near-optimal set (degeneracy) report and
//! the token-level entropy and probability diagnostics used in telemetry.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{LabError, Result};
use crate::policy::{FactoredPolicy, Rollout, TabularPolicy};
use crate::rng::{domain, stream};
use crate::vocab::{TokenClass, TokenId, Vocabulary};

/// Tolerance on `sum_a pi(a|s) A(s,a)` for advantages to count as centered.
pub const CENTERING_TOLERANCE: f64 = 1e-6;

fn check_advantages(policy: &TabularPolicy, state: usize, advantages: &[f64]) -> Result<Vec<f64>> {
    if state >= policy.states() {
        return Err(LabError::InvalidArgument(format!("state {state} out of range")));
    }
    if advantages.len() != policy.actions() {
        return Err(LabError::ShapeMismatch(format!(
            "{} advantages for {} actions",
            advantages.len(),
            policy.actions()
        )));
    }
    Ok(policy.probs(state))
}

/// `Cov_{a~w}(x, y)` with weights `w` summing to one.
fn weighted_cov(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let ex: f64 = w.iter().zip(x).map(|(p, v)| p * v).sum();
    let ey: f64 = w.iter().zip(y).map(|(p, v)| p * v).sum();
    w.iter().zip(x.iter().zip(y)).map(|(p, (a, b))| p * (a - ex) * (b - ey)).sum()
}

/// First-order forecast `-eta * Cov_{a~pi}(log pi, pi * A)`.
///
/// Rejects advantages that are not centered under the policy, since the
/// forecast assumes `sum_a pi(a|s) A(s,a) = 0`.
pub fn predict_entropy_change(policy: &TabularPolicy, state: usize, advantages: &[f64], eta: f64) -> Result<f64> {
    let probs = check_advantages(policy, state, advantages)?;
    let mean: f64 = probs.iter().zip(advantages).map(|(p, a)| p * a).sum();
    if mean.abs() > CENTERING_TOLERANCE {
        return Err(LabError::Precondition(format!(
            "advantages are not centered under the policy (mean {mean:e})"
        )));
    }
    let logp = policy.log_probs(state);
    let weighted: Vec<f64> = probs.iter().zip(advantages).map(|(p, a)| p * a).collect();
    Ok(-eta * weighted_cov(&probs, &logp, &weighted))
}

/// `theta[s][a] += eta * pi(a|s) * A(s,a)`; other states are untouched.
pub fn vpg_logit_update(policy: &TabularPolicy, state: usize, advantages: &[f64], eta: f64) -> Result<TabularPolicy> {
    let probs = check_advantages(policy, state, advantages)?;
    let mut next = policy.clone();
    for ((l, p), a) in next.logits_mut(state).iter_mut().zip(&probs).zip(advantages) {
        *l += eta * p * a;
    }
    Ok(next)
}

/// Shifts `advantages` so that their mean under `probs` is zero.
pub fn center_advantages(probs: &[f64], advantages: &mut [f64]) {
    let mean: f64 = probs.iter().zip(advantages.iter()).map(|(p, a)| p * a).sum();
    for a in advantages.iter_mut() {
        *a -= mean;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyForecast {
    pub state: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub predicted_change: f64,
    pub abs_error: f64,
    pub eta: f64,
}

impl EntropyForecast {
    pub fn actual_change(&self) -> f64 {
        self.entropy_after - self.entropy_before
    }
}

/// Forecast, apply one VPG update, and compare with the exact new entropy.
pub fn forecast(policy: &TabularPolicy, state: usize, advantages: &[f64], eta: f64) -> Result<EntropyForecast> {
    let predicted = predict_entropy_change(policy, state, advantages, eta)?;
    let before = policy.entropy(state);
    let after = vpg_logit_update(policy, state, advantages, eta)?.entropy(state);
    Ok(EntropyForecast {
        state,
        entropy_before: before,
        entropy_after: after,
        predicted_change: predicted,
        abs_error: (after - before - predicted).abs(),
        eta,
    })
}

/// A random single-state instance: 2..=10 actions, standard-normal logits,
/// advantages uniform in [-5, 5] then centered (so |A| <= 10).
pub fn random_instance<R: Rng>(rng: &mut R) -> (TabularPolicy, Vec<f64>) {
    let actions = rng.gen_range(2..=10);
    let logits: Vec<f64> = (0..actions).map(|_| rng.sample(StandardNormal)).collect();
    let policy = TabularPolicy::new(1, actions, logits).expect("finite logits");
    let mut adv: Vec<f64> = (0..actions).map(|_| rng.gen_range(-5.0..5.0)).collect();
    center_advantages(&policy.probs(0), &mut adv);
    (policy, adv)
}

/// Two actions with `pi = (p, 1-p)` and centered advantages of spread `gap`.
/// With `favour_likely` the more probable action gets the higher advantage.
pub fn two_action_instance(p: f64, gap: f64, favour_likely: bool) -> (TabularPolicy, Vec<f64>) {
    let policy = TabularPolicy::new(1, 2, vec![(p / (1.0 - p)).ln(), 0.0]).expect("finite logits");
    let probs = policy.probs(0);
    let sign = if favour_likely { 1.0 } else { -1.0 };
    let mut adv = vec![sign * gap, 0.0];
    center_advantages(&probs, &mut adv);
    (policy, adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub eta: f64,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub mean_abs_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub instances: usize,
    pub seed: u64,
    pub full: ErrorStats,
    pub half: ErrorStats,
    /// `mean error at eta / mean error at eta/2`; about 4 for a second-order
    /// remainder.
    pub decay_ratio: f64,
}

fn error_stats(forecasts: &[EntropyForecast], eta: f64) -> ErrorStats {
    let n = forecasts.len() as f64;
    ErrorStats {
        eta,
        mean_abs_error: forecasts.iter().map(|f| f.abs_error).sum::<f64>() / n,
        max_abs_error: forecasts.iter().fold(0.0, |m, f| m.max(f.abs_error)),
        mean_abs_change: forecasts.iter().map(|f| f.actual_change().abs()).sum::<f64>() / n,
    }
}

/// Checks the entropy-change forecast on `instances` random tabular
/// instances at `eta` and `eta / 2`.
pub fn verify_theorem(instances: usize, eta: f64, seed: u64) -> Result<TheoremReport> {
    if instances < 10 {
        return Err(LabError::InvalidArgument(format!("need at least 10 instances, got {instances}")));
    }
    let pairs: Vec<(EntropyForecast, EntropyForecast)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let (policy, adv) = random_instance(&mut stream(seed, &[domain::THEOREM, i as u64]));
            Ok((forecast(&policy, 0, &adv, eta)?, forecast(&policy, 0, &adv, eta / 2.0)?))
        })
        .collect::<Result<_>>()?;
    let full: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let half: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let (full, half) = (error_stats(&full, eta), error_stats(&half, eta / 2.0));
    let decay_ratio = if half.mean_abs_error > 0.0 {
        full.mean_abs_error / half.mean_abs_error
    } else {
        f64::NAN
    };
    Ok(TheoremReport {
        instances,
        seed,
        full,
        half,
        decay_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationLimit {
    /// Maximum number of answers to enumerate exhaustively.
    pub cap: usize,
    /// When set, answer spaces above `cap` are sampled (`cap` uniform draws
    /// from this seed) instead of rejected.
    pub sample_seed: Option<u64>,
}

impl Default for EnumerationLimit {
    fn default() -> Self {
        Self {
            cap: 1_000_000,
            sample_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub query: usize,
    pub delta_adv: f64,
    pub candidates: usize,
    pub sampled: bool,
    pub max_reward: f64,
    /// Probability-weighted mean reward; advantages are `reward - baseline`.
    pub baseline: f64,
    /// Answer tuples in the near-optimal set, in enumeration order.
    pub near_optimal: Vec<Vec<u32>>,
    pub m: usize,
    pub mean_advantage: f64,
    pub max_advantage: f64,
    pub mean_probability: f64,
    pub inverse_m: f64,
}

fn decode_candidate(mut index: usize, base: usize, slots: usize) -> Vec<u32> {
    let mut digits = vec![0u32; slots];
    for d in digits.iter_mut().rev() {
        *d = (index % base) as u32;
        index /= base;
    }
    digits
}

/// Enumerates every numeric answer in the environment's answer slots (other
/// slots hold the reference tokens), scores each with the noise-averaged
/// reward, and collects the answers whose advantage is within `delta_adv`
/// of the best.
pub fn degeneracy_report(
    env: &dyn Environment,
    policy: &FactoredPolicy,
    query: usize,
    delta_adv: f64,
    limit: EnumerationLimit,
) -> Result<DegeneracyReport> {
    if !(delta_adv >= 0.0) {
        return Err(LabError::InvalidArgument("delta_adv must be non-negative".into()));
    }
    if query >= env.num_queries() {
        return Err(LabError::InvalidArgument(format!("query {query} out of range")));
    }
    let vocab = env.vocab();
    let slots = env.answer_slots();
    let base = vocab.max_numeric() as usize + 1;
    let total = u32::try_from(slots.len())
        .ok()
        .and_then(|k| base.checked_pow(k))
        .unwrap_or(usize::MAX);
    let (indices, sampled): (Vec<usize>, bool) = if total <= limit.cap {
        ((0..total).collect(), false)
    } else if let Some(seed) = limit.sample_seed {
        let mut rng = stream(seed, &[query as u64]);
        ((0..limit.cap).map(|_| rng.gen_range(0..total)).collect(), true)
    } else {
        return Err(LabError::InvalidArgument(format!(
            "answer space of {total} exceeds enumeration cap {} (enable sampling)",
            limit.cap
        )));
    };

    let reference = env.reference_sequence(query);
    let slot_logprobs: Vec<Vec<f64>> = slots.iter().map(|&t| policy.log_probs(query, t)).collect();
    let scored: Vec<(f64, f64)> = indices
        .par_iter()
        .map(|&idx| {
            let digits = decode_candidate(idx, base, slots.len());
            let mut seq = reference.clone();
            let mut logp = 0.0;
            for (k, (&t, &d)) in slots.iter().zip(&digits).enumerate() {
                seq[t] = vocab.number(d);
                logp += slot_logprobs[k][seq[t]];
            }
            (env.expected_reward(query, &seq), logp.exp())
        })
        .collect();

    let mass: f64 = scored.iter().map(|s| s.1).sum();
    let baseline = if mass > 0.0 {
        scored.iter().map(|(r, p)| r * p).sum::<f64>() / mass
    } else {
        0.0
    };
    let max_reward = scored.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s.0));
    let max_advantage = max_reward - baseline;
    let mut near_optimal = Vec::new();
    let (mut adv_sum, mut prob_sum) = (0.0, 0.0);
    for (&idx, &(r, p)) in indices.iter().zip(&scored) {
        let adv = r - baseline;
        if (adv - max_advantage).abs() <= delta_adv {
            near_optimal.push(decode_candidate(idx, base, slots.len()));
            adv_sum += adv;
            prob_sum += p;
        }
    }
    let m = near_optimal.len();
    Ok(DegeneracyReport {
        query,
        delta_adv,
        candidates: indices.len(),
        sampled,
        max_reward,
        baseline,
        near_optimal,
        m,
        mean_advantage: adv_sum / m as f64,
        max_advantage,
        mean_probability: prob_sum / m as f64,
        inverse_m: 1.0 / m as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighEntropyReport {
    pub mean_entropy: f64,
    pub factor: f64,
    /// One flag per (query, position), row-major.
    pub flags: Vec<bool>,
    pub flagged: usize,
    pub by_class: BTreeMap<TokenClass, usize>,
}

/// Flags positions whose entropy is at least `factor` times the mean token
/// entropy (and non-zero), grouped by the slot's token class.
pub fn high_entropy_token_report(policy: &FactoredPolicy, slot_classes: &[TokenClass], factor: f64) -> Result<HighEntropyReport> {
    if !(factor > 0.0) {
        return Err(LabError::InvalidArgument(format!("factor must be positive, got {factor}")));
    }
    if slot_classes.len() != policy.positions() {
        return Err(LabError::ShapeMismatch(format!(
            "{} slot classes for {} positions",
            slot_classes.len(),
            policy.positions()
        )));
    }
    let table = policy.entropy_table();
    let mean = table.iter().sum::<f64>() / table.len() as f64;
    let flags: Vec<bool> = table.iter().map(|&h| h > 0.0 && h >= factor * mean).collect();
    let mut by_class: BTreeMap<TokenClass, usize> = TokenClass::ALL.iter().map(|&c| (c, 0)).collect();
    for (i, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
        *by_class.entry(slot_classes[i % policy.positions()]).or_default() += 1;
    }
    Ok(HighEntropyReport {
        mean_entropy: mean,
        factor,
        flagged: flags.iter().filter(|f| **f).count(),
        flags,
        by_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    /// Mean sampling-time probability of numeric tokens, if any were drawn.
    pub numeric: Option<f64>,
    /// Mean sampling-time probability of every other token.
    pub other: Option<f64>,
    pub rollouts: usize,
}

/// Mean token probabilities by class over the positive-advantage rollouts;
/// `None` when there are none.
pub fn token_class_probability(rollouts: &[Rollout], vocab: &Vocabulary) -> Option<ClassProbabilities> {
    let positive: Vec<&Rollout> = rollouts.iter().filter(|r| r.advantage > 0.0).collect();
    if positive.is_empty() {
        return None;
    }
    let (mut num, mut other) = ((0.0, 0usize), (0.0, 0usize));
    for r in &positive {
        for (&tok, &lp) in r.tokens.iter().zip(&r.old_logprobs) {
            let acc = if is_numeric(vocab, tok) { &mut num } else { &mut other };
            acc.0 += lp.exp();
            acc.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Some(ClassProbabilities {
        numeric: mean(num),
        other: mean(other),
        rollouts: positive.len(),
    })
}

fn is_numeric(vocab: &Vocabulary, tok: TokenId) -> bool {
    vocab.class(tok) == Some(TokenClass::Numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{GroundingEnv, PriorSpec, ReasoningEnv};
    use crate::grpo::RolloutGroup;
    use crate::policy::{apply_gradient_ascent, surrogate_gradient, SurrogateConfig};
    use proptest::prelude::*;

    fn tab(logits: &[f64]) -> TabularPolicy {
        TabularPolicy::new(1, logits.len(), logits.to_vec()).unwrap()
    }

    #[test]
    fn uniform_policy_predicts_no_change() {
        let p = tab(&[0.0, 0.0, 0.0]);
        let mut a = vec![1.0, -2.0, 0.5];
        center_advantages(&p.probs(0), &mut a);
        assert!(predict_entropy_change(&p, 0, &a, 0.1).unwrap().abs() < 1e-30);
        let f = forecast(&p, 0, &a, 1e-3).unwrap();
        // the whole change is the (second-order) error
        assert_eq!(f.abs_error, f.actual_change().abs());
        assert!(f.actual_change().abs() < 1e-5);
    }

    #[test]
    fn zero_eta_predicts_and_changes_nothing() {
        let p = tab(&[1.0, 0.0, -1.0]);
        let mut a = vec![1.0, 0.0, -1.0];
        center_advantages(&p.probs(0), &mut a);
        assert_eq!(predict_entropy_change(&p, 0, &a, 0.0).unwrap(), 0.0);
        assert_eq!(forecast(&p, 0, &a, 0.0).unwrap().abs_error, 0.0);
    }

    #[test]
    fn rejects_uncentered_advantages() {
        let p = tab(&[1.0, 0.0, -1.0]);
        assert!(matches!(predict_entropy_change(&p, 0, &[1.0, 0.0, -1.0], 0.1), Err(LabError::Precondition(_))));
        assert!(predict_entropy_change(&p, 0, &[1.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn three_action_forecast_is_first_order() {
        let p = tab(&[1.0, 0.0, -1.0]);
        let mut a = vec![0.5, 1.0, -2.0];
        center_advantages(&p.probs(0), &mut a);
        let e1 = forecast(&p, 0, &a, 1e-3).unwrap();
        let e2 = forecast(&p, 0, &a, 5e-4).unwrap();
        assert!(e1.abs_error < 1e-2 * e1.predicted_change.abs());
        let ratio = e1.abs_error / e2.abs_error;
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn vpg_update_examples() {
        let p = tab(&[0.0, 0.0]);
        let up = vpg_logit_update(&p, 0, &[1.0, -1.0], 0.1).unwrap();
        assert!((up.logits(0)[0] - 0.05).abs() < 1e-15);
        assert!((up.logits(0)[1] + 0.05).abs() < 1e-15);
        assert_eq!(vpg_logit_update(&p, 0, &[0.0, 0.0], 0.1).unwrap(), p);

        let two = TabularPolicy::new(2, 2, vec![0.0, 0.0, 0.3, 0.1]).unwrap();
        let up = vpg_logit_update(&two, 0, &[1.0, -1.0], 0.1).unwrap();
        assert_eq!(up.logits(1), two.logits(1));
    }

    #[test]
    fn vpg_matches_expected_surrogate_gradient() {
        for seed in 0..50u64 {
            let (p, adv) = random_instance(&mut stream(seed, &[]));
            let group = RolloutGroup::enumerated(p.as_factored(), 0, &adv);
            let g = surrogate_gradient(p.as_factored(), p.as_factored(), &group, &SurrogateConfig { epsilon: 0.2, beta: 0.0 }).unwrap();
            let via_grpo = apply_gradient_ascent(p.as_factored(), &g, 0.05).unwrap();
            let via_vpg = vpg_logit_update(&p, 0, &adv, 0.05).unwrap();
            for (x, y) in via_grpo.all_logits().iter().zip(via_vpg.as_factored().all_logits()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sign_law_two_actions() {
        for &p in &[0.6, 0.8, 0.95] {
            let (pol, a) = two_action_instance(p, 2.0, true);
            assert!(predict_entropy_change(&pol, 0, &a, 1e-3).unwrap() < 0.0);
            let (pol, a) = two_action_instance(p, 2.0, false);
            assert!(predict_entropy_change(&pol, 0, &a, 1e-3).unwrap() > 0.0);
        }
    }

    #[test]
    fn theorem_report_shapes() {
        assert!(verify_theorem(5, 1e-3, 0).is_err());
        let r = verify_theorem(100, 1e-3, 0).unwrap();
        assert!((3.5..=4.5).contains(&r.decay_ratio), "{r:?}");
        let zero = verify_theorem(10, 0.0, 0).unwrap();
        assert_eq!(zero.full.max_abs_error, 0.0);
    }

    #[test]
    fn degeneracy_reasoning_is_unique() {
        let g = GroundingEnv::generate(16, 2, 1, 4, 4, 10, 3, PriorSpec::default()).unwrap();
        let r = ReasoningEnv::from_grounding(&g).unwrap();
        let p = r.initial_policy().unwrap();
        let rep = degeneracy_report(&r, &p, 0, 0.5, EnumerationLimit::default()).unwrap();
        assert_eq!(rep.m, 1);
        assert_eq!(rep.candidates, 17usize.pow(4));
        assert!(rep.mean_probability <= 1.0);
    }

    #[test]
    fn degeneracy_cap() {
        let g = GroundingEnv::generate(16, 1, 1, 4, 4, 10, 3, PriorSpec::default()).unwrap();
        let p = g.initial_policy().unwrap();
        let tight = EnumerationLimit { cap: 1000, sample_seed: None };
        assert!(degeneracy_report(&g, &p, 0, 0.1, tight).is_err());
        let sampled = degeneracy_report(&g, &p, 0, 0.1, EnumerationLimit { cap: 1000, sample_seed: Some(1) }).unwrap();
        assert!(sampled.sampled);
        assert_eq!(sampled.candidates, 1000);
    }

    #[test]
    fn high_entropy_flags() {
        let uniform = FactoredPolicy::zeros(2, 3, 4);
        let classes = [TokenClass::Structural, TokenClass::Noun, TokenClass::Numeric];
        assert_eq!(high_entropy_token_report(&uniform, &classes, 2.0).unwrap().flagged, 0);

        let mut p = FactoredPolicy::zeros(1, 3, 4);
        p.logits_mut(0, 0)[0] = 1e6;
        p.logits_mut(0, 1)[0] = 1e6;
        let rep = high_entropy_token_report(&p, &classes, 2.0).unwrap();
        assert_eq!(rep.flags, vec![false, false, true]);
        assert_eq!(rep.by_class[&TokenClass::Numeric], 1);
        assert!(high_entropy_token_report(&p, &classes, 0.0).is_err());
        assert!(high_entropy_token_report(&p, &classes[..2], 2.0).is_err());
    }

    #[test]
    fn class_probabilities() {
        let v = Vocabulary::new(2, 4);
        let mut r = Rollout::new(0, vec![v.tag(crate::vocab::Tag::ThinkOpen), v.number(3)], vec![0.0, 0.5f64.ln()]);
        assert!(token_class_probability(&[r.clone()], &v).is_none());
        r.advantage = 1.0;
        let c = token_class_probability(&[r], &v).unwrap();
        assert_eq!(c.other, Some(1.0));
        assert!((c.numeric.unwrap() - 0.5).abs() < 1e-15);

        let det = Rollout::new(0, vec![v.noun(0), v.number(1)], vec![0.0, 0.0]);
        let c = token_class_probability(&[Rollout { advantage: 0.3, ..det }], &v).unwrap();
        assert_eq!((c.numeric, c.other), (Some(1.0), Some(1.0)));
    }

    proptest! {
        #[test]
        fn forecast_shift_invariant(seed in 0u64..200, shift in -20.0f64..20.0) {
            let (p, adv) = random_instance(&mut stream(seed, &[1]));
            let shifted: Vec<f64> = p.logits(0).iter().map(|l| l + shift).collect();
            let q = TabularPolicy::new(1, shifted.len(), shifted).unwrap();
            let a = predict_entropy_change(&p, 0, &adv, 0.01).unwrap();
            let b = predict_entropy_change(&q, 0, &adv, 0.01).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}
