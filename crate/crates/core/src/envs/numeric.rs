use super::Environment;
use crate::error::{LabError, Result};
use crate::policy::FactoredPolicy;
use crate::rewards::{numeric_decay_reward, RewardBreakdown};
use crate::rng::StreamRng;
use crate::vocab::{TokenClass, TokenId, Vocabulary};

/// Single-step bandit over the integers `0..=action_max`, rewarded by
/// `max(0, 1 - lambda * |a - target|)`.
#[derive(Debug, Clone)]
pub struct NumericBanditEnv {
    vocab: Vocabulary,
    target: u32,
    lambda: f64,
}

impl NumericBanditEnv {
    pub fn new(action_max: u32, target: u32, lambda: f64) -> Result<Self> {
        if target > action_max {
            return Err(LabError::config("env.target", format!("target {target} outside [0, {action_max}]")));
        }
        numeric_decay_reward(0, 0, lambda).map_err(|_| LabError::config("env.lambda", "must be positive"))?;
        Ok(Self {
            vocab: Vocabulary::numeric_only(action_max),
            target,
            lambda,
        })
    }

    pub fn action_max(&self) -> u32 {
        self.vocab.max_numeric()
    }

    pub fn target(&self) -> u32 {
        self.target
    }

    fn score(&self, action: u32) -> f64 {
        numeric_decay_reward(i64::from(action), i64::from(self.target), self.lambda).expect("lambda validated")
    }
}

/// Reward of `action`; actions outside the range are rejected.
pub fn numeric_reward_env(env: &NumericBanditEnv, action: u32) -> Result<f64> {
    if action > env.action_max() {
        return Err(LabError::InvalidArgument(format!("action {action} outside [0, {}]", env.action_max())));
    }
    Ok(env.score(action))
}

impl Environment for NumericBanditEnv {
    fn name(&self) -> &'static str {
        "numeric"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn num_queries(&self) -> usize {
        1
    }

    fn seq_len(&self) -> usize {
        1
    }

    fn slot_classes(&self) -> Vec<TokenClass> {
        vec![TokenClass::Numeric]
    }

    fn answer_slots(&self) -> Vec<usize> {
        vec![0]
    }

    fn reference_sequence(&self, _query: usize) -> Vec<TokenId> {
        vec![self.vocab.number(self.target)]
    }

    fn reward(&self, query: usize, tokens: &[TokenId], _rng: &mut StreamRng) -> RewardBreakdown {
        RewardBreakdown::accuracy_only(self.expected_reward(query, tokens))
    }

    fn expected_reward(&self, _query: usize, tokens: &[TokenId]) -> f64 {
        match tokens {
            [tok] => self.vocab.numeric_value(*tok).map_or(0.0, |a| self.score(a)),
            _ => 0.0,
        }
    }

    fn clean_score(&self, query: usize, tokens: &[TokenId]) -> f64 {
        self.expected_reward(query, tokens)
    }

    fn expected_clean_score(&self, policy: &FactoredPolicy, query: usize) -> f64 {
        policy
            .probs(query, 0)
            .iter()
            .enumerate()
            .map(|(tok, p)| p * self.expected_reward(query, &[tok]))
            .sum()
    }

    fn initial_policy(&self) -> Result<FactoredPolicy> {
        Ok(FactoredPolicy::zeros(1, 1, self.vocab.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_rewards() {
        let e = NumericBanditEnv::new(40, 20, 0.05).unwrap();
        assert_eq!(numeric_reward_env(&e, 20).unwrap(), 1.0);
        assert_eq!(numeric_reward_env(&e, 40).unwrap(), 0.0);
        assert_eq!(numeric_reward_env(&e, 0).unwrap(), 0.0);
        assert!((numeric_reward_env(&e, 10).unwrap() - 0.5).abs() < 1e-15);
        assert!((numeric_reward_env(&e, 25).unwrap() - 0.75).abs() < 1e-15);
        assert!(numeric_reward_env(&e, 41).is_err());
    }

    #[test]
    fn construction_checks() {
        assert!(NumericBanditEnv::new(10, 11, 0.1).is_err());
        assert!(NumericBanditEnv::new(10, 5, 0.0).is_err());
    }
}
