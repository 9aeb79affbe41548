use serde::{Deserialize, Serialize};

use crate::rewards::RewardBreakdown;
use crate::vocab::TokenId;

/// Advantage after reshaping: one value per rollout, or one per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReshapedAdvantage {
    Sequence(f64),
    Token(Vec<f64>),
}

/// One sampled output and everything the update needs to know about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query: usize,
    pub tokens: Vec<TokenId>,
    /// Temperature-1 log-probabilities under the sampling snapshot.
    pub old_logprobs: Vec<f64>,
    /// Temperature-1 log-probabilities under the policy being optimized.
    pub logprobs: Vec<f64>,
    pub reward: RewardBreakdown,
    pub advantage: f64,
    pub reshaped: Option<ReshapedAdvantage>,
}

impl Rollout {
    pub fn new(query: usize, tokens: Vec<TokenId>, logprobs: Vec<f64>) -> Self {
        Self {
            query,
            tokens,
            old_logprobs: logprobs.clone(),
            logprobs,
            reward: RewardBreakdown::new(0.0, 0.0),
            advantage: 0.0,
            reshaped: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn old_sequence_logprob(&self) -> f64 {
        self.old_logprobs.iter().sum()
    }

    /// Advantage the objective should use for token `t`.
    pub fn effective_advantage(&self, t: usize) -> f64 {
        match &self.reshaped {
            None => self.advantage,
            Some(ReshapedAdvantage::Sequence(a)) => *a,
            Some(ReshapedAdvantage::Token(a)) => a[t],
        }
    }
}
