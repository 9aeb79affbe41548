use serde::{Deserialize, Serialize};

use super::{entropy_of_logits, softmax, FactoredPolicy};
use crate::error::{LabError, Result};

/// Single-step softmax policy `pi(a|s) = softmax(theta[s])[a]`.
///
/// Stored as a one-position [`FactoredPolicy`] whose queries are the states,
/// so the group objective and its gradient apply unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy(FactoredPolicy);

impl TabularPolicy {
    pub fn new(states: usize, actions: usize, logits: Vec<f64>) -> Result<Self> {
        FactoredPolicy::from_logits(states, 1, actions, logits).map(Self)
    }

    pub fn from_factored(policy: FactoredPolicy) -> Result<Self> {
        if policy.positions() != 1 {
            return Err(LabError::ShapeMismatch(format!(
                "tabular policy needs one position, got {}",
                policy.positions()
            )));
        }
        Ok(Self(policy))
    }

    pub fn states(&self) -> usize {
        self.0.queries()
    }

    pub fn actions(&self) -> usize {
        self.0.vocab_size()
    }

    pub fn logits(&self, state: usize) -> &[f64] {
        self.0.logits(state, 0)
    }

    pub fn logits_mut(&mut self, state: usize) -> &mut [f64] {
        self.0.logits_mut(state, 0)
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        softmax(self.logits(state), 1.0)
    }

    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        self.0.log_probs(state, 0)
    }

    pub fn entropy(&self, state: usize) -> f64 {
        entropy_of_logits(self.logits(state))
    }

    pub fn as_factored(&self) -> &FactoredPolicy {
        &self.0
    }

    pub fn into_factored(self) -> FactoredPolicy {
        self.0
    }
}
