use super::{prior_policy, Environment, GroundingEnv, PriorSpec};
use crate::error::{LabError, Result};
use crate::policy::FactoredPolicy;
use crate::rewards::RewardBreakdown;
use crate::rng::StreamRng;
use crate::vocab::{TokenClass, TokenId, Vocabulary};

/// Exact-match task: reward 1 only when the whole sequence equals the
/// query's target, 0 otherwise. There is no format component.
#[derive(Debug, Clone)]
pub struct ReasoningEnv {
    vocab: Vocabulary,
    targets: Vec<Vec<TokenId>>,
    prior: PriorSpec,
}

impl ReasoningEnv {
    pub fn new(vocab: Vocabulary, targets: Vec<Vec<TokenId>>, prior: PriorSpec) -> Result<Self> {
        let Some(first) = targets.first() else {
            return Err(LabError::config("env.queries", "reasoning environment needs at least one target"));
        };
        let l = first.len();
        if l == 0 {
            return Err(LabError::config("env.queries", "targets must be non-empty"));
        }
        for t in &targets {
            if t.len() != l {
                return Err(LabError::config("env.queries", "all targets must share one length"));
            }
            if t.iter().any(|&id| id >= vocab.len()) {
                return Err(LabError::config("env.queries", "target token outside vocabulary"));
            }
        }
        Ok(Self { vocab, targets, prior })
    }

    /// Same queries, vocabulary and prior as `env`, with each query's clean
    /// reference answer as the exact-match target.
    pub fn from_grounding(env: &GroundingEnv) -> Result<Self> {
        let targets = (0..env.num_queries()).map(|q| env.reference_sequence(q)).collect();
        Self::new(env.vocab().clone(), targets, *env.prior())
    }

    pub fn targets(&self) -> &[Vec<TokenId>] {
        &self.targets
    }

    fn matches(&self, query: usize, tokens: &[TokenId]) -> f64 {
        f64::from(u8::from(tokens == self.targets[query].as_slice()))
    }
}

impl Environment for ReasoningEnv {
    fn name(&self) -> &'static str {
        "reasoning"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn num_queries(&self) -> usize {
        self.targets.len()
    }

    fn seq_len(&self) -> usize {
        self.targets[0].len()
    }

    fn slot_classes(&self) -> Vec<TokenClass> {
        self.targets[0].iter().map(|&t| self.vocab.class(t).expect("validated target")).collect()
    }

    fn answer_slots(&self) -> Vec<usize> {
        self.slot_classes()
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == TokenClass::Numeric)
            .map(|(t, _)| t)
            .collect()
    }

    fn reference_sequence(&self, query: usize) -> Vec<TokenId> {
        self.targets[query].clone()
    }

    fn reward(&self, query: usize, tokens: &[TokenId], _rng: &mut StreamRng) -> RewardBreakdown {
        RewardBreakdown::accuracy_only(self.matches(query, tokens))
    }

    fn expected_reward(&self, query: usize, tokens: &[TokenId]) -> f64 {
        self.matches(query, tokens)
    }

    fn clean_score(&self, query: usize, tokens: &[TokenId]) -> f64 {
        self.matches(query, tokens)
    }

    fn expected_clean_score(&self, policy: &FactoredPolicy, query: usize) -> f64 {
        policy.sequence_logprob(query, &self.targets[query]).map_or(0.0, f64::exp)
    }

    fn initial_policy(&self) -> Result<FactoredPolicy> {
        prior_policy(&self.vocab, &self.targets, &self.prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn env() -> ReasoningEnv {
        let g = GroundingEnv::generate(16, 3, 1, 4, 3, 8, 1, PriorSpec::default()).unwrap();
        ReasoningEnv::from_grounding(&g).unwrap()
    }

    #[test]
    fn exact_match_only() {
        let e = env();
        let target = e.reference_sequence(1);
        let mut rng = stream(0, &[]);
        assert_eq!(e.reward(1, &target, &mut rng), RewardBreakdown::new(1.0, 0.0));
        let mut off = target.clone();
        off[6] = if off[6] == e.vocab().number(0) { e.vocab().number(1) } else { e.vocab().number(0) };
        assert_eq!(e.reward(1, &off, &mut rng).total, 0.0);
        assert_eq!(e.answer_slots(), vec![5, 6, 7, 8]);
    }

    #[test]
    fn rejects_empty_targets() {
        assert!(ReasoningEnv::new(Vocabulary::new(1, 3), vec![], PriorSpec::default()).is_err());
        assert!(ReasoningEnv::new(Vocabulary::new(1, 3), vec![vec![99]], PriorSpec::default()).is_err());
    }
}
