//! Softmax token policies.
//!
//! [`FactoredPolicy`] keeps one logit row per (query, position): the token at
//! each position is drawn independently of earlier tokens. That keeps exact
//! entropies, KL divergences and logit gradients cheap to compute.
//! [`TabularPolicy`] is the single-position special case with states as rows.

mod objective;
mod rollout;
mod snapshot;
mod tabular;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::vocab::TokenId;

pub use objective::{categorical_kl, score_gradient, surrogate_gradient, surrogate_objective, SurrogateConfig};
pub use rollout::{ReshapedAdvantage, Rollout};
pub use tabular::TabularPolicy;

/// Log-softmax of `logits / temperature` with max subtraction.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l / temperature));
    let lse = max + logits.iter().map(|&l| (l / temperature - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l / temperature - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of the softmax of `logits` at temperature 1.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    log_softmax(logits, 1.0).iter().map(|&lp| -lp.exp() * lp).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredPolicy {
    queries: usize,
    positions: usize,
    vocab: usize,
    temperature: f64,
    logits: Vec<f64>,
}

impl FactoredPolicy {
    pub fn zeros(queries: usize, positions: usize, vocab: usize) -> Self {
        Self {
            queries,
            positions,
            vocab,
            temperature: 1.0,
            logits: vec![0.0; queries * positions * vocab],
        }
    }

    pub fn from_logits(queries: usize, positions: usize, vocab: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != queries * positions * vocab {
            return Err(LabError::ShapeMismatch(format!(
                "{} logits for shape {queries}x{positions}x{vocab}",
                logits.len()
            )));
        }
        if queries == 0 || positions == 0 || vocab == 0 {
            return Err(LabError::ShapeMismatch("policy dimensions must be positive".into()));
        }
        if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
            return Err(LabError::InvalidArgument(format!("non-finite logit {bad}")));
        }
        Ok(Self {
            queries,
            positions,
            vocab,
            temperature: 1.0,
            logits,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(LabError::config("temperature", format!("must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.queries, self.positions, self.vocab)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(LabError::ShapeMismatch(format!("{:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    fn offset(&self, query: usize, position: usize) -> usize {
        assert!(query < self.queries && position < self.positions, "({query},{position}) out of range");
        (query * self.positions + position) * self.vocab
    }

    pub fn logits(&self, query: usize, position: usize) -> &[f64] {
        let o = self.offset(query, position);
        &self.logits[o..o + self.vocab]
    }

    pub fn logits_mut(&mut self, query: usize, position: usize) -> &mut [f64] {
        let o = self.offset(query, position);
        &mut self.logits[o..o + self.vocab]
    }

    pub fn all_logits(&self) -> &[f64] {
        &self.logits
    }

    /// Scoring log-probabilities (temperature 1).
    pub fn log_probs(&self, query: usize, position: usize) -> Vec<f64> {
        log_softmax(self.logits(query, position), 1.0)
    }

    pub fn probs(&self, query: usize, position: usize) -> Vec<f64> {
        softmax(self.logits(query, position), 1.0)
    }

    /// Sampling distribution (policy temperature).
    pub fn sampling_probs(&self, query: usize, position: usize) -> Vec<f64> {
        softmax(self.logits(query, position), self.temperature)
    }

    pub fn token_logprob(&self, query: usize, position: usize, token: TokenId) -> f64 {
        self.log_probs(query, position)[token]
    }

    /// Draws one token per position from `softmax(logits / temperature)` and
    /// records the temperature-1 log-probabilities of the drawn tokens.
    pub fn sample_rollout<R: Rng + ?Sized>(&self, query: usize, rng: &mut R) -> Rollout {
        let mut tokens = Vec::with_capacity(self.positions);
        let mut logprobs = Vec::with_capacity(self.positions);
        for t in 0..self.positions {
            let weights = self.sampling_probs(query, t);
            let token = WeightedIndex::new(&weights)
                .expect("softmax weights are finite and positive")
                .sample(rng);
            tokens.push(token);
            logprobs.push(self.token_logprob(query, t, token));
        }
        Rollout::new(query, tokens, logprobs)
    }

    /// Greedy decoding: the first argmax at every position.
    pub fn argmax_sequence(&self, query: usize) -> Vec<TokenId> {
        (0..self.positions)
            .map(|t| {
                let row = self.logits(query, t);
                let mut best = 0;
                for (i, &l) in row.iter().enumerate() {
                    if l > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// `sum_t log pi(o_t | q, t)` at temperature 1.
    pub fn sequence_logprob(&self, query: usize, tokens: &[TokenId]) -> Result<f64> {
        if tokens.len() != self.positions {
            return Err(LabError::ShapeMismatch(format!(
                "sequence of {} tokens for {} positions",
                tokens.len(),
                self.positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= self.vocab) {
            return Err(LabError::InvalidArgument(format!("token {bad} outside vocabulary of {}", self.vocab)));
        }
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.token_logprob(query, t, tok))
            .sum())
    }

    pub fn token_entropy(&self, query: usize, position: usize) -> f64 {
        entropy_of_logits(self.logits(query, position))
    }

    /// Mean token entropy over every (query, position) pair.
    pub fn exact_policy_entropy(&self) -> f64 {
        let total: f64 = self.logits.chunks(self.vocab).map(entropy_of_logits).sum();
        total / (self.queries * self.positions) as f64
    }

    /// Per-(query, position) entropies in row-major order.
    pub fn entropy_table(&self) -> Vec<f64> {
        self.logits.chunks(self.vocab).map(entropy_of_logits).collect()
    }

    /// Recomputes `rollout.logprobs` under this policy.
    pub fn refresh_logprobs(&self, rollout: &mut Rollout) {
        rollout.logprobs = rollout
            .tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.token_logprob(rollout.query, t, tok))
            .collect();
    }

    pub fn apply_ascent(&mut self, gradient: &LogitGradient, eta: f64) -> Result<()> {
        if gradient.shape() != self.shape() {
            return Err(LabError::ShapeMismatch(format!(
                "gradient {:?} vs policy {:?}",
                gradient.shape(),
                self.shape()
            )));
        }
        for (l, g) in self.logits.iter_mut().zip(&gradient.values) {
            *l += eta * g;
        }
        Ok(())
    }
}

/// `theta + eta * gradient`, element-wise.
pub fn apply_gradient_ascent(policy: &FactoredPolicy, gradient: &LogitGradient, eta: f64) -> Result<FactoredPolicy> {
    let mut next = policy.clone();
    next.apply_ascent(gradient, eta)?;
    Ok(next)
}

/// Mean of `-log pi` over every token of every rollout, using the stored
/// temperature-1 log-probabilities.
pub fn sampled_policy_entropy(rollouts: &[Rollout]) -> Result<f64> {
    let tokens: usize = rollouts.iter().map(|r| r.old_logprobs.len()).sum();
    if tokens == 0 {
        return Err(LabError::InvalidArgument("sampled entropy needs at least one token".into()));
    }
    let total: f64 = rollouts.iter().flat_map(|r| &r.old_logprobs).map(|lp| -lp).sum();
    Ok(total / tokens as f64)
}

/// A gradient with the same (query, position, vocab) layout as a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradient {
    queries: usize,
    positions: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LogitGradient {
    pub fn zeros_like(policy: &FactoredPolicy) -> Self {
        let (queries, positions, vocab) = policy.shape();
        Self {
            queries,
            positions,
            vocab,
            values: vec![0.0; queries * positions * vocab],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.queries, self.positions, self.vocab)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, query: usize, position: usize) -> &[f64] {
        let o = (query * self.positions + position) * self.vocab;
        &self.values[o..o + self.vocab]
    }

    pub fn row_mut(&mut self, query: usize, position: usize) -> &mut [f64] {
        let o = (query * self.positions + position) * self.vocab;
        &mut self.values[o..o + self.vocab]
    }

    pub fn add_assign(&mut self, other: &LogitGradient) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform(q: usize, l: usize, v: usize) -> FactoredPolicy {
        FactoredPolicy::zeros(q, l, v)
    }

    fn deterministic(q: usize, l: usize, v: usize) -> FactoredPolicy {
        let mut p = FactoredPolicy::zeros(q, l, v);
        for qi in 0..q {
            for t in 0..l {
                p.logits_mut(qi, t)[(qi + t) % v] = 1e6;
            }
        }
        p
    }

    #[test]
    fn deterministic_policy_samples_argmax() {
        let p = deterministic(2, 5, 4);
        let mut rng = stream(1, &[0]);
        for q in 0..2 {
            let r = p.sample_rollout(q, &mut rng);
            assert_eq!(r.tokens, p.argmax_sequence(q));
            assert_eq!(p.sequence_logprob(q, &r.tokens).unwrap(), 0.0);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let p = uniform(1, 1, 4);
        let mut rng = stream(11, &[0]);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[p.sample_rollout(0, &mut rng).tokens[0]] += 1;
        }
        // binomial(n, 1/4): sigma = sqrt(n * 1/4 * 3/4)
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut p = uniform(1, 6, 5);
        p.logits_mut(0, 2)[1] = 0.7;
        let a = p.sample_rollout(0, &mut stream(5, &[1, 2]));
        let b = p.sample_rollout(0, &mut stream(5, &[1, 2]));
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_logprob_examples() {
        let p = uniform(1, 2, 4);
        assert!((p.sequence_logprob(0, &[0, 3]).unwrap() - 2.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!(p.sequence_logprob(0, &[0]).is_err());
        assert!(p.sequence_logprob(0, &[0, 4]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let p = uniform(1, 1, 4);
        assert!((p.token_entropy(0, 0) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(deterministic(1, 1, 4).token_entropy(0, 0), 0.0);
        let two = FactoredPolicy::from_logits(1, 1, 2, vec![9f64.ln(), 0.0]).unwrap();
        let expected = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((two.token_entropy(0, 0) - expected).abs() < 1e-12);
        assert!((expected - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn policy_entropy_is_mean_of_token_entropies() {
        assert!((uniform(3, 4, 4).exact_policy_entropy() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(deterministic(3, 4, 4).exact_policy_entropy(), 0.0);
        let mut rng = stream(3, &[]);
        let logits: Vec<f64> = (0..2 * 3 * 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = FactoredPolicy::from_logits(2, 3, 5, logits).unwrap();
        let mut sum = 0.0;
        for q in 0..2 {
            for t in 0..3 {
                sum += p.token_entropy(q, t);
            }
        }
        assert!((p.exact_policy_entropy() - sum / 6.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_entropy_examples() {
        let p = deterministic(1, 3, 4);
        let rs: Vec<_> = (0..5).map(|i| p.sample_rollout(0, &mut stream(0, &[i]))).collect();
        assert_eq!(sampled_policy_entropy(&rs).unwrap(), 0.0);
        let r = Rollout::new(0, vec![0, 0], vec![-1.0, -3.0]);
        assert_eq!(sampled_policy_entropy(&[r]).unwrap(), 2.0);
        assert!(sampled_policy_entropy(&[]).is_err());
    }

    #[test]
    fn sampled_entropy_converges_to_exact() {
        let logits = vec![1.0, 0.2, -0.5, 0.0, 2.0, -1.0, 0.3, 0.3];
        let p = FactoredPolicy::from_logits(1, 2, 4, logits).unwrap();
        let n = 10_000u64;
        let rs: Vec<_> = (0..n).map(|i| p.sample_rollout(0, &mut stream(9, &[i]))).collect();
        let est = sampled_policy_entropy(&rs).unwrap();
        // standard error of the per-rollout mean surprisal
        let per: Vec<f64> = rs.iter().map(|r| -r.old_logprobs.iter().sum::<f64>() / 2.0).collect();
        let mean = per.iter().sum::<f64>() / n as f64;
        let var = per.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((est - p.exact_policy_entropy()).abs() <= 3.0 * se, "{est} vs {}", p.exact_policy_entropy());
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let p = FactoredPolicy::from_logits(1, 1, 3, vec![0.0, 1.0, -0.5])
            .unwrap()
            .with_temperature(0.01)
            .unwrap();
        let hits = (0..10_000u64)
            .filter(|&i| p.sample_rollout(0, &mut stream(2, &[i])).tokens[0] == 1)
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(FactoredPolicy::from_logits(1, 1, 2, vec![0.0]).is_err());
        assert!(FactoredPolicy::from_logits(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(uniform(1, 1, 2).with_temperature(0.0).is_err());
    }

    #[test]
    fn gradient_ascent_update_and_revert() {
        let p = FactoredPolicy::from_logits(1, 1, 2, vec![0.3, -0.2]).unwrap();
        let mut g = LogitGradient::zeros_like(&p);
        assert_eq!(apply_gradient_ascent(&p, &g, 0.1).unwrap(), p);
        g.row_mut(0, 0).copy_from_slice(&[0.5, -0.5]);
        let up = apply_gradient_ascent(&p, &g, 0.1).unwrap();
        assert!((up.logits(0, 0)[0] - 0.35).abs() < 1e-15);
        let back = apply_gradient_ascent(&up, &g, -0.1).unwrap();
        for (a, b) in back.all_logits().iter().zip(p.all_logits()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rows_normalized_and_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 6),
            shift in -100.0f64..100.0,
        ) {
            let p = FactoredPolicy::from_logits(1, 1, 6, logits.clone()).unwrap();
            let total: f64 = p.probs(0, 0).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let s = FactoredPolicy::from_logits(1, 1, 6, shifted).unwrap();
            for (a, b) in p.probs(0, 0).iter().zip(s.probs(0, 0)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            prop_assert!((p.token_entropy(0, 0) - s.token_entropy(0, 0)).abs() < 1e-10);
        }
    }
}
