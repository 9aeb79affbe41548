//! Synthetic environments with the three reward regimes: noisy grounding
//! (IoU + format), exact-match reasoning (binary) and a numeric bandit
//! (smooth decay).

mod grounding;
mod numeric;
mod reasoning;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::FactoredPolicy;
use crate::rewards::RewardBreakdown;
use crate::rng::StreamRng;
use crate::vocab::{Tag, TokenClass, TokenId, Vocabulary};

pub use grounding::{GroundingEnv, GroundingQuery};
pub use numeric::{numeric_reward_env, NumericBanditEnv};
pub use reasoning::ReasoningEnv;

/// Sequence length of the think/answer template.
pub const TEMPLATE_LEN: usize = 11;
/// Positions of the four coordinate tokens in the template.
pub const COORD_SLOTS: [usize; 4] = [5, 6, 7, 8];
/// Position of the free "thinking" token.
pub const NOUN_SLOT: usize = 1;

/// `<think> noun </think> <answer> { x1 y1 x2 y2 } </answer>`.
pub fn template_sequence(vocab: &Vocabulary, noun: usize, coords: [u32; 4]) -> Vec<TokenId> {
    let mut seq = vec![
        vocab.tag(Tag::ThinkOpen),
        vocab.noun(noun),
        vocab.tag(Tag::ThinkClose),
        vocab.tag(Tag::AnswerOpen),
        vocab.tag(Tag::BraceOpen),
    ];
    seq.extend(coords.iter().map(|&c| vocab.number(c)));
    seq.extend([vocab.tag(Tag::BraceClose), vocab.tag(Tag::AnswerClose)]);
    seq
}

/// Initial logits standing in for a pretrained model: the template tag is
/// favoured at structural slots, the query's noun at the noun slot, and
/// numbers near the reference coordinate at numeric slots.
///
/// Numeric slots need a level comparable to the structural one. Mass left on
/// non-numbers there is removed by the format reward in proportion to each
/// number's probability, which sharpens the coordinate distribution by itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub structural: f64,
    pub noun: f64,
    pub numeric: f64,
    /// Logit decrease per unit of distance from the reference number.
    pub sharpness: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            structural: 7.0,
            noun: 7.0,
            numeric: 7.0,
            sharpness: 2.0,
        }
    }
}

/// Builds a policy with one row block per reference sequence.
pub fn prior_policy(vocab: &Vocabulary, references: &[Vec<TokenId>], prior: &PriorSpec) -> Result<FactoredPolicy> {
    let l = references.first().map_or(0, Vec::len);
    let mut policy = FactoredPolicy::from_logits(references.len(), l, vocab.len(), vec![0.0; references.len() * l * vocab.len()])?;
    for (q, seq) in references.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let row = policy.logits_mut(q, t);
            match vocab.class(tok) {
                Some(TokenClass::Structural) => row[tok] = prior.structural,
                Some(TokenClass::Noun) => row[tok] = prior.noun,
                Some(TokenClass::Numeric) => {
                    let centre = f64::from(vocab.numeric_value(tok).expect("numeric token"));
                    for v in 0..=vocab.max_numeric() {
                        row[vocab.number(v)] = prior.numeric - prior.sharpness * (f64::from(v) - centre).abs();
                    }
                }
                None => return Err(LabError::InvalidArgument(format!("reference token {tok} outside vocabulary"))),
            }
        }
    }
    Ok(policy)
}

pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn vocab(&self) -> &Vocabulary;
    fn num_queries(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Token class expected at each position of a correct answer.
    fn slot_classes(&self) -> Vec<TokenClass>;
    /// Positions holding the numeric answer.
    fn answer_slots(&self) -> Vec<usize>;
    /// The best answer for `query` (clean ground truth or exact target).
    fn reference_sequence(&self, query: usize) -> Vec<TokenId>;
    /// Reward for one episode; any reward noise is drawn from `rng`.
    fn reward(&self, query: usize, tokens: &[TokenId], rng: &mut StreamRng) -> RewardBreakdown;
    /// Total reward averaged exactly over the environment's reward noise.
    fn expected_reward(&self, query: usize, tokens: &[TokenId]) -> f64;
    /// Noise-free evaluation score in `[0, 1]`.
    fn clean_score(&self, query: usize, tokens: &[TokenId]) -> f64;
    /// Exact expectation of [`Environment::clean_score`] under `policy`.
    fn expected_clean_score(&self, policy: &FactoredPolicy, query: usize) -> f64;
    fn initial_policy(&self) -> Result<FactoredPolicy>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Argmax token at every position.
    Greedy,
    /// Exact expectation over the policy's sampling distribution at
    /// temperature 1.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_score: f64,
    pub exact_match_rate: f64,
}

fn check_shape(env: &dyn Environment, policy: &FactoredPolicy) -> Result<()> {
    let expected = (env.num_queries(), env.seq_len(), env.vocab().len());
    if policy.shape() != expected {
        return Err(LabError::ShapeMismatch(format!(
            "policy {:?} does not match environment {expected:?}",
            policy.shape()
        )));
    }
    Ok(())
}

/// Scores the policy against clean ground truth, averaged over queries.
pub fn evaluate_policy(env: &dyn Environment, policy: &FactoredPolicy, mode: EvalMode) -> Result<EvalReport> {
    check_shape(env, policy)?;
    let n = env.num_queries() as f64;
    let (mut score, mut exact) = (0.0, 0.0);
    for q in 0..env.num_queries() {
        let reference = env.reference_sequence(q);
        match mode {
            EvalMode::Greedy => {
                let seq = policy.argmax_sequence(q);
                score += env.clean_score(q, &seq);
                exact += f64::from(u8::from(seq == reference));
            }
            EvalMode::Expected => {
                score += env.expected_clean_score(policy, q);
                exact += policy.sequence_logprob(q, &reference)?.exp();
            }
        }
    }
    Ok(EvalReport {
        mean_score: score / n,
        exact_match_rate: exact / n,
    })
}
