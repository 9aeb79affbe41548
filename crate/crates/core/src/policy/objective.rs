//! Clipped surrogate objective with a KL penalty, and its exact logit gradient.
//!
//! For one query's group the objective is
//!
//! ```text
//! J = sum_i w_i * min(rho_i * A_i, clip(rho_i, 1-eps, 1+eps) * A_i) - beta * KL(pi || pi_ref)
//! ```
//!
//! with `w_i = 1/N` unless the group carries explicit weights. With
//! sequence-level advantages `rho_i` is the sequence likelihood ratio against
//! the sampling snapshot. With token-level (reshaped) advantages each token
//! contributes its own clipped term with a per-token ratio. The KL term is the
//! exact categorical divergence summed over positions.

use serde::{Deserialize, Serialize};

use super::{log_softmax, FactoredPolicy, LogitGradient, ReshapedAdvantage, Rollout};
use crate::error::{LabError, Result};
use crate::grpo::RolloutGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub epsilon: f64,
    pub beta: f64,
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(LabError::config("epsilon", format!("must lie in (0, 1), got {}", self.epsilon)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LabError::config("beta", format!("must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Value of `min(r*A, clip(r)*A)` and its derivative with respect to `r`.
fn clipped_term(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

fn check_group(policy: &FactoredPolicy, reference: &FactoredPolicy, group: &RolloutGroup) -> Result<()> {
    policy.same_shape(reference)?;
    if group.query >= policy.queries() {
        return Err(LabError::ShapeMismatch(format!("query {} outside policy", group.query)));
    }
    if let Some(w) = &group.weights {
        if w.len() != group.rollouts.len() {
            return Err(LabError::ShapeMismatch("weights do not match rollouts".into()));
        }
    }
    for r in &group.rollouts {
        let l = policy.positions();
        if r.query != group.query || r.tokens.len() != l || r.old_logprobs.len() != l {
            return Err(LabError::ShapeMismatch(format!(
                "rollout for query {} with {} tokens does not fit group {} / {l} positions",
                r.query,
                r.tokens.len(),
                group.query
            )));
        }
        if r.tokens.iter().any(|&t| t >= policy.vocab_size()) {
            return Err(LabError::ShapeMismatch("token outside vocabulary".into()));
        }
        if let Some(ReshapedAdvantage::Token(a)) = &r.reshaped {
            if a.len() != l {
                return Err(LabError::ShapeMismatch("token advantages do not match length".into()));
            }
        }
    }
    Ok(())
}

/// `KL(p || r)` for two logit rows, and `d KL / d logit_p`.
pub fn categorical_kl(p_logits: &[f64], r_logits: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(p_logits, 1.0);
    let lr = log_softmax(r_logits, 1.0);
    let kl: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
    let grad = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b - kl)).collect();
    (kl, grad)
}

struct Evaluation {
    value: f64,
    gradient: Option<LogitGradient>,
}

fn evaluate(
    policy: &FactoredPolicy,
    reference: &FactoredPolicy,
    group: &RolloutGroup,
    cfg: &SurrogateConfig,
    want_gradient: bool,
) -> Result<Evaluation> {
    cfg.validate()?;
    check_group(policy, reference, group)?;
    let q = group.query;
    let l = policy.positions();
    let rows: Vec<Vec<f64>> = (0..l).map(|t| policy.log_probs(q, t)).collect();
    let mut grad = want_gradient.then(|| LogitGradient::zeros_like(policy));
    let mut value = 0.0;

    // d log pi(o_t) / d logit_v = [v == o_t] - pi(v)
    let add_score = |g: &mut LogitGradient, t: usize, tok: usize, scale: f64| {
        let row = g.row_mut(q, t);
        for (v, lp) in rows[t].iter().enumerate() {
            row[v] -= scale * lp.exp();
        }
        row[tok] += scale;
    };

    for (i, r) in group.rollouts.iter().enumerate() {
        let w = group.weight(i);
        match &r.reshaped {
            Some(ReshapedAdvantage::Token(advs)) => {
                for t in 0..l {
                    let ratio = (rows[t][r.tokens[t]] - r.old_logprobs[t]).exp();
                    let (v, dv) = clipped_term(ratio, advs[t], cfg.epsilon);
                    value += w * v;
                    if let Some(g) = grad.as_mut() {
                        if dv != 0.0 {
                            add_score(g, t, r.tokens[t], w * dv * ratio);
                        }
                    }
                }
            }
            _ => {
                let adv = r.effective_advantage(0);
                let log_ratio: f64 = (0..l).map(|t| rows[t][r.tokens[t]] - r.old_logprobs[t]).sum();
                let ratio = log_ratio.exp();
                let (v, dv) = clipped_term(ratio, adv, cfg.epsilon);
                value += w * v;
                if let Some(g) = grad.as_mut() {
                    if dv != 0.0 {
                        for t in 0..l {
                            add_score(g, t, r.tokens[t], w * dv * ratio);
                        }
                    }
                }
            }
        }
    }

    if cfg.beta > 0.0 {
        for t in 0..l {
            let (kl, dkl) = categorical_kl(policy.logits(q, t), reference.logits(q, t));
            value -= cfg.beta * kl;
            if let Some(g) = grad.as_mut() {
                for (gv, d) in g.row_mut(q, t).iter_mut().zip(dkl) {
                    *gv -= cfg.beta * d;
                }
            }
        }
    }
    Ok(Evaluation { value, gradient: grad })
}

/// Scalar objective for one group.
pub fn surrogate_objective(
    policy: &FactoredPolicy,
    reference: &FactoredPolicy,
    group: &RolloutGroup,
    cfg: &SurrogateConfig,
) -> Result<f64> {
    Ok(evaluate(policy, reference, group, cfg, false)?.value)
}

/// Exact gradient of [`surrogate_objective`] with respect to the current
/// logits. Only the rows of `group.query` are non-zero.
pub fn surrogate_gradient(
    policy: &FactoredPolicy,
    reference: &FactoredPolicy,
    group: &RolloutGroup,
    cfg: &SurrogateConfig,
) -> Result<LogitGradient> {
    Ok(evaluate(policy, reference, group, cfg, true)?
        .gradient
        .expect("gradient requested"))
}

/// Sum of per-token scores weighted by `adv`, i.e. `adv * grad log pi(O)`.
pub fn score_gradient(policy: &FactoredPolicy, rollout: &Rollout, adv: f64) -> LogitGradient {
    let mut g = LogitGradient::zeros_like(policy);
    for (t, &tok) in rollout.tokens.iter().enumerate() {
        let probs = policy.probs(rollout.query, t);
        let row = g.row_mut(rollout.query, t);
        for (v, p) in probs.iter().enumerate() {
            row[v] -= adv * p;
        }
        row[tok] += adv;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn group_of(query: usize, rollouts: Vec<Rollout>) -> RolloutGroup {
        RolloutGroup::from_rollouts(query, rollouts)
    }

    #[test]
    fn zero_advantage_no_kl_gives_zero_gradient() {
        let p = FactoredPolicy::from_logits(1, 2, 3, vec![0.1, 0.5, -0.3, 1.0, 0.0, 0.2]).unwrap();
        let r = p.sample_rollout(0, &mut stream(1, &[]));
        let g = surrogate_gradient(&p, &p, &group_of(0, vec![r]), &SurrogateConfig { epsilon: 0.2, beta: 0.0 }).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn on_policy_gradient_is_advantage_weighted_score() {
        let mut rng = stream(4, &[]);
        let logits: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = FactoredPolicy::from_logits(1, 3, 4, logits).unwrap();
        let mut rs: Vec<Rollout> = (0..4).map(|i| p.sample_rollout(0, &mut stream(4, &[i]))).collect();
        let advs = [1.2, -0.4, 0.3, -1.1];
        for (r, a) in rs.iter_mut().zip(advs) {
            r.advantage = a;
        }
        let g = surrogate_gradient(&p, &p, &group_of(0, rs.clone()), &SurrogateConfig { epsilon: 0.2, beta: 0.0 }).unwrap();
        let mut expected = LogitGradient::zeros_like(&p);
        for (r, a) in rs.iter().zip(advs) {
            expected.add_assign(&score_gradient(&p, r, a / 4.0));
        }
        for (x, y) in g.values().iter().zip(expected.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_epsilon_and_shapes() {
        let p = FactoredPolicy::zeros(1, 2, 3);
        let r = p.sample_rollout(0, &mut stream(1, &[]));
        let grp = group_of(0, vec![r]);
        for eps in [0.0, 1.0, -0.1] {
            assert!(surrogate_gradient(&p, &p, &grp, &SurrogateConfig { epsilon: eps, beta: 0.0 }).is_err());
        }
        let other = FactoredPolicy::zeros(1, 2, 4);
        assert!(surrogate_gradient(&p, &other, &grp, &SurrogateConfig { epsilon: 0.2, beta: 0.0 }).is_err());
    }

    #[test]
    fn clipped_region_has_zero_gradient() {
        assert_eq!(clipped_term(1.5, 2.0, 0.2), (1.2 * 2.0, 0.0));
        assert_eq!(clipped_term(0.5, -1.0, 0.2), (-0.8, 0.0));
        assert_eq!(clipped_term(0.5, 1.0, 0.2), (0.5, 1.0));
        assert_eq!(clipped_term(1.1, 1.0, 0.2), (1.1, 1.0));
    }

    #[test]
    fn kl_example() {
        let (kl, _) = categorical_kl(&[9f64.ln(), 0.0], &[0.0, 0.0]);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-12);
    }
}
