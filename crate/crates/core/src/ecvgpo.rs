//! Self-information advantage reshaping.
//!
//! Positive advantages are shifted by the rollout's self-information scaled
//! by `1/r0`, floored at `A/l0` so a positive sample never turns negative.
//! The shift applies only when the group's reward spread is below `delta`.
//! A positive `r0` penalizes low-confidence positives and lowers entropy; a
//! negative `r0` rewards them and raises entropy.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grpo::RolloutGroup;
use crate::policy::{ReshapedAdvantage, Rollout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One self-information value per rollout (mean over its tokens).
    Sequence,
    /// One self-information value per token.
    Token,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Sequence => "sequence",
            Granularity::Token => "token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReshapeParams {
    pub r0: f64,
    pub l0: f64,
    pub delta: f64,
    pub granularity: Granularity,
}

impl Default for ReshapeParams {
    fn default() -> Self {
        Self {
            r0: 10.0,
            l0: 25.0,
            delta: f64::INFINITY,
            granularity: Granularity::Sequence,
        }
    }
}

impl ReshapeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0.abs() > 1.0) || self.r0.is_nan() {
            return Err(LabError::config("r0", format!("|r0| must exceed 1, got {}", self.r0)));
        }
        self.validate_bounds()
    }

    /// Checks `l0` and `delta` only; used when reshaping is switched off.
    pub fn validate_bounds(&self) -> Result<()> {
        if !(self.l0 > 1.0 && self.l0.is_finite()) {
            return Err(LabError::config("l0", format!("must exceed 1, got {}", self.l0)));
        }
        if !(self.delta > 0.0) {
            return Err(LabError::config("delta", format!("must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Mean negative log-probability of the rollout's tokens under the sampling
/// snapshot.
pub fn self_information_sequence(rollout: &Rollout) -> Result<f64> {
    if rollout.old_logprobs.is_empty() {
        return Err(LabError::InvalidArgument("self-information of an empty sequence".into()));
    }
    Ok(-rollout.old_logprobs.iter().sum::<f64>() / rollout.old_logprobs.len() as f64)
}

pub fn self_information_token(rollout: &Rollout, t: usize) -> Result<f64> {
    rollout
        .old_logprobs
        .get(t)
        .map(|lp| -lp)
        .ok_or_else(|| LabError::InvalidArgument(format!("token {t} out of range for length {}", rollout.len())))
}

pub fn reshape_advantage(adv: f64, self_info: f64, params: &ReshapeParams, r_std: f64) -> f64 {
    if adv > 0.0 && r_std < params.delta {
        (adv / params.l0).max(adv - self_info / params.r0)
    } else {
        adv
    }
}

/// Fills `reshaped` for every rollout of a standardized group.
pub fn reshape_group(group: &mut RolloutGroup, params: &ReshapeParams) -> Result<()> {
    params.validate()?;
    group.gate_open = group.r_std < params.delta;
    let r_std = group.r_std;
    for r in &mut group.rollouts {
        let a = r.advantage;
        r.reshaped = Some(match params.granularity {
            Granularity::Sequence => {
                ReshapedAdvantage::Sequence(reshape_advantage(a, self_information_sequence(r)?, params, r_std))
            }
            Granularity::Token => ReshapedAdvantage::Token(
                (0..r.len())
                    .map(|t| Ok(reshape_advantage(a, self_information_token(r, t)?, params, r_std)))
                    .collect::<Result<_>>()?,
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceTerms {
    /// `Cov(log pi, pi * (A - k log pi))`, computed directly.
    pub total: f64,
    /// `Cov(log pi, pi * A)`.
    pub base: f64,
    /// `Cov(log pi, pi * log pi)`.
    pub entropy_term: f64,
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

/// Sample covariances over `(log pi, A)` pairs.
pub fn covariance_terms(samples: &[(f64, f64)], k: f64) -> Result<CovarianceTerms> {
    if samples.len() < 2 {
        return Err(LabError::InvalidArgument("covariance needs at least 2 samples".into()));
    }
    let logp: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let weighted = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { samples.iter().map(|&(lp, a)| lp.exp() * f(lp, a)).collect() };
    Ok(CovarianceTerms {
        total: sample_cov(&logp, &weighted(&|lp, a| a - k * lp)),
        base: sample_cov(&logp, &weighted(&|_, a| a)),
        entropy_term: sample_cov(&logp, &weighted(&|lp, _| lp)),
    })
}

/// [`covariance_terms`] over rollouts, using each rollout's sequence
/// log-probability under the sampling snapshot and its advantage.
pub fn covariance_diagnostic(rollouts: &[Rollout], k: f64) -> Result<CovarianceTerms> {
    let samples: Vec<(f64, f64)> = rollouts.iter().map(|r| (r.old_sequence_logprob(), r.advantage)).collect();
    covariance_terms(&samples, k)
}
