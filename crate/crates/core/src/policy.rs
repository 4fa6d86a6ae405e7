//! RL objective numerics over caller-supplied rewards, value estimates and
//! log-probabilities: TD errors, generalized advantage estimation, the PPO
//! clipped surrogate, and a sample-based KL penalty.
//!
//! Nothing here updates parameters. Each trajectory step is one position in
//! the series; its scaled reward is the reward at that position.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest log-ratio accepted before `exp` is considered an overflow.
pub const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("length mismatch: {what} (expected {expected}, got {actual})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("probability ratio overflow: log-ratio {0} exceeds {MAX_LOG_RATIO}")]
    RatioOverflow(f64),
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("empty input")]
    Empty,
}

type Result<T> = std::result::Result<T, OptimError>;

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OptimError::NonFinite(what))
    }
}

fn check_unit(value: f64, name: &'static str) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(OptimError::InvalidParameter { name, value })
    }
}

/// `delta[t] = rewards[t] + gamma * values[t + 1] - values[t]`.
///
/// `values` has one more entry than `rewards`; the last is the bootstrap
/// value (0 at termination).
pub fn td_errors(rewards: &[f64], values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(OptimError::LengthMismatch {
            what: "values must have one more entry than rewards",
            expected: rewards.len() + 1,
            actual: values.len(),
        });
    }
    check_unit(gamma, "gamma")?;
    check_finite(rewards, "rewards")?;
    check_finite(values, "values")?;
    Ok(rewards
        .iter()
        .enumerate()
        .map(|(t, r)| r + gamma * values[t + 1] - values[t])
        .collect())
}

/// Backward recursion `A[t] = delta[t] + gamma * lam * A[t + 1]`.
pub fn gae(deltas: &[f64], gamma: f64, lam: f64) -> Result<Vec<f64>> {
    check_unit(gamma, "gamma")?;
    check_unit(lam, "lam")?;
    check_finite(deltas, "deltas")?;
    let decay = gamma * lam;
    let mut advantages = vec![0.0; deltas.len()];
    let mut running = 0.0;
    for t in (0..deltas.len()).rev() {
        running = deltas[t] + decay * running;
        advantages[t] = running;
    }
    Ok(advantages)
}

/// Full per-trajectory advantage computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSeries {
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub gamma: f64,
    pub lam: f64,
    pub deltas: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl AdvantageSeries {
    pub fn compute(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64) -> Result<Self> {
        let deltas = td_errors(&rewards, &values, gamma)?;
        let advantages = gae(&deltas, gamma, lam)?;
        Ok(Self {
            rewards,
            values,
            gamma,
            lam,
            deltas,
            advantages,
        })
    }

    /// Advantage plus baseline value: the critic's regression target.
    pub fn returns(&self) -> Vec<f64> {
        self.advantages
            .iter()
            .zip(&self.values)
            .map(|(a, v)| a + v)
            .collect()
    }
}

/// `exp(logp_new - logp_old)`, rejecting overflow.
pub fn probability_ratio(logp_new: f64, logp_old: f64) -> Result<f64> {
    let log_ratio = logp_new - logp_old;
    if !log_ratio.is_finite() {
        return Err(OptimError::NonFinite("log-probabilities"));
    }
    if log_ratio > MAX_LOG_RATIO {
        return Err(OptimError::RatioOverflow(log_ratio));
    }
    Ok(log_ratio.exp())
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)` for one position.
pub fn ppo_clip_term(logp_new: f64, logp_old: f64, advantage: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(OptimError::InvalidParameter {
            name: "epsilon",
            value: epsilon,
        });
    }
    if !advantage.is_finite() {
        return Err(OptimError::NonFinite("advantage"));
    }
    let ratio = probability_ratio(logp_new, logp_old)?;
    Ok(clip_term_from_ratio(ratio, advantage, epsilon))
}

/// The clipped term given the ratio directly.
pub fn clip_term_from_ratio(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// Mean per-position log-ratio `logp_ref - logp_cur`; 0 for empty input.
pub fn kl_penalty(logp_ref: &[f64], logp_cur: &[f64]) -> Result<f64> {
    if logp_ref.len() != logp_cur.len() {
        return Err(OptimError::LengthMismatch {
            what: "reference and current log-probabilities",
            expected: logp_ref.len(),
            actual: logp_cur.len(),
        });
    }
    check_finite(logp_ref, "logp_ref")?;
    check_finite(logp_cur, "logp_cur")?;
    if logp_ref.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logp_ref.iter().zip(logp_cur).map(|(r, c)| r - c).sum();
    Ok(sum / logp_ref.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateInputs {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub advantages: Vec<f64>,
    pub epsilon: f64,
    pub beta: f64,
}

impl SurrogateInputs {
    pub fn validate(&self) -> Result<()> {
        let n = self.logp_new.len();
        for (what, len) in [
            ("logp_old", self.logp_old.len()),
            ("logp_ref", self.logp_ref.len()),
            ("advantages", self.advantages.len()),
        ] {
            if len != n {
                return Err(OptimError::LengthMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        for (what, list) in [
            ("logp_new", &self.logp_new),
            ("logp_old", &self.logp_old),
            ("logp_ref", &self.logp_ref),
        ] {
            check_finite(list, what)?;
            if let Some(&v) = list.iter().find(|&&v| v > 0.0) {
                return Err(OptimError::InvalidParameter { name: what, value: v });
            }
        }
        check_finite(&self.advantages, "advantages")?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(OptimError::InvalidParameter {
                name: "beta",
                value: self.beta,
            });
        }
        Ok(())
    }
}

/// Mean clipped surrogate over positions plus `beta` times the KL penalty
/// against the reference policy.
pub fn rl_objective(inputs: &SurrogateInputs) -> Result<f64> {
    inputs.validate()?;
    if inputs.logp_new.is_empty() {
        return Err(OptimError::Empty);
    }
    let mut total = 0.0;
    for i in 0..inputs.logp_new.len() {
        total += ppo_clip_term(
            inputs.logp_new[i],
            inputs.logp_old[i],
            inputs.advantages[i],
            inputs.epsilon,
        )?;
    }
    let surrogate = total / inputs.logp_new.len() as f64;
    let kl = kl_penalty(&inputs.logp_ref, &inputs.logp_new)?;
    Ok(surrogate + inputs.beta * kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub gamma: f64,
    pub lam: f64,
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lam: 0.95,
            epsilon: 0.2,
            beta: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit(self.gamma, "gamma")?;
        check_unit(self.lam, "lam")?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OptimError::InvalidParameter {
                name: "epsilon",
                value: self.epsilon,
            });
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(OptimError::InvalidParameter {
                name: "beta",
                value: self.beta,
            });
        }
        Ok(())
    }
}
