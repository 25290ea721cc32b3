//! Sequence-level clipped policy objective with clipped advantage scaling.
//!
//! The functions here operate on caller-supplied per-token log-probabilities;
//! no autodiff is involved. [`toy`] builds the same objective over a softmax
//! categorical policy so analytic gradients can be checked against finite
//! differences.

pub mod demo;
pub mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GspoError {
    #[error("sample {index}: {reason}")]
    MalformedSample { index: usize, reason: String },
    #[error("advantage group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("expected {expected} samples per group, got {actual}")]
    GroupSizeMismatch { expected: usize, actual: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// One generated sequence: token log-probabilities under the current and the
/// behaviour policy, plus its scalar reward.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
}

impl GroupSample {
    fn check(&self, index: usize) -> Result<(), GspoError> {
        let bad = |reason: &str| GspoError::MalformedSample { index, reason: reason.to_string() };
        if self.logp_new.len() != self.logp_old.len() {
            return Err(bad("log-probability lists differ in length"));
        }
        if self.logp_new.is_empty() {
            return Err(bad("empty sequence"));
        }
        if !self.logp_new.iter().chain(&self.logp_old).all(|v| v.is_finite() && *v <= 0.0) {
            return Err(bad("log-probabilities must be finite and <= 0"));
        }
        if !self.reward.is_finite() {
            return Err(bad("non-finite reward"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    /// `(r - mean) * clip(1 / std, 0, scale_max)`.
    #[default]
    Clipped,
    /// Plain `(r - mean) / std`; all zeros when `std == 0`.
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GspoConfig {
    pub epsilon: f64,
    pub beta_kl: f64,
    pub scale_max: f64,
    pub group_size: usize,
    #[serde(default)]
    pub advantage: AdvantageMode,
}

impl Default for GspoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            beta_kl: 0.001,
            scale_max: 3.0,
            group_size: 4,
            advantage: AdvantageMode::Clipped,
        }
    }
}

impl GspoConfig {
    pub fn validate(&self) -> Result<(), GspoError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(GspoError::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(GspoError::InvalidConfig("beta_kl must be >= 0".into()));
        }
        if !(self.scale_max > 0.0 && self.scale_max.is_finite()) {
            return Err(GspoError::InvalidConfig("scale_max must be > 0".into()));
        }
        if self.group_size < 2 {
            return Err(GspoError::InvalidConfig("group_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SequenceTerm {
    /// Length-normalised importance ratio.
    pub ratio: f64,
    pub clipped: f64,
    pub advantage: f64,
    /// `min(ratio * advantage, clipped * advantage)`.
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupObjective {
    pub value: f64,
    pub per_sequence: Vec<SequenceTerm>,
    pub kl_term: f64,
}

/// `exp(mean(logp_new - logp_old))`, the geometric-mean per-token ratio.
pub fn seq_ratio(s: &GroupSample) -> Result<f64, GspoError> {
    s.check(0)?;
    Ok(log_ratio(s).exp())
}

fn log_ratio(s: &GroupSample) -> f64 {
    let sum: f64 = s.logp_new.iter().zip(&s.logp_old).map(|(n, o)| n - o).sum();
    sum / s.logp_new.len() as f64
}

pub fn clip_ratio(s1: f64, epsilon: f64) -> f64 {
    s1.clamp(1.0 - epsilon, 1.0 + epsilon)
}

fn mean_and_std(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Clipped advantage scaling. `std` is the population standard deviation;
/// a zero `std` saturates the scale at `scale_max` (all deviations are zero).
pub fn cas_advantages(rewards: &[f64], scale_max: f64) -> Result<Vec<f64>, GspoError> {
    if rewards.len() < 2 {
        return Err(GspoError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_and_std(rewards);
    let scale = if std > 0.0 { (1.0 / std).clamp(0.0, scale_max) } else { scale_max };
    Ok(rewards.iter().map(|r| (r - mean) * scale).collect())
}

/// Raw group standardisation `(r - mean) / std`, kept for ablations.
pub fn standardized_advantages(rewards: &[f64]) -> Result<Vec<f64>, GspoError> {
    if rewards.len() < 2 {
        return Err(GspoError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_and_std(rewards);
    Ok(rewards
        .iter()
        .map(|r| if std > 0.0 { (r - mean) / std } else { 0.0 })
        .collect())
}

pub fn advantages(rewards: &[f64], cfg: &GspoConfig) -> Result<Vec<f64>, GspoError> {
    match cfg.advantage {
        AdvantageMode::Clipped => cas_advantages(rewards, cfg.scale_max),
        AdvantageMode::Standardized => standardized_advantages(rewards),
    }
}

/// Group surrogate: mean of the pessimistic clipped terms minus `beta_kl * kl`.
pub fn group_objective(samples: &[GroupSample], cfg: &GspoConfig, kl: f64) -> Result<GroupObjective, GspoError> {
    cfg.validate()?;
    if samples.len() != cfg.group_size {
        return Err(GspoError::GroupSizeMismatch { expected: cfg.group_size, actual: samples.len() });
    }
    if !(kl >= 0.0 && kl.is_finite()) {
        return Err(GspoError::InvalidConfig(format!("kl must be finite and >= 0, got {kl}")));
    }
    for (i, s) in samples.iter().enumerate() {
        s.check(i)?;
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let adv = advantages(&rewards, cfg)?;

    let per_sequence: Vec<SequenceTerm> = samples
        .iter()
        .zip(&adv)
        .map(|(s, &a)| {
            let ratio = log_ratio(s).exp();
            let clipped = clip_ratio(ratio, cfg.epsilon);
            SequenceTerm { ratio, clipped, advantage: a, term: (ratio * a).min(clipped * a) }
        })
        .collect();
    let surrogate = per_sequence.iter().map(|t| t.term).sum::<f64>() / per_sequence.len() as f64;
    let kl_term = cfg.beta_kl * kl;
    Ok(GroupObjective { value: surrogate - kl_term, per_sequence, kl_term })
}

/// `sum p log(p / q)` over a shared support.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, GspoError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(GspoError::InvalidDistribution("supports differ".into()));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(GspoError::InvalidDistribution(format!("{name} has negative or non-finite mass")));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GspoError::InvalidDistribution(format!("{name} sums to {total}")));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(GspoError::InvalidDistribution("q is zero where p is positive".into()));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}
