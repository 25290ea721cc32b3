//! Hill-climbing run of the toy policy plus advantage-stability and gradient
//! diagnostics. Backs the `gspo-demo` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::toy::{central_difference, relative_error, sample_sequence, toy_objective, toy_surrogate, toy_surrogate_gradient};
use super::{cas_advantages, standardized_advantages, AdvantageMode, GspoConfig, GspoError};

#[derive(Debug, Clone, Serialize)]
pub struct DemoConfig {
    pub gspo: GspoConfig,
    pub steps: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Gradient-ascent step size on the logits.
    pub learning_rate: f64,
    /// Gradient-ascent iterations per sampled group.
    pub inner_steps: usize,
    /// Standard deviation of the near-degenerate reward group used by the
    /// stability probe.
    pub inject_sigma: f64,
    pub gradient_checks: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            gspo: GspoConfig::default(),
            steps: 60,
            vocab: 8,
            max_len: 6,
            learning_rate: 2.0,
            inner_steps: 4,
            inject_sigma: 1e-6,
            gradient_checks: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub mean_ratio: f64,
    pub max_abs_advantage: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityProbe {
    pub sigma: f64,
    pub max_deviation: f64,
    pub standardized_max_abs: f64,
    pub cas_max_abs: f64,
    /// `max_k |A_k| / |r_k - mean|` under plain standardisation (equals `1 / sigma`).
    pub standardized_gain: f64,
    pub cas_gain: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub instances: usize,
    pub rejected_near_kink: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub steps: Vec<StepRecord>,
    pub initial_expected_reward: f64,
    pub final_expected_reward: f64,
    pub probe: StabilityProbe,
    pub gradient: GradientCheck,
    pub checks: Vec<Check>,
}

/// Per-token score; the best policy always emits the last token.
fn token_score(token: usize, vocab: usize) -> f64 {
    token as f64 / (vocab - 1) as f64
}

fn sequence_reward(seq: &[usize], vocab: usize) -> f64 {
    seq.iter().map(|&t| token_score(t, vocab)).sum::<f64>() / seq.len() as f64
}

fn expected_reward(logits: &[f64]) -> f64 {
    let p = super::toy::softmax(logits);
    let vocab = p.len();
    p.iter().enumerate().map(|(t, pt)| pt * token_score(t, vocab)).sum()
}

/// Rewards with population standard deviation exactly `sigma` around 0.5.
pub fn near_degenerate_group(size: usize, sigma: f64) -> Vec<f64> {
    let pattern: Vec<f64> = (0..size).map(|k| if k % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let mean = pattern.iter().sum::<f64>() / size as f64;
    let centred: Vec<f64> = pattern.iter().map(|p| p - mean).collect();
    let std = (centred.iter().map(|c| c * c).sum::<f64>() / size as f64).sqrt();
    centred.iter().map(|c| 0.5 + c / std * sigma).collect()
}

pub fn stability_probe(group_size: usize, sigma: f64, scale_max: f64) -> Result<StabilityProbe, GspoError> {
    let rewards = near_degenerate_group(group_size, sigma);
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let dev: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let raw = standardized_advantages(&rewards)?;
    let cas = cas_advantages(&rewards, scale_max)?;
    let max_abs = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let gain = |adv: &[f64]| {
        adv.iter()
            .zip(&dev)
            .filter(|(_, d)| d.abs() > 0.0)
            .map(|(a, d)| a.abs() / d.abs())
            .fold(0.0, f64::max)
    };
    Ok(StabilityProbe {
        sigma,
        max_deviation: max_abs(&dev),
        standardized_max_abs: max_abs(&raw),
        cas_max_abs: max_abs(&cas),
        standardized_gain: gain(&raw),
        cas_gain: gain(&cas),
    })
}

/// Analytic-vs-central-difference comparison over random toy instances.
/// Instances whose ratio lies within `kink_margin` of a clip boundary are
/// resampled since the surrogate is not differentiable there.
pub fn gradient_check<R: Rng>(
    cfg: &GspoConfig,
    vocab: usize,
    max_len: usize,
    instances: usize,
    rng: &mut R,
) -> Result<GradientCheck, GspoError> {
    const H: f64 = 1e-5;
    let kink_margin = 50.0 * H;
    let mut worst: f64 = 0.0;
    let mut rejected = 0;
    let mut done = 0;
    while done < instances {
        let old: Vec<f64> = (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spread = 2.0 * cfg.epsilon;
        let new: Vec<f64> = old.iter().map(|o| o + rng.random_range(-spread..spread)).collect();
        let chosen: Vec<Vec<usize>> = (0..cfg.group_size)
            .map(|_| {
                let len = rng.random_range(1..=max_len);
                sample_sequence(&old, len, rng)
            })
            .collect();
        let rewards: Vec<f64> = (0..cfg.group_size).map(|_| rng.random_range(0.0..1.0)).collect();

        let obj = toy_objective(&new, &old, &chosen, &rewards, cfg)?;
        let near_kink = obj.per_sequence.iter().any(|t| {
            (t.ratio - (1.0 + cfg.epsilon)).abs() < kink_margin || (t.ratio - (1.0 - cfg.epsilon)).abs() < kink_margin
        });
        if near_kink {
            rejected += 1;
            continue;
        }
        let analytic = toy_surrogate_gradient(&new, &old, &chosen, &rewards, cfg)?;
        let numeric = central_difference(&new, H, |x| toy_surrogate(x, &old, &chosen, &rewards, cfg))?;
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
        done += 1;
    }
    Ok(GradientCheck { instances, rejected_near_kink: rejected, max_relative_error: worst })
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoReport, GspoError> {
    cfg.gspo.validate()?;
    if cfg.vocab < 2 || cfg.max_len == 0 {
        return Err(GspoError::InvalidConfig("vocab must be >= 2 and max_len >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logits = vec![0.0; cfg.vocab];
    let initial_expected_reward = expected_reward(&logits);
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let old = logits.clone();
        let chosen: Vec<Vec<usize>> = (0..cfg.gspo.group_size)
            .map(|_| {
                let len = rng.random_range(1..=cfg.max_len);
                sample_sequence(&old, len, &mut rng)
            })
            .collect();
        let rewards: Vec<f64> = chosen.iter().map(|s| sequence_reward(s, cfg.vocab)).collect();

        let mut current = old.clone();
        for _ in 0..cfg.inner_steps {
            let grad = toy_surrogate_gradient(&current, &old, &chosen, &rewards, &cfg.gspo)?;
            for (c, g) in current.iter_mut().zip(&grad) {
                *c += cfg.learning_rate * g;
            }
        }
        let obj = toy_objective(&current, &old, &chosen, &rewards, &cfg.gspo)?;
        let n = obj.per_sequence.len() as f64;
        steps.push(StepRecord {
            step,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            objective: obj.value,
            mean_ratio: obj.per_sequence.iter().map(|t| t.ratio).sum::<f64>() / n,
            max_abs_advantage: obj.per_sequence.iter().map(|t| t.advantage.abs()).fold(0.0, f64::max),
            kl: if cfg.gspo.beta_kl > 0.0 { obj.kl_term / cfg.gspo.beta_kl } else { 0.0 },
        });
        logits = current;
    }

    let probe = stability_probe(cfg.gspo.group_size, cfg.inject_sigma, cfg.gspo.scale_max)?;
    let gradient = gradient_check(&cfg.gspo, cfg.vocab, cfg.max_len, cfg.gradient_checks, &mut rng)?;
    let final_expected_reward = expected_reward(&logits);

    let mut checks = vec![
        Check {
            name: format!(
                "clipped max |A| {:.3e} <= scale_max * max|r - mean| {:.3e}",
                probe.cas_max_abs,
                cfg.gspo.scale_max * probe.max_deviation
            ),
            passed: probe.cas_max_abs <= cfg.gspo.scale_max * probe.max_deviation * (1.0 + 1e-12),
        },
        Check {
            name: format!("gradient check max relative error {:.3e} < 1e-4", gradient.max_relative_error),
            passed: gradient.max_relative_error < 1e-4,
        },
    ];
    if cfg.gspo.advantage == AdvantageMode::Standardized {
        checks.push(Check {
            name: format!("standardized advantage gain {:.3e} >= 1e5", probe.standardized_gain),
            passed: probe.standardized_gain >= 1e5,
        });
    } else {
        checks.push(Check {
            name: format!(
                "expected reward improved {:.4} -> {:.4}",
                initial_expected_reward, final_expected_reward
            ),
            passed: final_expected_reward > initial_expected_reward,
        });
    }

    Ok(DemoReport {
        config: cfg.clone(),
        steps,
        initial_expected_reward,
        final_expected_reward,
        probe,
        gradient,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_degenerate_group_has_requested_sigma() {
        for g in [2, 3, 4, 7] {
            let r = near_degenerate_group(g, 1e-3);
            let mean = r.iter().sum::<f64>() / g as f64;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
            assert!((std - 1e-3).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_contrast() {
        let p = stability_probe(4, 1e-6, 3.0).unwrap();
        assert!(p.standardized_gain >= 1e5);
        assert!(p.cas_max_abs <= 3.0 * p.max_deviation * (1.0 + 1e-12));
        assert!((p.cas_gain - 3.0).abs() < 1e-9);
    }

    #[test]
    fn demo_improves_and_is_reproducible() {
        let cfg = DemoConfig { steps: 40, gradient_checks: 3, ..DemoConfig::default() };
        let a = run_demo(&cfg).unwrap();
        assert!(a.final_expected_reward > a.initial_expected_reward);
        assert!(a.checks.iter().all(|c| c.passed), "{:?}", a.checks);
        let b = run_demo(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn demo_without_clipping_reports_gain() {
        let mut cfg = DemoConfig { steps: 5, gradient_checks: 2, ..DemoConfig::default() };
        cfg.gspo.advantage = AdvantageMode::Standardized;
        let r = run_demo(&cfg).unwrap();
        assert!(r.checks.iter().all(|c| c.passed), "{:?}", r.checks);
    }
}
