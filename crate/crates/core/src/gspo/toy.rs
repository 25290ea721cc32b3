//! Context-free softmax token policy used to exercise the group objective
//! end to end. Every token of every sequence is drawn from the same
//! categorical distribution `softmax(logits)`.

use rand::Rng;

use super::{group_objective, kl_categorical, GroupObjective, GroupSample, GspoConfig, GspoError};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn check_inputs(logits_new: &[f64], logits_old: &[f64], chosen: &[Vec<usize>], rewards: &[f64]) -> Result<(), GspoError> {
    if logits_new.len() != logits_old.len() || logits_new.is_empty() {
        return Err(GspoError::InvalidConfig("logit vectors must be non-empty and equally sized".into()));
    }
    if chosen.len() != rewards.len() {
        return Err(GspoError::InvalidConfig("one reward per sequence required".into()));
    }
    for (index, seq) in chosen.iter().enumerate() {
        if seq.is_empty() || seq.iter().any(|&t| t >= logits_new.len()) {
            return Err(GspoError::MalformedSample {
                index,
                reason: "empty sequence or token outside the vocabulary".into(),
            });
        }
    }
    Ok(())
}

/// Token log-probabilities of each chosen sequence under both policies.
pub fn toy_samples(
    logits_new: &[f64],
    logits_old: &[f64],
    chosen: &[Vec<usize>],
    rewards: &[f64],
) -> Result<Vec<GroupSample>, GspoError> {
    check_inputs(logits_new, logits_old, chosen, rewards)?;
    let lp_new = log_softmax(logits_new);
    let lp_old = log_softmax(logits_old);
    Ok(chosen
        .iter()
        .zip(rewards)
        .map(|(seq, &reward)| GroupSample {
            logp_new: seq.iter().map(|&t| lp_new[t]).collect(),
            logp_old: seq.iter().map(|&t| lp_old[t]).collect(),
            reward,
        })
        .collect())
}

/// Full objective breakdown with the exact categorical KL penalty.
pub fn toy_objective(
    logits_new: &[f64],
    logits_old: &[f64],
    chosen: &[Vec<usize>],
    rewards: &[f64],
    cfg: &GspoConfig,
) -> Result<GroupObjective, GspoError> {
    let samples = toy_samples(logits_new, logits_old, chosen, rewards)?;
    let kl = kl_categorical(&softmax(logits_new), &softmax(logits_old))?;
    group_objective(&samples, cfg, kl)
}

pub fn toy_surrogate(
    logits_new: &[f64],
    logits_old: &[f64],
    chosen: &[Vec<usize>],
    rewards: &[f64],
    cfg: &GspoConfig,
) -> Result<f64, GspoError> {
    Ok(toy_objective(logits_new, logits_old, chosen, rewards, cfg)?.value)
}

/// Analytic gradient of [`toy_surrogate`] with respect to `logits_new`.
///
/// A sequence contributes `A * d(ratio)` when its unclipped branch is the
/// active side of the min, and nothing when the clipped constant wins. The
/// KL gradient is `p_j (log p_j - log q_j - KL)`.
pub fn toy_surrogate_gradient(
    logits_new: &[f64],
    logits_old: &[f64],
    chosen: &[Vec<usize>],
    rewards: &[f64],
    cfg: &GspoConfig,
) -> Result<Vec<f64>, GspoError> {
    let objective = toy_objective(logits_new, logits_old, chosen, rewards, cfg)?;
    let p = softmax(logits_new);
    let q = softmax(logits_old);
    let vocab = p.len();
    let g = chosen.len() as f64;
    let mut grad = vec![0.0; vocab];

    for (seq, t) in chosen.iter().zip(&objective.per_sequence) {
        if t.ratio * t.advantage > t.clipped * t.advantage {
            continue;
        }
        // d log(ratio) / d logit_j = mean_t [token_t == j] - p_j
        let len = seq.len() as f64;
        let mut counts = vec![0.0; vocab];
        for &tok in seq {
            counts[tok] += 1.0;
        }
        let scale = t.advantage * t.ratio / g;
        for j in 0..vocab {
            grad[j] += scale * (counts[j] / len - p[j]);
        }
    }

    let kl = kl_categorical(&p, &q)?;
    for j in 0..vocab {
        if p[j] > 0.0 {
            grad[j] -= cfg.beta_kl * p[j] * ((p[j] / q[j]).ln() - kl);
        }
    }
    Ok(grad)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>, GspoError>
where
    F: FnMut(&[f64]) -> Result<f64, GspoError>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = f(&probe)?;
        probe[j] = x[j] - h;
        let down = f(&probe)?;
        probe[j] = x[j];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max |a - b| / max(|a|_inf, |b|_inf, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}

/// Draws one token sequence of length `len` from `softmax(logits)`.
pub fn sample_sequence<R: Rng + ?Sized>(logits: &[f64], len: usize, rng: &mut R) -> Vec<usize> {
    let p = softmax(logits);
    (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        })
        .collect()
}
