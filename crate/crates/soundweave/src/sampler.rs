//! Shared inference machinery: classifier-free guidance, the per-step
//! unmask quota schedule, and the iterative parallel decoding loop.
//!
//! Decoding starts from a fully masked sequence. Each step scores every
//! position, samples a candidate token for each still-masked position,
//! ranks candidates by noisy log-probability confidence, commits the step's
//! quota of the most confident, and re-masks the rest. Committed tokens are
//! frozen permanently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{gamma, MaskSchedule};
use crate::nn::tensor::{Scalar, Tensor};

/// Combined logits are clamped to this magnitude before sampling; at large
/// guidance scales the extrapolation can otherwise overflow f32 softmax.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Sampling temperature per step; 0 means argmax.
    pub temperatures: Vec<f64>,
    /// Gumbel confidence-noise scale per step.
    pub noise_scales: Vec<f64>,
    /// Schedule driving how many positions stay masked after each step.
    pub schedule: MaskSchedule,
}

impl DecodeConfig {
    /// Linear temperature 1 -> 0 over the steps, noise annealed identically.
    pub fn new(steps: usize, cfg_scale: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("decoding needs at least one step".into()));
        }
        if cfg_scale < 0.0 || !cfg_scale.is_finite() {
            return Err(Error::Config(format!(
                "guidance scale {cfg_scale} must be finite and non-negative"
            )));
        }
        let temperatures: Vec<f64> = if steps == 1 {
            vec![0.0]
        } else {
            (0..steps)
                .map(|j| 1.0 - j as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(DecodeConfig {
            steps,
            cfg_scale,
            noise_scales: temperatures.clone(),
            temperatures,
            schedule: MaskSchedule::default(),
        })
    }
}

/// Conditional and unconditional logits for one masked sequence, plus an
/// optional per-position set of structurally allowed tokens (used by the
/// acoustic stage to keep generated code words inside the codec image).
pub struct ScoredLogits<F> {
    pub cond: Tensor<F>,
    pub uncond: Tensor<F>,
    pub allowed: Option<Vec<Vec<bool>>>,
}

impl<F: Scalar> ScoredLogits<F> {
    pub fn new(cond: Tensor<F>, uncond: Tensor<F>) -> Self {
        ScoredLogits {
            cond,
            uncond,
            allowed: None,
        }
    }
}

/// uncond + scale * (cond - uncond). The identity cases are exact: scale 1
/// returns the conditional logits, scale 0 the unconditional ones.
pub fn cfg_combine<F: Scalar>(
    cond: &Tensor<F>,
    uncond: &Tensor<F>,
    scale: f64,
) -> Result<Tensor<F>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Shape(format!(
            "conditional logits {:?} and unconditional logits {:?} differ",
            cond.shape(),
            uncond.shape()
        )));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let s = F::from_f64(scale);
    let mut out = uncond.clone();
    for (o, (&c, &u)) in out
        .data_mut()
        .iter_mut()
        .zip(cond.data().iter().zip(uncond.data()))
    {
        *o = u + s * (c - u);
    }
    Ok(out)
}

/// Number of positions to commit at each step so that after step j (1-based)
/// exactly floor(gamma(j/steps) * total) positions remain masked, forced to
/// zero at the final step.
pub fn unmask_counts(
    total_masked: usize,
    steps: usize,
    schedule: &MaskSchedule,
) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let mut counts = Vec::with_capacity(steps);
    let mut remaining = total_masked;
    for j in 1..=steps {
        let next = if j == steps {
            0
        } else {
            let g = gamma(j as f64 / steps as f64, schedule)?;
            ((g * total_masked as f64).floor() as usize).min(remaining)
        };
        counts.push(remaining - next);
        remaining = next;
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), total_masked);
    Ok(counts)
}

/// What one decoding step committed; used by tests to verify quotas and the
/// freezing rule.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub committed_positions: Vec<usize>,
    pub sequence_after: Vec<u32>,
}

/// Run iterative parallel decoding. `score_fn` receives the current masked
/// sequence and returns conditional/unconditional logits over every position.
pub fn iterative_decode<F, S>(
    mut score_fn: S,
    length: usize,
    mask_id: u32,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>>
where
    F: Scalar,
    S: FnMut(&[u32]) -> Result<ScoredLogits<F>>,
{
    Ok(iterative_decode_traced(&mut score_fn, length, mask_id, config, rng)?.0)
}

/// As [`iterative_decode`] but also returns the per-step trace.
pub fn iterative_decode_traced<F, S>(
    score_fn: &mut S,
    length: usize,
    mask_id: u32,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, Vec<StepTrace>)>
where
    F: Scalar,
    S: FnMut(&[u32]) -> Result<ScoredLogits<F>>,
{
    if config.temperatures.len() != config.steps || config.noise_scales.len() != config.steps {
        return Err(Error::Config(
            "temperature and noise schedules must have one entry per step".into(),
        ));
    }
    let counts = unmask_counts(length, config.steps, &config.schedule)?;
    let mut sequence = vec![mask_id; length];
    let mut masked: Vec<usize> = (0..length).collect();
    let mut trace = Vec::with_capacity(config.steps);

    for (step, &quota) in counts.iter().enumerate() {
        if masked.is_empty() {
            trace.push(StepTrace {
                committed_positions: Vec::new(),
                sequence_after: sequence.clone(),
            });
            continue;
        }
        let scored = score_fn(&sequence)?;
        if scored.cond.rows() != length || scored.uncond.rows() != length {
            return Err(Error::Shape(format!(
                "score rows {} / {} do not cover the sequence length {length}",
                scored.cond.rows(),
                scored.uncond.rows()
            )));
        }
        let combined = cfg_combine(&scored.cond, &scored.uncond, config.cfg_scale)?;
        let vocab = combined.cols();
        let temperature = config.temperatures[step];
        let noise_scale = config.noise_scales[step];

        // (position, candidate, confidence) for every still-masked position.
        let mut candidates = Vec::with_capacity(masked.len());
        for &pos in &masked {
            let raw = combined.row(pos);
            let allowed = scored.allowed.as_ref().map(|a| &a[pos]);
            let mut row = Vec::with_capacity(vocab);
            for (j, &x) in raw.iter().enumerate() {
                let x = x.to_f64();
                if !x.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite combined logit at position {pos}, token {j}"
                    )));
                }
                let mut v = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                if let Some(mask) = allowed {
                    if !mask[j] {
                        v = f64::NEG_INFINITY;
                    }
                }
                row.push(v);
            }
            let candidate = if temperature == 0.0 {
                argmax(&row)
            } else {
                sample_softmax(&row, temperature, rng.gen::<f64>())
            };
            let log_prob = log_softmax_at(&row, candidate);
            let confidence = if noise_scale > 0.0 {
                log_prob + noise_scale * gumbel(rng.gen::<f64>())
            } else {
                log_prob
            };
            candidates.push((pos, candidate as u32, confidence));
        }

        // Highest confidence first; ties (probability zero under the Gumbel
        // noise) break towards the earlier position.
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut committed = Vec::with_capacity(quota);
        for &(pos, token, _) in candidates.iter().take(quota) {
            sequence[pos] = token;
            committed.push(pos);
        }
        committed.sort_unstable();
        masked.retain(|p| !committed.contains(p));
        trace.push(StepTrace {
            committed_positions: committed,
            sequence_after: sequence.clone(),
        });
    }
    debug_assert!(sequence.iter().all(|&t| t != mask_id));
    Ok((sequence, trace))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if x > best_val {
            best_val = x;
            best = j;
        }
    }
    best
}

/// Sample from softmax(row / temperature) by inverse CDF.
fn sample_softmax(row: &[f64], temperature: f64, u: f64) -> usize {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        max = max.max(x);
    }
    let mut weights = Vec::with_capacity(row.len());
    let mut total = 0.0;
    for &x in row {
        let w = if x.is_finite() {
            ((x - max) / temperature).exp()
        } else {
            0.0
        };
        total += w;
        weights.push(w);
    }
    let target = u * total;
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if acc >= target && w > 0.0 {
            return j;
        }
    }
    argmax(row)
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        max = max.max(x);
    }
    let mut sum = 0.0;
    for &x in row {
        if x.is_finite() {
            sum += (x - max).exp();
        }
    }
    row[index] - max - sum.ln()
}

/// Standard Gumbel noise from a uniform draw in [0, 1).
fn gumbel(u: f64) -> f64 {
    -(-(u.max(1e-300)).ln()).ln()
}
