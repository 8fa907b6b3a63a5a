//! Mask-and-predict machinery: the masking-ratio schedule, Bernoulli mask
//! sampling, mask application, and the masked cross-entropy loss used by both
//! pipeline stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Masking-ratio schedule gamma(t) on t in [0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    /// Positive floor keeping gamma inside (0, 1].
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule {
            kind: ScheduleKind::Cosine,
            epsilon: 1e-4,
        }
    }
}

/// Binary mask over one token sequence plus the time parameter it was drawn at.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    mask: Vec<bool>,
    t: f64,
}

impl MaskState {
    pub fn new(mask: Vec<bool>, t: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Domain(format!("mask time {t} outside [0, 1)")));
        }
        Ok(MaskState { mask, t })
    }

    /// All positions masked, t = 0 (the fully-masked state decoding starts from).
    pub fn full(length: usize) -> Self {
        MaskState {
            mask: vec![true; length],
            t: 0.0,
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Masking probability at time t.
pub fn gamma(t: f64, schedule: &MaskSchedule) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("schedule time {t} outside [0, 1)")));
    }
    let value = match schedule.kind {
        ScheduleKind::Cosine => (std::f64::consts::PI * t / 2.0).cos(),
    };
    Ok(value.max(schedule.epsilon))
}

/// Draw a Bernoulli(gamma(t)) mask of the given length.
pub fn sample_mask(
    length: usize,
    t: f64,
    schedule: &MaskSchedule,
    rng: &mut impl Rng,
) -> Result<MaskState> {
    if length == 0 {
        return Err(Error::Domain("mask length must be positive".into()));
    }
    let p = gamma(t, schedule)?;
    let mask = (0..length).map(|_| rng.gen_bool(p)).collect();
    MaskState::new(mask, t)
}

/// Replace masked positions with the mask sentinel; the input is untouched.
pub fn apply_mask(tokens: &[u32], mask: &MaskState, mask_id: u32) -> Result<Vec<u32>> {
    if tokens.len() != mask.len() {
        return Err(Error::Shape(format!(
            "mask length {} does not match sequence length {}",
            mask.len(),
            tokens.len()
        )));
    }
    Ok(tokens
        .iter()
        .zip(mask.mask())
        .map(|(&tok, &m)| if m { mask_id } else { tok })
        .collect())
}

/// Value of a masked cross-entropy loss plus the number of positions that
/// contributed. `masked_positions == 0` marks a degenerate batch item.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub masked_positions: usize,
}

impl MaskedLoss {
    pub fn is_degenerate(&self) -> bool {
        self.masked_positions == 0
    }
}

/// Mean over masked positions of -log softmax(logits)[target].
///
/// Unmasked positions contribute nothing and are never even read, so the loss
/// is exactly invariant to targets and logits outside the mask.
pub fn masked_ce_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: &MaskState,
) -> Result<MaskedLoss> {
    per_position_ce(logits, targets, mask, None)
}

/// Same as [`masked_ce_loss`] but also produces d loss / d logits, with zero
/// rows at unmasked positions.
pub fn masked_ce_grad<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: &MaskState,
) -> Result<(MaskedLoss, Tensor<F>)> {
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let loss = per_position_ce(logits, targets, mask, Some(&mut grad))?;
    Ok((loss, grad))
}

fn per_position_ce<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: &MaskState,
    mut grad: Option<&mut Tensor<F>>,
) -> Result<MaskedLoss> {
    if logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "logits rows {}, targets {}, mask {} must all match",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    let vocab = logits.cols();
    let masked_positions = mask.masked_count();
    if masked_positions == 0 {
        return Ok(MaskedLoss {
            value: 0.0,
            masked_positions: 0,
        });
    }
    let inv_count = F::from_f64(1.0 / masked_positions as f64);
    let mut total = 0.0f64;
    for (pos, (&target, &masked)) in targets.iter().zip(mask.mask()).enumerate() {
        if !masked {
            continue;
        }
        if target as usize >= vocab {
            return Err(Error::TokenRange {
                what: "target",
                id: target,
                limit: vocab as u32,
            });
        }
        let row = logits.row(pos);
        let mut max = row[0];
        for &x in row {
            if !x.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite logit at masked position {pos}"
                )));
            }
            max = max.max(x);
        }
        let mut sum = F::ZERO;
        for &x in row {
            sum += (x - max).exp_approx();
        }
        let lse = max + sum.ln();
        total += (lse - row[target as usize]).to_f64();
        if let Some(g) = grad.as_deref_mut() {
            let grow = g.row_mut(pos);
            let inv_sum = F::ONE / sum;
            for (j, &x) in row.iter().enumerate() {
                grow[j] = (x - max).exp_approx() * inv_sum * inv_count;
            }
            grow[target as usize] -= inv_count;
        }
    }
    Ok(MaskedLoss {
        value: total / masked_positions as f64,
        masked_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_examples() {
        let sched = MaskSchedule::default();
        assert_eq!(gamma(0.0, &sched).unwrap(), 1.0);
        assert!((gamma(0.5, &sched).unwrap() - 0.70711).abs() < 1e-5);
        assert!((gamma(2.0 / 3.0, &sched).unwrap() - 0.5).abs() < 1e-6);
        assert!(gamma(1.0, &sched).is_err());
        assert!(gamma(-0.1, &sched).is_err());
    }

    #[test]
    fn gamma_monotone_and_in_range() {
        let sched = MaskSchedule::default();
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let t = i as f64 / 1000.0;
            let g = gamma(t, &sched).unwrap();
            assert!(g > 0.0 && g <= 1.0, "gamma({t}) = {g}");
            assert!(g <= prev, "gamma must be non-increasing");
            prev = g;
        }
    }

    #[test]
    fn mask_at_t_zero_is_full() {
        let sched = MaskSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = sample_mask(64, 0.0, &sched, &mut rng).unwrap();
        assert_eq!(mask.masked_count(), 64);
    }

    #[test]
    fn mask_sampling_is_deterministic() {
        let sched = MaskSchedule::default();
        let a = sample_mask(128, 0.37, &sched, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(128, 0.37, &sched, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_fraction_concentrates() {
        let sched = MaskSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = sample_mask(10_000, 0.5, &sched, &mut rng).unwrap();
        let frac = mask.masked_count() as f64 / 10_000.0;
        let expected = (std::f64::consts::PI / 4.0).cos();
        assert!(
            (frac - expected).abs() < 0.02,
            "masked fraction {frac} vs {expected}"
        );
    }

    #[test]
    fn apply_mask_examples() {
        let zeros = MaskState::new(vec![false; 3], 0.5).unwrap();
        let ones = MaskState::new(vec![true; 3], 0.5).unwrap();
        let mixed = MaskState::new(vec![false, true, false], 0.5).unwrap();
        assert_eq!(apply_mask(&[4, 7, 9], &zeros, 528).unwrap(), vec![4, 7, 9]);
        assert_eq!(
            apply_mask(&[4, 7, 9], &ones, 528).unwrap(),
            vec![528, 528, 528]
        );
        assert_eq!(
            apply_mask(&[4, 7, 9], &mixed, 528).unwrap(),
            vec![4, 528, 9]
        );
        assert!(apply_mask(&[4, 7], &mixed, 528).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let logits = Tensor::<f64>::zeros(1, 4);
        let mask = MaskState::new(vec![true], 0.0).unwrap();
        let loss = masked_ce_loss(&logits, &[2], &mask).unwrap();
        assert!((loss.value - 4.0f64.ln()).abs() < 1e-5);
        assert_eq!(loss.masked_positions, 1);
    }

    #[test]
    fn confident_logits_loss_is_tiny() {
        let mut logits = Tensor::<f64>::zeros(2, 6);
        *logits.at_mut(0, 3) = 30.0;
        *logits.at_mut(1, 1) = 30.0;
        let mask = MaskState::new(vec![true, true], 0.1).unwrap();
        let loss = masked_ce_loss(&logits, &[3, 1], &mask).unwrap();
        assert!(loss.value <= 1e-9, "loss {}", loss.value);
    }

    #[test]
    fn loss_ignores_unmasked_positions_exactly() {
        let mut logits = Tensor::<f64>::zeros(4, 5);
        for (i, x) in logits.data_mut().iter_mut().enumerate() {
            *x = (i as f64 * 0.7).sin();
        }
        let mask = MaskState::new(vec![true, false, true, false], 0.2).unwrap();
        let base = masked_ce_loss(&logits, &[1, 2, 3, 4], &mask).unwrap();

        // Perturb targets at unmasked positions.
        let shifted = masked_ce_loss(&logits, &[1, 0, 3, 0], &mask).unwrap();
        assert_eq!(base.value.to_bits(), shifted.value.to_bits());

        // Perturb logits at unmasked positions, including NaN.
        let mut wild = logits.clone();
        for j in 0..5 {
            *wild.at_mut(1, j) = f64::NAN;
            *wild.at_mut(3, j) = 1e30;
        }
        let perturbed = masked_ce_loss(&wild, &[1, 2, 3, 4], &mask).unwrap();
        assert_eq!(base.value.to_bits(), perturbed.value.to_bits());
    }

    #[test]
    fn degenerate_batch_flagged() {
        let logits = Tensor::<f64>::zeros(3, 4);
        let mask = MaskState::new(vec![false; 3], 0.9).unwrap();
        let loss = masked_ce_loss(&logits, &[0, 1, 2], &mask).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.is_degenerate());
    }

    #[test]
    fn nan_at_masked_position_is_error() {
        let mut logits = Tensor::<f64>::zeros(1, 4);
        *logits.at_mut(0, 2) = f64::NAN;
        let mask = MaskState::new(vec![true], 0.0).unwrap();
        assert!(matches!(
            masked_ce_loss(&logits, &[0], &mask),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mean_normalization_is_invariant_to_mask_size() {
        // Two masked positions with identical rows give the same loss as one.
        let mut one = Tensor::<f64>::zeros(1, 8);
        for (j, x) in one.row_mut(0).iter_mut().enumerate() {
            *x = j as f64 * 0.3 - 1.0;
        }
        let mut two = Tensor::<f64>::zeros(2, 8);
        two.row_mut(0).copy_from_slice(one.row(0));
        two.row_mut(1).copy_from_slice(one.row(0));
        let single = masked_ce_loss(&one, &[5], &MaskState::new(vec![true], 0.0).unwrap()).unwrap();
        let double =
            masked_ce_loss(&two, &[5, 5], &MaskState::new(vec![true, true], 0.0).unwrap()).unwrap();
        assert!((single.value - double.value).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_finite_difference() {
        let mut logits = Tensor::<f64>::zeros(3, 5);
        for (i, x) in logits.data_mut().iter_mut().enumerate() {
            *x = (i as f64 * 1.3).cos();
        }
        let targets = [4, 0, 2];
        let mask = MaskState::new(vec![true, false, true], 0.3).unwrap();
        let (_, grad) = masked_ce_grad(&logits, &targets, &mask).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..5 {
                let mut plus = logits.clone();
                *plus.at_mut(r, c) += h;
                let mut minus = logits.clone();
                *minus.at_mut(r, c) -= h;
                let fp = masked_ce_loss(&plus, &targets, &mask).unwrap().value;
                let fm = masked_ce_loss(&minus, &targets, &mask).unwrap().value;
                let numeric = (fp - fm) / (2.0 * h);
                assert!(
                    (grad.at(r, c) - numeric).abs() < 1e-6,
                    "grad mismatch at ({r},{c}): {} vs {}",
                    grad.at(r, c),
                    numeric
                );
            }
        }
    }
}
