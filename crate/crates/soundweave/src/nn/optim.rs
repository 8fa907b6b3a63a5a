//! AdamW with linear learning-rate warm-up.
//!
//! Weight decay is decoupled: it is applied directly to the parameter,
//! scaled by the warmed-up learning rate, separately from the adaptive step.

use serde::{Deserialize, Serialize};

use super::model::Parameters;
use super::tape::Gradients;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 500,
        }
    }
}

/// Optimizer state: step counter plus first/second moment accumulators, one
/// pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &Parameters<F>) -> Self {
        let m = (0..params.len())
            .map(|pid| {
                let (r, c) = params.tensor(pid).shape();
                Tensor::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Rebuild state from checkpointed pieces.
    pub fn from_parts(config: AdamWConfig, step: u64, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>) -> Self {
        AdamW { config, step, m, v }
    }

    /// Completed steps so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// Learning rate used by the next `apply` call: linear warm-up from zero
    /// over `warmup_steps` completed steps, constant afterwards.
    pub fn current_lr(&self) -> f64 {
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.config.learning_rate * warm
    }

    /// One optimizer step. Missing gradient entries are treated as zero;
    /// their parameters still receive momentum and weight-decay updates.
    pub fn apply(&mut self, params: &mut Parameters<F>, grads: &Gradients<F>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = F::from_f64(self.current_lr());
        let t = self.step + 1;
        let bc1 = F::from_f64(1.0 - self.config.beta1.powi(t as i32));
        let bc2 = F::from_f64(1.0 - self.config.beta2.powi(t as i32));
        let beta1 = F::from_f64(self.config.beta1);
        let beta2 = F::from_f64(self.config.beta2);
        let one_m_beta1 = F::ONE - beta1;
        let one_m_beta2 = F::ONE - beta2;
        let eps = F::from_f64(self.config.eps);
        let decay = F::from_f64(self.config.weight_decay);

        for pid in 0..self.m.len() {
            let param = params.tensor_mut(pid);
            if param.shape() != self.m[pid].shape() {
                return Err(Error::Shape(format!(
                    "parameter {pid} shape {:?} does not match optimizer state {:?}",
                    param.shape(),
                    self.m[pid].shape()
                )));
            }
            let grad = grads.get(pid);
            if let Some(g) = grad {
                if g.shape() != param.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {pid} shape {:?} does not match parameter {:?}",
                        g.shape(),
                        param.shape()
                    )));
                }
            }
            let m = self.m[pid].data_mut();
            let v = self.v[pid].data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(F::ZERO, |g| g.data()[i]);
                m[i] = beta1 * m[i] + one_m_beta1 * g;
                v[i] = beta2 * v[i] + one_m_beta2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps));
                p[i] -= lr * decay * p[i];
            }
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f64) -> Parameters<f64> {
        let mut p = Parameters::new();
        p.push("w", Tensor::from_vec(1, 1, vec![value]));
        p
    }

    /// Gradient holding `value` for param 0, routed through the tape so the
    /// Gradients type stays opaque.
    fn grad_of(params: &Parameters<f64>, value: f64) -> Gradients<f64> {
        use crate::nn::tape::Tape;
        let mut tape = Tape::new(params);
        let p = tape.param(0);
        let out = tape.scale(p, 1.0);
        tape.backward(out, Tensor::from_vec(1, 1, vec![value]))
    }

    #[test]
    fn zero_gradients_leave_fresh_state_unchanged() {
        let mut params = scalar_params(0.7);
        let config = AdamWConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config, &params);
        let grads = Gradients::zeros(1);
        opt.apply(&mut params, &grads).unwrap();
        assert_eq!(params.tensor(0).at(0, 0), 0.7);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With warm-up disabled, the first Adam step has magnitude
        // lr * |g| / (|g| + eps'), which is lr to within eps.
        let mut params = scalar_params(1.0);
        let config = AdamWConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config, &params);
        let grads = grad_of(&params, -0.35);
        opt.apply(&mut params, &grads).unwrap();
        let update = params.tensor(0).at(0, 0) - 1.0;
        assert!(update > 0.0, "step must oppose the gradient sign");
        let expected = config.learning_rate;
        assert!(
            (update.abs() - expected).abs() / expected < 1e-6,
            "update {update} vs lr {expected}"
        );
    }

    #[test]
    fn warmup_starts_at_zero_learning_rate() {
        let mut params = scalar_params(2.0);
        let config = AdamWConfig {
            warmup_steps: 500,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config, &params);
        assert_eq!(opt.current_lr(), 0.0);
        let grads = grad_of(&params, 1.0);
        opt.apply(&mut params, &grads).unwrap();
        // lr was zero, so neither the adaptive step nor decay moved anything.
        assert_eq!(params.tensor(0).at(0, 0), 2.0);
        assert_eq!(opt.step_count(), 1);
        assert!(opt.current_lr() > 0.0);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut params = scalar_params(1.0);
        let config = AdamWConfig {
            weight_decay: 0.5,
            warmup_steps: 0,
            learning_rate: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config, &params);
        let grads = Gradients::zeros(1);
        opt.apply(&mut params, &grads).unwrap();
        // Pure decay: w <- w - lr * decay * w = 1 - 0.05.
        assert!((params.tensor(0).at(0, 0) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar_params(1.0);
        let opt_params = {
            let mut p = Parameters::new();
            p.push("w", Tensor::<f64>::zeros(2, 2));
            p
        };
        let mut opt = AdamW::new(AdamWConfig::default(), &opt_params);
        let grads = Gradients::zeros(1);
        assert!(matches!(
            opt.apply(&mut params, &grads),
            Err(Error::Shape(_))
        ));
    }
}
