use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Adam hyperparameters. Betas and eps default to the usual (0.9, 0.999)
/// and 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, no weight decay.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config }
    }

    /// Apply one update with learning rate `lr`, then zero the gradients.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in &mut store.slots {
            let grad = slot.grad.data_mut();
            let value = slot.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i].to_f64();
                let m = beta1 * slot.m[i].to_f64() + (1.0 - beta1) * g;
                let v = beta2 * slot.v[i].to_f64() + (1.0 - beta2) * g * g;
                slot.m[i] = T::from_f64(m);
                slot.v[i] = T::from_f64(v);
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                value[i] = T::from_f64(value[i].to_f64() - update);
                grad[i] = T::ZERO;
            }
        }
        Ok(())
    }
}

/// Shape of a learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup, then `peak * sqrt(warmup / step)`.
    InverseSqrt,
    /// Linear warmup, then a half-cosine from `peak` back to `init` over
    /// `period` steps, held at `init` afterwards.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: Schedule,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub period_steps: u64,
}

impl ScheduleSpec {
    pub fn inverse_sqrt(lr_init: f64, lr_peak: f64, warmup_steps: u64) -> Self {
        ScheduleSpec {
            kind: Schedule::InverseSqrt,
            lr_init,
            lr_peak,
            warmup_steps,
            period_steps: 0,
        }
    }

    pub fn cosine(lr_init: f64, lr_peak: f64, warmup_steps: u64, period_steps: u64) -> Self {
        ScheduleSpec {
            kind: Schedule::Cosine,
            lr_init,
            lr_peak,
            warmup_steps,
            period_steps,
        }
    }
}

/// Learning rate at `step` (0-based).
///
/// With zero warmup, step 0 is defined to be `lr_peak`; the inverse-sqrt
/// decay then uses `sqrt(1 / step)`.
pub fn lr_at_step(spec: &ScheduleSpec, step: u64) -> f64 {
    let w = spec.warmup_steps;
    if step < w {
        return spec.lr_init + (spec.lr_peak - spec.lr_init) * step as f64 / w as f64;
    }
    match spec.kind {
        Schedule::InverseSqrt => {
            if step == 0 {
                spec.lr_peak
            } else {
                spec.lr_peak * (w.max(1) as f64 / step as f64).sqrt()
            }
        }
        Schedule::Cosine => {
            if spec.period_steps == 0 {
                return spec.lr_peak;
            }
            let t = ((step - w) as f64 / spec.period_steps as f64).min(1.0);
            spec.lr_init
                + (spec.lr_peak - spec.lr_init) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_hand_value() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::scalar(1.0)).unwrap();
        s.slots[0].grad = Tensor::scalar(1.0);
        Adam::default().step(&mut s, 0.1).unwrap();
        // m_hat = 1, v_hat = 1: w = 1 - 0.1 / (1 + 1e-8)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(w).item() - expect).abs() < 1e-12);
        assert_eq!(s.grad(w).item(), 0.0);
    }

    #[test]
    fn adam_zero_grad_leaves_param_and_decays_moments() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::scalar(2.0)).unwrap();
        s.slots[0].grad = Tensor::scalar(1.0);
        Adam::default().step(&mut s, 0.1).unwrap();
        let after_first = s.value(w).item();
        let (m1, v1) = (s.slots[0].m[0], s.slots[0].v[0]);
        Adam::default().step(&mut s, 0.1).unwrap();
        assert!((s.slots[0].m[0] - 0.9 * m1).abs() < 1e-15);
        assert!((s.slots[0].v[0] - 0.999 * v1).abs() < 1e-15);
        // zero gradient still moves through the decayed first moment
        assert!(s.value(w).item() < after_first);

        let mut fresh = ParamStore::<f64>::new();
        let u = fresh.add("u", Tensor::scalar(2.0)).unwrap();
        Adam::default().step(&mut fresh, 0.1).unwrap();
        assert_eq!(fresh.value(u).item(), 2.0);
    }

    #[test]
    fn adam_rejects_non_positive_lr() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("w", &[1]).unwrap();
        assert!(Adam::default().step(&mut s, 0.0).is_err());
        assert!(Adam::default().step(&mut s, -1.0).is_err());
    }

    #[test]
    fn warmup_endpoints() {
        let spec = ScheduleSpec::inverse_sqrt(1e-6, 1e-4, 300);
        assert_eq!(lr_at_step(&spec, 0), 1e-6);
        assert!((lr_at_step(&spec, 300) - 1e-4).abs() < 1e-18);
        assert!((lr_at_step(&spec, 1200) - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let spec = ScheduleSpec::inverse_sqrt(1e-6, 1e-3, 0);
        assert_eq!(lr_at_step(&spec, 0), 1e-3);
        assert!((lr_at_step(&spec, 4) - 0.5e-3).abs() < 1e-15);
    }

    #[test]
    fn cosine_returns_to_init() {
        let spec = ScheduleSpec::cosine(1e-6, 1e-4, 10, 100);
        assert_eq!(lr_at_step(&spec, 0), 1e-6);
        assert!((lr_at_step(&spec, 10) - 1e-4).abs() < 1e-18);
        assert!((lr_at_step(&spec, 110) - 1e-6).abs() < 1e-15);
        assert!((lr_at_step(&spec, 500) - 1e-6).abs() < 1e-15);
        let mid = lr_at_step(&spec, 60);
        assert!((mid - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-15);
    }
}
