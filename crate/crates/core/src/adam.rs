//! Adam with bias correction and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate is multiplied by `decay_factor` every
    /// `decay_every` completed steps.
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: 2000,
            decay_factor: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step_count: u64,
}

impl Adam {
    /// Moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        let drops = self.step_count.checked_div(c.decay_every).unwrap_or(0);
        c.lr * c.decay_factor.powi(drops as i32)
    }

    /// One update. A non-finite gradient leaves parameters, moments and the
    /// step counter untouched and reports a training fault.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DfpsError::contract("Adam: parameter/gradient count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(DfpsError::contract("Adam: gradient shape does not mirror parameters"));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DfpsError::Training {
                stage: "adam".into(),
                iteration: self.step_count as usize,
                detail: format!("non-finite gradient in tensor {i}"),
            });
        }
        let lr = self.current_lr();
        self.step_count += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            decay_every: 0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_first_step_is_noop() {
        let mut p = Mat::row_vec(&[1.0, -2.0]);
        let mut opt = Adam::new(no_decay(0.1), &[&p]);
        opt.step(&mut [&mut p], &[Mat::zeros(1, 2)]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Mat::scalar(0.0);
        let mut opt = Adam::new(no_decay(0.01), &[&p]);
        opt.step(&mut [&mut p], &[Mat::scalar(-3.7)]).unwrap();
        assert!((p.data[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = Mat::scalar(1.0);
        let mut opt = Adam::new(no_decay(0.1), &[&p]);
        let err = opt.step(&mut [&mut p], &[Mat::scalar(f64::NAN)]);
        assert!(matches!(err, Err(DfpsError::Training { .. })));
        assert_eq!(p.data[0], 1.0);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn ten_steps_on_square_match_hand_recursion() {
        let (lr, b1, b2, eps) = (0.1_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let mut theta = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            expected.push(theta);
        }

        let mut p = Mat::scalar(1.0);
        let mut opt = Adam::new(no_decay(lr), &[&p]);
        for want in expected {
            let g = Mat::scalar(2.0 * p.data[0]);
            opt.step(&mut [&mut p], &[g]).unwrap();
            assert!((p.data[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn learning_rate_halves_on_schedule() {
        let cfg = AdamConfig {
            decay_every: 3,
            ..AdamConfig::default()
        };
        let mut p = Mat::scalar(0.0);
        let mut opt = Adam::new(cfg, &[&p]);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Mat::scalar(1.0)]).unwrap();
        }
        assert!((opt.current_lr() - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Mat::scalar(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(&mut [&mut p], &[Mat::zeros(2, 1)]).is_err());
    }
}
