use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

use super::{Array, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta0: 0.9, beta1: 0.99, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive, got {}", self.lr);
        ensure!((0.0..1.0).contains(&self.beta0), "beta0 must be in [0, 1), got {}", self.beta0);
        ensure!((0.0..1.0).contains(&self.beta1), "beta1 must be in [0, 1), got {}", self.beta1);
        ensure!(self.epsilon > 0.0, "epsilon must be positive, got {}", self.epsilon);
        Ok(())
    }
}

/// Step-wise exponential decay: `base * multiplier^floor(epoch / epochs_per_step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub epochs_per_step: usize,
    pub multiplier: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { epochs_per_step: 5, multiplier: 0.95 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs_per_step >= 1, "epochs_per_step must be >= 1");
        ensure!(
            self.multiplier > 0.0 && self.multiplier <= 1.0,
            "schedule multiplier must be in (0, 1], got {}",
            self.multiplier
        );
        Ok(())
    }

    pub fn effective_lr(&self, base_lr: f64, epoch: usize) -> f64 {
        base_lr * self.multiplier.powi((epoch / self.epochs_per_step) as i32)
    }
}

/// First and second moment buffers for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step_count: u64,
    pub first: Vec<Array<F>>,
    pub second: Vec<Array<F>>,
}

impl<F: Scalar> AdamState<F> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array<F>>) -> Self {
        let (first, second) = params.into_iter().map(|p| (Array::zeros(p.shape()), Array::zeros(p.shape()))).unzip();
        AdamState { step_count: 0, first, second }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Array<F>], grads: &[&[F]], cfg: &AdamConfig, lr: f64) -> Result<()> {
        ensure!(
            params.len() == grads.len() && params.len() == self.first.len(),
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            self.first.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.len() == g.len() && p.shape() == self.first[i].shape(),
                "adam: gradient {i} has {} elements for parameter of shape {:?}",
                g.len(),
                p.shape()
            );
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c0 = 1.0 - cfg.beta0.powi(t);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let (b0, b1) = (F::of(cfg.beta0), F::of(cfg.beta1));
        let (one_b0, one_b1) = (F::of(1.0 - cfg.beta0), F::of(1.0 - cfg.beta1));
        let (inv_c0, inv_c1) = (F::of(1.0 / c0), F::of(1.0 / c1));
        let (lr, eps) = (F::of(lr), F::of(cfg.epsilon));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.iter()).enumerate() {
                m[j] = b0 * m[j] + one_b0 * gv;
                v[j] = b1 * v[j] + one_b1 * gv * gv;
                let mhat = m[j] * inv_c0;
                let vhat = v[j] * inv_c1;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_values() {
        let c = AdamConfig::default();
        assert_eq!((c.beta0, c.beta1, c.epsilon), (0.9, 0.99, 1e-8));
        let s = LrSchedule::default();
        assert_eq!((s.epochs_per_step, s.multiplier), (5, 0.95));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Array::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        let g = vec![0.0; 3];
        st.step(&mut [&mut p], &[&g], &AdamConfig::with_lr(0.1), 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Closed form: m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε).
        let cfg = AdamConfig::with_lr(0.01);
        for &g in &[3.0f64, -0.25, 1e-3] {
            let mut p = Array::<f64>::from_f64(&[1], &[0.0]).unwrap();
            let mut st = AdamState::new([&p]);
            st.step(&mut [&mut p], &[&[g]], &cfg, cfg.lr).unwrap();
            let want = -cfg.lr * g / (g.abs() + cfg.epsilon);
            assert!((p.item() - want).abs() < 1e-15, "g={g}: {} vs {want}", p.item());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Array::<f32>::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        assert!(st.step(&mut [&mut p], &[&[1.0, 2.0, 3.0]], &AdamConfig::default(), 1e-3).is_err());
    }

    #[test]
    fn schedule_decays_stepwise() {
        let s = LrSchedule::default();
        assert_eq!(s.effective_lr(1.0, 0), 1.0);
        assert_eq!(s.effective_lr(1.0, 4), 1.0);
        assert_eq!(s.effective_lr(1.0, 5), 0.95);
        assert_eq!(s.effective_lr(2.0, 12), 2.0 * 0.95f64.powi(2));
    }
}
