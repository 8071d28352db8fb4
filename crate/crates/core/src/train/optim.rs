use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise `decay · shadow + (1 - decay) · current`.
pub fn ema_update(shadow: &[f64], current: &[f64], decay: f64) -> Result<Vec<f64>> {
    if shadow.len() != current.len() {
        return Err(Error::Structural(format!(
            "EMA shadow has {} entries, parameters have {}",
            shadow.len(),
            current.len()
        )));
    }
    Ok(shadow
        .iter()
        .zip(current)
        .map(|(s, c)| decay * s + (1.0 - decay) * c)
        .collect())
}

pub(crate) fn ema_update_in_place(shadow: &mut [f64], current: &[f64], decay: f64) {
    debug_assert_eq!(shadow.len(), current.len());
    for (s, c) in shadow.iter_mut().zip(current) {
        *s = decay * *s + (1.0 - decay) * c;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    /// Global norm after zeroing non-finite entries, before rescaling.
    pub norm_before: f64,
    pub norm_after: f64,
    pub clipped: bool,
    pub nonfinite_zeroed: usize,
}

/// Zeroes non-finite entries, then rescales so the global L2 norm is at most `max_norm`.
pub fn clip_gradients_tolerant(grads: &mut [Vec<f64>], max_norm: f64) -> ClipOutcome {
    let mut nonfinite_zeroed = 0;
    for g in grads.iter_mut().flatten() {
        if !g.is_finite() {
            *g = 0.0;
            nonfinite_zeroed += 1;
        }
    }
    let norm_before = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let clipped = norm_before > max_norm;
    if clipped {
        let scale = max_norm / norm_before;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    let norm_after = if clipped {
        grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    } else {
        norm_before
    };
    ClipOutcome {
        norm_before,
        norm_after,
        clipped,
        nonfinite_zeroed,
    }
}

/// `eta_min + ½ (eta_max - eta_min)(1 + cos(π · step / cycle_len))`.
pub fn cosine_warm_restarts(step_in_cycle: usize, cycle_len: usize, eta_min: f64, eta_max: f64) -> f64 {
    let cycle_len = cycle_len.max(1);
    let t = step_in_cycle.min(cycle_len) as f64 / cycle_len as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmRestartSchedule {
    pub eta_min: f64,
    pub eta_max: f64,
    /// Length of the first cycle, in epochs.
    pub t0_epochs: usize,
    /// Growth factor of each successive cycle.
    pub t_mult: usize,
}

impl WarmRestartSchedule {
    pub fn for_lr(lr: f64) -> Self {
        Self {
            eta_min: 0.01 * lr,
            eta_max: lr,
            t0_epochs: 10,
            t_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min <= self.eta_max) || self.eta_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t0_epochs == 0 || self.t_mult == 0 {
            return Err(Error::Config("t0_epochs and t_mult must be at least 1".into()));
        }
        Ok(())
    }

    /// `(step_in_cycle, cycle_len)` for a given epoch.
    pub fn position(&self, epoch: usize) -> (usize, usize) {
        let mut start = 0;
        let mut len = self.t0_epochs.max(1);
        while epoch >= start + len {
            start += len;
            len *= self.t_mult.max(1);
        }
        (epoch - start, len)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (step, len) = self.position(epoch);
        cosine_warm_restarts(step, len, self.eta_min, self.eta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay, over a list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    params: AdamParams,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: AdamParams, shapes: &[usize]) -> Self {
        Self {
            params,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one AdamW step to every group.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grads.len());
        self.advance();
        for (k, (theta, grad)) in params.iter_mut().zip(grads).enumerate() {
            self.update_group(k, theta, grad, lr, weight_decay);
        }
    }

    /// Starts a new step; follow with [`AdamW::update_group`] for each group.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn update_group(&mut self, k: usize, theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        assert!(self.step > 0, "advance() before update_group()");
        let AdamParams { beta1, beta2, eps } = self.params;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let (m, v) = (&mut self.first[k], &mut self.second[k]);
        assert_eq!(theta.len(), m.len());
        for j in 0..theta.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            theta[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(&[1.0], &[0.0], 0.9).unwrap(), vec![0.9]);
        assert_eq!(ema_update(&[0.3, -2.0], &[0.3, -2.0], 0.7).unwrap(), vec![0.3, -2.0]);
        let v = ema_update(&[0.0], &[2.0], 0.999).unwrap()[0];
        assert!((v - 0.002).abs() < 1e-15);
        assert!(matches!(ema_update(&[0.0], &[1.0, 2.0], 0.9), Err(Error::Structural(_))));
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![0.3, 0.4]];
        let out = clip_gradients_tolerant(&mut g, 1.0);
        assert!(!out.clipped);
        assert_eq!(g, vec![vec![0.3, 0.4]]);

        let mut g = vec![vec![3.0], vec![4.0]];
        let out = clip_gradients_tolerant(&mut g, 1.0);
        assert!(out.clipped);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);

        let mut g = vec![vec![f64::NAN, 2.0]];
        let out = clip_gradients_tolerant(&mut g, 10.0);
        assert_eq!(g, vec![vec![0.0, 2.0]]);
        assert_eq!(out.nonfinite_zeroed, 1);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_warm_restarts(0, 10, 0.001, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_warm_restarts(10, 10, 0.001, 0.1) - 0.001).abs() < 1e-12);
        assert!((cosine_warm_restarts(5, 10, 0.001, 0.1) - 0.0505).abs() < 1e-12);
    }

    #[test]
    fn restarts_grow_by_t_mult() {
        let s = WarmRestartSchedule {
            eta_min: 0.0,
            eta_max: 1.0,
            t0_epochs: 2,
            t_mult: 2,
        };
        let positions: Vec<_> = (0..8).map(|e| s.position(e)).collect();
        assert_eq!(
            positions,
            vec![(0, 2), (1, 2), (0, 4), (1, 4), (2, 4), (3, 4), (0, 8), (1, 8)]
        );
        assert_eq!(s.lr_at(2), 1.0);
    }

    #[test]
    fn adamw_decays_without_gradient() {
        let mut opt = AdamW::new(AdamParams::default(), &[1]);
        let mut theta = vec![2.0];
        opt.step(&mut [theta.as_mut_slice()], &[vec![0.0]], 0.1, 0.5);
        assert!((theta[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamParams::default(), &[2]);
        let mut theta = vec![0.0, 0.0];
        opt.step(&mut [theta.as_mut_slice()], &[vec![3.0, -0.5]], 0.01, 0.0);
        assert!((theta[0] + 0.01).abs() < 1e-9 && (theta[1] - 0.01).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(
            g in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..6), 1..4),
            max_norm in 0.01f64..10.0,
        ) {
            let mut g = g;
            let out = clip_gradients_tolerant(&mut g, max_norm);
            let norm = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm <= max_norm + 1e-9);
            prop_assert!((norm - out.norm_after).abs() < 1e-12);
        }

        #[test]
        fn ema_stays_in_history_hull(history in prop::collection::vec(-10.0f64..10.0, 1..50), decay in 0.01f64..0.999) {
            let mut shadow = vec![history[0]];
            let (mut lo, mut hi) = (history[0], history[0]);
            for &x in &history {
                lo = lo.min(x);
                hi = hi.max(x);
                shadow = ema_update(&shadow, &[x], decay).unwrap();
                prop_assert!(shadow[0] >= lo - 1e-12 && shadow[0] <= hi + 1e-12);
            }
        }
    }
}
