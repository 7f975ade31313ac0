use std::f64::consts::PI;

use super::MixCoefficients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Cosine-annealed rate for `step` of `total_steps`, no warmup, floor 0.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    0.5 * base * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Coefficients together with their AdamW moments.
///
/// `updates[k]` counts how many steps row `k` has taken and drives its bias
/// correction; `step` is the global inner-iteration counter driving the
/// schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SoupState {
    pub alpha: MixCoefficients,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub updates: Vec<u64>,
    pub step: usize,
}

impl SoupState {
    pub fn new(alpha: MixCoefficients) -> Self {
        let n = alpha.values().len();
        let k = alpha.k();
        SoupState {
            alpha,
            m: vec![0.0; n],
            v: vec![0.0; n],
            updates: vec![0; k],
            step: 0,
        }
    }

    /// Bitwise equality of row `k`'s coefficients and optimizer state.
    pub fn row_bit_eq(&self, other: &SoupState, k: usize) -> bool {
        let c = self.alpha.cols();
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        same(self.alpha.row(k), other.alpha.row(k))
            && same(&self.m[k * c..(k + 1) * c], &other.m[k * c..(k + 1) * c])
            && same(&self.v[k * c..(k + 1) * c], &other.v[k * c..(k + 1) * c])
            && self.updates[k] == other.updates[k]
    }

    pub fn reset_rows(&mut self, rows: &[usize]) {
        let c = self.alpha.cols();
        for &k in rows {
            self.m[k * c..(k + 1) * c].fill(0.0);
            self.v[k * c..(k + 1) * c].fill(0.0);
            self.updates[k] = 0;
        }
    }
}

/// One AdamW step on the rows listed in `active` (0-based), with cosine
/// learning-rate annealing over `total_steps`. Rows outside `active` and
/// their moments are left untouched.
pub fn adamw_cosine_step(
    state: &mut SoupState,
    active: &[usize],
    grads: &[Vec<f64>],
    opt: &AdamW,
    total_steps: usize,
) -> Result<()> {
    if state.step >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {} is past the schedule horizon {total_steps}",
            state.step
        )));
    }
    if active.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} gradient rows for {} active coefficients",
            grads.len(),
            active.len()
        )));
    }
    let cols = state.alpha.cols();
    let lr = cosine_lr(opt.lr, state.step, total_steps);
    for (&k, g) in active.iter().zip(grads) {
        if g.len() != cols {
            return Err(Error::Dimension(format!("gradient row has {} entries, expected {cols}", g.len())));
        }
        state.updates[k] += 1;
        let t = state.updates[k] as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for (c, &gc) in g.iter().enumerate() {
            let i = k * cols + c;
            state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * gc;
            state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * gc * gc;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            let a = &mut state.alpha.row_mut(k)[c];
            *a -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * *a);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt() -> AdamW {
        AdamW {
            lr: 0.01,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_at_zero_stays_put() {
        let mut s = SoupState::new(MixCoefficients::zeros(3, 1, false));
        adamw_cosine_step(&mut s, &[0, 1, 2], &[vec![0.0], vec![0.0], vec![0.0]], &opt(), 10).unwrap();
        assert!(s.alpha.values().iter().all(|&a| a == 0.0));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn cosine_midpoint_is_half() {
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-18);
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn three_steps_match_hand_calculation() {
        let o = opt();
        let total = 3;
        let grads = [0.4, -1.5, 0.25];
        let mut s = SoupState::new(MixCoefficients::from_rows(vec![vec![0.2]], false).unwrap());
        for &g in &grads {
            adamw_cosine_step(&mut s, &[0], &[vec![g]], &o, total).unwrap();
        }

        // step 1: lr = 0.01
        let a0 = 0.2;
        let m1 = 0.1 * 0.4;
        let v1 = 0.001 * 0.16;
        let a1 = a0 - 0.01 * ((m1 / 0.1) / ((v1 / 0.001_f64).sqrt() + 1e-8) + 0.1 * a0);
        // step 2: lr = 0.005 (cos π/3 = 1/2 → 0.5·0.01·1.5 = 0.0075)
        let lr2 = 0.5 * 0.01 * (1.0 + (std::f64::consts::PI / 3.0).cos());
        let m2 = 0.9 * m1 + 0.1 * -1.5;
        let v2 = 0.999 * v1 + 0.001 * 2.25;
        let a2 = a1 - lr2 * ((m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999_f64 * 0.999)).sqrt() + 1e-8) + 0.1 * a1);
        let lr3 = 0.5 * 0.01 * (1.0 + (2.0 * std::f64::consts::PI / 3.0).cos());
        let m3 = 0.9 * m2 + 0.1 * 0.25;
        let v3 = 0.999 * v2 + 0.001 * 0.0625;
        let a3 = a2
            - lr3 * ((m3 / (1.0 - 0.729)) / ((v3 / (1.0 - 0.999_f64 * 0.999 * 0.999)).sqrt() + 1e-8) + 0.1 * a2);

        assert!((s.alpha.get(0, 0) - a3).abs() <= 1e-15, "{} vs {a3}", s.alpha.get(0, 0));
        assert!((s.m[0] - m3).abs() <= 1e-15);
        assert!((s.v[0] - v3).abs() <= 1e-15);
    }

    #[test]
    fn inactive_rows_are_untouched() {
        let mut s = SoupState::new(MixCoefficients::filled(4, 2, true, 0.3));
        adamw_cosine_step(&mut s, &[1, 3], &[vec![1.0, -1.0], vec![0.5, 0.5]], &opt(), 5).unwrap();
        let before = s.clone();
        adamw_cosine_step(&mut s, &[1], &[vec![0.2, 0.1]], &opt(), 5).unwrap();
        for k in [0, 2, 3] {
            assert!(s.row_bit_eq(&before, k));
        }
        assert!(!s.row_bit_eq(&before, 1));
    }

    #[test]
    fn past_horizon_is_an_error() {
        let mut s = SoupState::new(MixCoefficients::zeros(1, 1, false));
        s.step = 4;
        assert!(adamw_cosine_step(&mut s, &[0], &[vec![1.0]], &opt(), 4).is_err());
    }
}
