//! Learning-rate warmup/decay and the grid upsampling schedule.

use std::f64::consts::FRAC_PI_2;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Multiplier at step 0 (`m_w`).
    pub warmup_start: f64,
    /// Warmup length (`N_w`).
    pub warmup_steps: usize,
    /// Multiplier reached at `total_steps` (`d_w`).
    pub decay: f64,
    /// Decay horizon (`N_T`).
    pub total_steps: usize,
    /// Steps at which the grid is upsampled.
    pub upsample_steps: Vec<usize>,
    pub res_start: usize,
    pub res_end: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warmup_start: 0.1,
            warmup_steps: 100,
            decay: 1e-3,
            total_steps: 30_000,
            upsample_steps: vec![500, 1000, 2000, 3000, 4000, 5500, 7000],
            res_start: 32,
            res_end: 300,
        }
    }
}

impl Schedule {
    /// Multiplies every step constant by `factor`; resolutions are kept.
    pub fn scaled(&self, factor: f64) -> Schedule {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        Schedule {
            warmup_steps: s(self.warmup_steps),
            total_steps: s(self.total_steps),
            upsample_steps: self.upsample_steps.iter().map(|&n| s(n)).collect(),
            ..self.clone()
        }
    }

    pub fn lr_multiplier(&self, i: usize) -> f64 {
        let warm = (i as f64 / self.warmup_steps.max(1) as f64).clamp(0.0, 1.0);
        let ramp = self.warmup_start + (1.0 - self.warmup_start) * (FRAC_PI_2 * warm).sin();
        ramp * self.decay.powf(i as f64 / self.total_steps as f64)
    }

    /// Resolution after upsample event `k` (1-based), linear in `k`.
    pub fn resolution_after(&self, k: usize) -> usize {
        let n = self.upsample_steps.len().max(1) as f64;
        let r = self.res_start as f64 + (self.res_end as f64 - self.res_start as f64) * k as f64 / n;
        r.round() as usize
    }

    /// New resolution if an upsample event falls on `step`.
    pub fn upsample_at(&self, step: usize) -> Option<usize> {
        let k = self.upsample_steps.iter().position(|&s| s == step)?;
        Some(self.resolution_after(k + 1))
    }

    /// Grid resolution in effect during `step` (after any event at it).
    pub fn resolution_at(&self, step: usize) -> usize {
        let k = self.upsample_steps.iter().filter(|&&s| s <= step).count();
        if k == 0 {
            self.res_start
        } else {
            self.resolution_after(k)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference(i: f64) -> f64 {
        // independent closed form: warmup sine times 10^(-3 i / N_T)
        let w = (i / 100.0).min(1.0);
        (0.1 + 0.9 * (w * std::f64::consts::PI / 2.0).sin()) * 10f64.powf(-3.0 * i / 30_000.0)
    }

    #[test]
    fn multiplier_reference_points() {
        let s = Schedule::default();
        assert!((s.lr_multiplier(0) - 0.1).abs() < 1e-12);
        assert!((s.lr_multiplier(100) - 0.977_237_2).abs() < 1e-6);
        assert!((s.lr_multiplier(30_000) - 1e-3).abs() < 1e-9);
        for i in [1, 37, 99, 250, 12_345] {
            assert!((s.lr_multiplier(i) - reference(i as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_resolutions_are_linear() {
        let s = Schedule::default();
        let r: Vec<usize> = (1..=7).map(|k| s.resolution_after(k)).collect();
        let expected: Vec<usize> = (1..=7).map(|k| (32.0 + 268.0 * k as f64 / 7.0).round() as usize).collect();
        assert_eq!(r, expected);
        assert_eq!(r[0], 70);
        assert_eq!(r[6], 300);
        assert_eq!(s.upsample_at(500), Some(70));
        assert_eq!(s.upsample_at(501), None);
        assert_eq!(s.resolution_at(499), 32);
        assert_eq!(s.resolution_at(7000), 300);
    }

    #[test]
    fn scaling_moves_every_step_constant() {
        let s = Schedule::default().scaled(0.1);
        assert_eq!(s.total_steps, 3000);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.upsample_steps, vec![50, 100, 200, 300, 400, 550, 700]);
        assert!((s.lr_multiplier(3000) - 1e-3).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn multiplier_is_positive_and_continuous(i in 0usize..30_000) {
            let s = Schedule::default();
            let a = s.lr_multiplier(i);
            let b = s.lr_multiplier(i + 1);
            prop_assert!(a > 0.0);
            prop_assert!((a - b).abs() < 0.02);
        }
    }
}
