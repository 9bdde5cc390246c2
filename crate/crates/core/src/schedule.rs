//! Unsupervised-loss ramp-up and the linear learning-rate decay.

use crate::error::{Error, Result};

/// Ramp-up of the unsupervised loss weight.
///
/// `lambda(t) = w_max * exp(-phi * (1 - t / t_max)^2)` for `t < t_max`,
/// held at `w_max` afterwards, with `t_max = round(gamma * iter_total)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampConfig {
    pub w_max: f64,
    pub phi: f64,
    pub gamma: f64,
    pub iter_total: u64,
}

impl Default for RampConfig {
    fn default() -> Self {
        RampConfig {
            w_max: 10.0,
            phi: 5.0,
            gamma: 0.1,
            iter_total: 1,
        }
    }
}

impl RampConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_max >= 0.0
            && self.w_max.is_finite()
            && self.phi >= 0.0
            && self.phi.is_finite()
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.iter_total >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("ramp config {self:?}")))
        }
    }

    /// Length of the ramp in iterations.
    pub fn iter_max(&self) -> u64 {
        (self.gamma * self.iter_total as f64).round() as u64
    }
}

pub fn lambda_weight(iter_cur: u64, cfg: &RampConfig) -> f64 {
    let iter_max = cfg.iter_max();
    if iter_cur >= iter_max {
        return cfg.w_max;
    }
    let frac = 1.0 - iter_cur as f64 / iter_max as f64;
    cfg.w_max * (-cfg.phi * frac * frac).exp()
}

/// Linear decay from `lr0` at iteration 0 to `lr_min` at `iter_total`,
/// constant afterwards.
pub fn learning_rate(iter_cur: u64, iter_total: u64, lr0: f64, lr_min: f64) -> f64 {
    if iter_total == 0 {
        return lr0;
    }
    let t = (iter_cur as f64 / iter_total as f64).min(1.0);
    lr0 + (lr_min - lr0) * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_ramp(iter_total: u64) -> RampConfig {
        RampConfig {
            w_max: 10.0,
            phi: 5.0,
            gamma: 0.1,
            iter_total,
        }
    }

    #[test]
    fn lambda_examples() {
        let cfg = default_ramp(1000);
        assert_eq!(cfg.iter_max(), 100);
        assert_eq!(lambda_weight(100, &cfg), 10.0);
        assert_eq!(lambda_weight(5000, &cfg), 10.0);
        assert!((lambda_weight(0, &cfg) - 0.067_379_469_990_854_67).abs() < 1e-9);
        assert!((lambda_weight(50, &cfg) - 2.865_047_968_601_901).abs() < 1e-9);
    }

    #[test]
    fn iter_max_rounds_to_nearest() {
        let cfg = RampConfig { gamma: 0.1, iter_total: 725, ..Default::default() };
        assert_eq!(cfg.iter_max(), 73);
        let cfg = RampConfig { gamma: 0.1, iter_total: 4, ..Default::default() };
        assert_eq!(cfg.iter_max(), 0);
        assert_eq!(lambda_weight(0, &cfg), cfg.w_max);
    }

    #[test]
    fn validation() {
        assert!(default_ramp(10).validate().is_ok());
        assert!(RampConfig { gamma: 0.0, ..default_ramp(10) }.validate().is_err());
        assert!(RampConfig { w_max: -1.0, ..default_ramp(10) }.validate().is_err());
        assert!(RampConfig { iter_total: 0, ..default_ramp(10) }.validate().is_err());
    }

    #[test]
    fn learning_rate_examples() {
        assert_eq!(learning_rate(0, 1000, 0.01, 1e-4), 0.01);
        assert!((learning_rate(1000, 1000, 0.01, 1e-4) - 1e-4).abs() < 1e-15);
        assert!((learning_rate(500, 1000, 0.01, 1e-4) - 0.00505).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn lambda_monotone_and_continuous(total in 1u64..5000, gamma in 0.01f64..=1.0, phi in 0f64..20.0) {
            let cfg = RampConfig { w_max: 3.0, phi, gamma, iter_total: total };
            let mut prev = 0.0;
            for t in 0..=cfg.iter_max() + 3 {
                let l = lambda_weight(t, &cfg);
                prop_assert!(l >= prev - 1e-12);
                prev = l;
            }
            let m = cfg.iter_max();
            if m > 0 {
                // the jump into the plateau is bounded by w_max * phi / m^2
                let before = lambda_weight(m - 1, &cfg);
                prop_assert!(cfg.w_max - before <= cfg.w_max * phi / (m * m) as f64 + 1e-12);
            }
        }

        #[test]
        fn lambda_linear_in_w_max(t in 0u64..1000, scale in 0f64..50.0) {
            let a = default_ramp(1000);
            let b = RampConfig { w_max: a.w_max * scale, ..a };
            prop_assert!((lambda_weight(t, &b) - scale * lambda_weight(t, &a)).abs() <= 1e-9 * (1.0 + scale));
        }

        #[test]
        fn learning_rate_strictly_decreasing(total in 2u64..10_000, lr0 in 1e-3f64..1.0) {
            let lr_min = lr0 / 10.0;
            for t in 0..total.min(300) {
                prop_assert!(learning_rate(t + 1, total, lr0, lr_min) < learning_rate(t, total, lr0, lr_min));
            }
        }
    }
}
