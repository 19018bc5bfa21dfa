//! Training-time optimizations: linear learning-rate warmup, cosine decay,
//! and mixup augmentation.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `lr0` over `warmup_batches`, then cosine decay
/// `lr = lr_min + 0.5 * (1 + cos(t' * pi / T')) * (lr0 - lr_min)` over the
/// remaining batches. The decay endpoint `t = total_batches` is a valid
/// argument so the analytic endpoint (exactly `lr_min`) is reachable.
///
/// ```
/// use prunenet::schedules::LrSchedule;
///
/// let s = LrSchedule::new(0.1, 10, 110).unwrap();
/// assert_eq!(s.lr_at(0).unwrap(), 0.0);     // warmup start
/// assert_eq!(s.lr_at(10).unwrap(), 0.1);    // warmup end
/// assert_eq!(s.lr_at(110).unwrap(), 0.0);   // decay end
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub warmup_batches: usize,
    pub total_batches: usize,
    #[serde(default)]
    pub lr_min: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, warmup_batches: usize, total_batches: usize) -> Result<Self> {
        let s = Self {
            lr0,
            warmup_batches,
            total_batches,
            lr_min: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::usage("lr0 must be > 0"));
        }
        if self.lr_min < 0.0 || self.lr_min > self.lr0 {
            return Err(Error::usage("lr_min must be in [0, lr0]"));
        }
        if self.total_batches < self.warmup_batches {
            return Err(Error::usage(
                "total_batches must be >= warmup_batches",
            ));
        }
        Ok(())
    }

    /// Learning rate at batch `t`, valid for `0 <= t <= total_batches`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.total_batches {
            return Err(Error::usage(format!(
                "batch index {t} out of range 0..={}",
                self.total_batches
            )));
        }
        if t < self.warmup_batches {
            return Ok(self.lr0 * t as f64 / self.warmup_batches as f64);
        }
        let decay_total = self.total_batches - self.warmup_batches;
        if decay_total == 0 {
            return Ok(self.lr0);
        }
        let progress = (t - self.warmup_batches) as f64 / decay_total as f64;
        Ok(self.lr_min
            + 0.5 * (1.0 + (progress * std::f64::consts::PI).cos()) * (self.lr0 - self.lr_min))
    }

    /// `lr_at` clamped to the schedule's tail; convenient for trainers that
    /// may run a few batches past the planned total.
    pub fn lr_at_clamped(&self, t: usize) -> f64 {
        self.lr_at(t.min(self.total_batches)).expect("clamped index is in range")
    }
}

/// Mixup configuration: interpolation weights are drawn from Beta(alpha, alpha).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            enabled: false,
        }
    }
}

/// Sample an interpolation weight from Beta(alpha, alpha).
pub fn sample_lambda(config: &MixupConfig, rng: &mut impl Rng) -> f64 {
    let beta = Beta::new(config.alpha, config.alpha).expect("alpha validated > 0");
    beta.sample(rng).clamp(0.0, 1.0)
}

/// Convex combination of two example pairs:
/// `x' = lambda * x_i + (1 - lambda) * x_j`, same for targets.
pub fn mixup(
    x_i: &[f32],
    y_i: &[f32],
    x_j: &[f32],
    y_j: &[f32],
    lambda: f64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if x_i.len() != x_j.len() {
        return Err(Error::ShapeMismatch {
            context: "mixup inputs",
            expected: format!("{} elements", x_i.len()),
            actual: format!("{} elements", x_j.len()),
        });
    }
    if y_i.len() != y_j.len() {
        return Err(Error::ShapeMismatch {
            context: "mixup targets",
            expected: format!("{} elements", y_i.len()),
            actual: format!("{} elements", y_j.len()),
        });
    }
    let l = lambda as f32;
    let blend = |a: &[f32], b: &[f32]| -> Vec<f32> {
        a.iter().zip(b).map(|(&p, &q)| l * p + (1.0 - l) * q).collect()
    };
    Ok((blend(x_i, x_j), blend(y_i, y_j)))
}

/// Mixup for set-valued targets (detection boxes are not interpolable
/// coordinate-wise): the union of both sets, each item weighted by its
/// example's mixing coefficient.
pub fn mixup_union<T: Clone>(a: &[T], b: &[T], lambda: f64) -> Vec<(T, f64)> {
    let mut out: Vec<(T, f64)> = Vec::with_capacity(a.len() + b.len());
    out.extend(a.iter().cloned().map(|item| (item, lambda)));
    out.extend(b.iter().cloned().map(|item| (item, 1.0 - lambda)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lr_analytic_points() {
        let s = LrSchedule::new(1e-3, 100, 1100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 1e-3);
        // Midpoint of the decay segment: exactly lr0/2 after f32 rounding.
        let mid = s.lr_at(100 + 500).unwrap();
        assert_eq!(mid as f32, 0.5e-3f32);
        assert!((mid - 0.5e-3).abs() < 1e-18);
        assert_eq!(s.lr_at(1100).unwrap(), 0.0);
    }

    #[test]
    fn lr_continuity_at_warmup_boundary() {
        let s = LrSchedule::new(0.1, 10, 50).unwrap();
        let below = s.lr_at(9).unwrap();
        let at = s.lr_at(10).unwrap();
        assert!((at - below).abs() <= 0.1 / 10.0 + 1e-12);
    }

    #[test]
    fn lr_monotone_after_warmup_and_nonnegative() {
        let s = LrSchedule::new(0.05, 7, 200).unwrap();
        let mut prev = f64::INFINITY;
        for t in 7..=200 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr >= 0.0);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn lr_floor_is_respected() {
        let mut s = LrSchedule::new(1e-3, 0, 100).unwrap();
        s.lr_min = 1e-5;
        assert_eq!(s.lr_at(100).unwrap(), 1e-5);
        assert_eq!(s.lr_at(0).unwrap(), 1e-3);
    }

    #[test]
    fn lr_out_of_range() {
        let s = LrSchedule::new(1e-3, 10, 100).unwrap();
        assert!(s.lr_at(101).is_err());
        assert_eq!(s.lr_at_clamped(5000), 0.0);
    }

    #[test]
    fn mixup_identities_and_midpoint() {
        let (x, y) = mixup(&[2.0], &[1.0, 0.0], &[4.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(x, vec![2.0]);
        assert_eq!(y, vec![1.0, 0.0]);
        let (x, y) = mixup(&[2.0], &[1.0, 0.0], &[4.0], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(x, vec![4.0]);
        assert_eq!(y, vec![0.0, 1.0]);
        let (x, _) = mixup(&[2.0], &[1.0], &[4.0], &[0.0], 0.5).unwrap();
        assert_eq!(x, vec![3.0]);
    }

    #[test]
    fn mixup_errors() {
        assert!(mixup(&[1.0], &[1.0], &[1.0, 2.0], &[1.0], 0.5).is_err());
        assert!(mixup(&[1.0], &[1.0], &[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(mixup(&[1.0], &[1.0], &[1.0], &[1.0], 1.5).is_err());
        assert!(mixup(&[1.0], &[1.0], &[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn mixup_union_weights() {
        let u = mixup_union(&["a", "b"], &["c"], 0.3);
        assert_eq!(u.len(), 3);
        assert_eq!(u[0], ("a", 0.3));
        assert_eq!(u[2].1, 0.7);
    }

    #[test]
    fn beta_sampling_statistics() {
        let cfg = MixupConfig {
            alpha: 0.2,
            enabled: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_lambda(&cfg, &mut rng)).collect();
        assert!(samples.iter().all(|&l| (0.0..=1.0).contains(&l)));
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|&l| (l - mean) * (l - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        // Beta(a, a) variance: a^2 / ((2a)^2 (2a+1)) = 1 / (4 (2a + 1)).
        let expected_var = 1.0 / (4.0 * (2.0 * 0.2 + 1.0));
        assert!((var - expected_var).abs() < 0.01, "var {var} vs {expected_var}");
    }

    #[test]
    fn beta_sampling_deterministic_under_seed() {
        let cfg = MixupConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(sample_lambda(&cfg, &mut a), sample_lambda(&cfg, &mut b));
        }
    }

    proptest! {
        #[test]
        fn prop_mixup_preserves_bounds(lambda in 0.0f64..=1.0, a in -10.0f32..10.0, b in -10.0f32..10.0) {
            let (x, _) = mixup(&[a], &[0.0], &[b], &[0.0], lambda).unwrap();
            let lo = a.min(b) - 1e-4;
            let hi = a.max(b) + 1e-4;
            prop_assert!(x[0] >= lo && x[0] <= hi);
        }
    }
}
