//! Discrete variance-preserving noise schedule on the integer grid
//! `t ∈ {0, 1, …, N}` (t = 0 is clean data) and the decaying purification
//! strengths used by the outer solver loop.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_N_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    /// `beta[t - 1]` is β_t for t = 1..=N.
    beta: Vec<T>,
    /// `alpha_bar[t]` for t = 0..=N, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// β_t linearly interpolated from `beta_min` (t = 1) to `beta_max` (t = N).
    pub fn linear(n_steps: usize, beta_min: T, beta_max: T) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("noise schedule needs at least one step"));
        }
        let open_unit = |b: T| b > T::zero() && b < T::one();
        if !open_unit(beta_min) || !open_unit(beta_max) || beta_min > beta_max {
            return Err(invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let beta = (0..n_steps)
            .map(|i| {
                if n_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * T::of_usize(i) / T::of_usize(n_steps - 1)
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// The 1000-step DDPM-style schedule, β from 1e-4 to 0.02.
    pub fn ddpm() -> Self {
        Self::linear(
            DEFAULT_N_STEPS,
            T::of(DEFAULT_BETA_MIN),
            T::of(DEFAULT_BETA_MAX),
        )
        .expect("default schedule is valid")
    }

    pub fn from_betas(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("noise schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > T::zero() && **b < T::one())) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        let mut acc = T::one();
        alpha_bar.push(acc);
        for &b in &beta {
            acc *= T::one() - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    /// β_t for 1 ≤ t ≤ N.
    #[inline]
    pub fn beta(&self, t: usize) -> T {
        assert!(t >= 1 && t <= self.n_steps(), "beta index {t} out of 1..={}", self.n_steps());
        self.beta[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    pub fn check_time(&self, t: usize) -> Result<()> {
        if t > self.n_steps() {
            Err(invalid(format!("timestep {t} exceeds N = {}", self.n_steps())))
        } else {
            Ok(())
        }
    }
}

/// Purification strengths T_1 ≥ T_2 ≥ … ≥ T_K, one per outer iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurificationSchedule {
    times: Vec<usize>,
}

impl PurificationSchedule {
    /// Linear decay from `t_start` to `t_end` over `k` iterations, each entry
    /// rounded half-up from the exact rational interpolant.
    pub fn linear(k: usize, t_start: usize, t_end: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("purification schedule needs K >= 1"));
        }
        if t_end > t_start {
            return Err(invalid(format!(
                "T_end ({t_end}) must not exceed T_start ({t_start})"
            )));
        }
        if k == 1 {
            if t_start != t_end {
                return Err(invalid("K = 1 requires T_start = T_end"));
            }
            return Ok(Self { times: vec![t_start] });
        }
        let den = (k - 1) as u128;
        let times = (0..k)
            .map(|i| {
                let num = t_start as u128 * (den - i as u128) + t_end as u128 * i as u128;
                ((2 * num + den) / (2 * den)) as usize
            })
            .collect();
        Ok(Self { times })
    }

    pub fn constant(k: usize, t: usize) -> Result<Self> {
        Self::linear(k, t, t)
    }

    pub fn from_times(times: Vec<usize>) -> Result<Self> {
        if times.is_empty() {
            return Err(invalid("purification schedule needs K >= 1"));
        }
        if times.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("purification schedule must be non-increasing"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_time(&self) -> usize {
        self.times[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_beta_products() {
        let s = NoiseSchedule::<f64>::linear(3, 0.01, 0.01).unwrap();
        let want = [1.0, 0.99, 0.9801, 0.970299];
        for (a, b) in s.alpha_bars().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_schedule_nearly_destroys_signal() {
        let s = NoiseSchedule::<f64>::ddpm();
        let direct: f64 = (1..=1000).map(|t| 1.0 - s.beta(t)).product();
        assert!((s.alpha_bar(1000) - direct).abs() <= 1e-12 * direct);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn linear_decay_examples() {
        let s = PurificationSchedule::linear(10, 400, 0).unwrap();
        assert_eq!(s.times(), &[400, 356, 311, 267, 222, 178, 133, 89, 44, 0]);
        assert_eq!(PurificationSchedule::linear(1, 200, 200).unwrap().times(), &[200]);
        let noisy = PurificationSchedule::linear(10, 400, 200).unwrap();
        assert_eq!(noisy.times()[0], 400);
        assert_eq!(*noisy.times().last().unwrap(), 200);
    }

    #[test]
    fn rejects_bad_purification_schedules() {
        assert!(PurificationSchedule::linear(0, 10, 0).is_err());
        assert!(PurificationSchedule::linear(5, 10, 20).is_err());
        assert!(PurificationSchedule::linear(1, 10, 0).is_err());
        assert!(PurificationSchedule::from_times(vec![3, 5]).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_matches_brute_force(n in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.05) {
            let s = NoiseSchedule::<f64>::linear(n, lo, lo + span).unwrap();
            for t in 0..=n {
                let direct: f64 = (1..=t).map(|u| 1.0 - s.beta(u)).product();
                prop_assert!((s.alpha_bar(t) - direct).abs() <= 1e-12 * direct);
            }
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn purification_schedule_is_monotone(k in 1usize..60, a in 0usize..1000, b in 0usize..1000) {
            let (start, end) = if a >= b { (a, b) } else { (b, a) };
            let start = if k == 1 { end } else { start };
            let s = PurificationSchedule::linear(k, start, end).unwrap();
            prop_assert_eq!(s.len(), k);
            prop_assert_eq!(s.times()[0], start);
            prop_assert_eq!(*s.times().last().unwrap(), end);
            prop_assert!(s.times().windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
