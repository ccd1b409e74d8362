//! Noise schedules on the unit horizon and the time samplers that drive the
//! distillation loop.
//!
//! A schedule is a rate function `beta(t) > 0` on `[0, 1]`. Everything else
//! is derived from its integrals:
//!
//! - `sigma2(t) = ∫₀ᵗ beta` and `sigma_bar2(t) = ∫ₜ¹ beta`
//! - `alpha_bar(t) = exp(-sigma2(t))` for the variance-preserving process
//! - `gamma(t) = sigma_bar2 / (sigma2 + sigma_bar2)` and
//!   `big_sigma(t) = sigma2 * sigma_bar2 / (sigma2 + sigma_bar2)` for the
//!   bridge posterior

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::check_unit_time;
use crate::quad::adaptive_simpson;
use crate::rng::{rng_for, stream};
use crate::{Error, Result};

/// Absolute tolerance for schedules without a closed-form integral.
pub const QUADRATURE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `beta_min + (beta_max - beta_min) * t`
    Linear,
    /// `beta_min + (beta_max - beta_min) * (1 - cos(pi t)) / 2`
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        let s = Self {
            kind,
            beta_min,
            beta_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear, beta_min, beta_max)
    }

    pub fn cosine(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, beta_min, beta_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min.is_finite() && self.beta_max.is_finite()) {
            return Err(Error::config("schedule rates must be finite"));
        }
        if self.beta_min <= 0.0 || self.beta_max < self.beta_min {
            return Err(Error::config(format!(
                "schedule needs 0 < beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }

    fn rate(&self, t: f64) -> f64 {
        let span = self.beta_max - self.beta_min;
        match self.kind {
            ScheduleKind::Linear => self.beta_min + span * t,
            ScheduleKind::Cosine => {
                self.beta_min + span * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(self.rate(t))
    }

    /// `∫₀ᵗ beta` without the domain check.
    fn integral_to(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Linear => {
                Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)
            }
            ScheduleKind::Cosine => adaptive_simpson(|s| self.rate(s), 0.0, t, QUADRATURE_TOL),
        }
    }

    /// `∫ₜ¹ beta` without the domain check.
    fn integral_from(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Linear => Ok(self.beta_min * (1.0 - t)
                + 0.5 * (self.beta_max - self.beta_min) * (1.0 - t * t)),
            ScheduleKind::Cosine => adaptive_simpson(|s| self.rate(s), t, 1.0, QUADRATURE_TOL),
        }
    }

    /// `σ²(1)`, the total integrated rate.
    pub fn total_variance(&self) -> Result<f64> {
        self.integral_to(1.0)
    }

    /// Returns `(sigma2, sigma_bar2)` at `t`.
    pub fn accumulated_variances(&self, t: f64) -> Result<(f64, f64)> {
        check_unit_time(t)?;
        Ok((self.integral_to(t)?, self.integral_from(t)?))
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok((-self.integral_to(t)?).exp())
    }

    /// Returns `(gamma, big_sigma)` at `t`.
    pub fn bridge_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        let (s2, sb2) = self.accumulated_variances(t)?;
        let total = s2 + sb2;
        Ok((sb2 / total, s2 * sb2 / total))
    }

    /// `σ_t = sqrt(∫₀ᵗ beta)`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.accumulated_variances(t)?.0.sqrt())
    }
}

/// How a [`TimeSampler`] shapes its window over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SamplerMode {
    /// `U[lo, hi]` at every iteration.
    Uniform,
    /// `U[lo, hi_eff(iter)]` with `hi_eff` shrinking linearly from `hi` to
    /// `lo + floor_width` over the run.
    Annealed { floor_width: f64 },
    /// `U[lo, hi]` before `stage_boundary`, `U[lo, late_hi]` from then on.
    TwoStage { stage_boundary: usize, late_hi: f64 },
}

/// Default width of the fully annealed window.
pub const ANNEAL_FLOOR_WIDTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSampler {
    pub mode: SamplerMode,
    pub lo: f64,
    pub hi: f64,
    pub total_iterations: usize,
    pub seed: u64,
    /// Distinguishes samplers that share a root seed.
    pub stream: u64,
}

impl TimeSampler {
    pub fn uniform(lo: f64, hi: f64, seed: u64) -> Result<Self> {
        Self::build(SamplerMode::Uniform, lo, hi, 1, seed, stream::T)
    }

    pub fn annealed(lo: f64, hi: f64, total_iterations: usize, seed: u64) -> Result<Self> {
        Self::build(
            SamplerMode::Annealed {
                floor_width: ANNEAL_FLOOR_WIDTH,
            },
            lo,
            hi,
            total_iterations,
            seed,
            stream::T,
        )
    }

    pub fn two_stage(
        lo: f64,
        early_hi: f64,
        late_hi: f64,
        stage_boundary: usize,
        total_iterations: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(
            SamplerMode::TwoStage {
                stage_boundary,
                late_hi,
            },
            lo,
            early_hi,
            total_iterations,
            seed,
            stream::T_PRIME,
        )
    }

    pub fn build(
        mode: SamplerMode,
        lo: f64,
        hi: f64,
        total_iterations: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "time window needs 0 <= lo < hi <= 1, got [{lo}, {hi}]"
            )));
        }
        match mode {
            SamplerMode::Uniform => {}
            SamplerMode::Annealed { floor_width } => {
                if !(floor_width > 0.0 && lo + floor_width <= hi) {
                    return Err(Error::config(format!(
                        "anneal floor width {floor_width} does not fit in [{lo}, {hi}]"
                    )));
                }
            }
            SamplerMode::TwoStage {
                stage_boundary,
                late_hi,
            } => {
                if !(lo < late_hi && late_hi <= 1.0) {
                    return Err(Error::config(format!(
                        "second-stage window [{lo}, {late_hi}] is empty"
                    )));
                }
                if stage_boundary == 0 || stage_boundary >= total_iterations.max(1) {
                    return Err(Error::config(format!(
                        "stage boundary {stage_boundary} must lie inside (0, {total_iterations})"
                    )));
                }
            }
        }
        Ok(Self {
            mode,
            lo,
            hi,
            total_iterations,
            seed,
            stream,
        })
    }

    /// Upper edge of the sampling window at `iter`.
    pub fn upper(&self, iter: usize) -> f64 {
        match self.mode {
            SamplerMode::Uniform => self.hi,
            SamplerMode::Annealed { floor_width } => {
                let floor = self.lo + floor_width;
                if self.total_iterations <= 1 {
                    return floor;
                }
                let frac = (iter.min(self.total_iterations - 1)) as f64
                    / (self.total_iterations - 1) as f64;
                self.hi + (floor - self.hi) * frac
            }
            SamplerMode::TwoStage {
                stage_boundary,
                late_hi,
            } => {
                if iter < stage_boundary {
                    self.hi
                } else {
                    late_hi
                }
            }
        }
    }

    /// Draw for `iter`; identical for identical `(seed, iter)`.
    pub fn sample(&self, iter: usize) -> f64 {
        self.sample_indexed(iter, 0)
    }

    /// Draw for `iter` on an auxiliary lane, e.g. one lane per particle.
    pub fn sample_indexed(&self, iter: usize, lane: u64) -> f64 {
        let mut rng = rng_for(self.seed, &[self.stream, iter as u64, lane]);
        let hi = self.upper(iter);
        self.lo + (hi - self.lo) * rng.random::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(0.1, 20.0).unwrap()
    }

    #[test]
    fn linear_rate_examples() {
        let s = sched();
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert_eq!(s.beta(1.0).unwrap(), 20.0);
        assert!((s.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        // midpoint of the endpoints
        assert!((s.beta(0.5).unwrap() - 0.5 * (0.1 + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_time() {
        let s = sched();
        assert!(matches!(s.beta(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.beta(1.5), Err(Error::Domain(_))));
        assert!(s.alpha_bar(f64::NAN).is_err());
        assert!(s.accumulated_variances(2.0).is_err());
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(NoiseSchedule::linear(0.0, 1.0).is_err());
        assert!(NoiseSchedule::linear(2.0, 1.0).is_err());
    }

    #[test]
    fn accumulated_variance_examples() {
        let s = sched();
        let (a, b) = s.accumulated_variances(0.0).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(b, s.total_variance().unwrap());
        assert!((b - 10.05).abs() < 1e-12);
        let (a, b) = s.accumulated_variances(1.0).unwrap();
        assert!((a - 10.05).abs() < 1e-12);
        assert_eq!(b, 0.0);
        let (a, b) = s.accumulated_variances(0.5).unwrap();
        assert!((a - 2.5375).abs() < 1e-12);
        assert!((b - 7.5125).abs() < 1e-12);
    }

    #[test]
    fn accumulated_variance_matches_trapezoid_oracle() {
        let s = sched();
        let n = 1_000_000;
        let h = 0.5 / n as f64;
        let mut acc = 0.5 * (s.rate(0.0) + s.rate(0.5));
        for i in 1..n {
            acc += s.rate(i as f64 * h);
        }
        let trapezoid = acc * h;
        assert!((trapezoid - s.accumulated_variances(0.5).unwrap().0).abs() < 1e-9);
    }

    #[test]
    fn alpha_bar_examples() {
        let s = sched();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        assert!((s.alpha_bar(0.5).unwrap() - 0.07907).abs() < 1e-5);
        assert!((s.alpha_bar(1.0).unwrap() - 4.32e-5).abs() < 1e-7);
    }

    #[test]
    fn bridge_coefficient_examples() {
        let s = sched();
        assert_eq!(s.bridge_coefficients(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.bridge_coefficients(1.0).unwrap(), (0.0, 0.0));
        let (g, big) = s.bridge_coefficients(0.5).unwrap();
        assert!((g - 7.5125 / 10.05).abs() < 1e-12);
        assert!((g - 0.74751).abs() < 1e-5);
        assert!((big - 2.5375 * 7.5125 / 10.05).abs() < 1e-12);
        // 2.5375 * 7.5125 / 10.05 = 1.896813...
        assert!((big - 1.896813).abs() < 1e-6);
    }

    #[test]
    fn cosine_quadrature_matches_closed_form() {
        let s = NoiseSchedule::cosine(0.1, 20.0).unwrap();
        // ∫₀ᵗ = beta_min t + span (t - sin(pi t)/pi) / 2
        let closed = |t: f64| {
            0.1 * t + 19.9 * 0.5 * (t - (std::f64::consts::PI * t).sin() / std::f64::consts::PI)
        };
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let (a, b) = s.accumulated_variances(t).unwrap();
            assert!((a - closed(t)).abs() < 1e-9, "t={t}");
            assert!((a + b - closed(1.0)).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn schedule_identities_on_grid() {
        for s in [sched(), NoiseSchedule::cosine(0.1, 20.0).unwrap()] {
            let total = s.total_variance().unwrap();
            let tol = if s.kind == ScheduleKind::Linear { 1e-10 } else { 1e-8 };
            let mut prev_gamma = f64::INFINITY;
            let mut prev_ab = f64::INFINITY;
            let mut sigmas = Vec::new();
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let (a, b) = s.accumulated_variances(t).unwrap();
                assert!((a + b - total).abs() <= tol);
                let (g, big) = s.bridge_coefficients(t).unwrap();
                let ab = s.alpha_bar(t).unwrap();
                assert!(g < prev_gamma && ab < prev_ab);
                prev_gamma = g;
                prev_ab = ab;
                sigmas.push(big);
            }
            assert_eq!(sigmas[0], 0.0);
            assert!(sigmas[100].abs() <= tol);
            assert!(sigmas[1..100].iter().all(|&v| v > 0.0));
            // single interior maximum: increasing then decreasing
            let peak = sigmas
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m })
                .0;
            assert!(sigmas[..=peak].windows(2).all(|w| w[0] < w[1]));
            assert!(sigmas[peak..].windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn uniform_sampler_stays_in_window() {
        let s = TimeSampler::uniform(0.02, 0.5, 3).unwrap();
        for i in 0..2000 {
            let t = s.sample(i);
            assert!((0.02..=0.5).contains(&t));
        }
    }

    #[test]
    fn annealed_sampler_endpoint_and_determinism() {
        let s = TimeSampler::annealed(0.02, 0.5, 1700, 7).unwrap();
        for lane in 0..500 {
            let t = s.sample_indexed(1699, lane);
            assert!((0.02..=0.03 + 1e-15).contains(&t));
        }
        assert_eq!(s.sample(0), s.sample(0));
        assert!((s.upper(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn annealed_bucket_maxima_are_non_increasing() {
        let total = 10_000;
        let s = TimeSampler::annealed(0.02, 0.5, total, 11).unwrap();
        let buckets = 10;
        let per = total / buckets;
        let mut prev = f64::INFINITY;
        for b in 0..buckets {
            let m = (b * per..(b + 1) * per)
                .map(|i| s.sample(i))
                .fold(f64::MIN, f64::max);
            assert!(m <= prev, "bucket {b}: {m} > {prev}");
            prev = m;
        }
    }

    #[test]
    fn two_stage_windows() {
        let s = TimeSampler::two_stage(0.02, 0.7, 0.5, 700, 1700, 5).unwrap();
        for lane in 0..1000 {
            let early = s.sample_indexed(0, lane);
            assert!((0.02..=0.7).contains(&early));
            let late = s.sample_indexed(700, lane);
            assert!((0.02..=0.5).contains(&late));
        }
        assert_eq!(s.sample(699), s.sample(699));
        assert_eq!(s.upper(699), 0.7);
        assert_eq!(s.upper(700), 0.5);
    }

    #[test]
    fn sampler_rejects_bad_windows() {
        assert!(TimeSampler::uniform(0.5, 0.2, 0).is_err());
        assert!(TimeSampler::uniform(0.0, 1.5, 0).is_err());
        assert!(TimeSampler::two_stage(0.02, 0.7, 0.5, 0, 10, 0).is_err());
        assert!(TimeSampler::two_stage(0.02, 0.7, 0.5, 10, 10, 0).is_err());
    }
}
