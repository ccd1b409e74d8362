//! Euler–Maruyama simulation of the VP forward SDE
//! `dX = -½ β(t) X dt + √β(t) dW` and of its time reversal
//! `dX = [-½ β X - β ∇log p_t(X)] dt + √β dW̄`.
//!
//! Each path draws its Wiener increments from its own stream derived from
//! `(seed, path index)`, so ensembles do not depend on evaluation order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::check_unit_time;
use crate::gmm::Condition;
use crate::render::ViewTransform;
use crate::rng::{rng_for, standard_normal, stream};
use crate::schedule::NoiseSchedule;
use crate::score::{score_from_eps, ScoreModel};
use crate::{Error, Result};

/// Reverse integration stops here; narrow components make the score blow
/// up closer to zero.
pub const REVERSE_STOP: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeSpec {
    pub schedule: NoiseSchedule,
    pub n_steps: usize,
    pub seed: u64,
}

impl SdeSpec {
    pub fn new(schedule: NoiseSchedule, n_steps: usize, seed: u64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("SDE needs at least one step"));
        }
        Ok(Self {
            schedule,
            n_steps,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Forward,
    Reverse,
    Bridge,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Forward => "forward",
            Provenance::Reverse => "reverse",
            Provenance::Bridge => "bridge",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub samples: Vec<Vec<f64>>,
    pub time: f64,
    pub provenance: Provenance,
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for s in &self.samples {
            for (mi, si) in m.iter_mut().zip(s) {
                *mi += si;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-coordinate unbiased variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.samples.len() as f64;
        let mut v = vec![0.0; self.dim()];
        for s in &self.samples {
            for ((vi, si), mi) in v.iter_mut().zip(s).zip(&m) {
                *vi += (si - mi).powi(2);
            }
        }
        v.iter_mut().for_each(|x| *x /= n - 1.0);
        v
    }

    /// CSV rows: coordinates, time, provenance.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},time,provenance", header.join(","))?;
        for s in &self.samples {
            let coords: Vec<String> = s.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(
                w,
                "{},{:.17e},{}",
                coords.join(","),
                self.time,
                self.provenance.as_str()
            )?;
        }
        Ok(())
    }
}

/// Drift of the reverse-time SDE at `(x, t)` given the score there.
pub fn reverse_drift(sched: &NoiseSchedule, x: &[f64], score: &[f64], t: f64) -> Result<Vec<f64>> {
    let b = sched.beta(t)?;
    Ok(x.iter()
        .zip(score)
        .map(|(xi, si)| -0.5 * b * xi - b * si)
        .collect())
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite state at step {step}")));
    }
    Ok(())
}

pub fn simulate_forward(spec: &SdeSpec, x0: &[Vec<f64>], t_end: f64) -> Result<PathEnsemble> {
    check_unit_time(t_end)?;
    let mut samples = x0.to_vec();
    if t_end > 0.0 {
        let dt = t_end / spec.n_steps as f64;
        let sqrt_dt = dt.sqrt();
        let betas: Vec<f64> = (0..spec.n_steps)
            .map(|k| spec.schedule.beta(k as f64 * dt))
            .collect::<Result<_>>()?;
        for (p, x) in samples.iter_mut().enumerate() {
            let mut rng = rng_for(spec.seed, &[stream::PATH, 0, p as u64]);
            for (k, &b) in betas.iter().enumerate() {
                let g = b.sqrt() * sqrt_dt;
                for xi in x.iter_mut() {
                    *xi += -0.5 * b * *xi * dt + g * standard_normal(&mut rng);
                }
                check_finite(x, k)?;
            }
        }
    }
    Ok(PathEnsemble {
        samples,
        time: t_end,
        provenance: Provenance::Forward,
    })
}

/// Integrates from `t = 1` down to [`REVERSE_STOP`] in `n_steps` steps.
pub fn simulate_reverse<M: ScoreModel + ?Sized>(
    spec: &SdeSpec,
    x1: &[Vec<f64>],
    score: &M,
    y: Condition,
) -> Result<PathEnsemble> {
    let h = (1.0 - REVERSE_STOP) / spec.n_steps as f64;
    let sqrt_h = h.sqrt();
    let view = ViewTransform::identity();
    let mut samples = x1.to_vec();
    for (p, x) in samples.iter_mut().enumerate() {
        let mut rng = rng_for(spec.seed, &[stream::PATH, 1, p as u64]);
        for k in 0..spec.n_steps {
            let t = 1.0 - k as f64 * h;
            let eps = score.epsilon(x, t, y, &view)?;
            let s = score_from_eps(&eps, &spec.schedule, t)?;
            let drift = reverse_drift(&spec.schedule, x, &s, t)?;
            let g = spec.schedule.beta(t)?.sqrt() * sqrt_h;
            for (xi, di) in x.iter_mut().zip(&drift) {
                // stepping backwards in time: x(t - h) = x(t) - drift h + g dW
                *xi += -di * h + g * standard_normal(&mut rng);
            }
            check_finite(x, k)?;
        }
    }
    Ok(PathEnsemble {
        samples,
        time: REVERSE_STOP,
        provenance: Provenance::Reverse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{GmmComponent, GmmDistribution, GmmFamily};
    use crate::metrics::sliced_w1;
    use crate::score::{AnalyticScore, FnScoreModel};

    fn gaussian_draws(m: f64, s2: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, &[]);
        (0..n)
            .map(|_| vec![m + s2.sqrt() * standard_normal(&mut rng)])
            .collect()
    }

    #[test]
    fn zero_length_forward_is_identity() {
        let spec = SdeSpec::new(NoiseSchedule::default(), 10, 0).unwrap();
        let x = gaussian_draws(0.0, 1.0, 20, 1);
        assert_eq!(simulate_forward(&spec, &x, 0.0).unwrap().samples, x);
    }

    #[test]
    fn forward_moments_match_vp_marginal() {
        let sched = NoiseSchedule::default();
        let spec = SdeSpec::new(sched, 1000, 3).unwrap();
        let n = 50_000;
        let x0 = gaussian_draws(3.0, 0.25, n, 2);
        let out = simulate_forward(&spec, &x0, 1.0).unwrap();
        let ab = sched.alpha_bar(1.0).unwrap();
        let mean = 3.0 * ab.sqrt();
        let var = 0.25 * ab + 1.0 - ab;
        assert!((mean - 0.0197).abs() < 1e-3);
        let m = out.mean()[0];
        let v = out.variance()[0];
        let se_m = (var / n as f64).sqrt();
        let se_v = var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((m - mean).abs() < 4.0 * se_m, "mean {m} vs {mean}");
        assert!((v - var).abs() < 4.0 * se_v, "var {v} vs {var}");
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = SdeSpec::new(NoiseSchedule::default(), 50, 9).unwrap();
        let x0 = gaussian_draws(0.0, 1.0, 100, 4);
        let a = simulate_forward(&spec, &x0, 0.7).unwrap();
        let b = simulate_forward(&spec, &x0, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_states_name_the_step() {
        let spec = SdeSpec::new(NoiseSchedule::default(), 5, 0).unwrap();
        let bad = FnScoreModel::new(1, |_, _, _, _| Ok(vec![f64::NAN]));
        let err = simulate_reverse(&spec, &[vec![0.0]], &bad, Condition::Class(0)).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("step 0")));
    }

    #[test]
    fn reverse_preserves_standard_normal() {
        let sched = NoiseSchedule::default();
        let fam = GmmFamily::new(vec![GmmDistribution::isotropic(vec![0.0, 0.0], 1.0).unwrap()]).unwrap();
        let model = AnalyticScore::new(fam, sched);
        let spec = SdeSpec::new(sched, 200, 5).unwrap();
        let mut rng = rng_for(6, &[]);
        let x1: Vec<Vec<f64>> = (0..50_000)
            .map(|_| vec![standard_normal(&mut rng), standard_normal(&mut rng)])
            .collect();
        let out = simulate_reverse(&spec, &x1, &model, Condition::Class(0)).unwrap();
        for (m, v) in out.mean().iter().zip(out.variance()) {
            assert!(m.abs() < 0.02, "mean {m}");
            assert!((0.96..=1.04).contains(&v), "var {v}");
        }
    }

    #[test]
    fn zero_score_reverse_matches_analytic_moments() {
        // With zero score the reverse drift is +½β x, so in reverse time s
        // the mean grows by exp(½∫β) and the variance obeys v' = β v + β.
        let sched = NoiseSchedule::default();
        let zero = FnScoreModel::new(1, |x: &[f64], _, _, _| Ok(vec![0.0; x.len()]));
        let spec = SdeSpec::new(sched, 2000, 8).unwrap();
        let n = 40_000;
        let (m0, v0) = (0.01, 1e-4);
        let x1 = gaussian_draws(m0, v0, n, 12);
        let out = simulate_reverse(&spec, &x1, &zero, Condition::Class(0)).unwrap();
        let int_beta = sched.accumulated_variances(REVERSE_STOP).unwrap().1;
        let mean = m0 * (0.5 * int_beta).exp();
        let var = (v0 + 1.0) * int_beta.exp() - 1.0;
        let m = out.mean()[0];
        let v = out.variance()[0];
        assert!((m - mean).abs() < 4.0 * (var / n as f64).sqrt() + 0.01 * mean.abs());
        assert!((v / var - 1.0).abs() < 0.05, "var {v} vs {var}");
    }

    fn bimodal() -> GmmDistribution {
        GmmDistribution::new(vec![
            GmmComponent {
                weight: 0.5,
                mean: vec![-2.0],
                var: vec![0.25],
            },
            GmmComponent {
                weight: 0.5,
                mean: vec![2.0],
                var: vec![0.25],
            },
        ])
        .unwrap()
    }

    #[test]
    fn reverse_recovers_bimodal_target() {
        let sched = NoiseSchedule::default();
        let p = bimodal();
        let model = AnalyticScore::new(GmmFamily::new(vec![p.clone()]).unwrap(), sched);
        let spec = SdeSpec::new(sched, 1000, 21).unwrap();
        let n = 50_000;
        let x1 = gaussian_draws(0.0, 1.0, n, 22);
        let out = simulate_reverse(&spec, &x1, &model, Condition::Class(0)).unwrap();
        let exact = p.sample_n(&mut rng_for(23, &[]), n);
        let d = sliced_w1(&out.samples, &exact, 64, 0).unwrap();
        assert!(d < 0.05, "sliced W1 {d}");
    }

    #[test]
    fn csv_export_has_one_row_per_sample() {
        let e = PathEnsemble {
            samples: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            time: 0.5,
            provenance: Provenance::Forward,
        };
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("x0,x1,time,provenance"));
        assert!(text.lines().nth(1).unwrap().ends_with(",forward"));
    }
}
