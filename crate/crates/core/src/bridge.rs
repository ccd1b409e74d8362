//! Tractable bridge posterior between a target endpoint (bridge time 0) and
//! a source endpoint (bridge time 1), its pinned-diffusion simulator, and
//! the degenerate Schrödinger factors under which a bridge reduces to a
//! score-based generative model.
//!
//! Given endpoints `x0` (target) and `x1` (source), the state at time `t` is
//! `N(γ_t x0 + (1 - γ_t) x1, Σ_t I)` with `γ_t`, `Σ_t` from
//! [`NoiseSchedule::bridge_coefficients`].

use crate::error::{check_dim, check_unit_time};
use crate::gmm::GmmDistribution;
use crate::rng::{rng_for, standard_normal, standard_normal_vec, stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::sde::{PathEnsemble, Provenance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeEndpoints {
    /// Bridge time 0.
    pub x_target: Vec<f64>,
    /// Bridge time 1.
    pub x_source: Vec<f64>,
}

impl BridgeEndpoints {
    pub fn new(x_target: Vec<f64>, x_source: Vec<f64>) -> Result<Self> {
        check_dim("bridge endpoints", x_target.len(), x_source.len())?;
        if x_target.iter().chain(&x_source).any(|v| !v.is_finite()) {
            return Err(Error::domain("bridge endpoints must be finite"));
        }
        Ok(Self { x_target, x_source })
    }

    pub fn dim(&self) -> usize {
        self.x_target.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgePosteriorParams {
    pub mu: Vec<f64>,
    pub gamma: f64,
    pub big_sigma: f64,
    /// `sqrt(∫₀ᵗ β)`.
    pub sigma_t: f64,
}

impl BridgePosteriorParams {
    /// Assembles the posterior from already-computed coefficients.
    pub fn from_coefficients(endpoints: &BridgeEndpoints, gamma: f64, big_sigma: f64, sigma_t: f64) -> Self {
        let mu = endpoints
            .x_target
            .iter()
            .zip(&endpoints.x_source)
            .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
            .collect();
        Self {
            mu,
            gamma,
            big_sigma,
            sigma_t,
        }
    }
}

pub fn posterior_params(
    endpoints: &BridgeEndpoints,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<BridgePosteriorParams> {
    let (s2, _) = sched.accumulated_variances(t)?;
    let (gamma, big_sigma) = sched.bridge_coefficients(t)?;
    Ok(BridgePosteriorParams::from_coefficients(
        endpoints,
        gamma,
        big_sigma,
        s2.sqrt(),
    ))
}

/// A posterior draw together with the standard-normal vector behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub x_t: Vec<f64>,
    pub z: Vec<f64>,
    pub params: BridgePosteriorParams,
}

/// `x_t = mu_t + sqrt(Σ_t) z` for a given `z`.
pub fn posterior_sample_with(params: BridgePosteriorParams, z: Vec<f64>) -> Result<BridgeSample> {
    check_dim("bridge noise", params.mu.len(), z.len())?;
    let sd = params.big_sigma.sqrt();
    let x_t = params
        .mu
        .iter()
        .zip(&z)
        .map(|(m, zi)| if sd == 0.0 { *m } else { m + sd * zi })
        .collect();
    Ok(BridgeSample { x_t, z, params })
}

pub fn posterior_sample(
    endpoints: &BridgeEndpoints,
    sched: &NoiseSchedule,
    t: f64,
    rng: &mut Rng,
) -> Result<BridgeSample> {
    let params = posterior_params(endpoints, sched, t)?;
    let z = standard_normal_vec(rng, endpoints.dim());
    posterior_sample_with(params, z)
}

/// Options for [`simulate_bridge_sde`].
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSimulation {
    pub n_paths: usize,
    pub n_steps: usize,
    /// Integration stops here; the drift is singular at `t = 1`.
    pub t_end: f64,
    pub checkpoints: Vec<f64>,
    pub seed: u64,
}

impl Default for BridgeSimulation {
    fn default() -> Self {
        Self {
            n_paths: 20_000,
            n_steps: 2000,
            t_end: 1.0 - 1e-3,
            checkpoints: vec![0.25, 0.5, 0.75],
            seed: 0,
        }
    }
}

/// Ensembles at each checkpoint plus the terminal ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgePaths {
    pub checkpoints: Vec<PathEnsemble>,
    pub terminal: PathEnsemble,
}

/// Euler–Maruyama on the pinned diffusion
/// `dX = β_t (x_source - X) / σ̄²_t dt + √β_t dW`, started at `x_target`.
///
/// The time grid is uniform with the checkpoints and `t_end` inserted.
pub fn simulate_bridge_sde(
    endpoints: &BridgeEndpoints,
    sched: &NoiseSchedule,
    sim: &BridgeSimulation,
) -> Result<BridgePaths> {
    if sim.n_steps < 100 {
        return Err(Error::config("bridge simulation needs at least 100 steps"));
    }
    if !(sim.t_end > 0.0 && sim.t_end < 1.0) {
        return Err(Error::domain("bridge simulation must stop strictly before t = 1"));
    }
    for &c in &sim.checkpoints {
        check_unit_time(c)?;
        if c > sim.t_end {
            return Err(Error::domain(format!("checkpoint {c} beyond t_end")));
        }
    }
    let mut grid: Vec<f64> = (0..=sim.n_steps)
        .map(|k| k as f64 / sim.n_steps as f64)
        .take_while(|&t| t < sim.t_end)
        .chain(sim.checkpoints.iter().copied())
        .chain(std::iter::once(sim.t_end))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    // per-interval drift gain β/σ̄² and diffusion scale √(β dt), left point
    let steps: Vec<(f64, f64, f64)> = grid
        .windows(2)
        .map(|w| {
            let dt = w[1] - w[0];
            let b = sched.beta(w[0])?;
            let (_, sb2) = sched.accumulated_variances(w[0])?;
            Ok((dt, b / sb2, (b * dt).sqrt()))
        })
        .collect::<Result<_>>()?;
    let checkpoint_idx: Vec<usize> = sim
        .checkpoints
        .iter()
        .map(|c| grid.iter().position(|g| g == c).expect("checkpoint on grid"))
        .collect();

    let d = endpoints.dim();
    let mut at_checkpoint = vec![Vec::with_capacity(sim.n_paths); sim.checkpoints.len()];
    let mut terminal = Vec::with_capacity(sim.n_paths);
    for p in 0..sim.n_paths {
        let mut rng = rng_for(sim.seed, &[stream::BRIDGE, p as u64]);
        let mut x = endpoints.x_target.clone();
        for (ci, &gi) in checkpoint_idx.iter().enumerate() {
            if gi == 0 {
                at_checkpoint[ci].push(x.clone());
            }
        }
        for (k, &(dt, gain, g)) in steps.iter().enumerate() {
            for i in 0..d {
                x[i] += gain * (endpoints.x_source[i] - x[i]) * dt + g * standard_normal(&mut rng);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("bridge path {p} diverged at step {k}")));
            }
            for (ci, &gi) in checkpoint_idx.iter().enumerate() {
                if gi == k + 1 {
                    at_checkpoint[ci].push(x.clone());
                }
            }
        }
        terminal.push(x);
    }
    Ok(BridgePaths {
        checkpoints: at_checkpoint
            .into_iter()
            .zip(&sim.checkpoints)
            .map(|(samples, &time)| PathEnsemble {
                samples,
                time,
                provenance: Provenance::Bridge,
            })
            .collect(),
        terminal: PathEnsemble {
            samples: terminal,
            time: sim.t_end,
            provenance: Provenance::Bridge,
        },
    })
}

/// Schrödinger factors of the bridge whose source marginal is the standard
/// normal: `Ψ ≡ 1` and `Ψ̂ = q = p_t`, the diffused prior.
#[derive(Debug, Clone)]
pub struct SchrodingerFactors {
    prior: GmmDistribution,
    schedule: NoiseSchedule,
}

/// Largest `alpha_bar(1)` for which the `t = 1` marginal counts as `N(0, I)`.
pub const DEGENERATE_ALPHA_BAR_MAX: f64 = 1e-3;

pub fn degenerate_factors(p: &GmmDistribution, sched: &NoiseSchedule) -> Result<SchrodingerFactors> {
    let ab1 = sched.alpha_bar(1.0)?;
    if ab1 >= DEGENERATE_ALPHA_BAR_MAX {
        return Err(Error::config(format!(
            "alpha_bar(1) = {ab1:.3e}: the terminal marginal is not close to N(0, I)"
        )));
    }
    Ok(SchrodingerFactors {
        prior: p.clone(),
        schedule: *sched,
    })
}

impl SchrodingerFactors {
    pub fn psi(&self, _x: &[f64], t: f64) -> Result<f64> {
        check_unit_time(t)?;
        Ok(1.0)
    }

    pub fn psi_hat(&self, x: &[f64], t: f64) -> Result<f64> {
        self.marginal(x, t)
    }

    pub fn marginal(&self, x: &[f64], t: f64) -> Result<f64> {
        let ab = self.schedule.alpha_bar(t)?;
        self.prior.diffused(ab).density(x)
    }

    pub fn grad_log_psi(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_unit_time(t)?;
        Ok(vec![0.0; x.len()])
    }

    /// `∇ log Ψ̂` by differentiating the diffused components directly.
    pub fn grad_log_psi_hat(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim("factor point", self.prior.dim(), x.len())?;
        let ab = self.schedule.alpha_bar(t)?;
        let sa = ab.sqrt();
        let mut logs = Vec::with_capacity(self.prior.components().len());
        let mut grads = Vec::with_capacity(self.prior.components().len());
        for c in self.prior.components() {
            let mut lg = c.weight.ln();
            let mut g = Vec::with_capacity(x.len());
            for ((xi, mi), vi) in x.iter().zip(&c.mean).zip(&c.var) {
                let v = ab * vi + (1.0 - ab);
                let d = xi - sa * mi;
                lg -= 0.5 * (d * d / v + v.ln());
                g.push(-d / v);
            }
            logs.push(lg);
            grads.push(g);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = vec![0.0; x.len()];
        for (wi, g) in w.iter().zip(&grads) {
            for (o, gi) in out.iter_mut().zip(g) {
                *o += wi / z * gi;
            }
        }
        Ok(out)
    }

    /// Forward bridge drift `f + β ∇log Ψ`.
    pub fn forward_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let b = self.schedule.beta(t)?;
        let g = self.grad_log_psi(x, t)?;
        Ok(x.iter().zip(&g).map(|(xi, gi)| -0.5 * b * xi + b * gi).collect())
    }

    /// Backward bridge drift `f - β ∇log Ψ̂`.
    pub fn backward_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let b = self.schedule.beta(t)?;
        let g = self.grad_log_psi_hat(x, t)?;
        Ok(x.iter().zip(&g).map(|(xi, gi)| -0.5 * b * xi - b * gi).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{gmm_noisy_score, GmmFamily};

    fn ends() -> BridgeEndpoints {
        BridgeEndpoints::new(vec![0.0, 0.0], vec![4.0, 0.0]).unwrap()
    }

    #[test]
    fn posterior_examples() {
        let s = NoiseSchedule::default();
        let e = ends();
        let p0 = posterior_params(&e, &s, 0.0).unwrap();
        assert_eq!(p0.mu, e.x_target);
        assert_eq!(p0.big_sigma, 0.0);
        let p1 = posterior_params(&e, &s, 1.0).unwrap();
        assert_eq!(p1.mu, e.x_source);
        assert_eq!(p1.big_sigma, 0.0);
        let p = posterior_params(&e, &s, 0.5).unwrap();
        assert!((p.mu[0] - 1.00996).abs() < 1e-5);
        assert!((p.mu[0] - (1.0 - 7.5125 / 10.05) * 4.0).abs() < 1e-12);
        assert_eq!(p.mu[1], 0.0);
        assert!((p.big_sigma - 1.896813).abs() < 1e-6);
        assert!((p.sigma_t - 2.5375f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn endpoint_mismatch_is_rejected() {
        assert!(BridgeEndpoints::new(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn endpoints_are_pinned_bitwise() {
        let s = NoiseSchedule::default();
        let e = BridgeEndpoints::new(vec![0.1, -3.7, 2.2], vec![1.0 / 3.0, 5.5, -0.9]).unwrap();
        let mut rng = rng_for(1, &[]);
        for _ in 0..10 {
            assert_eq!(posterior_sample(&e, &s, 0.0, &mut rng).unwrap().x_t, e.x_target);
            assert_eq!(posterior_sample(&e, &s, 1.0, &mut rng).unwrap().x_t, e.x_source);
        }
    }

    #[test]
    fn posterior_sample_moments() {
        let s = NoiseSchedule::default();
        let e = ends();
        let p = posterior_params(&e, &s, 0.5).unwrap();
        let n = 100_000;
        let mut rng = rng_for(2, &[]);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| posterior_sample(&e, &s, 0.5, &mut rng).unwrap().x_t)
            .collect();
        let ens = PathEnsemble {
            samples: xs,
            time: 0.5,
            provenance: Provenance::Bridge,
        };
        let se = (p.big_sigma / n as f64).sqrt();
        for (m, mu) in ens.mean().iter().zip(&p.mu) {
            assert!((m - mu).abs() < 4.0 * se);
        }
        for v in ens.variance() {
            assert!((v / p.big_sigma - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn mean_moves_monotonically_with_gamma() {
        let s = NoiseSchedule::default();
        let e = ends();
        let mut prev = -1.0;
        for i in 0..=50 {
            let p = posterior_params(&e, &s, i as f64 / 50.0).unwrap();
            assert!(p.mu[0] > prev);
            prev = p.mu[0];
        }
    }

    #[test]
    fn bridge_sde_matches_posterior_moments() {
        let s = NoiseSchedule::default();
        let e = ends();
        let sim = BridgeSimulation {
            n_paths: 20_000,
            ..Default::default()
        };
        let paths = simulate_bridge_sde(&e, &s, &sim).unwrap();
        for ens in &paths.checkpoints {
            let p = posterior_params(&e, &s, ens.time).unwrap();
            let se = (p.big_sigma / sim.n_paths as f64).sqrt();
            for (m, mu) in ens.mean().iter().zip(&p.mu) {
                assert!((m - mu).abs() < 4.0 * se, "t={} mean {m} vs {mu}", ens.time);
            }
            for v in ens.variance() {
                assert!((v / p.big_sigma - 1.0).abs() < 0.05, "t={} var {v}", ens.time);
            }
        }
    }

    #[test]
    fn bridge_sde_with_equal_endpoints_stays_centred() {
        let s = NoiseSchedule::default();
        let e = BridgeEndpoints::new(vec![1.5, -0.5], vec![1.5, -0.5]).unwrap();
        let sim = BridgeSimulation {
            n_paths: 5_000,
            n_steps: 500,
            checkpoints: vec![0.5],
            ..Default::default()
        };
        let paths = simulate_bridge_sde(&e, &s, &sim).unwrap();
        let (_, big) = s.bridge_coefficients(0.5).unwrap();
        let se = (big / 5_000.0).sqrt();
        for (m, x) in paths.checkpoints[0].mean().iter().zip(&e.x_target) {
            assert!((m - x).abs() < 4.0 * se);
        }
    }

    #[test]
    fn bridge_sde_converges_to_source() {
        let s = NoiseSchedule::default();
        let e = ends();
        let gap = |delta: f64| {
            let sim = BridgeSimulation {
                n_paths: 2_000,
                n_steps: 4000,
                t_end: 1.0 - delta,
                checkpoints: vec![],
                seed: 3,
            };
            let paths = simulate_bridge_sde(&e, &s, &sim).unwrap();
            paths
                .terminal
                .samples
                .iter()
                .map(|x| ((x[0] - 4.0).powi(2) + x[1].powi(2)).sqrt())
                .sum::<f64>()
                / 2_000.0
        };
        let coarse = gap(1e-2);
        let fine = gap(1e-3);
        assert!(fine < coarse, "{fine} !< {coarse}");
        assert!(fine < 0.3);
    }

    #[test]
    fn degenerate_factor_identities() {
        let sched = NoiseSchedule::default();
        let p = GmmFamily::default_2d().members()[1].clone();
        let f = degenerate_factors(&p, &sched).unwrap();
        for ti in 1..=9 {
            let t = ti as f64 / 10.0;
            for i in 0..50 {
                for j in 0..50 {
                    let x = [-3.0 + 6.0 * i as f64 / 49.0, -3.0 + 6.0 * j as f64 / 49.0];
                    assert_eq!(f.psi(&x, t).unwrap(), 1.0);
                    let r = f.psi(&x, t).unwrap() * f.psi_hat(&x, t).unwrap() - f.marginal(&x, t).unwrap();
                    assert!(r.abs() <= 1e-12);
                    let a = f.grad_log_psi_hat(&x, t).unwrap();
                    let b = gmm_noisy_score(&p, &sched, &x, t).unwrap();
                    for (u, v) in a.iter().zip(&b) {
                        assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_factors_need_a_noise_terminal() {
        let weak = NoiseSchedule::linear(0.1, 2.0).unwrap();
        let p = GmmFamily::default_2d().members()[1].clone();
        assert!(matches!(degenerate_factors(&p, &weak), Err(Error::Config(_))));
    }
}
