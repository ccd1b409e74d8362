//! Score distillation: the one-step denoised target, the SDS gradient, the
//! bridge (TraCe) gradient, and the alternating optimization loop.
//!
//! The low-level `*_with` functions take `t` and the noise draw explicitly so
//! that stubs can reproduce residuals exactly; the sampling wrappers draw
//! them from the configured samplers and derived streams.

mod dump;
mod run;

pub use dump::{dump_gradient_field, GradientDump};
pub use run::{
    eval_views, reference_samples, run_distillation, run_distillation_observed, DistillInputs, IterationRecord,
    IterationState, RunHeader, RunRecord, RunStatus, EVAL_SEED,
};

use serde::{Deserialize, Serialize};

use crate::bridge::{posterior_sample, BridgeEndpoints, BridgeSample};
use crate::error::check_dim;
use crate::gmm::Condition;
use crate::nn::BridgeTuple;
use crate::render::{Canvas, Generator, ViewRanges, ViewTransform};
use crate::rng::{rng_for, standard_normal_vec, stream};
use crate::schedule::{NoiseSchedule, SamplerMode, TimeSampler, ANNEAL_FLOOR_WIDTH};
use crate::score::ScoreModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sds,
    Trace,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sds => "sds",
            Method::Trace => "trace",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sds" => Ok(Method::Sds),
            "trace" => Ok(Method::Trace),
            other => Err(Error::config(format!("unknown method {other:?} (expected sds or trace)"))),
        }
    }
}

/// Per-time weighting `w(t)` of the distillation residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    Constant,
    /// `√(1 - ᾱ_t)` under the pretrained schedule.
    SigmaScaled,
}

impl WeightFn {
    pub fn eval(self, sched: &NoiseSchedule, t: f64) -> Result<f64> {
        match self {
            WeightFn::Constant => Ok(1.0),
            WeightFn::SigmaScaled => Ok((1.0 - sched.alpha_bar(t)?).sqrt()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub cfg_weight: f64,
    pub weight_fn: WeightFn,
    /// Bridge time window; annealed toward `t_lo` when `anneal_t` is set.
    pub t_lo: f64,
    pub t_hi: f64,
    pub anneal_t: bool,
    pub t_prime_lo: f64,
    pub t_prime_early_hi: f64,
    pub t_prime_late_hi: f64,
    pub total_iterations: usize,
    pub stage_boundary: usize,
    pub eta_theta: f64,
    pub eta_phi: f64,
    /// Views drawn per particle per iteration.
    pub batch_views: usize,
    /// Re-noise the rendering before the one-step denoise (ablation).
    pub renoise_target: bool,
    pub condition: Condition,
    pub view_ranges: ViewRanges,
    /// Fixed views per particle used for evaluation.
    pub eval_views: usize,
    /// Prior draws in the evaluation reference set.
    pub reference_samples: usize,
    /// Metrics are computed every this many iterations and at the end.
    pub metric_every: usize,
    /// Supplied by the run configuration's root seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            cfg_weight: 20.0,
            weight_fn: WeightFn::Constant,
            t_lo: 0.02,
            t_hi: 0.5,
            anneal_t: true,
            t_prime_lo: 0.02,
            t_prime_early_hi: 0.7,
            t_prime_late_hi: 0.5,
            total_iterations: 1700,
            stage_boundary: 700,
            eta_theta: 1e-3,
            eta_phi: 1e-3,
            batch_views: 1,
            renoise_target: false,
            condition: Condition::Class(1),
            view_ranges: ViewRanges::fixed_identity(),
            eval_views: 1,
            reference_samples: 2000,
            metric_every: 100,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta_theta", self.eta_theta), ("eta_phi", self.eta_phi)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.cfg_weight.is_finite() {
            return Err(Error::config("cfg_weight must be finite"));
        }
        if self.total_iterations > 0
            && !(0 < self.stage_boundary && self.stage_boundary < self.total_iterations)
        {
            return Err(Error::config(format!(
                "stage boundary {} must lie inside (0, {})",
                self.stage_boundary, self.total_iterations
            )));
        }
        if !(self.t_lo > 0.0) {
            return Err(Error::config("bridge times must stay above 0"));
        }
        if !(self.t_prime_lo > 0.0 && self.t_prime_early_hi < 1.0 && self.t_prime_late_hi < 1.0) {
            return Err(Error::config("denoising times must lie inside (0, 1)"));
        }
        if self.batch_views == 0 || self.eval_views == 0 || self.reference_samples == 0 {
            return Err(Error::config("view and sample counts must be positive"));
        }
        if self.metric_every == 0 {
            return Err(Error::config("metric_every must be positive"));
        }
        self.view_ranges.validate()?;
        // building the samplers checks the windows
        if self.total_iterations > 0 {
            self.t_sampler()?;
            self.t_prime_sampler()?;
        }
        Ok(())
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn t_sampler(&self) -> Result<TimeSampler> {
        let mode = if self.anneal_t {
            SamplerMode::Annealed {
                floor_width: ANNEAL_FLOOR_WIDTH,
            }
        } else {
            SamplerMode::Uniform
        };
        TimeSampler::build(mode, self.t_lo, self.t_hi, self.total_iterations, self.seed, stream::T)
    }

    pub fn t_prime_sampler(&self) -> Result<TimeSampler> {
        TimeSampler::build(
            SamplerMode::TwoStage {
                stage_boundary: self.stage_boundary,
                late_hi: self.t_prime_late_hi,
            },
            self.t_prime_lo,
            self.t_prime_early_hi,
            self.total_iterations,
            self.seed,
            stream::T_PRIME,
        )
    }
}

/// Audit record of a one-step denoise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTarget {
    pub x0_pred: Vec<f64>,
    pub t_prime: f64,
    pub eps_pretrain: Vec<f64>,
}

fn check_denoise_time(t_prime: f64) -> Result<()> {
    if !(t_prime > 0.0 && t_prime < 1.0) {
        return Err(Error::domain(format!("denoising time {t_prime} must lie in (0, 1)")));
    }
    Ok(())
}

/// `x0 = (x_rndr - √(1-ᾱ) ε(x_rndr, t′, y)) / √ᾱ`, with the clean rendering
/// fed to the predictor.
pub fn predict_x0<M: ScoreModel + ?Sized>(
    x_rndr: &[f64],
    t_prime: f64,
    y: Condition,
    view: &ViewTransform,
    pretrained: &M,
    sched: &NoiseSchedule,
) -> Result<PredictedTarget> {
    check_denoise_time(t_prime)?;
    let ab = sched.alpha_bar(t_prime)?;
    let eps = pretrained.epsilon(x_rndr, t_prime, y, view)?;
    check_dim("pretrained output", x_rndr.len(), eps.len())?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0_pred = x_rndr.iter().zip(&eps).map(|(x, e)| (x - sn * e) / sa).collect();
    Ok(PredictedTarget {
        x0_pred,
        t_prime,
        eps_pretrain: eps,
    })
}

/// Ablation: denoise `√ᾱ x_rndr + √(1-ᾱ) noise` instead of the clean
/// rendering.
pub fn predict_x0_renoised<M: ScoreModel + ?Sized>(
    x_rndr: &[f64],
    t_prime: f64,
    y: Condition,
    view: &ViewTransform,
    pretrained: &M,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<PredictedTarget> {
    check_denoise_time(t_prime)?;
    check_dim("renoising draw", x_rndr.len(), noise.len())?;
    let ab = sched.alpha_bar(t_prime)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_noisy: Vec<f64> = x_rndr.iter().zip(noise).map(|(x, n)| sa * x + sn * n).collect();
    predict_x0(&x_noisy, t_prime, y, view, pretrained, sched)
}

/// Canvas-space SDS residual `w(t)(ε_pred(x_t) - ε)` with
/// `x_t = √ᾱ x_rndr + √(1-ᾱ) ε`.
pub fn sds_canvas_gradient<M: ScoreModel + ?Sized>(
    x_rndr: &[f64],
    t: f64,
    eps: &[f64],
    y: Condition,
    view: &ViewTransform,
    pretrained: &M,
    sched: &NoiseSchedule,
    weight: WeightFn,
) -> Result<Vec<f64>> {
    check_dim("sds noise", x_rndr.len(), eps.len())?;
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t: Vec<f64> = x_rndr.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect();
    let pred = pretrained.epsilon(&x_t, t, y, view)?;
    check_dim("pretrained output", x_rndr.len(), pred.len())?;
    let w = weight.eval(sched, t)?;
    Ok(pred.iter().zip(eps).map(|(p, e)| w * (p - e)).collect())
}

/// Canvas-space bridge residual `w(t)(ε_φ(x_t) - (x_t - x_rndr)/σ_t)`, with
/// `σ_t` from the bridge schedule.
pub fn trace_canvas_gradient<M: ScoreModel + ?Sized>(
    x_rndr: &[f64],
    sample: &BridgeSample,
    t: f64,
    y: Condition,
    view: &ViewTransform,
    adapted: &M,
    weight: f64,
) -> Result<Vec<f64>> {
    check_dim("bridge state", x_rndr.len(), sample.x_t.len())?;
    let sigma = sample.params.sigma_t;
    if !(sigma > 0.0) {
        return Err(Error::domain("bridge gradient needs t > 0"));
    }
    let pred = adapted.epsilon(&sample.x_t, t, y, view)?;
    check_dim("adapter output", x_rndr.len(), pred.len())?;
    Ok(pred
        .iter()
        .zip(&sample.x_t)
        .zip(x_rndr)
        .map(|((p, xt), xr)| weight * (p - (xt - xr) / sigma))
        .collect())
}

fn as_canvas(gen: &Generator, v: Vec<f64>) -> Result<Canvas> {
    let (h, w, c) = gen.canvas_shape();
    Canvas::from_vec(h, w, c, v)
}

/// One SDS evaluation for explicit `(t, ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsStep {
    pub grad: Vec<f64>,
    pub canvas_grad: Vec<f64>,
    pub t: f64,
}

pub fn sds_grad_with<M: ScoreModel + ?Sized>(
    gen: &Generator,
    theta: &[f64],
    view: &ViewTransform,
    y: Condition,
    pretrained: &M,
    sched: &NoiseSchedule,
    weight: WeightFn,
    t: f64,
    eps: &[f64],
) -> Result<SdsStep> {
    let x_rndr = gen.render(theta, view)?.into_vec();
    let canvas_grad = sds_canvas_gradient(&x_rndr, t, eps, y, view, pretrained, sched, weight)?;
    let grad = gen.render_vjp(theta, view, &as_canvas(gen, canvas_grad.clone())?)?;
    Ok(SdsStep {
        grad,
        canvas_grad,
        t,
    })
}

/// SDS gradient with `t` from the bridge-time sampler and `ε` from the noise
/// stream at `(iter, lane)`.
pub fn sds_grad<M: ScoreModel + ?Sized>(
    gen: &Generator,
    theta: &[f64],
    view: &ViewTransform,
    pretrained: &M,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    iter: usize,
    lane: u64,
) -> Result<SdsStep> {
    let t = cfg.t_sampler()?.sample_indexed(iter, lane);
    let mut rng = rng_for(cfg.seed, &[stream::NOISE, iter as u64, lane]);
    let eps = standard_normal_vec(&mut rng, gen.canvas_len());
    sds_grad_with(gen, theta, view, cfg.condition(), pretrained, sched, cfg.weight_fn, t, &eps)
}

/// One bridge-gradient evaluation and the tuple it hands to the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub grad: Vec<f64>,
    pub canvas_grad: Vec<f64>,
    pub target: PredictedTarget,
    pub tuple: BridgeTuple,
}

/// Bridge gradient for explicit `t`, target and bridge noise `z`.
pub fn trace_grad_with<M: ScoreModel + ?Sized>(
    gen: &Generator,
    theta: &[f64],
    view: &ViewTransform,
    y: Condition,
    adapted: &M,
    bridge_sched: &NoiseSchedule,
    pretrain_sched: &NoiseSchedule,
    weight: WeightFn,
    target: PredictedTarget,
    t: f64,
    z: Vec<f64>,
) -> Result<TraceStep> {
    let x_rndr = gen.render(theta, view)?.into_vec();
    trace_grad_from_target(gen, theta, view, y, adapted, bridge_sched, pretrain_sched, weight, x_rndr, target, t, z)
}

#[allow(clippy::too_many_arguments)]
fn trace_grad_from_target<M: ScoreModel + ?Sized>(
    gen: &Generator,
    theta: &[f64],
    view: &ViewTransform,
    y: Condition,
    adapted: &M,
    bridge_sched: &NoiseSchedule,
    pretrain_sched: &NoiseSchedule,
    weight: WeightFn,
    x_rndr: Vec<f64>,
    target: PredictedTarget,
    t: f64,
    z: Vec<f64>,
) -> Result<TraceStep> {
    let endpoints = BridgeEndpoints::new(target.x0_pred.clone(), x_rndr.clone())?;
    let params = crate::bridge::posterior_params(&endpoints, bridge_sched, t)?;
    let sample = crate::bridge::posterior_sample_with(params, z)?;
    let w = weight.eval(pretrain_sched, t)?;
    let canvas_grad = trace_canvas_gradient(&x_rndr, &sample, t, y, view, adapted, w)?;
    let grad = gen.render_vjp(theta, view, &as_canvas(gen, canvas_grad.clone())?)?;
    let tuple = BridgeTuple {
        x0_pred: target.x0_pred.clone(),
        x_rndr,
        y,
        view: *view,
        t,
        x_t: sample.x_t,
        z: sample.z,
    };
    Ok(TraceStep {
        grad,
        canvas_grad,
        target,
        tuple,
    })
}

/// Bridge gradient with `t′`, `t` and `z` drawn from their own streams at
/// `(iter, lane)`.
#[allow(clippy::too_many_arguments)]
pub fn trace_grad<P: ScoreModel + ?Sized, A: ScoreModel + ?Sized>(
    gen: &Generator,
    theta: &[f64],
    view: &ViewTransform,
    pretrained: &P,
    adapted: &A,
    bridge_sched: &NoiseSchedule,
    pretrain_sched: &NoiseSchedule,
    cfg: &DistillConfig,
    iter: usize,
    lane: u64,
) -> Result<TraceStep> {
    let y = cfg.condition();
    let x_rndr = gen.render(theta, view)?.into_vec();
    let t_prime = cfg.t_prime_sampler()?.sample_indexed(iter, lane);
    let target = if cfg.renoise_target {
        let mut rng = rng_for(cfg.seed, &[stream::NOISE, iter as u64, lane, 1]);
        let noise = standard_normal_vec(&mut rng, x_rndr.len());
        predict_x0_renoised(&x_rndr, t_prime, y, view, pretrained, pretrain_sched, &noise)?
    } else {
        predict_x0(&x_rndr, t_prime, y, view, pretrained, pretrain_sched)?
    };
    let t = cfg.t_sampler()?.sample_indexed(iter, lane);
    let mut rng = rng_for(cfg.seed, &[stream::BRIDGE, iter as u64, lane]);
    let endpoints = BridgeEndpoints::new(target.x0_pred.clone(), x_rndr.clone())?;
    let s = posterior_sample(&endpoints, bridge_sched, t, &mut rng)?;
    trace_grad_from_target(gen, theta, view, y, adapted, bridge_sched, pretrain_sched, cfg.weight_fn, x_rndr, target, t, s.z)
}

/// Central-difference Jacobian `∂x0_pred/∂x_rndr` (row `i` is output `i`).
///
/// This is the factor the bridge gradient leaves out; it is only used for
/// spot checks.
pub fn x0_jacobian_fd<M: ScoreModel + ?Sized>(
    x_rndr: &[f64],
    t_prime: f64,
    y: Condition,
    pretrained: &M,
    sched: &NoiseSchedule,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = x_rndr.len();
    let view = ViewTransform::identity();
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut xp = x_rndr.to_vec();
        xp[j] += h;
        let mut xm = x_rndr.to_vec();
        xm[j] -= h;
        let fp = predict_x0(&xp, t_prime, y, &view, pretrained, sched)?.x0_pred;
        let fm = predict_x0(&xm, t_prime, y, &view, pretrained, sched)?.x0_pred;
        for i in 0..n {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{GmmDistribution, GmmFamily};
    use crate::score::{AnalyticScore, FnScoreModel};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn predict_x0_inverts_constructed_noise() {
        let s = sched();
        let x_star = vec![0.3, -1.2, 2.5];
        let x_rndr = vec![1.0, 0.5, -0.25];
        for &tp in &[0.02, 0.3, 0.7] {
            let ab = s.alpha_bar(tp).unwrap();
            let xs = x_star.clone();
            let m = FnScoreModel::new(3, move |x: &[f64], _, _, _| {
                Ok(x.iter().zip(&xs).map(|(a, b)| (a - ab.sqrt() * b) / (1.0 - ab).sqrt()).collect())
            });
            let p = predict_x0(&x_rndr, tp, Condition::Unconditional, &ViewTransform::identity(), &m, &s).unwrap();
            for (a, b) in p.x0_pred.iter().zip(&x_star) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn predict_x0_with_zero_noise_rescales() {
        let s = sched();
        let m = FnScoreModel::new(2, |x: &[f64], _, _, _| Ok(vec![0.0; x.len()]));
        let p = predict_x0(&[1.0, -2.0], 0.3, Condition::Unconditional, &ViewTransform::identity(), &m, &s).unwrap();
        let sa = s.alpha_bar(0.3).unwrap().sqrt();
        assert_eq!(p.x0_pred, vec![1.0 / sa, -2.0 / sa]);
        assert!(predict_x0(&[1.0], 0.0, Condition::Unconditional, &ViewTransform::identity(), &m, &s).is_err());
    }

    #[test]
    fn predict_x0_matches_gaussian_posterior_mean() {
        // prior N(mu, s2): E[x0 | x_t = x] = mu + √ᾱ s2 (x - √ᾱ mu) / (ᾱ s2 + 1 - ᾱ)
        let s = sched();
        let (mu, s2) = (1.3, 0.4);
        let fam = GmmFamily::new(vec![GmmDistribution::isotropic(vec![mu], s2).unwrap()]).unwrap();
        let prior = AnalyticScore::new(fam, s);
        let mut x = mu;
        for &tp in &[0.05, 0.2, 0.5] {
            let ab = s.alpha_bar(tp).unwrap();
            let p = predict_x0(&[x], tp, Condition::Class(0), &ViewTransform::identity(), &prior, &s).unwrap();
            let want = mu + ab.sqrt() * s2 * (x - ab.sqrt() * mu) / (ab * s2 + 1.0 - ab);
            assert!((p.x0_pred[0] - want).abs() < 1e-10, "{} vs {want}", p.x0_pred[0]);
            x = p.x0_pred[0];
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("sds".parse::<Method>().unwrap(), Method::Sds);
        assert_eq!("trace".parse::<Method>().unwrap(), Method::Trace);
        assert!("vsd".parse::<Method>().is_err());
    }

    #[test]
    fn default_config_is_valid() {
        let c = DistillConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_iterations, 1700);
        assert_eq!(c.stage_boundary, 700);
        assert_eq!(c.eta_theta, 1e-3);
        assert_eq!(c.cfg_weight, 20.0);
    }

    #[test]
    fn sigma_scaled_weight() {
        let s = sched();
        assert_eq!(WeightFn::Constant.eval(&s, 0.4).unwrap(), 1.0);
        let w = WeightFn::SigmaScaled.eval(&s, 0.4).unwrap();
        assert!((w - (1.0 - s.alpha_bar(0.4).unwrap()).sqrt()).abs() < 1e-15);
    }
}
