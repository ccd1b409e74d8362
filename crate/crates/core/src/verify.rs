//! The self-check suite behind `tracelab verify`.
//!
//! Each check reduces to one measured number compared against a tolerance
//! (`measured <= tolerance` passes). Exact checks count mismatching entries
//! and use tolerance 0. The report is a pure function of [`VerifyOptions`],
//! so reruns serialize byte-identically.

use serde::{Deserialize, Serialize};

use crate::bridge::{
    degenerate_factors, posterior_params, posterior_sample, posterior_sample_with, simulate_bridge_sde,
    BridgeEndpoints, BridgePosteriorParams, BridgeSimulation,
};
use crate::distill::{predict_x0, sds_grad_with, trace_grad_with, PredictedTarget, WeightFn};
use crate::gmm::{gmm_noisy_score, Condition, GmmDistribution, GmmFamily};
use crate::metrics::sliced_w1;
use crate::nn::{mlp_forward, mlp_grad, Activation, AdapterParams, InputLayout, Mlp, Trainable, TrainingExample};
use crate::quad::adaptive_simpson;
use crate::render::{Canvas, Generator, ViewTransform};
use crate::rng::{rng_for, standard_normal, standard_normal_vec, stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::score::{cfg_combine, FnScoreModel};
use crate::sde::{reverse_drift, simulate_reverse, SdeSpec};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Added to every bridge `γ_t` before the bridge-moment checks use it.
    /// Nonzero only for fault-injection tests.
    pub gamma_offset: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gamma_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            // NaN never passes
            passed: measured <= tolerance,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn failing(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::Serde(e.to_string()))
    }
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let sched = NoiseSchedule::default();
    let checks = vec![
        schedule_identity(&sched)?,
        schedule_boundaries(&sched)?,
        accumulated_variance_quadrature(&sched)?,
        bridge_endpoint_pinning(&sched, opts.seed)?,
        bridge_moments_ode(&sched, opts.gamma_offset)?,
        bridge_sde_mean(&sched, opts)?,
        bridge_sde_variance(&sched, opts)?,
        duality_residual(&sched)?,
        collapse_drift(&sched)?,
        reverse_sde_recovery(&sched, opts.seed)?,
        splat_vjp_fd(opts.seed, 4, 2)?,
        direct_field_vjp_fd(opts.seed)?,
        mlp_backprop_fd(opts.seed, 3, Trainable::Base)?,
        mlp_backprop_fd(opts.seed, 3, Trainable::Adapter)?,
        predict_x0_inversion(&sched, opts.seed)?,
        cfg_combine_example()?,
        sds_zero_residual(&sched, opts.seed)?,
        trace_zero_residual(&sched, opts.seed)?,
        aligned_endpoint_mean(&sched, opts.seed, 10_000)?,
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        options: *opts,
        checks,
        all_passed,
    })
}

fn grid(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| i as f64 / (n - 1) as f64)
}

fn schedule_identity(s: &NoiseSchedule) -> Result<Check> {
    let total = s.total_variance()?;
    let mut err: f64 = 0.0;
    for t in grid(101) {
        let (a, b) = s.accumulated_variances(t)?;
        err = err.max((a + b - total).abs());
    }
    Ok(Check::new("schedule_variance_split", err, 1e-10, "max |σ²+σ̄²−σ²(1)| on 101 points"))
}

fn schedule_boundaries(s: &NoiseSchedule) -> Result<Check> {
    let (g0, s0) = s.bridge_coefficients(0.0)?;
    let (g1, s1) = s.bridge_coefficients(1.0)?;
    let err = [(g0 - 1.0).abs(), g1.abs(), s0.abs(), s1.abs()]
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Check::new("schedule_boundaries", err, 1e-10, "γ(0)=1, γ(1)=0, Σ(0)=Σ(1)=0"))
}

fn accumulated_variance_quadrature(s: &NoiseSchedule) -> Result<Check> {
    let mut err: f64 = 0.0;
    for t in [0.1, 0.25, 0.5, 0.75, 1.0] {
        let q = adaptive_simpson(|u| s.beta(u).unwrap_or(f64::NAN), 0.0, t, 1e-12)?;
        err = err.max((q - s.accumulated_variances(t)?.0).abs());
    }
    Ok(Check::new("accumulated_variance_quadrature", err, 1e-9, "closed form vs adaptive Simpson"))
}

fn bridge_endpoint_pinning(s: &NoiseSchedule, seed: u64) -> Result<Check> {
    let e = BridgeEndpoints::new(vec![0.1, -3.7, 2.2], vec![1.0 / 3.0, 5.5, -0.9])?;
    let mut rng = rng_for(seed, &[stream::BRIDGE, u64::MAX]);
    let mut mismatches = 0;
    for _ in 0..100 {
        mismatches += usize::from(posterior_sample(&e, s, 0.0, &mut rng)?.x_t != e.x_target);
        mismatches += usize::from(posterior_sample(&e, s, 1.0, &mut rng)?.x_t != e.x_source);
    }
    Ok(Check::new("bridge_endpoint_pinning", mismatches as f64, 0.0, "non-bitwise endpoint draws of 200"))
}

fn perturbed(e: &BridgeEndpoints, s: &NoiseSchedule, t: f64, gamma_offset: f64) -> Result<BridgePosteriorParams> {
    let p = posterior_params(e, s, t)?;
    Ok(BridgePosteriorParams::from_coefficients(
        e,
        p.gamma + gamma_offset,
        p.big_sigma,
        p.sigma_t,
    ))
}

const CHECKPOINTS: [f64; 3] = [0.25, 0.5, 0.75];

fn moment_endpoints() -> Result<BridgeEndpoints> {
    BridgeEndpoints::new(vec![0.0], vec![4.0])
}

/// RK4 on the moment equations of the pinned diffusion,
/// `m' = g (s − m)` and `v' = −2 g v + β` with `g = β / σ̄²`.
fn bridge_moments_ode(s: &NoiseSchedule, gamma_offset: f64) -> Result<Check> {
    let e = moment_endpoints()?;
    let src = e.x_source[0];
    let rhs = |t: f64, m: f64, v: f64| -> Result<(f64, f64)> {
        let b = s.beta(t)?;
        let g = b / s.accumulated_variances(t)?.1;
        Ok((g * (src - m), -2.0 * g * v + b))
    };
    // divisible by 3 so the checkpoints fall on the grid
    let n = 21_000;
    let h = CHECKPOINTS[2] / n as f64;
    let (mut m, mut v) = (e.x_target[0], 0.0);
    let mut err: f64 = 0.0;
    for k in 0..n {
        let t = k as f64 * h;
        let (m1, v1) = rhs(t, m, v)?;
        let (m2, v2) = rhs(t + h / 2.0, m + h / 2.0 * m1, v + h / 2.0 * v1)?;
        let (m3, v3) = rhs(t + h / 2.0, m + h / 2.0 * m2, v + h / 2.0 * v2)?;
        let (m4, v4) = rhs(t + h, m + h * m3, v + h * v3)?;
        m += h / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
        v += h / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4);
        if (k + 1) % (n / 3) == 0 {
            let p = perturbed(&e, s, (k + 1) as f64 * h, gamma_offset)?;
            err = err.max((p.mu[0] - m).abs()).max((p.big_sigma - v).abs());
        }
    }
    Ok(Check::new(
        "bridge_moments_ode",
        err,
        1e-8,
        "posterior μ, Σ vs RK4 moment equations at t = 0.25, 0.5, 0.75",
    ))
}

fn bridge_paths(s: &NoiseSchedule, seed: u64) -> Result<Vec<crate::sde::PathEnsemble>> {
    let sim = BridgeSimulation {
        seed,
        ..Default::default()
    };
    Ok(simulate_bridge_sde(&moment_endpoints()?, s, &sim)?.checkpoints)
}

fn bridge_sde_mean(s: &NoiseSchedule, opts: &VerifyOptions) -> Result<Check> {
    let e = moment_endpoints()?;
    let mut worst: f64 = 0.0;
    for ens in bridge_paths(s, opts.seed)? {
        let p = perturbed(&e, s, ens.time, opts.gamma_offset)?;
        let se = (p.big_sigma / ens.samples.len() as f64).sqrt();
        worst = worst.max((ens.mean()[0] - p.mu[0]).abs() / se);
    }
    Ok(Check::new("bridge_sde_mean", worst, 4.0, "20k pinned paths; |mean − μ_t| in standard errors"))
}

fn bridge_sde_variance(s: &NoiseSchedule, opts: &VerifyOptions) -> Result<Check> {
    let e = moment_endpoints()?;
    let mut worst: f64 = 0.0;
    for ens in bridge_paths(s, opts.seed)? {
        let p = perturbed(&e, s, ens.time, opts.gamma_offset)?;
        worst = worst.max((ens.variance()[0] / p.big_sigma - 1.0).abs());
    }
    Ok(Check::new("bridge_sde_variance", worst, 0.05, "20k pinned paths; relative error vs Σ_t"))
}

fn bimodal() -> GmmDistribution {
    GmmFamily::default_2d().members()[1].clone()
}

fn duality_residual(s: &NoiseSchedule) -> Result<Check> {
    let f = degenerate_factors(&bimodal(), s)?;
    let mut err: f64 = 0.0;
    for ti in 0..9 {
        let t = 0.05 + 0.9 * ti as f64 / 8.0;
        for i in 0..50 {
            for j in 0..50 {
                let x = [-4.0 + 8.0 * i as f64 / 49.0, -4.0 + 8.0 * j as f64 / 49.0];
                let r = f.psi(&x, t)? * f.psi_hat(&x, t)? - f.marginal(&x, t)?;
                err = err.max(r.abs());
            }
        }
    }
    Ok(Check::new("duality_residual", err, 1e-12, "max |ΨΨ̂ − q| on 50×50×9"))
}

fn collapse_drift(s: &NoiseSchedule) -> Result<Check> {
    let p = bimodal();
    let f = degenerate_factors(&p, s)?;
    let mut err: f64 = 0.0;
    for ti in 0..9 {
        let t = 0.05 + 0.9 * ti as f64 / 8.0;
        for i in 0..20 {
            for j in 0..20 {
                let x = [-4.0 + 8.0 * i as f64 / 19.0, -4.0 + 8.0 * j as f64 / 19.0];
                let sb = f.backward_drift(&x, t)?;
                let sgm = reverse_drift(s, &x, &gmm_noisy_score(&p, s, &x, t)?, t)?;
                for (a, b) in sb.iter().zip(&sgm) {
                    err = err.max((a - b).abs());
                }
            }
        }
    }
    Ok(Check::new("collapse_drift", err, 1e-12, "bridge backward drift vs reverse-SDE drift"))
}

fn reverse_sde_recovery(s: &NoiseSchedule, seed: u64) -> Result<Check> {
    let n = 10_000;
    let p = bimodal();
    let score = crate::score::AnalyticScore::new(GmmFamily::new(vec![p.clone()])?, *s);
    let mut rng = rng_for(seed, &[stream::PATH, 0]);
    let x1: Vec<Vec<f64>> = (0..n).map(|_| standard_normal_vec(&mut rng, 2)).collect();
    let out = simulate_reverse(&SdeSpec::new(*s, 500, seed)?, &x1, &score, Condition::Class(0))?;
    let reference = p.sample_n(&mut rng_for(seed, &[stream::REFERENCE]), n);
    let d = sliced_w1(&out.samples, &reference, 64, seed)?;
    Ok(Check::new("reverse_sde_recovery", d, 0.05, "sliced W1, 10k samples, 500 steps"))
}

/// Per-component relative error, with the denominator floored at `1e-3` of
/// the largest analytic entry so that near-zero entries are compared on
/// the scale of the whole gradient.
pub fn gradient_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_canvas(gen: &Generator, rng: &mut Rng) -> Result<Canvas> {
    let (h, w, c) = gen.canvas_shape();
    Canvas::from_vec(h, w, c, standard_normal_vec(rng, h * w * c))
}

pub fn random_view(rng: &mut Rng) -> ViewTransform {
    let u = |rng: &mut Rng, lo: f64, hi: f64| lo + (hi - lo) * rand::Rng::random::<f64>(rng);
    ViewTransform::similarity(
        u(rng, 0.6, 1.4),
        u(rng, -1.0, 1.0),
        [u(rng, -1.0, 1.0), u(rng, -1.0, 1.0)],
    )
}

/// Worst relative error between the render VJP and central differences of
/// `⟨g, render(θ)⟩` for one scene and view.
pub fn vjp_rel_err(gen: &Generator, theta: &[f64], view: &ViewTransform, g: &Canvas, h: f64) -> Result<f64> {
    let analytic = gen.render_vjp(theta, view, g)?;
    let pair = |th: &[f64]| -> Result<f64> {
        let r = gen.render(th, view)?;
        Ok(r.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum())
    };
    let mut numeric = Vec::with_capacity(theta.len());
    let mut th = theta.to_vec();
    for i in 0..theta.len() {
        th[i] = theta[i] + h;
        let up = pair(&th)?;
        th[i] = theta[i] - h;
        let down = pair(&th)?;
        th[i] = theta[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(gradient_rel_err(&analytic, &numeric))
}

/// Splat-renderer VJP check over `scenes × views` random instances.
pub fn splat_vjp_fd(seed: u64, scenes: usize, views: usize) -> Result<Check> {
    let gen = Generator::splats(8, 8, 2, 3);
    let Generator::Splat2d(r) = gen else { unreachable!() };
    let mut worst: f64 = 0.0;
    for k in 0..scenes {
        let mut rng = rng_for(seed, &[stream::PROJECTION, 1, k as u64]);
        let theta = r.random_params(&mut rng);
        for _ in 0..views {
            let view = random_view(&mut rng);
            let g = random_canvas(&gen, &mut rng)?;
            worst = worst.max(vjp_rel_err(&gen, &theta, &view, &g, 1e-6)?);
        }
    }
    Ok(Check::new(
        "splat_vjp_fd",
        worst,
        1e-4,
        format!("{} instances, central differences h=1e-6", scenes * views),
    ))
}

fn direct_field_vjp_fd(seed: u64) -> Result<Check> {
    let gen = Generator::direct_field(6, 5, 2);
    let mut worst: f64 = 0.0;
    for k in 0..4u64 {
        let mut rng = rng_for(seed, &[stream::PROJECTION, 2, k]);
        let theta = standard_normal_vec(&mut rng, gen.param_len());
        let view = if k == 0 { ViewTransform::identity() } else { random_view(&mut rng) };
        let g = random_canvas(&gen, &mut rng)?;
        worst = worst.max(vjp_rel_err(&gen, &theta, &view, &g, 1e-6)?);
    }
    Ok(Check::new("direct_field_vjp_fd", worst, 1e-4, "4 instances"))
}

fn small_network(seed: u64, instance: u64) -> Result<(Mlp, AdapterParams, Vec<TrainingExample>)> {
    let mut rng = rng_for(seed, &[stream::INIT, 100, instance]);
    let act = if instance % 2 == 0 { Activation::Silu } else { Activation::Tanh };
    let layout = InputLayout {
        data_dim: 2,
        n_conditions: 2,
    };
    let mut model = Mlp::random(layout, &[8, 8], act, &mut rng)?;
    // nonzero biases so every term of the backward pass is exercised
    for l in &mut model.layers {
        for b in &mut l.b {
            *b = 0.1 * standard_normal(&mut rng);
        }
    }
    let mut ad = AdapterParams::new(&model, 2, 0.7, &mut rng)?;
    let flat: Vec<f64> = ad.flat_params().iter().map(|_| 0.3 * standard_normal(&mut rng)).collect();
    ad.set_flat_params(&flat)?;
    let batch = (0..3)
        .map(|i| TrainingExample {
            x: standard_normal_vec(&mut rng, 2),
            t: 0.1 + 0.3 * i as f64,
            y: match i {
                0 => Condition::Unconditional,
                _ => Condition::Class(i % 2),
            },
            view: random_view(&mut rng),
            target: standard_normal_vec(&mut rng, 2),
        })
        .collect();
    Ok((model, ad, batch))
}

fn batch_loss(model: &Mlp, ad: &AdapterParams, batch: &[TrainingExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let o = mlp_forward(model, Some(ad), &ex.x, ex.t, ex.y, &ex.view)?;
        total += o.iter().zip(&ex.target).map(|(a, y)| (a - y).powi(2)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Worst relative error of one network instance's backprop against central
/// differences of the batch loss.
pub fn mlp_instance_rel_err(seed: u64, instance: u64, which: Trainable) -> Result<f64> {
    let (model, ad, batch) = small_network(seed, instance)?;
    let g = mlp_grad(&model, Some(&ad), &batch, which)?;
    let h = 1e-5;
    let (analytic, flat) = match which {
        Trainable::Base => (g.base.unwrap_or_default(), model.flat_params()),
        Trainable::Adapter => (g.adapter.unwrap_or_default(), ad.flat_params()),
    };
    let loss_at = |p: &[f64]| -> Result<f64> {
        match which {
            Trainable::Base => {
                let mut m = model.clone();
                m.set_flat_params(p)?;
                batch_loss(&m, &ad, &batch)
            }
            Trainable::Adapter => {
                let mut a = ad.clone();
                a.set_flat_params(p)?;
                batch_loss(&model, &a, &batch)
            }
        }
    };
    let mut numeric = Vec::with_capacity(flat.len());
    let mut p = flat.clone();
    for i in 0..flat.len() {
        p[i] = flat[i] + h;
        let up = loss_at(&p)?;
        p[i] = flat[i] - h;
        let down = loss_at(&p)?;
        p[i] = flat[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(gradient_rel_err(&analytic, &numeric))
}

pub fn mlp_backprop_fd(seed: u64, instances: u64, which: Trainable) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        worst = worst.max(mlp_instance_rel_err(seed, k, which)?);
    }
    let name = match which {
        Trainable::Base => "mlp_backprop_fd",
        Trainable::Adapter => "adapter_backprop_fd",
    };
    Ok(Check::new(name, worst, 1e-5, format!("{instances} instances, h=1e-5")))
}

fn predict_x0_inversion(s: &NoiseSchedule, seed: u64) -> Result<Check> {
    let mut rng = rng_for(seed, &[stream::NOISE, u64::MAX]);
    let mut err: f64 = 0.0;
    for tp in [0.02, 0.1, 0.3, 0.5, 0.7] {
        let x_star = standard_normal_vec(&mut rng, 4);
        let e = standard_normal_vec(&mut rng, 4);
        let ab = s.alpha_bar(tp)?;
        let x: Vec<f64> = x_star.iter().zip(&e).map(|(a, b)| ab.sqrt() * a + (1.0 - ab).sqrt() * b).collect();
        let e2 = e.clone();
        let stub = FnScoreModel::new(4, move |_: &[f64], _, _, _: &ViewTransform| Ok(e2.clone()));
        let out = predict_x0(&x, tp, Condition::Unconditional, &ViewTransform::identity(), &stub, s)?;
        for (a, b) in out.x0_pred.iter().zip(&x_star) {
            err = err.max((a - b).abs());
        }
    }
    Ok(Check::new("predict_x0_inversion", err, 1e-12, "planted x* recovered from constructed noise"))
}

fn cfg_combine_example() -> Result<Check> {
    let out = cfg_combine(&[1.0, 0.0], &[0.0, 0.0], 20.0)?;
    let err = (out[0] - 20.0).abs() + out[1].abs();
    Ok(Check::new("cfg_combine", err, 0.0, "ε_c=(1,0), ε_u=0, w=20 gives (20,0)"))
}

fn stub_scene(seed: u64) -> (Generator, Vec<f64>, ViewTransform) {
    let gen = Generator::splats(6, 6, 1, 2);
    let Generator::Splat2d(r) = gen else { unreachable!() };
    let mut rng = rng_for(seed, &[stream::INIT, 200]);
    let theta = r.random_params(&mut rng);
    (gen, theta, random_view(&mut rng))
}

fn sds_zero_residual(s: &NoiseSchedule, seed: u64) -> Result<Check> {
    let (gen, theta, view) = stub_scene(seed);
    let eps = standard_normal_vec(&mut rng_for(seed, &[stream::NOISE, 7]), gen.canvas_len());
    let e2 = eps.clone();
    let stub = FnScoreModel::new(gen.canvas_len(), move |_: &[f64], _, _, _: &ViewTransform| Ok(e2.clone()));
    let step = sds_grad_with(&gen, &theta, &view, Condition::Unconditional, &stub, s, WeightFn::Constant, 0.3, &eps)?;
    let nonzero = step.grad.iter().filter(|g| g.to_bits() != 0).count();
    Ok(Check::new("sds_zero_residual", nonzero as f64, 0.0, "non-(+0.0) gradient entries"))
}

fn trace_zero_residual(s: &NoiseSchedule, seed: u64) -> Result<Check> {
    let (gen, theta, view) = stub_scene(seed);
    let x_rndr = gen.render(&theta, &view)?.into_vec();
    let x0_pred: Vec<f64> = x_rndr.iter().map(|v| v + 0.5).collect();
    let t = 0.3;
    let sigma = s.accumulated_variances(t)?.0.sqrt();
    let xr = x_rndr.clone();
    // the residual target, computed with the same operations as the gradient
    let stub = FnScoreModel::new(gen.canvas_len(), move |x: &[f64], _, _, _: &ViewTransform| {
        Ok(x.iter().zip(&xr).map(|(a, b)| (a - b) / sigma).collect())
    });
    let target = PredictedTarget {
        x0_pred,
        t_prime: 0.3,
        eps_pretrain: vec![0.0; gen.canvas_len()],
    };
    let z = standard_normal_vec(&mut rng_for(seed, &[stream::BRIDGE, 7]), gen.canvas_len());
    let step = trace_grad_with(&gen, &theta, &view, Condition::Unconditional, &stub, s, s, WeightFn::Constant, target, t, z)?;
    let nonzero = step.grad.iter().filter(|g| g.to_bits() != 0).count();
    Ok(Check::new("trace_zero_residual", nonzero as f64, 0.0, "non-(+0.0) gradient entries"))
}

/// Worst `|mean| / SE` over coordinates of the bridge canvas gradient when
/// `x0_pred = x_rndr` and the adapted predictor outputs zero.
pub fn aligned_endpoint_z(s: &NoiseSchedule, seed: u64, draws: usize) -> Result<f64> {
    let x = vec![0.3, -1.2, 0.8];
    let e = BridgeEndpoints::new(x.clone(), x.clone())?;
    let mut rng = rng_for(seed, &[stream::BRIDGE, 8]);
    let (mut sum, mut sq) = (vec![0.0; 3], vec![0.0; 3]);
    for k in 0..draws {
        let t = 0.02 + 0.48 * (k as f64 + 0.5) / draws as f64;
        let p = posterior_params(&e, s, t)?;
        let sample = posterior_sample_with(p, standard_normal_vec(&mut rng, 3))?;
        let sigma = sample.params.sigma_t;
        for i in 0..3 {
            let g = -(sample.x_t[i] - x[i]) / sigma;
            sum[i] += g;
            sq[i] += g * g;
        }
    }
    let n = draws as f64;
    Ok((0..3)
        .map(|i| {
            let m = sum[i] / n;
            let var = (sq[i] / n - m * m) * n / (n - 1.0);
            m.abs() / (var / n).sqrt()
        })
        .fold(0.0, f64::max))
}

fn aligned_endpoint_mean(s: &NoiseSchedule, seed: u64, draws: usize) -> Result<Check> {
    Ok(Check::new(
        "aligned_endpoint_mean",
        aligned_endpoint_z(s, seed, draws)?,
        3.0,
        format!("{draws} draws; |mean| in standard errors"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_byte_identical() {
        let opts = VerifyOptions::default();
        let a = run_verify(&opts).unwrap();
        let failing: Vec<_> = a.failing().map(|c| (&c.name, c.measured)).collect();
        assert!(a.all_passed, "{failing:?}");
        assert!(a.checks.len() >= 12);
        assert_eq!(a.to_json().unwrap(), run_verify(&opts).unwrap().to_json().unwrap());
    }

    #[test]
    fn gamma_fault_trips_the_moment_checks() {
        let opts = VerifyOptions {
            seed: 0,
            gamma_offset: 1e-3,
        };
        let r = run_verify(&opts).unwrap();
        let failing: Vec<&str> = r.failing().map(|c| c.name.as_str()).collect();
        assert!(failing.contains(&"bridge_moments_ode"), "{failing:?}");
        assert!(!r.all_passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(gradient_rel_err(&[1.0, 0.0], &[1.0, 1e-9]), 1e-9 / 1e-3);
        assert_eq!(gradient_rel_err(&[2.0], &[2.0]), 0.0);
    }
}
