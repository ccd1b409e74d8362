use serde::{Deserialize, Serialize};

use super::{sds_grad, trace_grad, DistillConfig, Method};
use crate::error::check_dim;
use crate::gmm::Condition;
use crate::metrics::{eval_metrics, SampleDistances};
use crate::nn::{fingerprint, mlp_forward, AdapterParams, BridgeTrainer, Mlp};
use crate::render::{sample_view, Generator, ViewTransform};
use crate::rng::{rng_for, stream};
use crate::schedule::NoiseSchedule;
use crate::score::{AnalyticScore, Guided, ScoreModel};
use crate::Result;

/// Fixed seed of the evaluation protocol; evaluation views and the
/// reference set do not depend on the run seed so paired runs share them.
pub const EVAL_SEED: u64 = 0;

/// Everything a run consumes besides its configuration.
pub struct DistillInputs<'a> {
    pub generator: &'a Generator,
    /// Initial parameters, one vector per particle.
    pub particles: Vec<Vec<f64>>,
    /// Unguided pretrained noise predictor; guidance is applied by the loop.
    pub pretrained: &'a dyn ScoreModel,
    /// Analytic prior used for the evaluation reference set and the latent
    /// coordinates metrics are computed in.
    pub reference: &'a AnalyticScore,
    pub bridge_schedule: NoiseSchedule,
    pub pretrain_schedule: NoiseSchedule,
    pub base: &'a Mlp,
    pub adapter: AdapterParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub config: serde_json::Value,
}

impl RunHeader {
    pub fn new<C: Serialize>(method: Method, seed: u64, config_hash: &str, config: &C) -> Self {
        Self {
            method,
            seed,
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Means over particles and views of the sampled times.
    pub t_mean: f64,
    pub t_prime_mean: Option<f64>,
    /// Mean squared canvas residual.
    pub residual_sq: f64,
    /// Adapter loss before this iteration's update.
    pub phi_loss: Option<f64>,
    /// Mean parameter-gradient norm over particles.
    pub grad_norm: f64,
    pub sliced_w1: Option<f64>,
    pub mmd_rbf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    Aborted { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub header: RunHeader,
    pub iterations: Vec<IterationRecord>,
    pub status: RunStatus,
    pub final_particles: Vec<Vec<f64>>,
    pub final_metrics: Option<SampleDistances>,
    /// Hex SHA-256 of the final adapter parameters.
    pub adapter_fingerprint: String,
}

impl RunRecord {
    pub fn final_sliced_w1(&self) -> Option<f64> {
        self.final_metrics.map(|m| m.sliced_w1)
    }
}

/// Base network plus a borrowed adapter.
struct Adapted<'a> {
    base: &'a Mlp,
    adapter: &'a AdapterParams,
}

impl ScoreModel for Adapted<'_> {
    fn dim(&self) -> usize {
        self.base.layout.data_dim
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        mlp_forward(self.base, Some(self.adapter), x, t, y, view)
    }
}

/// The fixed evaluation views for `cfg`.
pub fn eval_views(cfg: &DistillConfig) -> Vec<ViewTransform> {
    (0..cfg.eval_views)
        .map(|i| sample_view(&cfg.view_ranges, &mut rng_for(EVAL_SEED, &[stream::EVAL, i as u64])))
        .collect()
}

/// Clean prior draws in latent coordinates.
pub fn reference_samples(reference: &AnalyticScore, y: Condition, n: usize) -> Result<Vec<Vec<f64>>> {
    let p = reference.family().resolve(y)?;
    Ok(p.sample_n(&mut rng_for(EVAL_SEED, &[stream::REFERENCE]), n))
}

fn evaluate(
    gen: &Generator,
    particles: &[Vec<f64>],
    views: &[ViewTransform],
    reference: &AnalyticScore,
    ref_set: &[Vec<f64>],
) -> Result<SampleDistances> {
    let mut set = Vec::with_capacity(particles.len() * views.len());
    for theta in particles {
        for v in views {
            let x = gen.render(theta, v)?.into_vec();
            set.push(reference.projection().project(&x));
        }
    }
    eval_metrics(&set, ref_set)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// State handed to a [`run_distillation_observed`] observer at the start of
/// iteration `iter`; `iter == total_iterations` is the final state.
pub struct IterationState<'a> {
    pub iter: usize,
    pub particles: &'a [Vec<f64>],
    pub adapter: &'a AdapterParams,
}

/// Alternating optimization: per iteration, each particle draws views, takes
/// a plain gradient step `θ ← θ − η₁ ∇θ`, and (bridge method) the adapter
/// takes one step on the tuples emitted this iteration.
///
/// A non-finite parameter stops the run and returns the partial record with
/// an `Aborted` status.
pub fn run_distillation(
    cfg: &DistillConfig,
    inputs: DistillInputs<'_>,
    method: Method,
    header: RunHeader,
) -> Result<RunRecord> {
    run_distillation_observed(cfg, inputs, method, header, |_| Ok(()))
}

/// [`run_distillation`] with a read-only view of the state before every
/// iteration and after the last one. Observer errors stop the run.
pub fn run_distillation_observed<F>(
    cfg: &DistillConfig,
    inputs: DistillInputs<'_>,
    method: Method,
    header: RunHeader,
    mut observe: F,
) -> Result<RunRecord>
where
    F: FnMut(IterationState<'_>) -> Result<()>,
{
    cfg.validate()?;
    let gen = inputs.generator;
    gen.validate()?;
    check_dim("pretrained model", gen.canvas_len(), inputs.pretrained.dim())?;
    check_dim("reference prior", gen.canvas_len(), inputs.reference.dim())?;
    if method == Method::Trace {
        check_dim("adapter base", gen.canvas_len(), inputs.base.layout.data_dim)?;
    }
    for p in &inputs.particles {
        check_dim("particle", gen.param_len(), p.len())?;
    }
    let y = cfg.condition();
    let guided = Guided::new(inputs.pretrained, cfg.cfg_weight);
    let views = eval_views(cfg);
    let ref_set = reference_samples(inputs.reference, y, cfg.reference_samples)?;
    let mut particles = inputs.particles;
    let mut trainer = BridgeTrainer::new(inputs.adapter, cfg.eta_phi);
    let mut iterations = Vec::with_capacity(cfg.total_iterations);
    let mut status = RunStatus::Completed;
    let n_views = cfg.batch_views;

    'outer: for iter in 0..cfg.total_iterations {
        observe(IterationState {
            iter,
            particles: &particles,
            adapter: &trainer.adapter,
        })?;
        let mut tuples = Vec::new();
        let (mut t_sum, mut tp_sum, mut sq_sum, mut gn_sum) = (0.0, 0.0, 0.0, 0.0);
        let adapter_now = trainer.adapter.clone();
        let adapted = Adapted {
            base: inputs.base,
            adapter: &adapter_now,
        };
        for (pi, theta) in particles.iter_mut().enumerate() {
            let mut acc = vec![0.0; theta.len()];
            for vi in 0..n_views {
                let lane = (pi * n_views + vi) as u64;
                let view = sample_view(&cfg.view_ranges, &mut rng_for(cfg.seed, &[stream::VIEW, iter as u64, lane]));
                let (grad, canvas) = match method {
                    Method::Sds => {
                        let s = sds_grad(gen, theta, &view, &guided, &inputs.pretrain_schedule, cfg, iter, lane)?;
                        t_sum += s.t;
                        (s.grad, s.canvas_grad)
                    }
                    Method::Trace => {
                        let s = trace_grad(
                            gen,
                            theta,
                            &view,
                            &guided,
                            &adapted,
                            &inputs.bridge_schedule,
                            &inputs.pretrain_schedule,
                            cfg,
                            iter,
                            lane,
                        )?;
                        t_sum += s.tuple.t;
                        tp_sum += s.target.t_prime;
                        tuples.push(s.tuple);
                        (s.grad, s.canvas_grad)
                    }
                };
                sq_sum += canvas.iter().map(|c| c * c).sum::<f64>() / canvas.len() as f64;
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g / n_views as f64;
                }
            }
            gn_sum += norm(&acc);
            for (th, g) in theta.iter_mut().zip(&acc) {
                *th -= cfg.eta_theta * g;
            }
            if theta.iter().any(|v| !v.is_finite()) {
                status = RunStatus::Aborted {
                    iteration: iter,
                    reason: format!("non-finite parameters in particle {pi}"),
                };
                break 'outer;
            }
        }
        let phi_loss = match method {
            Method::Trace => Some(trainer.step(inputs.base, &tuples)?),
            Method::Sds => None,
        };
        let n_evals = (particles.len() * n_views) as f64;
        let last = iter + 1 == cfg.total_iterations;
        let metrics = if iter % cfg.metric_every == 0 || last {
            Some(evaluate(gen, &particles, &views, inputs.reference, &ref_set)?)
        } else {
            None
        };
        iterations.push(IterationRecord {
            iter,
            t_mean: t_sum / n_evals,
            t_prime_mean: (method == Method::Trace).then(|| tp_sum / n_evals),
            residual_sq: sq_sum / n_evals,
            phi_loss,
            grad_norm: gn_sum / particles.len() as f64,
            sliced_w1: metrics.map(|m| m.sliced_w1),
            mmd_rbf: metrics.map(|m| m.mmd_rbf),
        });
    }

    if status == RunStatus::Completed {
        observe(IterationState {
            iter: cfg.total_iterations,
            particles: &particles,
            adapter: &trainer.adapter,
        })?;
    }
    let final_metrics = match status {
        RunStatus::Completed => Some(evaluate(gen, &particles, &views, inputs.reference, &ref_set)?),
        RunStatus::Aborted { .. } => None,
    };
    Ok(RunRecord {
        header,
        iterations,
        status,
        final_particles: particles,
        final_metrics,
        adapter_fingerprint: fingerprint(&trainer.adapter.flat_params()),
    })
}
