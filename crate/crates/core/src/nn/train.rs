use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{fingerprint, mlp_grad, AdapterParams, Mlp, MlpScore, Trainable, TrainingExample};
use crate::bridge::{posterior_sample, BridgeEndpoints};
use crate::error::check_dim;
use crate::gmm::Condition;
use crate::render::ViewTransform;
use crate::rng::{rng_for, standard_normal_vec, stream, Rng};
use crate::schedule::NoiseSchedule;
use crate::score::{AnalyticScore, ScoreModel};
use crate::{Error, Result};

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("optimizer parameters", self.m.len(), params.len())?;
        check_dim("optimizer gradient", self.m.len(), grad.len())?;
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            if update != 0.0 {
                params[i] -= update;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Hex SHA-256 of the trained parameters.
    pub snapshot_id: String,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Probability of replacing the condition by the unconditional token.
    pub p_uncond: f64,
    /// Supplied by the run configuration's root seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DsmHyper {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-3,
            t_min: 0.02,
            t_max: 1.0,
            p_uncond: 0.2,
            seed: 0,
        }
    }
}

impl DsmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::config(format!(
                "training time window [{}, {}] must lie in (0, 1]",
                self.t_min, self.t_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::config("p_uncond must be a probability"));
        }
        Ok(())
    }
}

/// Consecutive steps above the divergence threshold that abort training.
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

struct DivergenceGuard {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        Self { initial: None, run: 0 }
    }

    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.run += 1;
            if self.run >= DIVERGENCE_PATIENCE {
                return Err(Error::Training(format!(
                    "loss {loss} stayed above {DIVERGENCE_FACTOR}x the initial {initial} for {DIVERGENCE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

/// Denoising score matching of `model` against draws from `prior`.
///
/// Each example draws `y` (dropped to unconditional with `p_uncond`),
/// `x0 ~ p_y`, `t ~ U[t_min, t_max]`, `ε ~ N(0, I)` and regresses the network
/// output at `x_t = √ᾱ x0 + √(1-ᾱ) ε` onto `ε`.
pub fn train_dsm(model: &mut Mlp, prior: &AnalyticScore, hyper: &DsmHyper) -> Result<TrainReport> {
    hyper.validate()?;
    let dim = prior.dim();
    check_dim("dsm data", model.layout.data_dim, dim)?;
    let n_classes = prior.family().len();
    if model.layout.n_conditions != n_classes {
        return Err(Error::config(format!(
            "network has {} condition slots but the prior has {n_classes} classes",
            model.layout.n_conditions
        )));
    }
    let sched = prior.schedule();
    let start = Instant::now();
    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len(), hyper.lr);
    let mut guard = DivergenceGuard::new();
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut rng = rng_for(hyper.seed, &[stream::TRAIN, step as u64]);
        let mut batch = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            let y = if rng.random::<f64>() < hyper.p_uncond {
                Condition::Unconditional
            } else {
                Condition::Class(rng.random_range(0..n_classes))
            };
            let x0 = prior.sample(y, &mut rng)?;
            let t = hyper.t_min + (hyper.t_max - hyper.t_min) * rng.random::<f64>();
            let ab = sched.alpha_bar(t)?;
            let eps = standard_normal_vec(&mut rng, dim);
            let x = x0
                .iter()
                .zip(&eps)
                .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
                .collect();
            batch.push(TrainingExample {
                x,
                t,
                y,
                view: ViewTransform::identity(),
                target: eps,
            });
        }
        let g = mlp_grad(model, None, &batch, Trainable::Base)?;
        guard.observe(step, g.loss)?;
        losses.push(g.loss);
        adam.step(&mut params, g.base.as_deref().expect("base gradient"))?;
        model.set_flat_params(&params)?;
    }
    Ok(TrainReport {
        losses,
        snapshot_id: model.fingerprint(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-coordinate mean squared error between `model` and the exact noise
/// predictor of `prior`, over `n` held-out points with `t ∈ [0.1, 0.9]` and
/// every coordinate of `x` in `[-3, 3]`.
pub fn optimal_denoiser_mse<M: ScoreModel + ?Sized>(
    model: &M,
    prior: &AnalyticScore,
    y: Condition,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("empty evaluation grid"));
    }
    let dim = prior.dim();
    check_dim("evaluated model", dim, model.dim())?;
    let mut rng = rng_for(seed, &[stream::EVAL]);
    let view = ViewTransform::identity();
    let mut total = 0.0;
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let t = rng.random_range(0.1..=0.9);
        let want = prior.epsilon(&x, t, y, &view)?;
        let got = model.epsilon(&x, t, y, &view)?;
        total += want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / (n * dim) as f64)
}

/// One bridge-training example as emitted by the distillation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeTuple {
    pub x0_pred: Vec<f64>,
    pub x_rndr: Vec<f64>,
    pub y: Condition,
    pub view: ViewTransform,
    pub t: f64,
    pub x_t: Vec<f64>,
    /// Standard-normal draw behind `x_t`; the regression target.
    pub z: Vec<f64>,
}

/// Adapter plus optimizer state; the base network is only ever borrowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeTrainer {
    pub adapter: AdapterParams,
    adam: Adam,
}

impl BridgeTrainer {
    pub fn new(adapter: AdapterParams, lr: f64) -> Self {
        let n = adapter.param_count();
        Self {
            adapter,
            adam: Adam::new(n, lr),
        }
    }

    /// One adapter step on `‖ε_φ(x_t, t, y, c) − z‖²`; returns the loss
    /// before the step.
    pub fn step(&mut self, base: &Mlp, tuples: &[BridgeTuple]) -> Result<f64> {
        let batch: Vec<TrainingExample> = tuples
            .iter()
            .map(|tp| TrainingExample {
                x: tp.x_t.clone(),
                t: tp.t,
                y: tp.y,
                view: tp.view,
                target: tp.z.clone(),
            })
            .collect();
        let g = mlp_grad(base, Some(&self.adapter), &batch, Trainable::Adapter)?;
        if !g.loss.is_finite() {
            return Err(Error::Training("non-finite bridge loss".into()));
        }
        let mut params = self.adapter.flat_params();
        self.adam
            .step(&mut params, g.adapter.as_deref().expect("adapter gradient"))?;
        self.adapter.set_flat_params(&params)?;
        Ok(g.loss)
    }

    pub fn model(&self, base: &Mlp) -> MlpScore {
        MlpScore {
            base: base.clone(),
            adapter: Some(self.adapter.clone()),
        }
    }
}

/// Endpoint pair with its conditioning, as fed to [`train_bridge_score`].
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeEndpointSpec {
    pub endpoints: BridgeEndpoints,
    pub y: Condition,
    pub view: ViewTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub seed: u64,
}

impl Default for BridgeHyper {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 16,
            lr: 1e-3,
            t_lo: 0.02,
            t_hi: 0.5,
            seed: 0,
        }
    }
}

/// Trains the adapter on bridge posterior draws between endpoint pairs
/// pulled from `endpoints`, one optimizer step per batch.
pub fn train_bridge_score<I>(
    base: &Mlp,
    trainer: &mut BridgeTrainer,
    mut endpoints: I,
    sched: &NoiseSchedule,
    hyper: &BridgeHyper,
) -> Result<TrainReport>
where
    I: FnMut(usize, &mut Rng) -> BridgeEndpointSpec,
{
    if hyper.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(0.0 < hyper.t_lo && hyper.t_lo < hyper.t_hi && hyper.t_hi < 1.0) {
        return Err(Error::config("bridge training window must lie inside (0, 1)"));
    }
    let start = Instant::now();
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut rng = rng_for(hyper.seed, &[stream::BRIDGE, step as u64]);
        let mut tuples = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            let spec = endpoints(step, &mut rng);
            let t = hyper.t_lo + (hyper.t_hi - hyper.t_lo) * rng.random::<f64>();
            let s = posterior_sample(&spec.endpoints, sched, t, &mut rng)?;
            tuples.push(BridgeTuple {
                x0_pred: spec.endpoints.x_target.clone(),
                x_rndr: spec.endpoints.x_source.clone(),
                y: spec.y,
                view: spec.view,
                t,
                x_t: s.x_t,
                z: s.z,
            });
        }
        losses.push(trainer.step(base, &tuples)?);
    }
    Ok(TrainReport {
        losses,
        snapshot_id: fingerprint(&trainer.adapter.flat_params()),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_forward, Activation, InputLayout};

    fn tiny() -> (Mlp, AdapterParams) {
        let layout = InputLayout {
            data_dim: 1,
            n_conditions: 1,
        };
        let mut rng = rng_for(2, &[]);
        let m = Mlp::random(layout, &[8, 8], Activation::Tanh, &mut rng).unwrap();
        let a = AdapterParams::new(&m, 2, 1.0, &mut rng).unwrap();
        (m, a)
    }

    #[test]
    fn adam_zero_gradient_is_a_bitwise_no_op() {
        let mut p = vec![0.3, -1.7, 2.0];
        let before = p.clone();
        let mut adam = Adam::new(3, 1e-3);
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0, 1.0];
        let mut adam = Adam::new(2, 0.01);
        adam.step(&mut p, &[5.0, -0.2]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn zero_scale_adapter_does_not_move_outputs() {
        let (m, mut a) = tiny();
        a.scale = 0.0;
        let mut trainer = BridgeTrainer::new(a, 1e-2);
        let v = ViewTransform::identity();
        let before = mlp_forward(&m, Some(&trainer.adapter), &[0.5], 0.3, Condition::Class(0), &v).unwrap();
        let ep = BridgeEndpoints::new(vec![1.0], vec![-1.0]).unwrap();
        let hyper = BridgeHyper {
            steps: 20,
            ..BridgeHyper::default()
        };
        let params_before = trainer.adapter.flat_params();
        let rep = train_bridge_score(
            &m,
            &mut trainer,
            |_, _| BridgeEndpointSpec {
                endpoints: ep.clone(),
                y: Condition::Class(0),
                view: v,
            },
            &NoiseSchedule::default(),
            &hyper,
        )
        .unwrap();
        let after = mlp_forward(&m, Some(&trainer.adapter), &[0.5], 0.3, Condition::Class(0), &v).unwrap();
        assert_eq!(before, after);
        assert_eq!(params_before, trainer.adapter.flat_params());
        assert_eq!(rep.losses.len(), 20);
    }

    #[test]
    fn bridge_training_never_touches_the_base() {
        let (m, a) = tiny();
        let hash = m.fingerprint();
        let mut trainer = BridgeTrainer::new(a, 1e-2);
        let ep = BridgeEndpoints::new(vec![1.0], vec![-1.0]).unwrap();
        train_bridge_score(
            &m,
            &mut trainer,
            |_, _| BridgeEndpointSpec {
                endpoints: ep.clone(),
                y: Condition::Unconditional,
                view: ViewTransform::identity(),
            },
            &NoiseSchedule::default(),
            &BridgeHyper {
                steps: 50,
                ..BridgeHyper::default()
            },
        )
        .unwrap();
        assert_eq!(hash, m.fingerprint());
        assert!(trainer.adapter.flat_params().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn divergence_guard_trips_after_patience() {
        let mut g = DivergenceGuard::new();
        g.observe(0, 1.0).unwrap();
        for s in 1..DIVERGENCE_PATIENCE {
            g.observe(s, 11.0).unwrap();
        }
        assert!(g.observe(DIVERGENCE_PATIENCE, 11.0).is_err());
        let mut g = DivergenceGuard::new();
        g.observe(0, 1.0).unwrap();
        assert!(g.observe(1, f64::NAN).is_err());
    }
}
