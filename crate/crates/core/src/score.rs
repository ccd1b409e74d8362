//! Noise predictors behind a single interface, conversions between noise
//! and score parameterizations, and classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_unit_time};
use crate::gmm::{Condition, GmmFamily};
use crate::render::ViewTransform;
use crate::rng::{rng_for, standard_normal, standard_normal_vec, Rng};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Anything that predicts the noise in `x` at time `t`.
///
/// Implementations must be pure: identical arguments give bit-identical
/// outputs, and the output has the input's dimension.
pub trait ScoreModel {
    fn dim(&self) -> usize;

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        (**self).epsilon(x, t, y, view)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        (**self).epsilon(x, t, y, view)
    }
}

/// `eps = -sqrt(1 - alpha_bar(t)) * score`.
pub fn eps_from_score(score: &[f64], sched: &NoiseSchedule, t: f64) -> Result<Vec<f64>> {
    let k = noise_scale(sched, t)?;
    Ok(score.iter().map(|s| -k * s).collect())
}

/// Inverse of [`eps_from_score`].
pub fn score_from_eps(eps: &[f64], sched: &NoiseSchedule, t: f64) -> Result<Vec<f64>> {
    let k = noise_scale(sched, t)?;
    Ok(eps.iter().map(|e| -e / k).collect())
}

fn noise_scale(sched: &NoiseSchedule, t: f64) -> Result<f64> {
    check_unit_time(t)?;
    if t == 0.0 {
        return Err(Error::domain("noise scale vanishes at t = 0"));
    }
    Ok((1.0 - sched.alpha_bar(t)?).sqrt())
}

/// `eps_u + w (eps_c - eps_u)`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim("guidance", eps_cond.len(), eps_uncond.len())?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| u + w * (c - u))
        .collect())
}

/// Orthonormal map from canvas space onto a low-dimensional latent space.
///
/// The prior over the full space is the latent mixture times an isotropic
/// Gaussian with variance `complement_var` on the orthogonal complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProjection {
    /// `latent_dim` rows of length `canvas_dim`, mutually orthonormal.
    pub rows: Vec<Vec<f64>>,
    pub complement_var: f64,
}

impl LatentProjection {
    pub fn identity(dim: usize) -> Self {
        let rows = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            rows,
            complement_var: 1.0,
        }
    }

    /// Gram-Schmidt on Gaussian draws.
    pub fn random(latent_dim: usize, canvas_dim: usize, complement_var: f64, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > canvas_dim {
            return Err(Error::config(format!(
                "latent dimension {latent_dim} must lie in 1..={canvas_dim}"
            )));
        }
        if !(complement_var > 0.0) {
            return Err(Error::config("complement variance must be positive"));
        }
        let mut rng = rng_for(seed, &[crate::rng::stream::PROJECTION]);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(latent_dim);
        while rows.len() < latent_dim {
            let mut v = standard_normal_vec(&mut rng, canvas_dim);
            for r in &rows {
                let d = dot(&v, r);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= d * ri;
                }
            }
            let n = dot(&v, &v).sqrt();
            if n < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|vi| *vi /= n);
            rows.push(v);
        }
        Ok(Self {
            rows,
            complement_var,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn canvas_dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.latent_dim() == self.canvas_dim()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot(r, x)).collect()
    }

    pub fn lift(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.canvas_dim()];
        for (r, ui) in self.rows.iter().zip(u) {
            for (o, ri) in out.iter_mut().zip(r) {
                *o += ui * ri;
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact noise predictor of a diffused mixture family, optionally defined on
/// a latent projection of the canvas.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    family: GmmFamily,
    schedule: NoiseSchedule,
    projection: LatentProjection,
}

impl AnalyticScore {
    pub fn new(family: GmmFamily, schedule: NoiseSchedule) -> Self {
        let projection = LatentProjection::identity(family.dim());
        Self {
            family,
            schedule,
            projection,
        }
    }

    pub fn with_projection(
        family: GmmFamily,
        schedule: NoiseSchedule,
        projection: LatentProjection,
    ) -> Result<Self> {
        check_dim("latent projection", family.dim(), projection.latent_dim())?;
        Ok(Self {
            family,
            schedule,
            projection,
        })
    }

    pub fn family(&self) -> &GmmFamily {
        &self.family
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn projection(&self) -> &LatentProjection {
        &self.projection
    }

    /// `∇ₓ log p_t(x)` over the full canvas space.
    pub fn score(&self, x: &[f64], t: f64, y: Condition) -> Result<Vec<f64>> {
        check_dim("analytic score input", self.dim(), x.len())?;
        let ab = self.schedule.alpha_bar(t)?;
        let p = self.family.resolve(y)?;
        let u = self.projection.project(x);
        let s_lat = p.diffused(ab).score(&u)?;
        let mut s = self.projection.lift(&s_lat);
        if !self.projection.is_full_rank() {
            let back = self.projection.lift(&u);
            let v = ab * self.projection.complement_var + (1.0 - ab);
            for ((si, xi), bi) in s.iter_mut().zip(x).zip(&back) {
                *si -= (xi - bi) / v;
            }
        }
        Ok(s)
    }

    /// One draw from the clean prior in canvas space.
    pub fn sample(&self, y: Condition, rng: &mut Rng) -> Result<Vec<f64>> {
        let p = self.family.resolve(y)?;
        let u = p.sample(rng);
        let mut x = self.projection.lift(&u);
        if !self.projection.is_full_rank() {
            let z: Vec<f64> = (0..x.len()).map(|_| standard_normal(rng)).collect();
            let zp = self.projection.lift(&self.projection.project(&z));
            let sd = self.projection.complement_var.sqrt();
            for ((xi, zi), zpi) in x.iter_mut().zip(&z).zip(&zp) {
                *xi += sd * (zi - zpi);
            }
        }
        Ok(x)
    }
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.projection.canvas_dim()
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, _view: &ViewTransform) -> Result<Vec<f64>> {
        let s = self.score(x, t, y)?;
        eps_from_score(&s, &self.schedule, t)
    }
}

/// Classifier-free guidance around any noise predictor.
#[derive(Debug, Clone)]
pub struct Guided<M> {
    pub inner: M,
    pub weight: f64,
}

impl<M: ScoreModel> Guided<M> {
    pub fn new(inner: M, weight: f64) -> Self {
        Self { inner, weight }
    }
}

impl<M: ScoreModel> ScoreModel for Guided<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        let cond = self.inner.epsilon(x, t, y, view)?;
        if self.weight == 1.0 || y == Condition::Unconditional {
            return Ok(cond);
        }
        let uncond = self.inner.epsilon(x, t, Condition::Unconditional, view)?;
        cfg_combine(&cond, &uncond, self.weight)
    }
}

/// Wraps a closure as a [`ScoreModel`]; handy for stubs and oracles.
pub struct FnScoreModel<F> {
    dim: usize,
    f: F,
}

impl<F> FnScoreModel<F>
where
    F: Fn(&[f64], f64, Condition, &ViewTransform) -> Result<Vec<f64>>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreModel for FnScoreModel<F>
where
    F: Fn(&[f64], f64, Condition, &ViewTransform) -> Result<Vec<f64>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        check_dim("stub model input", self.dim, x.len())?;
        (self.f)(x, t, y, view)
    }
}
