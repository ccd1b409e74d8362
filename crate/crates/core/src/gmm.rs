//! Diagonal-covariance Gaussian mixtures: densities, scores, sampling, and
//! their closed-form diffused marginals under the VP process.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::rng::{standard_normal, Rng};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmDistribution {
    components: Vec<GmmComponent>,
    dim: usize,
}

impl GmmDistribution {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::config("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        let mut total = 0.0;
        for c in &components {
            check_dim("mixture mean", dim, c.mean.len())?;
            check_dim("mixture variance", dim, c.var.len())?;
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::config(format!("invalid weight {}", c.weight)));
            }
            if c.var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::config("covariance entries must be positive"));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config("mixture means must be finite"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    /// Builds a mixture after rescaling the weights to sum to one.
    pub fn normalized(mut components: Vec<GmmComponent>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::config("mixture weights must have positive sum"));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![GmmComponent {
            weight: 1.0,
            mean,
            var: vec![var; d],
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Equal-weight mixture of several mixtures of the same dimension.
    pub fn uniform_mixture(members: &[GmmDistribution]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("cannot mix an empty family"));
        }
        let share = 1.0 / members.len() as f64;
        let mut comps = Vec::new();
        for m in members {
            check_dim("family member", members[0].dim, m.dim)?;
            comps.extend(m.components.iter().map(|c| GmmComponent {
                weight: c.weight * share,
                ..c.clone()
            }));
        }
        Self::normalized(comps)
    }

    /// Marginal of `sqrt(ab) X + sqrt(1 - ab) Z`.
    pub fn diffused(&self, alpha_bar: f64) -> GmmDistribution {
        let s = alpha_bar.sqrt();
        let components = self
            .components
            .iter()
            .map(|c| GmmComponent {
                weight: c.weight,
                mean: c.mean.iter().map(|m| s * m).collect(),
                var: c.var.iter().map(|v| alpha_bar * v + (1.0 - alpha_bar)).collect(),
            })
            .collect();
        GmmDistribution {
            components,
            dim: self.dim,
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_dim("mixture point", self.dim, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite input to mixture"));
        }
        Ok(())
    }

    /// Per-component log(weight * N(x; mean, var)).
    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let mut q = 0.0;
                let mut logdet = 0.0;
                for ((xi, mi), vi) in x.iter().zip(&c.mean).zip(&c.var) {
                    let d = xi - mi;
                    q += d * d / vi;
                    logdet += vi.ln();
                }
                c.weight.ln() - 0.5 * (q + logdet + self.dim as f64 * LN_2PI)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// Responsibilities of each component at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|l| (l - lse).exp()).collect())
    }

    /// `∇ₓ log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let resp = self.responsibilities(x)?;
        let mut out = vec![0.0; self.dim];
        for (r, c) in resp.iter().zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            for (o, ((xi, mi), vi)) in out.iter_mut().zip(x.iter().zip(&c.mean).zip(&c.var)) {
                *o -= r * (xi - mi) / vi;
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        c.mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| m + v.sqrt() * standard_normal(rng))
            .collect()
    }

    pub fn sample_n(&self, rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, m) in out.iter_mut().zip(&c.mean) {
                *o += c.weight * m;
            }
        }
        out
    }
}

/// `∇ₓ log p(x)` of the clean mixture.
pub fn gmm_clean_score(p: &GmmDistribution, x: &[f64]) -> Result<Vec<f64>> {
    p.score(x)
}

/// Exact score of the VP-diffused mixture at time `t`.
pub fn gmm_noisy_score(
    p: &GmmDistribution,
    sched: &NoiseSchedule,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let ab = sched.alpha_bar(t)?;
    p.diffused(ab).score(x)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Selects a member of a registered [`GmmFamily`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// The equal-weight mixture of every registered member.
    Unconditional,
    Class(usize),
}

impl Condition {
    pub fn from_option(id: Option<usize>) -> Self {
        id.map_or(Condition::Unconditional, Condition::Class)
    }
}

/// A family of mixtures indexed by condition, plus its unconditional mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFamily {
    members: Vec<GmmDistribution>,
    unconditional: GmmDistribution,
}

impl GmmFamily {
    pub fn new(members: Vec<GmmDistribution>) -> Result<Self> {
        let unconditional = GmmDistribution::uniform_mixture(&members)?;
        Ok(Self {
            members,
            unconditional,
        })
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[GmmDistribution] {
        &self.members
    }

    pub fn resolve(&self, y: Condition) -> Result<&GmmDistribution> {
        match y {
            Condition::Unconditional => Ok(&self.unconditional),
            Condition::Class(k) => self.members.get(k).ok_or_else(|| {
                Error::domain(format!(
                    "condition {k} outside registry of {} members",
                    self.members.len()
                ))
            }),
        }
    }

    /// The default 2D family: condition 0 is an eight-component ring,
    /// condition 1 is a bimodal pair.
    pub fn default_2d() -> Self {
        let ring: Vec<GmmComponent> = (0..8)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 8.0;
                GmmComponent {
                    weight: 1.0 / 8.0,
                    mean: vec![2.5 * a.cos(), 2.5 * a.sin()],
                    var: vec![0.04, 0.04],
                }
            })
            .collect();
        let pair = vec![
            GmmComponent {
                weight: 0.5,
                mean: vec![-1.5, 1.5],
                var: vec![0.05, 0.05],
            },
            GmmComponent {
                weight: 0.5,
                mean: vec![1.5, -1.5],
                var: vec![0.05, 0.05],
            },
        ];
        Self::new(vec![
            GmmDistribution::new(ring).expect("ring mixture is valid"),
            GmmDistribution::new(pair).expect("pair mixture is valid"),
        ])
        .expect("default family is valid")
    }
}
