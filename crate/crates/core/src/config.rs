//! Declarative run configuration (TOML) and the experiment it builds.
//!
//! Unknown keys are rejected everywhere. The configuration hash is the
//! SHA-256 of the canonical TOML re-serialization, so two files that parse
//! to the same configuration share a hash.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{
    run_distillation_observed, DistillConfig, DistillInputs, IterationState, Method, RunHeader, RunRecord,
};
use crate::gmm::{Condition, GmmComponent, GmmDistribution, GmmFamily};
use crate::nn::{load_snapshot, train_dsm, Activation, AdapterParams, DsmHyper, InputLayout, Mlp, TrainReport};
use crate::render::Generator;
use crate::rng::{rng_for, standard_normal, stream};
use crate::schedule::NoiseSchedule;
use crate::score::{AnalyticScore, LatentProjection};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorPreset {
    /// Condition 0: eight-component ring; condition 1: bimodal pair.
    Default2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Defaults to [`PriorPreset::Default2d`] when `members` is absent.
    pub preset: Option<PriorPreset>,
    /// Explicit family; one list of components per condition.
    pub members: Option<Vec<Vec<GmmComponent>>>,
    /// Variance of the prior orthogonal to the latent subspace, used when
    /// the canvas has more coordinates than the family.
    pub complement_var: f64,
    pub projection_seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            preset: None,
            members: None,
            complement_var: 0.01,
            projection_seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn family(&self) -> Result<GmmFamily> {
        match (&self.preset, &self.members) {
            (Some(PriorPreset::Default2d) | None, None) => Ok(GmmFamily::default_2d()),
            (None, Some(members)) => {
                let dists = members
                    .iter()
                    .map(|c| GmmDistribution::new(c.clone()))
                    .collect::<Result<Vec<_>>>()?;
                GmmFamily::new(dists)
            }
            _ => Err(Error::config("prior takes at most one of `preset` or `members`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub particles: usize,
    /// Standard deviation of direct-field initial values.
    pub sd: f64,
    /// Second half of the population mirrors the first (`θ ↦ −θ`).
    pub antithetic: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            particles: 64,
            sd: 0.5,
            antithetic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum BaseInit {
    /// Fresh random weights.
    Random,
    /// Random weights trained by denoising score matching on the prior with
    /// the `[dsm]` settings.
    Dsm,
    Snapshot { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub base: BaseInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Silu,
            adapter_rank: 4,
            adapter_scale: 1.0,
            base: BaseInit::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub cfg_weights: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sds, Method::Trace],
            cfg_weights: vec![5.0, 7.5, 10.0, 15.0, 20.0, 25.0, 50.0, 100.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Draws per gradient dump.
    pub dump_draws: usize,
    /// Fixed views of the final render.
    pub render_views: usize,
    /// Nearest-neighbour upscaling of written images.
    pub image_scale: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dump_draws: 256,
            render_views: 8,
            image_scale: 8,
        }
    }
}

fn default_generator() -> Generator {
    Generator::direct_field(1, 2, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bridge_schedule: NoiseSchedule,
    #[serde(default)]
    pub pretrain_schedule: NoiseSchedule,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dsm: DsmHyper,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bridge_schedule: NoiseSchedule::default(),
            pretrain_schedule: NoiseSchedule::default(),
            prior: PriorConfig::default(),
            generator: default_generator(),
            init: InitConfig::default(),
            model: ModelConfig::default(),
            dsm: DsmHyper::default(),
            distill: DistillConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Cross-module checks, run before any computation.
    pub fn validate(&self) -> Result<()> {
        self.bridge_schedule.validate()?;
        self.pretrain_schedule.validate()?;
        self.generator.validate()?;
        let family = self.prior.family()?;
        let canvas = self.generator.canvas_len();
        if family.dim() > canvas {
            return Err(Error::config(format!(
                "prior dimension {} exceeds the canvas size {canvas}",
                family.dim()
            )));
        }
        if !(self.prior.complement_var > 0.0) {
            return Err(Error::config("prior complement_var must be positive"));
        }
        if let Condition::Class(k) = self.distill.condition {
            if k >= family.len() {
                return Err(Error::config(format!(
                    "condition {k} outside the prior's {} members",
                    family.len()
                )));
            }
        }
        self.distill.validate()?;
        self.dsm.validate()?;
        if self.init.particles == 0 {
            return Err(Error::config("init.particles must be positive"));
        }
        if self.init.antithetic && self.init.particles % 2 != 0 {
            return Err(Error::config("antithetic initialization needs an even particle count"));
        }
        if !(self.init.sd >= 0.0) {
            return Err(Error::config("init.sd must be non-negative"));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden must list positive widths"));
        }
        if self.model.adapter_rank == 0 || self.model.hidden.iter().all(|&h| h <= self.model.adapter_rank) {
            return Err(Error::config("adapter_rank must be positive and below some hidden width"));
        }
        if self.sweep.methods.is_empty() || self.sweep.cfg_weights.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep lists must be non-empty"));
        }
        if self.output.render_views == 0 || self.output.image_scale == 0 {
            return Err(Error::config("output counts must be positive"));
        }
        Ok(())
    }

    /// The distillation settings with the root seed applied.
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            seed: self.seed,
            ..self.distill
        }
    }

    pub fn dsm_hyper(&self) -> DsmHyper {
        DsmHyper {
            seed: self.seed,
            ..self.dsm
        }
    }

    /// Copy with a different seed and guidance weight, as used by sweeps.
    pub fn with_run(&self, seed: u64, cfg_weight: f64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.distill.cfg_weight = cfg_weight;
        c
    }

    pub fn build_prior(&self) -> Result<AnalyticScore> {
        let family = self.prior.family()?;
        let canvas = self.generator.canvas_len();
        if family.dim() == canvas {
            Ok(AnalyticScore::new(family, self.pretrain_schedule))
        } else {
            let proj = LatentProjection::random(
                family.dim(),
                canvas,
                self.prior.complement_var,
                self.prior.projection_seed,
            )?;
            AnalyticScore::with_projection(family, self.pretrain_schedule, proj)
        }
    }

    pub fn build_particles(&self) -> Vec<Vec<f64>> {
        let mut rng = rng_for(self.seed, &[stream::INIT, 0]);
        let n = self.init.particles;
        let fresh = if self.init.antithetic { n / 2 } else { n };
        let mut out: Vec<Vec<f64>> = (0..fresh)
            .map(|_| match &self.generator {
                Generator::DirectField(_) => (0..self.generator.param_len())
                    .map(|_| self.init.sd * standard_normal(&mut rng))
                    .collect(),
                Generator::Splat2d(g) => g.random_params(&mut rng),
            })
            .collect();
        if self.init.antithetic {
            let mirrored: Vec<Vec<f64>> = out
                .iter()
                .map(|p| match &self.generator {
                    Generator::DirectField(_) => p.iter().map(|v| -v).collect(),
                    // mirror splat centres through the canvas origin
                    Generator::Splat2d(g) => {
                        let mut q = p.clone();
                        for k in 0..g.n_splats {
                            q[k * g.stride()] = -q[k * g.stride()];
                            q[k * g.stride() + 1] = -q[k * g.stride() + 1];
                        }
                        q
                    }
                })
                .collect();
            out.extend(mirrored);
        }
        out
    }

    fn random_base(&self, n_conditions: usize) -> Result<Mlp> {
        let layout = InputLayout {
            data_dim: self.generator.canvas_len(),
            n_conditions,
        };
        Mlp::random(
            layout,
            &self.model.hidden,
            self.model.activation,
            &mut rng_for(self.seed, &[stream::INIT, 1]),
        )
    }

    /// The base network for the adapter; trains it first for `BaseInit::Dsm`.
    pub fn build_base(&self, prior: &AnalyticScore) -> Result<(Mlp, Option<TrainReport>)> {
        match &self.model.base {
            BaseInit::Random => Ok((self.random_base(prior.family().len())?, None)),
            BaseInit::Dsm => {
                let mut m = self.random_base(prior.family().len())?;
                let rep = train_dsm(&mut m, prior, &self.dsm_hyper())?;
                Ok((m, Some(rep)))
            }
            BaseInit::Snapshot { path } => {
                let snap = load_snapshot(path)?;
                if snap.model.base.layout.data_dim != self.generator.canvas_len() {
                    return Err(Error::config("snapshot data dimension does not match the canvas"));
                }
                Ok((snap.model.base, None))
            }
        }
    }

    pub fn build_adapter(&self, base: &Mlp) -> Result<AdapterParams> {
        AdapterParams::new(
            base,
            self.model.adapter_rank,
            self.model.adapter_scale,
            &mut rng_for(self.seed, &[stream::INIT, 2]),
        )
    }
}

/// A configuration with its prior and base network built, ready to run.
pub struct Experiment {
    pub config: RunConfig,
    pub prior: AnalyticScore,
    pub base: Mlp,
    pub base_report: Option<TrainReport>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let prior = config.build_prior()?;
        let (base, base_report) = config.build_base(&prior)?;
        Ok(Self {
            config,
            prior,
            base,
            base_report,
        })
    }

    pub fn run(&self, method: Method) -> Result<RunRecord> {
        self.run_observed(method, |_| Ok(()))
    }

    pub fn run_observed<F>(&self, method: Method, observe: F) -> Result<RunRecord>
    where
        F: FnMut(IterationState<'_>) -> Result<()>,
    {
        let cfg = self.config.distill_config();
        let header = RunHeader::new(method, self.config.seed, &self.config.hash()?, &self.config);
        let inputs = DistillInputs {
            generator: &self.config.generator,
            particles: self.config.build_particles(),
            pretrained: &self.prior,
            reference: &self.prior,
            bridge_schedule: self.config.bridge_schedule,
            pretrain_schedule: self.config.pretrain_schedule,
            base: &self.base,
            adapter: self.config.build_adapter(&self.base)?,
        };
        run_distillation_observed(&cfg, inputs, method, header, observe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let mut c = RunConfig::default();
        c.distill.condition = Condition::Unconditional;
        c.model.base = BaseInit::Snapshot {
            path: "m.json".into(),
        };
        c.prior = PriorConfig {
            preset: None,
            members: Some(vec![vec![GmmComponent {
                weight: 1.0,
                mean: vec![0.0, 0.5],
                var: vec![1.0, 0.3],
            }]]),
            ..PriorConfig::default()
        };
        let s1 = c.to_toml_string().unwrap();
        let back: RunConfig = toml::from_str(&s1).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), s1);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[distill]\ncfg = 3").is_err());
        assert!(RunConfig::from_toml_str("[init]\nparticles = 4\nextra = true").is_err());
    }

    #[test]
    fn cross_module_checks() {
        assert!(RunConfig::from_toml_str("[distill]\ncondition = { class = 5 }").is_err());
        assert!(RunConfig::from_toml_str("[init]\nparticles = 3").is_err());
        assert!(RunConfig::from_toml_str("[model]\nadapter_rank = 64").is_err());
        let ok = RunConfig::from_toml_str("[distill]\ncondition = \"unconditional\"").unwrap();
        assert_eq!(ok.distill.condition, Condition::Unconditional);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.with_run(1, 20.0);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), a.with_run(0, 20.0).hash().unwrap());
    }

    #[test]
    fn antithetic_population_mirrors() {
        let c = RunConfig::default();
        let p = c.build_particles();
        assert_eq!(p.len(), 64);
        for i in 0..32 {
            assert_eq!(p[i + 32], p[i].iter().map(|v| -v).collect::<Vec<_>>());
        }
    }

    #[test]
    fn splat_scene_builds_projected_prior() {
        let c = RunConfig::from_toml_str(
            "[generator]\nkind = \"splat2d\"\nheight = 8\nwidth = 8\nchannels = 1\nn_splats = 3\nbackground = 0.0\n[init]\nparticles = 2\n",
        )
        .unwrap();
        let prior = c.build_prior().unwrap();
        assert_eq!(prior.projection().canvas_dim(), 64);
        assert_eq!(c.build_particles()[0].len(), 3 * 7);
    }
}
