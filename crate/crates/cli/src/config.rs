use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use gradguide::dataset::{generate_gaussian, Dataset};
use gradguide::experiments::{f2, random_gaussian_in, FigureSettings, SubspaceProblem};
use gradguide::guidance::{BetaRule, GuidanceKind};
use gradguide::io::read_dataset;
use gradguide::objective::Objective;
use gradguide::optimizer::OptConfig;
use gradguide::rng::derive_seed;
use gradguide::sampler::SamplerConfig;
use gradguide::schedule::{NoiseSchedule, ScheduleSpec};
use gradguide::score::ScoreClass;
use gradguide::verify::SuiteConfig;
use gradguide::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// `x = Au` with `u ~ N(0, I_d)` and a random orthonormal `A`.
    Subspace {
        #[serde(default = "default_ambient")]
        ambient_dim: usize,
        #[serde(default = "default_latent")]
        latent_dim: usize,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    /// Random mean and a covariance with eigenvalues in `[eig_low, eig_high]`.
    Gaussian {
        dim: usize,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_eig_low")]
        eig_low: f64,
        #[serde(default = "default_eig_high")]
        eig_high: f64,
    },
    File { path: PathBuf },
}

fn default_ambient() -> usize {
    64
}
fn default_latent() -> usize {
    16
}
fn default_samples() -> usize {
    65536
}
fn default_eig_low() -> f64 {
    0.1
}
fn default_eig_high() -> f64 {
    1.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Subspace {
            ambient_dim: default_ambient(),
            latent_dim: default_latent(),
            samples: default_samples(),
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetConfig::Subspace { .. } => Ok(self.subspace_problem(seed)?.data),
            DatasetConfig::Gaussian {
                dim,
                samples,
                eig_low,
                eig_high,
            } => {
                let dist = random_gaussian_in(*dim, *eig_low, *eig_high, derive_seed(seed, 0))?;
                generate_gaussian(&dist, *samples, derive_seed(seed, 1))
            }
            DatasetConfig::File { path } => read_dataset(path),
        }
    }

    pub fn subspace_problem(&self, seed: u64) -> Result<SubspaceProblem> {
        match self {
            DatasetConfig::Subspace {
                ambient_dim,
                latent_dim,
                samples,
            } => SubspaceProblem::generate(*ambient_dim, *latent_dim, *samples, seed),
            _ => SubspaceProblem::from_dataset(self.load(seed)?),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Subspace {
                ambient_dim,
                latent_dim,
                samples,
            } => {
                if *latent_dim == 0 || latent_dim > ambient_dim {
                    return Err(Error::config("dataset.latent_dim", "must lie in 1..=ambient_dim"));
                }
                if *samples < 2 {
                    return Err(Error::config("dataset.samples", "must be at least 2"));
                }
            }
            DatasetConfig::Gaussian {
                dim,
                samples,
                eig_low,
                eig_high,
            } => {
                if *dim == 0 {
                    return Err(Error::config("dataset.dim", "must be at least 1"));
                }
                if *samples < 2 {
                    return Err(Error::config("dataset.samples", "must be at least 2"));
                }
                if !(*eig_low >= 0.0 && eig_high >= eig_low && eig_high.is_finite()) {
                    return Err(Error::config("dataset.eig_low", "need 0 <= eig_low <= eig_high"));
                }
            }
            DatasetConfig::File { path } => {
                if !path.exists() {
                    return Err(Error::config("dataset.path", format!("{} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub class: String,
    /// Load a fitted model instead of fitting one.
    pub path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            class: ScoreClass::Subspace.name().to_string(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// `10 − (θᵀx − 3)²` with a random unit on-support `θ_∥` and
    /// `‖θ_⊥‖ = ratio`; needs a subspace dataset.
    F1 {
        #[serde(default)]
        ratio: f64,
    },
    /// `5 − 0.5‖x − b‖` with `b = value · 1`.
    F2 {
        #[serde(default = "one")]
        value: f64,
    },
    Linear { g: Vec<f64> },
    QuadScalar { theta: Vec<f64>, a: f64, c: f64 },
    DistNorm { b: Vec<f64>, c0: f64, w: f64 },
    /// `f ≡ 0`.
    Zero,
}

fn one() -> f64 {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::F1 { ratio: 9.0 }
    }
}

impl ObjectiveConfig {
    pub fn build(&self, dim: usize, problem: Option<&SubspaceProblem>, seed: u64) -> Result<Objective> {
        let obj = match self {
            ObjectiveConfig::F1 { ratio } => {
                let p = problem.ok_or_else(|| Error::config("objective.kind", "f1 needs a subspace dataset"))?;
                p.f1(*ratio, seed)?
            }
            ObjectiveConfig::F2 { value } => f2(&DVector::from_element(dim, *value)),
            ObjectiveConfig::Linear { g } => Objective::linear(&DVector::from_column_slice(g)),
            ObjectiveConfig::QuadScalar { theta, a, c } => {
                Objective::quad_scalar(&DVector::from_column_slice(theta), *a, *c)
            }
            ObjectiveConfig::DistNorm { b, c0, w } => Objective::dist_norm(&DVector::from_column_slice(b), *c0, *w),
            ObjectiveConfig::Zero => Objective::linear(&DVector::zeros(dim)),
        };
        obj.validate(dim).map_err(|e| Error::config("objective", e.to_string()))?;
        Ok(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub kind: GuidanceKind,
    pub sigma: f64,
    pub beta_rule: BetaRule,
    pub score_scale: f64,
    /// Step size in the target `y = η(σ² + gᵀΣg) + gᵀμ`; ignored when `y` is set.
    pub eta: f64,
    pub y: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            kind: GuidanceKind::Loss,
            sigma: 1.0,
            beta_rule: BetaRule::GaussianTheory,
            score_scale: 1.0,
            eta: 1.0,
            y: None,
        }
    }
}

/// Everything a command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub schedule: ScheduleSpec,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptConfig,
    pub figures: FigureSettings,
    pub verify: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            schedule: ScheduleSpec::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptConfig {
                lambda: 4.0,
                ..OptConfig::default()
            },
            figures: FigureSettings::default(),
            verify: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            what: "config".into(),
            reason: e.to_string(),
        })
    }

    /// Canonical text used for hashing and echoed next to outputs.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            what: "config".into(),
            reason: e.to_string(),
        })
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.clone())
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.noise_schedule()?;
        self.dataset.validate()?;
        ScoreClass::parse(&self.model.class).map_err(|e| Error::config("model.class", e.to_string()))?;
        if let Some(p) = &self.model.path {
            if !p.exists() {
                return Err(Error::config("model.path", format!("{} does not exist", p.display())));
            }
        }
        self.sampler.validate(&schedule)?;
        self.optimizer.sampler.validate(&schedule)?;
        if !(self.guidance.eta > 0.0 && self.guidance.eta.is_finite()) {
            return Err(Error::config("guidance.eta", "must be positive"));
        }
        if self.figures.rounds == 0 || self.figures.alg2_rounds == 0 {
            return Err(Error::config("figures.rounds", "must be at least 1"));
        }
        if self.figures.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::config("figures.lambdas", "must be positive"));
        }
        Ok(())
    }
}
