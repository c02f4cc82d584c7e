//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use dcdp::tasks::{self, ImagePriorSpec, OperatorSpec, Preset};
use dcdp::{ImageShape, PurifyBackend};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub prior: PriorConfig,
    #[serde(default)]
    pub latent: LatentConfig,
    #[serde(rename = "task")]
    pub tasks: Vec<TaskConfig>,
    #[serde(rename = "method")]
    pub methods: Vec<MethodConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed; every cell seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Number of ground-truth draws per (task, σ_y).
    pub seeds: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Write PGM and flat-tensor dumps of every reconstruction.
    #[serde(default = "yes")]
    pub dumps: bool,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_out() -> PathBuf {
    "results".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorConfig {
    /// Synthetic template mixture, see [`ImagePriorSpec`].
    Generated {
        #[serde(default = "d_side")]
        height: usize,
        #[serde(default = "d_side")]
        width: usize,
        #[serde(default = "d_components")]
        components: usize,
        #[serde(default = "d_residual")]
        residual_std: f64,
        #[serde(default = "d_corr")]
        correlation: f64,
        #[serde(default = "d_exp")]
        exponent: f64,
        #[serde(default)]
        seed: u64,
        /// Use only the zero-mean residual Gaussian.
        #[serde(default)]
        gaussian: bool,
    },
    /// Mixture in the text format of `GaussianMixture::parse_text`.
    Gmm { path: PathBuf, shape: String },
    /// Kernel density over the rows of a flat-tensor matrix.
    Empirical { path: PathBuf, shape: String, bandwidth: f64 },
}

fn d_side() -> usize {
    32
}
fn d_components() -> usize {
    8
}
fn d_residual() -> f64 {
    0.1
}
fn d_corr() -> f64 {
    2.0
}
fn d_exp() -> f64 {
    1.5
}

impl PriorConfig {
    pub fn shape(&self) -> Result<ImageShape> {
        match self {
            PriorConfig::Generated { .. } => Ok(self.image_spec().expect("generated").shape()?),
            PriorConfig::Gmm { shape, .. } | PriorConfig::Empirical { shape, .. } => {
                tasks::parse_shape(shape).map_err(|e| anyhow!("prior.shape: {e}"))
            }
        }
    }

    pub fn image_spec(&self) -> Option<ImagePriorSpec> {
        match *self {
            PriorConfig::Generated {
                height,
                width,
                components,
                residual_std,
                correlation,
                exponent,
                seed,
                ..
            } => Some(ImagePriorSpec {
                height,
                width,
                components,
                residual_std,
                correlation,
                exponent,
                seed,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    /// Code dimension r of the PCA codec.
    #[serde(default = "d_latent_dim")]
    pub dim: usize,
    /// Prior draws used to fit the codec.
    #[serde(default = "d_fit")]
    pub fit_samples: usize,
}

fn d_latent_dim() -> usize {
    64
}
fn d_fit() -> usize {
    200
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            dim: d_latent_dim(),
            fit_samples: d_fit(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Operator in `kind:params` form, e.g. `sr:4` or `gaussian:9:1.5`.
    pub operator: String,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    DcdpV1,
    DcdpTweedie,
    DcdpLatentI,
    DcdpLatentIi,
    Dps,
    FidelityOnly,
}

impl MethodKind {
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::DcdpV1 => "DCDP-V1",
            MethodKind::DcdpTweedie => "DCDP-Tweedie",
            MethodKind::DcdpLatentI => "DCDP-Latent-I",
            MethodKind::DcdpLatentIi => "DCDP-Latent-II",
            MethodKind::Dps => "DPS",
            MethodKind::FidelityOnly => "fidelity-only",
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(self, MethodKind::DcdpLatentI | MethodKind::DcdpLatentIi)
    }
}

/// Purification backend named in a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendName {
    Ancestral,
    Ddim,
    Tweedie,
    FlowOde,
}

impl FromStr for BackendName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ancestral" => BackendName::Ancestral,
            "ddim" => BackendName::Ddim,
            "tweedie" => BackendName::Tweedie,
            "flow-ode" => BackendName::FlowOde,
            _ => bail!("unknown backend {s:?} (ancestral, ddim, tweedie, flow-ode)"),
        })
    }
}

impl fmt::Display for BackendName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendName::Ancestral => "ancestral",
            BackendName::Ddim => "ddim",
            BackendName::Tweedie => "tweedie",
            BackendName::FlowOde => "flow-ode",
        })
    }
}

/// One method column of the grid. Unset fields fall back to the preset of
/// the task's operator.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: Option<MethodKind>,
    /// Name in results.csv; defaults to the kind's label.
    pub name: Option<String>,
    pub iterations: Option<usize>,
    pub t_start: Option<usize>,
    pub t_end: Option<usize>,
    /// Explicit purification times, one per outer iteration.
    pub times: Option<Vec<usize>>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub total_steps: Option<usize>,
    pub backend: Option<String>,
    pub ddim_steps: Option<usize>,
    /// DPS guidance step η.
    pub eta: Option<f64>,
    /// DPS reverse steps; must equal the noise schedule length.
    pub steps: Option<usize>,
}

/// A method with its overrides applied to a task preset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMethod {
    pub name: String,
    pub kind: MethodKind,
    pub preset: Preset,
    pub times: Vec<usize>,
    pub backend: PurifyBackend,
    pub eta: f64,
    pub dps_steps: usize,
}

impl MethodConfig {
    pub fn kind(&self) -> Result<MethodKind> {
        self.kind.ok_or_else(|| anyhow!("missing field `kind`"))
    }

    pub fn name(&self) -> Result<String> {
        Ok(self.name.clone().unwrap_or_else(|| self.kind().map(|k| k.label().into()).unwrap_or_default()))
    }

    pub fn resolve(&self, op: &OperatorSpec) -> Result<ResolvedMethod> {
        let kind = self.kind()?;
        let mut p = tasks::preset_for(op);
        if let Some(v) = self.iterations {
            p.iterations = v;
        }
        if let Some(v) = self.t_start {
            p.t_start = v;
        }
        if let Some(v) = self.t_end {
            p.t_end = v;
        }
        if let Some(v) = self.learning_rate {
            p.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            p.momentum = v;
        }
        if let Some(v) = self.total_steps {
            p.total_steps = v;
        }
        if let Some(v) = self.ddim_steps {
            p.ddim_steps = v;
        }
        if let Some(times) = &self.times {
            if self.iterations.is_some() && times.len() != p.iterations {
                bail!("times has {} entries but iterations = {}", times.len(), p.iterations);
            }
            p.iterations = times.len();
        }
        if p.iterations == 0 {
            bail!("iterations must be positive");
        }
        if p.tau() == 0 {
            bail!("total_steps {} is smaller than iterations {}", p.total_steps, p.iterations);
        }
        p.fidelity::<f64>()?;
        let times = match &self.times {
            Some(t) => dcdp::PurificationSchedule::from_times(t.clone())?.times().to_vec(),
            None => p.schedule()?.times().to_vec(),
        };
        let default_backend = match kind {
            MethodKind::DcdpTweedie => BackendName::Tweedie,
            _ => BackendName::Ddim,
        };
        let backend_name = match &self.backend {
            Some(b) => b.parse()?,
            None => default_backend,
        };
        if self.backend.is_some() && !matches!(kind, MethodKind::DcdpV1 | MethodKind::DcdpTweedie) && !kind.is_latent() {
            bail!("backend does not apply to {}", kind.label());
        }
        let backend = match backend_name {
            BackendName::Ancestral => PurifyBackend::AncestralSde,
            BackendName::Ddim => PurifyBackend::Ddim { n_steps: p.ddim_steps },
            BackendName::Tweedie => PurifyBackend::Tweedie,
            BackendName::FlowOde => PurifyBackend::FlowOde { n_steps: p.ddim_steps },
        };
        let eta = self.eta.unwrap_or(tasks::DPS_ETA);
        if !(eta >= 0.0 && eta.is_finite()) {
            bail!("eta must be a nonnegative number");
        }
        let n = dcdp::NoiseSchedule::<f64>::ddpm().n_steps();
        let dps_steps = self.steps.unwrap_or(n);
        if dps_steps != n {
            bail!("steps: DPS runs the full {n}-step noise schedule, got {dps_steps}");
        }
        Ok(ResolvedMethod {
            name: self.name()?,
            kind,
            preset: p,
            times,
            backend,
            eta,
            dps_steps,
        })
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Reads and validates a config. Relative prior paths are resolved
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.prior {
            PriorConfig::Gmm { path, .. } | PriorConfig::Empirical { path, .. } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        cfg.validate().with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds == 0 {
            bail!("experiment.seeds must be positive");
        }
        if self.tasks.is_empty() {
            bail!("at least one [[task]] is required");
        }
        if self.methods.is_empty() {
            bail!("at least one [[method]] is required");
        }
        let shape = self.prior.shape()?;
        match &self.prior {
            PriorConfig::Gmm { path, .. } | PriorConfig::Empirical { path, .. } => {
                if !path.is_file() {
                    bail!("prior.path: {} does not exist", path.display());
                }
            }
            PriorConfig::Generated { components, .. } => {
                if *components == 0 {
                    bail!("prior.components must be positive");
                }
            }
        }
        if let PriorConfig::Empirical { bandwidth, .. } = self.prior {
            if bandwidth.is_nan() || bandwidth <= 0.0 {
                bail!("prior.bandwidth must be positive");
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            let op: OperatorSpec = t.operator.parse().map_err(|e| anyhow!("task[{i}].operator: {e}"))?;
            op.build::<f64>(shape).map_err(|e| anyhow!("task[{i}].operator: {e}"))?;
            if t.sigma.is_empty() || t.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                bail!("task[{i}].sigma must be a nonempty list of nonnegative numbers");
            }
            for (j, m) in self.methods.iter().enumerate() {
                m.resolve(&op).map_err(|e| anyhow!("method[{j}]: {e}"))?;
            }
        }
        let mut names: Vec<String> = self.methods.iter().map(|m| m.name()).collect::<Result<_>>()?;
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("method name {:?} is used twice", w[0]);
        }
        if self.methods.iter().any(|m| m.kind.is_some_and(MethodKind::is_latent)) {
            if self.latent.dim == 0 || self.latent.dim > shape.len() {
                bail!("latent.dim must be in 1..={}", shape.len());
            }
            if self.latent.fit_samples < self.latent.dim {
                bail!("latent.fit_samples must be at least latent.dim");
            }
        }
        Ok(())
    }
}
