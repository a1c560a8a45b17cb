//! Run configuration, read from TOML. Every field is optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facefit::bench::BenchConfig;
use facefit::energy::EnergyConfig;
use facefit::face_model::toy::ToyAssetSpec;
use facefit::landmarks::NoiseSpec;
use facefit::scenario::{Perturbation, SceneSpec};
use facefit::solver::{Mode, SolveOptions};
use serde::{Deserialize, Serialize};

/// File locations. Relative paths resolve against the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub asset: PathBuf,
    pub prior: PathBuf,
    pub rig: PathBuf,
    pub observations: PathBuf,
    pub ground_truth: PathBuf,
    /// Fit output, and the input of `eval`.
    pub parameters: PathBuf,
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub meshes: PathBuf,
    pub bench: PathBuf,
    /// Starting parameters when `fit.init = "file"`.
    pub init: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            asset: "asset.json".into(),
            prior: "prior.json".into(),
            rig: "rig.json".into(),
            observations: "observations.json".into(),
            ground_truth: "ground_truth.json".into(),
            parameters: "fit.json".into(),
            report: "report.json".into(),
            metrics: "metrics.json".into(),
            meshes: "meshes".into(),
            bench: "bench.csv".into(),
            init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssetConfig {
    #[serde(flatten)]
    pub spec: ToyAssetSpec,
    pub prior_components: usize,
}

impl Default for AssetConfig {
    fn default() -> Self {
        Self { spec: ToyAssetSpec::default(), prior_components: facefit::experiments::PRIOR_COMPONENTS }
    }
}

/// Where the solver starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Ground truth with identity and expression zeroed (known cameras and pose).
    #[default]
    Neutral,
    /// Ground truth plus seeded Gaussian noise on identity, expression and pose.
    Perturbed,
    Truth,
    /// `paths.init`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub init: InitKind,
    pub perturbation: Perturbation,
    pub export_meshes: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { init: InitKind::Neutral, perturbation: Perturbation::default(), export_meshes: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    #[serde(flatten)]
    pub matrix: BenchConfig,
    /// The benchmark builds its own asset so that 703 landmarks are available.
    pub asset: ToyAssetSpec,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { matrix: BenchConfig::default(), asset: ToyAssetSpec::dense() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not embedded in outputs: moving a run's files must not change them.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    /// Worker threads for residual evaluation; all cores when absent.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    pub paths: Paths,
    pub asset: AssetConfig,
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
    pub energy: EnergyConfig,
    pub solve: SolveOptions,
    pub fit: FitConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: ".".into(),
            workers: None,
            paths: Paths::default(),
            asset: AssetConfig::default(),
            scene: SceneSpec::default(),
            noise: NoiseSpec::default(),
            energy: EnergyConfig::default(),
            solve: SolveOptions::default(),
            fit: FitConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if let Some(m) = overrides.mode {
            config.solve.mode = m;
        }
        if let Some(w) = overrides.workers {
            config.workers = Some(w);
        }
        if let Some(d) = &overrides.output_dir {
            config.output_dir = d.clone();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.solve.validate()?;
        if self.workers == Some(0) {
            bail!("--workers must be at least 1");
        }
        if self.scene.frames == 0 || self.scene.cameras == 0 {
            bail!("scene needs at least one frame and one camera");
        }
        if self.asset.prior_components == 0 {
            bail!("prior needs at least one component");
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }

    /// Input files must exist before a command starts writing.
    pub fn require(&self, paths: &[&Path]) -> Result<()> {
        for p in paths {
            let full = self.resolve(p);
            if !full.is_file() {
                bail!("required input {} does not exist", full.display());
            }
        }
        Ok(())
    }
}
