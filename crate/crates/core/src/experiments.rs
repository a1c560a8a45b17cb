//! Seeded synthetic experiments shared by the benchmark command and the
//! acceptance tests.

use serde::{Deserialize, Serialize};

use crate::camera::{focal_from_hfov, CameraRig};
use crate::energy::{EnergyConfig, EnergyModel, Term};
use crate::error::Result;
use crate::face_model::{toy, ModelAsset, Parameters};
use crate::landmarks::{synth_observe, NoiseScale, NoiseSpec, ObservationSet};
use crate::metrics::{parameter_errors, reprojection_rmse, vertex_rmse};
use crate::priors::{toy_prior, GmmPrior};
use crate::scenario::{build_scene, perturb, Perturbation, Scene, SceneSpec};
use crate::solver::{fit_model, total_energy, SolveOptions, SolveReport};

/// Prior components used by the toy pipeline.
pub const PRIOR_COMPONENTS: usize = 4;

/// An asset and an identity prior fitted to samples in its coefficient space.
pub struct Setup {
    pub asset: ModelAsset,
    pub prior: GmmPrior,
}

impl Setup {
    pub fn new(spec: &toy::ToyAssetSpec, seed: u64) -> Result<Self> {
        let asset = toy::generate(spec, seed)?;
        let prior = toy_prior(asset.n_beta, PRIOR_COMPONENTS, seed)?;
        Ok(Self { asset, prior })
    }

    /// The default 602-vertex asset.
    pub fn toy(seed: u64) -> Result<Self> {
        Self::new(&toy::ToyAssetSpec::default(), seed)
    }

    /// The denser asset that supports 703 landmarks.
    pub fn dense(seed: u64) -> Result<Self> {
        Self::new(&toy::ToyAssetSpec::dense(), seed)
    }

    pub fn scene(&self, spec: &SceneSpec, seed: u64) -> Result<Scene> {
        build_scene(&self.asset, &self.prior, spec, seed)
    }

    pub fn model<'a>(&'a self, rig: &'a CameraRig, obs: &'a ObservationSet, config: EnergyConfig) -> Result<EnergyModel<'a>> {
        EnergyModel::new(&self.asset, rig, obs, Some(&self.prior), config)
    }

    pub fn fit(
        &self,
        rig: &CameraRig,
        obs: &ObservationSet,
        config: EnergyConfig,
        options: &SolveOptions,
        init: &Parameters,
    ) -> Result<(Parameters, SolveReport)> {
        fit_model(&self.model(rig, obs, config)?, options, init)
    }
}

/// The generating scene's parameters with identity and expression reset to
/// zero and the known cameras kept: the usual starting point when only
/// landmarks are available.
pub fn neutral_init(truth: &Parameters) -> Parameters {
    let mut init = truth.clone();
    init.beta.iter_mut().for_each(|b| *b = 0.0);
    for f in 0..init.frames() {
        init.psi[f].iter_mut().for_each(|v| *v = 0.0);
    }
    init
}

/// Energy invariants checked on one fitted problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invariants {
    /// `|E - sum_t E_t| / sum_t |E_t|`, where each `E_t` comes from a model
    /// with only term `t` enabled.
    pub additivity: f64,
    /// Total energy at the generating parameters against noiseless
    /// observations of them, landmarks only.
    pub exact_data_energy: f64,
    /// Every accepted step of every report strictly decreased the energy.
    pub monotone: bool,
}

impl Invariants {
    pub fn holds(&self, additivity_tol: f64, zero_tol: f64) -> bool {
        self.additivity <= additivity_tol && self.exact_data_energy <= zero_tol && self.monotone
    }
}

/// Accepted energies strictly decrease within each solved scope, starting
/// from the scope's initial energy. Offline fits have one scope; tracking
/// fits have one per frame.
pub fn accepted_steps_decrease(report: &SolveReport) -> bool {
    let mut current: Option<(Option<usize>, f64)> = None;
    for it in report.iterations.iter().filter(|it| it.accepted) {
        let previous = match current {
            Some((frame, e)) if frame == it.frame => e,
            _ => match report.scope_start_energies.get(it.frame.unwrap_or(0)) {
                Some(&e) => e,
                None => return false,
            },
        };
        if !(it.energy < previous) {
            return false;
        }
        current = Some((it.frame, it.energy));
    }
    true
}

pub fn invariants(
    setup: &Setup,
    scene: &Scene,
    obs: &ObservationSet,
    config: EnergyConfig,
    fit: &Parameters,
    reports: &[&SolveReport],
) -> Result<Invariants> {
    let full = total_energy(&setup.model(&scene.rig, obs, config)?, fit)?;
    let mut parts = 0.0;
    let mut magnitude = 0.0;
    for t in Term::ALL {
        let e = total_energy(&setup.model(&scene.rig, obs, config.only(t))?, fit)?.get(t);
        parts += e;
        magnitude += e.abs();
    }
    let additivity = if magnitude > 0.0 { (full.total() - parts).abs() / magnitude } else { 0.0 };
    let exact = synth_observe(&setup.asset, &scene.truth, &scene.rig, &NoiseSpec::noiseless(), 0)?
        .restrict_landmarks(obs.landmarks);
    let exact_data_energy = total_energy(&setup.model(&scene.rig, &exact, EnergyConfig::data_only())?, &scene.truth)?.total();
    Ok(Invariants {
        additivity,
        exact_data_energy,
        monotone: reports.iter().all(|r| accepted_steps_decrease(r)),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundTrip {
    pub reprojection_rmse: f64,
    pub vertex_rmse: f64,
    pub final_energy: f64,
    pub accepted_steps: usize,
    pub invariants: Invariants,
}

/// Noiseless monocular observations, perturbed initialization, landmarks only.
pub fn round_trip(setup: &Setup, seed: u64) -> Result<(RoundTrip, SolveReport)> {
    let scene = setup.scene(&SceneSpec::default(), seed)?;
    let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &NoiseSpec::noiseless(), seed)?;
    let init = perturb(&scene.truth, &Perturbation::default(), seed);
    let config = EnergyConfig::data_only();
    let (fit, report) = setup.fit(&scene.rig, &obs, config, &SolveOptions::default(), &init)?;
    Ok((
        RoundTrip {
            reprojection_rmse: reprojection_rmse(&setup.asset, &scene.rig, &fit, &obs)?,
            vertex_rmse: vertex_rmse(&setup.asset, &fit, &scene.truth)?,
            final_energy: report.final_energy,
            accepted_steps: report.accepted_steps,
            invariants: invariants(setup, &scene, &obs, config, &fit, &[&report])?,
        },
        report,
    ))
}

/// Heteroscedastic noise: most landmarks are precise, a fraction is much worse.
pub fn heteroscedastic_noise() -> NoiseScale {
    NoiseScale::Mixture { low: 0.5, high: 8.0, high_fraction: 0.25 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SigmaAblation {
    pub with_sigma: f64,
    pub constant_sigma: f64,
    pub reports: Vec<SolveReport>,
    pub invariants: Vec<Invariants>,
}

/// Fits the same noisy observations twice: once with the calibrated per
/// landmark sigma, once with every sigma replaced by the RMS noise scale.
pub fn sigma_ablation(setup: &Setup, seed: u64) -> Result<SigmaAblation> {
    let scale = heteroscedastic_noise();
    let scene = setup.scene(&SceneSpec::default(), seed)?;
    let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &NoiseSpec::calibrated(scale), seed)?;
    let rms = (obs.observations.iter().map(|o| o.sigma * o.sigma).sum::<f64>() / obs.observations.len() as f64).sqrt();
    let constant = obs.with_constant_sigma(rms);
    let init = neutral_init(&scene.truth);
    let options = SolveOptions::default();
    let config = EnergyConfig::default();
    let (a, ra) = setup.fit(&scene.rig, &obs, config, &options, &init)?;
    let (b, rb) = setup.fit(&scene.rig, &constant, config, &options, &init)?;
    let invariants = vec![
        invariants(setup, &scene, &obs, config, &a, &[&ra])?,
        invariants(setup, &scene, &constant, config, &b, &[&rb])?,
    ];
    Ok(SigmaAblation {
        with_sigma: vertex_rmse(&setup.asset, &a, &scene.truth)?,
        constant_sigma: vertex_rmse(&setup.asset, &b, &scene.truth)?,
        reports: vec![ra, rb],
        invariants,
    })
}

/// Landmark scheme sizes compared by the landmark-count experiment.
pub const LANDMARK_COUNTS: [usize; 3] = [68, 320, 703];

/// Noise level of the landmark-count experiment, in pixels.
pub const LANDMARK_COUNT_NOISE: f64 = 2.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandmarkCount {
    /// Vertex RMSE per scheme size.
    pub errors: Vec<f64>,
    pub reports: Vec<SolveReport>,
    pub invariants: Vec<Invariants>,
}

/// Vertex RMSE for each scheme size on one scene. Schemes are prefixes of the
/// asset's landmark order and share one noise realization.
pub fn landmark_count(setup: &Setup, counts: &[usize], seed: u64) -> Result<LandmarkCount> {
    let scene = setup.scene(&SceneSpec::default(), seed)?;
    let noise = NoiseSpec::calibrated(NoiseScale::Constant { sigma: LANDMARK_COUNT_NOISE });
    let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &noise, seed)?;
    let init = neutral_init(&scene.truth);
    let config = EnergyConfig::default();
    let mut out = LandmarkCount { errors: Vec::new(), reports: Vec::new(), invariants: Vec::new() };
    for &n in counts {
        let sub = obs.restrict_landmarks(n);
        let (fit, report) = setup.fit(&scene.rig, &sub, config, &SolveOptions::default(), &init)?;
        out.errors.push(vertex_rmse(&setup.asset, &fit, &scene.truth)?);
        out.invariants.push(invariants(setup, &scene, &sub, config, &fit, &[&report])?);
        out.reports.push(report);
    }
    Ok(out)
}

pub const MULTIVIEW_CAMERAS: usize = 4;

pub fn multiview_spec() -> SceneSpec {
    SceneSpec {
        cameras: MULTIVIEW_CAMERAS,
        ring_spread_degrees: 120.0,
        ..SceneSpec::default()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiView {
    /// Identity coefficient error of the joint fit.
    pub joint: f64,
    /// Identity coefficient error of each single-view fit.
    pub single: Vec<f64>,
    pub reports: Vec<SolveReport>,
    pub invariants: Vec<Invariants>,
}

impl MultiView {
    pub fn single_mean(&self) -> f64 {
        self.single.iter().sum::<f64>() / self.single.len() as f64
    }
}

/// One joint fit over all ring cameras against independent fits per camera.
/// Cameras are calibrated (known extrinsics and focal) in both cases.
pub fn multiview(setup: &Setup, seed: u64) -> Result<MultiView> {
    let spec = multiview_spec();
    let scene = setup.scene(&spec, seed)?;
    let noise = NoiseSpec::calibrated(NoiseScale::Constant { sigma: LANDMARK_COUNT_NOISE });
    let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &noise, seed)?;
    let init = neutral_init(&scene.truth);
    let options = SolveOptions::default();
    let config = EnergyConfig::default();
    let (fit, report) = setup.fit(&scene.rig, &obs, config, &options, &init)?;
    let mut invs = vec![invariants(setup, &scene, &obs, config, &fit, &[&report])?];
    let mut reports = vec![report];
    let joint = parameter_errors(&fit, &scene.truth)?.beta_norm;
    let mut single = Vec::new();
    for j in 0..spec.cameras {
        let rig = CameraRig { cameras: vec![scene.rig.cameras[j].clone()] };
        let view = obs.single_camera(j);
        let mut truth = scene.truth.clone();
        truth.cam_rot = vec![scene.truth.cam_rot[j]];
        truth.cam_trans = vec![scene.truth.cam_trans[j]];
        truth.focal = vec![scene.truth.focal[j]];
        let (fit, report) = setup.fit(&rig, &view, config, &options, &neutral_init(&truth))?;
        single.push(parameter_errors(&fit, &truth)?.beta_norm);
        let view_scene = Scene { rig, truth };
        invs.push(invariants(setup, &view_scene, &view, config, &fit, &[&report])?);
        reports.push(report);
    }
    Ok(MultiView { joint, single, reports, invariants: invs })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FocalRecovery {
    pub truth: f64,
    pub init: f64,
    pub recovered: f64,
}

impl FocalRecovery {
    pub fn relative_error(&self) -> f64 {
        ((self.recovered - self.truth) / self.truth).abs()
    }
}

/// Monocular single frame with unknown focal initialized at a 45 degree field
/// of view, noiseless observations.
pub fn focal_recovery(setup: &Setup, seed: u64) -> Result<FocalRecovery> {
    let spec = SceneSpec { fix_focal: false, distance: 40.0, hfov_degrees: 38.0, ..SceneSpec::default() };
    let scene = setup.scene(&spec, seed)?;
    let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &NoiseSpec::noiseless(), seed)?;
    let mut init = perturb(&scene.truth, &Perturbation::default(), seed);
    let f0 = focal_from_hfov(45.0, spec.image_size[0] as f64)?;
    init.focal = vec![f0];
    let (fit, _) = setup.fit(&scene.rig, &obs, EnergyConfig::data_only(), &SolveOptions::default(), &init)?;
    Ok(FocalRecovery { truth: scene.truth.focal[0], init: f0, recovered: fit.focal[0] })
}
