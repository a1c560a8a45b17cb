//! Browser bindings for the toy pipeline. The page keeps one [`Demo`]
//! around; every call returns JSON for the drawing code.

use facefit::camera::CameraRig;
use facefit::energy::{EnergyConfig, TermEnergies};
use facefit::experiments::{neutral_init, Setup};
use facefit::face_model::{mesh_generate, Parameters};
use facefit::landmarks::{gnll_term, synth_observe, NoiseScale, NoiseSpec, ObservationSet};
use facefit::metrics::{reprojection_rmse, vertex_rmse};
use nalgebra::Vector2;
use facefit::scenario::{Scene, SceneSpec};
use facefit::solver::SolveOptions;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct Observations {
    pub width: u32,
    pub height: u32,
    /// `[x, y, sigma]` per observed landmark.
    pub observed: Vec<[f64; 3]>,
    /// Noise-free projections of the same landmarks.
    pub truth: Vec<[f64; 2]>,
    pub edges: Vec<[usize; 2]>,
    /// Ground-truth mesh vertices in pixels.
    pub mesh: Vec<[f64; 2]>,
}

#[derive(Serialize)]
pub struct FitSummary {
    pub use_sigma: bool,
    pub constant_sigma: f64,
    pub vertex_rmse: f64,
    pub reprojection_rmse: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub terms: TermEnergies,
    pub accepted_steps: usize,
    pub milliseconds: f64,
    pub termination: String,
    /// Fitted landmark projections, aligned with `Observations::observed`.
    pub landmarks: Vec<[f64; 2]>,
    /// Fitted mesh vertices in pixels.
    pub mesh: Vec<[f64; 2]>,
}

#[derive(Serialize)]
pub struct GnllCurve {
    pub sigma: Vec<f64>,
    pub loss: Vec<f64>,
    /// Grid point with the lowest loss.
    pub argmin: f64,
    pub closed_form: f64,
}

/// Per-landmark loss against sigma for a fixed residual `r`, with the minimizer
/// `r / sqrt(2)`.
pub fn gnll_curve_data(r: f64, sigma_min: f64, sigma_max: f64, samples: usize) -> facefit::Result<GnllCurve> {
    if !(sigma_min > 0.0 && sigma_max > sigma_min && samples >= 2 && r >= 0.0) {
        return Err(facefit::Error::Domain("need 0 < sigma_min < sigma_max, r >= 0 and two samples".into()));
    }
    let mu = Vector2::new(r, 0.0);
    let zero = Vector2::zeros();
    let ratio = (sigma_max / sigma_min).powf(1.0 / (samples - 1) as f64);
    let sigma: Vec<f64> = (0..samples).map(|i| sigma_min * ratio.powi(i as i32)).collect();
    let loss: Vec<f64> = sigma.iter().map(|&s| gnll_term(&mu, s, &zero)).collect();
    let best = loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    Ok(GnllCurve { argmin: sigma[best], closed_form: r / 2f64.sqrt(), sigma, loss })
}

fn project_mesh(setup: &Setup, rig: &CameraRig, params: &Parameters) -> facefit::Result<Vec<Vec<[f64; 2]>>> {
    let verts = mesh_generate(&setup.asset, params, 0)?;
    Ok(vec![verts
        .iter()
        .map(|x| rig.project(params, 0, x).map_or([f64::NAN; 2], |p| [p.x, p.y]))
        .collect()])
}

pub struct DemoState {
    setup: Setup,
    scene: Option<(Scene, ObservationSet)>,
}

impl DemoState {
    pub fn new(seed: u64) -> facefit::Result<Self> {
        Ok(Self { setup: Setup::toy(seed)?, scene: None })
    }

    pub fn synthesize(&mut self, seed: u64, low: f64, high: f64, high_fraction: f64) -> facefit::Result<Observations> {
        if !(low > 0.0 && high > 0.0 && (0.0..=1.0).contains(&high_fraction)) {
            return Err(facefit::Error::Domain("noise levels must be positive, fraction in [0, 1]".into()));
        }
        let spec = SceneSpec::default();
        let scene = self.setup.scene(&spec, seed)?;
        let noise = NoiseSpec::calibrated(NoiseScale::Mixture { low, high, high_fraction });
        let obs = synth_observe(&self.setup.asset, &scene.truth, &scene.rig, &noise, seed)?;
        let clean = synth_observe(&self.setup.asset, &scene.truth, &scene.rig, &NoiseSpec::noiseless(), seed)?;
        let truth_at = |landmark: usize| {
            clean.observations.iter().find(|o| o.landmark == landmark).map_or([f64::NAN; 2], |o| o.mu)
        };
        let out = Observations {
            width: spec.image_size[0],
            height: spec.image_size[1],
            observed: obs.observations.iter().map(|o| [o.mu[0], o.mu[1], o.sigma]).collect(),
            truth: obs.observations.iter().map(|o| truth_at(o.landmark)).collect(),
            edges: edges(&self.setup.asset.faces),
            mesh: project_mesh(&self.setup, &scene.rig, &scene.truth)?.remove(0),
        };
        self.scene = Some((scene, obs));
        Ok(out)
    }

    /// Fits the current observations from a neutral start. Without sigma every
    /// observation gets the RMS of the reported uncertainties.
    pub fn fit(&self, use_sigma: bool) -> facefit::Result<FitSummary> {
        let Some((scene, obs)) = &self.scene else {
            return Err(facefit::Error::Domain("synthesize observations first".into()));
        };
        let n = obs.observations.len().max(1) as f64;
        let rms = (obs.observations.iter().map(|o| o.sigma * o.sigma).sum::<f64>() / n).sqrt();
        let used = if use_sigma { obs.clone() } else { obs.with_constant_sigma(rms) };
        let init = neutral_init(&scene.truth);
        let (params, report) =
            self.setup.fit(&scene.rig, &used, EnergyConfig::default(), &SolveOptions::default(), &init)?;
        let verts = mesh_generate(&self.setup.asset, &params, 0)?;
        let landmarks = obs
            .observations
            .iter()
            .map(|o| {
                let x = verts[self.setup.asset.landmark_bindings[o.landmark].vertex];
                scene.rig.project(&params, o.camera, &x).map_or([f64::NAN; 2], |p| [p.x, p.y])
            })
            .collect();
        Ok(FitSummary {
            use_sigma,
            constant_sigma: rms,
            vertex_rmse: vertex_rmse(&self.setup.asset, &params, &scene.truth)?,
            reprojection_rmse: reprojection_rmse(&self.setup.asset, &scene.rig, &params, obs)?,
            initial_energy: report.initial_energy,
            final_energy: report.final_energy,
            terms: report.final_terms,
            accepted_steps: report.accepted_steps,
            milliseconds: 1e3 * report.times.total,
            termination: report.termination().map_or("none".into(), |t| format!("{t:?}")),
            landmarks,
            mesh: project_mesh(&self.setup, &scene.rig, &params)?.remove(0),
        })
    }
}

fn edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut out: Vec<[usize; 2]> = faces
        .iter()
        .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
        .map(|[a, b]| [a.min(b), a.max(b)])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn js<T: Serialize>(value: facefit::Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        DemoState::new(seed.into()).map(|state| Demo { state }).map_err(|e| JsError::new(&e.to_string()))
    }

    /// JSON [`Observations`].
    pub fn synthesize(&mut self, seed: u32, low: f64, high: f64, high_fraction: f64) -> Result<String, JsError> {
        js(self.state.synthesize(seed.into(), low, high, high_fraction))
    }

    /// JSON [`FitSummary`].
    pub fn fit(&self, use_sigma: bool) -> Result<String, JsError> {
        js(self.state.fit(use_sigma))
    }
}

/// JSON [`GnllCurve`].
#[wasm_bindgen]
pub fn gnll_curve(r: f64, sigma_min: f64, sigma_max: f64, samples: usize) -> Result<String, JsError> {
    js(gnll_curve_data(r, sigma_min, sigma_max, samples))
}
