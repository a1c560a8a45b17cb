//! Probabilistic landmark observations, the Gaussian negative log-likelihood
//! loss, and a synthetic observation generator.

use std::collections::HashSet;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::face_model::{ModelAsset, Parameters, PoseEval};
use crate::rng::{stream, Stream};

/// Smallest admissible reported uncertainty, in pixels.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkObservation {
    pub frame: usize,
    pub camera: usize,
    pub landmark: usize,
    pub mu: [f64; 2],
    pub sigma: f64,
}

impl LandmarkObservation {
    pub fn mu(&self) -> Vector2<f64> {
        Vector2::new(self.mu[0], self.mu[1])
    }
}

/// Observations in pixels for `frames x cameras x landmarks`; absent triples
/// are allowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub frames: usize,
    pub cameras: usize,
    pub landmarks: usize,
    pub image_sizes: Vec<[u32; 2]>,
    pub observations: Vec<LandmarkObservation>,
    #[serde(skip)]
    pub ground_truth: Option<Parameters>,
}

impl ObservationSet {
    pub fn validate(&self, sigma_floor: f64) -> Result<()> {
        if self.image_sizes.len() != self.cameras {
            return Err(Error::InvalidObservation(format!(
                "{} image sizes for {} cameras",
                self.image_sizes.len(),
                self.cameras
            )));
        }
        let mut seen = HashSet::with_capacity(self.observations.len());
        for o in &self.observations {
            if o.frame >= self.frames || o.camera >= self.cameras || o.landmark >= self.landmarks {
                return Err(Error::InvalidObservation(format!(
                    "observation ({}, {}, {}) out of bounds",
                    o.frame, o.camera, o.landmark
                )));
            }
            if !(o.sigma >= sigma_floor) || !o.mu[0].is_finite() || !o.mu[1].is_finite() {
                return Err(Error::InvalidObservation(format!(
                    "observation ({}, {}, {}) has sigma {} below the floor {sigma_floor} or a non-finite mean",
                    o.frame, o.camera, o.landmark, o.sigma
                )));
            }
            if !seen.insert((o.frame, o.camera, o.landmark)) {
                return Err(Error::InvalidObservation(format!(
                    "duplicate observation ({}, {}, {})",
                    o.frame, o.camera, o.landmark
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the first `count` landmarks of the scheme.
    pub fn restrict_landmarks(&self, count: usize) -> Self {
        let mut out = self.clone();
        out.landmarks = count.min(self.landmarks);
        out.observations.retain(|o| o.landmark < count);
        out
    }

    /// Keeps only the observations from `camera`, renumbered as camera 0.
    pub fn single_camera(&self, camera: usize) -> Self {
        let mut out = self.clone();
        out.cameras = 1;
        out.image_sizes = vec![self.image_sizes[camera]];
        out.observations = self
            .observations
            .iter()
            .filter(|o| o.camera == camera)
            .map(|o| LandmarkObservation { camera: 0, ..*o })
            .collect();
        out
    }

    /// Replaces every reported sigma with `sigma`.
    pub fn with_constant_sigma(&self, sigma: f64) -> Self {
        let mut out = self.clone();
        for o in &mut out.observations {
            o.sigma = sigma;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnllLoss {
    pub total: f64,
    pub per_landmark: Vec<f64>,
}

/// Per-landmark term `log(sigma^2) + |mu - mu'|^2 / (2 sigma^2)`.
pub fn gnll_term(mu: &Vector2<f64>, sigma: f64, truth: &Vector2<f64>) -> f64 {
    let s2 = sigma * sigma;
    s2.ln() + (mu - truth).norm_squared() / (2.0 * s2)
}

/// Weighted GNLL loss over a set of predicted `(mu, sigma)` against labels.
pub fn gnll_loss(
    predicted: &[(Vector2<f64>, f64)],
    truth: &[Vector2<f64>],
    weights: &[f64],
) -> Result<GnllLoss> {
    if predicted.len() != truth.len() || predicted.len() != weights.len() {
        return Err(Error::Dimension {
            what: "gnll inputs".into(),
            expected: predicted.len(),
            got: truth.len().min(weights.len()),
        });
    }
    let mut per_landmark = Vec::with_capacity(predicted.len());
    for (((mu, sigma), t), w) in predicted.iter().zip(truth).zip(weights) {
        if !(*sigma > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        per_landmark.push(w * gnll_term(mu, *sigma, t));
    }
    Ok(GnllLoss {
        total: per_landmark.iter().sum(),
        per_landmark,
    })
}

/// How the true noise scale `s` of each observation is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseScale {
    None,
    Constant { sigma: f64 },
    Uniform { min: f64, max: f64 },
    /// Two-level heteroscedastic noise: `high` with probability `high_fraction`.
    Mixture { low: f64, high: f64, high_fraction: f64 },
}

/// What uncertainty the generator reports alongside each mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaReport {
    /// Report the true noise scale.
    Calibrated,
    /// Report one constant regardless of the true scale.
    Constant { sigma: f64 },
    /// Observations flagged occluded get noise and reported sigma of
    /// `inflation` times the largest visible scale.
    Occluded { fraction: f64, inflation: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub scale: NoiseScale,
    pub report: SigmaReport,
    pub sigma_floor: f64,
}

/// One pixel of isotropic noise, reported exactly.
impl Default for NoiseSpec {
    fn default() -> Self {
        Self::calibrated(NoiseScale::Constant { sigma: 1.0 })
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            scale: NoiseScale::None,
            report: SigmaReport::Calibrated,
            sigma_floor: SIGMA_FLOOR,
        }
    }

    pub fn calibrated(scale: NoiseScale) -> Self {
        Self {
            scale,
            report: SigmaReport::Calibrated,
            sigma_floor: SIGMA_FLOOR,
        }
    }

    fn max_scale(&self) -> f64 {
        match self.scale {
            NoiseScale::None => 0.0,
            NoiseScale::Constant { sigma } => sigma,
            NoiseScale::Uniform { max, .. } => max,
            NoiseScale::Mixture { low, high, .. } => low.max(high),
        }
    }
}

/// Projects every landmark of the asset through every camera and perturbs
/// the result according to `noise`. Behind-camera landmarks are dropped.
pub fn synth_observe(
    asset: &ModelAsset,
    params: &Parameters,
    rig: &CameraRig,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    params.validate(asset)?;
    if params.cameras() != rig.count() {
        return Err(Error::Dimension {
            what: "cameras".into(),
            expected: rig.count(),
            got: params.cameras(),
        });
    }
    let mut rng = stream(seed, Stream::Noise);
    let max_scale = noise.max_scale();
    let mut observations = Vec::new();
    let mut dropped = 0usize;
    for frame in 0..params.frames() {
        let pose = PoseEval::new(asset, &params.beta, &params.theta[frame]);
        let points: Vec<_> = asset
            .landmark_bindings
            .iter()
            .map(|b| pose.vertex_position(asset, b.vertex, &params.beta, &params.psi[frame]))
            .collect();
        for camera in 0..rig.count() {
            for (landmark, p) in points.iter().enumerate() {
                let scale = match noise.scale {
                    NoiseScale::None => 0.0,
                    NoiseScale::Constant { sigma } => sigma,
                    NoiseScale::Uniform { min, max } => rng.random_range(min..=max),
                    NoiseScale::Mixture { low, high, high_fraction } => {
                        if rng.random::<f64>() < high_fraction {
                            high
                        } else {
                            low
                        }
                    }
                };
                let (actual, reported) = match noise.report {
                    SigmaReport::Calibrated => (scale, scale),
                    SigmaReport::Constant { sigma } => (scale, sigma),
                    SigmaReport::Occluded { fraction, inflation } => {
                        if rng.random::<f64>() < fraction {
                            let s = inflation * max_scale;
                            (s, s)
                        } else {
                            (scale, scale)
                        }
                    }
                };
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                let exact = match rig.project(params, camera, p) {
                    Ok(x) => x,
                    Err(_) => {
                        dropped += 1;
                        continue;
                    }
                };
                observations.push(LandmarkObservation {
                    frame,
                    camera,
                    landmark,
                    mu: [exact.x + actual * nx, exact.y + actual * ny],
                    sigma: reported.max(noise.sigma_floor),
                });
            }
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} behind-camera landmarks during synthesis");
    }
    Ok(ObservationSet {
        frames: params.frames(),
        cameras: rig.count(),
        landmarks: asset.landmark_bindings.len(),
        image_sizes: rig.cameras.iter().map(|c| c.image_size).collect(),
        observations,
        ground_truth: Some(params.clone()),
    })
}
