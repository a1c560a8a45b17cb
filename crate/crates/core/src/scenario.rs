//! Seeded synthetic scenes: camera rigs, ground-truth parameters and
//! perturbed initializations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{focal_from_hfov, CameraRig, CameraSpec};
use crate::error::Result;
use crate::face_model::{ModelAsset, Parameters};
use crate::math::{so3_log, Mat3, Vec3};
use crate::priors::GmmPrior;
use crate::rng::{stream, Stream};

/// Half-widths of the uniform ranges ground-truth parameters are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseRanges {
    pub expression: f64,
    /// Non-root joint rotations, radians per axis.
    pub joint_rotation: f64,
    pub root_rotation: f64,
    pub root_translation: f64,
}

impl PoseRanges {
    /// Small per-frame steps for smooth synthetic sequences.
    pub fn smooth_steps() -> Self {
        Self {
            expression: 0.05,
            joint_rotation: 0.01,
            root_rotation: 0.01,
            root_translation: 0.1,
        }
    }
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            expression: 0.5,
            joint_rotation: 0.1,
            root_rotation: 0.2,
            root_translation: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub frames: usize,
    pub cameras: usize,
    pub image_size: [u32; 2],
    /// Horizontal field of view of the generating cameras.
    pub hfov_degrees: f64,
    /// Distance from each camera to the head center.
    pub distance: f64,
    /// Total yaw spread of the camera ring.
    pub ring_spread_degrees: f64,
    pub ranges: PoseRanges,
    pub fix_focal: bool,
    /// Let camera extrinsics (other than the anchor) vary during fitting.
    pub free_extrinsics: bool,
    /// When set, frames after the first follow a random walk with these
    /// per-frame step ranges instead of being drawn independently.
    pub frame_step: Option<PoseRanges>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 1,
            cameras: 1,
            image_size: [640, 480],
            hfov_degrees: 40.0,
            distance: 60.0,
            ring_spread_degrees: 90.0,
            ranges: PoseRanges::default(),
            fix_focal: true,
            free_extrinsics: false,
            frame_step: None,
        }
    }
}

/// A rig plus ground-truth parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rig: CameraRig,
    pub truth: Parameters,
}

/// Yaw of each camera on the ring; a single camera looks straight down `+z`.
pub fn ring_yaws(spec: &SceneSpec) -> Vec<f64> {
    if spec.cameras == 1 {
        return vec![0.0];
    }
    let spread = spec.ring_spread_degrees.to_radians();
    (0..spec.cameras)
        .map(|j| spread * (j as f64 / (spec.cameras - 1) as f64 - 0.5))
        .collect()
}

/// World-to-camera extrinsics of a camera at yaw `a` on a ring of radius
/// `distance` around `center`, looking at `center`.
pub fn ring_extrinsics(a: f64, distance: f64, center: &Vec3) -> ([f64; 3], [f64; 3]) {
    let (s, c) = a.sin_cos();
    let r = Mat3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c);
    let eye = center + Vec3::new(-s, 0.0, -c) * distance;
    let t = -(r * eye);
    let w = so3_log(&r);
    ([w.x, w.y, w.z], [t.x, t.y, t.z])
}

pub fn build_rig(spec: &SceneSpec) -> CameraRig {
    let fixed_extrinsics = !spec.free_extrinsics;
    CameraRig {
        cameras: (0..spec.cameras)
            .map(|_| CameraSpec {
                fix_rotation: fixed_extrinsics,
                fix_translation: fixed_extrinsics,
                fix_focal: spec.fix_focal,
                ..CameraSpec::new(spec.image_size[0], spec.image_size[1])
            })
            .collect(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Samples a scene: identity from the prior, expression and pose uniformly
/// within `spec.ranges`, cameras on a ring around the head.
pub fn build_scene(asset: &ModelAsset, prior: &GmmPrior, spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let mut rng = stream(seed, Stream::Params);
    let focal = focal_from_hfov(spec.hfov_degrees, spec.image_size[0] as f64)?;
    let mut truth = Parameters::zeros(asset, spec.frames, spec.cameras, focal);
    truth.beta = prior.sample(&mut rng).iter().copied().collect();
    let k = asset.joint_count;
    let r = spec.ranges;
    for f in 0..spec.frames {
        if let (Some(step), true) = (spec.frame_step, f > 0) {
            let mut psi = truth.psi[f - 1].clone();
            for v in psi.iter_mut() {
                *v += uniform(&mut rng, step.expression);
            }
            let mut theta = truth.theta[f - 1].clone();
            for (c, v) in theta.iter_mut().enumerate() {
                let half = if c < 3 {
                    step.root_rotation
                } else if c < 3 * k {
                    step.joint_rotation
                } else {
                    step.root_translation
                };
                *v += uniform(&mut rng, half);
            }
            truth.psi[f] = psi;
            truth.theta[f] = theta;
            continue;
        }
        for v in truth.psi[f].iter_mut() {
            *v = uniform(&mut rng, r.expression);
        }
        let theta = &mut truth.theta[f];
        for a in 0..3 {
            theta[a] = uniform(&mut rng, r.root_rotation);
        }
        for c in 3..3 * k {
            theta[c] = uniform(&mut rng, r.joint_rotation);
        }
        theta[3 * k] = uniform(&mut rng, r.root_translation);
        theta[3 * k + 1] = uniform(&mut rng, r.root_translation);
        theta[3 * k + 2] = spec.distance + uniform(&mut rng, r.root_translation);
    }
    let center = Vec3::new(0.0, 0.0, spec.distance);
    for (j, a) in ring_yaws(spec).into_iter().enumerate() {
        let (w, t) = ring_extrinsics(a, spec.distance, &center);
        truth.cam_rot[j] = w;
        truth.cam_trans[j] = t;
    }
    Ok(Scene { rig: build_rig(spec), truth })
}

/// Standard deviations of the initialization perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub beta: f64,
    pub psi: f64,
    pub rotation: f64,
    pub translation: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            beta: 0.05,
            psi: 0.05,
            rotation: 0.02,
            translation: 0.5,
        }
    }
}

/// Adds Gaussian noise to identity, expression and pose. Cameras are untouched.
pub fn perturb(params: &Parameters, p: &Perturbation, seed: u64) -> Parameters {
    let mut rng = stream(seed, Stream::Init);
    let mut draw = |sd: f64| -> f64 {
        if sd > 0.0 {
            Normal::new(0.0, sd).expect("positive deviation").sample(&mut rng)
        } else {
            0.0
        }
    };
    let mut out = params.clone();
    for b in out.beta.iter_mut() {
        *b += draw(p.beta);
    }
    for f in 0..out.frames() {
        for v in out.psi[f].iter_mut() {
            *v += draw(p.psi);
        }
        let n = out.theta[f].len();
        for c in 0..n {
            out.theta[f][c] += draw(if c < n - 3 { p.rotation } else { p.translation });
        }
    }
    out
}
