//! Shared fixtures for unit tests.

use crate::face_model::{toy, ModelAsset, Parameters};
use crate::landmarks::{synth_observe, NoiseSpec, ObservationSet};
use crate::priors::{toy_prior, GmmPrior};
use crate::scenario::{build_scene, SceneSpec};
use crate::camera::CameraRig;

pub(crate) fn small_asset() -> ModelAsset {
    toy::generate(
        &toy::ToyAssetSpec {
            rings: 10,
            segments: 14,
            n_beta: 6,
            n_psi: 8,
            landmarks: 40,
        },
        3,
    )
    .unwrap()
}

pub(crate) struct Problem {
    pub asset: ModelAsset,
    pub prior: GmmPrior,
    pub rig: CameraRig,
    pub truth: Parameters,
    pub obs: ObservationSet,
}

pub(crate) fn problem(frames: usize, cameras: usize, noise: &NoiseSpec, seed: u64) -> Problem {
    let asset = small_asset();
    let prior = toy_prior(asset.n_beta, 2, 11).unwrap();
    let spec = SceneSpec {
        frames,
        cameras,
        free_extrinsics: true,
        fix_focal: false,
        ..SceneSpec::default()
    };
    let scene = build_scene(&asset, &prior, &spec, seed).unwrap();
    let obs = synth_observe(&asset, &scene.truth, &scene.rig, noise, seed).unwrap();
    Problem { asset, prior, rig: scene.rig, truth: scene.truth, obs }
}
