//! Fit quality: rigidly aligned vertex errors, reprojection error and
//! per-parameter-group errors.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{check_dim, Result};
use crate::face_model::{bind_mesh, mesh_generate, ModelAsset, Parameters};
use crate::landmarks::ObservationSet;
use crate::math::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }
}

/// Closed-form least-squares rotation and translation taking `source` onto
/// `target` (no scaling). Requires equal, nonzero lengths.
pub fn procrustes(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    check_dim("procrustes target", source.len(), target.len())?;
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vec3>() / n;
    let ct = target.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let mut d = Mat3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = vt.transpose() * d * u.transpose();
    Ok(RigidTransform { rotation, translation: ct - rotation * cs })
}

/// RMSE between `a` rigidly aligned onto `b`, and `b`.
pub fn aligned_rmse(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(aligned_squared_sum(a, b)?.sqrt() / (a.len() as f64).sqrt())
}

fn aligned_squared_sum(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    let t = procrustes(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (t.apply(x) - y).norm_squared()).sum())
}

/// Posed-mesh vertex RMSE with a separate rigid alignment per frame, pooled
/// over all frames.
pub fn vertex_rmse(asset: &ModelAsset, fit: &Parameters, truth: &Parameters) -> Result<f64> {
    check_dim("frames", truth.frames(), fit.frames())?;
    let mut sum = 0.0;
    for f in 0..fit.frames() {
        let a = mesh_generate(asset, fit, f)?;
        let b = mesh_generate(asset, truth, f)?;
        sum += aligned_squared_sum(&a, &b)?;
    }
    Ok((sum / (fit.frames() * asset.vertex_count) as f64).sqrt())
}

/// Aligned RMSE of the neutral identity shapes (no expression, rest pose).
pub fn identity_shape_rmse(asset: &ModelAsset, fit_beta: &[f64], truth_beta: &[f64]) -> Result<f64> {
    let zero = vec![0.0; asset.n_psi];
    aligned_rmse(&bind_mesh(asset, fit_beta, &zero)?, &bind_mesh(asset, truth_beta, &zero)?)
}

/// Root-mean-square pixel distance between projected landmarks and the
/// observed means.
pub fn reprojection_rmse(asset: &ModelAsset, rig: &CameraRig, params: &Parameters, obs: &ObservationSet) -> Result<f64> {
    if obs.observations.is_empty() {
        return Ok(0.0);
    }
    let meshes = (0..params.frames())
        .map(|f| mesh_generate(asset, params, f))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    for o in &obs.observations {
        let x = meshes[o.frame][asset.landmark_bindings[o.landmark].vertex];
        let p = rig.project(params, o.camera, &x)?;
        sum += (p - o.mu()).norm_squared();
    }
    Ok((sum / obs.observations.len() as f64).sqrt())
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterErrors {
    /// Euclidean norm of the identity coefficient error.
    pub beta_norm: f64,
    pub beta_rms: f64,
    pub psi_rms: f64,
    pub rotation_rms: f64,
    pub translation_rms: f64,
    /// Largest relative focal error over cameras.
    pub focal_relative: f64,
}

pub fn parameter_errors(fit: &Parameters, truth: &Parameters) -> Result<ParameterErrors> {
    check_dim("beta", truth.beta.len(), fit.beta.len())?;
    check_dim("frames", truth.frames(), fit.frames())?;
    check_dim("cameras", truth.cameras(), fit.cameras())?;
    let db = || fit.beta.iter().zip(&truth.beta).map(|(a, b)| a - b);
    let n = fit.theta[0].len();
    let theta_pairs = || fit.theta.iter().zip(&truth.theta);
    Ok(ParameterErrors {
        beta_norm: db().map(|d| d * d).sum::<f64>().sqrt(),
        beta_rms: rms(db()),
        psi_rms: rms(fit.psi.iter().flatten().zip(truth.psi.iter().flatten()).map(|(a, b)| a - b)),
        rotation_rms: rms(theta_pairs().flat_map(|(a, b)| (0..n - 3).map(move |c| a[c] - b[c]))),
        translation_rms: rms(theta_pairs().flat_map(|(a, b)| (n - 3..n).map(move |c| a[c] - b[c]))),
        focal_relative: fit
            .focal
            .iter()
            .zip(&truth.focal)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub vertex_rmse: f64,
    pub identity_shape_rmse: f64,
    /// Present when observations were supplied.
    pub reprojection_rmse: Option<f64>,
    pub parameters: ParameterErrors,
}

pub fn evaluate(
    asset: &ModelAsset,
    rig: &CameraRig,
    fit: &Parameters,
    truth: &Parameters,
    obs: Option<&ObservationSet>,
) -> Result<FitMetrics> {
    Ok(FitMetrics {
        vertex_rmse: vertex_rmse(asset, fit, truth)?,
        identity_shape_rmse: identity_shape_rmse(asset, &fit.beta, &truth.beta)?,
        reprojection_rmse: obs.map(|o| reprojection_rmse(asset, rig, fit, o)).transpose()?,
        parameters: parameter_errors(fit, truth)?,
    })
}
