//! Pinhole cameras with square pixels and analytic projection derivatives.

use nalgebra::{Matrix2x3, SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_model::Parameters;
use crate::math::{skew, so3_exp, so3_left_jacobian, vec3, Mat3, Vec3};

pub const DEPTH_EPSILON: f64 = 1e-6;

/// Camera parameter block order: rotation (3), translation (3), focal (1).
pub const CAMERA_PARAMS: usize = 7;

pub type Matrix2x7 = SMatrix<f64, 2, 7>;

/// Static description of one camera. Current extrinsics and focal live in
/// [`Parameters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub image_size: [u32; 2],
    /// Defaults to the image center when absent.
    #[serde(default)]
    pub principal_point: Option<[f64; 2]>,
    #[serde(default)]
    pub fix_rotation: bool,
    #[serde(default)]
    pub fix_translation: bool,
    #[serde(default)]
    pub fix_focal: bool,
}

impl CameraSpec {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            image_size: [width, height],
            principal_point: None,
            fix_rotation: false,
            fix_translation: false,
            fix_focal: false,
        }
    }

    pub fn principal(&self) -> [f64; 2] {
        self.principal_point.unwrap_or([
            self.image_size[0] as f64 / 2.0,
            self.image_size[1] as f64 / 2.0,
        ])
    }

    /// Per-parameter fixed flags in camera block order.
    pub fn fixed_mask(&self) -> [bool; CAMERA_PARAMS] {
        let (r, t, f) = (self.fix_rotation, self.fix_translation, self.fix_focal);
        [r, r, r, t, t, t, f]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraSpec>,
}

impl CameraRig {
    pub fn count(&self) -> usize {
        self.cameras.len()
    }

    /// Single camera with identity extrinsics held fixed; only focal may move.
    pub fn monocular(width: u32, height: u32, fix_focal: bool) -> Self {
        Self {
            cameras: vec![CameraSpec {
                fix_rotation: true,
                fix_translation: true,
                fix_focal,
                ..CameraSpec::new(width, height)
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Domain("rig has no cameras".into()));
        }
        if self.cameras.iter().any(|c| c.image_size[0] == 0 || c.image_size[1] == 0) {
            return Err(Error::Domain("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn camera(&self, params: &Parameters, index: usize) -> Camera {
        Camera {
            rotation: vec3(params.cam_rot[index]),
            translation: vec3(params.cam_trans[index]),
            focal: params.focal[index],
            principal: self.cameras[index].principal(),
        }
    }

    pub fn project(&self, params: &Parameters, cam: usize, point: &Vec3) -> Result<Vector2<f64>> {
        self.camera(params, cam).project(point).map_err(|e| e.with_camera(cam))
    }

    /// Projection derivatives with fixed camera parameters zeroed.
    pub fn project_jacobian(
        &self,
        params: &Parameters,
        cam: usize,
        point: &Vec3,
    ) -> Result<ProjectionJacobian> {
        let mut j = self
            .camera(params, cam)
            .project_jacobian(point)
            .map_err(|e| e.with_camera(cam))?;
        for (c, fixed) in self.cameras[cam].fixed_mask().iter().enumerate() {
            if *fixed {
                j.camera.column_mut(c).fill(0.0);
            }
        }
        Ok(j)
    }
}

impl Error {
    fn with_camera(self, cam: usize) -> Self {
        match self {
            Error::BehindCamera { depth, .. } => Error::BehindCamera { camera: cam, depth },
            other => other,
        }
    }
}

/// Current values of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Vec3,
    pub translation: Vec3,
    pub focal: f64,
    pub principal: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct ProjectionJacobian {
    pub pixel: Vector2<f64>,
    /// d(pixel)/d(world point).
    pub point: Matrix2x3<f64>,
    /// d(pixel)/d(rotation, translation, focal).
    pub camera: Matrix2x7,
}

impl Camera {
    pub fn rotation_matrix(&self) -> Mat3 {
        so3_exp(&self.rotation)
    }

    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation_matrix() * point + self.translation
    }

    fn check_depth(pc: &Vec3) -> Result<()> {
        if !(pc.z > DEPTH_EPSILON) {
            return Err(Error::BehindCamera { camera: 0, depth: pc.z });
        }
        Ok(())
    }

    pub fn project(&self, point: &Vec3) -> Result<Vector2<f64>> {
        let pc = self.to_camera(point);
        Self::check_depth(&pc)?;
        Ok(Vector2::new(
            self.focal * pc.x / pc.z + self.principal[0],
            self.focal * pc.y / pc.z + self.principal[1],
        ))
    }

    pub fn project_jacobian(&self, point: &Vec3) -> Result<ProjectionJacobian> {
        let rot = self.rotation_matrix();
        let rp = rot * point;
        let pc = rp + self.translation;
        Self::check_depth(&pc)?;
        let iz = 1.0 / pc.z;
        let (u, v) = (pc.x * iz, pc.y * iz);
        let f = self.focal;
        let d_pc = Matrix2x3::new(f * iz, 0.0, -f * u * iz, 0.0, f * iz, -f * v * iz);
        let d_rot = d_pc * (-skew(&rp) * so3_left_jacobian(&self.rotation));
        let mut camera = Matrix2x7::zeros();
        camera.fixed_columns_mut::<3>(0).copy_from(&d_rot);
        camera.fixed_columns_mut::<3>(3).copy_from(&d_pc);
        camera[(0, 6)] = u;
        camera[(1, 6)] = v;
        Ok(ProjectionJacobian {
            pixel: Vector2::new(f * u + self.principal[0], f * v + self.principal[1]),
            point: d_pc * rot,
            camera,
        })
    }
}

/// Focal length in pixels giving the requested horizontal field of view.
pub fn focal_from_hfov(hfov_degrees: f64, image_width_px: f64) -> Result<f64> {
    if !(hfov_degrees > 0.0 && hfov_degrees < 180.0) {
        return Err(Error::Domain(format!(
            "horizontal FOV must lie in (0, 180) degrees, got {hfov_degrees}"
        )));
    }
    if !(image_width_px > 0.0) {
        return Err(Error::Domain("image width must be positive".into()));
    }
    let f = (image_width_px / 2.0) / (hfov_degrees.to_radians() / 2.0).tan();
    if !f.is_finite() {
        return Err(Error::Domain("focal length is unbounded".into()));
    }
    Ok(f)
}
