//! Flat parameter vector layout: `[beta | psi frame-major | theta frame-major | cameras]`.

use nalgebra::DVector;

use crate::camera::{CameraRig, CAMERA_PARAMS};
use crate::face_model::{ModelAsset, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_beta: usize,
    pub n_psi: usize,
    pub n_theta: usize,
    pub frames: usize,
    pub cameras: usize,
}

/// What a flat index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Beta(usize),
    Psi { frame: usize, col: usize },
    Theta { frame: usize, col: usize },
    Camera { camera: usize, col: usize },
}

impl ParamLayout {
    pub fn new(asset: &ModelAsset, frames: usize, cameras: usize) -> Self {
        Self {
            n_beta: asset.n_beta,
            n_psi: asset.n_psi,
            n_theta: asset.theta_len(),
            frames,
            cameras,
        }
    }

    pub fn len(&self) -> usize {
        self.n_beta + self.frames * (self.n_psi + self.n_theta) + self.cameras * CAMERA_PARAMS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta(&self, col: usize) -> usize {
        col
    }

    pub fn psi(&self, frame: usize, col: usize) -> usize {
        self.n_beta + frame * self.n_psi + col
    }

    pub fn theta(&self, frame: usize, col: usize) -> usize {
        self.n_beta + self.frames * self.n_psi + frame * self.n_theta + col
    }

    pub fn camera(&self, camera: usize, col: usize) -> usize {
        self.n_beta + self.frames * (self.n_psi + self.n_theta) + camera * CAMERA_PARAMS + col
    }

    /// Flat index of column `col` of a frame's local `[beta | psi | theta]` block.
    pub fn local(&self, frame: usize, col: usize) -> usize {
        if col < self.n_beta {
            self.beta(col)
        } else if col < self.n_beta + self.n_psi {
            self.psi(frame, col - self.n_beta)
        } else {
            self.theta(frame, col - self.n_beta - self.n_psi)
        }
    }

    pub fn decode(&self, index: usize) -> ParamRef {
        let psi0 = self.n_beta;
        let theta0 = psi0 + self.frames * self.n_psi;
        let cam0 = theta0 + self.frames * self.n_theta;
        if index < psi0 {
            ParamRef::Beta(index)
        } else if index < theta0 {
            let i = index - psi0;
            ParamRef::Psi { frame: i / self.n_psi, col: i % self.n_psi }
        } else if index < cam0 {
            let i = index - theta0;
            ParamRef::Theta { frame: i / self.n_theta, col: i % self.n_theta }
        } else {
            let i = index - cam0;
            ParamRef::Camera { camera: i / CAMERA_PARAMS, col: i % CAMERA_PARAMS }
        }
    }

    pub fn flatten(&self, p: &Parameters) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        v.as_mut_slice()[..self.n_beta].copy_from_slice(&p.beta);
        for f in 0..self.frames {
            for c in 0..self.n_psi {
                v[self.psi(f, c)] = p.psi[f][c];
            }
            for c in 0..self.n_theta {
                v[self.theta(f, c)] = p.theta[f][c];
            }
        }
        for j in 0..self.cameras {
            for c in 0..3 {
                v[self.camera(j, c)] = p.cam_rot[j][c];
                v[self.camera(j, 3 + c)] = p.cam_trans[j][c];
            }
            v[self.camera(j, 6)] = p.focal[j];
        }
        v
    }

    pub fn unflatten(&self, v: &DVector<f64>) -> Parameters {
        Parameters {
            beta: v.as_slice()[..self.n_beta].to_vec(),
            psi: (0..self.frames)
                .map(|f| (0..self.n_psi).map(|c| v[self.psi(f, c)]).collect())
                .collect(),
            theta: (0..self.frames)
                .map(|f| (0..self.n_theta).map(|c| v[self.theta(f, c)]).collect())
                .collect(),
            cam_rot: (0..self.cameras)
                .map(|j| [v[self.camera(j, 0)], v[self.camera(j, 1)], v[self.camera(j, 2)]])
                .collect(),
            cam_trans: (0..self.cameras)
                .map(|j| [v[self.camera(j, 3)], v[self.camera(j, 4)], v[self.camera(j, 5)]])
                .collect(),
            focal: (0..self.cameras).map(|j| v[self.camera(j, 6)]).collect(),
        }
    }
}

/// Which face parameter groups are held constant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FixMask {
    pub identity: bool,
    pub expression: bool,
    pub pose: bool,
    /// Hold every camera parameter constant regardless of the rig flags.
    pub cameras: bool,
}

/// Bijection between free flat indices and positions in the LM system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    to_active: Vec<Option<usize>>,
    indices: Vec<usize>,
}

impl ActiveSet {
    pub fn from_mask(mask: &[bool]) -> Self {
        let mut to_active = vec![None; mask.len()];
        let mut indices = Vec::new();
        for (i, m) in mask.iter().enumerate() {
            if *m {
                to_active[i] = Some(indices.len());
                indices.push(i);
            }
        }
        Self { to_active, indices }
    }

    /// Free parameters for fitting `frames`. Camera 0's extrinsics anchor the
    /// gauge and are never free.
    pub fn for_scope(
        layout: &ParamLayout,
        rig: &CameraRig,
        fix: &FixMask,
        frames: &[usize],
        identity_free: bool,
        cameras_free: bool,
    ) -> Self {
        let mut mask = vec![false; layout.len()];
        if identity_free && !fix.identity {
            for c in 0..layout.n_beta {
                mask[layout.beta(c)] = true;
            }
        }
        for &f in frames {
            if !fix.expression {
                for c in 0..layout.n_psi {
                    mask[layout.psi(f, c)] = true;
                }
            }
            if !fix.pose {
                for c in 0..layout.n_theta {
                    mask[layout.theta(f, c)] = true;
                }
            }
        }
        if cameras_free && !fix.cameras {
            for (j, spec) in rig.cameras.iter().enumerate() {
                for (c, fixed) in spec.fixed_mask().iter().enumerate() {
                    let anchor = j == 0 && c < 6;
                    if !fixed && !anchor {
                        mask[layout.camera(j, c)] = true;
                    }
                }
            }
        }
        Self::from_mask(&mask)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn active(&self, global: usize) -> Option<usize> {
        self.to_active[global]
    }

    pub fn global(&self, active: usize) -> usize {
        self.indices[active]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraSpec;

    fn layout() -> ParamLayout {
        ParamLayout { n_beta: 3, n_psi: 2, n_theta: 6, frames: 3, cameras: 2 }
    }

    #[test]
    fn decode_inverts_every_index() {
        let l = layout();
        for i in 0..l.len() {
            let back = match l.decode(i) {
                ParamRef::Beta(c) => l.beta(c),
                ParamRef::Psi { frame, col } => l.psi(frame, col),
                ParamRef::Theta { frame, col } => l.theta(frame, col),
                ParamRef::Camera { camera, col } => l.camera(camera, col),
            };
            assert_eq!(back, i);
        }
        assert_eq!(l.len(), 3 + 3 * 8 + 14);
    }

    #[test]
    fn gauge_anchor_keeps_first_camera_extrinsics_fixed() {
        let l = layout();
        let rig = CameraRig { cameras: vec![CameraSpec::new(64, 48), CameraSpec::new(64, 48)] };
        let a = ActiveSet::for_scope(&l, &rig, &FixMask::default(), &[0, 1, 2], true, true);
        for c in 0..6 {
            assert!(a.active(l.camera(0, c)).is_none());
            assert!(a.active(l.camera(1, c)).is_some());
        }
        assert!(a.active(l.camera(0, 6)).is_some());
        let tracking = ActiveSet::for_scope(&l, &rig, &FixMask::default(), &[1], false, false);
        assert_eq!(tracking.len(), 8);
        assert!(tracking.indices().iter().all(|&g| matches!(
            l.decode(g),
            ParamRef::Psi { frame: 1, .. } | ParamRef::Theta { frame: 1, .. }
        )));
    }
}
