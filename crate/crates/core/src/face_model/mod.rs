//! Rigged blendshape head: bind-pose blendshapes, joint regression and
//! linear blend skinning, with analytic derivatives.
//!
//! Parameter conventions: `theta` for one frame holds one axis-angle vector per
//! joint (joint 0 is the root) followed by the root translation, so its
//! length is `3K + 3`. Local Jacobian columns are ordered `[beta | psi | theta]`.

mod kinematics;
pub mod toy;

pub use kinematics::{Kinematics, PointJacobian, PoseEval};

use nalgebra::{Matrix3xX, U3, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{vec3, Vec3};

pub const ASSET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Influence {
    pub joint: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkBinding {
    pub vertex: usize,
    /// Per-landmark loss weight.
    pub weight: f64,
}

/// Sphere attached to an eye joint that eyelid skin vertices must stay outside of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeballProxy {
    pub joint: usize,
    /// Sphere center relative to the joint's bind position.
    pub center_offset: [f64; 3],
    pub radius: f64,
    pub guarded_vertices: Vec<usize>,
}

/// Half-space `n . x + p <= 0` in the hull's joint-local frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexHull {
    pub joint: usize,
    pub planes: Vec<Plane>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeethProxy {
    pub hulls: Vec<ConvexHull>,
    pub lip_vertices: Vec<usize>,
}

/// The rigged head asset. Bases are stored row-major with `3 * count` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAsset {
    pub vertex_count: usize,
    pub n_beta: usize,
    pub n_psi: usize,
    pub joint_count: usize,
    pub base_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub identity_basis: Vec<f64>,
    pub expression_basis: Vec<f64>,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<Option<usize>>,
    pub base_joints: Vec<[f64; 3]>,
    pub joint_identity_basis: Vec<f64>,
    /// Sparse skinning weights, one influence list per vertex.
    pub skinning: Vec<Vec<Influence>>,
    pub landmark_bindings: Vec<LandmarkBinding>,
    pub eyeballs: Vec<EyeballProxy>,
    pub teeth: TeethProxy,
}

fn rows3(data: &[f64], index: usize, cols: usize) -> Matrix3xX<f64> {
    let start = 3 * index * cols;
    Matrix3xX::from_row_slice_generic(U3, Dyn(cols), &data[start..start + 3 * cols])
}

impl ModelAsset {
    pub fn theta_len(&self) -> usize {
        3 * self.joint_count + 3
    }

    /// Columns of the local Jacobian `[beta | psi | theta]`.
    pub fn local_param_count(&self) -> usize {
        self.n_beta + self.n_psi + self.theta_len()
    }

    pub fn identity_rows(&self, vertex: usize) -> Matrix3xX<f64> {
        rows3(&self.identity_basis, vertex, self.n_beta)
    }

    pub fn expression_rows(&self, vertex: usize) -> Matrix3xX<f64> {
        rows3(&self.expression_basis, vertex, self.n_psi)
    }

    pub fn joint_identity_rows(&self, joint: usize) -> Matrix3xX<f64> {
        rows3(&self.joint_identity_basis, joint, self.n_beta)
    }

    /// Ancestors of `joint` from the root down to and including `joint`.
    pub fn chain(&self, joint: usize) -> Vec<usize> {
        let mut chain = vec![joint];
        let mut cur = joint;
        while let Some(p) = self.joint_parents[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// Checks every structural invariant of the asset.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count;
        let k = self.joint_count;
        check_dim("base_vertices", n, self.base_vertices.len())?;
        check_dim("identity_basis", 3 * n * self.n_beta, self.identity_basis.len())?;
        check_dim("expression_basis", 3 * n * self.n_psi, self.expression_basis.len())?;
        check_dim("joint_parents", k, self.joint_parents.len())?;
        check_dim("joint_names", k, self.joint_names.len())?;
        check_dim("base_joints", k, self.base_joints.len())?;
        check_dim("joint_identity_basis", 3 * k * self.n_beta, self.joint_identity_basis.len())?;
        check_dim("skinning", n, self.skinning.len())?;
        if k == 0 {
            return Err(Error::InvalidAsset("no joints".into()));
        }
        let roots = self.joint_parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || self.joint_parents[0].is_some() {
            return Err(Error::InvalidAsset("joint 0 must be the only root".into()));
        }
        for (j, p) in self.joint_parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j {
                    return Err(Error::InvalidAsset(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        for (v, infl) in self.skinning.iter().enumerate() {
            if infl.is_empty() || infl.len() > 4 {
                return Err(Error::InvalidAsset(format!(
                    "vertex {v} has {} influences (1..=4 allowed)",
                    infl.len()
                )));
            }
            let mut sum = 0.0;
            for i in infl {
                if i.joint >= k || !(i.weight >= 0.0) {
                    return Err(Error::InvalidAsset(format!("vertex {v} has a bad influence")));
                }
                sum += i.weight;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidAsset(format!("vertex {v} weights sum to {sum}")));
            }
        }
        for f in &self.faces {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidAsset("face references a missing vertex".into()));
            }
        }
        for b in &self.landmark_bindings {
            if b.vertex >= n || !(b.weight >= 0.0) {
                return Err(Error::InvalidAsset("bad landmark binding".into()));
            }
        }
        for e in &self.eyeballs {
            if e.joint >= k || !(e.radius > 0.0) || e.guarded_vertices.iter().any(|&v| v >= n) {
                return Err(Error::InvalidAsset("bad eyeball proxy".into()));
            }
        }
        for h in &self.teeth.hulls {
            if h.joint >= k {
                return Err(Error::InvalidAsset("hull attached to a missing joint".into()));
            }
            for p in &h.planes {
                if (vec3(p.normal).norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidAsset("hull normal is not unit length".into()));
                }
            }
        }
        if self.teeth.lip_vertices.iter().any(|&v| v >= n) {
            return Err(Error::InvalidAsset("lip vertex out of range".into()));
        }
        Ok(())
    }
}

/// Model parameters for `F` frames and `C` cameras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub beta: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub cam_rot: Vec<[f64; 3]>,
    pub cam_trans: Vec<[f64; 3]>,
    pub focal: Vec<f64>,
}

impl Parameters {
    pub fn zeros(asset: &ModelAsset, frames: usize, cameras: usize, focal: f64) -> Self {
        Self {
            beta: vec![0.0; asset.n_beta],
            psi: vec![vec![0.0; asset.n_psi]; frames],
            theta: vec![vec![0.0; asset.theta_len()]; frames],
            cam_rot: vec![[0.0; 3]; cameras],
            cam_trans: vec![[0.0; 3]; cameras],
            focal: vec![focal; cameras],
        }
    }

    pub fn frames(&self) -> usize {
        self.psi.len()
    }

    pub fn cameras(&self) -> usize {
        self.focal.len()
    }

    pub fn root_translation(&self, frame: usize) -> Vec3 {
        let t = &self.theta[frame];
        let n = t.len();
        Vec3::new(t[n - 3], t[n - 2], t[n - 1])
    }

    pub fn validate(&self, asset: &ModelAsset) -> Result<()> {
        check_dim("beta", asset.n_beta, self.beta.len())?;
        let f = self.psi.len();
        if f == 0 {
            return Err(Error::InvalidParameters("at least one frame is required".into()));
        }
        check_dim("theta frames", f, self.theta.len())?;
        for p in &self.psi {
            check_dim("psi", asset.n_psi, p.len())?;
        }
        for t in &self.theta {
            check_dim("theta", asset.theta_len(), t.len())?;
        }
        let c = self.focal.len();
        if c == 0 {
            return Err(Error::InvalidParameters("at least one camera is required".into()));
        }
        check_dim("cam_rot", c, self.cam_rot.len())?;
        check_dim("cam_trans", c, self.cam_trans.len())?;
        if self.focal.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidParameters("focal length must be positive".into()));
        }
        let finite = self.beta.iter().chain(self.psi.iter().flatten()).chain(self.theta.iter().flatten())
            .chain(self.cam_rot.iter().flatten()).chain(self.cam_trans.iter().flatten()).chain(&self.focal)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameters("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Bind-pose vertices `V0 + B_id beta + B_exp psi`.
pub fn bind_mesh(asset: &ModelAsset, beta: &[f64], psi: &[f64]) -> Result<Vec<Vec3>> {
    check_dim("beta", asset.n_beta, beta.len())?;
    check_dim("psi", asset.n_psi, psi.len())?;
    Ok((0..asset.vertex_count).map(|v| bind_vertex(asset, v, beta, psi)).collect())
}

pub(crate) fn bind_vertex(asset: &ModelAsset, v: usize, beta: &[f64], psi: &[f64]) -> Vec3 {
    let mut p = vec3(asset.base_vertices[v]);
    let nb = asset.n_beta;
    let ne = asset.n_psi;
    for a in 0..3 {
        let row = 3 * v + a;
        let ib = &asset.identity_basis[row * nb..(row + 1) * nb];
        let eb = &asset.expression_basis[row * ne..(row + 1) * ne];
        p[a] += ib.iter().zip(beta).map(|(x, y)| x * y).sum::<f64>()
            + eb.iter().zip(psi).map(|(x, y)| x * y).sum::<f64>();
    }
    p
}

/// Bind-pose joint locations `J0 + B_joint beta`.
pub fn bind_joints(asset: &ModelAsset, beta: &[f64]) -> Result<Vec<Vec3>> {
    check_dim("beta", asset.n_beta, beta.len())?;
    let nb = asset.n_beta;
    Ok((0..asset.joint_count)
        .map(|k| {
            let mut p = vec3(asset.base_joints[k]);
            for a in 0..3 {
                let row = 3 * k + a;
                let jb = &asset.joint_identity_basis[row * nb..(row + 1) * nb];
                p[a] += jb.iter().zip(beta).map(|(x, y)| x * y).sum::<f64>();
            }
            p
        })
        .collect())
}

/// Linear blend skinning of bind-pose vertices for one frame's pose.
pub fn skin(
    asset: &ModelAsset,
    bind_vertices: &[Vec3],
    bind_joint_positions: &[Vec3],
    theta: &[f64],
) -> Result<Vec<Vec3>> {
    check_dim("bind vertices", asset.vertex_count, bind_vertices.len())?;
    check_dim("bind joints", asset.joint_count, bind_joint_positions.len())?;
    check_dim("theta", asset.theta_len(), theta.len())?;
    let kin = Kinematics::new(&asset.joint_parents, bind_joint_positions, theta);
    Ok(bind_vertices
        .iter()
        .zip(&asset.skinning)
        .map(|(v, infl)| kin.skin_point(v, infl))
        .collect())
}

/// Posed mesh `L(T(beta, psi), theta, J(beta); W)` for one frame.
pub fn mesh_generate(asset: &ModelAsset, params: &Parameters, frame: usize) -> Result<Vec<Vec3>> {
    if frame >= params.frames() {
        return Err(Error::IndexOutOfRange {
            what: "frame",
            index: frame,
            len: params.frames(),
        });
    }
    let bind = bind_mesh(asset, &params.beta, &params.psi[frame])?;
    let joints = bind_joints(asset, &params.beta)?;
    skin(asset, &bind, &joints, &params.theta[frame])
}

/// Analytic derivatives of every landmark-bound vertex with respect to
/// `[beta | psi_frame | theta_frame]`.
pub fn mesh_jacobian(
    asset: &ModelAsset,
    params: &Parameters,
    frame: usize,
) -> Result<Vec<PointJacobian>> {
    if frame >= params.frames() {
        return Err(Error::IndexOutOfRange {
            what: "frame",
            index: frame,
            len: params.frames(),
        });
    }
    params.validate(asset)?;
    let pose = PoseEval::new(asset, &params.beta, &params.theta[frame]);
    Ok(asset
        .landmark_bindings
        .iter()
        .map(|b| pose.vertex_jacobian(asset, b.vertex, &params.beta, &params.psi[frame]))
        .collect())
}

/// Structural dependency sets, computed once per asset.
#[derive(Clone, Debug)]
pub struct Structure {
    pub chains: Vec<Vec<usize>>,
    /// Joints whose rotation can move each vertex.
    pub vertex_joints: Vec<Vec<usize>>,
    /// Identity coefficients with a structurally nonzero effect on each vertex.
    pub vertex_beta: Vec<Vec<usize>>,
    pub vertex_psi: Vec<Vec<usize>>,
    /// Joints in the chain of each joint and identity support of its pivot.
    pub joint_beta: Vec<Vec<usize>>,
}

fn column_support(data: &[f64], rows: std::ops::Range<usize>, cols: usize) -> Vec<bool> {
    let mut s = vec![false; cols];
    for r in rows {
        for (c, flag) in s.iter_mut().enumerate() {
            if data[r * cols + c] != 0.0 {
                *flag = true;
            }
        }
    }
    s
}

fn to_indices(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect()
}

impl Structure {
    pub fn new(asset: &ModelAsset) -> Self {
        let k = asset.joint_count;
        let nb = asset.n_beta;
        let chains: Vec<Vec<usize>> = (0..k).map(|j| asset.chain(j)).collect();
        let joint_own: Vec<Vec<bool>> = (0..k)
            .map(|j| column_support(&asset.joint_identity_basis, 3 * j..3 * j + 3, nb))
            .collect();
        // pivot of joint j depends on identity through every joint in its chain
        let joint_beta_flags: Vec<Vec<bool>> = chains
            .iter()
            .map(|chain| {
                let mut s = vec![false; nb];
                for &m in chain {
                    for c in 0..nb {
                        s[c] |= joint_own[m][c];
                    }
                }
                s
            })
            .collect();
        let mut vertex_joints = Vec::with_capacity(asset.vertex_count);
        let mut vertex_beta = Vec::with_capacity(asset.vertex_count);
        let mut vertex_psi = Vec::with_capacity(asset.vertex_count);
        for v in 0..asset.vertex_count {
            let mut joints = vec![false; k];
            let mut beta = column_support(&asset.identity_basis, 3 * v..3 * v + 3, nb);
            for infl in &asset.skinning[v] {
                if infl.weight == 0.0 {
                    continue;
                }
                for &m in &chains[infl.joint] {
                    joints[m] = true;
                }
                for c in 0..nb {
                    beta[c] |= joint_beta_flags[infl.joint][c];
                }
            }
            vertex_joints.push(to_indices(&joints));
            vertex_beta.push(to_indices(&beta));
            vertex_psi.push(to_indices(&column_support(
                &asset.expression_basis,
                3 * v..3 * v + 3,
                asset.n_psi,
            )));
        }
        Self {
            chains,
            vertex_joints,
            vertex_beta,
            vertex_psi,
            joint_beta: joint_beta_flags.iter().map(|f| to_indices(f)).collect(),
        }
    }
}
