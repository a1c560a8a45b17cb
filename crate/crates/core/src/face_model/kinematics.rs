use nalgebra::Matrix3xX;

use super::{bind_joints, bind_vertex, Influence, ModelAsset};
use crate::math::{skew, so3_exp, so3_left_jacobian, Mat3, Vec3};

/// Forward kinematics of one frame. Joint `k` maps bind-space points by
/// `x -> world_rot[k] x + world_offset[k]`.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub parents: Vec<Option<usize>>,
    pub bind_joints: Vec<Vec3>,
    pub world_rot: Vec<Mat3>,
    pub world_offset: Vec<Vec3>,
    /// Posed pivot of each joint.
    pub pivots: Vec<Vec3>,
    /// Parent rotation times the left Jacobian of the local rotation.
    pub rot_jacobian: Vec<Mat3>,
    /// Rotation of the parent frame (identity for the root).
    pub parent_rot: Vec<Mat3>,
    pub translation: Vec3,
}

impl Kinematics {
    pub fn new(parents: &[Option<usize>], bind_joints: &[Vec3], theta: &[f64]) -> Self {
        let k = bind_joints.len();
        let n = theta.len();
        let translation = Vec3::new(theta[n - 3], theta[n - 2], theta[n - 1]);
        let mut world_rot = Vec::with_capacity(k);
        let mut world_offset = Vec::with_capacity(k);
        let mut pivots = Vec::with_capacity(k);
        let mut rot_jacobian = Vec::with_capacity(k);
        let mut parent_rot = Vec::with_capacity(k);
        for j in 0..k {
            let r = Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
            let local = so3_exp(&r);
            let (mp, cp) = match parents[j] {
                Some(p) => (world_rot[p], world_offset[p]),
                None => (Mat3::identity(), translation),
            };
            let jj = bind_joints[j];
            world_rot.push(mp * local);
            world_offset.push(mp * (jj - local * jj) + cp);
            pivots.push(mp * jj + cp);
            rot_jacobian.push(mp * so3_left_jacobian(&r));
            parent_rot.push(mp);
        }
        Self {
            parents: parents.to_vec(),
            bind_joints: bind_joints.to_vec(),
            world_rot,
            world_offset,
            pivots,
            rot_jacobian,
            parent_rot,
            translation,
        }
    }

    pub fn transform(&self, joint: usize, x: &Vec3) -> Vec3 {
        self.world_rot[joint] * x + self.world_offset[joint]
    }

    pub fn skin_point(&self, bind: &Vec3, influences: &[Influence]) -> Vec3 {
        influences
            .iter()
            .fold(Vec3::zeros(), |acc, i| acc + self.transform(i.joint, bind) * i.weight)
    }
}

/// A posed point and its derivatives with respect to `[beta | psi | theta]`.
#[derive(Clone, Debug)]
pub struct PointJacobian {
    pub position: Vec3,
    pub jacobian: Matrix3xX<f64>,
}

/// Kinematics plus the identity coupling through joint locations.
#[derive(Clone, Debug)]
pub struct PoseEval {
    pub kin: Kinematics,
    chains: Vec<Vec<usize>>,
    /// d(offset_k)/d(beta) through moving joint pivots.
    coupling: Vec<Matrix3xX<f64>>,
    n_beta: usize,
    n_psi: usize,
}

impl PoseEval {
    pub fn new(asset: &ModelAsset, beta: &[f64], theta: &[f64]) -> Self {
        let joints = bind_joints(asset, beta).expect("beta length checked by caller");
        let kin = Kinematics::new(&asset.joint_parents, &joints, theta);
        let chains: Vec<Vec<usize>> = (0..asset.joint_count).map(|j| asset.chain(j)).collect();
        let joint_rows: Vec<Matrix3xX<f64>> =
            (0..asset.joint_count).map(|j| asset.joint_identity_rows(j)).collect();
        // offset_k = sum over chain m of (M_parent(m) - M_m) j_m (+ translation)
        let coupling = chains
            .iter()
            .map(|chain| {
                let mut c = Matrix3xX::zeros(asset.n_beta);
                for &m in chain {
                    let d = kin.parent_rot[m] - kin.world_rot[m];
                    c += d * &joint_rows[m];
                }
                c
            })
            .collect();
        Self {
            kin,
            chains,
            coupling,
            n_beta: asset.n_beta,
            n_psi: asset.n_psi,
        }
    }

    pub fn theta_offset(&self) -> usize {
        self.n_beta + self.n_psi
    }

    pub fn n_cols(&self) -> usize {
        self.n_beta + self.n_psi + 3 * self.chains.len() + 3
    }

    /// Derivatives of a skinned point whose bind position depends linearly on
    /// identity (and optionally expression).
    pub fn point_jacobian(
        &self,
        bind: &Vec3,
        influences: &[Influence],
        d_bind_beta: &Matrix3xX<f64>,
        d_bind_psi: Option<&Matrix3xX<f64>>,
    ) -> PointJacobian {
        let nb = self.n_beta;
        let to = self.theta_offset();
        let k = self.chains.len();
        let mut jac = Matrix3xX::zeros(self.n_cols());
        let mut mbar = Mat3::zeros();
        let mut position = Vec3::zeros();
        for infl in influences {
            let w = infl.weight;
            if w == 0.0 {
                continue;
            }
            let j = infl.joint;
            mbar += self.kin.world_rot[j] * w;
            let xk = self.kin.transform(j, bind);
            position += xk * w;
            {
                let mut cols = jac.columns_mut(0, nb);
                cols += &self.coupling[j] * w;
            }
            for &m in &self.chains[j] {
                let block = -skew(&(xk - self.kin.pivots[m])) * self.kin.rot_jacobian[m] * w;
                let mut cols = jac.fixed_columns_mut::<3>(to + 3 * m);
                cols += block;
            }
        }
        {
            let mut cols = jac.columns_mut(0, nb);
            cols += mbar * d_bind_beta;
        }
        if let Some(dpsi) = d_bind_psi {
            jac.columns_mut(nb, self.n_psi).copy_from(&(mbar * dpsi));
        }
        let wsum: f64 = influences.iter().map(|i| i.weight).sum();
        jac.fixed_columns_mut::<3>(to + 3 * k)
            .copy_from(&(Mat3::identity() * wsum));
        PointJacobian { position, jacobian: jac }
    }

    pub fn vertex_position(&self, asset: &ModelAsset, v: usize, beta: &[f64], psi: &[f64]) -> Vec3 {
        self.kin.skin_point(&bind_vertex(asset, v, beta, psi), &asset.skinning[v])
    }

    pub fn vertex_jacobian(&self, asset: &ModelAsset, v: usize, beta: &[f64], psi: &[f64]) -> PointJacobian {
        let bind = bind_vertex(asset, v, beta, psi);
        self.point_jacobian(
            &bind,
            &asset.skinning[v],
            &asset.identity_rows(v),
            Some(&asset.expression_rows(v)),
        )
    }

    /// A point rigidly attached to `joint` at `offset` from its bind pivot.
    pub fn attached_point_jacobian(&self, asset: &ModelAsset, joint: usize, offset: &Vec3) -> PointJacobian {
        let bind = self.kin.bind_joints[joint] + offset;
        self.point_jacobian(
            &bind,
            &[Influence { joint, weight: 1.0 }],
            &asset.joint_identity_rows(joint),
            None,
        )
    }

    /// Rotated direction `world_rot[joint] * dir` and its derivative columns.
    pub fn direction_jacobian(&self, joint: usize, dir: &Vec3) -> PointJacobian {
        let to = self.theta_offset();
        let world = self.kin.world_rot[joint] * dir;
        let mut jac = Matrix3xX::zeros(self.n_cols());
        for &m in &self.chains[joint] {
            jac.fixed_columns_mut::<3>(to + 3 * m)
                .copy_from(&(-skew(&world) * self.kin.rot_jacobian[m]));
        }
        PointJacobian { position: world, jacobian: jac }
    }
}
