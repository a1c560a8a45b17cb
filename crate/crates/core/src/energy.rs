//! The fitting energy as an ordered list of residual blocks. Each block knows
//! the static set of free parameters it can depend on, so the solver only does
//! `O(m_i^2)` work per block.

use nalgebra::{DMatrix, DVector, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRig, CAMERA_PARAMS};
use crate::error::{Error, Result};
use crate::face_model::{ModelAsset, Parameters, PoseEval, Structure};
use crate::landmarks::{ObservationSet, SIGMA_FLOOR};
use crate::layout::{ActiveSet, ParamLayout};
use crate::math::{vec3, Vec3};
use crate::priors::GmmPrior;

/// Regularizer weights. The landmark term always has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermWeights {
    pub identity: f64,
    pub expression: f64,
    pub joints: f64,
    pub temporal: f64,
    pub intersect: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            identity: 1.0,
            expression: 0.1,
            joints: 0.1,
            temporal: 0.05,
            intersect: 10.0,
        }
    }
}

impl TermWeights {
    pub fn zero() -> Self {
        Self {
            identity: 0.0,
            expression: 0.0,
            joints: 0.0,
            temporal: 0.0,
            intersect: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub weights: TermWeights,
    /// Jacobian entries below this magnitude are skipped during accumulation.
    pub sparsity_threshold: f64,
    pub sigma_floor: f64,
    pub temporal: bool,
    pub intersect: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            weights: TermWeights::default(),
            sparsity_threshold: 0.0,
            sigma_floor: SIGMA_FLOOR,
            temporal: true,
            intersect: true,
        }
    }
}

impl EnergyConfig {
    /// Landmarks only.
    pub fn data_only() -> Self {
        Self {
            weights: TermWeights::zero(),
            temporal: false,
            intersect: false,
            ..Self::default()
        }
    }

    /// This configuration with every regularizer except `term` switched off.
    /// The landmark term is always present.
    pub fn only(&self, term: Term) -> Self {
        let w = &self.weights;
        let zero = TermWeights::zero();
        let weights = match term {
            Term::Landmarks => zero,
            Term::Identity => TermWeights { identity: w.identity, ..zero },
            Term::Expression => TermWeights { expression: w.expression, ..zero },
            Term::Joints => TermWeights { joints: w.joints, ..zero },
            Term::Temporal => TermWeights { temporal: w.temporal, ..zero },
            Term::Intersect => TermWeights { intersect: w.intersect, ..zero },
        };
        Self {
            weights,
            temporal: self.temporal && term == Term::Temporal,
            intersect: self.intersect && term == Term::Intersect,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let all = [w.identity, w.expression, w.joints, w.temporal, w.intersect];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain("term weights must be finite and nonnegative".into()));
        }
        if !(self.sparsity_threshold >= 0.0) {
            return Err(Error::Domain("sparsity threshold must be nonnegative".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Domain("sigma floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Landmarks,
    Identity,
    Expression,
    Joints,
    Temporal,
    Intersect,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Landmarks,
        Term::Identity,
        Term::Expression,
        Term::Joints,
        Term::Temporal,
        Term::Intersect,
    ];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermEnergies {
    pub landmarks: f64,
    pub identity: f64,
    pub expression: f64,
    pub joints: f64,
    pub temporal: f64,
    pub intersect: f64,
}

impl TermEnergies {
    pub fn total(&self) -> f64 {
        self.landmarks + self.identity + self.expression + self.joints + self.temporal + self.intersect
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Landmarks => self.landmarks,
            Term::Identity => self.identity,
            Term::Expression => self.expression,
            Term::Joints => self.joints,
            Term::Temporal => self.temporal,
            Term::Intersect => self.intersect,
        }
    }

    fn slot(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Landmarks => &mut self.landmarks,
            Term::Identity => &mut self.identity,
            Term::Expression => &mut self.expression,
            Term::Joints => &mut self.joints,
            Term::Temporal => &mut self.temporal,
            Term::Intersect => &mut self.intersect,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Index into the observation list.
    Landmark { observation: usize },
    Identity,
    Expression { frame: usize },
    Joints { frame: usize },
    /// Image-space motion of a landmark between `frame - 1` and `frame`.
    Temporal { frame: usize, camera: usize, landmark: usize },
    Eyeball { frame: usize, eye: usize, vertex: usize },
    Teeth { frame: usize, hull: usize, vertex: usize },
}

impl BlockKind {
    pub fn term(&self) -> Term {
        match self {
            BlockKind::Landmark { .. } => Term::Landmarks,
            BlockKind::Identity => Term::Identity,
            BlockKind::Expression { .. } => Term::Expression,
            BlockKind::Joints { .. } => Term::Joints,
            BlockKind::Temporal { .. } => Term::Temporal,
            BlockKind::Eyeball { .. } | BlockKind::Teeth { .. } => Term::Intersect,
        }
    }
}

/// Where a block Jacobian column comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    /// Identity column, summed over all frame terms of the block.
    Beta(usize),
    /// Local `[beta | psi | theta]` column of one frame term.
    Frame { term: usize, col: usize },
    Camera(usize),
    /// Column of a linear block's own Jacobian.
    Direct(usize),
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    /// Constant factor applied to the raw residual.
    pub scale: f64,
    pub dim: usize,
    /// Free global parameter indices this block can depend on, ascending.
    pub params: Vec<usize>,
    /// Positions of `params` in the active set.
    pub active: Vec<usize>,
    sources: Vec<Source>,
}

/// Cached value of one block. `jacobian` is `dim x params.len()` when requested.
#[derive(Clone, Debug, Default)]
pub struct BlockValue {
    pub residual: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    /// False when the block's point fell behind its camera.
    pub valid: bool,
}

/// Which frames a system covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    /// One frame, plus its temporal link to the previous frame.
    Frame(usize),
}

/// Immutable problem inputs and the per-asset structure.
pub struct EnergyModel<'a> {
    pub asset: &'a ModelAsset,
    pub rig: &'a CameraRig,
    pub observations: &'a ObservationSet,
    pub prior: Option<&'a GmmPrior>,
    pub config: EnergyConfig,
    pub structure: Structure,
}

impl<'a> EnergyModel<'a> {
    pub fn new(
        asset: &'a ModelAsset,
        rig: &'a CameraRig,
        observations: &'a ObservationSet,
        prior: Option<&'a GmmPrior>,
        config: EnergyConfig,
    ) -> Result<Self> {
        config.validate()?;
        rig.validate()?;
        if observations.cameras != rig.count() {
            return Err(Error::Dimension {
                what: "observation cameras".into(),
                expected: rig.count(),
                got: observations.cameras,
            });
        }
        if observations.landmarks > asset.landmark_bindings.len() {
            return Err(Error::Dimension {
                what: "observation landmarks".into(),
                expected: asset.landmark_bindings.len(),
                got: observations.landmarks,
            });
        }
        observations.validate(config.sigma_floor)?;
        if let Some(p) = prior {
            if p.dim() != asset.n_beta {
                return Err(Error::Dimension {
                    what: "identity prior".into(),
                    expected: asset.n_beta,
                    got: p.dim(),
                });
            }
        }
        Ok(Self {
            asset,
            rig,
            observations,
            prior,
            config,
            structure: Structure::new(asset),
        })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.asset, self.observations.frames, self.rig.count())
    }

    fn check_params(&self, params: &Parameters) -> Result<()> {
        params.validate(self.asset)?;
        if params.frames() != self.observations.frames {
            return Err(Error::Dimension {
                what: "parameter frames".into(),
                expected: self.observations.frames,
                got: params.frames(),
            });
        }
        if params.cameras() != self.rig.count() {
            return Err(Error::Dimension {
                what: "parameter cameras".into(),
                expected: self.rig.count(),
                got: params.cameras(),
            });
        }
        Ok(())
    }

    /// Local columns a skinned vertex can depend on.
    fn vertex_cols(&self, v: usize, out: &mut Vec<usize>) {
        let s = &self.structure;
        let nb = self.asset.n_beta;
        out.extend(s.vertex_beta[v].iter().copied());
        out.extend(s.vertex_psi[v].iter().map(|c| nb + c));
        let to = nb + self.asset.n_psi;
        for &m in &s.vertex_joints[v] {
            out.extend((0..3).map(|a| to + 3 * m + a));
        }
        let k = self.asset.joint_count;
        out.extend((0..3).map(|a| to + 3 * k + a));
    }

    /// Local columns a point rigidly attached to `joint` can depend on.
    fn joint_cols(&self, joint: usize, out: &mut Vec<usize>) {
        let s = &self.structure;
        let to = self.asset.n_beta + self.asset.n_psi;
        out.extend(s.joint_beta[joint].iter().copied());
        for &m in &s.chains[joint] {
            out.extend((0..3).map(|a| to + 3 * m + a));
        }
        let k = self.asset.joint_count;
        out.extend((0..3).map(|a| to + 3 * k + a));
    }

    fn point_block(
        &self,
        kind: BlockKind,
        scale: f64,
        dim: usize,
        frames: &[usize],
        local: &[usize],
        camera: Option<usize>,
        layout: &ParamLayout,
        active: &ActiveSet,
    ) -> ResidualBlock {
        let nb = self.asset.n_beta;
        let mut cols: Vec<(usize, Source)> = Vec::new();
        for (t, &f) in frames.iter().enumerate() {
            for &c in local {
                let g = layout.local(f, c);
                let src = if c < nb { Source::Beta(c) } else { Source::Frame { term: t, col: c } };
                cols.push((g, src));
            }
        }
        if let Some(j) = camera {
            for c in 0..CAMERA_PARAMS {
                cols.push((layout.camera(j, c), Source::Camera(c)));
            }
        }
        finish_block(kind, scale, dim, cols, active)
    }

    /// Builds the residual blocks for `scope`. Only free parameters enter the
    /// sparsity sets.
    pub fn assemble(&self, active: &ActiveSet, scope: Scope) -> Result<ResidualSystem> {
        let layout = self.layout();
        if active.indices().last().is_some_and(|&g| g >= layout.len()) {
            return Err(Error::Dimension {
                what: "active set".into(),
                expected: layout.len(),
                got: active.indices().len(),
            });
        }
        let asset = self.asset;
        let frames: Vec<usize> = match scope {
            Scope::All => (0..self.observations.frames).collect(),
            Scope::Frame(f) => {
                if f >= self.observations.frames {
                    return Err(Error::IndexOutOfRange {
                        what: "scope frame",
                        index: f,
                        len: self.observations.frames,
                    });
                }
                vec![f]
            }
        };
        let in_scope = |f: usize| match scope {
            Scope::All => true,
            Scope::Frame(g) => f == g,
        };
        let w = &self.config.weights;
        let mut blocks = Vec::new();
        let mut local = Vec::new();

        for (i, o) in self.observations.observations.iter().enumerate() {
            if !in_scope(o.frame) {
                continue;
            }
            let v = asset.landmark_bindings[o.landmark].vertex;
            local.clear();
            self.vertex_cols(v, &mut local);
            blocks.push(self.point_block(
                BlockKind::Landmark { observation: i },
                1.0 / (std::f64::consts::SQRT_2 * o.sigma),
                2,
                &[o.frame],
                &local,
                Some(o.camera),
                &layout,
                active,
            ));
        }

        if let Some(prior) = self.prior.filter(|_| w.identity > 0.0) {
            let cols = (0..prior.dim()).map(|c| (layout.beta(c), Source::Direct(c))).collect();
            blocks.push(finish_block(BlockKind::Identity, w.identity.sqrt(), asset.n_beta, cols, active));
        }

        let to = asset.n_beta + asset.n_psi;
        for &f in &frames {
            if w.expression > 0.0 {
                let cols = (0..asset.n_psi).map(|c| (layout.psi(f, c), Source::Direct(c))).collect();
                blocks.push(finish_block(
                    BlockKind::Expression { frame: f },
                    w.expression.sqrt(),
                    asset.n_psi,
                    cols,
                    active,
                ));
            }
            let non_root = 3 * (asset.joint_count - 1);
            if w.joints > 0.0 && non_root > 0 {
                let cols = (0..non_root)
                    .map(|c| (layout.local(f, to + 3 + c), Source::Direct(c)))
                    .collect();
                blocks.push(finish_block(
                    BlockKind::Joints { frame: f },
                    w.joints.sqrt(),
                    non_root,
                    cols,
                    active,
                ));
            }
        }

        if self.config.temporal && w.temporal > 0.0 {
            for &f in frames.iter().filter(|&&f| f >= 1) {
                for j in 0..self.rig.count() {
                    for k in 0..self.observations.landmarks {
                        local.clear();
                        self.vertex_cols(asset.landmark_bindings[k].vertex, &mut local);
                        blocks.push(self.point_block(
                            BlockKind::Temporal { frame: f, camera: j, landmark: k },
                            w.temporal.sqrt(),
                            2,
                            &[f, f - 1],
                            &local,
                            Some(j),
                            &layout,
                            active,
                        ));
                    }
                }
            }
        }

        if self.config.intersect && w.intersect > 0.0 {
            let s = w.intersect.sqrt();
            for &f in &frames {
                for (e, eye) in asset.eyeballs.iter().enumerate() {
                    for &v in &eye.guarded_vertices {
                        local.clear();
                        self.vertex_cols(v, &mut local);
                        self.joint_cols(eye.joint, &mut local);
                        blocks.push(self.point_block(
                            BlockKind::Eyeball { frame: f, eye: e, vertex: v },
                            s,
                            1,
                            &[f],
                            &local,
                            None,
                            &layout,
                            active,
                        ));
                    }
                }
                for (h, hull) in asset.teeth.hulls.iter().enumerate() {
                    for &v in &asset.teeth.lip_vertices {
                        local.clear();
                        self.vertex_cols(v, &mut local);
                        self.joint_cols(hull.joint, &mut local);
                        blocks.push(self.point_block(
                            BlockKind::Teeth { frame: f, hull: h, vertex: v },
                            s,
                            1,
                            &[f],
                            &local,
                            None,
                            &layout,
                            active,
                        ));
                    }
                }
            }
        }

        let values = vec![BlockValue::default(); blocks.len()];
        let mut needed = frames.clone();
        if self.config.temporal && w.temporal > 0.0 {
            if let Some(&first) = frames.first() {
                if first >= 1 {
                    needed.insert(0, first - 1);
                }
            }
        }
        Ok(ResidualSystem {
            layout,
            active: active.clone(),
            blocks,
            values,
            frames: needed,
            dropped: 0,
        })
    }

    /// Assembles over all frames with every free parameter active.
    pub fn assemble_all(&self, active: &ActiveSet) -> Result<ResidualSystem> {
        self.assemble(active, Scope::All)
    }
}

fn finish_block(
    kind: BlockKind,
    scale: f64,
    dim: usize,
    mut cols: Vec<(usize, Source)>,
    active: &ActiveSet,
) -> ResidualBlock {
    cols.retain(|(g, _)| active.active(*g).is_some());
    cols.sort_by_key(|(g, _)| *g);
    cols.dedup_by_key(|(g, _)| *g);
    ResidualBlock {
        kind,
        scale,
        dim,
        active: cols.iter().map(|(g, _)| active.active(*g).unwrap()).collect(),
        params: cols.iter().map(|(g, _)| *g).collect(),
        sources: cols.into_iter().map(|(_, s)| s).collect(),
    }
}

/// Ordered residual blocks plus their cached values.
#[derive(Clone, Debug)]
pub struct ResidualSystem {
    pub layout: ParamLayout,
    pub active: ActiveSet,
    pub blocks: Vec<ResidualBlock>,
    pub values: Vec<BlockValue>,
    /// Frames whose pose is needed to evaluate the blocks.
    frames: Vec<usize>,
    /// Blocks dropped at the last evaluation because a point was behind a camera.
    pub dropped: usize,
}

struct Context<'m, 'a> {
    model: &'m EnergyModel<'a>,
    params: &'m Parameters,
    poses: Vec<Option<PoseEval>>,
    cameras: Vec<Camera>,
}

/// Raw residual and, per frame term, its local Jacobian.
struct Raw {
    residual: DVector<f64>,
    frame_jacs: Vec<DMatrix<f64>>,
    camera_jac: Option<DMatrix<f64>>,
    direct_jac: Option<DMatrix<f64>>,
}

impl Raw {
    fn zero(dim: usize) -> Self {
        Raw {
            residual: DVector::zeros(dim),
            frame_jacs: Vec::new(),
            camera_jac: None,
            direct_jac: None,
        }
    }
}

impl<'m, 'a> Context<'m, 'a> {
    fn pose(&self, f: usize) -> &PoseEval {
        self.poses[f].as_ref().expect("pose evaluated for every frame in scope")
    }

    fn vertex(&self, f: usize, v: usize, jac: bool) -> (Vec3, Option<Matrix3xX<f64>>) {
        let p = self.params;
        let pose = self.pose(f);
        if jac {
            let pj = pose.vertex_jacobian(self.model.asset, v, &p.beta, &p.psi[f]);
            (pj.position, Some(pj.jacobian))
        } else {
            (pose.vertex_position(self.model.asset, v, &p.beta, &p.psi[f]), None)
        }
    }

    /// Projected vertex and the 2-row local and camera Jacobians.
    fn projected(
        &self,
        f: usize,
        cam: usize,
        v: usize,
        jac: bool,
    ) -> Option<(nalgebra::Vector2<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>)> {
        let (x, jx) = self.vertex(f, v, jac);
        let camera = &self.cameras[cam];
        match jx {
            None => camera.project(&x).ok().map(|p| (p, None)),
            Some(jx) => {
                let pj = camera.project_jacobian(&x).ok()?;
                let local = pj.point * jx;
                let local = DMatrix::from_column_slice(2, local.ncols(), local.as_slice());
                let cam_jac = DMatrix::from_column_slice(2, CAMERA_PARAMS, pj.camera.as_slice());
                Some((pj.pixel, Some((local, cam_jac))))
            }
        }
    }

    fn raw(&self, kind: &BlockKind, jac: bool) -> Option<Raw> {
        let asset = self.model.asset;
        let p = self.params;
        match *kind {
            BlockKind::Landmark { observation } => {
                let o = &self.model.observations.observations[observation];
                let v = asset.landmark_bindings[o.landmark].vertex;
                let (px, j) = self.projected(o.frame, o.camera, v, jac)?;
                let r = px - o.mu();
                let mut raw = Raw::zero(2);
                raw.residual = DVector::from_column_slice(r.as_slice());
                if let Some((l, c)) = j {
                    raw.frame_jacs.push(l);
                    raw.camera_jac = Some(c);
                }
                Some(raw)
            }
            BlockKind::Identity => {
                let prior = self.model.prior.expect("identity block requires a prior");
                // unit weight here; the block scale carries the term weight
                let pr = prior.residualize(&p.beta, 1.0);
                let mut raw = Raw::zero(asset.n_beta);
                raw.residual = pr.residual;
                if jac {
                    raw.direct_jac = Some(pr.jacobian);
                }
                Some(raw)
            }
            BlockKind::Expression { frame } => {
                let mut raw = Raw::zero(asset.n_psi);
                raw.residual = DVector::from_column_slice(&p.psi[frame]);
                if jac {
                    raw.direct_jac = Some(DMatrix::identity(asset.n_psi, asset.n_psi));
                }
                Some(raw)
            }
            BlockKind::Joints { frame } => {
                let n = 3 * (asset.joint_count - 1);
                let mut raw = Raw::zero(n);
                raw.residual = DVector::from_column_slice(&p.theta[frame][3..3 + n]);
                if jac {
                    raw.direct_jac = Some(DMatrix::identity(n, n));
                }
                Some(raw)
            }
            BlockKind::Temporal { frame, camera, landmark } => {
                let v = asset.landmark_bindings[landmark].vertex;
                let (a, ja) = self.projected(frame, camera, v, jac)?;
                let (b, jb) = self.projected(frame - 1, camera, v, jac)?;
                let mut raw = Raw::zero(2);
                raw.residual = DVector::from_column_slice((a - b).as_slice());
                if let (Some((la, ca)), Some((lb, cb))) = (ja, jb) {
                    raw.frame_jacs.push(la);
                    raw.frame_jacs.push(-lb);
                    raw.camera_jac = Some(ca - cb);
                }
                Some(raw)
            }
            BlockKind::Eyeball { frame, eye, vertex } => {
                let proxy = &asset.eyeballs[eye];
                let (x, jx) = self.vertex(frame, vertex, jac);
                let pose = self.pose(frame);
                let offset = vec3(proxy.center_offset);
                let center = pose.attached_point_jacobian(asset, proxy.joint, &offset);
                let d = x - center.position;
                let dist = d.norm();
                let mut raw = Raw::zero(1);
                if dist >= proxy.radius {
                    if jac {
                        raw.frame_jacs.push(DMatrix::zeros(1, pose.n_cols()));
                    }
                    return Some(raw);
                }
                raw.residual[0] = proxy.radius - dist;
                if let Some(jx) = jx {
                    let mut row = DMatrix::zeros(1, pose.n_cols());
                    if dist > 0.0 {
                        let u = d / dist;
                        let g = -(u.transpose() * (jx - &center.jacobian));
                        row.copy_from_slice(g.as_slice());
                    }
                    raw.frame_jacs.push(row);
                }
                Some(raw)
            }
            BlockKind::Teeth { frame, hull, vertex } => {
                let h = &asset.teeth.hulls[hull];
                let (x, jx) = self.vertex(frame, vertex, jac);
                let pose = self.pose(frame);
                let pivot = pose.kin.pivots[h.joint];
                let rot = pose.kin.world_rot[h.joint];
                let rel = x - pivot;
                let mut best: Option<(usize, f64)> = None;
                let mut inside = true;
                for (j, plane) in h.planes.iter().enumerate() {
                    let s = (rot * vec3(plane.normal)).dot(&rel) + plane.offset;
                    if s >= 0.0 {
                        inside = false;
                        break;
                    }
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                let mut raw = Raw::zero(1);
                let (j, s) = match best.filter(|_| inside) {
                    Some(b) => b,
                    None => {
                        if jac {
                            raw.frame_jacs.push(DMatrix::zeros(1, pose.n_cols()));
                        }
                        return Some(raw);
                    }
                };
                raw.residual[0] = -s;
                if let Some(jx) = jx {
                    let n = vec3(h.planes[j].normal);
                    let dn = pose.direction_jacobian(h.joint, &n);
                    let dp = pose.attached_point_jacobian(asset, h.joint, &Vec3::zeros());
                    let g = -(rel.transpose() * &dn.jacobian
                        + dn.position.transpose() * (jx - &dp.jacobian));
                    let mut row = DMatrix::zeros(1, pose.n_cols());
                    row.copy_from_slice(g.as_slice());
                    raw.frame_jacs.push(row);
                }
                Some(raw)
            }
        }
    }

    fn evaluate(&self, block: &ResidualBlock, jac: bool) -> BlockValue {
        let raw = match self.raw(&block.kind, jac) {
            Some(r) => r,
            None => {
                return BlockValue {
                    residual: DVector::zeros(block.dim),
                    jacobian: jac.then(|| DMatrix::zeros(block.dim, block.params.len())),
                    valid: false,
                }
            }
        };
        let residual = raw.residual * block.scale;
        let jacobian = jac.then(|| {
            let mut out = DMatrix::zeros(block.dim, block.params.len());
            for (i, src) in block.sources.iter().enumerate() {
                let mut col = out.column_mut(i);
                match *src {
                    Source::Beta(c) => {
                        for fj in &raw.frame_jacs {
                            col += fj.column(c);
                        }
                    }
                    Source::Frame { term, col: c } => col += raw.frame_jacs[term].column(c),
                    Source::Camera(c) => {
                        col += raw.camera_jac.as_ref().expect("camera block").column(c)
                    }
                    Source::Direct(c) => col += raw.direct_jac.as_ref().expect("linear block").column(c),
                }
            }
            out * block.scale
        });
        BlockValue { residual, jacobian, valid: true }
    }
}

impl ResidualSystem {
    pub fn residual_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    /// Evaluates every block into the value cache and returns the exact term
    /// energies (the identity term uses the full mixture density).
    pub fn evaluate(
        &mut self,
        model: &EnergyModel<'_>,
        params: &Parameters,
        jacobian: bool,
    ) -> Result<TermEnergies> {
        model.check_params(params)?;
        let mut poses: Vec<Option<PoseEval>> = vec![None; params.frames()];
        let built: Vec<(usize, PoseEval)> = map_maybe_parallel(&self.frames, |&f| {
            (f, PoseEval::new(model.asset, &params.beta, &params.theta[f]))
        });
        for (f, p) in built {
            poses[f] = Some(p);
        }
        let ctx = Context {
            model,
            params,
            poses,
            cameras: (0..model.rig.count()).map(|j| model.rig.camera(params, j)).collect(),
        };
        self.values = map_maybe_parallel(&self.blocks, |b| ctx.evaluate(b, jacobian));
        self.dropped = self.values.iter().filter(|v| !v.valid).count();
        if self.dropped > 0 {
            log::warn!("{} residual blocks dropped: point behind camera", self.dropped);
        }
        Ok(self.term_energies(model, params))
    }

    fn term_energies(&self, model: &EnergyModel<'_>, params: &Parameters) -> TermEnergies {
        let mut e = TermEnergies::default();
        for (b, v) in self.blocks.iter().zip(&self.values) {
            if b.kind == BlockKind::Identity {
                let prior = model.prior.expect("identity block requires a prior");
                e.identity = model.config.weights.identity * -prior.log_prob(&params.beta);
            } else {
                *e.slot(b.kind.term()) += v.residual.norm_squared();
            }
        }
        e
    }

    /// `||r||^2` of the cached residuals (the least-squares surrogate).
    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|v| v.residual.norm_squared()).sum()
    }

    pub fn residual_vector(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.residual_dim());
        let mut row = 0;
        for (b, v) in self.blocks.iter().zip(&self.values) {
            r.rows_mut(row, b.dim).copy_from(&v.residual);
            row += b.dim;
        }
        r
    }

    /// Full Jacobian over the active set, materialized from the block caches.
    pub fn dense_jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residual_dim(), self.active.len());
        let mut row = 0;
        for (b, v) in self.blocks.iter().zip(&self.values) {
            let bj = v.jacobian.as_ref().expect("system evaluated with jacobian");
            for (c, &a) in b.active.iter().enumerate() {
                j.view_mut((row, a), (b.dim, 1)).copy_from(&bj.column(c));
            }
            row += b.dim;
        }
        j
    }
}

#[cfg(feature = "parallel")]
fn map_maybe_parallel<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_maybe_parallel<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}
