//! Procedurally generated toy head asset.
//!
//! A deformed ellipsoid in centimetres, image-style axes (`+y` down, the face
//! looks toward `-z`), with four joints: root, neck, left eye, right eye.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    ConvexHull, EyeballProxy, Influence, LandmarkBinding, ModelAsset, Plane, TeethProxy,
};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyAssetSpec {
    pub rings: usize,
    pub segments: usize,
    pub n_beta: usize,
    pub n_psi: usize,
    pub landmarks: usize,
}

impl Default for ToyAssetSpec {
    fn default() -> Self {
        Self {
            rings: 21,
            segments: 30,
            n_beta: 16,
            n_psi: 24,
            landmarks: 320,
        }
    }
}

impl ToyAssetSpec {
    pub fn vertex_count(&self) -> usize {
        (self.rings - 1) * self.segments + 2
    }

    /// Larger mesh that carries enough vertices for a 703-landmark scheme.
    pub fn dense() -> Self {
        Self {
            rings: 31,
            segments: 40,
            landmarks: 703,
            ..Self::default()
        }
    }
}

const RADII: [f64; 3] = [7.5, 10.0, 9.5];
const EYE_RADIUS: f64 = 1.25;

fn ellipsoid_normal(p: &Vec3) -> Vec3 {
    Vec3::new(
        p.x / (RADII[0] * RADII[0]),
        p.y / (RADII[1] * RADII[1]),
        p.z / (RADII[2] * RADII[2]),
    )
    .normalize()
}

fn gauss(d: &Vec3, center: &Vec3, width: f64) -> f64 {
    (-(d - center).norm_squared() / (2.0 * width * width)).exp()
}

fn head_surface(d: &Vec3, asym: &[f64; 6]) -> Vec3 {
    let base = Vec3::new(RADII[0] * d.x, RADII[1] * d.y, RADII[2] * d.z);
    let bumps = [
        (Vec3::new(0.0, 0.05, -1.0).normalize(), 0.2, 1.8), // nose
        (Vec3::new(0.0, 0.55, -0.8).normalize(), 0.22, 0.8), // chin
        (Vec3::new(0.0, -0.3, -0.95).normalize(), 0.3, 0.4), // brow
        (Vec3::new(1.0, 0.0, 0.05).normalize(), 0.18, 1.0),  // ears
        (Vec3::new(-1.0, 0.0, 0.05).normalize(), 0.18, 1.0),
    ];
    let mut radial: f64 = bumps.iter().map(|(c, w, a)| a * gauss(d, c, *w)).sum();
    radial += asym[0] * d.x + asym[1] * d.x * d.y + asym[2] * d.x * d.z
        + asym[3] * d.y * d.z + asym[4] * d.x * d.x * d.y + asym[5] * d.z * d.z;
    base + d * radial
}

fn uv_sphere(rings: usize, segments: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    use std::f64::consts::PI;
    let mut dirs = vec![Vec3::new(0.0, -1.0, 0.0)];
    for i in 1..rings {
        let phi = PI * i as f64 / rings as f64;
        for s in 0..segments {
            let lambda = 2.0 * PI * s as f64 / segments as f64;
            dirs.push(Vec3::new(
                phi.sin() * lambda.sin(),
                -phi.cos(),
                -phi.sin() * lambda.cos(),
            ));
        }
    }
    dirs.push(Vec3::new(0.0, 1.0, 0.0));
    let ring = |i: usize, s: usize| 1 + (i - 1) * segments + s % segments;
    let bottom = dirs.len() - 1;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s + 1), ring(1, s)]);
    }
    for i in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(i, s), ring(i, s + 1), ring(i + 1, s), ring(i + 1, s + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for s in 0..segments {
        faces.push([bottom, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    (dirs, faces)
}

/// Indices ordered by farthest-point sampling, starting from `start`.
pub fn farthest_point_order(points: &[Vec3], start: usize, count: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(count);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut cur = start;
    for _ in 0..count {
        order.push(cur);
        for (i, p) in points.iter().enumerate() {
            let d = (p - points[cur]).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
        }
        // ties resolve to the lowest index
        let mut best = 0;
        for i in 1..points.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        cur = best;
    }
    order
}

fn nearest(points: &[Vec3], target: &Vec3) -> usize {
    let mut best = 0;
    for i in 1..points.len() {
        if (points[i] - target).norm_squared() < (points[best] - target).norm_squared() {
            best = i;
        }
    }
    best
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Wendland C2 kernel with compact support `radius`.
fn wendland(r: f64, radius: f64) -> f64 {
    if r >= radius {
        return 0.0;
    }
    let q = r / radius;
    (1.0 - q).powi(4) * (4.0 * q + 1.0)
}

fn monomials(d: &Vec3) -> Vec<f64> {
    let mut out = Vec::with_capacity(20);
    for a in 0..=3i32 {
        for b in 0..=(3 - a) {
            for c in 0..=(3 - a - b) {
                out.push(d.x.powi(a) * d.y.powi(b) * d.z.powi(c));
            }
        }
    }
    out
}

fn gram_schmidt_against(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let proj = v.dot(b);
            v.axpy(-proj, b, 1.0);
        }
    }
}

fn box_planes(center: &Vec3, half: &Vec3) -> Vec<Plane> {
    let mut planes = Vec::with_capacity(6);
    for a in 0..3 {
        for s in [1.0, -1.0] {
            let mut n = [0.0; 3];
            n[a] = s;
            planes.push(Plane {
                normal: n,
                offset: -(s * center[a] + half[a]),
            });
        }
    }
    planes
}

fn inside_planes(planes: &[Plane], local: &Vec3) -> bool {
    planes
        .iter()
        .all(|p| p.normal[0] * local.x + p.normal[1] * local.y + p.normal[2] * local.z + p.offset < 0.0)
}

/// Deterministically builds the toy asset from a seed.
pub fn generate(spec: &ToyAssetSpec, seed: u64) -> Result<ModelAsset> {
    if spec.rings < 4 || spec.segments < 6 {
        return Err(Error::InvalidAsset("mesh resolution too small".into()));
    }
    let n = spec.vertex_count();
    if spec.landmarks > n {
        return Err(Error::InvalidAsset(format!(
            "{} landmarks requested for {n} vertices",
            spec.landmarks
        )));
    }
    let mut rng = stream(seed, Stream::Asset);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut asym = [0.0; 6];
    for a in asym.iter_mut() {
        *a = 0.15 * normal(&mut rng);
    }
    let (dirs, faces) = uv_sphere(spec.rings, spec.segments);
    let verts: Vec<Vec3> = dirs.iter().map(|d| head_surface(d, &asym)).collect();

    // joints
    let eye_center = |side: f64| {
        let d = Vec3::new(0.36 * side, -0.14, -0.92).normalize();
        let s = head_surface(&d, &asym);
        s - ellipsoid_normal(&s) * (EYE_RADIUS + 0.35)
    };
    let eyes = [eye_center(1.0), eye_center(-1.0)];
    let joints = [Vec3::new(0.0, 10.5, 1.0),
        Vec3::new(0.0, 6.0, 0.5),
        eyes[0],
        eyes[1]];
    let parents = vec![None, Some(0), Some(1), Some(1)];

    // skinning
    let skinning: Vec<Vec<Influence>> = verts
        .iter()
        .map(|p| {
            let mut eye_w = 0.0;
            let mut eye_j = 2;
            for (e, c) in eyes.iter().enumerate() {
                let w = 0.35 * (1.0 - (p - c).norm() / 2.8).max(0.0);
                if w > eye_w {
                    eye_w = w;
                    eye_j = 2 + e;
                }
            }
            let root_frac = 0.6 * smoothstep(3.0, 10.0, p.y);
            let mut infl = Vec::with_capacity(3);
            let rest = 1.0 - eye_w;
            if root_frac > 0.0 {
                infl.push(Influence { joint: 0, weight: rest * root_frac });
            }
            infl.push(Influence { joint: 1, weight: rest * (1.0 - root_frac) });
            if eye_w > 0.0 {
                infl.push(Influence { joint: eye_j, weight: eye_w });
            }
            infl
        })
        .collect();

    // identity basis: smooth polynomial fields with rigid motions projected out
    let centroid = verts.iter().fold(Vec3::zeros(), |a, v| a + v) / n as f64;
    let mut rigid: Vec<DVector<f64>> = Vec::new();
    for a in 0..3 {
        let mut t = DVector::zeros(3 * n);
        let mut r = DVector::zeros(3 * n);
        let mut axis = Vec3::zeros();
        axis[a] = 1.0;
        for (i, p) in verts.iter().enumerate() {
            t[3 * i + a] = 1.0;
            let w = axis.cross(&(p - centroid));
            for b in 0..3 {
                r[3 * i + b] = w[b];
            }
        }
        rigid.push(t);
        rigid.push(r);
    }
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for mut v in rigid {
        gram_schmidt_against(&mut v, &ortho);
        v /= v.norm();
        ortho.push(v);
    }
    let monos: Vec<Vec<f64>> = dirs.iter().map(monomials).collect();
    let mut identity_cols: Vec<DVector<f64>> = Vec::with_capacity(spec.n_beta);
    while identity_cols.len() < spec.n_beta {
        let coef: Vec<[f64; 3]> = (0..20)
            .map(|_| [normal(&mut rng), normal(&mut rng), normal(&mut rng)])
            .collect();
        let mut v = DVector::zeros(3 * n);
        for (i, m) in monos.iter().enumerate() {
            for (c, mv) in coef.iter().zip(m) {
                for b in 0..3 {
                    v[3 * i + b] += c[b] * mv;
                }
            }
        }
        gram_schmidt_against(&mut v, &ortho);
        let norm = v.norm();
        if norm < 1e-6 {
            continue;
        }
        v /= norm;
        ortho.push(v.clone());
        identity_cols.push(v);
    }
    let sqrt_n = (n as f64).sqrt();
    let mut identity_basis = vec![0.0; 3 * n * spec.n_beta];
    for (c, col) in identity_cols.iter().enumerate() {
        let scale = 0.6 * 0.93f64.powi(c as i32) * sqrt_n;
        for r in 0..3 * n {
            identity_basis[r * spec.n_beta + c] = col[r] * scale;
        }
    }

    // joint regressor: proximity-weighted average of vertex identity displacements
    let mut joint_identity_basis = vec![0.0; 3 * joints.len() * spec.n_beta];
    for (k, j) in joints.iter().enumerate() {
        let w: Vec<f64> = verts
            .iter()
            .map(|p| (-(p - j).norm_squared() / (2.0 * 16.0)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        for a in 0..3 {
            for c in 0..spec.n_beta {
                let mut acc = 0.0;
                for (i, wi) in w.iter().enumerate() {
                    acc += wi * identity_basis[(3 * i + a) * spec.n_beta + c];
                }
                joint_identity_basis[(3 * k + a) * spec.n_beta + c] = acc / total;
            }
        }
    }

    // expression basis: compactly supported local deformations
    let mouth_dir = Vec3::new(0.0, 0.36, -0.93).normalize();
    let mouth_surface = head_surface(&mouth_dir, &asym);
    let mouth_vertex = nearest(&verts, &mouth_surface);
    let lid = |e: usize| {
        let up = eyes[e] + Vec3::new(0.0, -0.9, 0.0);
        let d = (up - centroid).normalize();
        nearest(&verts, &head_surface(&d, &asym))
    };
    let front: Vec<usize> = (0..n).filter(|&i| dirs[i].z < -0.1).collect();
    let front_pts: Vec<Vec3> = front.iter().map(|&i| verts[i]).collect();
    let start = front.iter().position(|&i| i == mouth_vertex).unwrap_or(0);
    let mut centers: Vec<usize> = vec![mouth_vertex, lid(0), lid(1)];
    for idx in farthest_point_order(&front_pts, start, spec.n_psi + 3) {
        let v = front[idx];
        if centers.len() >= spec.n_psi {
            break;
        }
        if !centers.contains(&v) {
            centers.push(v);
        }
    }
    centers.truncate(spec.n_psi);
    let mut expression_basis = vec![0.0; 3 * n * spec.n_psi];
    for (e, &c) in centers.iter().enumerate() {
        let nc = ellipsoid_normal(&verts[c]);
        let (dir, radius) = match e {
            0 => ((-nc * 0.8 + Vec3::new(0.0, 0.6, 0.0)).normalize(), 3.0),
            1 | 2 => (-nc, 2.2),
            _ => {
                let rnd = Vec3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
                let tangent = (rnd - nc * rnd.dot(&nc)).normalize();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                ((nc * (0.6 * sign) + tangent * 0.8).normalize(), 3.5)
            }
        };
        for (i, p) in verts.iter().enumerate() {
            let w = wendland((p - verts[c]).norm(), radius);
            if w == 0.0 {
                continue;
            }
            for a in 0..3 {
                expression_basis[(3 * i + a) * spec.n_psi + e] = dir[a] * w;
            }
        }
    }

    // landmarks
    let nose = nearest(&verts, &head_surface(&Vec3::new(0.0, 0.05, -1.0).normalize(), &asym));
    let landmark_bindings = farthest_point_order(&verts, nose, spec.landmarks)
        .into_iter()
        .map(|vertex| LandmarkBinding { vertex, weight: 1.0 })
        .collect();

    // eyeball proxies
    let mut eyeballs = Vec::new();
    for (e, c) in eyes.iter().enumerate() {
        let min_dist = verts.iter().map(|p| (p - c).norm()).fold(f64::INFINITY, f64::min);
        let radius = EYE_RADIUS.min(0.9 * min_dist);
        let guarded = (0..n).filter(|&i| (verts[i] - c).norm() < radius + 1.6).collect();
        eyeballs.push(EyeballProxy {
            joint: 2 + e,
            center_offset: [0.0; 3],
            radius,
            guarded_vertices: guarded,
        });
    }

    // teeth hulls, attached to the neck joint and expressed relative to its pivot
    let nm = ellipsoid_normal(&mouth_surface);
    let hull_center = mouth_surface - nm * 1.6 - joints[1];
    let half = Vec3::new(1.6, 0.35, 0.7);
    let hulls = vec![
        ConvexHull {
            joint: 1,
            planes: box_planes(&(hull_center + Vec3::new(0.0, -0.45, 0.0)), &half),
        },
        ConvexHull {
            joint: 1,
            planes: box_planes(&(hull_center + Vec3::new(0.0, 0.45, 0.0)), &half),
        },
    ];
    for h in &hulls {
        if verts.iter().any(|p| inside_planes(&h.planes, &(p - joints[1]))) {
            return Err(Error::InvalidAsset("teeth hull intersects the bind mesh".into()));
        }
    }
    let lip_vertices = (0..n).filter(|&i| (verts[i] - mouth_surface).norm() < 2.5).collect();

    let asset = ModelAsset {
        vertex_count: n,
        n_beta: spec.n_beta,
        n_psi: spec.n_psi,
        joint_count: joints.len(),
        base_vertices: verts.iter().map(|v| [v.x, v.y, v.z]).collect(),
        faces,
        identity_basis,
        expression_basis,
        joint_names: ["root", "neck", "left_eye", "right_eye"].iter().map(|s| s.to_string()).collect(),
        joint_parents: parents,
        base_joints: joints.iter().map(|v| [v.x, v.y, v.z]).collect(),
        joint_identity_basis,
        skinning,
        landmark_bindings,
        eyeballs,
        teeth: TeethProxy {
            hulls,
            lip_vertices,
        },
    };
    asset.validate()?;
    Ok(asset)
}
