mod common;

use std::sync::OnceLock;

use common::{jitter, relative, richardson, small_setup};
use facefit::camera::Camera;
use facefit::energy::{EnergyConfig, Term, TermWeights};
use facefit::experiments::Setup;
use facefit::face_model::{bind_joints, bind_mesh, mesh_generate, mesh_jacobian, skin, Parameters};
use facefit::io::{decode, encode, Meta};
use facefit::landmarks::{gnll_loss, gnll_term, synth_observe, NoiseScale, NoiseSpec, ObservationSet};
use facefit::math::{so3_exp, so3_log, Vec3};
use facefit::scenario::{Scene, SceneSpec};
use facefit::solver::total_energy;
use nalgebra::{DVector, Vector2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    setup: Setup,
    scene: Scene,
    obs: ObservationSet,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let setup = small_setup();
        let spec = SceneSpec { frames: 3, cameras: 2, free_extrinsics: true, ..SceneSpec::default() };
        let scene = setup.scene(&spec, 11).unwrap();
        let noise = NoiseSpec::calibrated(NoiseScale::Uniform { min: 0.5, max: 3.0 });
        let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &noise, 11).unwrap();
        Fixture { setup, scene, obs }
    })
}

fn coeffs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, n)
}

fn axis_angle(max: f64) -> impl Strategy<Value = Vec3> {
    (-max..max, -max..max, -max..max).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn sub(a: &[Vec3], b: &[Vec3]) -> Vec<Vec3> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn max_gap(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blendshapes_are_affine(
        b1 in coeffs(6), b2 in coeffs(6), p1 in coeffs(8), p2 in coeffs(8),
        s in -2.0..2.0f64, t in -2.0..2.0f64,
    ) {
        let asset = &fixture().setup.asset;
        let base = bind_mesh(asset, &[0.0; 6], &[0.0; 8]).unwrap();
        let d1 = sub(&bind_mesh(asset, &b1, &p1).unwrap(), &base);
        let d2 = sub(&bind_mesh(asset, &b2, &p2).unwrap(), &base);
        let beta: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| s * x + t * y).collect();
        let psi: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| s * x + t * y).collect();
        let mixed = sub(&bind_mesh(asset, &beta, &psi).unwrap(), &base);
        let expected: Vec<Vec3> = d1.iter().zip(&d2).map(|(x, y)| x * s + y * t).collect();
        prop_assert!(max_gap(&mixed, &expected) < 1e-12);
    }

    #[test]
    fn zero_pose_keeps_the_bind_mesh(beta in coeffs(6), psi in coeffs(8)) {
        let asset = &fixture().setup.asset;
        let bind = bind_mesh(asset, &beta, &psi).unwrap();
        let joints = bind_joints(asset, &beta).unwrap();
        let posed = skin(asset, &bind, &joints, &vec![0.0; asset.theta_len()]).unwrap();
        prop_assert!(max_gap(&posed, &bind) < 1e-12);
    }

    #[test]
    fn root_motion_is_rigid(beta in coeffs(6), w in axis_angle(1.0), t in axis_angle(20.0)) {
        let asset = &fixture().setup.asset;
        let bind = bind_mesh(asset, &beta, &[0.0; 8]).unwrap();
        let joints = bind_joints(asset, &beta).unwrap();
        let mut theta = vec![0.0; asset.theta_len()];
        theta[..3].copy_from_slice(w.as_slice());
        let n = theta.len();
        theta[n - 3..].copy_from_slice(t.as_slice());
        let posed = skin(asset, &bind, &joints, &theta).unwrap();
        for (i, j) in [(0, 1), (3, 40), (17, 90), (5, asset.vertex_count - 1)] {
            let before = (bind[i] - bind[j]).norm();
            let after = (posed[i] - posed[j]).norm();
            prop_assert!((before - after).abs() < 1e-10 * before.max(1.0));
        }
    }

    #[test]
    fn so3_log_inverts_exp(w in axis_angle(1.7)) {
        prop_assume!(w.norm() < 3.0);
        prop_assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-10);
    }

    #[test]
    fn gnll_is_minimized_at_r_over_sqrt2(r in 0.01..50.0f64, sigma in 0.01..100.0f64) {
        let mu = Vector2::new(r, 0.0);
        let zero = Vector2::zeros();
        prop_assert!(gnll_term(&mu, r / 2f64.sqrt(), &zero) <= gnll_term(&mu, sigma, &zero) + 1e-12);
    }

    #[test]
    fn gnll_splits_into_log_and_scaled_residual(
        x in -20.0..20.0f64, y in -20.0..20.0f64, sigma in 0.01..20.0f64, w in 0.0..3.0f64,
    ) {
        let mu = Vector2::new(x, y);
        let zero = Vector2::zeros();
        let expected = (sigma * sigma).ln() + (x * x + y * y) / (2.0 * sigma * sigma);
        prop_assert!((gnll_term(&mu, sigma, &zero) - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        let loss = gnll_loss(&[(mu, sigma), (mu, sigma)], &[zero, zero], &[w, 1.0]).unwrap();
        prop_assert!((loss.total - (w + 1.0) * expected).abs() <= 1e-11 * loss.total.abs().max(1.0));
    }

    #[test]
    fn hard_assignment_brackets_the_mixture(beta in coeffs(6), weight in 0.1..5.0f64) {
        let prior = &fixture().setup.prior;
        let b = DVector::from_column_slice(&beta);
        let k = prior.responsible_component(&beta);
        let best = prior.components()[k].log_weighted_density(&b);
        for c in prior.components() {
            prop_assert!(c.log_weighted_density(&b) <= best);
        }
        let lp = prior.log_prob(&beta);
        prop_assert!(best <= lp + 1e-12);
        prop_assert!(lp <= best + (prior.components().len() as f64).ln() + 1e-12);
        let r = prior.residualize(&beta, weight);
        prop_assert_eq!(r.component, k);
        let expected = 0.5 * weight * prior.mahalanobis_squared(k, &beta);
        prop_assert!((r.residual.norm_squared() - expected).abs() <= 1e-10 * expected.max(1.0));
    }

    #[test]
    fn regauging_the_world_keeps_pixels(
        x in axis_angle(5.0), w in axis_angle(0.5), q in axis_angle(1.0), s in axis_angle(10.0),
        f in 300.0..1500.0f64,
    ) {
        let cam = Camera { rotation: w, translation: Vec3::new(0.0, 0.0, 60.0), focal: f, principal: [320.0, 240.0] };
        let qm = so3_exp(&q);
        let r2 = so3_exp(&cam.rotation) * qm.transpose();
        let moved = Camera {
            rotation: so3_log(&r2),
            translation: cam.translation - r2 * s,
            ..cam.clone()
        };
        let a = cam.project(&x).unwrap();
        let b = moved.project(&(qm * x + s)).unwrap();
        prop_assert!((a - b).norm() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mesh_jacobian_matches_differences(seed in any::<u64>()) {
        let fx = fixture();
        let asset = &fx.setup.asset;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = jitter(&fx.scene.truth, &mut rng, 1.0);
        let jac = mesh_jacobian(asset, &params, 1).unwrap();
        let (nb, ne) = (asset.n_beta, asset.n_psi);
        for col in 0..asset.local_param_count() {
            let numeric = richardson(|h| {
                let mut p = params.clone();
                match col {
                    c if c < nb => p.beta[c] += h,
                    c if c < nb + ne => p.psi[1][c - nb] += h,
                    c => p.theta[1][c - nb - ne] += h,
                }
                let mesh = mesh_generate(asset, &p, 1).unwrap();
                let flat: Vec<f64> = asset.landmark_bindings.iter().flat_map(|b| mesh[b.vertex].iter().copied().collect::<Vec<_>>()).collect();
                DVector::from_vec(flat)
            }, 1e-3);
            let analytic = DVector::from_iterator(numeric.len(), jac.iter().flat_map(|j| j.jacobian.column(col).iter().copied().collect::<Vec<_>>()));
            if numeric.norm() > 1e-9 {
                prop_assert!(relative(&numeric, &analytic) < 1e-6, "column {}", col);
            } else {
                prop_assert!(analytic.norm() < 1e-8, "column {}", col);
            }
        }
    }

    #[test]
    fn projection_jacobian_matches_differences(
        x in axis_angle(8.0), w in axis_angle(0.8), t in axis_angle(5.0), f in 300.0..1500.0f64,
    ) {
        let cam = Camera { rotation: w, translation: t + Vec3::new(0.0, 0.0, 60.0), focal: f, principal: [320.0, 240.0] };
        let pj = cam.project_jacobian(&x).unwrap();
        for c in 0..7 {
            let numeric = richardson(|h| {
                let mut k = cam.clone();
                match c {
                    0..=2 => k.rotation[c] += h,
                    3..=5 => k.translation[c - 3] += h,
                    _ => k.focal += h,
                }
                let p = k.project(&x).unwrap();
                DVector::from_vec(vec![p.x, p.y])
            }, 1e-4);
            let analytic = DVector::from_vec(vec![pj.camera[(0, c)], pj.camera[(1, c)]]);
            prop_assert!(relative(&numeric, &analytic) < 1e-6, "camera column {}", c);
        }
        for a in 0..3 {
            let numeric = richardson(|h| {
                let mut y = x;
                y[a] += h;
                let p = cam.project(&y).unwrap();
                DVector::from_vec(vec![p.x, p.y])
            }, 1e-4);
            let analytic = DVector::from_vec(vec![pj.point[(0, a)], pj.point[(1, a)]]);
            prop_assert!(relative(&numeric, &analytic) < 1e-6, "point column {}", a);
        }
    }

    #[test]
    fn prior_gradient_matches_differences(beta in coeffs(6)) {
        let prior = &fixture().setup.prior;
        let g = prior.log_prob_gradient(&beta);
        let numeric = DVector::from_iterator(6, (0..6).map(|i| {
            common::scalar_richardson(|h| {
                let mut b = beta.clone();
                b[i] += h;
                prior.log_prob(&b)
            }, 1e-3)
        }));
        prop_assert!(relative(&numeric, &g) < 1e-7);
    }

    #[test]
    fn energy_terms_add_up(
        seed in any::<u64>(),
        wi in 0.0..2.0f64, we in 0.0..2.0f64, wj in 0.0..2.0f64, wt in 0.0..2.0f64, wx in 0.0..20.0f64,
    ) {
        let fx = fixture();
        let config = EnergyConfig {
            weights: TermWeights { identity: wi, expression: we, joints: wj, temporal: wt, intersect: wx },
            ..EnergyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = jitter(&fx.scene.truth, &mut rng, 2.0);
        let model = fx.setup.model(&fx.scene.rig, &fx.obs, config).unwrap();
        let full = total_energy(&model, &params).unwrap();
        let landmarks = full.get(Term::Landmarks);
        let mut sum = 0.0;
        let mut scale = 0.0;
        for t in Term::ALL {
            let m = fx.setup.model(&fx.scene.rig, &fx.obs, config.only(t)).unwrap();
            let e = total_energy(&m, &params).unwrap();
            prop_assert!((e.get(Term::Landmarks) - landmarks).abs() <= 1e-12 * landmarks.max(1.0));
            sum += e.get(t);
            scale += e.get(t).abs();
        }
        prop_assert!((full.total() - sum).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn wider_sigma_scales_down_the_data_term(seed in any::<u64>(), k in 1.01..10.0f64) {
        let fx = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = jitter(&fx.scene.truth, &mut rng, 1.0);
        let mut wide = fx.obs.clone();
        wide.observations.iter_mut().for_each(|o| o.sigma *= k);
        let narrow_model = fx.setup.model(&fx.scene.rig, &fx.obs, EnergyConfig::data_only()).unwrap();
        let wide_model = fx.setup.model(&fx.scene.rig, &wide, EnergyConfig::data_only()).unwrap();
        let a = total_energy(&narrow_model, &params).unwrap().get(Term::Landmarks);
        let b = total_energy(&wide_model, &params).unwrap().get(Term::Landmarks);
        prop_assert!(b < a);
        prop_assert!((b * k * k - a).abs() <= 1e-10 * a);
    }

    #[test]
    fn parameters_survive_a_document_round_trip(seed in any::<u64>()) {
        let fx = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Parameters = jitter(&fx.scene.truth, &mut rng, 3.0);
        let meta = Meta::new(seed, &"cfg").unwrap();
        let (back, m): (Parameters, Meta) = decode(&encode(&params, &meta).unwrap()).unwrap();
        prop_assert_eq!(back, params);
        prop_assert_eq!(m.seed, Some(seed));
    }
}
