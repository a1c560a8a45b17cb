#![allow(dead_code)]

use facefit::experiments::Setup;
use facefit::face_model::toy::ToyAssetSpec;
use facefit::face_model::Parameters;
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_spec() -> ToyAssetSpec {
    ToyAssetSpec { rings: 10, segments: 14, n_beta: 6, n_psi: 8, landmarks: 40 }
}

pub fn small_setup() -> Setup {
    Setup::new(&small_spec(), 3).unwrap()
}

/// Central difference refined by one Richardson step: O(h^4) truncation.
pub fn richardson(mut f: impl FnMut(f64) -> DVector<f64>, h: f64) -> DVector<f64> {
    let mut central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let coarse = central(h);
    let fine = central(0.5 * h);
    (fine * 4.0 - coarse) / 3.0
}

pub fn scalar_richardson(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    richardson(|s| DVector::from_element(1, f(s)), h)[0]
}

/// Norm-wise relative error of `approx` against `exact`.
pub fn relative(exact: &DVector<f64>, approx: &DVector<f64>) -> f64 {
    let d = (exact - approx).norm();
    if d == 0.0 {
        0.0
    } else {
        d / exact.norm().max(f64::MIN_POSITIVE)
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    rng.random_range(-half..=half)
}

/// Randomizes identity, expression and pose around `base`.
pub fn jitter(base: &Parameters, rng: &mut ChaCha8Rng, scale: f64) -> Parameters {
    let mut p = base.clone();
    p.beta.iter_mut().for_each(|b| *b += uniform(rng, 0.3 * scale));
    for f in 0..p.frames() {
        p.psi[f].iter_mut().for_each(|v| *v += uniform(rng, 0.3 * scale));
        let n = p.theta[f].len();
        for c in 0..n {
            p.theta[f][c] += uniform(rng, if c < n - 3 { 0.05 * scale } else { 0.5 * scale });
        }
    }
    p
}
