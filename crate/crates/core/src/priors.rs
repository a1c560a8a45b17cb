//! Gaussian-mixture prior over identity coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const PRIOR_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    /// Lower Cholesky factor of the covariance.
    pub chol: DMatrix<f64>,
    chol_inv: DMatrix<f64>,
    /// `log(weight) - d/2 log(2 pi) - log det(L)`.
    log_norm: f64,
}

impl GmmComponent {
    fn new(weight: f64, mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if chol.nrows() != d || chol.ncols() != d {
            return Err(Error::InvalidPrior("covariance factor has the wrong shape".into()));
        }
        let mut log_det = 0.0;
        for i in 0..d {
            let l = chol[(i, i)];
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidPrior("covariance is not positive definite".into()));
            }
            log_det += l.ln();
        }
        let chol_inv = chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::InvalidPrior("singular covariance factor".into()))?;
        Ok(Self {
            weight,
            log_norm: weight.ln() - 0.5 * d as f64 * LN_2PI - log_det,
            mean,
            chol,
            chol_inv,
        })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    fn whiten(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.chol_inv * (beta - &self.mean)
    }

    /// `log(weight * N(beta | mean, cov))`.
    pub fn log_weighted_density(&self, beta: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * self.whiten(beta).norm_squared()
    }
}

#[derive(Clone, Debug)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
}

/// Whitened residual of the dominant component, scaled so that its squared
/// norm is `weight * mahalanobis / 2`.
#[derive(Clone, Debug)]
pub struct PriorResidual {
    pub component: usize,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmPrior {
    /// Builds a prior from full covariances; rejects non-positive-definite ones.
    pub fn new(weights: &[f64], means: &[DVector<f64>], covariances: &[DMatrix<f64>]) -> Result<Self> {
        let chols = covariances
            .iter()
            .map(|c| {
                if (c - c.transpose()).amax() > 1e-9 * c.amax().max(1.0) {
                    return Err(Error::InvalidPrior("covariance is not symmetric".into()));
                }
                c.clone()
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::InvalidPrior("covariance is not positive definite".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_cholesky(weights, means, &chols)
    }

    pub fn from_cholesky(weights: &[f64], means: &[DVector<f64>], chols: &[DMatrix<f64>]) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != chols.len() {
            return Err(Error::InvalidPrior("component counts disagree".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPrior("weights must be positive and sum to 1".into()));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidPrior("means have different dimensions".into()));
        }
        let components = weights
            .iter()
            .zip(means)
            .zip(chols)
            .map(|((w, m), l)| GmmComponent::new(*w, m.clone(), l.lower_triangle()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    /// Standard normal prior.
    pub fn standard(dim: usize) -> Self {
        Self::from_cholesky(&[1.0], &[DVector::zeros(dim)], &[DMatrix::identity(dim, dim)])
            .expect("identity covariance is valid")
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    fn log_terms(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.components.iter().map(|c| c.log_weighted_density(beta)).collect()
    }

    /// `log p(beta)` via log-sum-exp over components.
    pub fn log_prob(&self, beta: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(&DVector::from_column_slice(beta)))
    }

    pub fn log_prob_gradient(&self, beta: &[f64]) -> DVector<f64> {
        let b = DVector::from_column_slice(beta);
        let terms = self.log_terms(&b);
        let lse = log_sum_exp(&terms);
        let mut grad = DVector::zeros(b.len());
        for (c, t) in self.components.iter().zip(&terms) {
            let resp = (t - lse).exp();
            // -Sigma^-1 (beta - mean) = -L^-T L^-1 (beta - mean)
            let w = c.whiten(&b);
            grad -= c.chol_inv.tr_mul(&w) * resp;
        }
        grad
    }

    pub fn responsible_component(&self, beta: &[f64]) -> usize {
        let terms = self.log_terms(&DVector::from_column_slice(beta));
        let mut best = 0;
        for (i, t) in terms.iter().enumerate() {
            if *t > terms[best] {
                best = i;
            }
        }
        best
    }

    pub fn mahalanobis_squared(&self, component: usize, beta: &[f64]) -> f64 {
        self.components[component]
            .whiten(&DVector::from_column_slice(beta))
            .norm_squared()
    }

    /// Gauss-Newton surrogate for `weight * -log p(beta)` using the component
    /// with the largest responsibility.
    pub fn residualize(&self, beta: &[f64], weight: f64) -> PriorResidual {
        let component = self.responsible_component(beta);
        let c = &self.components[component];
        let scale = (0.5 * weight).sqrt();
        PriorResidual {
            component,
            residual: c.whiten(&DVector::from_column_slice(beta)) * scale,
            jacobian: &c.chol_inv * scale,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &c.mean + &c.chol * z
    }
}

/// Result of fitting a mixture with EM.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub prior: GmmPrior,
    /// Data log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
    pub reseeds: usize,
}

fn regularized_cholesky(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = cov.nrows();
    let eps = 1e-6 * cov.trace() / d as f64;
    let reg = cov + DMatrix::identity(d, d) * eps.max(1e-12);
    reg.cholesky().map(|c| c.l())
}

fn kmeans_pp(samples: &[DVector<f64>], g: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| (s - &centers[0]).norm_squared()).collect();
    while centers.len() < g {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = samples.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = samples[pick].clone();
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min((s - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Fits a `g`-component mixture to `samples` with EM from a k-means++ start.
pub fn fit_em(samples: &[DVector<f64>], g: usize, seed: u64, max_iters: usize, tol: f64) -> Result<EmFit> {
    if samples.is_empty() || g == 0 {
        return Err(Error::Em("need at least one sample and one component".into()));
    }
    let d = samples[0].len();
    let n = samples.len();
    if n < g * (d + 1) {
        return Err(Error::Em(format!("{n} samples are too few for {g} components in {d} dimensions")));
    }
    let mut rng = stream(seed, Stream::Em);
    let mean_all = samples.iter().fold(DVector::zeros(d), |a, s| a + s) / n as f64;
    let cov_all = samples
        .iter()
        .fold(DMatrix::zeros(d, d), |a, s| a + (s - &mean_all) * (s - &mean_all).transpose())
        / n as f64;
    let chol_all = regularized_cholesky(&cov_all).ok_or_else(|| Error::Em("degenerate sample covariance".into()))?;

    let mut weights = vec![1.0 / g as f64; g];
    let mut means = kmeans_pp(samples, g, &mut rng);
    let mut chols = vec![chol_all.clone(); g];
    let mut log_likelihood = Vec::new();
    let mut reseeds = 0usize;
    let max_reseeds = 5 * g;
    let mut resp = DMatrix::zeros(n, g);

    for _ in 0..max_iters {
        let prior = GmmPrior::from_cholesky(&weights, &means, &chols)?;
        // E-step
        let mut ll = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let terms = prior.log_terms(s);
            let lse = log_sum_exp(&terms);
            ll += lse;
            for k in 0..g {
                resp[(i, k)] = (terms[k] - lse).exp();
            }
        }
        let converged = log_likelihood
            .last()
            .map(|prev: &f64| (ll - prev).abs() < tol * prev.abs().max(1.0))
            .unwrap_or(false);
        log_likelihood.push(ll);
        if converged {
            break;
        }
        // M-step
        let mut reseeded = false;
        for k in 0..g {
            let mass: f64 = resp.column(k).sum();
            let refit = if mass >= 1.0 {
                let mean = samples
                    .iter()
                    .enumerate()
                    .fold(DVector::zeros(d), |a, (i, s)| a + s * resp[(i, k)])
                    / mass;
                let cov = samples.iter().enumerate().fold(DMatrix::zeros(d, d), |a, (i, s)| {
                    let c = s - &mean;
                    a + &c * c.transpose() * resp[(i, k)]
                }) / mass;
                regularized_cholesky(&cov).map(|l| (mass / n as f64, mean, l))
            } else {
                None
            };
            match refit {
                Some((w, m, l)) => {
                    weights[k] = w;
                    means[k] = m;
                    chols[k] = l;
                }
                None => {
                    reseeds += 1;
                    if reseeds > max_reseeds {
                        return Err(Error::Em("component keeps collapsing".into()));
                    }
                    weights[k] = 1.0 / g as f64;
                    means[k] = samples[rng.random_range(0..n)].clone();
                    chols[k] = chol_all.clone();
                    reseeded = true;
                }
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        if reseeded {
            log::warn!("EM re-seeded a degenerate component");
        }
    }
    Ok(EmFit {
        prior: GmmPrior::from_cholesky(&weights, &means, &chols)?,
        log_likelihood,
        reseeds,
    })
}

/// Prior for the toy pipeline: EM fit to a library sampled from a random
/// generating mixture.
pub fn toy_prior(dim: usize, components: usize, seed: u64) -> Result<GmmPrior> {
    let mut rng = stream(seed, Stream::Prior);
    let mut gen_means = Vec::new();
    let mut gen_chols = Vec::new();
    for _ in 0..components {
        gen_means.push(DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.8 * z
        }));
        let a: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng)) * (0.25 / (dim as f64).sqrt());
        let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.12;
        gen_chols.push(cov.cholesky().expect("diagonally loaded").l());
    }
    let weights = vec![1.0 / components as f64; components];
    let generator = GmmPrior::from_cholesky(&weights, &gen_means, &gen_chols)?;
    let library: Vec<_> = (0..400 * components).map(|_| generator.sample(&mut rng)).collect();
    Ok(fit_em(&library, components, seed, 200, 1e-10)?.prior)
}

/// On-disk form of a prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub version: u32,
    pub components: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major lower Cholesky factors.
    pub cholesky: Vec<Vec<f64>>,
}

impl From<&GmmPrior> for PriorFile {
    fn from(p: &GmmPrior) -> Self {
        let d = p.dim();
        Self {
            version: PRIOR_VERSION,
            components: p.components.len(),
            dim: d,
            weights: p.components.iter().map(|c| c.weight).collect(),
            means: p.components.iter().map(|c| c.mean.iter().cloned().collect()).collect(),
            cholesky: p
                .components
                .iter()
                .map(|c| (0..d * d).map(|i| c.chol[(i / d, i % d)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<PriorFile> for GmmPrior {
    type Error = Error;

    fn try_from(f: PriorFile) -> Result<Self> {
        if f.version != PRIOR_VERSION {
            return Err(Error::Version { kind: "prior", found: f.version, expected: PRIOR_VERSION });
        }
        let d = f.dim;
        if f.means.len() != f.components || f.cholesky.iter().any(|c| c.len() != d * d) {
            return Err(Error::InvalidPrior("prior file dimensions disagree".into()));
        }
        let means: Vec<_> = f.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        let chols: Vec<_> = f.cholesky.iter().map(|c| DMatrix::from_row_slice(d, d, c)).collect();
        GmmPrior::from_cholesky(&f.weights, &means, &chols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn standard_normal_at_mode() {
        let p = GmmPrior::standard(16);
        let lp = p.log_prob(&[0.0; 16]);
        assert!((lp + 8.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_component_density_matches_direct_sum() {
        let d = 3;
        let m1 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let m2 = DVector::from_vec(vec![6.0, -5.0, 4.0]);
        let c1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 2.0]));
        let c2 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.7, 1.5, 1.0]));
        let p = GmmPrior::new(&[0.5, 0.5], &[m1.clone(), m2.clone()], &[c1.clone(), c2.clone()]).unwrap();
        let density = |m: &DVector<f64>, c: &DMatrix<f64>, x: &DVector<f64>| {
            let diff = x - m;
            let q = (diff.transpose() * c.clone().try_inverse().unwrap() * &diff)[(0, 0)];
            (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d) * c.determinant()).sqrt()
        };
        let x = m1.clone();
        let n1 = density(&m1, &c1, &x);
        let n2 = density(&m2, &c2, &x);
        let oracle = (0.5 * n1).ln() + (1.0 + n2 / n1).ln();
        assert!((p.log_prob(x.as_slice()) - oracle).abs() < 1e-9);
    }

    #[test]
    fn log_sum_exp_is_dominated_by_the_largest_term() {
        let v = log_sum_exp(&[-1000.0, 0.0, -2000.0]);
        assert!(v.is_finite());
        assert!((v - 0.0).abs() < 1e-12);
        let far = GmmPrior::new(
            &[0.5, 0.5],
            &[DVector::zeros(1), DVector::from_element(1, 200.0)],
            &[DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap();
        let lp = far.log_prob(&[0.0]);
        assert!(lp.is_finite());
        assert!((lp - (0.5f64.ln() - 0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_definite_covariance_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GmmPrior::new(&[1.0], &[DVector::zeros(2)], &[bad]).is_err());
        assert!(GmmPrior::new(&[0.6], &[DVector::zeros(2)], &[DMatrix::identity(2, 2)]).is_err());
    }

    #[test]
    fn residual_at_the_mean_is_zero() {
        let p = toy_prior(4, 3, 9).unwrap();
        for (i, c) in p.components().iter().enumerate() {
            let r = p.residualize(c.mean.as_slice(), 1.0);
            if r.component == i {
                assert!(r.residual.norm() < 1e-14);
            }
        }
    }

    #[test]
    fn whitening_is_identity_for_unit_covariance() {
        let p = GmmPrior::from_cholesky(&[1.0], &[DVector::from_vec(vec![1.0, -2.0])], &[DMatrix::identity(2, 2)]).unwrap();
        // weight 2 cancels the one-half of the negative log-density
        let r = p.residualize(&[3.0, 0.5], 2.0);
        assert!((r.residual - DVector::from_vec(vec![2.0, 2.5])).norm() < 1e-15);
    }

    #[test]
    fn squared_residual_matches_dense_mahalanobis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = toy_prior(6, 2, 4).unwrap();
        for _ in 0..50 {
            let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r = p.residualize(&beta, 2.0);
            let c = &p.components()[r.component];
            let diff = DVector::from_column_slice(&beta) - &c.mean;
            let oracle = (diff.transpose() * c.covariance().lu().solve(&diff).unwrap())[(0, 0)];
            assert!((r.residual.norm_squared() - oracle).abs() < 1e-10 * oracle.max(1.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = toy_prior(5, 3, 1).unwrap();
        for _ in 0..50 {
            let beta: Vec<f64> = (0..5).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g = p.log_prob_gradient(&beta);
            let h = 1e-6;
            let fd = DVector::from_fn(5, |i, _| {
                let mut a = beta.clone();
                let mut b = beta.clone();
                a[i] += h;
                b[i] -= h;
                (p.log_prob(&a) - p.log_prob(&b)) / (2.0 * h)
            });
            assert!((&g - &fd).norm() / fd.norm().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn em_recovers_a_single_gaussian_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let truth = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.0]);
        let sd = 0.7;
        let n = 4000;
        let samples: Vec<_> = (0..n)
            .map(|_| &truth + DVector::from_fn(d, |_, _| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)))
            .collect();
        let fit = fit_em(&samples, 1, 2, 50, 1e-12).unwrap();
        let mean = &fit.prior.components()[0].mean;
        let se = sd / (n as f64).sqrt();
        for i in 0..d {
            assert!((mean[i] - truth[i]).abs() < 3.0 * se, "coordinate {i}");
        }
    }

    #[test]
    fn em_separates_two_blobs_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DVector::from_vec(vec![5.0, 5.0, 0.0]);
        let b = DVector::from_vec(vec![-5.0, 0.0, 4.0]);
        let mut samples = Vec::new();
        for i in 0..1200 {
            let c = if i % 2 == 0 { &a } else { &b };
            samples.push(c + DVector::from_fn(3, |_, _| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)));
        }
        let fit = fit_em(&samples, 2, 77, 200, 1e-12).unwrap();
        for center in [&a, &b] {
            let best = fit
                .prior
                .components()
                .iter()
                .map(|c| (&c.mean - center).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05 * center.norm());
        }
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_rejects_too_few_samples() {
        let samples = vec![DVector::zeros(4); 9];
        assert!(fit_em(&samples, 2, 0, 10, 1e-8).is_err());
    }

    #[test]
    fn file_round_trip_preserves_density() {
        let p = toy_prior(4, 2, 3).unwrap();
        let back = GmmPrior::try_from(PriorFile::from(&p)).unwrap();
        let beta = [0.3, -0.2, 0.5, 1.0];
        assert!((p.log_prob(&beta) - back.log_prob(&beta)).abs() < 1e-12);
    }
}
