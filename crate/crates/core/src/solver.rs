//! Damped Levenberg-Marquardt with direct per-block accumulation of the normal
//! equations, plus a dense reference implementation used as an oracle.

use web_time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::energy::{EnergyConfig, EnergyModel, ResidualSystem, Scope, TermEnergies};
use crate::error::{Error, Result};
use crate::face_model::{ModelAsset, Parameters};
use crate::landmarks::ObservationSet;
use crate::layout::{ActiveSet, FixMask};
use crate::priors::GmmPrior;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// All frames jointly, every free parameter active.
    #[default]
    Offline,
    /// Frame by frame; identity and cameras only move at refresh frames.
    Tracking,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Iteration cap per frame in tracking mode.
    pub tracking_max_iterations: usize,
    pub initial_damping: f64,
    pub damping_down: f64,
    pub damping_up: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub energy_tolerance: f64,
    pub mode: Mode,
    /// Identity and cameras are re-optimized every this many frames in
    /// tracking mode (frame 0 always refreshes).
    pub refresh_interval: usize,
    pub fix: FixMask,
    /// Damping increases tried after a failed factorization.
    pub factorization_retries: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tracking_max_iterations: 10,
            initial_damping: 1e-3,
            damping_down: 3.0,
            damping_up: 5.0,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            energy_tolerance: 1e-12,
            mode: Mode::Offline,
            refresh_interval: 10,
            fix: FixMask::default(),
            factorization_retries: 12,
        }
    }
}

impl SolveOptions {
    pub fn tracking() -> Self {
        Self { mode: Mode::Tracking, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_damping > 0.0) {
            return Err(Error::Domain("initial damping must be positive".into()));
        }
        let tolerances = [self.gradient_tolerance, self.step_tolerance, self.energy_tolerance];
        if tolerances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("tolerances must be non-negative".into()));
        }
        if !(self.damping_down > 1.0 && self.damping_up > 1.0) {
            return Err(Error::Domain("damping factors must exceed 1".into()));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Domain("refresh interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    Energy,
    MaxIterations,
    DampingLimit,
    /// Nothing to optimize.
    NoFreeParameters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Frame being tracked, absent in offline mode.
    pub frame: Option<usize>,
    pub accepted: bool,
    /// Exact total energy after the accept/reject decision.
    pub energy: f64,
    pub terms: TermEnergies,
    /// Exact energy at the trial point.
    pub trial_energy: f64,
    pub damping: f64,
    pub step_norm: f64,
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    /// Building residual blocks and sparsity sets.
    pub setup: f64,
    pub residuals: f64,
    pub accumulation: f64,
    pub factorization: f64,
    pub solve: f64,
    /// Parameter updates and convergence bookkeeping.
    pub update: f64,
    pub total: f64,
}

impl PhaseTimes {
    pub fn phase_sum(&self) -> f64 {
        self.setup + self.residuals + self.accumulation + self.factorization + self.solve + self.update
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub mode: Mode,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub final_terms: TermEnergies,
    pub iterations: Vec<IterationRecord>,
    pub accepted_steps: usize,
    /// Infinity norm of `J^T r` at the last linearization.
    pub final_gradient_norm: f64,
    pub times: PhaseTimes,
    pub factorizations: usize,
    /// Normal-equation builds.
    pub linearizations: usize,
    /// Linear solves (one per attempted step).
    pub solves: usize,
    /// Factorizations that needed the diagonal floor.
    pub floored: usize,
    /// One entry per solved scope (a single entry in offline mode).
    pub terminations: Vec<Termination>,
    /// Exact energy at the start of each solved scope.
    pub scope_start_energies: Vec<f64>,
    /// Seconds spent on each frame in tracking mode.
    pub frame_seconds: Vec<f64>,
    pub dropped_blocks: usize,
}

impl SolveReport {
    pub fn termination(&self) -> Option<Termination> {
        self.terminations.last().copied()
    }

    /// Exact energies of one scope (`None` in offline mode, else a tracked
    /// frame): its starting energy followed by the energy after each accepted step.
    pub fn accepted_energies(&self, frame: Option<usize>) -> Vec<f64> {
        let scope = frame.unwrap_or(0);
        let mut out = vec![self.scope_start_energies[scope]];
        out.extend(
            self.iterations
                .iter()
                .filter(|r| r.accepted && r.frame == frame)
                .map(|r| r.energy),
        );
        out
    }
}

/// `J^T J` (full symmetric storage) and `J^T r` over the active parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub jtj: DMatrix<f64>,
    pub jtr: DVector<f64>,
}

impl NormalEquations {
    pub fn zeros(n: usize) -> Self {
        Self { jtj: DMatrix::zeros(n, n), jtr: DVector::zeros(n) }
    }
}

/// Visits each block once and adds its outer product, confined to the block's
/// parameter set. Jacobian entries with magnitude below `threshold` are skipped.
pub fn accumulate_normal_equations(system: &ResidualSystem, threshold: f64) -> NormalEquations {
    let mut ne = NormalEquations::zeros(system.active.len());
    for (block, value) in system.blocks.iter().zip(&system.values) {
        let m = block.active.len();
        if m == 0 || !value.valid {
            continue;
        }
        let jac = value.jacobian.as_ref().expect("system evaluated with jacobian");
        let pruned;
        let j = if threshold > 0.0 {
            pruned = jac.map(|v| if v.abs() < threshold { 0.0 } else { v });
            &pruned
        } else {
            jac
        };
        let jtj = j.tr_mul(j);
        let jtr = j.tr_mul(&value.residual);
        for (a, &ga) in block.active.iter().enumerate() {
            ne.jtr[ga] += jtr[a];
            for (b, &gb) in block.active.iter().enumerate() {
                ne.jtj[(ga, gb)] += jtj[(a, b)];
            }
        }
    }
    ne
}

/// Normal equations from the fully materialized Jacobian.
pub fn dense_normal_equations(system: &ResidualSystem) -> NormalEquations {
    let j = system.dense_jacobian();
    let r = system.residual_vector();
    NormalEquations { jtj: j.tr_mul(&j), jtr: j.tr_mul(&r) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub delta: DVector<f64>,
    /// Damping that produced a successful factorization.
    pub damping: f64,
    pub floored: bool,
    pub factorizations: usize,
    pub factorization_seconds: f64,
    pub solve_seconds: f64,
}

/// Solves `(J^T J + damping diag(J^T J)) delta = -J^T r` by Cholesky.
pub fn lm_step(ne: &NormalEquations, damping: f64) -> Result<Step> {
    let o = SolveOptions::default();
    lm_step_with(ne, damping, o.damping_up, o.factorization_retries)
}

/// As [`lm_step`]. If the damped matrix is not positive definite, a diagonal
/// floor of `1e-12 * max(diag)` is added once, then damping is raised by
/// `damping_up` up to `retries` times.
pub fn lm_step_with(ne: &NormalEquations, damping: f64, damping_up: f64, retries: usize) -> Result<Step> {
    const FLOOR: f64 = 1e-12;
    if !(damping > 0.0) {
        return Err(Error::Domain("damping must be positive".into()));
    }
    let n = ne.jtr.len();
    let diag = ne.jtj.diagonal();
    let max_diag = diag.iter().copied().fold(0.0, f64::max);
    let mut lambda = damping;
    let mut floor = 0.0;
    let mut floored = false;
    let mut factorizations = 0;
    let mut fact_time = 0.0;
    let mut attempt = 0;
    loop {
        let mut a = ne.jtj.clone();
        for i in 0..n {
            a[(i, i)] += lambda * diag[i] + floor;
        }
        let t = Instant::now();
        let chol = a.cholesky();
        fact_time += t.elapsed().as_secs_f64();
        factorizations += 1;
        if let Some(chol) = chol {
            let t = Instant::now();
            let delta = chol.solve(&(-&ne.jtr));
            let solve_seconds = t.elapsed().as_secs_f64();
            if delta.iter().all(|v| v.is_finite()) {
                return Ok(Step {
                    delta,
                    damping: lambda,
                    floored,
                    factorizations,
                    factorization_seconds: fact_time,
                    solve_seconds,
                });
            }
        }
        if !floored {
            floored = true;
            floor = FLOOR * max_diag;
            continue;
        }
        if attempt >= retries {
            return Err(Error::Solver(format!(
                "Cholesky failed after {factorizations} attempts (n = {n}, max diag = {max_diag:e}, damping = {lambda:e})"
            )));
        }
        attempt += 1;
        lambda *= damping_up;
    }
}

struct Driver<'m, 'a> {
    model: &'m EnergyModel<'a>,
    options: SolveOptions,
    dense: bool,
    threshold: f64,
    report: SolveReport,
}

const MAX_DAMPING: f64 = 1e16;

impl<'m, 'a> Driver<'m, 'a> {
    fn normal_equations(&mut self, system: &ResidualSystem) -> NormalEquations {
        let t = Instant::now();
        let ne = if self.dense {
            dense_normal_equations(system)
        } else {
            accumulate_normal_equations(system, self.threshold)
        };
        self.report.times.accumulation += t.elapsed().as_secs_f64();
        self.report.linearizations += 1;
        ne
    }

    fn evaluate(&mut self, system: &mut ResidualSystem, params: &Parameters) -> Result<TermEnergies> {
        let t = Instant::now();
        let e = system.evaluate(self.model, params, true);
        self.report.times.residuals += t.elapsed().as_secs_f64();
        e
    }

    /// Runs LM on one scope, updating `params` in place.
    fn solve_scope(
        &mut self,
        params: &mut Parameters,
        active: &ActiveSet,
        scope: Scope,
        frame: Option<usize>,
        max_iterations: usize,
    ) -> Result<()> {
        let t = Instant::now();
        let mut system = self.model.assemble(active, scope)?;
        self.report.times.setup += t.elapsed().as_secs_f64();
        let out = self.iterate(&mut system, params, active, frame, max_iterations);
        let t = Instant::now();
        drop(system);
        self.report.times.setup += t.elapsed().as_secs_f64();
        out
    }

    fn iterate(
        &mut self,
        system: &mut ResidualSystem,
        params: &mut Parameters,
        active: &ActiveSet,
        frame: Option<usize>,
        max_iterations: usize,
    ) -> Result<()> {
        let t = Instant::now();
        let layout = system.layout;
        let mut x = layout.flatten(params);
        self.report.times.setup += t.elapsed().as_secs_f64();

        let mut energy = self.evaluate(system, params)?;
        if !energy.total().is_finite() {
            return Err(Error::Solver(format!("non-finite initial energy {}", energy.total())));
        }
        self.report.scope_start_energies.push(energy.total());
        let finish = |report: &mut SolveReport, why: Termination, e: &TermEnergies, sys: &ResidualSystem| {
            report.terminations.push(why);
            report.final_terms = *e;
            report.final_energy = e.total();
            report.dropped_blocks = sys.dropped;
        };
        if active.is_empty() {
            finish(&mut self.report, Termination::NoFreeParameters, &energy, system);
            return Ok(());
        }
        let mut damping = self.options.initial_damping;
        let mut ne = self.normal_equations(system);
        let mut iterations = 0;
        loop {
            let grad_norm = ne.jtr.amax();
            self.report.final_gradient_norm = grad_norm;
            if grad_norm < self.options.gradient_tolerance {
                finish(&mut self.report, Termination::Gradient, &energy, system);
                return Ok(());
            }
            if iterations >= max_iterations {
                finish(&mut self.report, Termination::MaxIterations, &energy, system);
                return Ok(());
            }
            iterations += 1;
            let step = lm_step_with(&ne, damping, self.options.damping_up, self.options.factorization_retries)?;
            self.report.times.factorization += step.factorization_seconds;
            self.report.times.solve += step.solve_seconds;
            self.report.factorizations += step.factorizations;
            self.report.solves += 1;
            self.report.floored += step.floored as usize;
            damping = step.damping;

            let t = Instant::now();
            let step_norm = step.delta.norm();
            let x_norm: f64 = active.indices().iter().map(|&g| x[g] * x[g]).sum::<f64>().sqrt();
            let mut trial_x = x.clone();
            for (a, &g) in active.indices().iter().enumerate() {
                trial_x[g] += step.delta[a];
            }
            let trial = layout.unflatten(&trial_x);
            self.report.times.update += t.elapsed().as_secs_f64();
            if step_norm < self.options.step_tolerance * (x_norm + self.options.step_tolerance) {
                finish(&mut self.report, Termination::Step, &energy, system);
                return Ok(());
            }

            let saved = std::mem::take(&mut system.values);
            let trial_energy = self.evaluate(system, &trial)?;
            let accepted = trial_energy.total().is_finite() && trial_energy.total() < energy.total();
            let t = Instant::now();
            if accepted {
                let decrease = energy.total() - trial_energy.total();
                let previous = energy.total();
                energy = trial_energy;
                x = trial_x;
                *params = trial;
                drop(saved);
                damping /= self.options.damping_down;
                self.report.accepted_steps += 1;
                self.report.times.update += t.elapsed().as_secs_f64();
                self.record(frame, true, &energy, trial_energy.total(), damping, step_norm);
                if decrease <= self.options.energy_tolerance * previous.abs() {
                    finish(&mut self.report, Termination::Energy, &energy, system);
                    return Ok(());
                }
                ne = self.normal_equations(system);
            } else {
                system.values = saved;
                damping *= self.options.damping_up;
                self.report.times.update += t.elapsed().as_secs_f64();
                self.record(frame, false, &energy, trial_energy.total(), damping, step_norm);
                if damping > MAX_DAMPING {
                    finish(&mut self.report, Termination::DampingLimit, &energy, system);
                    return Ok(());
                }
            }
        }
    }

    fn record(&mut self, frame: Option<usize>, accepted: bool, e: &TermEnergies, trial: f64, damping: f64, step_norm: f64) {
        self.report.iterations.push(IterationRecord {
            frame,
            accepted,
            energy: e.total(),
            terms: *e,
            trial_energy: trial,
            damping,
            step_norm,
        });
    }
}

/// Fits `init` to the observations. See [`Mode`] for the two strategies.
pub fn fit_model(model: &EnergyModel<'_>, options: &SolveOptions, init: &Parameters) -> Result<(Parameters, SolveReport)> {
    run(model, options, init, false)
}

/// The same LM loop with normal equations formed from the dense Jacobian and
/// no magnitude pruning.
pub fn fit_dense_reference_model(
    model: &EnergyModel<'_>,
    options: &SolveOptions,
    init: &Parameters,
) -> Result<(Parameters, SolveReport)> {
    run(model, options, init, true)
}

#[allow(clippy::too_many_arguments)]
pub fn fit(
    asset: &ModelAsset,
    observations: &ObservationSet,
    rig: &CameraRig,
    prior: Option<&GmmPrior>,
    config: &EnergyConfig,
    options: &SolveOptions,
    init: &Parameters,
) -> Result<(Parameters, SolveReport)> {
    let model = EnergyModel::new(asset, rig, observations, prior, *config)?;
    fit_model(&model, options, init)
}

#[allow(clippy::too_many_arguments)]
pub fn fit_dense_reference(
    asset: &ModelAsset,
    observations: &ObservationSet,
    rig: &CameraRig,
    prior: Option<&GmmPrior>,
    config: &EnergyConfig,
    options: &SolveOptions,
    init: &Parameters,
) -> Result<(Parameters, SolveReport)> {
    let model = EnergyModel::new(asset, rig, observations, prior, *config)?;
    fit_dense_reference_model(&model, options, init)
}

fn run(model: &EnergyModel<'_>, options: &SolveOptions, init: &Parameters, dense: bool) -> Result<(Parameters, SolveReport)> {
    options.validate()?;
    let start = Instant::now();
    let mut driver = Driver {
        model,
        options: *options,
        dense,
        threshold: if dense { 0.0 } else { model.config.sparsity_threshold },
        report: SolveReport { mode: options.mode, ..SolveReport::default() },
    };
    let mut params = init.clone();
    let layout = model.layout();
    let frames = model.observations.frames;
    match options.mode {
        Mode::Offline => {
            let t = Instant::now();
            let all: Vec<usize> = (0..frames).collect();
            let active = ActiveSet::for_scope(&layout, model.rig, &options.fix, &all, true, true);
            driver.report.times.setup += t.elapsed().as_secs_f64();
            driver.solve_scope(&mut params, &active, Scope::All, None, options.max_iterations)?;
            driver.report.initial_energy = driver.report.scope_start_energies[0];
        }
        Mode::Tracking => {
            let t = Instant::now();
            let initial = total_energy(model, init)?;
            driver.report.times.setup += t.elapsed().as_secs_f64();
            driver.report.initial_energy = initial.total();
            for f in 0..frames {
                let frame_start = Instant::now();
                if f > 0 {
                    params.psi[f] = params.psi[f - 1].clone();
                    params.theta[f] = params.theta[f - 1].clone();
                }
                let refresh = f % options.refresh_interval == 0;
                let active = ActiveSet::for_scope(&layout, model.rig, &options.fix, &[f], refresh, refresh);
                driver.report.times.setup += frame_start.elapsed().as_secs_f64();
                driver.solve_scope(&mut params, &active, Scope::Frame(f), Some(f), options.tracking_max_iterations)?;
                driver.report.frame_seconds.push(frame_start.elapsed().as_secs_f64());
            }
            let t = Instant::now();
            let fin = total_energy(model, &params)?;
            driver.report.times.setup += t.elapsed().as_secs_f64();
            driver.report.final_terms = fin;
            driver.report.final_energy = fin.total();
        }
    }
    driver.report.times.total = start.elapsed().as_secs_f64();
    Ok((params, driver.report))
}

/// Exact energy of `params` over all frames.
pub fn total_energy(model: &EnergyModel<'_>, params: &Parameters) -> Result<TermEnergies> {
    let layout = model.layout();
    let all: Vec<usize> = (0..model.observations.frames).collect();
    let active = ActiveSet::for_scope(&layout, model.rig, &FixMask::default(), &all, true, true);
    let mut system = model.assemble(&active, Scope::All)?;
    system.evaluate(model, params, false)
}
