//! Timing sweeps over landmark count and sparsity threshold, and a tracking
//! throughput run.

use serde::{Deserialize, Serialize};

use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::experiments::{neutral_init, Setup, LANDMARK_COUNTS};
use crate::landmarks::{synth_observe, NoiseScale, NoiseSpec};
use crate::metrics::vertex_rmse;
use crate::scenario::{PoseRanges, SceneSpec};
use crate::solver::{fit_model, Mode, SolveOptions, SolveReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub landmarks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub repetitions: usize,
    /// Untimed repetitions run first to warm caches and the allocator.
    pub warmup: usize,
    /// Frames of each offline problem.
    pub frames: usize,
    /// Iterations per offline fit. A fixed count keeps the work per
    /// repetition comparable across landmark counts.
    pub iterations: usize,
    pub noise_sigma: f64,
    pub tracking_frames: usize,
    pub tracking_landmarks: usize,
    /// Worker threads; `None` uses the default pool.
    pub workers: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            landmarks: LANDMARK_COUNTS.to_vec(),
            thresholds: vec![0.0, 1e-8, 1e-6],
            repetitions: 20,
            warmup: 1,
            frames: 3,
            iterations: 10,
            noise_sigma: 1.0,
            tracking_frames: 30,
            tracking_landmarks: 320,
            workers: Some(1),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self, available_landmarks: usize) -> Result<()> {
        let max = self.landmarks.iter().copied().chain([self.tracking_landmarks]).max().unwrap_or(0);
        if max > available_landmarks {
            return Err(Error::InvalidParameters(format!(
                "benchmark needs {max} landmarks, asset has {available_landmarks}"
            )));
        }
        if self.repetitions == 0 || self.frames == 0 || self.tracking_frames == 0 {
            return Err(Error::InvalidParameters("benchmark sizes must be positive".into()));
        }
        if self.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidParameters("thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// One timed fit. Times are seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub landmarks: usize,
    pub threshold: f64,
    pub repetition: usize,
    pub frames: usize,
    pub free_parameters: usize,
    pub iterations: usize,
    pub linearizations: usize,
    pub factorizations: usize,
    pub solves: usize,
    pub setup: f64,
    pub residuals: f64,
    pub accumulation: f64,
    pub factorization: f64,
    pub solve: f64,
    pub update: f64,
    pub total: f64,
    pub phase_sum: f64,
    pub accumulation_per_linearization: f64,
    pub factorization_per_call: f64,
    /// Mean per-frame wall time; tracking rows only, `0` otherwise.
    pub per_frame: f64,
    pub final_energy: f64,
    pub vertex_rmse: f64,
}

impl BenchRow {
    fn new(
        mode: Mode,
        landmarks: usize,
        threshold: f64,
        repetition: usize,
        frames: usize,
        free_parameters: usize,
        report: &SolveReport,
        vertex_rmse: f64,
    ) -> Self {
        let t = &report.times;
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            mode,
            landmarks,
            threshold,
            repetition,
            frames,
            free_parameters,
            iterations: report.iterations.len(),
            linearizations: report.linearizations,
            factorizations: report.factorizations,
            solves: report.solves,
            setup: t.setup,
            residuals: t.residuals,
            accumulation: t.accumulation,
            factorization: t.factorization,
            solve: t.solve,
            update: t.update,
            total: t.total,
            phase_sum: t.phase_sum(),
            accumulation_per_linearization: per(t.accumulation, report.linearizations),
            factorization_per_call: per(t.factorization, report.factorizations),
            per_frame: per(report.frame_seconds.iter().sum(), report.frame_seconds.len()),
            final_energy: report.final_energy,
            vertex_rmse,
        }
    }

    /// `|phase_sum - total| / total`.
    pub fn phase_gap(&self) -> f64 {
        if self.total > 0.0 {
            (self.phase_sum - self.total).abs() / self.total
        } else {
            0.0
        }
    }
}

/// Medians over repetitions for one (mode, landmarks, threshold) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub mode: Mode,
    pub landmarks: usize,
    pub threshold: f64,
    pub accumulation_per_linearization: f64,
    pub factorization_per_call: f64,
    pub per_frame: f64,
    pub total: f64,
    pub worst_phase_gap: f64,
    pub vertex_rmse: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut keys: Vec<(Mode, usize, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.mode, r.landmarks, r.threshold)) {
            keys.push((r.mode, r.landmarks, r.threshold));
        }
    }
    keys.into_iter()
        .map(|(mode, landmarks, threshold)| {
            let cell: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.mode == mode && r.landmarks == landmarks && r.threshold == threshold)
                .collect();
            let med = |f: fn(&BenchRow) -> f64| median(&mut cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            BenchSummary {
                mode,
                landmarks,
                threshold,
                accumulation_per_linearization: med(|r| r.accumulation_per_linearization),
                factorization_per_call: med(|r| r.factorization_per_call),
                per_frame: med(|r| r.per_frame),
                total: med(|r| r.total),
                worst_phase_gap: cell.iter().map(|r| r.phase_gap()).fold(0.0, f64::max),
                vertex_rmse: med(|r| r.vertex_rmse),
            }
        })
        .collect()
}

/// Offline phase medians per landmark count, pooled over thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub landmarks: usize,
    pub accumulation_per_linearization: f64,
    pub factorization_per_call: f64,
}

pub fn scaling(rows: &[BenchRow]) -> Vec<Scaling> {
    let mut counts: Vec<usize> = rows.iter().filter(|r| r.mode == Mode::Offline).map(|r| r.landmarks).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
        .into_iter()
        .map(|n| {
            let cell = || rows.iter().filter(move |r| r.mode == Mode::Offline && r.landmarks == n);
            Scaling {
                landmarks: n,
                accumulation_per_linearization: median(&mut cell().map(|r| r.accumulation_per_linearization).collect::<Vec<_>>()),
                factorization_per_call: median(&mut cell().map(|r| r.factorization_per_call).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Offline sweep: every repetition draws one scene and one noise
/// realization, then fits each landmark prefix with each threshold for a
/// fixed number of iterations. The free parameter count does not depend on
/// the landmark count.
pub fn offline_sweep(setup: &Setup, config: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    config.validate(setup.asset.landmark_bindings.len())?;
    let spec = SceneSpec { frames: config.frames, ..SceneSpec::default() };
    let noise = NoiseSpec::calibrated(NoiseScale::Constant { sigma: config.noise_sigma });
    let options = SolveOptions {
        max_iterations: config.iterations,
        gradient_tolerance: 0.0,
        step_tolerance: 0.0,
        energy_tolerance: 0.0,
        ..SolveOptions::default()
    };
    let mut rows = Vec::new();
    for rep in 0..config.warmup + config.repetitions {
        let s = seed.wrapping_add(rep as u64);
        let scene = setup.scene(&spec, s)?;
        let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &noise, s)?;
        let init = neutral_init(&scene.truth);
        for &n in &config.landmarks {
            let sub = obs.restrict_landmarks(n);
            for &threshold in &config.thresholds {
                let energy = EnergyConfig { sparsity_threshold: threshold, ..EnergyConfig::default() };
                let model = setup.model(&scene.rig, &sub, energy)?;
                let free = free_parameters(&model, &options);
                let (fit, report) = fit_model(&model, &options, &init)?;
                if rep < config.warmup {
                    continue;
                }
                let err = vertex_rmse(&setup.asset, &fit, &scene.truth)?;
                let rep = rep - config.warmup;
                rows.push(BenchRow::new(Mode::Offline, n, threshold, rep, config.frames, free, &report, err));
            }
        }
    }
    Ok(rows)
}

/// Tracking run over a smooth synthetic sequence, one row per repetition.
pub fn tracking_run(setup: &Setup, config: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    config.validate(setup.asset.landmark_bindings.len())?;
    let spec = SceneSpec {
        frames: config.tracking_frames,
        frame_step: Some(PoseRanges::smooth_steps()),
        ..SceneSpec::default()
    };
    let noise = NoiseSpec::calibrated(NoiseScale::Constant { sigma: config.noise_sigma });
    let options = SolveOptions::tracking();
    let threshold = config.thresholds.first().copied().unwrap_or(0.0);
    let energy = EnergyConfig { sparsity_threshold: threshold, ..EnergyConfig::default() };
    let mut rows = Vec::new();
    for rep in 0..config.warmup + config.repetitions {
        let s = seed.wrapping_add(rep as u64);
        let scene = setup.scene(&spec, s)?;
        let obs = synth_observe(&setup.asset, &scene.truth, &scene.rig, &noise, s)?.restrict_landmarks(config.tracking_landmarks);
        let model = setup.model(&scene.rig, &obs, energy)?;
        let (fit, report) = fit_model(&model, &options, &neutral_init(&scene.truth))?;
        if rep < config.warmup {
            continue;
        }
        let rep = rep - config.warmup;
        let err = vertex_rmse(&setup.asset, &fit, &scene.truth)?;
        let free = free_parameters(&model, &SolveOptions { mode: Mode::Offline, ..options });
        rows.push(BenchRow::new(
            Mode::Tracking,
            config.tracking_landmarks,
            threshold,
            rep,
            config.tracking_frames,
            free,
            &report,
            err,
        ));
    }
    Ok(rows)
}

fn free_parameters(model: &crate::energy::EnergyModel<'_>, options: &SolveOptions) -> usize {
    let layout = model.layout();
    let frames: Vec<usize> = (0..model.observations.frames).collect();
    crate::layout::ActiveSet::for_scope(&layout, model.rig, &options.fix, &frames, true, true).len()
}

/// Both sweeps on the configured worker pool.
pub fn run(setup: &Setup, config: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    crate::workers::with_workers(config.workers, || {
        let mut rows = offline_sweep(setup, config, seed)?;
        rows.extend(tracking_run(setup, config, seed)?);
        Ok(rows)
    })?
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidParameters(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameters(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidParameters(format!("csv: {e}")))
}
