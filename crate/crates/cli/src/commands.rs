use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use facefit::bench;
use facefit::camera::CameraRig;
use facefit::experiments::{neutral_init, Setup};
use facefit::face_model::{mesh_generate, toy, ModelAsset, Parameters};
use facefit::io::{load, obj_string, save, Meta, Payload};
use facefit::landmarks::{synth_observe, ObservationSet};
use facefit::metrics::evaluate;
use facefit::priors::{toy_prior, GmmPrior, PriorFile};
use facefit::scenario::{build_scene, perturb};
use facefit::solver::fit;

use crate::config::{InitKind, RunConfig};

fn meta(config: &RunConfig) -> Result<Meta> {
    Ok(Meta::new(config.seed, config)?)
}

fn write<T: Payload>(config: &RunConfig, path: &Path, data: &T) -> Result<()> {
    let full = config.resolve(path);
    if let Some(dir) = full.parent() {
        fs::create_dir_all(dir)?;
    }
    save(&full, data, &meta(config)?).with_context(|| format!("writing {}", full.display()))?;
    log::info!("wrote {}", full.display());
    Ok(())
}

fn read<T: Payload>(config: &RunConfig, path: &Path) -> Result<T> {
    let full = config.resolve(path);
    let (data, _) = load(&full).with_context(|| format!("reading {}", full.display()))?;
    Ok(data)
}

fn read_prior(config: &RunConfig) -> Result<GmmPrior> {
    Ok(GmmPrior::try_from(read::<PriorFile>(config, &config.paths.prior)?)?)
}

/// Toy asset and its identity prior.
pub fn synth_asset(config: &RunConfig) -> Result<()> {
    let asset = toy::generate(&config.asset.spec, config.seed)?;
    let prior = toy_prior(asset.n_beta, config.asset.prior_components, config.seed)?;
    write(config, &config.paths.asset, &asset)?;
    write(config, &config.paths.prior, &PriorFile::from(&prior))?;
    Ok(())
}

/// Ground-truth scene, its rig and the observations it produces.
pub fn synth_obs(config: &RunConfig) -> Result<()> {
    let p = &config.paths;
    config.require(&[&p.asset, &p.prior])?;
    let asset: ModelAsset = read(config, &p.asset)?;
    let prior = read_prior(config)?;
    let scene = build_scene(&asset, &prior, &config.scene, config.seed)?;
    let obs = synth_observe(&asset, &scene.truth, &scene.rig, &config.noise, config.seed)?;
    write(config, &p.rig, &scene.rig)?;
    write(config, &p.observations, &obs)?;
    write(config, &p.ground_truth, &scene.truth)?;
    Ok(())
}

fn initial_parameters(config: &RunConfig, asset: &ModelAsset, obs: &ObservationSet) -> Result<Parameters> {
    let p = &config.paths;
    let init = match config.fit.init {
        InitKind::File => {
            let Some(path) = &p.init else { bail!("fit.init = \"file\" needs paths.init") };
            config.require(&[path])?;
            read(config, path)?
        }
        kind => {
            config.require(&[&p.ground_truth])?;
            let truth: Parameters = read(config, &p.ground_truth)?;
            match kind {
                InitKind::Truth => truth,
                InitKind::Neutral => neutral_init(&truth),
                _ => perturb(&truth, &config.fit.perturbation, config.seed),
            }
        }
    };
    init.validate(asset)?;
    if init.frames() != obs.frames || init.cameras() != obs.cameras {
        bail!(
            "initial parameters cover {} frames and {} cameras, observations {} and {}",
            init.frames(),
            init.cameras(),
            obs.frames,
            obs.cameras
        );
    }
    Ok(init)
}

pub fn run_fit(config: &RunConfig) -> Result<()> {
    let p = &config.paths;
    config.require(&[&p.asset, &p.prior, &p.rig, &p.observations])?;
    let asset: ModelAsset = read(config, &p.asset)?;
    let prior = read_prior(config)?;
    let rig: CameraRig = read(config, &p.rig)?;
    let obs: ObservationSet = read(config, &p.observations)?;
    let init = initial_parameters(config, &asset, &obs)?;
    let (params, report) = facefit::workers::with_workers(config.workers, || {
        fit(&asset, &obs, &rig, Some(&prior), &config.energy, &config.solve, &init)
    })??;
    write(config, &p.parameters, &params)?;
    write(config, &p.report, &report)?;
    if config.fit.export_meshes {
        let dir = config.resolve(&p.meshes);
        fs::create_dir_all(&dir)?;
        let header = mesh_header(config)?;
        for f in 0..params.frames() {
            let verts = mesh_generate(&asset, &params, f)?;
            let path = dir.join(format!("frame_{f:04}.obj"));
            fs::write(&path, header.clone() + &obj_string(&verts, &asset.faces))?;
        }
    }
    println!(
        "fit: energy {:.6e} -> {:.6e}, {} accepted steps, {:.3}s, {:?}",
        report.initial_energy,
        report.final_energy,
        report.accepted_steps,
        report.times.total,
        report.termination()
    );
    Ok(())
}

fn mesh_header(config: &RunConfig) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "# facefit seed {}", config.seed)?;
    writeln!(s, "# config {}", serde_json::to_string(config)?)?;
    Ok(s)
}

pub fn run_eval(config: &RunConfig) -> Result<()> {
    let p = &config.paths;
    config.require(&[&p.asset, &p.parameters, &p.ground_truth])?;
    let asset: ModelAsset = read(config, &p.asset)?;
    let fitted: Parameters = read(config, &p.parameters)?;
    let truth: Parameters = read(config, &p.ground_truth)?;
    let observed = config.resolve(&p.observations).is_file() && config.resolve(&p.rig).is_file();
    let (rig, obs) = if observed {
        (read::<CameraRig>(config, &p.rig)?, Some(read::<ObservationSet>(config, &p.observations)?))
    } else {
        (CameraRig { cameras: Vec::new() }, None)
    };
    let metrics = evaluate(&asset, &rig, &fitted, &truth, obs.as_ref())?;
    write(config, &p.metrics, &metrics)?;
    println!(
        "eval: vertex rmse {:.6e}, identity rmse {:.6e}, reprojection {}",
        metrics.vertex_rmse,
        metrics.identity_shape_rmse,
        metrics.reprojection_rmse.map_or("n/a".to_string(), |r| format!("{r:.6e} px"))
    );
    Ok(())
}

pub fn run_bench(config: &RunConfig) -> Result<()> {
    let setup = Setup::new(&config.bench.asset, config.seed)?;
    let mut matrix = config.bench.matrix.clone();
    if config.workers.is_some() {
        matrix.workers = config.workers;
    }
    let rows = bench::run(&setup, &matrix, config.seed)?;
    let summary = bench::summarize(&rows);
    let mut text = mesh_header(config)?;
    text.push_str(&bench::csv_string(&rows)?);
    let path = config.resolve(&config.paths.bench);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, text)?;
    let summary_path = path.with_extension("summary.csv");
    fs::write(&summary_path, mesh_header(config)? + &bench::csv_string(&summary)?)?;
    for s in &summary {
        println!(
            "bench {:?} |L|={} eps={:e}: accumulation {:.3} ms, cholesky {:.4} ms, per-frame {:.3} ms, worst phase gap {:.2}%",
            s.mode,
            s.landmarks,
            s.threshold,
            1e3 * s.accumulation_per_linearization,
            1e3 * s.factorization_per_call,
            1e3 * s.per_frame,
            100.0 * s.worst_phase_gap
        );
    }
    Ok(())
}
