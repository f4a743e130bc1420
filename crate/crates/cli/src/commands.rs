use std::fs;
use std::path::Path;
use std::time::Instant;

use perimotion::flow::{deform_mesh_on_grid, integrate_grid};
use perimotion::mesh::TriangleMesh;
use perimotion::metrics::{evaluate_fit, EvalConfig, GroundTruth};
use perimotion::neural_field::VelocityFieldModel;
use perimotion::training::{fit as fit_model, EpochLoss, FitConfig, FitReport, Precision};
use perimotion::volume::{make_sphere_series, read_v4d, write_v4d, GrowthKind, SphereSeriesConfig, Volume4D, VolumeError};
use serde_json::json;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::plot::{line_chart, Series};
use crate::args::{DeformArgs, EvalArgs, FitArgs, GenArgs};

fn frame_file(i: usize) -> String {
    format!("frame_{i:03}.obj")
}

/// Writes `text` to `out/rel` and records it in the manifest.
fn emit(out: &Path, rel: &str, text: &str, manifest: &mut RunManifest) -> Result<(), CliError> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::file(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| CliError::file(&path, e))?;
    manifest.add_output(out, rel)
}

fn emit_mesh(out: &Path, rel: &str, mesh: &TriangleMesh, manifest: &mut RunManifest) -> Result<(), CliError> {
    emit(out, rel, &mesh.to_obj_string(), manifest)
}

fn finish(mut manifest: RunManifest, start: Instant, out: &Path) -> Result<(), CliError> {
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    let path = manifest.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn positive(flag: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::usage(format!("{flag} must be a positive number, got {v}")))
    }
}

fn read_volume(path: &Path) -> Result<Volume4D, CliError> {
    read_v4d(path).map_err(|e| CliError::file(path, e))
}

fn read_model(path: &Path) -> Result<VelocityFieldModel<f32>, CliError> {
    VelocityFieldModel::load(path).map_err(|e| CliError::file(path, e))
}

fn read_mesh(path: &Path) -> Result<TriangleMesh, CliError> {
    TriangleMesh::read_obj(path).map_err(|e| CliError::file(path, e))
}

pub fn gen(args: &GenArgs, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    if args.grid < 4 {
        return Err(CliError::usage(format!("--grid must be at least 4, got {}", args.grid)));
    }
    if args.frames < 2 {
        return Err(CliError::usage(format!("--frames must be at least 2, got {}", args.frames)));
    }
    let mut cfg = SphereSeriesConfig::for_pattern(args.pattern, args.grid, args.frames)
        .with_spacing(positive("--spacing", args.spacing)?);
    cfg.subdivisions = args.subdivisions;
    if let Some(r) = args.radius {
        let r = positive("--radius", r)?;
        if cfg.pattern.kind == GrowthKind::Periodic && args.amplitude.is_none() {
            cfg.pattern.parameter *= r / cfg.pattern.base_radius_mm;
        }
        cfg.pattern.base_radius_mm = r;
    }
    if let Some(w) = args.edge_width {
        cfg.edge_width_mm = positive("--edge-width", w)?;
    }
    match (cfg.pattern.kind, args.rate, args.amplitude) {
        (GrowthKind::Periodic, Some(_), _) => {
            return Err(CliError::usage("--rate applies to linear and exponential patterns; use --amplitude"))
        }
        (GrowthKind::Linear | GrowthKind::Exponential, _, Some(_)) => {
            return Err(CliError::usage("--amplitude applies to the periodic pattern; use --rate"))
        }
        (_, Some(rate), _) if !rate.is_finite() => {
            return Err(CliError::usage(format!("--rate must be finite, got {rate}")))
        }
        (_, Some(rate), _) => cfg.pattern.parameter = rate,
        (_, _, Some(a)) if !(a >= 0.0 && a.is_finite()) => {
            return Err(CliError::usage(format!("--amplitude must be a non-negative number, got {a}")))
        }
        (_, _, Some(a)) => cfg.pattern.parameter = a,
        _ => {}
    }
    let series = make_sphere_series(&cfg).map_err(|e| match e {
        VolumeError::SphereExceedsGrid { .. } | VolumeError::NonPositiveRadius { .. } => CliError::usage(format!(
            "--radius/--{}: {e}",
            if cfg.pattern.kind == GrowthKind::Periodic { "amplitude" } else { "rate" }
        )),
        VolumeError::InvalidParameter(_) => CliError::usage(e.to_string()),
        e => CliError::Data(e.to_string()),
    })?;

    let mut manifest = RunManifest::new("gen", None, serde_json::to_value(&cfg).expect("config serializes"));
    let v4d = out.join("volume.v4d");
    write_v4d(&series.volume, &v4d).map_err(|e| CliError::file(&v4d, e))?;
    manifest.add_output(out, "volume.v4d")?;
    for (i, mesh) in series.meshes.iter().enumerate() {
        emit_mesh(out, &format!("meshes/{}", frame_file(i)), mesh, &mut manifest)?;
    }
    let mut radii = String::from("frame,t,radius_mm\n");
    for (i, (t, r)) in series.volume.frame_times().iter().zip(&series.radii_mm).enumerate() {
        radii.push_str(&format!("{i},{t:?},{r:?}\n"));
    }
    emit(out, "radii.csv", &radii, &mut manifest)?;
    log::info!(
        "generated {} frames of a {}^3 {:?} sphere in {}",
        args.frames,
        args.grid,
        args.pattern,
        out.display()
    );
    finish(manifest, start, out)
}

fn effective_config(args: &FitArgs, workers: Option<usize>) -> Result<FitConfig, CliError> {
    let mut cfg = FitConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        cfg.apply_kv(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    let shortcuts = [
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("points_per_epoch", args.points.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("learning_rate", args.lr.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("precision", args.precision.map(|v| v.to_string())),
        ("sampling", args.sampling.map(|v| v.to_string())),
        ("cycle_enabled", args.no_cycle.then(|| "false".to_string())),
        ("time_encoding", args.no_time_encoding.then(|| "false".to_string())),
        ("workers", workers.map(|v| v.to_string())),
    ];
    for (key, value) in shortcuts {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn fit(args: &FitArgs, workers: Option<usize>, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = effective_config(args, workers)?;
    let volume = read_volume(&args.volume)?;
    print!("{}", cfg.to_kv_string());
    let every = (cfg.epochs / 20).max(1);
    let last = cfg.epochs.saturating_sub(1);
    let progress = |e: &EpochLoss| {
        if e.epoch % every == 0 || e.epoch == last {
            log::info!(
                "epoch {:>5}: data {:.4e}  cycle {:.4e}  total {:.4e}",
                e.epoch,
                e.data_loss,
                e.cycle_loss,
                e.total
            );
        }
    };
    let (model, mut report): (VelocityFieldModel<f32>, FitReport) = match cfg.precision {
        Precision::F32 => fit_model::<f32>(&volume, &cfg, progress)?,
        Precision::F64 => {
            let (m, r) = fit_model::<f64>(&volume, &cfg, progress)?;
            log::info!("checkpoint stores f32 parameters; the f64 model is rounded");
            (m.cast(), r)
        }
    };

    let mut manifest = RunManifest::new("fit", Some(cfg.seed), serde_json::to_value(&cfg).expect("config serializes"));
    manifest.add_input(&args.volume)?;
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    let ckpt = out.join("model.vfield");
    model.save(&ckpt).map_err(|e| CliError::file(&ckpt, e))?;
    manifest.add_output(out, "model.vfield")?;
    report.checkpoint = Some("model.vfield".to_string());
    emit(out, "loss.csv", &report.loss_csv(), &mut manifest)?;
    emit(out, "config.txt", &cfg.to_kv_string(), &mut manifest)?;
    emit(out, "fit_summary.json", &(report.summary_json() + "\n"), &mut manifest)?;
    log::info!("fit finished in {:.1} s", report.wall_time_s);
    finish(manifest, start, out)
}

/// Requested times mapped into `[0, period]`, in request order.
fn checked_times(times: &[f64], period: f64, wrap: bool) -> Result<Vec<f64>, CliError> {
    times
        .iter()
        .map(|&t| {
            if !t.is_finite() {
                Err(CliError::usage(format!("--times: {t} is not a finite time")))
            } else if (0.0..=period).contains(&t) {
                Ok(t)
            } else if wrap {
                Ok(t.rem_euclid(period))
            } else {
                Err(CliError::usage(format!(
                    "--times: {t} is outside [0, {period}]; pass --wrap to map it into one period"
                )))
            }
        })
        .collect()
}

/// Uniform steps of `1 / steps` merged with the requested times, plus the
/// grid index of each requested time.
fn merged_grid(times: &[f64], steps: usize) -> (Vec<f64>, Vec<usize>) {
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let mut grid: Vec<f64> = (0..)
        .map(|k| k as f64 / steps as f64)
        .take_while(|&t| t < t_max)
        .chain(times.iter().copied())
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let indices = times
        .iter()
        .map(|t| grid.binary_search_by(|g| g.total_cmp(t)).expect("time is on the grid"))
        .collect();
    (grid, indices)
}

pub fn deform(args: &DeformArgs, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    if args.steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }
    let model = read_model(&args.checkpoint)?;
    let mesh = read_mesh(&args.mesh)?;
    let normalizer = read_volume(&args.volume)?.normalizer();
    let times = checked_times(&args.times, model.period(), args.wrap)?;
    let (grid, indices) = merged_grid(&times, args.steps);

    let meshes = if grid.len() < 2 {
        vec![mesh.clone(); times.len()]
    } else {
        deform_mesh_on_grid(&model, &mesh, &normalizer, &grid, &indices)?
    };
    let config = json!({ "times": times, "requested_times": args.times, "steps_per_unit_time": args.steps, "wrap": args.wrap });
    let mut manifest = RunManifest::new("deform", None, config);
    for p in [&args.checkpoint, &args.mesh, &args.volume] {
        manifest.add_input(p)?;
    }
    let mut index = String::from("output,t\n");
    for (k, (m, t)) in meshes.iter().zip(&times).enumerate() {
        let rel = format!("deformed_{k:03}.obj");
        emit_mesh(out, &rel, m, &mut manifest)?;
        index.push_str(&format!("{rel},{t:?}\n"));
    }
    emit(out, "times.csv", &index, &mut manifest)?;
    if args.trajectory_points > 0 && grid.len() >= 2 {
        let n = mesh.vertices().len();
        let count = args.trajectory_points.min(n);
        let seeds: Vec<[f32; 3]> = (0..count)
            .map(|i| normalizer.to_normalized(mesh.vertices()[i * n / count]).map(|c| c as f32))
            .collect();
        let traj = integrate_grid(&model, &seeds, &grid)?;
        emit(out, "trajectory.csv", &traj.to_csv(&normalizer), &mut manifest)?;
    }
    log::info!("wrote {} deformed meshes", meshes.len());
    finish(manifest, start, out)
}

fn read_loss_csv(path: &Path) -> Result<Vec<[f64; 4]>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let vals: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            match vals {
                Ok(v) if v.len() == 4 => Ok([v[0], v[1], v[2], v[3]]),
                _ => Err(CliError::file(path, format!("line {}: expected epoch,data,cycle,total", n + 1))),
            }
        })
        .collect()
}

fn loss_chart(rows: &[[f64; 4]]) -> String {
    let col = |c: usize| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| r[c] > 0.0)
            .map(|r| (r[0], r[c].log10()))
            .collect()
    };
    line_chart(
        "Loss history",
        "epoch",
        "log10 loss",
        &[
            Series::new("total", "black", col(3)),
            Series::new("data", "steelblue", col(1)),
            Series::new("cycle", "orange", col(2)),
        ],
    )
}

pub fn eval(args: &EvalArgs, workers: usize, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    if args.steps_per_frame == 0 {
        return Err(CliError::usage("--steps-per-frame must be at least 1"));
    }
    let model = read_model(&args.checkpoint)?;
    let volume = read_volume(&args.volume)?;
    let mut manifest = RunManifest::new(
        "eval",
        Some(args.probe_seed),
        json!({
            "psnr_stride": args.psnr_stride,
            "steps_per_frame": args.steps_per_frame,
            "probes": args.probes,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.volume)?;
    let mut meshes = Vec::with_capacity(volume.num_frames());
    for i in 0..volume.num_frames() {
        let path = args.gt_dir.join(frame_file(i));
        if path.exists() {
            meshes.push(Some(read_mesh(&path)?));
            manifest.add_input(&path)?;
        } else {
            log::warn!("no reference mesh for frame {i}; its HSD is left empty");
            meshes.push(None);
        }
    }
    if meshes[0].is_none() {
        return Err(CliError::Data(format!(
            "{}: the frame-0 mesh is required",
            args.gt_dir.join(frame_file(0)).display()
        )));
    }
    let config = EvalConfig {
        steps_per_frame: args.steps_per_frame,
        psnr_stride: (args.psnr_stride > 0).then_some(args.psnr_stride),
        probe_points: args.probes,
        probe_seed: args.probe_seed,
        workers,
    };
    let report = evaluate_fit(&model, &volume, &GroundTruth { meshes }, &config)?;

    emit(out, "eval.csv", &report.to_csv(), &mut manifest)?;
    emit(out, "eval_summary.json", &(report.summary_json() + "\n"), &mut manifest)?;
    for (i, m) in report.meshes.iter().enumerate() {
        emit_mesh(out, &format!("predicted/{}", frame_file(i)), m, &mut manifest)?;
    }
    let times = volume.frame_times();
    let predicted = times.iter().zip(report.predicted_volumes()).map(|(&t, v)| (t, v)).collect();
    let reference = times
        .iter()
        .zip(report.reference_volumes())
        .filter_map(|(&t, v)| v.map(|v| (t, v)))
        .collect();
    let chart = line_chart(
        "Volume over the cycle",
        "normalized time",
        "volume (mm^3)",
        &[
            Series::new("predicted", "crimson", predicted),
            Series::new("reference", "steelblue", reference),
        ],
    );
    emit(out, "volume_curve.svg", &chart, &mut manifest)?;
    if let Some(path) = &args.loss {
        let rows = read_loss_csv(path)?;
        manifest.add_input(path)?;
        emit(out, "loss_history.svg", &loss_chart(&rows), &mut manifest)?;
    }
    log::info!(
        "mean HSD {:?} mm, periodicity error {:.4} mm",
        report.mean_hsd_mm(),
        report.periodicity_error_mm
    );
    finish(manifest, start, out)
}
