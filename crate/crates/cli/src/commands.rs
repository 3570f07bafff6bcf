use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::Serialize;

use plencal::downstream::{back_project, build_undistortion_map, export_rgbd_frame, metric_depth, write_ply};
use plencal::eval::{
    parameter_report, read_tum, trajectory_rmse, write_tum_trajectory, AlignMode, TrajectoryReport, CORE_PARAMS,
};
use plencal::io::{read_json, write_json, CalibrationFile, DatasetFile, GroundTruthFile, SynthConfig};
use plencal::model::{IntrinsicParam, PlenopticIntrinsics, Pose, VirtualPoint};
use plencal::pipeline::{calibrate, CalibrationInput, PipelineOptions, StageSummary};
use plencal::plenoptic_init::CalibrationMode;
use plencal::sfm::{virtual_track_centroids, CentroidOptions};
use plencal::synthgen::{generate, generate_hex_grid};

use crate::{Cli, Command, Export, Mode};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn other(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { config, out } => synth(config.as_deref(), &out, cli.seed),
        Command::Calibrate {
            dataset,
            mode,
            fix,
            nominal,
            out,
        } => calibrate_cmd(&dataset, mode, &fix, nominal.as_deref(), &out, cli.seed),
        Command::Eval {
            calibration,
            reference,
            trajectory,
            gt_trajectory,
            out,
            markdown,
        } => eval(
            &calibration,
            &reference,
            trajectory.as_deref(),
            gt_trajectory.as_deref(),
            &out,
            markdown.as_deref(),
        ),
        Command::Export {
            calibration,
            dataset,
            what,
            trajectory,
            step,
            out,
        } => export(
            &calibration,
            dataset.as_deref(),
            what,
            trajectory.as_deref(),
            step,
            &out,
        ),
    }
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg: SynthConfig = match config {
        Some(p) => read_json(p).map_err(usage)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.scene.rng_seed = s;
    }
    cfg.scene.validate().map_err(usage)?;
    let intr = cfg.intrinsics().map_err(usage)?;
    let grid = generate_hex_grid(cfg.sensor_w_px, cfg.sensor_h_px, cfg.mla_pitch_px).map_err(usage)?;
    let ds = generate(&cfg.scene, &intr, &grid).map_err(|e| Failure {
        code: 3,
        error: anyhow!(e).context("generation failed"),
    })?;
    let mut input = CalibrationInput::from_synthetic(&ds);
    input.nominal_f_l = cfg.nominal_f_l_mm;
    fs::create_dir_all(out).map_err(other)?;
    write_json(&out.join("dataset.json"), &DatasetFile::from_input(&input)).map_err(other)?;
    write_json(&out.join("groundtruth.json"), &GroundTruthFile::from_dataset(&ds)).map_err(other)?;
    Ok(())
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    stages: &'a StageSummary,
    initial: CalibrationFile,
    solver_report: &'a plencal::ba::SolveReport,
}

fn calibrate_cmd(
    dataset: &Path,
    mode: Mode,
    fix: &[String],
    nominal: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let file: DatasetFile = read_json(dataset).map_err(usage)?;
    let input = file.to_input().map_err(usage)?;
    let mut options = PipelineOptions::default();
    for name in fix {
        let p = IntrinsicParam::from_name(name.trim())
            .ok_or_else(|| usage(anyhow!("unknown parameter `{name}` in --fix")))?;
        if !options.fixed.contains(&p) {
            options.fixed.push(p);
        }
    }
    if let Some(s) = seed {
        options.sfm.seed = s;
    }
    if mode == Mode::Recalib {
        let path = nominal.ok_or_else(|| usage(anyhow!("recalib mode requires --nominal")))?;
        let nom: CalibrationFile = read_json(path).map_err(usage)?;
        options.mode = CalibrationMode::Recalibration {
            f_l: nom.f_l_mm,
            mla_sensor: nom.b_mm,
        };
    }
    let res = calibrate(&input, &options).map_err(|e| Failure {
        code: 4,
        error: anyhow!("stage {}: {e}", e.stage()),
    })?;
    let intr = res.problem.intrinsics;
    let calib = CalibrationFile::new(&intr, &res.problem.fixed_intrinsics, Some(res.report.clone()));
    let report = CalibrationReport {
        stages: &res.summary,
        initial: CalibrationFile::new(&res.initial, &[], None),
        solver_report: &res.report,
    };
    let poses: Vec<Option<Pose>> = res
        .pinhole
        .poses
        .iter()
        .enumerate()
        .map(|(v, p)| p.map(|_| res.problem.poses[v]))
        .collect();
    fs::create_dir_all(out).map_err(other)?;
    write_json(&out.join("calibration.json"), &calib).map_err(other)?;
    write_json(&out.join("report.json"), &report).map_err(other)?;
    let f = File::create(out.join("trajectory.tum")).map_err(other)?;
    write_tum_trajectory(BufWriter::new(f), &poses).map_err(other)?;
    Ok(())
}

/// Intrinsics of a calibration.json or groundtruth.json.
fn load_intrinsics(path: &Path) -> Result<PlenopticIntrinsics, Failure> {
    let value: serde_json::Value = read_json(path).map_err(usage)?;
    let calib: CalibrationFile = if value.get("intrinsics").is_some() {
        serde_json::from_value::<GroundTruthFile>(value)
            .with_context(|| path.display().to_string())
            .map_err(usage)?
            .intrinsics
    } else {
        serde_json::from_value(value)
            .with_context(|| path.display().to_string())
            .map_err(usage)?
    };
    calib.intrinsics().map_err(usage)
}

/// `(timestamp, world-from-camera)` from a TUM file or the poses of a
/// groundtruth.json.
fn load_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>, Failure> {
    if path.extension().is_some_and(|e| e == "json") {
        let gt: GroundTruthFile = read_json(path).map_err(usage)?;
        return Ok(gt
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64, p.inverse()))
            .collect());
    }
    let f = File::open(path)
        .with_context(|| path.display().to_string())
        .map_err(usage)?;
    read_tum(BufReader::new(f))
        .with_context(|| path.display().to_string())
        .map_err(usage)
}

#[derive(Serialize)]
struct EvalReport {
    parameters: plencal::eval::ParameterReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectory: Option<TrajectoryEval>,
}

#[derive(Serialize)]
struct TrajectoryEval {
    poses: usize,
    rigid: TrajectoryReport,
    similarity: TrajectoryReport,
}

fn eval(
    calibration: &Path,
    reference: &Path,
    trajectory: Option<&Path>,
    gt_trajectory: Option<&Path>,
    out: &Path,
    markdown: Option<&Path>,
) -> Result<(), Failure> {
    let est = load_intrinsics(calibration)?;
    let reference_intr = load_intrinsics(reference)?;
    let mut params = CORE_PARAMS.to_vec();
    params.extend(
        [
            IntrinsicParam::K0,
            IntrinsicParam::K1,
            IntrinsicParam::K2,
            IntrinsicParam::P0,
            IntrinsicParam::P1,
        ]
        .into_iter()
        .filter(|p| reference_intr.get(*p) != 0.0),
    );
    let parameters = parameter_report(&est, &reference_intr, &params).map_err(usage)?;
    let trajectory = match (trajectory, gt_trajectory) {
        (Some(a), Some(b)) => {
            let est_t = load_trajectory(a)?;
            let gt_t = load_trajectory(b)?;
            let ta: Vec<f64> = est_t.iter().map(|e| e.0).collect();
            let tb: Vec<f64> = gt_t.iter().map(|e| e.0).collect();
            let pairs = plencal::eval::associate(&ta, &tb, 0.5);
            // Stored poses are world-from-camera; alignment takes camera-from-world.
            let e: Vec<Pose> = pairs.iter().map(|(i, _)| est_t[*i].1.inverse()).collect();
            let g: Vec<Pose> = pairs.iter().map(|(_, j)| gt_t[*j].1.inverse()).collect();
            Some(TrajectoryEval {
                poses: pairs.len(),
                rigid: trajectory_rmse(&e, &g, AlignMode::Rigid).map_err(usage)?,
                similarity: trajectory_rmse(&e, &g, AlignMode::Similarity).map_err(usage)?,
            })
        }
        (None, None) => None,
        _ => return Err(usage(anyhow!("--trajectory and --gt-trajectory go together"))),
    };
    let md = parameters.to_markdown();
    write_json(out, &EvalReport { parameters, trajectory }).map_err(other)?;
    if let Some(p) = markdown {
        fs::write(p, md).map_err(other)?;
    }
    Ok(())
}

fn virtual_points(intr: &PlenopticIntrinsics, input: &CalibrationInput) -> Vec<(usize, VirtualPoint)> {
    let clusters = virtual_track_centroids(&input.observations, &input.grid, intr, &CentroidOptions::default());
    clusters
        .measurements
        .iter()
        .map(|m| {
            (
                m.view,
                VirtualPoint {
                    x: m.xy.x,
                    y: m.xy.y,
                    v: m.v,
                },
            )
        })
        .collect()
}

#[derive(Serialize)]
struct RgbdRecord {
    view: usize,
    #[serde(flatten)]
    frame: plencal::downstream::RgbdFrame,
}

fn export(
    calibration: &Path,
    dataset: Option<&Path>,
    what: Export,
    trajectory: Option<&Path>,
    step: f64,
    out: &Path,
) -> Result<(), Failure> {
    let intr = load_intrinsics(calibration)?;
    let load_input = || -> Result<CalibrationInput, Failure> {
        let path = dataset.ok_or_else(|| usage(anyhow!("--dataset is required for this export")))?;
        read_json::<DatasetFile>(path).map_err(usage)?.to_input().map_err(usage)
    };
    match what {
        Export::UndistortMap => {
            let (w, h) = match dataset {
                Some(_) => load_input()?.sensor,
                None => (2048.0, 2048.0),
            };
            let map = build_undistortion_map(&intr, w, h, step).map_err(usage)?;
            write_json(out, &map).map_err(other)?;
        }
        Export::Rgbd => {
            let input = load_input()?;
            let samples = virtual_points(&intr, &input);
            let mut buf = Vec::new();
            let num_views = input.observations.num_views();
            for view in 0..num_views {
                // Clusters outside the metric range of the model are skipped.
                let vps: Vec<VirtualPoint> = samples
                    .iter()
                    .filter(|s| s.0 == view && metric_depth(&intr, s.1.v).is_ok())
                    .map(|s| s.1)
                    .collect();
                let frame = export_rgbd_frame(&intr, &vps)
                    .with_context(|| format!("view {view}"))
                    .map_err(other)?;
                serde_json::to_writer(&mut buf, &RgbdRecord { view, frame }).map_err(other)?;
                buf.push(b'\n');
            }
            fs::write(out, buf).map_err(other)?;
        }
        Export::Cloud => {
            let input = load_input()?;
            let traj =
                load_trajectory(trajectory.ok_or_else(|| usage(anyhow!("--trajectory is required for clouds")))?)?;
            let mut world_from_cam: Vec<Option<Pose>> = vec![None; input.observations.num_views()];
            for (t, p) in traj {
                let v = t.round() as usize;
                if v < world_from_cam.len() {
                    world_from_cam[v] = Some(p);
                }
            }
            let mut cloud = Vec::new();
            for (view, vp) in virtual_points(&intr, &input) {
                let Some(pose) = world_from_cam[view] else { continue };
                // Clusters outside the metric range of the model are skipped.
                if let Ok(x_c) = back_project(&intr, &vp) {
                    cloud.push(pose.transform(&x_c));
                }
            }
            let f = File::create(out).map_err(other)?;
            let mut w = BufWriter::new(f);
            write_ply(&mut w, &cloud, None).map_err(other)?;
            w.flush().map_err(other)?;
        }
    }
    Ok(())
}
