use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use plencal::downstream::{export_point_cloud, read_ply_vertex_count, write_ply};
use plencal::io::{read_json, write_json, CalibrationFile, DatasetFile, GroundTruthFile};
use plencal::model::VirtualPoint;
use plencal::par;
use plencal::pipeline::{calibrate, CalibrationInput, PipelineOptions};
use plencal::sfm::{virtual_track_centroids, CentroidOptions};
use plencal::synthgen::default_dataset;

#[test]
fn dataset_survives_files_and_calibrates_identically() {
    let ds = default_dataset(120, 10, 0.2, 0.03, 4).unwrap();
    let input = CalibrationInput::from_synthetic(&ds);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.json");
    write_json(&path, &DatasetFile::from_input(&input)).unwrap();
    let loaded = read_json::<DatasetFile>(&path).unwrap().to_input().unwrap();
    assert_eq!(loaded, input);

    let opts = PipelineOptions::default();
    let a = calibrate(&input, &opts).unwrap();
    let b = calibrate(&loaded, &opts).unwrap();
    assert_eq!(a.problem.intrinsics, b.problem.intrinsics);

    let calib_path = dir.path().join("calibration.json");
    write_json(
        &calib_path,
        &CalibrationFile::new(&a.problem.intrinsics, &[], Some(a.report.clone())),
    )
    .unwrap();
    let back = read_json::<CalibrationFile>(&calib_path).unwrap().intrinsics().unwrap();
    assert_eq!(back, a.problem.intrinsics);

    let gt_path = dir.path().join("groundtruth.json");
    write_json(&gt_path, &GroundTruthFile::from_dataset(&ds)).unwrap();
    let gt = read_json::<GroundTruthFile>(&gt_path).unwrap();
    assert_eq!(gt.intrinsics.intrinsics().unwrap(), ds.intrinsics_gt);
    assert_eq!(gt.poses, ds.poses_gt);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let ds = default_dataset(150, 12, 0.2, 0.05, 8).unwrap();
    let input = CalibrationInput::from_synthetic(&ds);
    let opts = PipelineOptions::default();
    let one = par::with_threads(1, || calibrate(&input, &opts)).unwrap();
    let three = par::with_threads(3, || calibrate(&input, &opts)).unwrap();
    let (x, y) = (one.problem.intrinsics.to_array(), three.problem.intrinsics.to_array());
    for k in 0..x.len() {
        assert!((x[k] - y[k]).abs() <= 1e-12 * x[k].abs(), "{k}: {} vs {}", x[k], y[k]);
    }
    assert_eq!(one.summary.rejected_observations, three.summary.rejected_observations);
}

#[test]
fn ground_truth_point_cloud_reaches_ply() {
    let ds = default_dataset(80, 6, 0.0, 0.0, 2).unwrap();
    let clusters = virtual_track_centroids(
        &ds.observations,
        &ds.grid,
        &ds.intrinsics_gt,
        &CentroidOptions::default(),
    );
    let samples: Vec<(usize, VirtualPoint)> = clusters
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
        .collect();
    let cloud = export_point_cloud(&ds.intrinsics_gt, &ds.poses_gt, &samples).unwrap();
    for (m, x) in clusters.measurements.iter().zip(&cloud) {
        let err = (x - ds.points_gt[m.point]).norm();
        assert!(err < 1e-6 * ds.points_gt[m.point].norm(), "point {}: {err}", m.point);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    write_ply(&mut w, &cloud, None).unwrap();
    w.flush().unwrap();
    drop(w);
    let n = read_ply_vertex_count(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(n, cloud.len());
}
