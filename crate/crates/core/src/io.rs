//! JSON files exchanged between pipeline stages: datasets, ground truth,
//! calibrations and synthesis configs.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::SolveReport;
use crate::model::{DistortionCoeffs, IntrinsicParam, MicroLensGrid, ModelError, PlenopticIntrinsics, Pose};
use crate::observations::{Observation, ObservationError, ObservationSet};
use crate::pipeline::CalibrationInput;
use crate::plenoptic_init::ScaleConstraint;
use crate::synthgen::{default_intrinsics, SceneSpec, SyntheticDataset, DEFAULT_PITCH, DEFAULT_SENSOR};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl IoError {
    fn invalid(field: &str, message: impl ToString) -> Self {
        Self::Invalid {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub sensor_w_px: f64,
    pub sensor_h_px: f64,
    pub pixel_size_x_mm: f64,
    pub pixel_size_y_mm: f64,
    #[serde(rename = "nominal_f_L_mm", default, skip_serializing_if = "Option::is_none")]
    pub nominal_f_l_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlaRecord {
    /// `[lens_id, cx_px, cy_px]`.
    pub centers: Vec<(usize, f64, f64)>,
    pub micro_image_radius_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub a: usize,
    pub b: usize,
    pub distance_mm: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub camera: CameraRecord,
    pub mla: MlaRecord,
    /// `[point_id, view_id, lens_id, x_px, y_px]`.
    pub observations: Vec<(usize, usize, usize, f64, f64)>,
    #[serde(default)]
    pub scale_constraints: Vec<ConstraintRecord>,
}

impl DatasetFile {
    pub fn from_input(input: &CalibrationInput) -> Self {
        Self {
            camera: CameraRecord {
                sensor_w_px: input.sensor.0,
                sensor_h_px: input.sensor.1,
                pixel_size_x_mm: input.pixel_size.0,
                pixel_size_y_mm: input.pixel_size.1,
                nominal_f_l_mm: input.nominal_f_l,
            },
            mla: MlaRecord {
                centers: input
                    .grid
                    .centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, c.x, c.y))
                    .collect(),
                micro_image_radius_px: input.grid.micro_image_radius,
            },
            observations: input
                .observations
                .records()
                .iter()
                .map(|o| (o.point, o.view, o.lens, o.xy.x, o.xy.y))
                .collect(),
            scale_constraints: input
                .scale_constraints
                .iter()
                .map(|c| ConstraintRecord {
                    a: c.point_a,
                    b: c.point_b,
                    distance_mm: c.distance,
                    weight: c.weight,
                })
                .collect(),
        }
    }

    /// Validated pipeline input. Points seen in fewer than two views are
    /// dropped.
    pub fn to_input(&self) -> Result<CalibrationInput, IoError> {
        let cam = &self.camera;
        for (field, v) in [
            ("camera.sensor_w_px", cam.sensor_w_px),
            ("camera.sensor_h_px", cam.sensor_h_px),
            ("camera.pixel_size_x_mm", cam.pixel_size_x_mm),
            ("camera.pixel_size_y_mm", cam.pixel_size_y_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(IoError::invalid(field, format!("must be positive, got {v}")));
            }
        }
        let mut centers = vec![None; self.mla.centers.len()];
        for &(id, x, y) in &self.mla.centers {
            let slot = centers.get_mut(id).ok_or_else(|| {
                IoError::invalid("mla.centers", format!("lens ids must be 0..{}", self.mla.centers.len()))
            })?;
            if slot.replace(Vector2::new(x, y)).is_some() {
                return Err(IoError::invalid("mla.centers", format!("duplicate lens id {id}")));
            }
        }
        let centers: Vec<Vector2<f64>> = centers.into_iter().map(|c| c.expect("ids are a permutation")).collect();
        let grid = MicroLensGrid::new(
            centers,
            self.mla.micro_image_radius_px,
            cam.sensor_w_px,
            cam.sensor_h_px,
        )
        .map_err(|e: ModelError| IoError::invalid("mla", e))?;
        let mut records = Vec::with_capacity(self.observations.len());
        for &(point, view, lens, x, y) in &self.observations {
            if lens >= grid.len() {
                return Err(IoError::invalid("observations", format!("unknown lens id {lens}")));
            }
            records.push(Observation {
                point,
                view,
                lens,
                xy: Vector2::new(x, y),
            });
        }
        let observations = ObservationSet::new(records)
            .map_err(|e: ObservationError| IoError::invalid("observations", e))?
            .filter_min_views(2)
            .0;
        let mut scale_constraints = Vec::new();
        for c in &self.scale_constraints {
            if !(c.distance_mm > 0.0 && c.weight > 0.0) {
                return Err(IoError::invalid(
                    "scale_constraints",
                    "distance and weight must be positive",
                ));
            }
            scale_constraints.push(ScaleConstraint {
                point_a: c.a,
                point_b: c.b,
                distance: c.distance_mm,
                weight: c.weight,
            });
        }
        Ok(CalibrationInput {
            grid,
            observations,
            scale_constraints,
            sensor: (cam.sensor_w_px, cam.sensor_h_px),
            pixel_size: (cam.pixel_size_x_mm, cam.pixel_size_y_mm),
            nominal_f_l: cam.nominal_f_l_mm,
        })
    }
}

/// Contents of `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    #[serde(rename = "f_L_mm")]
    pub f_l_mm: f64,
    #[serde(rename = "b_L0_mm")]
    pub b_l0_mm: f64,
    #[serde(rename = "B_mm")]
    pub b_mm: f64,
    pub c_x_px: f64,
    pub c_y_px: f64,
    pub pixel_size_x_mm: f64,
    pub pixel_size_y_mm: f64,
    pub distortion: DistortionCoeffs,
    #[serde(default)]
    pub fixed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver_report: Option<SolveReport>,
}

impl CalibrationFile {
    pub fn new(intr: &PlenopticIntrinsics, fixed: &[IntrinsicParam], report: Option<SolveReport>) -> Self {
        Self {
            f_l_mm: intr.f_l,
            b_l0_mm: intr.b_l0,
            b_mm: intr.mla_sensor,
            c_x_px: intr.c_x,
            c_y_px: intr.c_y,
            pixel_size_x_mm: intr.s_x,
            pixel_size_y_mm: intr.s_y,
            distortion: intr.distortion,
            fixed: fixed.iter().map(|p| p.name().to_string()).collect(),
            solver_report: report,
        }
    }

    pub fn intrinsics(&self) -> Result<PlenopticIntrinsics, IoError> {
        let intr = PlenopticIntrinsics {
            f_l: self.f_l_mm,
            b_l0: self.b_l0_mm,
            mla_sensor: self.b_mm,
            c_x: self.c_x_px,
            c_y: self.c_y_px,
            s_x: self.pixel_size_x_mm,
            s_y: self.pixel_size_y_mm,
            distortion: self.distortion,
        };
        intr.validate().map_err(|e| IoError::invalid("calibration", e))?;
        Ok(intr)
    }
}

/// Contents of `groundtruth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub intrinsics: CalibrationFile,
    /// Camera-from-world.
    pub poses: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    /// `(point, view, lens)` of corrupted observations.
    pub outliers: Vec<(usize, usize, usize)>,
    pub scene: SceneSpec,
}

impl GroundTruthFile {
    pub fn from_dataset(ds: &SyntheticDataset) -> Self {
        Self {
            intrinsics: CalibrationFile::new(&ds.intrinsics_gt, &[], None),
            poses: ds.poses_gt.clone(),
            points: ds.points_gt.clone(),
            outliers: ds.outliers.clone(),
            scene: ds.spec.clone(),
        }
    }
}

/// Input of `synth`: a scene plus optional camera and sensor overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    #[serde(default)]
    pub camera: Option<CalibrationFile>,
    #[serde(default = "default_sensor")]
    pub sensor_w_px: f64,
    #[serde(default = "default_sensor")]
    pub sensor_h_px: f64,
    #[serde(default = "default_pitch")]
    pub mla_pitch_px: f64,
    /// Written to the dataset's camera record.
    #[serde(default, rename = "nominal_f_L_mm")]
    pub nominal_f_l_mm: Option<f64>,
}

fn default_sensor() -> f64 {
    DEFAULT_SENSOR
}
fn default_pitch() -> f64 {
    DEFAULT_PITCH
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            camera: None,
            sensor_w_px: DEFAULT_SENSOR,
            sensor_h_px: DEFAULT_SENSOR,
            mla_pitch_px: DEFAULT_PITCH,
            nominal_f_l_mm: None,
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self) -> Result<PlenopticIntrinsics, IoError> {
        match &self.camera {
            Some(c) => c.intrinsics(),
            None => Ok(default_intrinsics()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::default_dataset;

    #[test]
    fn dataset_round_trip() {
        let ds = default_dataset(30, 4, 0.1, 0.0, 1).unwrap();
        let input = CalibrationInput::from_synthetic(&ds);
        let file = DatasetFile::from_input(&input);
        let text = serde_json::to_string(&file).unwrap();
        let back: DatasetFile = serde_json::from_str(&text).unwrap();
        let got = back.to_input().unwrap();
        assert_eq!(got.grid, input.grid);
        assert_eq!(got.observations.records(), input.observations.records());
        assert_eq!(got.scale_constraints, input.scale_constraints);
        assert_eq!(
            (got.sensor, got.pixel_size, got.nominal_f_l),
            (input.sensor, input.pixel_size, input.nominal_f_l)
        );
        assert_eq!(got, input);
    }

    #[test]
    fn dataset_field_names() {
        let ds = default_dataset(20, 3, 0.0, 0.0, 1).unwrap();
        let mut input = CalibrationInput::from_synthetic(&ds);
        input.nominal_f_l = Some(16.0);
        let v = serde_json::to_value(DatasetFile::from_input(&input)).unwrap();
        assert_eq!(v["camera"]["nominal_f_L_mm"], 16.0);
        assert!(v["mla"]["centers"][0].as_array().unwrap().len() == 3);
        assert!(v["observations"][0].as_array().unwrap().len() == 5);
        assert!(v["scale_constraints"][0]["distance_mm"].is_number());
    }

    #[test]
    fn calibration_field_names() {
        let f = CalibrationFile::new(&PlenopticIntrinsics::r5_16mm(), &[IntrinsicParam::FocalLength], None);
        let v = serde_json::to_value(&f).unwrap();
        for key in [
            "f_L_mm",
            "b_L0_mm",
            "B_mm",
            "c_x_px",
            "c_y_px",
            "pixel_size_x_mm",
            "pixel_size_y_mm",
        ] {
            assert!(v[key].is_number(), "{key}");
        }
        assert_eq!(v["fixed"][0], "f_L");
        assert_eq!(v["distortion"]["k2"], 0.0);
        assert_eq!(f.intrinsics().unwrap(), PlenopticIntrinsics::r5_16mm());
    }

    #[test]
    fn unknown_lens_is_rejected() {
        let ds = default_dataset(20, 3, 0.0, 0.0, 1).unwrap();
        let mut file = DatasetFile::from_input(&CalibrationInput::from_synthetic(&ds));
        file.observations[0].2 = 1_000_000;
        assert!(matches!(file.to_input(), Err(IoError::Invalid { field, .. }) if field == "observations"));
    }
}
