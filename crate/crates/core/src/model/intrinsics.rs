use serde::{Deserialize, Serialize};

use super::distortion::DistortionCoeffs;
use super::ModelError;

/// Number of optimizable intrinsic parameters (five lens/MLA values plus five
/// distortion coefficients). Pixel pitch is configuration, not a parameter.
pub const NUM_INTRINSIC_PARAMS: usize = 10;

/// Names of the optimizable intrinsics, in parameter-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntrinsicParam {
    #[serde(rename = "f_L")]
    FocalLength,
    #[serde(rename = "b_L0")]
    LensToMla,
    #[serde(rename = "B")]
    MlaToSensor,
    #[serde(rename = "c_x")]
    PrincipalX,
    #[serde(rename = "c_y")]
    PrincipalY,
    #[serde(rename = "k0")]
    K0,
    #[serde(rename = "k1")]
    K1,
    #[serde(rename = "k2")]
    K2,
    #[serde(rename = "p0")]
    P0,
    #[serde(rename = "p1")]
    P1,
}

impl IntrinsicParam {
    pub const ALL: [IntrinsicParam; NUM_INTRINSIC_PARAMS] = [
        IntrinsicParam::FocalLength,
        IntrinsicParam::LensToMla,
        IntrinsicParam::MlaToSensor,
        IntrinsicParam::PrincipalX,
        IntrinsicParam::PrincipalY,
        IntrinsicParam::K0,
        IntrinsicParam::K1,
        IntrinsicParam::K2,
        IntrinsicParam::P0,
        IntrinsicParam::P1,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            IntrinsicParam::FocalLength => "f_L",
            IntrinsicParam::LensToMla => "b_L0",
            IntrinsicParam::MlaToSensor => "B",
            IntrinsicParam::PrincipalX => "c_x",
            IntrinsicParam::PrincipalY => "c_y",
            IntrinsicParam::K0 => "k0",
            IntrinsicParam::K1 => "k1",
            IntrinsicParam::K2 => "k2",
            IntrinsicParam::P0 => "p0",
            IntrinsicParam::P1 => "p1",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    /// Magnitude at which a change of this parameter is meaningful. Lens
    /// lengths and the principal point use their value; distortion
    /// coefficients use the power of a 1000 px reference radius they multiply.
    pub fn typical_scale(self, value: f64) -> f64 {
        const R: f64 = 1000.0;
        match self {
            IntrinsicParam::K0 => R.powi(-2),
            IntrinsicParam::K1 => R.powi(-4),
            IntrinsicParam::K2 => R.powi(-6),
            IntrinsicParam::P0 | IntrinsicParam::P1 => R.powi(-1),
            _ => value.abs().max(1e-3),
        }
    }
}

/// Intrinsic model of a focused plenoptic camera in Galilean mode.
///
/// Lengths are millimeters, image coordinates pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlenopticIntrinsics {
    /// Main lens focal length.
    pub f_l: f64,
    /// Main lens to MLA distance.
    pub b_l0: f64,
    /// MLA to sensor distance.
    pub mla_sensor: f64,
    pub c_x: f64,
    pub c_y: f64,
    /// Pixel pitch, mm per pixel.
    pub s_x: f64,
    pub s_y: f64,
    pub distortion: DistortionCoeffs,
}

impl PlenopticIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f_l: f64,
        b_l0: f64,
        mla_sensor: f64,
        c_x: f64,
        c_y: f64,
        s_x: f64,
        s_y: f64,
        distortion: DistortionCoeffs,
    ) -> Result<Self, ModelError> {
        let intr = Self {
            f_l,
            b_l0,
            mla_sensor,
            c_x,
            c_y,
            s_x,
            s_y,
            distortion,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Raytrix R5 with the 16 mm main lens, 2048x2048 sensor, 5.5 um pixels.
    pub fn r5_16mm() -> Self {
        Self {
            f_l: 16.748,
            b_l0: 15.893,
            mla_sensor: 0.376,
            c_x: 1018.7,
            c_y: 1054.2,
            s_x: 0.0055,
            s_y: 0.0055,
            distortion: DistortionCoeffs::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("f_L", self.f_l),
            ("b_L0", self.b_l0),
            ("B", self.mla_sensor),
            ("s_x", self.s_x),
            ("s_y", self.s_y),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::InvalidIntrinsics(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !(self.c_x.is_finite() && self.c_y.is_finite()) {
            return Err(ModelError::InvalidIntrinsics("principal point must be finite".into()));
        }
        if self.b_l0 >= self.f_l {
            return Err(ModelError::InvalidIntrinsics(format!(
                "b_L0 ({}) must be smaller than f_L ({}) for Galilean mode",
                self.b_l0, self.f_l
            )));
        }
        Ok(())
    }

    pub fn principal(&self) -> [f64; 2] {
        [self.c_x, self.c_y]
    }

    /// Ratio b_L0 / (b_L0 + B) mapping micro image centers onto micro lens centers.
    pub fn center_scale(&self) -> f64 {
        self.b_l0 / (self.b_l0 + self.mla_sensor)
    }

    pub fn get(&self, p: IntrinsicParam) -> f64 {
        self.to_array()[p.index()]
    }

    pub fn set(&mut self, p: IntrinsicParam, value: f64) {
        let mut a = self.to_array();
        a[p.index()] = value;
        *self = self.with_array(&a);
    }

    pub fn to_array(&self) -> [f64; NUM_INTRINSIC_PARAMS] {
        let d = &self.distortion;
        [
            self.f_l,
            self.b_l0,
            self.mla_sensor,
            self.c_x,
            self.c_y,
            d.k0,
            d.k1,
            d.k2,
            d.p0,
            d.p1,
        ]
    }

    /// Copy with the optimizable parameters replaced; pixel pitch is kept.
    pub fn with_array(&self, a: &[f64; NUM_INTRINSIC_PARAMS]) -> Self {
        Self {
            f_l: a[0],
            b_l0: a[1],
            mla_sensor: a[2],
            c_x: a[3],
            c_y: a[4],
            s_x: self.s_x,
            s_y: self.s_y,
            distortion: DistortionCoeffs {
                k0: a[5],
                k1: a[6],
                k2: a[7],
                p0: a[8],
                p1: a[9],
            },
        }
    }
}
