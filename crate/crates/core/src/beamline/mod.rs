//! Synthetic stand-in for the photoinjector and its longitudinal phase-space
//! screen.
//!
//! Axis convention used throughout the crate: image columns are the time
//! axis (later arrival to the right), image rows are the energy axis (row
//! index grows with energy). The screen centre corresponds to `t = 0` and the
//! reference energy.

mod dataset;
mod preprocess;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    read_dataset, sample_dataset, write_dataset, Dataset, GenOptions, Shot, Split, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use preprocess::{block_downsample, threshold, Screen, PIXEL_THRESHOLD};
pub use sim::{BeamlineParams, HiddenJitter, JitterParams, RawShot, Simulator};

/// Named machine configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkingPoint {
    /// Gun, A1 and AH1 phases are scanned.
    Wp1,
    /// AH1 switched off, A1 amplitude re-balanced; gun and A1 phases are scanned.
    Wp2,
}

impl WorkingPoint {
    pub fn id(self) -> &'static str {
        match self {
            WorkingPoint::Wp1 => "WP1",
            WorkingPoint::Wp2 => "WP2",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            WorkingPoint::Wp1 => 1,
            WorkingPoint::Wp2 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(WorkingPoint::Wp1),
            2 => Ok(WorkingPoint::Wp2),
            _ => Err(Error::Format(format!("unknown working-point tag {tag}"))),
        }
    }

    /// Number of scanned phases.
    pub fn phase_dim(self) -> usize {
        match self {
            WorkingPoint::Wp1 => 3,
            WorkingPoint::Wp2 => 2,
        }
    }

    /// Half-widths (degrees) of the uniform phase scan: gun, A1 and (WP1) AH1.
    pub fn phase_ranges(self) -> &'static [f64] {
        match self {
            WorkingPoint::Wp1 => &[3.0, 6.0, 6.0],
            WorkingPoint::Wp2 => &[3.0, 6.0],
        }
    }
}

impl fmt::Display for WorkingPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for WorkingPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WP1" => Ok(WorkingPoint::Wp1),
            "WP2" => Ok(WorkingPoint::Wp2),
            other => Err(Error::Input(format!(
                "unknown working point `{other}` (expected WP1 or WP2)"
            ))),
        }
    }
}

/// RF phases in degrees relative to the reference phases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseVector {
    pub gun: f64,
    pub a1: f64,
    /// Absent when AH1 is off.
    pub ah1: Option<f64>,
}

impl PhaseVector {
    pub fn wp1(gun: f64, a1: f64, ah1: f64) -> Self {
        Self {
            gun,
            a1,
            ah1: Some(ah1),
        }
    }

    pub fn wp2(gun: f64, a1: f64) -> Self {
        Self { gun, a1, ah1: None }
    }

    pub fn zero(wp: WorkingPoint) -> Self {
        match wp {
            WorkingPoint::Wp1 => Self::wp1(0.0, 0.0, 0.0),
            WorkingPoint::Wp2 => Self::wp2(0.0, 0.0),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.gun, self.a1];
        v.extend(self.ah1);
        v
    }

    pub fn from_slice(wp: WorkingPoint, v: &[f64]) -> Result<Self> {
        match (wp, v) {
            (WorkingPoint::Wp1, &[g, a, h]) => Ok(Self::wp1(g, a, h)),
            (WorkingPoint::Wp2, &[g, a]) => Ok(Self::wp2(g, a)),
            _ => Err(Error::Input(format!(
                "{wp} expects {} phases, got {}",
                wp.phase_dim(),
                v.len()
            ))),
        }
    }

    pub fn distance(&self, other: &PhaseVector) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Whether every phase lies inside the scan range of `wp`.
    pub fn in_range(&self, wp: WorkingPoint) -> bool {
        let v = self.to_vec();
        v.len() == wp.phase_dim() && v.iter().zip(wp.phase_ranges()).all(|(p, r)| p.abs() <= *r)
    }
}

/// Pixel calibration of a screen image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub time_per_px_ps: f64,
    pub energy_per_px_mev: f64,
    pub charge_pc: f64,
    /// Energy at the vertical image centre.
    pub reference_energy_mev: f64,
}

impl Calibration {
    /// Resolution of the measurement camera.
    pub const CAMERA: Calibration = Calibration {
        time_per_px_ps: 0.047,
        energy_per_px_mev: 0.0031,
        charge_pc: 250.0,
        reference_energy_mev: 130.0,
    };

    /// Calibration after merging `factor x factor` pixel blocks.
    pub fn binned(self, factor: usize) -> Self {
        Self {
            time_per_px_ps: self.time_per_px_ps * factor as f64,
            energy_per_px_mev: self.energy_per_px_mev * factor as f64,
            ..self
        }
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self::CAMERA
    }
}

/// Row-major intensity grid; rows are energy, columns are time.
#[derive(Clone, Debug, PartialEq)]
pub struct ScreenImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub calibration: Calibration,
}

impl ScreenImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        calibration: Calibration,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                "screen image",
                &[height, width],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
            calibration,
        })
    }

    pub fn zeros(height: usize, width: usize, calibration: Calibration) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
            calibration,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn total(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(0.0, f32::max)
    }
}

/// Sensor layout of the synthetic screen: a raw grid, the fixed crop and the
/// block-averaging factor applied by preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub raw: (usize, usize),
    pub crop_origin: (usize, usize),
    pub crop: (usize, usize),
    pub factor: usize,
    /// Calibration of one raw pixel.
    pub raw_calibration: Calibration,
}

/// Time span (ps) and energy span (MeV) covered by the cropped region.
pub const FIELD_OF_VIEW: (f64, f64) = (24.0, 6.0);

impl ScreenGeometry {
    fn with_crop(raw: (usize, usize), crop: (usize, usize), factor: usize) -> Self {
        Self {
            raw,
            crop_origin: ((raw.0 - crop.0) / 2, (raw.1 - crop.1) / 2),
            crop,
            factor,
            raw_calibration: Calibration {
                time_per_px_ps: FIELD_OF_VIEW.0 / crop.1 as f64,
                energy_per_px_mev: FIELD_OF_VIEW.1 / crop.0 as f64,
                ..Calibration::CAMERA
            },
        }
    }

    /// 208x272 raw grid, 96x128 after preprocessing.
    pub fn desk() -> Self {
        Self::with_crop((208, 272), (192, 256), 2)
    }

    /// 1750x2330 raw grid, 768x1024 after preprocessing.
    pub fn full_scale() -> Self {
        Self::with_crop((1750, 2330), (1536, 2048), 2)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.crop.0 / self.factor, self.crop.1 / self.factor)
    }

    pub fn output_calibration(&self) -> Calibration {
        self.raw_calibration.binned(self.factor)
    }

    pub fn validate(&self) -> Result<()> {
        let fits = self.crop_origin.0 + self.crop.0 <= self.raw.0
            && self.crop_origin.1 + self.crop.1 <= self.raw.1;
        let divides =
            self.factor > 0 && self.crop.0.is_multiple_of(self.factor) && self.crop.1.is_multiple_of(self.factor);
        if !fits || !divides || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config(format!(
                "inconsistent screen geometry {self:?}"
            )));
        }
        Ok(())
    }
}
