//! Cutting wrench of a groove-milling pass.

use nalgebra::Vector3;
use thiserror::Error;

use crate::se3::{transport_wrench, Wrench};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadError {
    #[error("tool length must be non-negative, got {0}")]
    NegativeToolLength(f64),
    #[error("tool axis must be a unit vector (norm {0})")]
    ToolAxisNotUnit(f64),
}

/// Radial, tangential and axial cutting forces (N) acting at the tip of a
/// tool of length `tool_length_h` (m). The tip sits at
/// `-tool_length_h * tool_axis` from the platform origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MillingLoad {
    f_r: f64,
    f_t: f64,
    f_z: f64,
    tool_length_h: f64,
    tool_axis: Vector3<f64>,
    clockwise: bool,
}

impl MillingLoad {
    pub fn new(f_r: f64, f_t: f64, f_z: f64, tool_length_h: f64, tool_axis: Vector3<f64>) -> Result<Self, LoadError> {
        if !(tool_length_h >= 0.0) {
            return Err(LoadError::NegativeToolLength(tool_length_h));
        }
        if (tool_axis.norm() - 1.0).abs() > 1e-12 {
            return Err(LoadError::ToolAxisNotUnit(tool_axis.norm()));
        }
        Ok(Self {
            f_r,
            f_t,
            f_z,
            tool_length_h,
            tool_axis,
            clockwise: false,
        })
    }

    /// 215 N radial, -10 N tangential, -25 N axial on a 100 mm tool along -z.
    pub fn groove() -> Self {
        Self::new(215.0, -10.0, -25.0, 0.1, -Vector3::z()).expect("valid constants")
    }

    /// Tangential force taken 90 degrees clockwise of radial instead of
    /// counter-clockwise.
    pub fn clockwise(mut self, clockwise: bool) -> Self {
        self.clockwise = clockwise;
        self
    }

    pub fn f_r(&self) -> f64 {
        self.f_r
    }

    pub fn f_t(&self) -> f64 {
        self.f_t
    }

    pub fn f_z(&self) -> f64 {
        self.f_z
    }

    pub fn tool_length(&self) -> f64 {
        self.tool_length_h
    }

    pub fn tool_axis(&self) -> &Vector3<f64> {
        &self.tool_axis
    }

    pub fn is_clockwise(&self) -> bool {
        self.clockwise
    }

    /// Tool-tip offset from the platform origin.
    pub fn tool_tip(&self) -> Vector3<f64> {
        -self.tool_axis * self.tool_length_h
    }

    /// Cutting force in the frame where the radial direction at `phi` is
    /// `(cos phi, sin phi, 0)`.
    pub fn force(&self, phi: f64) -> Vector3<f64> {
        let s = if self.clockwise { -1.0 } else { 1.0 };
        let (sin, cos) = phi.sin_cos();
        Vector3::new(
            self.f_r * cos - s * self.f_t * sin,
            self.f_r * sin + s * self.f_t * cos,
            self.f_z,
        )
    }
}

/// Cutting wrench at trajectory angle `phi`, about the platform origin.
pub fn milling_wrench(load: &MillingLoad, phi: f64) -> Wrench {
    let at_tip = Wrench::from_force(load.force(phi));
    transport_wrench(&at_tip, &load.tool_tip(), &Vector3::zeros())
}

pub fn load_profile(load: &MillingLoad, phis: &[f64]) -> Vec<Wrench> {
    phis.iter().map(|&phi| milling_wrench(load, phi)).collect()
}
