//! Rosette-pattern LiDAR model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Mat3, Vec3};

/// Ratio between precession and radial angular velocity. Irrational, so the
/// pattern never repeats.
pub const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;

/// Intrinsic scan parameters shared by every sensor of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarParams {
    /// Half-angle of the circular field of view (rad).
    pub r0: f64,
    /// Radial angular velocity (rad/s).
    pub omega: f64,
    /// Precession angular velocity (rad/s); `omega * GOLDEN_RATIO` when absent.
    pub omega_precession: Option<f64>,
    /// Pulses per second.
    pub pulse_rate: f64,
    pub max_range: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            r0: 0.3354,
            omega: 2.0 * std::f64::consts::PI * 500.0,
            omega_precession: None,
            pulse_rate: 100_000.0,
            max_range: 260.0,
        }
    }
}

impl LidarParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.r0) || self.r0 >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config(format!("r0 must lie in (0, pi/2), got {}", self.r0)));
        }
        if !positive(self.omega) || !positive(self.pulse_rate) || !positive(self.max_range) {
            return Err(Error::Config("omega, pulse_rate and max_range must be positive".into()));
        }
        if let Some(p) = self.omega_precession {
            if !positive(p) {
                return Err(Error::Config("omega_precession must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn precession(&self) -> f64 {
        self.omega_precession.unwrap_or(self.omega * GOLDEN_RATIO)
    }
}

/// A placed sensor. The optical axis is the sensor-frame +z axis; the columns
/// of `orientation` are the sensor axes expressed in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    pub position: Vec3,
    pub orientation: Mat3,
    pub params: LidarParams,
    /// Initial phase of the radial oscillation (rad).
    pub theta0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub time: f64,
    /// Unit direction in world coordinates.
    pub direction: Vec3,
}

impl LidarSpec {
    pub fn new(position: Vec3, orientation: Mat3, params: LidarParams, theta0: f64) -> Result<Self> {
        params.validate()?;
        let err = (orientation.transpose() * orientation - Mat3::identity()).abs().max();
        if err > 1e-9 || orientation.determinant() < 0.0 {
            return Err(Error::InvalidRotation("sensor orientation must be a proper rotation".into()));
        }
        Ok(Self {
            position,
            orientation,
            params,
            theta0,
        })
    }

    /// Sensor at `position` whose optical axis points at `target`, with the
    /// sensor y axis as close to world +z as possible.
    pub fn looking_at(position: Vec3, target: Vec3, params: LidarParams, theta0: f64) -> Result<Self> {
        let z = (target - position).try_normalize(1e-12).ok_or_else(|| {
            Error::Invalid("sensor target coincides with its position".into())
        })?;
        let up = if z.cross(&Vec3::z()).norm() < 1e-6 { Vec3::y() } else { Vec3::z() };
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        Self::new(position, Mat3::from_columns(&[x, y, z]), params, theta0)
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.orientation.column(2).into_owned()
    }

    /// Sensor-frame direction at time `t`: polar angle `r0 cos(omega t + theta0)`
    /// from the optical axis, azimuth `omega_p t`.
    pub fn sensor_direction(&self, t: f64) -> Vec3 {
        let r = self.params.r0 * (self.params.omega * t + self.theta0).cos();
        let phi = self.params.precession() * t;
        Vec3::new(r.sin() * phi.cos(), r.sin() * phi.sin(), r.cos())
    }

    /// Pulses fired in `[t_start, t_start + duration)`, one every
    /// `1 / pulse_rate` seconds.
    pub fn rosette_directions(&self, t_start: f64, duration: f64) -> Result<Vec<Pulse>> {
        if !(duration > 0.0) {
            return Err(Error::Invalid(format!("scan duration must be positive, got {duration}")));
        }
        let count = (duration * self.params.pulse_rate).round() as usize;
        Ok((0..count)
            .map(|i| {
                let time = t_start + i as f64 / self.params.pulse_rate;
                Pulse {
                    time,
                    direction: self.orientation * self.sensor_direction(time),
                }
            })
            .collect())
    }
}
