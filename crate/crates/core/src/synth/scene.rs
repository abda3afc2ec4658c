//! Randomized multi-person scenes observed by corner-mounted sensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{procedural_human, LidarParams, LidarSpec, MotionParams, PoseParams, Scene};
use crate::error::{Error, Result};
use crate::types::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Field extent along world x (m).
    pub width: f64,
    /// Field extent along world y (m).
    pub depth: f64,
    pub lidar_height: f64,
    /// Height of the point every sensor aims at, above the field center.
    pub target_height: f64,
    pub window: f64,
    pub fps: f64,
    pub noise_sigma: f64,
    pub persons: usize,
    /// Scanned frames per person; meshes carry one extra frame for flow.
    pub frames: usize,
    pub seed: u64,
    pub waypoints: usize,
    /// Minimum distance of waypoints from the field border (m).
    pub margin: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub lidar: LidarParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 30.0,
            depth: 15.0,
            lidar_height: 2.0,
            target_height: 1.0,
            window: 0.1,
            fps: 10.0,
            noise_sigma: 0.0,
            persons: 2,
            frames: 20,
            seed: 0,
            waypoints: 4,
            margin: 3.0,
            min_speed: 0.8,
            max_speed: 1.6,
            lidar: LidarParams::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.width) || !positive(self.depth) || !positive(self.window) || !positive(self.fps) {
            return Err(Error::Config("field size, window and fps must be positive".into()));
        }
        if 2.0 * self.margin >= self.width.min(self.depth) || self.margin < 0.0 {
            return Err(Error::Config("margin leaves no room for walking paths".into()));
        }
        if self.persons == 0 || self.frames == 0 || self.waypoints == 0 {
            return Err(Error::Config("persons, frames and waypoints must be positive".into()));
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return Err(Error::Config("speeds must satisfy 0 <= min_speed <= max_speed".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Sensor positions at the four field corners.
    pub fn lidar_positions(&self) -> [Vec3; 4] {
        let h = self.lidar_height;
        [
            Vec3::new(0.0, 0.0, h),
            Vec3::new(self.width, 0.0, h),
            Vec3::new(0.0, self.depth, h),
            Vec3::new(self.width, self.depth, h),
        ]
    }
}

/// Draws walking persons and corner sensors from `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = Vec3::new(cfg.width / 2.0, cfg.depth / 2.0, cfg.target_height);
    let lidars = cfg
        .lidar_positions()
        .into_iter()
        .map(|p| LidarSpec::looking_at(p, target, cfg.lidar.clone(), rng.random_range(0.0..2.0 * PI)))
        .collect::<Result<Vec<_>>>()?;

    let mut meshes = Vec::with_capacity(cfg.persons);
    for _ in 0..cfg.persons {
        let waypoints = (0..cfg.waypoints)
            .map(|_| {
                [
                    rng.random_range(cfg.margin..=cfg.width - cfg.margin),
                    rng.random_range(cfg.margin..=cfg.depth - cfg.margin),
                ]
            })
            .collect();
        let pose = PoseParams {
            hip_swing: rng.random_range(0.25..0.4),
            knee_flex: rng.random_range(0.4..0.8),
            arm_swing: rng.random_range(0.2..0.5),
            cadence: rng.random_range(0.8..1.0),
            phase: rng.random_range(0.0..2.0 * PI),
            ..PoseParams::walking()
        };
        let motion = MotionParams {
            pose,
            waypoints,
            speed: rng.random_range(cfg.min_speed..=cfg.max_speed),
            fps: cfg.fps,
            frames: cfg.frames + 1,
        };
        let body_seed = rng.random();
        meshes.push(procedural_human(body_seed, &motion)?);
    }
    Ok(Scene {
        meshes,
        lidars,
        window: cfg.window,
        noise_sigma: cfg.noise_sigma,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scan_frame;

    #[test]
    fn default_scene_is_deterministic_and_observed() {
        let cfg = SceneConfig {
            frames: 2,
            ..SceneConfig::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.meshes, b.meshes);
        assert_eq!(a.lidars, b.lidars);
        assert_eq!(a.meshes[0].num_frames(), 3);
        let frames = scan_frame(&a, 0).unwrap();
        assert_eq!(frames.len(), 2);
        for f in &frames {
            let n = f.scan.as_ref().map_or(0, |s| s.cloud.len());
            assert!(n > 10 && n < 5000, "person {} has {n} points", f.person);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.margin = 8.0;
        assert!(generate_scene(&cfg).is_err());
        let mut cfg = SceneConfig::default();
        cfg.persons = 0;
        assert!(cfg.validate().is_err());
    }
}
