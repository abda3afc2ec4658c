//! TOML files: skeletons (`.skel`) and configuration.
//!
//! A skeleton file lists bones as 0-based joint index pairs followed by the
//! named joints:
//!
//! ```toml
//! bones = [[1, 2], [0, 1]]
//!
//! [[joints]]
//! name = "pelvis"
//! position = [0.0, 0.0, 0.95]
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::RegistrationConfig;
use crate::synth::SceneConfig;
use crate::types::{Skeleton, Vec3};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    bones: Vec<[usize; 2]>,
    joints: Vec<JointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    name: String,
    position: [f64; 3],
}

pub fn skeleton_to_string(skeleton: &Skeleton) -> Result<String> {
    let file = SkeletonFile {
        bones: skeleton.bones().iter().map(|&(a, b)| [a, b]).collect(),
        joints: skeleton
            .names()
            .iter()
            .zip(skeleton.joints())
            .map(|(name, p)| JointEntry {
                name: name.clone(),
                position: [p.x, p.y, p.z],
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
}

pub fn skeleton_from_str(text: &str) -> Result<Skeleton> {
    let file: SkeletonFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let (names, joints) = file
        .joints
        .into_iter()
        .map(|j| (j.name, Vec3::from(j.position)))
        .unzip();
    Skeleton::new(names, joints, file.bones.into_iter().map(|[a, b]| (a, b)).collect())
}

pub fn write_skeleton(path: &Path, skeleton: &Skeleton) -> Result<()> {
    fs::write(path, skeleton_to_string(skeleton)?).map_err(|e| Error::io(path, e))
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    skeleton_from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn registration_config_from_str(text: &str) -> Result<RegistrationConfig> {
    let cfg: RegistrationConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_registration_config(path: &Path) -> Result<RegistrationConfig> {
    let cfg: RegistrationConfig = read_toml(path)?;
    cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn read_scene_config(path: &Path) -> Result<SceneConfig> {
    let cfg: SceneConfig = read_toml(path)?;
    cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::STANDARD_JOINTS;

    fn standard() -> Skeleton {
        Skeleton::standard((0..15).map(|i| Vec3::new(i as f64 * 0.1, (i % 3) as f64, 1.0 + i as f64)).collect()).unwrap()
    }

    #[test]
    fn skeleton_round_trip() {
        let s = standard();
        let back = skeleton_from_str(&skeleton_to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.names()[0], STANDARD_JOINTS[0]);
    }

    #[test]
    fn out_of_range_bone_is_rejected() {
        let text = skeleton_to_string(&standard()).unwrap().replacen("[1, 2]", "[1, 15]", 1);
        assert!(matches!(skeleton_from_str(&text), Err(Error::InvalidSkeleton(_))));
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RegistrationConfig::default();
        let back = registration_config_from_str(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(registration_config_from_str("").unwrap(), cfg);
        let scene = SceneConfig::default();
        let back: SceneConfig = toml::from_str(&to_toml(&scene).unwrap()).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let err = registration_config_from_str("max_outer_iter = 3").unwrap_err().to_string();
        assert!(err.contains("max_outer_iter"), "{err}");
        let err = registration_config_from_str("[weights]\nbeta_smooth = -1.0").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = registration_config_from_str("[weights]\nbeta_smoth = 1.0").unwrap_err().to_string();
        assert!(err.contains("beta_smoth"), "{err}");
    }
}
