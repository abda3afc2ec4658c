//! On-disk layout of a generated dataset.
//!
//! ```text
//! <root>/manifest.toml
//! <root>/<person_id>/frame_000000.ply   scan points, GT flow to the next frame, labels, anchors
//! <root>/<person_id>/frame_000000.skel  skeleton of the frame (TOML)
//! <root>/<person_id>/mesh_000000.ply    posed person mesh of the frame
//! ```
//!
//! The manifest records the frame rate, units, the generator configuration
//! and its SHA-256 hash, the point count of every frame, and the
//! train/val/test split as half-open frame ranges per person.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mesh::{read_mesh_frame, write_mesh_frame};
use super::ply::Encoding;
use super::scan::ScanRecord;
use super::text::{read_skeleton, to_toml, write_skeleton};
use crate::error::{Error, Result};
use crate::synth::{generate_scene, scan_session, Scene, SceneConfig, SurfaceAnchor, SynthFrame};
use crate::types::{Skeleton, Vec3};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";

/// Fractions of each person's frames assigned to train and val; the rest is test.
pub const SPLIT_FRACTIONS: [f64; 2] = [0.7, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Frames `start..end` of one person.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub person: String,
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub fn frames(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<FrameRange>,
    pub val: Vec<FrameRange>,
    pub test: Vec<FrameRange>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[FrameRange] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Contiguous per-person split: the first 70% of frames (rounded down)
    /// train, the next 20% (rounded down) validate, the remainder test.
    pub fn contiguous(persons: &[PersonEntry]) -> Self {
        let mut splits = Splits::default();
        for p in persons {
            let n = p.frames;
            let train = (n as f64 * SPLIT_FRACTIONS[0]).floor() as usize;
            let val = (n as f64 * SPLIT_FRACTIONS[1]).floor() as usize;
            let range = |start, end| FrameRange {
                person: p.id.clone(),
                start,
                end,
            };
            splits.train.push(range(0, train));
            splits.val.push(range(train, train + val));
            splits.test.push(range(train + val, n));
        }
        splits
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonEntry {
    pub id: String,
    pub frames: usize,
    /// Point count of every frame, in frame order.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub units: String,
    pub frame_rate: f64,
    /// Hex SHA-256 of the generator configuration serialized as TOML.
    pub generator_config_hash: String,
    pub generator: SceneConfig,
    pub persons: Vec<PersonEntry>,
    pub splits: Splits,
}

impl Manifest {
    /// Checks internal consistency: supported version, unique person ids,
    /// per-frame counts, and splits that stay in range without overlapping.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        if self.units != "m" {
            return bad(format!("unsupported units `{}`", self.units));
        }
        if config_hash(&self.generator)? != self.generator_config_hash {
            return bad("generator config hash does not match the recorded configuration".into());
        }
        let mut frames: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &self.persons {
            if p.points.len() != p.frames {
                return bad(format!(
                    "person `{}`: {} frames declared, {} point counts listed",
                    p.id,
                    p.frames,
                    p.points.len()
                ));
            }
            if frames.insert(&p.id, p.frames).is_some() {
                return bad(format!("duplicate person id `{}`", p.id));
            }
        }
        let mut claimed: BTreeMap<&str, Vec<(Split, Range<usize>)>> = BTreeMap::new();
        for split in Split::ALL {
            for r in self.splits.get(split) {
                let Some(&n) = frames.get(r.person.as_str()) else {
                    return bad(format!("{} split names unknown person `{}`", split.name(), r.person));
                };
                if r.start > r.end || r.end > n {
                    return bad(format!(
                        "{} split range {}..{} of `{}` is outside 0..{n}",
                        split.name(),
                        r.start,
                        r.end,
                        r.person
                    ));
                }
                let taken = claimed.entry(&r.person).or_default();
                if let Some((other, o)) = taken.iter().find(|(_, o)| o.start < r.end && r.start < o.end) {
                    return bad(format!(
                        "splits overlap for `{}`: {} {}..{} and {} {}..{}",
                        r.person,
                        other.name(),
                        o.start,
                        o.end,
                        split.name(),
                        r.start,
                        r.end
                    ));
                }
                taken.push((split, r.frames()));
            }
        }
        Ok(())
    }

    pub fn person(&self, id: &str) -> Option<&PersonEntry> {
        self.persons.iter().find(|p| p.id == id)
    }
}

pub fn config_hash(cfg: &SceneConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_toml(cfg)?.as_bytes())))
}

pub fn person_id(index: usize) -> String {
    format!("person_{index:03}")
}

pub fn frame_path(root: &Path, person: &str, frame: usize) -> PathBuf {
    root.join(person).join(format!("frame_{frame:06}.ply"))
}

pub fn skeleton_path(root: &Path, person: &str, frame: usize) -> PathBuf {
    root.join(person).join(format!("frame_{frame:06}.skel"))
}

pub fn mesh_path(root: &Path, person: &str, frame: usize) -> PathBuf {
    root.join(person).join(format!("mesh_{frame:06}.ply"))
}

fn record_of(frame: &SynthFrame) -> ScanRecord {
    let Some(scan) = &frame.scan else {
        return ScanRecord {
            flow: Some(Vec::new()),
            labels: Some(Vec::new()),
            lidar_ids: Some(Vec::new()),
            timestamps: Some(Vec::new()),
            anchors: Some(Vec::new()),
            ..ScanRecord::default()
        };
    };
    ScanRecord {
        points: scan.cloud.points().to_vec(),
        flow: Some(scan.flow.vectors().to_vec()),
        labels: Some(scan.labels.hard().to_vec()),
        lidar_ids: Some(scan.lidar_ids.clone()),
        timestamps: scan.cloud.timestamps().map(<[f64]>::to_vec),
        anchors: Some(scan.anchors.clone()),
        src_index: None,
        extra: Vec::new(),
    }
}

/// Writes a scanned session. `session` is indexed by frame, then person.
pub fn write_session(root: &Path, cfg: &SceneConfig, scene: &Scene, session: &[Vec<SynthFrame>]) -> Result<Manifest> {
    let persons: Vec<PersonEntry> = (0..scene.meshes.len())
        .map(|p| PersonEntry {
            id: person_id(p),
            frames: session.len(),
            points: session.iter().map(|f| f[p].scan.as_ref().map_or(0, |s| s.cloud.len())).collect(),
        })
        .collect();
    for p in &persons {
        let dir = root.join(&p.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..session.len())
        .flat_map(|f| (0..persons.len()).map(move |p| (f, p)))
        .collect();
    jobs.par_iter().try_for_each(|&(f, p)| -> Result<()> {
        let id = &persons[p].id;
        let frame = &session[f][p];
        record_of(frame).write(&frame_path(root, id, f), Encoding::BinaryLittleEndian)?;
        write_skeleton(&skeleton_path(root, id, f), &frame.skeleton)?;
        let mesh = &scene.meshes[p];
        write_mesh_frame(&mesh_path(root, id, f), mesh.vertices(f), mesh.faces())
    })?;
    let splits = Splits::contiguous(&persons);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        units: "m".into(),
        frame_rate: cfg.fps,
        generator_config_hash: config_hash(cfg)?,
        generator: cfg.clone(),
        persons,
        splits,
    };
    manifest.validate()?;
    let path = root.join(MANIFEST);
    fs::write(&path, to_toml(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates a scene from `cfg`, scans it and writes it below `root`.
pub fn write_dataset(root: &Path, cfg: &SceneConfig) -> Result<Manifest> {
    let scene = generate_scene(cfg)?;
    let session = scan_session(&scene)?;
    write_session(root, cfg, &scene, &session)
}

/// A scanned frame loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub record: ScanRecord,
    pub skeleton: Skeleton,
}

impl Frame {
    /// Anchors of the frame; every dataset frame carries them.
    pub fn anchors(&self) -> Result<&[SurfaceAnchor]> {
        self.record
            .anchors
            .as_deref()
            .ok_or_else(|| Error::Dataset("frame has no surface anchors".into()))
    }
}

/// Posed mesh of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFrame {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl MeshFrame {
    pub fn surface_point(&self, anchor: &SurfaceAnchor) -> Result<Vec3> {
        let Some(f) = self.faces.get(anchor.face as usize) else {
            return Err(Error::Dataset(format!("anchor names missing face {}", anchor.face)));
        };
        let [a, b, c] = f.map(|i| self.vertices[i as usize]);
        Ok(a * (1.0 - anchor.u - anchor.v) + b * anchor.u + c * anchor.v)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Reads and validates the manifest and checks that every listed file exists.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {}", path.display(), e.message())))?;
        manifest.validate()?;
        let ds = Self {
            root: root.to_path_buf(),
            manifest,
        };
        for p in &ds.manifest.persons {
            for f in 0..p.frames {
                for file in [
                    frame_path(root, &p.id, f),
                    skeleton_path(root, &p.id, f),
                    mesh_path(root, &p.id, f),
                ] {
                    if !file.is_file() {
                        return Err(Error::Dataset(format!("missing file {}", file.display())));
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn entry(&self, person: &str, frame: usize) -> Result<&PersonEntry> {
        let p = self
            .manifest
            .person(person)
            .ok_or_else(|| Error::Dataset(format!("unknown person `{person}`")))?;
        if frame >= p.frames {
            return Err(Error::Dataset(format!("person `{person}` has no frame {frame}")));
        }
        Ok(p)
    }

    /// Loads a frame and checks its point count against the manifest.
    pub fn load_frame(&self, person: &str, frame: usize) -> Result<Frame> {
        let entry = self.entry(person, frame)?;
        let path = frame_path(&self.root, person, frame);
        let record = ScanRecord::read(&path)?;
        if record.len() != entry.points[frame] {
            return Err(Error::Dataset(format!(
                "{}: manifest lists {} points, file has {}",
                path.display(),
                entry.points[frame],
                record.len()
            )));
        }
        let skeleton = read_skeleton(&skeleton_path(&self.root, person, frame))?;
        Ok(Frame { record, skeleton })
    }

    pub fn load_mesh(&self, person: &str, frame: usize) -> Result<MeshFrame> {
        self.entry(person, frame)?;
        let (vertices, faces) = read_mesh_frame(&mesh_path(&self.root, person, frame))?;
        Ok(MeshFrame { vertices, faces })
    }

    /// Loads every frame once, checking counts and anchor validity.
    pub fn verify(&self) -> Result<()> {
        let jobs: Vec<(&str, usize)> = self
            .manifest
            .persons
            .iter()
            .flat_map(|p| (0..p.frames).map(move |f| (p.id.as_str(), f)))
            .collect();
        jobs.par_iter().try_for_each(|&(person, f)| {
            let frame = self.load_frame(person, f)?;
            let mesh = self.load_mesh(person, f)?;
            for a in frame.anchors()? {
                mesh.surface_point(a)?;
            }
            Ok(())
        })
    }

    /// Frame ranges of a split, in manifest order.
    pub fn frames_in_split(&self, split: Split) -> &[FrameRange] {
        self.manifest.splits.get(split)
    }
}
