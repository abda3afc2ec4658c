//! Synthetic data: animated human meshes scanned by simulated rosette
//! LiDARs, with exact ground-truth flow, part labels and skeletons.

mod human;
mod lidar;
mod raycast;
mod scene;

pub use human::{procedural_human, MotionParams, PoseParams};
pub use lidar::{LidarParams, LidarSpec, Pulse, GOLDEN_RATIO};
pub use raycast::{intersect_triangle, raycast, raycast_brute_force, Hit, PosedMesh};
pub use scene::{generate_scene, SceneConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bodyparts::assign_labels;
use crate::error::{Error, Result};
use crate::types::{FlowField, PartLabels, PointCloud, Skeleton, Vec3};

/// Fixed-topology triangle mesh with per-frame vertex positions and skeletons.
#[derive(Debug, Clone, PartialEq)]
pub struct AnimatedMesh {
    faces: Vec<[u32; 3]>,
    frames: Vec<Vec<Vec3>>,
    skeletons: Vec<Skeleton>,
    fps: f64,
    vertex_bones: Option<Vec<usize>>,
}

impl AnimatedMesh {
    pub fn new(faces: Vec<[u32; 3]>, frames: Vec<Vec<Vec3>>, skeletons: Vec<Skeleton>, fps: f64) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Empty("animated mesh frames"));
        };
        let nv = first.len();
        for (f, verts) in frames.iter().enumerate() {
            if verts.len() != nv {
                return Err(Error::LengthMismatch {
                    what: "vertices per frame",
                    expected: nv,
                    found: verts.len(),
                });
            }
            if let Some(i) = verts.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(Error::NonFinite {
                    what: "mesh vertex",
                    index: f * nv + i,
                });
            }
        }
        if let Some(t) = faces.iter().position(|f| f.iter().any(|&v| v as usize >= nv)) {
            return Err(Error::Invalid(format!("face {t} references a vertex beyond {nv}")));
        }
        if skeletons.len() != frames.len() {
            return Err(Error::LengthMismatch {
                what: "skeletons per frame",
                expected: frames.len(),
                found: skeletons.len(),
            });
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Invalid(format!("frame rate must be positive, got {fps}")));
        }
        Ok(Self {
            faces,
            frames,
            skeletons,
            fps,
            vertex_bones: None,
        })
    }

    /// Records which bone drives each vertex.
    pub fn with_vertex_bones(mut self, bones: Vec<usize>) -> Result<Self> {
        if bones.len() != self.num_vertices() {
            return Err(Error::LengthMismatch {
                what: "vertex bones",
                expected: self.num_vertices(),
                found: bones.len(),
            });
        }
        self.vertex_bones = Some(bones);
        Ok(self)
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertices(&self, frame: usize) -> &[Vec3] {
        &self.frames[frame]
    }

    pub fn skeleton(&self, frame: usize) -> &Skeleton {
        &self.skeletons[frame]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.frames[0].len()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn vertex_bones(&self) -> Option<&[usize]> {
        self.vertex_bones.as_deref()
    }

    pub fn posed(&self, frame: usize) -> PosedMesh<'_> {
        PosedMesh::new(&self.frames[frame], &self.faces)
    }

    /// Point with barycentric coordinates `(u, v)` on triangle `face` at `frame`.
    pub fn surface_point(&self, frame: usize, face: usize, u: f64, v: f64) -> Vec3 {
        let f = self.faces[face];
        let verts = &self.frames[frame];
        verts[f[0] as usize] * (1.0 - u - v) + verts[f[1] as usize] * u + verts[f[2] as usize] * v
    }
}

/// Where a scan point sits on the scanned mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceAnchor {
    pub face: u32,
    pub u: f64,
    pub v: f64,
}

/// Points returned by one person in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonScan {
    pub cloud: PointCloud,
    pub labels: PartLabels,
    /// Displacement of every point to its surface location at the next frame.
    pub flow: FlowField,
    pub lidar_ids: Vec<u8>,
    pub anchors: Vec<SurfaceAnchor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub person: usize,
    pub frame: usize,
    pub skeleton: Skeleton,
    /// `None` when no pulse hit this person.
    pub scan: Option<PersonScan>,
}

/// Meshes plus the sensors observing them.
#[derive(Debug, Clone)]
pub struct Scene {
    pub meshes: Vec<AnimatedMesh>,
    pub lidars: Vec<LidarSpec>,
    /// Scan time per frame and sensor (s).
    pub window: f64,
    /// Standard deviation of Gaussian range noise (m).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.meshes.first() else {
            return Err(Error::Empty("scene meshes"));
        };
        if self.meshes.iter().any(|m| m.num_frames() != first.num_frames() || m.fps() != first.fps()) {
            return Err(Error::Invalid("all meshes must share frame count and frame rate".into()));
        }
        if self.lidars.is_empty() || self.lidars.len() > u8::MAX as usize + 1 {
            return Err(Error::Invalid(format!("scene needs 1 to 256 sensors, got {}", self.lidars.len())));
        }
        if !(self.window > 0.0) {
            return Err(Error::Invalid(format!("scan window must be positive, got {}", self.window)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Frames that have a successor, and hence ground-truth flow.
    pub fn scannable_frames(&self) -> usize {
        self.meshes.first().map_or(0, |m| m.num_frames().saturating_sub(1))
    }
}

fn noise_seed(seed: u64, frame: usize, lidar: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (lidar as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

#[derive(Default)]
struct Bucket {
    points: Vec<Vec3>,
    times: Vec<f64>,
    flow: Vec<Vec3>,
    lidar_ids: Vec<u8>,
    anchors: Vec<SurfaceAnchor>,
}

/// Scans frame `frame` with every sensor and splits the returns per person.
pub fn scan_frame(scene: &Scene, frame: usize) -> Result<Vec<SynthFrame>> {
    scene.validate()?;
    if frame + 1 >= scene.meshes[0].num_frames() {
        return Err(Error::Invalid(format!(
            "frame {frame} has no successor; meshes have {} frames",
            scene.meshes[0].num_frames()
        )));
    }
    let posed: Vec<PosedMesh> = scene.meshes.iter().map(|m| m.posed(frame)).collect();
    let t_start = frame as f64 / scene.meshes[0].fps();
    let mut buckets: Vec<Bucket> = scene.meshes.iter().map(|_| Bucket::default()).collect();

    for (li, lidar) in scene.lidars.iter().enumerate() {
        let pulses = lidar.rosette_directions(t_start, scene.window)?;
        let hits: Vec<Option<Hit>> = pulses
            .par_iter()
            .map(|p| raycast(&posed, &lidar.position, &p.direction, lidar.params.max_range))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(scene.seed, frame, li));
        let normal = Normal::new(0.0, scene.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for (pulse, hit) in pulses.iter().zip(hits) {
            let Some(hit) = hit else { continue };
            let range = if scene.noise_sigma > 0.0 {
                hit.distance + normal.sample(&mut rng)
            } else {
                hit.distance
            };
            let point = lidar.position + pulse.direction * range;
            let next = scene.meshes[hit.mesh].surface_point(frame + 1, hit.triangle, hit.u, hit.v);
            let b = &mut buckets[hit.mesh];
            b.points.push(point);
            b.times.push(pulse.time);
            b.flow.push(next - point);
            b.lidar_ids.push(li as u8);
            b.anchors.push(SurfaceAnchor {
                face: hit.triangle as u32,
                u: hit.u,
                v: hit.v,
            });
        }
    }

    buckets
        .into_iter()
        .enumerate()
        .map(|(person, b)| {
            let skeleton = scene.meshes[person].skeleton(frame).clone();
            let scan = if b.points.is_empty() {
                log::warn!("person {person} has no returns in frame {frame}");
                None
            } else {
                let n = b.points.len();
                let cloud = PointCloud::new(b.points)?.with_timestamps(b.times)?;
                let labels = assign_labels(&cloud, &skeleton);
                Some(PersonScan {
                    labels,
                    flow: FlowField::new(b.flow, n)?,
                    cloud,
                    lidar_ids: b.lidar_ids,
                    anchors: b.anchors,
                })
            };
            Ok(SynthFrame {
                person,
                frame,
                skeleton,
                scan,
            })
        })
        .collect()
}

/// Scans every frame that has a successor. Outer index is the frame.
pub fn scan_session(scene: &Scene) -> Result<Vec<Vec<SynthFrame>>> {
    (0..scene.scannable_frames()).map(|f| scan_frame(scene, f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Mat3;

    fn box_mesh(offsets: &[Vec3]) -> AnimatedMesh {
        // unit square facing -x at x = 5 plus a second one behind it
        let base = [
            Vec3::new(5.0, -0.5, -0.5),
            Vec3::new(5.0, 0.5, -0.5),
            Vec3::new(5.0, 0.5, 0.5),
            Vec3::new(5.0, -0.5, 0.5),
        ];
        let frames = offsets.iter().map(|o| base.iter().map(|v| v + o).collect()).collect();
        let skel = |o: &Vec3| {
            Skeleton::new(
                vec!["a".into(), "b".into()],
                vec![Vec3::new(5.0, 0.0, -0.5) + o, Vec3::new(5.0, 0.0, 0.5) + o],
                vec![(0, 1)],
            )
            .unwrap()
        };
        AnimatedMesh::new(vec![[0, 1, 2], [0, 2, 3]], frames, offsets.iter().map(skel).collect(), 10.0).unwrap()
    }

    fn sensor() -> LidarSpec {
        let orient = Mat3::from_columns(&[Vec3::y(), Vec3::z(), Vec3::x()]);
        LidarSpec::new(Vec3::zeros(), orient, LidarParams::default(), 0.4).unwrap()
    }

    fn scene(meshes: Vec<AnimatedMesh>, sigma: f64) -> Scene {
        Scene {
            meshes,
            lidars: vec![sensor()],
            window: 0.01,
            noise_sigma: sigma,
            seed: 7,
        }
    }

    #[test]
    fn static_mesh_has_zero_flow() {
        let s = scene(vec![box_mesh(&[Vec3::zeros(), Vec3::zeros()])], 0.0);
        let frames = scan_frame(&s, 0).unwrap();
        let scan = frames[0].scan.as_ref().unwrap();
        assert!(scan.cloud.len() > 10);
        assert!(scan.flow.vectors().iter().all(|f| f.norm() < 1e-12));
    }

    #[test]
    fn translated_mesh_has_constant_flow() {
        let s = scene(vec![box_mesh(&[Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)])], 0.0);
        let scan = scan_frame(&s, 0).unwrap().remove(0).scan.unwrap();
        for f in scan.flow.vectors() {
            assert!((f - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
        assert!(scan.cloud.points().iter().all(|p| (p.x - 5.0).abs() < 1e-9));
    }

    #[test]
    fn last_frame_cannot_be_scanned() {
        let s = scene(vec![box_mesh(&[Vec3::zeros(), Vec3::zeros()])], 0.0);
        assert!(scan_frame(&s, 1).is_err());
        assert_eq!(scan_session(&s).unwrap().len(), 1);
    }

    #[test]
    fn noise_is_seeded_and_radial() {
        let s = scene(vec![box_mesh(&[Vec3::zeros(), Vec3::zeros()])], 0.01);
        let a = scan_frame(&s, 0).unwrap();
        let b = scan_frame(&s, 0).unwrap();
        assert_eq!(a, b);
        let scan = a[0].scan.as_ref().unwrap();
        assert!(scan.cloud.points().iter().any(|p| (p.x - 5.0).abs() > 1e-6));
        // flow still lands on the surface
        for (p, f) in scan.cloud.points().iter().zip(scan.flow.vectors()) {
            assert!(((p + f).x - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unseen_person_is_flagged() {
        let behind = box_mesh(&[Vec3::new(-20.0, 0.0, 0.0), Vec3::new(-20.0, 0.0, 0.0)]);
        let s = scene(vec![box_mesh(&[Vec3::zeros(), Vec3::zeros()]), behind], 0.0);
        let frames = scan_frame(&s, 0).unwrap();
        assert!(frames[0].scan.is_some());
        assert!(frames[1].scan.is_none());
    }

    #[test]
    fn mesh_validation() {
        assert!(AnimatedMesh::new(vec![[0, 1, 5]], vec![vec![Vec3::zeros(); 3]], vec![], 10.0).is_err());
    }
}
