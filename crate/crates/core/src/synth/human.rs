//! Procedural articulated human: one capsule per bone of the standard
//! skeleton, rigidly skinned and animated with a simple walking gait.
//!
//! Body frame: +x to the person's left, +y forward, +z up, feet near z = 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::AnimatedMesh;
use crate::bodyparts::nearest_bone;
use crate::error::{Error, Result};
use crate::types::{Mat3, RigidTransform, Skeleton, Vec3, STANDARD_BONES};

const SEGMENTS: usize = 12;
const CAP_RINGS: usize = 2;
/// Maximum spacing of cylinder rings along a bone (m).
const RING_SPACING: f64 = 0.01;

/// Rest joint positions (T-pose) for a unit-scale person, standard joint order.
const REST_JOINTS: [[f64; 3]; 15] = [
    [0.0, 0.0, 0.95],
    [0.0, 0.0, 1.45],
    [0.0, 0.0, 1.68],
    [0.18, 0.0, 1.42],
    [0.46, 0.0, 1.42],
    [0.71, 0.0, 1.42],
    [-0.18, 0.0, 1.42],
    [-0.46, 0.0, 1.42],
    [-0.71, 0.0, 1.42],
    [0.10, 0.0, 0.90],
    [0.10, 0.0, 0.50],
    [0.10, 0.0, 0.08],
    [-0.10, 0.0, 0.90],
    [-0.10, 0.0, 0.50],
    [-0.10, 0.0, 0.08],
];

/// Capsule radius per bone, standard bone order.
const RADII: [f64; 14] = [
    0.10, 0.13, 0.05, 0.045, 0.038, 0.05, 0.045, 0.038, 0.07, 0.07, 0.05, 0.07, 0.07, 0.05,
];

/// For each right-side bone, the left-side bone it mirrors.
const MIRROR_OF: [(usize, usize); 6] = [(5, 2), (6, 3), (7, 4), (11, 8), (12, 9), (13, 10)];

/// Order in which bones are posed so that every proximal joint is known first.
const POSE_ORDER: [usize; 14] = [1, 0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13];

/// Gait amplitudes (rad) and timing. All zero gives the symmetric T-pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseParams {
    /// Arms lowered from horizontal.
    pub arm_abduction: f64,
    pub hip_swing: f64,
    pub knee_flex: f64,
    pub arm_swing: f64,
    pub elbow_flex: f64,
    /// Gait cycles per second.
    pub cadence: f64,
    /// Gait phase at t = 0 (rad).
    pub phase: f64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            arm_abduction: 0.0,
            hip_swing: 0.0,
            knee_flex: 0.0,
            arm_swing: 0.0,
            elbow_flex: 0.0,
            cadence: 0.0,
            phase: 0.0,
        }
    }
}

impl PoseParams {
    /// A typical walking gait.
    pub fn walking() -> Self {
        Self {
            arm_abduction: 1.15,
            hip_swing: 0.35,
            knee_flex: 0.6,
            arm_swing: 0.35,
            elbow_flex: 0.3,
            cadence: 0.9,
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let limits = [
            ("arm_abduction", self.arm_abduction, 1.5),
            ("hip_swing", self.hip_swing, 0.9),
            ("knee_flex", self.knee_flex, 1.6),
            ("arm_swing", self.arm_swing, 1.0),
            ("elbow_flex", self.elbow_flex, 2.2),
        ];
        for (name, value, max) in limits {
            if !(0.0..=max).contains(&value) {
                return Err(Error::Pose(format!("{name} = {value} outside [0, {max}] rad")));
            }
        }
        if !(self.cadence >= 0.0 && self.cadence.is_finite()) || !self.phase.is_finite() {
            return Err(Error::Pose("cadence must be nonnegative and phase finite".into()));
        }
        Ok(())
    }
}

/// Animation of one person: gait plus travel along a waypoint path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub pose: PoseParams,
    /// Ground-plane path (m); walked back and forth.
    pub waypoints: Vec<[f64; 2]>,
    /// Walking speed (m/s).
    pub speed: f64,
    pub fps: f64,
    pub frames: usize,
}

impl MotionParams {
    /// A single frame of the rest pose at the origin.
    pub fn rest() -> Self {
        Self {
            pose: PoseParams::default(),
            waypoints: vec![[0.0, 0.0]],
            speed: 0.0,
            fps: 10.0,
            frames: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        if self.waypoints.is_empty() {
            return Err(Error::Pose("motion needs at least one waypoint".into()));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) || !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Pose("speed must be nonnegative and fps positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::Pose("motion needs at least one frame".into()));
        }
        Ok(())
    }

    /// Ground position and heading (rad about +z; 0 faces world +y) at time `t`.
    fn root(&self, t: f64) -> ([f64; 2], f64) {
        let w = &self.waypoints;
        let lengths: Vec<f64> = w.windows(2).map(|p| (p[1][0] - p[0][0]).hypot(p[1][1] - p[0][1])).collect();
        let total: f64 = lengths.iter().sum();
        if total <= 0.0 {
            return (w[0], 0.0);
        }
        // ping-pong along the polyline
        let mut s = (self.speed * t) % (2.0 * total);
        let backwards = s > total;
        if backwards {
            s = 2.0 * total - s;
        }
        let mut seg = 0;
        while seg + 1 < lengths.len() && (s > lengths[seg] || lengths[seg] == 0.0) {
            s -= lengths[seg];
            seg += 1;
        }
        let (a, b) = (w[seg], w[seg + 1]);
        let frac = if lengths[seg] > 0.0 { (s / lengths[seg]).clamp(0.0, 1.0) } else { 0.0 };
        let pos = [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])];
        let (mut dx, mut dy) = (b[0] - a[0], b[1] - a[1]);
        if backwards {
            dx = -dx;
            dy = -dy;
        }
        (pos, (-dx).atan2(dy))
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Body-frame rotation of every bone at gait phase `phi`.
fn bone_rotations(p: &PoseParams, phi: f64) -> [Mat3; 14] {
    let (sin, cos) = phi.sin_cos();
    let hip_l = p.hip_swing * sin;
    let knee_l = p.knee_flex * 0.5 * (1.0 - cos);
    let knee_r = p.knee_flex * 0.5 * (1.0 + cos);
    let swing_l = -p.arm_swing * sin;
    let mut r = [Mat3::identity(); 14];
    r[3] = rot_x(swing_l) * rot_y(p.arm_abduction);
    r[4] = rot_x(swing_l + p.elbow_flex) * rot_y(p.arm_abduction);
    r[6] = rot_x(-swing_l) * rot_y(-p.arm_abduction);
    r[7] = rot_x(-swing_l + p.elbow_flex) * rot_y(-p.arm_abduction);
    r[9] = rot_x(hip_l);
    r[10] = rot_x(hip_l - knee_l);
    r[12] = rot_x(-hip_l);
    r[13] = rot_x(-hip_l - knee_r);
    r
}

/// Rotations of the pose the mesh is built and skinned in.
fn neutral_rotations(p: &PoseParams) -> [Mat3; 14] {
    let knee = -0.5 * p.knee_flex;
    let mut r = [Mat3::identity(); 14];
    r[3] = rot_y(p.arm_abduction);
    r[4] = rot_x(p.elbow_flex) * rot_y(p.arm_abduction);
    r[6] = rot_y(-p.arm_abduction);
    r[7] = rot_x(p.elbow_flex) * rot_y(-p.arm_abduction);
    r[10] = rot_x(knee);
    r[13] = rot_x(knee);
    r
}

struct Body {
    rest: Vec<Vec3>,
    radii: Vec<f64>,
}

impl Body {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(0.92..1.08);
        let girth = rng.random_range(0.9..1.15);
        Self {
            rest: REST_JOINTS.iter().map(|j| Vec3::from(*j) * scale).collect(),
            radii: RADII.iter().map(|r| r * scale * girth).collect(),
        }
    }
}

/// Appends a tube of `radius` around segment `a`–`b`. An end marked as a
/// tip gets a hemispherical cap. Any other end is a shared joint: the tube
/// stops `RING_SPACING / 2` short of it and is closed by a flat disk, so no
/// vertex is equally close to this bone and its neighbor at the joint.
fn push_capsule(a: Vec3, b: Vec3, radius: f64, tips: [bool; 2], verts: &mut Vec<Vec3>, faces: &mut Vec<[u32; 3]>) {
    let axis = b - a;
    let length = axis.norm();
    let w = axis / length;
    let reference = if w.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
    let u = reference.cross(&w).normalize();
    let v = w.cross(&u);
    let ring = |center: Vec3, lat: f64| -> Vec<Vec3> {
        (0..SEGMENTS)
            .map(|j| {
                let th = 2.0 * PI * j as f64 / SEGMENTS as f64;
                center + (u * th.cos() + v * th.sin()) * (radius * lat.cos()) + w * (radius * lat.sin())
            })
            .collect()
    };
    let recess = 0.5 * RING_SPACING;
    let start = if tips[0] { 0.0 } else { recess };
    let end = if tips[1] { length } else { length - recess };

    let mut rings = Vec::new();
    let bottom = if tips[0] {
        for i in 1..CAP_RINGS {
            rings.push(ring(a, -PI / 2.0 + PI / 2.0 * i as f64 / CAP_RINGS as f64));
        }
        a - w * radius
    } else {
        a + w * start
    };
    let spans = ((end - start) / RING_SPACING).ceil().max(1.0) as usize;
    for j in 0..=spans {
        rings.push(ring(a + w * (start + (end - start) * j as f64 / spans as f64), 0.0));
    }
    let top = if tips[1] {
        for i in 1..CAP_RINGS {
            rings.push(ring(b, PI / 2.0 * i as f64 / CAP_RINGS as f64));
        }
        b + w * radius
    } else {
        a + w * end
    };

    let base = verts.len() as u32;
    verts.push(bottom);
    for r in &rings {
        verts.extend_from_slice(r);
    }
    verts.push(top);
    let top = verts.len() as u32 - 1;
    let seg = SEGMENTS as u32;
    let at = |ring: usize, j: u32| base + 1 + ring as u32 * seg + j % seg;
    for j in 0..seg {
        faces.push([base, at(0, j + 1), at(0, j)]);
    }
    for r in 0..rings.len() - 1 {
        for j in 0..seg {
            faces.push([at(r, j), at(r, j + 1), at(r + 1, j + 1)]);
            faces.push([at(r, j), at(r + 1, j + 1), at(r + 1, j)]);
        }
    }
    let last = rings.len() - 1;
    for j in 0..seg {
        faces.push([top, at(last, j), at(last, j + 1)]);
    }
}

/// Per-bone capsules around `joints`. Right-side bones are exact mirror
/// images of their left counterparts, so a mirror-symmetric skeleton yields a
/// mirror-symmetric mesh.
fn capsules(joints: &[Vec3], radii: &[f64]) -> Vec<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let mut parts: Vec<(Vec<Vec3>, Vec<[u32; 3]>)> = Vec::with_capacity(14);
    for (k, &(a, b)) in STANDARD_BONES.iter().enumerate() {
        if let Some(&(_, left)) = MIRROR_OF.iter().find(|(right, _)| *right == k) {
            let (v, f) = &parts[left];
            let mirrored = v.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
            let flipped = f.iter().map(|t| [t[0], t[2], t[1]]).collect();
            parts.push((mirrored, flipped));
        } else {
            let (mut v, mut f) = (Vec::new(), Vec::new());
            let tip = |j: usize| STANDARD_BONES.iter().filter(|(x, y)| *x == j || *y == j).count() == 1;
            push_capsule(joints[a], joints[b], radii[k], [tip(a), tip(b)], &mut v, &mut f);
            parts.push((v, f));
        }
    }
    parts
}

/// Poses the rest skeleton with per-bone body-frame rotations. Returns the
/// joint positions and, per bone, the map from rest to posed coordinates.
fn pose(rest: &[Vec3], rotations: &[Mat3; 14]) -> Result<(Vec<Vec3>, Vec<RigidTransform>)> {
    let mut joints = rest.to_vec();
    let mut bone_tf = vec![RigidTransform::identity(); 14];
    for &k in &POSE_ORDER {
        let (a, b) = STANDARD_BONES[k];
        let r = rotations[k];
        joints[b] = joints[a] + r * (rest[b] - rest[a]);
        bone_tf[k] = RigidTransform::new(r, joints[a] - r * rest[a])?;
    }
    Ok((joints, bone_tf))
}

/// Builds an animated human whose body proportions derive from `seed`.
///
/// The mesh is built in a neutral pose (arm abduction, elbow flex and half
/// the knee flex applied, no swing) and every vertex is bound rigidly to the
/// bone nearest to it in that pose.
pub fn procedural_human(seed: u64, motion: &MotionParams) -> Result<AnimatedMesh> {
    motion.validate()?;
    let body = Body::from_seed(seed);
    let (neutral, neutral_tf) = pose(&body.rest, &neutral_rotations(&motion.pose))?;
    let neutral_skeleton = Skeleton::standard(neutral.clone())?;

    let mut base_verts = Vec::new();
    let mut faces = Vec::new();
    for (v, f) in capsules(&neutral, &body.radii) {
        let offset = base_verts.len() as u32;
        faces.extend(f.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
        base_verts.extend(v);
    }
    let binding: Vec<usize> = base_verts.iter().map(|p| nearest_bone(p, &neutral_skeleton).0).collect();
    let unpose: Vec<RigidTransform> = neutral_tf.iter().map(RigidTransform::inverse).collect();

    let mut frames = Vec::with_capacity(motion.frames);
    let mut skeletons = Vec::with_capacity(motion.frames);
    for f in 0..motion.frames {
        let t = f as f64 / motion.fps;
        let phi = 2.0 * PI * motion.pose.cadence * t + motion.pose.phase;
        let (joints, bone_tf) = pose(&body.rest, &bone_rotations(&motion.pose, phi))?;
        let ([x, y], heading) = motion.root(t);
        let world = RigidTransform::new(rot_z(heading), Vec3::new(x, y, 0.0))?;
        let skin: Vec<RigidTransform> = bone_tf
            .iter()
            .zip(&unpose)
            .map(|(tf, un)| world.compose(&tf.compose(un)))
            .collect();
        frames.push(base_verts.iter().zip(&binding).map(|(p, &k)| skin[k].apply(p)).collect());
        skeletons.push(Skeleton::standard(joints.iter().map(|p| world.apply(p)).collect())?);
    }
    AnimatedMesh::new(faces, frames, skeletons, motion.fps)?.with_vertex_bones(binding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodyparts::assign_labels_to_points;
    use crate::spatial::NeighborIndex;

    #[test]
    fn zero_pose_is_mirror_symmetric() {
        let mesh = procedural_human(3, &MotionParams::rest()).unwrap();
        let verts = mesh.vertices(0);
        let left: Vec<Vec3> = verts.iter().filter(|p| p.x > 1e-6).cloned().collect();
        let right: Vec<Vec3> = verts.iter().filter(|p| p.x < -1e-6).map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        assert_eq!(left.len(), right.len());
        let index = NeighborIndex::build(&right);
        for l in &left {
            assert!(index.nearest(l).unwrap().distance < 1e-9, "{l:?}");
        }
    }

    #[test]
    fn same_seed_same_mesh() {
        let motion = MotionParams {
            pose: PoseParams::walking(),
            waypoints: vec![[0.0, 0.0], [5.0, 2.0]],
            speed: 1.2,
            fps: 10.0,
            frames: 5,
        };
        let a = procedural_human(9, &motion).unwrap();
        let b = procedural_human(9, &motion).unwrap();
        assert_eq!(a, b);
        let c = procedural_human(10, &motion).unwrap();
        assert_ne!(a.vertices(0), c.vertices(0));
    }

    #[test]
    fn labels_follow_generating_bone() {
        let motion = MotionParams {
            pose: PoseParams::walking(),
            waypoints: vec![[0.0, 0.0], [6.0, 0.0], [6.0, 4.0]],
            speed: 1.3,
            fps: 10.0,
            frames: 20,
        };
        let mesh = procedural_human(4, &motion).unwrap();
        let bones = mesh.vertex_bones().unwrap();
        let mut agree = 0;
        let mut total = 0;
        for f in 0..mesh.num_frames() {
            let labels = assign_labels_to_points(mesh.vertices(f), mesh.skeleton(f));
            agree += labels.hard().iter().zip(bones).filter(|(a, b)| a == b).count();
            total += bones.len();
        }
        let rate = agree as f64 / total as f64;
        assert!(rate >= 0.99, "agreement {rate}");
    }

    #[test]
    fn joint_limits_are_enforced() {
        let mut motion = MotionParams::rest();
        motion.pose.knee_flex = 2.5;
        assert!(matches!(procedural_human(0, &motion), Err(Error::Pose(_))));
        motion.pose.knee_flex = -0.1;
        assert!(procedural_human(0, &motion).is_err());
    }

    #[test]
    fn skeleton_moves_with_mesh() {
        let motion = MotionParams {
            pose: PoseParams::walking(),
            waypoints: vec![[1.0, 1.0], [1.0, 5.0]],
            speed: 1.0,
            fps: 10.0,
            frames: 3,
        };
        let mesh = procedural_human(1, &motion).unwrap();
        // heading 0 walks along +y; pelvis advances 0.1 m per frame
        let p0 = mesh.skeleton(0).joints()[0];
        let p2 = mesh.skeleton(2).joints()[0];
        assert!((p2 - p0 - Vec3::new(0.0, 0.2, 0.0)).norm() < 1e-12);
        assert!((p0.x - 1.0).abs() < 1e-12 && (p0.y - 1.0).abs() < 1e-12);
    }
}
