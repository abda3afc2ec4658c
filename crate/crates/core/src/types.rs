//! Domain types shared by every module: clouds, flows, skeletons, labels and
//! rigid transforms. All of them validate on construction and are immutable
//! afterwards.

use nalgebra::{Matrix3, Vector3};

use crate::error::{check_len, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOL: f64 = 1e-9;
const MIN_BONE_LENGTH: f64 = 1e-9;
const SOFT_ROW_TOL: f64 = 1e-6;

fn check_finite(what: &'static str, points: &[Vec3]) -> Result<()> {
    match points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// An ordered set of 3D points in meters, world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    timestamps: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        check_finite("point cloud", &points)?;
        Ok(Self {
            points,
            timestamps: None,
        })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<f64>) -> Result<Self> {
        check_len("timestamps", self.points.len(), timestamps.len())?;
        if let Some(index) = timestamps.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                what: "timestamps",
                index,
            });
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    /// Sub-cloud made of the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let mut out = Self::new(points)?;
        if let Some(ts) = &self.timestamps {
            out.timestamps = Some(indices.iter().map(|&i| ts[i]).collect());
        }
        Ok(out)
    }
}

pub(crate) fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Per-point displacement aligned index-wise with a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Vec<Vec3>,
}

impl FlowField {
    pub fn new(vectors: Vec<Vec3>, source_len: usize) -> Result<Self> {
        check_len("flow field", source_len, vectors.len())?;
        check_finite("flow field", &vectors)?;
        Ok(Self { vectors })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            vectors: vec![Vec3::zeros(); len],
        }
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
        }
    }

    pub fn mean_norm(&self) -> f64 {
        if self.vectors.is_empty() {
            return 0.0;
        }
        self.vectors.iter().map(|v| v.norm()).sum::<f64>() / self.vectors.len() as f64
    }
}

/// Names of the standard 15-joint body skeleton, in index order.
pub const STANDARD_JOINTS: [&str; 15] = [
    "pelvis",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

/// Bone topology of the standard skeleton; bone `k` is body part `k`.
pub const STANDARD_BONES: [(usize, usize); 14] = [
    (1, 2),   // neck - head
    (0, 1),   // pelvis - neck
    (1, 3),   // neck - l_shoulder
    (3, 4),   // l_shoulder - l_elbow
    (4, 5),   // l_elbow - l_wrist
    (1, 6),   // neck - r_shoulder
    (6, 7),   // r_shoulder - r_elbow
    (7, 8),   // r_elbow - r_wrist
    (0, 9),   // pelvis - l_hip
    (9, 10),  // l_hip - l_knee
    (10, 11), // l_knee - l_ankle
    (0, 12),  // pelvis - r_hip
    (12, 13), // r_hip - r_knee
    (13, 14), // r_knee - r_ankle
];

/// Named joints plus the bone segments that define the body parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    joints: Vec<Vec3>,
    bones: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn new(names: Vec<String>, joints: Vec<Vec3>, bones: Vec<(usize, usize)>) -> Result<Self> {
        if names.len() != joints.len() {
            return Err(Error::InvalidSkeleton(format!(
                "{} joint names for {} joint positions",
                names.len(),
                joints.len()
            )));
        }
        if bones.is_empty() {
            return Err(Error::InvalidSkeleton("bone list is empty".into()));
        }
        check_finite("skeleton joints", &joints)?;
        for (k, &(a, b)) in bones.iter().enumerate() {
            if a >= joints.len() || b >= joints.len() {
                return Err(Error::InvalidSkeleton(format!(
                    "bone {k} references joint ({a}, {b}) but only {} joints exist",
                    joints.len()
                )));
            }
            if (joints[a] - joints[b]).norm() <= MIN_BONE_LENGTH {
                return Err(Error::InvalidSkeleton(format!(
                    "bone {k} between joints {a} and {b} has zero length"
                )));
            }
        }
        Ok(Self {
            names,
            joints,
            bones,
        })
    }

    /// Standard 15-joint, 14-bone skeleton with the given joint positions.
    pub fn standard(joints: Vec<Vec3>) -> Result<Self> {
        check_len("standard skeleton joints", STANDARD_JOINTS.len(), joints.len())?;
        Self::new(
            STANDARD_JOINTS.iter().map(|s| s.to_string()).collect(),
            joints,
            STANDARD_BONES.to_vec(),
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    /// Number of body parts (one per bone).
    pub fn num_parts(&self) -> usize {
        self.bones.len()
    }

    pub fn bone_segment(&self, k: usize) -> (Vec3, Vec3) {
        let (a, b) = self.bones[k];
        (self.joints[a], self.joints[b])
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            names: self.names.clone(),
            joints: self.joints.iter().map(|p| t.apply(p)).collect(),
            bones: self.bones.clone(),
        }
    }
}

/// Per-point body-part assignment. Part indices are zero-based, `0..num_parts`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartLabels {
    num_parts: usize,
    hard: Vec<usize>,
    /// Row-major `len × num_parts` probabilities.
    soft: Option<Vec<f64>>,
}

impl PartLabels {
    pub fn from_hard(hard: Vec<usize>, num_parts: usize) -> Result<Self> {
        if num_parts == 0 {
            return Err(Error::InvalidLabels("zero parts".into()));
        }
        if let Some(i) = hard.iter().position(|&l| l >= num_parts) {
            return Err(Error::InvalidLabels(format!(
                "label {} at point {i} is out of range for {num_parts} parts",
                hard[i]
            )));
        }
        Ok(Self {
            num_parts,
            hard,
            soft: None,
        })
    }

    /// Builds labels from a row-major probability table; the hard label is
    /// the arg-max of each row (lowest part on ties).
    pub fn from_soft(soft: Vec<f64>, num_parts: usize) -> Result<Self> {
        if num_parts == 0 || soft.len() % num_parts != 0 {
            return Err(Error::InvalidLabels(format!(
                "soft table of {} entries is not a multiple of {num_parts} parts",
                soft.len()
            )));
        }
        let mut hard = Vec::with_capacity(soft.len() / num_parts);
        for (i, row) in soft.chunks_exact(num_parts).enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidLabels(format!(
                    "soft row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SOFT_ROW_TOL {
                return Err(Error::InvalidLabels(format!("soft row {i} sums to {sum}")));
            }
            hard.push(argmax(row));
        }
        Ok(Self {
            num_parts,
            hard,
            soft: Some(soft),
        })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn hard(&self) -> &[usize] {
        &self.hard
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn has_soft(&self) -> bool {
        self.soft.is_some()
    }

    pub fn soft_row(&self, i: usize) -> Option<&[f64]> {
        self.soft
            .as_ref()
            .map(|s| &s[i * self.num_parts..(i + 1) * self.num_parts])
    }

    /// The soft row if present, otherwise the one-hot encoding of the hard label.
    pub fn distribution(&self, i: usize) -> Vec<f64> {
        match self.soft_row(i) {
            Some(row) => row.to_vec(),
            None => {
                let mut row = vec![0.0; self.num_parts];
                row[self.hard[i]] = 1.0;
                row
            }
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let soft = self.soft.as_ref().map(|_| {
            indices
                .iter()
                .flat_map(|&i| self.soft_row(i).unwrap().iter().copied())
                .collect()
        });
        Self {
            num_parts: self.num_parts,
            hard: indices.iter().map(|&i| self.hard[i]).collect(),
            soft,
        }
    }

    /// Point indices grouped by part: entry `k` lists the points labeled `k`.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_parts];
        for (i, &l) in self.hard.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = c;
        }
    }
    best
}

/// A proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    /// Rejects rotations that are not orthonormal with determinant +1 (within 1e-9).
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!(
                "RᵀR deviates from identity by {ortho:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("determinant is {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), then translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        let rotation = *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix();
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Per-point feature vectors of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    dim: usize,
    data: Vec<f64>,
}

impl Descriptor {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("descriptor dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Invalid(format!(
                "{} descriptor values do not split into rows of {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "descriptor",
                index: i / dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Row-stochastic `n × m` matrix of correspondence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCorrespondence {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SoftCorrespondence {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        check_len("correspondence matrix", rows * cols, data.len())?;
        if cols == 0 {
            return Err(Error::Empty("correspondence row"));
        }
        for (i, row) in data.chunks_exact(cols).enumerate() {
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(Error::Invalid(format!(
                    "correspondence row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SOFT_ROW_TOL {
                return Err(Error::Invalid(format!(
                    "correspondence row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }
}

/// `W(P) = P + F`.
pub fn warp(cloud: &PointCloud, flow: &FlowField) -> Result<PointCloud> {
    check_len("flow field", cloud.len(), flow.len())?;
    let points = cloud
        .points()
        .iter()
        .zip(flow.vectors())
        .map(|(p, f)| p + f)
        .collect();
    let mut out = PointCloud::new(points)?;
    out.timestamps = cloud.timestamps.clone();
    Ok(out)
}

pub fn compose_rigid(transform: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points().iter().map(|p| transform.apply(p)).collect(),
        timestamps: cloud.timestamps.clone(),
    }
}

/// Displacement field that moves each point of `cloud` by `transform`.
pub fn rigid_to_flow(transform: &RigidTransform, cloud: &PointCloud) -> FlowField {
    FlowField {
        vectors: cloud
            .points()
            .iter()
            .map(|p| transform.apply(p) - p)
            .collect(),
    }
}
