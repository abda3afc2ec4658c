//! Body-part labeling: nearest-bone assignment from a skeleton and k-NN label
//! transfer for frames that have no skeleton.

use crate::error::{Error, Result};
use crate::spatial::NeighborIndex;
use crate::types::{PartLabels, PointCloud, Skeleton, Vec3};

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> Result<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 1e-18 {
        return Err(Error::Invalid("degenerate segment: endpoints coincide".into()));
    }
    Ok(segment_distance_unchecked(p, a, &ab, len2))
}

#[inline]
fn segment_distance_unchecked(p: &Vec3, a: &Vec3, ab: &Vec3, len2: f64) -> f64 {
    let s = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * s)).norm()
}

/// Index of the bone nearest to `p` (lowest index on ties) and its distance.
pub fn nearest_bone(p: &Vec3, skeleton: &Skeleton) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..skeleton.num_parts() {
        let (a, b) = skeleton.bone_segment(k);
        let ab = b - a;
        let d = segment_distance_unchecked(p, &a, &ab, ab.norm_squared());
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Labels every point with its nearest bone segment.
pub fn assign_labels(cloud: &PointCloud, skeleton: &Skeleton) -> PartLabels {
    assign_labels_to_points(cloud.points(), skeleton)
}

pub fn assign_labels_to_points(points: &[Vec3], skeleton: &Skeleton) -> PartLabels {
    let hard = points.iter().map(|p| nearest_bone(p, skeleton).0).collect();
    PartLabels::from_hard(hard, skeleton.num_parts())
        .expect("nearest bone index is always in range")
}

/// Majority vote over the `k` nearest labeled source points. Soft labels are
/// the vote fractions; vote ties go to the lowest part index.
pub fn transfer_labels(
    src: &PointCloud,
    src_labels: &PartLabels,
    dst: &PointCloud,
    k: usize,
) -> Result<PartLabels> {
    if src.is_empty() || src_labels.is_empty() {
        return Err(Error::Empty("label transfer source"));
    }
    crate::error::check_len("source labels", src.len(), src_labels.len())?;
    let index = NeighborIndex::build(src.points());
    let parts = src_labels.num_parts();
    let mut soft = Vec::with_capacity(dst.len() * parts);
    for q in dst.points() {
        let neighbors = index.knn(q, k)?;
        let mut votes = vec![0.0; parts];
        for n in &neighbors {
            votes[src_labels.hard()[n.index]] += 1.0;
        }
        let total = neighbors.len() as f64;
        soft.extend(votes.iter().map(|v| v / total));
    }
    PartLabels::from_soft(soft, parts)
}
