//! Descriptors and soft-correspondence flow estimation.
//!
//! Each source point is matched to every target point with weight
//! `softmax_j(-‖D_i − D_j‖ / t)`. The flow is the displacement from the source
//! point to the resulting convex combination of target points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::spatial::NeighborIndex;
use crate::types::{centroid, Descriptor, FlowField, PartLabels, PointCloud, Skeleton, SoftCorrespondence, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    /// Geometric descriptor computed from the cloud and its part labels.
    #[default]
    Handcrafted,
    /// Precomputed descriptors loaded from a file next to each frame.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceConfig {
    pub temperature: f64,
    pub temperature_floor: f64,
    pub descriptor: DescriptorKind,
    /// Neighborhood radius (m) of the local covariance block.
    pub descriptor_radius: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            temperature_floor: 0.02,
            descriptor: DescriptorKind::Handcrafted,
            descriptor_radius: 0.1,
        }
    }
}

impl CorrespondenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_floor > 0.0) || !self.temperature_floor.is_finite() {
            return Err(Error::Config("temperature_floor must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.descriptor_radius > 0.0) {
            return Err(Error::Config("descriptor_radius must be positive".into()));
        }
        Ok(())
    }

    /// The temperature actually used: never below the floor.
    pub fn effective_temperature(&self) -> f64 {
        self.temperature.max(self.temperature_floor)
    }
}

pub trait DescriptorProvider {
    fn describe(
        &self,
        cloud: &PointCloud,
        labels: &PartLabels,
        skeleton: Option<&Skeleton>,
    ) -> Result<Descriptor>;
}

#[derive(Debug, Clone, Copy)]
pub struct HandcraftedDescriptor {
    pub radius: f64,
}

impl DescriptorProvider for HandcraftedDescriptor {
    fn describe(
        &self,
        cloud: &PointCloud,
        labels: &PartLabels,
        skeleton: Option<&Skeleton>,
    ) -> Result<Descriptor> {
        handcrafted_descriptor(cloud, labels, skeleton, self.radius)
    }
}

/// Descriptors computed elsewhere (for example by a learned backbone).
#[derive(Debug, Clone)]
pub struct PrecomputedDescriptor(pub Descriptor);

impl DescriptorProvider for PrecomputedDescriptor {
    fn describe(&self, cloud: &PointCloud, _: &PartLabels, _: Option<&Skeleton>) -> Result<Descriptor> {
        check_len("precomputed descriptors", cloud.len(), self.0.len())?;
        Ok(self.0.clone())
    }
}

/// Per-point feature of dimension `7 + K`:
/// `[height above centroid | offset from part centroid (3) | local covariance
/// eigenvalues, descending (3) | one-hot part (K)]`.
pub fn handcrafted_descriptor(
    cloud: &PointCloud,
    labels: &PartLabels,
    skeleton: Option<&Skeleton>,
    radius: f64,
) -> Result<Descriptor> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("descriptor radius must be positive, got {radius}")));
    }
    check_len("labels", cloud.len(), labels.len())?;
    let parts = labels.num_parts();
    if let Some(s) = skeleton {
        if s.num_parts() != parts {
            return Err(Error::InvalidLabels(format!(
                "labels have {parts} parts but the skeleton has {}",
                s.num_parts()
            )));
        }
    }
    let points = cloud.points();
    let center = cloud.centroid();
    let part_centers: Vec<Vec3> = labels
        .members()
        .iter()
        .map(|m| centroid(&m.iter().map(|&i| points[i]).collect::<Vec<_>>()))
        .collect();
    let index = NeighborIndex::build(points);
    let dim = 7 + parts;

    let rows: Vec<Vec<f64>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut row = vec![0.0; dim];
            row[0] = p.z - center.z;
            let offset = p - part_centers[labels.hard()[i]];
            row[1..4].copy_from_slice(offset.as_slice());
            let neighbors = index.within_radius(p, radius);
            if neighbors.len() > 1 {
                let eig = covariance_eigenvalues(neighbors.iter().map(|n| &points[n.index]));
                row[4..7].copy_from_slice(&eig);
            } else {
                log::trace!("point {i} has no neighbors within {radius} m");
            }
            row[7 + labels.hard()[i]] = 1.0;
            row
        })
        .collect();
    Descriptor::new(rows.concat(), dim)
}

fn covariance_eigenvalues<'a>(points: impl Iterator<Item = &'a Vec3> + Clone) -> [f64; 3] {
    let n = points.clone().count() as f64;
    let mean = points.clone().sum::<Vec3>() / n;
    let cov = points.fold(nalgebra::Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / n;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [ev[0], ev[1], ev[2]]
}

/// Row-wise softmax of `-‖Dp_i − Dq_j‖ / t` with `t` clamped to the floor.
pub fn soft_correspondence(
    source: &Descriptor,
    target: &Descriptor,
    cfg: &CorrespondenceConfig,
) -> Result<SoftCorrespondence> {
    if source.dim() != target.dim() {
        return Err(Error::LengthMismatch {
            what: "descriptor dimension",
            expected: source.dim(),
            found: target.dim(),
        });
    }
    if target.is_empty() || source.is_empty() {
        return Err(Error::Empty("descriptor set"));
    }
    let t = cfg.effective_temperature();
    let (n, m) = (source.len(), target.len());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let di = source.row(i);
            let logits: Vec<f64> = (0..m)
                .map(|j| {
                    let d2: f64 = di
                        .iter()
                        .zip(target.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    -d2.sqrt() / t
                })
                .collect();
            softmax(&logits)
        })
        .collect();
    SoftCorrespondence::new(rows.concat(), n, m)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `F = C·Q − P`.
pub fn flow_from_correspondence(
    c: &SoftCorrespondence,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<FlowField> {
    check_len("correspondence rows", source.len(), c.rows())?;
    check_len("correspondence columns", target.len(), c.cols())?;
    let q = target.points();
    let vectors = source
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let warped = c
                .row(i)
                .iter()
                .zip(q)
                .fold(Vec3::zeros(), |acc, (w, qj)| acc + qj * *w);
            warped - p
        })
        .collect();
    FlowField::new(vectors, source.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(rows: &[&[f64]]) -> Descriptor {
        Descriptor::new(rows.concat(), rows[0].len()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()).unwrap()
    }

    fn random_c(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SoftCorrespondence {
        let mut data = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        SoftCorrespondence::new(data, n, m).unwrap()
    }

    #[test]
    fn single_point_descriptor_is_degenerate() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        let labels = PartLabels::from_hard(vec![1], 3).unwrap();
        let d = handcrafted_descriptor(&cloud, &labels, None, 0.1).unwrap();
        assert_eq!(d.dim(), 10);
        assert_eq!(d.row(0), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn descriptor_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 200);
        let labels = PartLabels::from_hard((0..200).map(|i| i % 5).collect(), 5).unwrap();
        let shift = Vec3::new(3.5, -12.0, 0.75);
        let moved = PointCloud::new(cloud.points().iter().map(|p| p + shift).collect()).unwrap();
        let a = handcrafted_descriptor(&cloud, &labels, None, 0.2).unwrap();
        let b = handcrafted_descriptor(&moved, &labels, None, 0.2).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn descriptor_rejects_bad_radius_and_skeleton_mismatch() {
        let cloud = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let labels = PartLabels::from_hard(vec![0], 2).unwrap();
        assert!(handcrafted_descriptor(&cloud, &labels, None, 0.0).is_err());
        let s = Skeleton::new(vec!["a".into(), "b".into()], vec![Vec3::zeros(), Vec3::x()], vec![(0, 1)]).unwrap();
        assert!(handcrafted_descriptor(&cloud, &labels, Some(&s), 0.1).is_err());
    }

    #[test]
    fn identical_row_dominates_at_floor_temperature() {
        let p = desc(&[&[0.0, 0.0]]);
        let q = desc(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]]);
        let cfg = CorrespondenceConfig {
            temperature: 0.001,
            ..Default::default()
        };
        let c = soft_correspondence(&p, &q, &cfg).unwrap();
        // oracle: softmax of (-1/0.02, 0, -1/0.02)
        let e = (-50.0f64).exp();
        let expected = 1.0 / (1.0 + 2.0 * e);
        assert!((c.row(0)[1] - expected).abs() < 1e-15);
        assert!(c.row(0)[1] > 0.99);
    }

    #[test]
    fn identical_targets_give_uniform_rows() {
        let p = desc(&[&[0.3, 1.0], &[2.0, -1.0]]);
        let q = desc(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let c = soft_correspondence(&p, &q, &CorrespondenceConfig::default()).unwrap();
        for i in 0..2 {
            for &w in c.row(i) {
                assert!((w - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_column_softmax_value() {
        let p = desc(&[&[0.0]]);
        let q = desc(&[&[0.1], &[0.2]]);
        let c = soft_correspondence(&p, &q, &CorrespondenceConfig::default()).unwrap();
        // softmax(-1, -2) = (0.7311, 0.2689)
        assert!((c.row(0)[0] - 0.7311).abs() < 1e-4);
        assert!((c.row(0)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn soft_correspondence_dimension_mismatch() {
        let p = desc(&[&[0.0]]);
        let q = desc(&[&[0.1, 0.0]]);
        assert!(soft_correspondence(&p, &q, &CorrespondenceConfig::default()).is_err());
    }

    #[test]
    fn soft_correspondence_is_monotone_in_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..40 * 6).map(|_| rng.random()).collect();
        let p = Descriptor::new(data[..60].to_vec(), 6).unwrap();
        let q = Descriptor::new(data[60..].to_vec(), 6).unwrap();
        let c = soft_correspondence(&p, &q, &CorrespondenceConfig::default()).unwrap();
        let dist = |i: usize, j: usize| -> f64 {
            p.row(i).iter().zip(q.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        for i in 0..p.len() {
            assert!((c.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for j in 0..q.len() {
                for k in 0..q.len() {
                    if dist(i, j) < dist(i, k) {
                        assert!(c.row(i)[j] > c.row(i)[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_correspondence_gives_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cloud(&mut rng, 6);
        let mut eye = vec![0.0; 36];
        for i in 0..6 {
            eye[i * 6 + i] = 1.0;
        }
        let c = SoftCorrespondence::new(eye, 6, 6).unwrap();
        let f = flow_from_correspondence(&c, &p, &p).unwrap();
        assert!(f.vectors().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn half_half_correspondence() {
        let p = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let q = PointCloud::new(vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)]).unwrap();
        let c = SoftCorrespondence::new(vec![0.5, 0.5], 1, 2).unwrap();
        let f = flow_from_correspondence(&c, &p, &q).unwrap();
        assert_eq!(f.vectors()[0], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn flow_matches_explicit_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(1..=16);
            let m = rng.random_range(1..=16);
            let (p, q, c) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m), random_c(&mut rng, n, m));
            let f = flow_from_correspondence(&c, &p, &q).unwrap();
            let cm = nalgebra::DMatrix::from_fn(n, m, |i, j| c.row(i)[j]);
            let qm = nalgebra::DMatrix::from_fn(m, 3, |j, a| q.points()[j][a]);
            let pm = nalgebra::DMatrix::from_fn(n, 3, |i, a| p.points()[i][a]);
            let oracle = cm * qm - pm;
            for i in 0..n {
                for a in 0..3 {
                    assert!((f.vectors()[i][a] - oracle[(i, a)]).abs() < 1e-12);
                }
            }
            // warped points stay inside Q's bounding box
            let lo = q.points().iter().fold(Vec3::repeat(f64::INFINITY), |a, b| a.inf(b));
            let hi = q.points().iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, b| a.sup(b));
            for (pi, fi) in p.points().iter().zip(f.vectors()) {
                let w = pi + fi;
                for a in 0..3 {
                    assert!(w[a] >= lo[a] - 1e-12 && w[a] <= hi[a] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn flow_invariant_to_target_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, m) = (7, 9);
        let (p, q, c) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m), random_c(&mut rng, n, m));
        let perm: Vec<usize> = (0..m).rev().collect();
        let q2 = q.select(&perm).unwrap();
        let data: Vec<f64> = (0..n).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| c.row(i)[j]).collect();
        let c2 = SoftCorrespondence::new(data, n, m).unwrap();
        let f1 = flow_from_correspondence(&c, &p, &q).unwrap();
        let f2 = flow_from_correspondence(&c2, &p, &q2).unwrap();
        for (a, b) in f1.vectors().iter().zip(f2.vectors()) {
            assert!((a - b).amax() < 1e-12);
        }
    }
}
