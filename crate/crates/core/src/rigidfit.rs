//! Per-part rigid fitting and part-rigid flow refinement.

use serde::Serialize;

use crate::error::{check_len, Result};
use crate::types::{centroid, FlowField, Mat3, PartLabels, PointCloud, RigidTransform, Vec3};

/// Relative singular-value threshold below which the cross-covariance is
/// treated as rank < 2 (collinear or coincident points).
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Fewer than three correspondences.
    TooFewPoints,
    /// Cross-covariance rank below two.
    RankDeficient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschFit {
    pub transform: RigidTransform,
    /// Set when only a translation could be estimated.
    pub fallback: Option<Fallback>,
}

/// Least-squares proper rigid transform mapping `src[i]` onto `dst[i]`.
///
/// Falls back to the centroid translation when there are fewer than three
/// pairs or the cross-covariance has rank below two.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<KabschFit> {
    check_len("kabsch target", src.len(), dst.len())?;
    if src.is_empty() {
        return Err(crate::error::Error::Empty("kabsch input"));
    }
    let (cs, cd) = (centroid(src), centroid(dst));
    let translation_only = |reason| KabschFit {
        transform: RigidTransform::from_translation(cd - cs),
        fallback: Some(reason),
    };
    if src.len() < 3 {
        return Ok(translation_only(Fallback::TooFewPoints));
    }
    let h = src
        .iter()
        .zip(dst)
        .fold(Mat3::zeros(), |acc, (s, d)| acc + (s - cs) * (d - cd).transpose());
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let (largest, second) = (sv[0], sv[1]);
    if !(largest > f64::MIN_POSITIVE) || second <= RANK_TOL * largest {
        return Ok(translation_only(Fallback::RankDeficient));
    }
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let translation = cd - rotation * cs;
    Ok(KabschFit {
        transform: RigidTransform::new(rotation, translation)?,
        fallback: None,
    })
}

/// RMS distance between `transform(src[i])` and `dst[i]`.
pub fn rms_residual(transform: &RigidTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (transform.apply(s) - d).norm_squared())
        .sum();
    (sum / src.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartFit {
    pub part: usize,
    pub transform: RigidTransform,
    pub count: usize,
    /// RMS fitting error in meters.
    pub residual: f64,
    pub fallback: Option<Fallback>,
}

/// Fits one rigid transform per occupied part to the motion `p ↦ p + f`.
pub fn fit_parts(cloud: &PointCloud, flow: &FlowField, labels: &PartLabels) -> Result<Vec<PartFit>> {
    check_len("flow field", cloud.len(), flow.len())?;
    check_len("labels", cloud.len(), labels.len())?;
    let points = cloud.points();
    let vectors = flow.vectors();
    let mut fits = Vec::new();
    for (part, members) in labels.members().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let src: Vec<Vec3> = members.iter().map(|&i| points[i]).collect();
        let dst: Vec<Vec3> = members.iter().map(|&i| points[i] + vectors[i]).collect();
        let fit = kabsch(&src, &dst)?;
        fits.push(PartFit {
            part,
            transform: fit.transform,
            count: members.len(),
            residual: rms_residual(&fit.transform, &src, &dst),
            fallback: fit.fallback,
        });
    }
    Ok(fits)
}

/// Replaces each part's flow with the displacement of its fitted rigid transform.
pub fn refine_flow(cloud: &PointCloud, flow: &FlowField, labels: &PartLabels) -> Result<FlowField> {
    let fits = fit_parts(cloud, flow, labels)?;
    apply_fits(cloud, labels, &fits)
}

/// Flow `R_k·p + t_k − p` for every point, using the fit of its part.
pub fn apply_fits(cloud: &PointCloud, labels: &PartLabels, fits: &[PartFit]) -> Result<FlowField> {
    check_len("labels", cloud.len(), labels.len())?;
    let table = fit_table(fits, labels.num_parts());
    let vectors = cloud
        .points()
        .iter()
        .zip(labels.hard())
        .map(|(p, &l)| {
            table[l]
                .map(|t| t.apply(p) - p)
                .ok_or(crate::error::Error::MissingTransform { part: l })
        })
        .collect::<Result<Vec<_>>>()?;
    FlowField::new(vectors, cloud.len())
}

/// Dense lookup `part -> transform` from a sparse fit list.
pub fn fit_table(fits: &[PartFit], num_parts: usize) -> Vec<Option<RigidTransform>> {
    let mut table = vec![None; num_parts];
    for f in fits {
        if f.part < num_parts {
            table[f.part] = Some(f.transform);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5))
            .collect()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5);
        let t = (Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5)) * 6.0;
        RigidTransform::from_axis_angle(axis, rng.random_range(-3.1..3.1), t)
    }

    #[test]
    fn identity_when_dst_equals_src() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10);
        let fit = kabsch(&pts, &pts).unwrap();
        assert!(fit.fallback.is_none());
        assert!((fit.transform.rotation() - Mat3::identity()).amax() < 1e-12);
        assert!(fit.transform.translation().amax() < 1e-12);
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let src = random_points(&mut rng, 10);
            let t = random_transform(&mut rng);
            let dst: Vec<Vec3> = src.iter().map(|p| t.apply(p)).collect();
            let fit = kabsch(&src, &dst).unwrap().transform;
            assert!(rms_residual(&fit, &src, &dst) <= 1e-9);
            assert!((fit.rotation() - t.rotation()).amax() < 1e-9);
            assert!((fit.translation() - t.translation()).amax() < 1e-9);
        }
    }

    #[test]
    fn fallbacks() {
        let two = [Vec3::zeros(), Vec3::x()];
        let moved = [Vec3::new(1.0, 1.0, 0.0), Vec3::new(2.0, 1.0, 0.0)];
        let fit = kabsch(&two, &moved).unwrap();
        assert_eq!(fit.fallback, Some(Fallback::TooFewPoints));
        assert_eq!(*fit.transform.translation(), Vec3::new(1.0, 1.0, 0.0));

        let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        let rotated: Vec<Vec3> = (0..5).map(|i| Vec3::y() * i as f64).collect();
        let fit = kabsch(&line, &rotated).unwrap();
        assert_eq!(fit.fallback, Some(Fallback::RankDeficient));
        assert_eq!(*fit.transform.rotation(), Mat3::identity());
    }

    #[test]
    fn reflection_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_points(&mut rng, 8);
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let fit = kabsch(&src, &dst).unwrap().transform;
        assert!((fit.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn residual_not_beaten_by_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.05).unwrap();
        for _ in 0..10 {
            let src = random_points(&mut rng, 12);
            let t = random_transform(&mut rng);
            let dst: Vec<Vec3> = src
                .iter()
                .map(|p| t.apply(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let best = rms_residual(&kabsch(&src, &dst).unwrap().transform, &src, &dst);
            for _ in 0..100 {
                let mut cand = random_transform(&mut rng);
                if rng.random_bool(0.5) {
                    // perturb around the truth as well as sampling far away
                    cand = RigidTransform::from_axis_angle(
                        Vec3::new(rng.random(), rng.random(), rng.random()),
                        rng.random_range(-0.05..0.05),
                        Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
                    )
                    .compose(&t);
                }
                assert!(best <= rms_residual(&cand, &src, &dst) + 1e-12);
            }
        }
    }

    #[test]
    fn equivariant_under_joint_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.02).unwrap();
        for _ in 0..20 {
            let src = random_points(&mut rng, 9);
            let t = random_transform(&mut rng);
            let dst: Vec<Vec3> = src
                .iter()
                .map(|p| t.apply(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let g = RigidTransform::from_axis_angle(
                Vec3::new(rng.random(), rng.random(), rng.random()),
                rng.random_range(-3.0..3.0),
                Vec3::zeros(),
            );
            let a = kabsch(&src, &dst).unwrap().transform;
            let gs: Vec<Vec3> = src.iter().map(|p| g.apply(p)).collect();
            let gd: Vec<Vec3> = dst.iter().map(|p| g.apply(p)).collect();
            let b = kabsch(&gs, &gd).unwrap().transform;
            let conj = g.rotation() * a.rotation() * g.rotation().transpose();
            assert!((b.rotation() - conj).amax() < 1e-9);
            assert!((b.translation() - g.rotation() * a.translation()).amax() < 1e-9);
        }
    }

    fn two_part_instance(rng: &mut ChaCha8Rng) -> (PointCloud, PartLabels, [RigidTransform; 2]) {
        let pts = random_points(rng, 40);
        let labels = PartLabels::from_hard((0..40).map(|i| i % 2).collect(), 2).unwrap();
        (PointCloud::new(pts).unwrap(), labels, [random_transform(rng), random_transform(rng)])
    }

    #[test]
    fn fit_parts_recovers_per_part_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cloud, labels, ts) = two_part_instance(&mut rng);
        let flow = FlowField::new(
            cloud
                .points()
                .iter()
                .zip(labels.hard())
                .map(|(p, &l)| ts[l].apply(p) - p)
                .collect(),
            cloud.len(),
        )
        .unwrap();
        let fits = fit_parts(&cloud, &flow, &labels).unwrap();
        assert_eq!(fits.len(), 2);
        for f in &fits {
            assert_eq!(f.count, 20);
            assert!((f.transform.rotation() - ts[f.part].rotation()).amax() < 1e-9);
            assert!((f.transform.translation() - ts[f.part].translation()).amax() < 1e-9);
        }
        let zero = fit_parts(&cloud, &FlowField::zeros(40), &labels).unwrap();
        for f in zero {
            assert!((f.transform.rotation() - Mat3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn refine_is_identity_on_rigid_flow_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cloud, labels, ts) = two_part_instance(&mut rng);
        let rigid = FlowField::new(
            cloud
                .points()
                .iter()
                .zip(labels.hard())
                .map(|(p, &l)| ts[l].apply(p) - p)
                .collect(),
            40,
        )
        .unwrap();
        let refined = refine_flow(&cloud, &rigid, &labels).unwrap();
        for (a, b) in refined.vectors().iter().zip(rigid.vectors()) {
            assert!((a - b).amax() < 1e-9);
        }
        let noise = Normal::new(0.0, 0.3).unwrap();
        let noisy = FlowField::new(
            rigid
                .vectors()
                .iter()
                .map(|v| v + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect(),
            40,
        )
        .unwrap();
        let once = refine_flow(&cloud, &noisy, &labels).unwrap();
        let twice = refine_flow(&cloud, &once, &labels).unwrap();
        for (a, b) in once.vectors().iter().zip(twice.vectors()) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn apply_fits_requires_every_occupied_part() {
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]).unwrap();
        let labels = PartLabels::from_hard(vec![0, 1], 2).unwrap();
        let fits = [PartFit {
            part: 0,
            transform: RigidTransform::identity(),
            count: 1,
            residual: 0.0,
            fallback: None,
        }];
        assert!(matches!(
            apply_fits(&cloud, &labels, &fits),
            Err(crate::error::Error::MissingTransform { part: 1 })
        ));
    }
}
