//! Pairwise and sequence registration.
//!
//! A pair is registered in three stages:
//! 1. initial flow from descriptor soft correspondence;
//! 2. block-coordinate descent: freeze chamfer assignments and part fits, take
//!    preconditioned gradient steps on the flow, then re-assign and re-fit;
//! 3. optional part-rigid refinement of the final flow.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspond::{
    flow_from_correspondence, handcrafted_descriptor, soft_correspondence, CorrespondenceConfig,
    DescriptorKind,
};
use crate::error::{check_len, Error, Result};
use crate::losses::{FrozenObjective, LossBreakdown, LossWeights, Neighborhoods, SelfSupState};
use crate::rigidfit::{apply_fits, fit_parts, PartFit};
use crate::types::{Descriptor, FlowField, PartLabels, PointCloud, Vec3};

/// Smallest per-step displacement (m) tried before giving up on a descent step.
const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub max_outer_iters: usize,
    pub inner_grad_steps: usize,
    /// Largest displacement (m) of any point in a single gradient step.
    pub step_size: f64,
    /// Relative decrease of the total loss below which the outer loop stops.
    pub convergence_tol: f64,
    pub refine_at_end: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub correspondence: CorrespondenceConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 50,
            inner_grad_steps: 20,
            step_size: 0.01,
            convergence_tol: 1e-6,
            refine_at_end: true,
            seed: 0,
            weights: LossWeights::default(),
            correspondence: CorrespondenceConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.correspondence.validate()?;
        if self.max_outer_iters == 0 || self.inner_grad_steps == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    /// No decrease could be found even with the step shrunk below 1e-8 m.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub flow: FlowField,
    /// Part-rigid flow; equal to `flow` when refinement is disabled.
    pub refined_flow: FlowField,
    pub labels_src: PartLabels,
    pub labels_dst: PartLabels,
    /// Loss after initialization and after every accepted outer iteration.
    pub loss_trace: Vec<LossBreakdown>,
    /// Part fits of the final (unrefined) flow.
    pub fits: Vec<PartFit>,
    pub status: Status,
    pub outer_iterations: usize,
    pub wall_time: Duration,
}

impl RegistrationResult {
    /// The flow a caller should report: refined when refinement ran.
    pub fn output_flow(&self) -> &FlowField {
        &self.refined_flow
    }
}

/// Registers `source` onto `target` with hand-crafted descriptors.
pub fn register_pair(
    source: &PointCloud,
    target: &PointCloud,
    labels_src: &PartLabels,
    labels_dst: &PartLabels,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if cfg.correspondence.descriptor == DescriptorKind::External {
        return Err(Error::Config(
            "external descriptors must be passed to register_pair_with_descriptors".into(),
        ));
    }
    check_labels(source, target, labels_src, labels_dst)?;
    let radius = cfg.correspondence.descriptor_radius;
    let ds = handcrafted_descriptor(source, labels_src, None, radius)?;
    let dt = handcrafted_descriptor(target, labels_dst, None, radius)?;
    register_pair_with_descriptors(source, target, labels_src, labels_dst, &ds, &dt, cfg)
}

fn check_labels(source: &PointCloud, target: &PointCloud, ls: &PartLabels, lt: &PartLabels) -> Result<()> {
    check_len("source labels", source.len(), ls.len())?;
    check_len("target labels", target.len(), lt.len())?;
    if ls.num_parts() != lt.num_parts() {
        return Err(Error::InvalidLabels(format!(
            "source labels have {} parts, target labels {}",
            ls.num_parts(),
            lt.num_parts()
        )));
    }
    Ok(())
}

pub fn register_pair_with_descriptors(
    source: &PointCloud,
    target: &PointCloud,
    labels_src: &PartLabels,
    labels_dst: &PartLabels,
    desc_src: &Descriptor,
    desc_dst: &Descriptor,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let started = Instant::now();
    cfg.validate()?;
    check_labels(source, target, labels_src, labels_dst)?;
    check_len("source descriptors", source.len(), desc_src.len())?;
    check_len("target descriptors", target.len(), desc_dst.len())?;

    let c = soft_correspondence(desc_src, desc_dst, &cfg.correspondence)?;
    let initial = flow_from_correspondence(&c, source, target)?;
    let (flow, trace, status, outer) = optimize_flow(source, target, labels_src, initial, cfg)?;

    let fits = fit_parts(source, &flow, labels_src)?;
    let refined_flow = if cfg.refine_at_end {
        apply_fits(source, labels_src, &fits)?
    } else {
        flow.clone()
    };
    Ok(RegistrationResult {
        flow,
        refined_flow,
        labels_src: labels_src.clone(),
        labels_dst: labels_dst.clone(),
        loss_trace: trace,
        fits,
        status,
        outer_iterations: outer,
        wall_time: started.elapsed(),
    })
}

struct Snapshot<'a> {
    flow: Vec<Vec3>,
    objective: FrozenObjective<'a>,
    loss: LossBreakdown,
}

fn snapshot<'a>(
    source: &'a PointCloud,
    target: &'a PointCloud,
    labels: &'a PartLabels,
    neighbors: &'a Neighborhoods,
    flow: Vec<Vec3>,
    weights: &LossWeights,
) -> Result<Snapshot<'a>> {
    let field = FlowField::new(flow, source.len())?;
    let fits = fit_parts(source, &field, labels)?;
    let state = SelfSupState {
        source,
        target,
        flow: &field,
        labels,
        fits: &fits,
    };
    let objective = FrozenObjective::new(&state, neighbors, weights)?;
    let flow = field.vectors().to_vec();
    let loss = objective.breakdown(&flow);
    Ok(Snapshot {
        flow,
        objective,
        loss,
    })
}

/// Block-coordinate descent on the self-supervised objective. Returns the
/// final flow, the loss trace, the stop status and the outer iteration count.
fn optimize_flow(
    source: &PointCloud,
    target: &PointCloud,
    labels: &PartLabels,
    initial: FlowField,
    cfg: &RegistrationConfig,
) -> Result<(FlowField, Vec<LossBreakdown>, Status, usize)> {
    let neighbors = Neighborhoods::build(source, cfg.weights.neighbor_k)?;
    let mut current = snapshot(source, target, labels, &neighbors, initial.vectors().to_vec(), &cfg.weights)?;
    let mut trace = vec![current.loss];
    let mut status = Status::MaxIterations;
    let mut step = cfg.step_size;
    let mut outer = 0;

    while outer < cfg.max_outer_iters {
        outer += 1;
        let Some(candidate) = descend(&current.objective, &current.flow, step, cfg.inner_grad_steps) else {
            status = if gradient_vanishes(&current.objective, &current.flow) {
                Status::Converged
            } else {
                Status::Stalled
            };
            break;
        };
        let next = snapshot(source, target, labels, &neighbors, candidate, &cfg.weights)?;
        if next.loss.total > current.loss.total {
            // re-fitting a degenerate part can undo the frozen decrease
            step *= 0.5;
            if step < MIN_STEP {
                status = Status::Stalled;
                break;
            }
            continue;
        }
        let decrease = current.loss.total - next.loss.total;
        let relative = decrease / current.loss.total.max(f64::MIN_POSITIVE);
        current = next;
        trace.push(current.loss);
        if relative < cfg.convergence_tol {
            status = Status::Converged;
            break;
        }
    }
    let flow = FlowField::new(current.flow, source.len())?;
    Ok((flow, trace, status, outer))
}

fn gradient_vanishes(objective: &FrozenObjective, flow: &[Vec3]) -> bool {
    objective.gradient(flow).iter().all(|g| g.norm() <= 1e-15)
}

/// Up to `steps` Jacobi-preconditioned gradient steps on the frozen objective.
/// Each step moves no point further than `step_size`; a step that does not
/// decrease the objective is halved until it does or falls below 1e-8 m.
/// Returns `None` when not a single step decreased the objective.
fn descend(objective: &FrozenObjective, start: &[Vec3], step_size: f64, steps: usize) -> Option<Vec<Vec3>> {
    let diag = objective.hessian_diagonal();
    let mut flow = start.to_vec();
    let mut value = objective.value(&flow);
    let mut step = step_size;
    let mut moved = false;
    for _ in 0..steps {
        let grad = objective.gradient(&flow);
        let dir: Vec<Vec3> = grad
            .iter()
            .zip(&diag)
            .map(|(g, &h)| if h > 0.0 { g / h } else { Vec3::zeros() })
            .collect();
        let longest = dir.iter().map(|d| d.norm()).fold(0.0, f64::max);
        if longest == 0.0 {
            break;
        }
        let mut scale = (step / longest).min(1.0);
        loop {
            let cand: Vec<Vec3> = flow.iter().zip(&dir).map(|(f, d)| f - d * scale).collect();
            let v = objective.value(&cand);
            if v < value {
                flow = cand;
                value = v;
                moved = true;
                break;
            }
            scale *= 0.5;
            step = step.min(scale * longest);
            if scale * longest < MIN_STEP {
                return moved.then_some(flow);
            }
        }
    }
    moved.then_some(flow)
}

/// Outcome of registering one frame of a sequence onto the reference frame.
#[derive(Debug)]
pub struct SequencePair {
    pub frame: usize,
    pub result: Result<RegistrationResult>,
}

/// Registers every non-reference frame onto `frames[reference]`, pair by pair.
/// A failing pair is reported in its slot and does not stop the others.
pub fn register_sequence(
    frames: &[PointCloud],
    labels: &[PartLabels],
    reference: usize,
    cfg: &RegistrationConfig,
) -> Result<Vec<SequencePair>> {
    if frames.len() < 2 {
        return Err(Error::Invalid(format!("a sequence needs at least 2 frames, got {}", frames.len())));
    }
    check_len("sequence labels", frames.len(), labels.len())?;
    if reference >= frames.len() {
        return Err(Error::Invalid(format!(
            "reference frame {reference} out of range for {} frames",
            frames.len()
        )));
    }
    Ok((0..frames.len())
        .filter(|&f| f != reference)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|frame| SequencePair {
            frame,
            result: register_pair(&frames[frame], &frames[reference], &labels[frame], &labels[reference], cfg),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{rigid_to_flow, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, n: usize) -> (PointCloud, PartLabels) {
        // four elongated parts laid out along z
        let mut pts = Vec::new();
        let mut hard = Vec::new();
        for i in 0..n {
            let part = i % 4;
            let base = Vec3::new(0.0, 0.0, 0.3 * part as f64);
            pts.push(base + Vec3::new(rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.25));
            hard.push(part);
        }
        (PointCloud::new(pts).unwrap(), PartLabels::from_hard(hard, 4).unwrap())
    }

    #[test]
    fn identical_clouds_give_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, l) = blob(&mut rng, 120);
        let r = register_pair(&p, &p, &l, &l, &RegistrationConfig::default()).unwrap();
        assert!(r.refined_flow.mean_norm() < 1e-3, "{}", r.refined_flow.mean_norm());
    }

    #[test]
    fn rigidly_moved_cloud_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, l) = blob(&mut rng, 200);
        let t = RigidTransform::from_axis_angle(Vec3::z(), 0.15, Vec3::new(0.05, -0.03, 0.02));
        let q = crate::types::compose_rigid(&t, &p);
        let r = register_pair(&p, &q, &l, &l, &RegistrationConfig::default()).unwrap();
        let gt = rigid_to_flow(&t, &p);
        let err: f64 = r
            .refined_flow
            .vectors()
            .iter()
            .zip(gt.vectors())
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / p.len() as f64;
        assert!(err < 5e-3, "mean error {err}");
    }

    #[test]
    fn loss_trace_is_monotone_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, l) = blob(&mut rng, 150);
        let (q, lq) = blob(&mut rng, 140);
        let cfg = RegistrationConfig::default();
        let a = register_pair(&p, &q, &l, &lq, &cfg).unwrap();
        for w in a.loss_trace.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
        let b = register_pair(&p, &q, &l, &lq, &cfg).unwrap();
        assert_eq!(a.refined_flow, b.refined_flow);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RegistrationConfig::default();
        cfg.step_size = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RegistrationConfig::default();
        cfg.weights.beta_smooth = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequence_of_identical_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, l) = blob(&mut rng, 80);
        let frames = vec![p.clone(), p.clone(), p.clone(), p];
        let labels = vec![l.clone(), l.clone(), l.clone(), l];
        let out = register_sequence(&frames, &labels, 3, &RegistrationConfig::default()).unwrap();
        assert_eq!(out.iter().map(|o| o.frame).collect::<Vec<_>>(), vec![0, 1, 2]);
        for o in out {
            assert!(o.result.unwrap().refined_flow.mean_norm() < 1e-3);
        }
        assert!(register_sequence(&frames_one(), &[labels_one()], 0, &RegistrationConfig::default()).is_err());
    }

    fn frames_one() -> Vec<PointCloud> {
        vec![PointCloud::new(vec![Vec3::zeros()]).unwrap()]
    }

    fn labels_one() -> PartLabels {
        PartLabels::from_hard(vec![0], 1).unwrap()
    }

    #[test]
    fn failing_pair_does_not_abort_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, l) = blob(&mut rng, 60);
        let tiny = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]).unwrap();
        let tiny_l = PartLabels::from_hard(vec![0, 1], 4).unwrap();
        let out = register_sequence(&[tiny, p.clone(), p], &[tiny_l, l.clone(), l], 2, &RegistrationConfig::default()).unwrap();
        assert!(out[0].result.is_err());
        assert!(out[1].result.is_ok());
    }
}
