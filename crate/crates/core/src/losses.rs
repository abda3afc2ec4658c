//! Supervised and self-supervised registration losses, plus the analytic
//! flow gradient of the self-supervised objective.
//!
//! The gradient is taken with nearest-neighbor assignments and per-part rigid
//! fits held fixed. Under that freeze every self-supervised term is a
//! quadratic in the flow, which [`FrozenObjective`] evaluates exactly.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rigidfit::{fit_table, PartFit};
use crate::spatial::{dist2, NeighborIndex};
use crate::types::{FlowField, PartLabels, PointCloud, RigidTransform, Vec3};

/// Lower clamp on probabilities inside every cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_seg: f64,
    pub alpha_flow: f64,
    pub beta_chamfer: f64,
    pub beta_smooth: f64,
    pub beta_cluster: f64,
    pub beta_rigid: f64,
    pub neighbor_k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_seg: 0.1,
            alpha_flow: 0.9,
            beta_chamfer: 1.0,
            beta_smooth: 1.0,
            beta_cluster: 0.1,
            beta_rigid: 10.0,
            neighbor_k: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha_seg", self.alpha_seg),
            ("alpha_flow", self.alpha_flow),
            ("beta_chamfer", self.beta_chamfer),
            ("beta_smooth", self.beta_smooth),
            ("beta_cluster", self.beta_cluster),
            ("beta_rigid", self.beta_rigid),
        ];
        for (name, w) in named {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("weight {name} = {w} must be a nonnegative number")));
            }
        }
        if self.neighbor_k == 0 {
            return Err(Error::Config("neighbor_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLoss {
    pub value: f64,
    /// Points whose ground-truth probability was below the clamp.
    pub clamped: usize,
}

/// Mean cross-entropy of predicted part distributions against hard labels.
pub fn seg_loss(pred: &PartLabels, gt: &PartLabels) -> Result<SegLoss> {
    check_len("ground-truth labels", pred.len(), gt.len())?;
    if pred.num_parts() != gt.num_parts() {
        return Err(Error::InvalidLabels(format!(
            "prediction has {} parts, ground truth {}",
            pred.num_parts(),
            gt.num_parts()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut clamped = 0;
    let mut sum = 0.0;
    for (i, &l) in gt.hard().iter().enumerate() {
        let p = pred.distribution(i)[l];
        if p < PROB_CLAMP {
            clamped += 1;
        }
        sum -= p.max(PROB_CLAMP).ln();
    }
    if clamped > 0 {
        log::warn!("seg_loss: {clamped} ground-truth probabilities clamped to {PROB_CLAMP}");
    }
    Ok(SegLoss {
        value: sum / pred.len() as f64,
        clamped,
    })
}

/// `(1/n) Σ ‖F_i − F_i^gt‖²`.
pub fn flow_loss(flow: &FlowField, gt: &FlowField) -> Result<f64> {
    check_len("ground-truth flow", flow.len(), gt.len())?;
    if flow.is_empty() {
        return Err(Error::Empty("flow field"));
    }
    let sum: f64 = flow
        .vectors()
        .iter()
        .zip(gt.vectors())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / flow.len() as f64)
}

/// Weighted supervised objective `α_seg·L_seg + α_flow·L_flow`.
pub fn supervised_loss(
    pred_labels: &PartLabels,
    gt_labels: &PartLabels,
    flow: &FlowField,
    gt_flow: &FlowField,
    weights: &LossWeights,
) -> Result<f64> {
    let seg = seg_loss(pred_labels, gt_labels)?.value;
    let fl = flow_loss(flow, gt_flow)?;
    Ok(weights.alpha_seg * seg + weights.alpha_flow * fl)
}

/// Symmetric squared chamfer distance with `1/n` and `1/m` normalization.
pub fn chamfer_loss(warped: &PointCloud, target: &PointCloud) -> f64 {
    let (fwd, bwd) = chamfer_assignments(warped.points(), target.points());
    chamfer_with(warped.points(), target.points(), &fwd, &bwd)
}

/// Nearest target for each source point and nearest source for each target point.
pub fn chamfer_assignments(warped: &[Vec3], target: &[Vec3]) -> (Vec<usize>, Vec<usize>) {
    let ti = NeighborIndex::build(target);
    let wi = NeighborIndex::build(warped);
    let fwd = warped.iter().map(|p| ti.nearest(p).expect("nonempty").index).collect();
    let bwd = target.iter().map(|q| wi.nearest(q).expect("nonempty").index).collect();
    (fwd, bwd)
}

fn chamfer_with(warped: &[Vec3], target: &[Vec3], fwd: &[usize], bwd: &[usize]) -> f64 {
    let a: f64 = warped.iter().zip(fwd).map(|(p, &j)| dist2(p, &target[j])).sum();
    let b: f64 = target.iter().zip(bwd).map(|(q, &i)| dist2(&warped[i], q)).sum();
    a / warped.len() as f64 + b / target.len() as f64
}

/// k nearest neighbors of every point of the cloud, excluding the point itself.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    k: usize,
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn build(cloud: &PointCloud, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("neighbor count must be at least 1".into()));
        }
        if cloud.len() <= k {
            return Err(Error::TooFewPoints {
                k,
                size: cloud.len().saturating_sub(1),
            });
        }
        let index = NeighborIndex::build(cloud.points());
        let lists = (0..cloud.len())
            .map(|i| Ok(index.knn_excluding(i, k)?.iter().map(|n| n.index).collect()))
            .collect::<Result<_>>()?;
        Ok(Self { k, lists })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

/// Mean over points of the mean squared flow difference to their k neighbors.
pub fn smoothness_loss(cloud: &PointCloud, flow: &FlowField, k: usize) -> Result<f64> {
    check_len("flow field", cloud.len(), flow.len())?;
    let nb = Neighborhoods::build(cloud, k)?;
    Ok(smoothness_with(flow.vectors(), &nb))
}

fn smoothness_with(flow: &[Vec3], nb: &Neighborhoods) -> f64 {
    let sum: f64 = (0..nb.len())
        .map(|i| {
            nb.of(i)
                .iter()
                .map(|&j| dist2(&flow[i], &flow[j]))
                .sum::<f64>()
                / nb.k as f64
        })
        .sum();
    sum / nb.len() as f64
}

/// Cross-entropy `−Σ_c q[c]·ln(max(p[c], clamp))`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(pi, qi)| if *qi == 0.0 { 0.0 } else { qi * pi.max(PROB_CLAMP).ln() })
        .sum::<f64>()
}

/// Mean cross-entropy between each point's part distribution and those of its neighbors.
pub fn clustering_loss(cloud: &PointCloud, labels: &PartLabels, k: usize) -> Result<f64> {
    check_len("labels", cloud.len(), labels.len())?;
    let nb = Neighborhoods::build(cloud, k)?;
    Ok(clustering_with(labels, &nb))
}

fn clustering_with(labels: &PartLabels, nb: &Neighborhoods) -> f64 {
    let dists: Vec<Vec<f64>> = (0..labels.len()).map(|i| labels.distribution(i)).collect();
    let sum: f64 = (0..nb.len())
        .map(|i| {
            nb.of(i)
                .iter()
                .map(|&j| cross_entropy(&dists[i], &dists[j]))
                .sum::<f64>()
                / nb.k as f64
        })
        .sum();
    sum / nb.len() as f64
}

fn rigid_targets(cloud: &PointCloud, labels: &PartLabels, fits: &[PartFit]) -> Result<Vec<Vec3>> {
    let table = fit_table(fits, labels.num_parts());
    cloud
        .points()
        .iter()
        .zip(labels.hard())
        .map(|(p, &l)| {
            let t: RigidTransform = table[l].ok_or(Error::MissingTransform { part: l })?;
            Ok((t.rotation() - nalgebra::Matrix3::identity()) * p + t.translation())
        })
        .collect()
}

/// `(1/n) Σ_k Σ_{i∈k} ‖(R_k − I)·p_i + t_k − f_i‖²`.
pub fn part_rigid_loss(cloud: &PointCloud, flow: &FlowField, labels: &PartLabels, fits: &[PartFit]) -> Result<f64> {
    check_len("flow field", cloud.len(), flow.len())?;
    check_len("labels", cloud.len(), labels.len())?;
    let targets = rigid_targets(cloud, labels, fits)?;
    Ok(targets
        .iter()
        .zip(flow.vectors())
        .map(|(r, f)| dist2(r, f))
        .sum::<f64>()
        / cloud.len() as f64)
}

/// Everything the self-supervised objective is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct SelfSupState<'a> {
    pub source: &'a PointCloud,
    pub target: &'a PointCloud,
    pub flow: &'a FlowField,
    /// Source labels; soft rows feed the clustering term when present.
    pub labels: &'a PartLabels,
    pub fits: &'a [PartFit],
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub chamfer: f64,
    pub smooth: f64,
    pub cluster: f64,
    pub rigid: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(chamfer: f64, smooth: f64, cluster: f64, rigid: f64, w: &LossWeights) -> Self {
        Self {
            chamfer,
            smooth,
            cluster,
            rigid,
            total: w.beta_chamfer * chamfer
                + w.beta_smooth * smooth
                + w.beta_cluster * cluster
                + w.beta_rigid * rigid,
        }
    }
}

fn check_state(state: &SelfSupState) -> Result<()> {
    check_len("flow field", state.source.len(), state.flow.len())?;
    check_len("labels", state.source.len(), state.labels.len())
}

/// `Σ β_type·L_type` over chamfer, smoothness, clustering and part-rigid terms.
pub fn total_selfsup_loss(state: &SelfSupState, weights: &LossWeights) -> Result<LossBreakdown> {
    check_state(state)?;
    weights.validate()?;
    let nb = Neighborhoods::build(state.source, weights.neighbor_k)?;
    let warped: Vec<Vec3> = state
        .source
        .points()
        .iter()
        .zip(state.flow.vectors())
        .map(|(p, f)| p + f)
        .collect();
    let (fwd, bwd) = chamfer_assignments(&warped, state.target.points());
    Ok(LossBreakdown::weighted(
        chamfer_with(&warped, state.target.points(), &fwd, &bwd),
        smoothness_with(state.flow.vectors(), &nb),
        clustering_with(state.labels, &nb),
        part_rigid_loss(state.source, state.flow, state.labels, state.fits)?,
        weights,
    ))
}

/// Gradient of the weighted self-supervised loss with respect to every flow
/// vector, with chamfer assignments taken at `state.flow` and `state.fits`
/// held constant. The clustering term does not depend on the flow.
pub fn grad_selfsup(state: &SelfSupState, weights: &LossWeights) -> Result<Vec<Vec3>> {
    check_state(state)?;
    weights.validate()?;
    let nb = Neighborhoods::build(state.source, weights.neighbor_k)?;
    let objective = FrozenObjective::new(state, &nb, weights)?;
    Ok(objective.gradient(state.flow.vectors()))
}

/// The self-supervised objective with chamfer assignments and rigid fits frozen.
///
/// At the flow it was built from, [`FrozenObjective::value`] equals
/// [`total_selfsup_loss`]. Elsewhere it is an upper bound of the true loss.
#[derive(Debug, Clone)]
pub struct FrozenObjective<'a> {
    source: Vec<Vec3>,
    target: Vec<Vec3>,
    neighbors: &'a Neighborhoods,
    fwd: Vec<usize>,
    bwd: Vec<usize>,
    rigid_targets: Option<Vec<Vec3>>,
    cluster: f64,
    weights: LossWeights,
}

impl<'a> FrozenObjective<'a> {
    pub fn new(state: &SelfSupState<'_>, neighbors: &'a Neighborhoods, weights: &LossWeights) -> Result<Self> {
        check_state(state)?;
        check_len("neighborhoods", state.source.len(), neighbors.len())?;
        let warped: Vec<Vec3> = state
            .source
            .points()
            .iter()
            .zip(state.flow.vectors())
            .map(|(p, f)| p + f)
            .collect();
        let (fwd, bwd) = chamfer_assignments(&warped, state.target.points());
        let rigid_targets = if weights.beta_rigid > 0.0 || !state.fits.is_empty() {
            Some(rigid_targets(state.source, state.labels, state.fits)?)
        } else {
            None
        };
        let cluster = if weights.beta_cluster > 0.0 {
            clustering_with(state.labels, neighbors)
        } else {
            0.0
        };
        Ok(Self {
            source: state.source.points().to_vec(),
            target: state.target.points().to_vec(),
            neighbors,
            fwd,
            bwd,
            rigid_targets,
            cluster,
            weights: weights.clone(),
        })
    }

    pub fn breakdown(&self, flow: &[Vec3]) -> LossBreakdown {
        let warped: Vec<Vec3> = self.source.iter().zip(flow).map(|(p, f)| p + f).collect();
        let chamfer = chamfer_with(&warped, &self.target, &self.fwd, &self.bwd);
        let smooth = smoothness_with(flow, self.neighbors);
        let rigid = match &self.rigid_targets {
            Some(r) => r.iter().zip(flow).map(|(r, f)| dist2(r, f)).sum::<f64>() / flow.len() as f64,
            None => 0.0,
        };
        LossBreakdown::weighted(chamfer, smooth, self.cluster, rigid, &self.weights)
    }

    pub fn value(&self, flow: &[Vec3]) -> f64 {
        self.breakdown(flow).total
    }

    pub fn gradient(&self, flow: &[Vec3]) -> Vec<Vec3> {
        let w = &self.weights;
        let n = self.source.len() as f64;
        let m = self.target.len() as f64;
        let mut grad = vec![Vec3::zeros(); flow.len()];
        if w.beta_chamfer > 0.0 {
            for (i, &j) in self.fwd.iter().enumerate() {
                let r = self.source[i] + flow[i] - self.target[j];
                grad[i] += r * (2.0 * w.beta_chamfer / n);
            }
            for (j, &i) in self.bwd.iter().enumerate() {
                let r = self.source[i] + flow[i] - self.target[j];
                grad[i] += r * (2.0 * w.beta_chamfer / m);
            }
        }
        if w.beta_smooth > 0.0 {
            let c = 2.0 * w.beta_smooth / (n * self.neighbors.k() as f64);
            for i in 0..flow.len() {
                for &j in self.neighbors.of(i) {
                    let d = (flow[i] - flow[j]) * c;
                    grad[i] += d;
                    grad[j] -= d;
                }
            }
        }
        if w.beta_rigid > 0.0 {
            if let Some(targets) = &self.rigid_targets {
                for (g, (r, f)) in grad.iter_mut().zip(targets.iter().zip(flow)) {
                    *g += (f - r) * (2.0 * w.beta_rigid / n);
                }
            }
        }
        grad
    }

    /// Diagonal of the (isotropic, per-point) Hessian of the frozen quadratic.
    pub fn hessian_diagonal(&self) -> Vec<f64> {
        let w = &self.weights;
        let n = self.source.len() as f64;
        let m = self.target.len() as f64;
        let mut diag = vec![2.0 * (w.beta_chamfer + w.beta_rigid) / n; self.source.len()];
        for &i in &self.bwd {
            diag[i] += 2.0 * w.beta_chamfer / m;
        }
        let c = 2.0 * w.beta_smooth / (n * self.neighbors.k() as f64);
        for i in 0..self.source.len() {
            for &j in self.neighbors.of(i) {
                diag[i] += c;
                diag[j] += c;
            }
        }
        diag
    }
}
