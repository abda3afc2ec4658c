//! Flow metrics, sequence construction and point subsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::types::{FlowField, PointCloud};

/// Strict accuracy threshold (m).
pub const ACC_STRICT: f64 = 0.05;
/// Relaxed accuracy threshold (m).
pub const ACC_RELAXED: f64 = 0.1;
/// Outlier threshold (m).
pub const OUTLIER: f64 = 0.2;

/// Metrics of one predicted flow against ground truth. Percentages are in
/// [0, 100]; all thresholds are strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub n: usize,
    /// Mean end-point error (m).
    pub epe3d: f64,
    /// Standard deviation of the per-point end-point error (m).
    pub epe3d_std: f64,
    /// Percentage of points with error below 5 cm.
    pub accs: f64,
    /// Percentage of points with error below 10 cm.
    pub accr: f64,
    /// Percentage of points with error above 20 cm.
    pub outlier: f64,
}

pub fn endpoint_errors(pred: &FlowField, gt: &FlowField) -> Result<Vec<f64>> {
    check_len("ground-truth flow", pred.len(), gt.len())?;
    Ok(pred.vectors().iter().zip(gt.vectors()).map(|(p, g)| (p - g).norm()).collect())
}

pub fn flow_metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics> {
    metrics_from_errors(&endpoint_errors(pred, gt)?)
}

pub fn metrics_from_errors(errors: &[f64]) -> Result<FlowMetrics> {
    if errors.is_empty() {
        return Err(Error::Empty("flow"));
    }
    let n = errors.len() as f64;
    let pct = |pred: &dyn Fn(f64) -> bool| 100.0 * errors.iter().filter(|&&e| pred(e)).count() as f64 / n;
    let epe3d = errors.iter().sum::<f64>() / n;
    Ok(FlowMetrics {
        n: errors.len(),
        epe3d,
        epe3d_std: population_std(errors, epe3d),
        accs: pct(&|e| e < ACC_STRICT),
        accr: pct(&|e| e < ACC_RELAXED),
        outlier: pct(&|e| e > OUTLIER),
    })
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Metrics of one registered pair, tagged with its sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub sequence: String,
    pub frame: usize,
    pub reference: usize,
    pub metrics: FlowMetrics,
}

/// Mean over sequences plus two spreads: across sequence means and across
/// individual pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_sequences: f64,
    pub std_pairs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: String,
    pub pairs: usize,
    pub epe3d: f64,
    pub accs: f64,
    pub accr: f64,
    pub outlier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe3d: Summary,
    pub accs: Summary,
    pub accr: Summary,
    pub outlier: Summary,
    pub sequences: Vec<SequenceMetrics>,
    pub pairs: usize,
    /// Total registration time (s), when known.
    pub wall_time: Option<f64>,
}

impl MetricReport {
    /// Averages pair metrics within each sequence first, then across
    /// sequences with equal weight. Sequences keep first-appearance order.
    pub fn aggregate(pairs: &[PairMetrics]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("pair metrics"));
        }
        let mut order: Vec<&str> = Vec::new();
        for p in pairs {
            if !order.contains(&p.sequence.as_str()) {
                order.push(&p.sequence);
            }
        }
        let sequences: Vec<SequenceMetrics> = order
            .iter()
            .map(|&id| {
                let members: Vec<&FlowMetrics> = pairs.iter().filter(|p| p.sequence == id).map(|p| &p.metrics).collect();
                let avg = |f: fn(&FlowMetrics) -> f64| mean(&members.iter().map(|m| f(m)).collect::<Vec<_>>());
                SequenceMetrics {
                    sequence: id.to_string(),
                    pairs: members.len(),
                    epe3d: avg(|m| m.epe3d),
                    accs: avg(|m| m.accs),
                    accr: avg(|m| m.accr),
                    outlier: avg(|m| m.outlier),
                }
            })
            .collect();
        let summarize = |seq: fn(&SequenceMetrics) -> f64, pair: fn(&FlowMetrics) -> f64| {
            let s: Vec<f64> = sequences.iter().map(seq).collect();
            let p: Vec<f64> = pairs.iter().map(|x| pair(&x.metrics)).collect();
            let m = mean(&s);
            Summary {
                mean: m,
                std_sequences: population_std(&s, m),
                std_pairs: population_std(&p, mean(&p)),
            }
        };
        Ok(Self {
            epe3d: summarize(|s| s.epe3d, |m| m.epe3d),
            accs: summarize(|s| s.accs, |m| m.accs),
            accr: summarize(|s| s.accr, |m| m.accr),
            outlier: summarize(|s| s.outlier, |m| m.outlier),
            sequences,
            pairs: pairs.len(),
            wall_time: None,
        })
    }
}

/// A window of frames registered onto its last frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub frames: Vec<usize>,
}

impl Sequence {
    pub fn reference(&self) -> usize {
        *self.frames.last().expect("sequences are never empty")
    }

    /// Frames registered onto the reference.
    pub fn sources(&self) -> &[usize] {
        &self.frames[..self.frames.len() - 1]
    }
}

/// Splits time-ordered `frames` into disjoint windows of `seq_len`
/// consecutive entries whose starts are `stride` apart. A trailing partial
/// window is dropped.
pub fn build_sequences(frames: &[usize], seq_len: usize, stride: usize) -> Result<Vec<Sequence>> {
    if seq_len < 2 {
        return Err(Error::Invalid(format!("sequence length must be at least 2, got {seq_len}")));
    }
    if stride < seq_len {
        return Err(Error::Invalid(format!(
            "stride {stride} is shorter than the sequence length {seq_len}; windows would overlap"
        )));
    }
    if frames.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("frames must be strictly increasing".into()));
    }
    if frames.len() < seq_len {
        log::info!("skipping {} frames: fewer than one sequence of {seq_len}", frames.len());
        return Ok(Vec::new());
    }
    Ok((0..=frames.len() - seq_len)
        .step_by(stride)
        .map(|s| Sequence {
            frames: frames[s..s + seq_len].to_vec(),
        })
        .collect())
}

/// A subsampled cloud and the source index of each kept point.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    /// Ascending indices into the original cloud.
    pub indices: Vec<usize>,
    /// Set when the cloud had fewer points than requested and was kept whole.
    pub short: bool,
}

/// Uniform subset of `target` points without replacement, deterministic in
/// `seed`. Smaller clouds are returned whole and flagged.
pub fn sample_points(cloud: &PointCloud, target: usize, seed: u64) -> Result<Sample> {
    let n = cloud.len();
    if target == 0 {
        return Err(Error::Invalid("sample size must be positive".into()));
    }
    let (mut indices, short) = if target >= n {
        ((0..n).collect::<Vec<_>>(), target > n)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (rand::seq::index::sample(&mut rng, n, target).into_vec(), false)
    };
    indices.sort_unstable();
    Ok(Sample {
        cloud: cloud.select(&indices)?,
        indices,
        short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Vec3;

    fn flows(errors: &[f64]) -> (FlowField, FlowField) {
        let gt: Vec<Vec3> = (0..errors.len()).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let pred = gt.iter().zip(errors).map(|(g, e)| g + Vec3::new(0.0, *e, 0.0)).collect();
        (FlowField::new(pred, errors.len()).unwrap(), FlowField::new(gt, errors.len()).unwrap())
    }

    #[test]
    fn perfect_prediction() {
        let (_, gt) = flows(&[0.0; 5]);
        let m = flow_metrics(&gt, &gt).unwrap();
        assert_eq!((m.epe3d, m.accs, m.accr, m.outlier), (0.0, 100.0, 100.0, 0.0));
    }

    #[test]
    fn four_point_hand_example() {
        let (p, g) = flows(&[0.04, 0.06, 0.15, 0.25]);
        let m = flow_metrics(&p, &g).unwrap();
        assert!((m.epe3d - 0.125).abs() < 1e-12);
        assert_eq!((m.accs, m.accr, m.outlier), (25.0, 50.0, 25.0));
    }

    #[test]
    fn thresholds_are_strict() {
        let m = metrics_from_errors(&[0.05, 0.1, 0.2]).unwrap();
        assert_eq!((m.accs, m.accr, m.outlier), (0.0, 100.0 / 3.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(flow_metrics(&FlowField::zeros(3), &FlowField::zeros(4)).is_err());
    }

    #[test]
    fn aggregate_weights_sequences_equally() {
        let m = |e: f64| metrics_from_errors(&[e]).unwrap();
        let pairs = vec![
            PairMetrics { sequence: "a".into(), frame: 0, reference: 3, metrics: m(0.01) },
            PairMetrics { sequence: "a".into(), frame: 1, reference: 3, metrics: m(0.03) },
            PairMetrics { sequence: "b".into(), frame: 4, reference: 7, metrics: m(0.3) },
        ];
        let r = MetricReport::aggregate(&pairs).unwrap();
        assert!((r.epe3d.mean - (0.02 + 0.3) / 2.0).abs() < 1e-12);
        assert!((r.epe3d.std_sequences - 0.14).abs() < 1e-12);
        let pm = (0.01 + 0.03 + 0.3) / 3.0;
        let ps = (((0.01f64 - pm).powi(2) + (0.03f64 - pm).powi(2) + (0.3f64 - pm).powi(2)) / 3.0).sqrt();
        assert!((r.epe3d.std_pairs - ps).abs() < 1e-12);
        assert_eq!(r.sequences.len(), 2);
        assert_eq!(r.accs.mean, 50.0);
    }

    #[test]
    fn sequences_from_frames() {
        let f: Vec<usize> = (0..8).collect();
        assert_eq!(build_sequences(&f, 4, 4).unwrap().len(), 2);
        assert_eq!(build_sequences(&f[..7], 4, 4).unwrap().len(), 1);
        assert!(build_sequences(&f[..3], 4, 4).unwrap().is_empty());
        let s = build_sequences(&(0..20).collect::<Vec<_>>(), 4, 8).unwrap();
        assert_eq!(s.iter().map(|s| s.frames[0]).collect::<Vec<_>>(), vec![0, 8, 16]);
        for w in s.windows(2) {
            assert!(w[1].frames[0] > w[0].reference() + 1);
        }
        assert_eq!(s[0].reference(), 3);
        assert_eq!(s[0].sources(), &[0, 1, 2]);
        assert!(build_sequences(&f, 4, 2).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let pts: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let all = sample_points(&cloud, 100, 1).unwrap();
        assert_eq!(all.indices, (0..100).collect::<Vec<_>>());
        assert!(!all.short);
        let a = sample_points(&cloud, 30, 5).unwrap();
        let b = sample_points(&cloud, 30, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices.len(), 30);
        let big = sample_points(&cloud, 512, 5).unwrap();
        assert!(big.short && big.cloud.len() == 100);

        // metrics on the subset equal metrics on the selected full-array rows
        let gt = FlowField::new(cloud.points().iter().map(|p| Vec3::new(0.0, p.x * 1e-3, 0.0)).collect(), 100).unwrap();
        let pred = FlowField::zeros(100);
        let sub = flow_metrics(&pred.select(&a.indices), &gt.select(&a.indices)).unwrap();
        let errs: Vec<f64> = a.indices.iter().map(|&i| (pred.vectors()[i] - gt.vectors()[i]).norm()).collect();
        assert_eq!(sub, metrics_from_errors(&errs).unwrap());
    }
}
