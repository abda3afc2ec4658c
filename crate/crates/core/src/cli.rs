//! Command-line entry point: `synth`, `register` and `eval`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{build_sequences, flow_metrics, sample_points, MetricReport, PairMetrics, Summary};
use crate::io::dataset::{Dataset, Manifest, Split};
use crate::io::text::{read_registration_config, read_scene_config, to_toml};
use crate::io::{write_dataset, Encoding, ScanRecord};
use crate::losses::LossBreakdown;
use crate::register::{register_pair, RegistrationConfig, Status};
use crate::synth::{LidarParams, SceneConfig};
use crate::types::{FlowField, PartLabels, PointCloud, STANDARD_BONES};

/// Environment variable naming the default registration config file.
pub const CONFIG_ENV: &str = "PARTREG_CONFIG";
pub const RUN_LOG: &str = "run.toml";
pub const DENSITY_CSV: &str = "density.csv";
/// Width of the point-count bins in the density histogram.
pub const DENSITY_BIN: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "partreg", version, about = "Body-part-aware registration of sparse human point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic LiDAR dataset of walking persons.
    Synth(SynthArgs),
    /// Register dataset frames onto reference frames.
    Register(RegisterArgs),
    /// Score registration output against dataset ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub persons: Option<usize>,
    /// Scanned frames per person.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with sensor parameters (r0, omega, pulse_rate, max_range, ...).
    #[arg(long)]
    pub lidar_config: Option<PathBuf>,
    /// TOML file with a full scene configuration; flags override its values.
    #[arg(long)]
    pub scene_config: Option<PathBuf>,
    /// Standard deviation of the range noise (m).
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

impl FromStr for SplitArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split `{s}` (expected all, train, val or test)")),
        }
    }
}

/// Points sampled per cloud, or every point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointsArg {
    Count(usize),
    All,
}

impl FromStr for PointsArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "512" => Ok(Self::Count(512)),
            "256" => Ok(Self::Count(256)),
            "128" => Ok(Self::Count(128)),
            _ => Err(format!("unsupported point count `{s}` (expected 512, 256, 128 or all)")),
        }
    }
}

/// A self-supervised loss term that `--ablate` can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Chamfer,
    Smooth,
    Cluster,
    Rigid,
}

impl FromStr for LossTerm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "chamfer" => Ok(Self::Chamfer),
            "smooth" => Ok(Self::Smooth),
            "cluster" => Ok(Self::Cluster),
            "rigid" => Ok(Self::Rigid),
            _ => Err(format!("unknown loss `{s}` (expected chamfer, smooth, cluster or rigid)")),
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "all")]
    pub split: SplitArg,
    /// Registration config (TOML); defaults to built-in values.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "512")]
    pub points: PointsArg,
    /// Register every frame of the split onto this frame instead of using
    /// sequences of `--seq-len` frames registered onto their last frame.
    #[arg(long)]
    pub ref_frame: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub seq_len: usize,
    /// Distance between the first frames of consecutive sequences.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the final part-rigid refinement.
    #[arg(long)]
    pub no_refine: bool,
    /// Comma-separated loss terms whose weights are set to zero.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<LossTerm>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Sampling seed; overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of a `register` run.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => run_synth(&a).map(|_| true),
        Command::Register(a) => run_register(&a).map(|log| log.failed == 0),
        Command::Eval(a) => run_eval(&a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Mixes a base seed with identifiers into an independent stream seed.
pub fn derive_seed(base: u64, ids: &[u64]) -> u64 {
    // splitmix64 finalizer applied after each identifier
    ids.iter().fold(base, |acc, &id| {
        let mut z = acc ^ id.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

pub fn synth_config(args: &SynthArgs) -> Result<SceneConfig> {
    let mut cfg = match &args.scene_config {
        Some(path) => read_scene_config(path)?,
        None => SceneConfig::default(),
    };
    if let Some(path) = &args.lidar_config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.lidar = toml::from_str::<LidarParams>(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    }
    if let Some(v) = args.persons {
        cfg.persons = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Histogram of per-frame point counts in bins of [`DENSITY_BIN`] points,
/// as CSV rows `bin_start,bin_end,frames`.
pub fn density_csv(manifest: &Manifest) -> String {
    let counts: Vec<usize> = manifest.persons.iter().flat_map(|p| p.points.iter().copied()).collect();
    let bins = counts.iter().max().map_or(0, |m| m / DENSITY_BIN + 1);
    let mut hist = vec![0usize; bins];
    for c in &counts {
        hist[c / DENSITY_BIN] += 1;
    }
    let mut out = String::from("bin_start,bin_end,frames\n");
    for (b, n) in hist.iter().enumerate() {
        writeln!(out, "{},{},{n}", b * DENSITY_BIN, (b + 1) * DENSITY_BIN).unwrap();
    }
    out
}

pub fn run_synth(args: &SynthArgs) -> Result<Manifest> {
    let cfg = synth_config(args)?;
    create_dir(&args.out)?;
    let manifest = write_dataset(&args.out, &cfg)?;
    write_text(&args.out.join(DENSITY_CSV), &density_csv(&manifest))?;
    let mut counts: Vec<usize> = manifest.persons.iter().flat_map(|p| p.points.iter().copied()).collect();
    counts.sort_unstable();
    if let (Some(lo), Some(hi)) = (counts.first(), counts.last()) {
        println!(
            "wrote {} persons x {} frames to {}; points per person-frame: min {lo}, median {}, max {hi}",
            manifest.persons.len(),
            cfg.frames,
            args.out.display(),
            counts[counts.len() / 2]
        );
    }
    Ok(manifest)
}

/// One registered pair as listed in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub person: String,
    /// Sequence identifier, unique across the run.
    pub sequence: String,
    pub frame: usize,
    pub reference: usize,
    /// Prediction file relative to the output directory.
    pub file: String,
    pub error: Option<String>,
}

impl PairEntry {
    fn stem(person: &str, frame: usize, reference: usize) -> String {
        format!("{person}/{frame:06}_to_{reference:06}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub dataset: PathBuf,
    pub split: SplitArg,
    pub points: PointsArg,
    pub ref_frame: Option<usize>,
    pub seq_len: usize,
    pub stride: usize,
    pub ablate: Vec<LossTerm>,
    pub failed: usize,
    pub config: RegistrationConfig,
    pub pairs: Vec<PairEntry>,
}

/// Per-pair summary written next to the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub person: String,
    pub sequence: String,
    pub frame: usize,
    pub reference: usize,
    pub source_points: usize,
    pub target_points: usize,
    /// True when a cloud had fewer points than requested and was used whole.
    pub short_sample: bool,
    pub status: Status,
    pub outer_iterations: usize,
    pub refined: bool,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
}

pub fn registration_config(args: &RegisterArgs) -> Result<RegistrationConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_registration_config(path)?,
        None => RegistrationConfig::default(),
    };
    for term in &args.ablate {
        let w = &mut cfg.weights;
        match term {
            LossTerm::Chamfer => w.beta_chamfer = 0.0,
            LossTerm::Smooth => w.beta_smooth = 0.0,
            LossTerm::Cluster => w.beta_cluster = 0.0,
            LossTerm::Rigid => w.beta_rigid = 0.0,
        }
    }
    if args.no_refine {
        cfg.refine_at_end = false;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Lists the pairs a `register` run processes, in output order.
pub fn plan_pairs(dataset: &Dataset, args: &RegisterArgs) -> Result<Vec<PairEntry>> {
    let ranges: Vec<_> = match args.split {
        SplitArg::All => dataset
            .manifest()
            .persons
            .iter()
            .map(|p| (p.id.clone(), 0..p.frames))
            .collect(),
        s => {
            let split = match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                _ => Split::Test,
            };
            dataset
                .frames_in_split(split)
                .iter()
                .map(|r| (r.person.clone(), r.frames()))
                .collect()
        }
    };
    let mut pairs = Vec::new();
    for (person, frames) in ranges {
        let frames: Vec<usize> = frames.collect();
        let groups: Vec<(Vec<usize>, usize)> = match args.ref_frame {
            Some(r) => {
                let n = dataset.manifest().person(&person).map_or(0, |p| p.frames);
                if r >= n {
                    return Err(Error::Config(format!("--ref-frame {r} is outside the {n} frames of `{person}`")));
                }
                vec![(frames.into_iter().filter(|&f| f != r).collect(), r)]
            }
            None => {
                let seqs = build_sequences(&frames, args.seq_len, args.stride)?;
                if seqs.is_empty() {
                    log::warn!("`{person}` has fewer than {} frames in the split; skipped", args.seq_len);
                }
                seqs.iter().map(|s| (s.sources().to_vec(), s.reference())).collect()
            }
        };
        for (k, (sources, reference)) in groups.into_iter().enumerate() {
            for frame in sources {
                pairs.push(PairEntry {
                    person: person.clone(),
                    sequence: format!("{person}/{k:04}"),
                    frame,
                    reference,
                    file: format!("{}.ply", PairEntry::stem(&person, frame, reference)),
                    error: None,
                });
            }
        }
    }
    Ok(pairs)
}

fn person_index(dataset: &Dataset, person: &str) -> u64 {
    dataset.manifest().persons.iter().position(|p| p.id == person).unwrap_or(0) as u64
}

/// Loads a frame as a cloud with labels, sampled per `--points`.
fn load_sampled(
    dataset: &Dataset,
    person: &str,
    frame: usize,
    points: PointsArg,
    seed: u64,
) -> Result<(PointCloud, PartLabels, Vec<usize>, bool)> {
    let rec = dataset.load_frame(person, frame)?.record;
    let labels = rec
        .labels
        .ok_or_else(|| Error::Dataset(format!("`{person}` frame {frame} has no labels")))?;
    let cloud = PointCloud::new(rec.points)
        .map_err(|e| Error::Dataset(format!("`{person}` frame {frame}: {e}")))?;
    let (cloud, indices, short) = match points {
        PointsArg::All => {
            let n = cloud.len();
            (cloud, (0..n).collect(), false)
        }
        PointsArg::Count(target) => {
            let sample = sample_points(&cloud, target, seed)?;
            (sample.cloud, sample.indices, sample.short)
        }
    };
    let hard = indices.iter().map(|&i| labels[i]).collect();
    let labels = PartLabels::from_hard(hard, STANDARD_BONES.len())?;
    Ok((cloud, labels, indices, short))
}

struct PairOutput {
    record: ScanRecord,
    summary: PairSummary,
}

fn register_one(dataset: &Dataset, pair: &PairEntry, points: PointsArg, cfg: &RegistrationConfig) -> Result<PairOutput> {
    let p = person_index(dataset, &pair.person);
    let (src, ls, indices, short_s) = load_sampled(
        dataset,
        &pair.person,
        pair.frame,
        points,
        derive_seed(cfg.seed, &[p, pair.frame as u64]),
    )?;
    let (dst, lt, _, short_t) = load_sampled(
        dataset,
        &pair.person,
        pair.reference,
        points,
        derive_seed(cfg.seed, &[p, pair.reference as u64]),
    )?;
    let result = register_pair(&src, &dst, &ls, &lt, cfg)?;
    let flow: &FlowField = result.output_flow();
    let record = ScanRecord {
        points: src.points().to_vec(),
        flow: Some(flow.vectors().to_vec()),
        labels: Some(result.labels_src.hard().to_vec()),
        src_index: Some(indices),
        ..ScanRecord::default()
    };
    let summary = PairSummary {
        person: pair.person.clone(),
        sequence: pair.sequence.clone(),
        frame: pair.frame,
        reference: pair.reference,
        source_points: src.len(),
        target_points: dst.len(),
        short_sample: short_s || short_t,
        status: result.status,
        outer_iterations: result.outer_iterations,
        refined: cfg.refine_at_end,
        initial_loss: result.loss_trace.first().cloned().unwrap_or_default(),
        final_loss: result.loss_trace.last().cloned().unwrap_or_default(),
    };
    Ok(PairOutput { record, summary })
}

pub fn run_register(args: &RegisterArgs) -> Result<RunLog> {
    let cfg = registration_config(args)?;
    let dataset = Dataset::open(&args.dataset)?;
    let mut pairs = plan_pairs(&dataset, args)?;
    create_dir(&args.out)?;
    for p in &dataset.manifest().persons {
        create_dir(&args.out.join(&p.id))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", args.jobs)))?;
    let outcomes: Vec<Result<()>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                let out = register_one(&dataset, pair, args.points, &cfg)?;
                let stem = args.out.join(PairEntry::stem(&pair.person, pair.frame, pair.reference));
                out.record.write(&stem.with_extension("ply"), Encoding::BinaryLittleEndian)?;
                write_text(&stem.with_extension("toml"), &to_toml(&out.summary)?)
            })
            .collect()
    });
    let mut failed = 0;
    for (pair, outcome) in pairs.iter_mut().zip(outcomes) {
        if let Err(e) = outcome {
            log::error!("{} frame {} -> {}: {e}", pair.person, pair.frame, pair.reference);
            pair.error = Some(e.to_string());
            failed += 1;
        }
    }
    let log = RunLog {
        dataset: args.dataset.clone(),
        split: args.split,
        points: args.points,
        ref_frame: args.ref_frame,
        seq_len: args.seq_len,
        stride: args.stride,
        ablate: args.ablate.clone(),
        failed,
        config: cfg,
        pairs,
    };
    write_text(&args.out.join(RUN_LOG), &to_toml(&log)?)?;
    println!("registered {} pairs, {failed} failed", log.pairs.len() - failed);
    Ok(log)
}

pub fn read_run_log(dir: &Path) -> Result<RunLog> {
    let path = dir.join(RUN_LOG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// Ground-truth flow of the predicted points: each source point moves to
/// the reference-frame position of the surface point it was scanned from.
pub fn pair_metrics(dataset: &Dataset, pred_dir: &Path, pair: &PairEntry) -> Result<PairMetrics> {
    let name = format!("{} frame {} -> {}", pair.person, pair.frame, pair.reference);
    let mismatch = |m: String| Error::Dataset(format!("pair {name}: {m}"));
    let path = pred_dir.join(&pair.file);
    if !path.is_file() {
        return Err(mismatch(format!("missing prediction file {}", path.display())));
    }
    let pred = ScanRecord::read(&path)?;
    let (Some(flow), Some(index)) = (&pred.flow, &pred.src_index) else {
        return Err(mismatch("prediction lacks flow or src_index".into()));
    };
    let frame = dataset.load_frame(&pair.person, pair.frame)?;
    let anchors = frame.anchors()?;
    let mesh = dataset.load_mesh(&pair.person, pair.reference)?;
    let mut gt = Vec::with_capacity(index.len());
    for (&i, p) in index.iter().zip(&pred.points) {
        let Some(&q) = frame.record.points.get(i) else {
            return Err(mismatch(format!("src_index {i} is outside the source frame")));
        };
        if q != *p {
            return Err(mismatch(format!("point {i} differs from the dataset")));
        }
        gt.push(mesh.surface_point(&anchors[i])? - q);
    }
    let n = pred.len();
    let metrics = flow_metrics(&FlowField::new(flow.clone(), n)?, &FlowField::new(gt, n)?)?;
    Ok(PairMetrics {
        sequence: pair.sequence.clone(),
        frame: pair.frame,
        reference: pair.reference,
        metrics,
    })
}

/// CSV with one `pair` row per registered pair, one `sequence` row per
/// sequence, and `mean`, `std_sequences`, `std_pairs` summary rows.
/// EPE3D is in meters, the other columns in percent.
pub fn report_csv(pairs: &[PairMetrics], report: &MetricReport) -> String {
    let mut out = String::from("kind,sequence,frame,reference,n,epe3d,accs,accr,outlier\n");
    for p in pairs {
        let m = &p.metrics;
        writeln!(
            out,
            "pair,{},{},{},{},{},{},{},{}",
            p.sequence, p.frame, p.reference, m.n, m.epe3d, m.accs, m.accr, m.outlier
        )
        .unwrap();
    }
    for s in &report.sequences {
        writeln!(out, "sequence,{},,,{},{},{},{},{}", s.sequence, s.pairs, s.epe3d, s.accs, s.accr, s.outlier).unwrap();
    }
    let stats: [(&str, fn(&Summary) -> f64); 3] = [
        ("mean", |s| s.mean),
        ("std_sequences", |s| s.std_sequences),
        ("std_pairs", |s| s.std_pairs),
    ];
    for (kind, f) in stats {
        writeln!(
            out,
            "{kind},,,,{},{},{},{},{}",
            report.pairs,
            f(&report.epe3d),
            f(&report.accs),
            f(&report.accr),
            f(&report.outlier)
        )
        .unwrap();
    }
    out
}

pub fn report_table(report: &MetricReport) -> String {
    let cell = |s: &Summary, scale: f64| {
        format!(
            "{:.2} ± {:.2} ({:.2})",
            s.mean * scale,
            s.std_sequences * scale,
            s.std_pairs * scale
        )
    };
    let mut out = format!(
        "{} pairs in {} sequences; mean ± std over sequences (std over pairs)\n",
        report.pairs,
        report.sequences.len()
    );
    for (name, s, scale) in [
        ("EPE3D (cm)", &report.epe3d, 100.0),
        ("AccS (%)", &report.accs, 1.0),
        ("AccR (%)", &report.accr, 1.0),
        ("Outlier (%)", &report.outlier, 1.0),
    ] {
        writeln!(out, "{name:<12} {}", cell(s, scale)).unwrap();
    }
    out
}

pub fn run_eval(args: &EvalArgs) -> Result<MetricReport> {
    let log = read_run_log(&args.pred)?;
    let dataset = Dataset::open(&args.dataset)?;
    let pairs: Vec<PairMetrics> = log
        .pairs
        .par_iter()
        .map(|p| pair_metrics(&dataset, &args.pred, p))
        .collect::<Result<_>>()?;
    let report = MetricReport::aggregate(&pairs)?;
    write_text(&args.out_csv, &report_csv(&pairs, &report))?;
    print!("{}", report_table(&report));
    Ok(report)
}
