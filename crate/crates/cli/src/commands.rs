//! Subcommands, their arguments, and the run manifest used for replay.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use xct_core::comm::{Topology, VolumeReport};
use xct_core::engine::{flops_and_bytes, spmm, Minibatch, MAX_FFACTOR};
use xct_core::geometry::{
    build_system_matrix, generate_phantom, make_geometry, simulate_measurements, PhantomKind,
    ScanGeometry, Volume, VolumeRole,
};
use xct_core::matrixstore::{
    build_staged, uniform_blocks, DEFAULT_BLOCK_ROWS, DEFAULT_STAGE_CAPACITY,
};
use xct_core::pipeline::{
    auto_partition, proxy_dims, DistributedOperator, MemoryModel, OperatorConfig,
};
use xct_core::precision::{DType, Precision};
use xct_core::solver::{cgls_solve, OpCounters, SolveConfig};

use crate::dataset::{read_volume, write_volume};
use crate::pgm::slice_to_pgm;

pub const MANIFEST_VERSION: u32 = 1;

/// `K,M,N`: angles, slices, detector columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub k: usize,
    pub m: usize,
    pub n: usize,
}

impl FromStr for GeometrySpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected K,M,N, got `{s}`"));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| format!("bad dimension `{p}` in `{s}`"))?;
        }
        Ok(Self {
            k: v[0],
            m: v[1],
            n: v[2],
        })
    }
}

impl fmt::Display for GeometrySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.k, self.m, self.n)
    }
}

/// `a0,a1` in radians; `pi`, `2pi`, `pi/2` and plain numbers are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub start: f64,
    pub end: f64,
}

fn parse_angle(token: &str) -> std::result::Result<f64, String> {
    let (num, den) = match token.split_once('/') {
        Some((a, b)) => (a, Some(b)),
        None => (token, None),
    };
    let num = match num.strip_suffix("pi") {
        Some("") => PI,
        Some("-") => -PI,
        Some(c) => {
            c.parse::<f64>()
                .map_err(|_| format!("bad angle `{token}`"))?
                * PI
        }
        None => num
            .parse::<f64>()
            .map_err(|_| format!("bad angle `{token}`"))?,
    };
    match den {
        Some(d) => {
            let d: f64 = d.parse().map_err(|_| format!("bad angle `{token}`"))?;
            Ok(num / d)
        }
        None => Ok(num),
    }
}

impl FromStr for AngleRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected a0,a1, got `{s}`"))?;
        Ok(Self {
            start: parse_angle(a.trim())?,
            end: parse_angle(b.trim())?,
        })
    }
}

impl fmt::Display for AngleRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdChoice {
    Auto,
    Fixed(usize),
}

impl FromStr for PdChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(PdChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(PdChoice::Fixed(n)),
            _ => Err(format!("expected `auto` or a positive count, got `{s}`")),
        }
    }
}

impl fmt::Display for PdChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PdChoice::Auto => f.write_str("auto"),
            PdChoice::Fixed(n) => write!(f, "{n}"),
        }
    }
}

/// Byte count with an optional `K`, `M`, `G` or `T` suffix (powers of 10).
pub fn parse_bytes(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim().trim_end_matches(['B', 'b']);
    let (num, mult) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 1e3),
        Some('M' | 'm') => (&t[..t.len() - 1], 1e6),
        Some('G' | 'g') => (&t[..t.len() - 1], 1e9),
        Some('T' | 't') => (&t[..t.len() - 1], 1e12),
        _ => (t, 1.0),
    };
    let v: f64 = num.parse().map_err(|_| format!("bad byte count `{s}`"))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(format!("bad byte count `{s}`"));
    }
    Ok(v * mult)
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: xct_core::error::Error| e.to_string())
}

/// Fusing factors to sweep, given as `a..b` (inclusive) or a comma list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sweep(pub Vec<usize>);

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_sweep(s).map(Sweep)
    }
}

pub fn parse_sweep(s: &str) -> std::result::Result<Vec<usize>, String> {
    let values: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| format!("bad sweep `{s}`"))?;
        let b: usize = b.trim().parse().map_err(|_| format!("bad sweep `{s}`"))?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad sweep `{s}`")))
            .collect::<std::result::Result<_, _>>()?
    };
    if values.is_empty() || values.iter().any(|&f| f == 0 || f > MAX_FFACTOR) {
        return Err(format!(
            "fusing factors must lie in 1..={MAX_FFACTOR}, got `{s}`"
        ));
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeArg {
    Double,
    Single,
    Half,
}

impl From<DtypeArg> for DType {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::Double => DType::F64,
            DtypeArg::Single => DType::F32,
            DtypeArg::Half => DType::F16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Direct,
    Hierarchical,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    /// uniform-disk, shepp-logan-like or random-blobs
    #[arg(long, default_value = "shepp-logan-like")]
    pub kind: String,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub slices: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::Double)]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProjectArgs {
    #[arg(long)]
    pub geometry: GeometrySpec,
    #[arg(long, default_value = "0,pi", allow_hyphen_values = true)]
    pub angles: AngleRange,
    #[arg(long, default_value_t = 1.0)]
    pub voxel: f64,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Gaussian noise deviation relative to the peak measurement.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::Double)]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlanArgs {
    #[arg(long)]
    pub geometry: GeometrySpec,
    #[arg(long, default_value = "0,pi", allow_hyphen_values = true)]
    pub angles: AngleRange,
    /// Batch groups; by default every GPU left after data partitioning.
    #[arg(long)]
    pub pb: Option<usize>,
    #[arg(long, default_value = "auto")]
    pub pd: PdChoice,
    #[arg(long, default_value_t = 16)]
    pub ffactor: usize,
    /// Topology file; defaults to 4 nodes of 2 sockets with 3 GPUs each.
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long, default_value = "mixed", value_parser = parse_precision)]
    pub precision: Precision,
    #[arg(long, default_value = "16G", value_parser = parse_bytes)]
    pub mem_cap: f64,
    /// Largest grid used to measure communication volumes.
    #[arg(long, default_value_t = 128)]
    pub proxy_n: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReconArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub geometry: GeometrySpec,
    #[arg(long, default_value = "0,pi", allow_hyphen_values = true)]
    pub angles: AngleRange,
    #[arg(long, default_value_t = 1.0)]
    pub voxel: f64,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[arg(long)]
    pub early_stop: Option<usize>,
    #[arg(long, default_value = "mixed", value_parser = parse_precision)]
    pub precision: Precision,
    #[arg(long, default_value_t = 16)]
    pub ffactor: usize,
    #[arg(long, default_value_t = 1)]
    pub pb: usize,
    #[arg(long, default_value_t = 1)]
    pub pd: usize,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PlanKind::Hierarchical)]
    pub plan: PlanKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Residual history CSV; defaults to the output path with a
    /// `.residuals.csv` extension.
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub geometry: GeometrySpec,
    #[arg(long, default_value = "0,pi", allow_hyphen_values = true)]
    pub angles: AngleRange,
    #[arg(long, default_value = "single", value_parser = parse_precision)]
    pub precision: Precision,
    #[arg(long, default_value = "1..50")]
    pub ffactor_sweep: Sweep,
    #[arg(long, default_value_t = DEFAULT_STAGE_CAPACITY)]
    pub stage_capacity: usize,
    /// Timed repetitions per fusing factor.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs into this directory instead of their recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Phantom(PhantomArgs),
    Project(ProjectArgs),
    Plan(PlanArgs),
    Recon(ReconArgs),
    Export(ExportArgs),
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tomogram.
    Phantom(PhantomArgs),
    /// Simulate parallel-beam measurements of a tomogram.
    Project(ProjectArgs),
    /// Choose a partitioning and report communication volumes.
    Plan(PlanArgs),
    /// Reconstruct a tomogram with CGLS.
    Recon(ReconArgs),
    /// Write one slice as a 16-bit PGM image.
    Export(ExportArgs),
    /// Sweep the fusing factor and report kernel counters.
    Bench(BenchArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Parser)]
#[command(
    name = "xct",
    version,
    about = "Partitioned iterative X-ray CT reconstruction"
)]
pub struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSummary {
    pub pb: usize,
    pub pd: usize,
    pub total_gpus: usize,
    pub mem_cap: f64,
    pub bytes_per_process: f64,
    pub estimated_nnz: f64,
    /// `(K, N)` of the reduced scan the volumes were measured on.
    pub proxy: Option<(usize, usize)>,
    pub tile_size: usize,
    pub volume: VolumeReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconSummary {
    pub iterations: usize,
    pub final_residual: f64,
    pub counters: OpCounters,
    pub length_scale: f64,
    pub tile_size: usize,
    pub residual_history: PathBuf,
    pub volume: VolumeReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub ffactor: usize,
    pub nnz: usize,
    pub stored_entries: usize,
    pub flops: u64,
    pub bytes: u64,
    pub intensity: f64,
    pub seconds: f64,
    pub gflops: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Details {
    #[default]
    None,
    Plan(PlanSummary),
    Recon(ReconSummary),
    Bench(Vec<BenchRow>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub job: Job,
    pub workers: Option<usize>,
    pub seeds: BTreeMap<String, u64>,
    /// Wall time per phase in seconds.
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<PathBuf>,
    pub details: Details,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        ensure!(
            manifest.version == MANIFEST_VERSION,
            "manifest version {} is not supported",
            manifest.version
        );
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

struct Outcome {
    timings: BTreeMap<String, f64>,
    outputs: Vec<PathBuf>,
    details: Details,
}

impl Outcome {
    fn new() -> Self {
        Self {
            timings: BTreeMap::new(),
            outputs: Vec::new(),
            details: Details::None,
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f()?;
        self.timings
            .insert(phase.to_string(), start.elapsed().as_secs_f64());
        Ok(value)
    }
}

pub fn load_topology(path: Option<&Path>) -> Result<Topology> {
    let Some(path) = path else {
        return Ok(Topology::two_by_three(4)?);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join(" ");
    body.parse::<Topology>()
        .with_context(|| format!("parsing topology {}", path.display()))
}

fn scan_geometry(spec: GeometrySpec, angles: AngleRange, voxel: f64) -> Result<ScanGeometry> {
    Ok(make_geometry(spec.k, spec.m, spec.n, angles.start, angles.end)?.with_voxel_size(voxel)?)
}

fn default_residuals_path(out: &Path) -> PathBuf {
    out.with_extension("residuals.csv")
}

fn redirect(path: &mut PathBuf, dir: &Path) {
    if let Some(name) = path.file_name() {
        *path = dir.join(name);
    }
}

impl Job {
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::new();
        match self {
            Job::Phantom(a) => {
                seeds.insert("phantom".to_string(), a.seed);
            }
            Job::Project(a) => {
                seeds.insert("noise".to_string(), a.seed);
            }
            _ => {}
        }
        seeds
    }

    pub fn manifest_path(&self) -> Option<&Path> {
        match self {
            Job::Phantom(a) => a.manifest.as_deref(),
            Job::Project(a) => a.manifest.as_deref(),
            Job::Plan(a) => a.manifest.as_deref(),
            Job::Recon(a) => a.manifest.as_deref(),
            Job::Export(a) => a.manifest.as_deref(),
            Job::Bench(a) => a.manifest.as_deref(),
        }
    }

    /// Move every output of the job into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        match self {
            Job::Phantom(a) => redirect(&mut a.out, dir),
            Job::Project(a) => redirect(&mut a.out, dir),
            Job::Plan(a) => {
                if let Some(r) = a.report.as_mut() {
                    redirect(r, dir);
                }
            }
            Job::Recon(a) => {
                let residuals = a
                    .residuals
                    .clone()
                    .unwrap_or_else(|| default_residuals_path(&a.out));
                a.residuals = Some(residuals);
                redirect(&mut a.out, dir);
                if let Some(r) = a.residuals.as_mut() {
                    redirect(r, dir);
                }
            }
            Job::Export(a) => redirect(&mut a.out, dir),
            Job::Bench(a) => redirect(&mut a.report, dir),
        }
    }

    fn run(&self) -> Result<Outcome> {
        match self {
            Job::Phantom(a) => run_phantom(a),
            Job::Project(a) => run_project(a),
            Job::Plan(a) => run_plan(a),
            Job::Recon(a) => run_recon(a),
            Job::Export(a) => run_export(a),
            Job::Bench(a) => run_bench(a),
        }
    }
}

fn run_phantom(a: &PhantomArgs) -> Result<Outcome> {
    let mut outcome = Outcome::new();
    let kind: PhantomKind = a.kind.parse()?;
    let volume = outcome.time("generate", || {
        let v = generate_phantom(kind, a.size, a.slices, a.seed)?;
        Ok(v.to_dtype(a.dtype.into()))
    })?;
    outcome.time("write", || write_volume(&a.out, &volume))?;
    println!("phantom {:?} -> {}", volume.shape(), a.out.display());
    outcome.outputs.push(a.out.clone());
    Ok(outcome)
}

fn run_project(a: &ProjectArgs) -> Result<Outcome> {
    let mut outcome = Outcome::new();
    let tomogram = read_volume(&a.input)?;
    ensure!(
        tomogram.role() == VolumeRole::Tomogram,
        "{} is not a tomogram",
        a.input.display()
    );
    let expected = [a.geometry.m, a.geometry.n, a.geometry.n];
    ensure!(
        tomogram.shape() == expected,
        "tomogram shape {:?} does not match geometry {} (expected {expected:?})",
        tomogram.shape(),
        a.geometry
    );
    let geometry = scan_geometry(a.geometry, a.angles, a.voxel)?;
    let matrix = outcome.time("matrix", || Ok(build_system_matrix(&geometry)?))?;
    let sinogram = outcome.time("project", || {
        let s = simulate_measurements(&geometry, &matrix, &tomogram, a.noise, a.seed)?;
        Ok(s.to_dtype(a.dtype.into()))
    })?;
    outcome.time("write", || write_volume(&a.out, &sinogram))?;
    println!(
        "sinogram {:?} (nnz {}) -> {}",
        sinogram.shape(),
        matrix.nnz(),
        a.out.display()
    );
    outcome.outputs.push(a.out.clone());
    Ok(outcome)
}

pub fn plan_csv(report: &VolumeReport) -> String {
    let mut out = String::from("level,elements,messages,bytes,inter_node_bytes,time_s\n");
    for (name, v) in [
        ("direct", &report.direct),
        ("socket", &report.socket),
        ("node", &report.node),
        ("global", &report.global),
    ] {
        out.push_str(&format!(
            "{name},{},{},{},{},{:e}\n",
            v.elements, v.messages, v.bytes, v.inter_node_bytes, v.time_s
        ));
    }
    out
}

fn run_plan(a: &PlanArgs) -> Result<Outcome> {
    let mut outcome = Outcome::new();
    let topology = load_topology(a.topology.as_deref())?;
    let geometry = scan_geometry(a.geometry, a.angles, 1.0)?;
    let model = MemoryModel::for_geometry(&geometry, a.precision, a.ffactor);
    let total = topology.total_gpus();
    let (pb, pd) = match (a.pd, a.pb) {
        (PdChoice::Auto, None) => auto_partition(&model, a.mem_cap, total, a.geometry.m)?,
        (PdChoice::Auto, Some(pb)) => (pb, model.min_processes(a.mem_cap)?),
        (PdChoice::Fixed(pd), pb) => (pb.unwrap_or((total / pd).clamp(1, a.geometry.m)), pd),
    };
    if pb == 0 || pb * pd > total {
        return Err(xct_core::error::Error::Oversubscribed {
            requested: pb * pd,
            available: total,
        }
        .into());
    }
    let (k, n) = proxy_dims(a.geometry.k, a.geometry.n, a.proxy_n);
    let proxy = make_geometry(k, 1, n, a.angles.start, a.angles.end)?;
    let op = outcome.time("partition", || {
        let config = OperatorConfig {
            pd,
            pb: 1,
            ffactor: a.ffactor,
            topology,
            ..OperatorConfig::new(a.precision)
        };
        Ok(DistributedOperator::new(&proxy, config)?)
    })?;
    let volume = op.volume_report(0)?;
    let summary = PlanSummary {
        pb,
        pd,
        total_gpus: total,
        mem_cap: a.mem_cap,
        bytes_per_process: model.bytes_per_process(pd),
        estimated_nnz: model.nnz,
        proxy: ((k, n) != (a.geometry.k, a.geometry.n)).then_some((k, n)),
        tile_size: op.tile_size(),
        volume,
    };
    println!("pb={pb} pd={pd} gpus={total}");
    println!(
        "per-process bytes {:.4e} (cap {:.4e}), estimated nnz per slice {:.4e}",
        summary.bytes_per_process, a.mem_cap, summary.estimated_nnz
    );
    if let Some((k, n)) = summary.proxy {
        println!("volumes measured on a {k}x{n} proxy scan");
    }
    println!(
        "inter-node bytes: direct {} hierarchical {} ({:.1}% less)",
        summary.volume.direct.inter_node_bytes,
        summary.volume.global.inter_node_bytes,
        summary.volume.reduction_percent
    );
    if let Some(path) = &a.report {
        fs::write(path, plan_csv(&summary.volume))
            .with_context(|| format!("writing {}", path.display()))?;
        outcome.outputs.push(path.clone());
    }
    outcome.details = Details::Plan(summary);
    Ok(outcome)
}

pub fn residual_csv(history: &[f64]) -> String {
    let mut out = String::from("iteration,relative_residual\n");
    for (i, r) in history.iter().enumerate() {
        out.push_str(&format!("{},{r:e}\n", i + 1));
    }
    out
}

fn run_recon(a: &ReconArgs) -> Result<Outcome> {
    let mut outcome = Outcome::new();
    let sinogram = read_volume(&a.input)?;
    ensure!(
        sinogram.role() == VolumeRole::Sinogram,
        "{} is not a sinogram",
        a.input.display()
    );
    let expected = [a.geometry.m, a.geometry.k, a.geometry.n];
    ensure!(
        sinogram.shape() == expected,
        "sinogram shape {:?} does not match geometry {} (expected {expected:?})",
        sinogram.shape(),
        a.geometry
    );
    let geometry = scan_geometry(a.geometry, a.angles, a.voxel)?;
    let solve_config = SolveConfig::new(a.iters, a.early_stop)?;
    let topology = load_topology(a.topology.as_deref())?;
    let op = outcome.time("setup", || {
        let config = OperatorConfig {
            pd: a.pd,
            pb: a.pb,
            ffactor: a.ffactor,
            hierarchical: a.plan == PlanKind::Hierarchical,
            topology,
            ..OperatorConfig::new(a.precision)
        };
        Ok(DistributedOperator::new(&geometry, config)?)
    })?;
    let solved = outcome.time("solve", || {
        Ok(cgls_solve(&op, sinogram.data(), &solve_config)?)
    })?;
    let n = a.geometry.n;
    let dtype = DType::from(a.precision.vector_precision());
    let tomogram = Volume::new([a.geometry.m, n, n], dtype, VolumeRole::Tomogram, solved.x)?;
    let residuals = a
        .residuals
        .clone()
        .unwrap_or_else(|| default_residuals_path(&a.out));
    outcome.time("write", || {
        write_volume(&a.out, &tomogram)?;
        fs::write(&residuals, residual_csv(&solved.residual_history))
            .with_context(|| format!("writing {}", residuals.display()))
    })?;
    let final_residual = solved.residual_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} iterations ({}), relative residual {final_residual:e} -> {}",
        solved.residual_history.len(),
        a.precision,
        a.out.display()
    );
    outcome.outputs.push(a.out.clone());
    outcome.outputs.push(residuals.clone());
    outcome.details = Details::Recon(ReconSummary {
        iterations: solved.residual_history.len(),
        final_residual,
        counters: solved.counters,
        length_scale: op.length_scale(),
        tile_size: op.tile_size(),
        residual_history: residuals,
        volume: op.volume_report(0)?,
    });
    Ok(outcome)
}

fn run_export(a: &ExportArgs) -> Result<Outcome> {
    let mut outcome = Outcome::new();
    let volume = read_volume(&a.input)?;
    let image = slice_to_pgm(&volume, a.slice)?;
    fs::write(&a.out, image).with_context(|| format!("writing {}", a.out.display()))?;
    println!("slice {} -> {}", a.slice, a.out.display());
    outcome.outputs.push(a.out.clone());
    Ok(outcome)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("ffactor,nnz,stored_entries,flops,bytes,intensity,seconds,gflops\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:e},{:.6}\n",
            r.ffactor, r.nnz, r.stored_entries, r.flops, r.bytes, r.intensity, r.seconds, r.gflops
        ));
    }
    out
}

fn run_bench(a: &BenchArgs) -> Result<Outcome> {
    let mut outcome = Outcome::new();
    ensure!(a.reps > 0, "at least one repetition is required");
    let geometry = scan_geometry(GeometrySpec { m: 1, ..a.geometry }, a.angles, 1.0)?;
    let mut matrix = outcome.time("matrix", || Ok(build_system_matrix(&geometry)?))?;
    if a.precision.is_half_storage() {
        xct_core::matrixstore::rescale_median_to_unit(&mut matrix);
    }
    let blocks = uniform_blocks(matrix.nrows(), DEFAULT_BLOCK_ROWS);
    let mut rows = Vec::new();
    for &f in &a.ffactor_sweep.0 {
        let staged = build_staged(&matrix, a.precision, a.stage_capacity, &blocks, f)?;
        let data: Vec<f64> = (0..matrix.ncols() * f)
            .map(|i| ((i * 7919) % 1000) as f64 / 1000.0)
            .collect();
        let batch = Minibatch::new(f, a.precision, data)?;
        let start = Instant::now();
        for _ in 0..a.reps {
            std::hint::black_box(spmm(&staged, &batch)?);
        }
        let seconds = start.elapsed().as_secs_f64() / a.reps as f64;
        let c = flops_and_bytes(&staged, f, a.precision);
        rows.push(BenchRow {
            ffactor: f,
            nnz: staged.nnz,
            stored_entries: staged.entries.len(),
            flops: c.flops,
            bytes: c.bytes,
            intensity: c.intensity,
            seconds,
            gflops: c.flops as f64 / seconds.max(1e-12) / 1e9,
        });
    }
    if rows.is_empty() {
        bail!("empty fusing-factor sweep");
    }
    fs::write(&a.report, bench_csv(&rows))
        .with_context(|| format!("writing {}", a.report.display()))?;
    println!("{} fusing factors -> {}", rows.len(), a.report.display());
    outcome.outputs.push(a.report.clone());
    outcome.details = Details::Bench(rows);
    Ok(outcome)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Run a job and write its manifest when one was requested.
pub fn execute(job: Job, workers: Option<usize>) -> Result<Manifest> {
    let outcome = with_workers(workers, || job.run())??;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seeds: job.seeds(),
        workers,
        timings: outcome.timings,
        outputs: outcome.outputs,
        details: outcome.details,
        job,
    };
    if let Some(path) = manifest.job.manifest_path() {
        manifest.write(path)?;
    }
    Ok(manifest)
}

pub fn replay(args: &ReplayArgs, workers: Option<usize>) -> Result<Manifest> {
    let recorded = Manifest::read(&args.manifest)?;
    let mut job = recorded.job;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        job.redirect_outputs(dir);
    }
    execute(job, workers.or(recorded.workers))
}

pub fn run(cli: Cli) -> Result<Manifest> {
    let job = match cli.command {
        Command::Replay(args) => return replay(&args, cli.workers),
        Command::Phantom(a) => Job::Phantom(a),
        Command::Project(a) => Job::Project(a),
        Command::Plan(a) => Job::Plan(a),
        Command::Recon(a) => Job::Recon(a),
        Command::Export(a) => Job::Export(a),
        Command::Bench(a) => Job::Bench(a),
    };
    execute(job, cli.workers)
}
