//! `vtomo` subcommands.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vtomo_core::geometry::Grid;
use vtomo_core::metrics::{full_report, stack_quality};
use vtomo_core::phantom::{generate_ct_like, generate_vessel_tree, PhantomConfig};
use vtomo_core::postprocess::{connected_components, segment, Cleanup, Connectivity, SegmentationConfig};
use vtomo_core::projection::{integral_projection_with, topk_mip_with};
use vtomo_core::reconstruction::{fbp, suppress_artifacts, FbpConfig, FilterKind, OptimizerConfig, StepSize};
use vtomo_core::{ProjectionGeometry, SliceProjector};

use crate::io::{self, MetricsRecord};
use crate::pipeline::{run_estimator_from_files, run_pipeline, PipelineConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "vtomo", version, about = "Projection-domain vessel segmentation toolkit")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a vessel-tree mask, CT-like volume and centerline.
    Phantom(PhantomArgs),
    /// Integral projections of a volume.
    ProjectIp(ProjectArgs),
    /// Top-k maximum intensity projections of a volume.
    ProjectTopk(TopkArgs),
    /// Filtered back projection of a projection stack.
    Fbp(FbpArgs),
    /// Least-squares refinement of a volume against a projection stack.
    Optimize(OptimizeArgs),
    /// Percentile threshold plus connected-component cleanup.
    Segment(SegmentArgs),
    /// Segmentation scores (and optionally projection quality) as JSON.
    Metrics(MetricsArgs),
    /// Run an IP estimator on a top-k stack.
    Estimate(EstimateArgs),
    /// The whole chain from a JSON config.
    Pipeline(PipelineArgs),
    /// Write one view of a stack as PGM or PNG.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// JSON phantom config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f32>,
    /// Vessel mask output (.vol).
    #[arg(long)]
    pub mask: PathBuf,
    /// CT-like volume output (.vol).
    #[arg(long)]
    pub ct: PathBuf,
    /// Centerline graph output (.json).
    #[arg(long)]
    pub centerline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    /// JSON geometry; flags override it. Defaults to 180 views over 0..180°
    /// and a max(dims)² detector.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub angle_start: Option<f64>,
    #[arg(long)]
    pub angle_step: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["NU", "NV"])]
    pub detector: Option<Vec<usize>>,
    #[arg(long, num_args = 2, value_names = ["DU", "DV"])]
    pub detector_spacing: Option<Vec<f64>>,
}

impl GeometryArgs {
    pub fn resolve(&self, dims: [usize; 3]) -> Result<ProjectionGeometry> {
        let mut g = match &self.geometry {
            Some(p) => io::load_geometry(p)?,
            None => ProjectionGeometry::for_dims(dims),
        };
        if let Some(n) = self.views {
            g.n_views = n;
            if self.angle_step.is_none() && self.geometry.is_none() {
                g.angle_step_deg = 180.0 / n.max(1) as f64;
            }
        }
        if let Some(a) = self.angle_start {
            g.angle_start_deg = a;
        }
        if let Some(a) = self.angle_step {
            g.angle_step_deg = a;
        }
        if let Some(d) = &self.detector {
            g.detector = [d[0], d[1]];
        }
        if let Some(s) = &self.detector_spacing {
            g.detector_spacing = [s[0], s[1]];
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Args)]
pub struct TopkArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_K)]
    pub k: usize,
    /// Min-max normalize the volume to [0, 1] first.
    #[arg(long)]
    pub normalize: bool,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FilterArg {
    RamLak,
    Hann,
    None,
}

impl From<FilterArg> for FilterKind {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::RamLak => FilterKind::RamLak,
            FilterArg::Hann => FilterKind::Hann,
            FilterArg::None => FilterKind::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct FbpArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output grid (default: nu × nu × nv).
    #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "ram-lak")]
    pub filter: FilterArg,
    /// Fraction of the Nyquist band kept.
    #[arg(long, default_value_t = 1.0)]
    pub cutoff: f64,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Target projection stack.
    #[arg(long)]
    pub target: PathBuf,
    /// Starting volume.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Fixed step size instead of the power-iteration estimate.
    #[arg(long)]
    pub step: Option<f64>,
    /// Residual trace output (.csv).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    /// 6, 18 or 26.
    #[arg(long, default_value_t = 26)]
    pub connectivity: usize,
    /// Drop components smaller than this (default: 50 voxels at 256³, scaled
    /// by voxel count, at least 8).
    #[arg(long, conflicts_with = "keep_largest")]
    pub min_size: Option<usize>,
    #[arg(long)]
    pub keep_largest: Option<usize>,
    /// Component table output (.csv).
    #[arg(long)]
    pub components: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Projection stacks to add PSNR and SSIM.
    #[arg(long, requires = "gt_stack")]
    pub pred_stack: Option<PathBuf>,
    #[arg(long, requires = "pred_stack")]
    pub gt_stack: Option<PathBuf>,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Top-k condition stack.
    #[arg(long)]
    pub cond: PathBuf,
    /// `oracle:gt=PATH`, `noisy-oracle:sigma=S,seed=N,gt=PATH`,
    /// `noisy-oracle:sigma_rel=F,...` or `topk-sum:alpha=A`.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub ct: Option<PathBuf>,
    #[arg(long)]
    pub vessel: Option<PathBuf>,
    #[arg(long)]
    pub liver_mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Integral projection or top-k stack.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Channel of a top-k stack.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// `.png` for PNG, anything else for binary PGM.
    #[arg(long)]
    pub out: PathBuf,
}

fn dims3(v: &[usize]) -> [usize; 3] {
    [v[0], v[1], v[2]]
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => io::read_json::<PhantomConfig>(p)?,
        None => PhantomConfig::for_dims(a.dims.as_deref().map_or([64; 3], dims3)),
    };
    if let (Some(d), Some(_)) = (&a.dims, &a.config) {
        cfg.dims = dims3(d);
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.depth = a.depth.unwrap_or(cfg.depth);
    cfg.noise_sigma = a.noise_sigma.unwrap_or(cfg.noise_sigma);
    let tree = generate_vessel_tree(&cfg)?;
    let ct = generate_ct_like(&tree.mask, &cfg)?;
    io::save_volume(&tree.mask, &a.mask)?;
    io::save_volume(&ct, &a.ct)?;
    if let Some(p) = &a.centerline {
        io::write_centerline(&tree.centerline, p)?;
    }
    if tree.clipped {
        eprintln!("warning: the tree reaches past the volume boundary");
    }
    Ok(())
}

fn projector_for(input: &Path, g: &GeometryArgs) -> Result<(vtomo_core::Volume, SliceProjector)> {
    let v = io::load_volume(input)?;
    let geometry = g.resolve(v.dims())?;
    let p = SliceProjector::new(&geometry, &Grid::new(v.dims(), v.spacing())?)?;
    Ok((v, p))
}

fn cmd_project_ip(a: &ProjectArgs) -> Result<()> {
    let (v, p) = projector_for(&a.input, &a.geometry)?;
    io::save_stack(&integral_projection_with(&p, &v)?, &a.out)
}

fn cmd_project_topk(a: &TopkArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let (mut v, p) = projector_for(&a.input, &a.geometry)?;
    if a.normalize {
        v = v.min_max_normalized();
    }
    io::save_topk(&topk_mip_with(&p, &v, a.k)?, &a.out)
}

fn cmd_fbp(a: &FbpArgs) -> Result<()> {
    let stack = io::load_stack(&a.input)?;
    let dims = a.dims.as_deref().map_or([stack.nu(), stack.nu(), stack.nv()], dims3);
    let cfg = FbpConfig { filter: a.filter.into(), cutoff: a.cutoff };
    let p = SliceProjector::new(stack.geometry(), &Grid::unit(dims)?)?;
    io::save_volume(&fbp(&stack, &p, &cfg)?, &a.out)
}

fn cmd_optimize(a: &OptimizeArgs) -> Result<()> {
    let target = io::load_stack(&a.target)?;
    let init = io::load_volume(&a.init)?;
    let cfg = OptimizerConfig {
        n_iterations: a.iterations,
        step: a.step.map_or(StepSize::PowerIteration, StepSize::Fixed),
        ..OptimizerConfig::default()
    };
    let p = SliceProjector::new(target.geometry(), &Grid::new(init.dims(), init.spacing())?)?;
    match suppress_artifacts(&target, &p, &init, &cfg) {
        Ok((v, trace)) => {
            io::save_volume(&v, &a.out)?;
            if let Some(t) = &a.trace {
                io::write_trace_csv(&trace, t)?;
            }
            Ok(())
        }
        Err(vtomo_core::Error::Diverged { iteration, trace }) => {
            if let Some(t) = &a.trace {
                io::write_trace_csv(&trace, t)?;
            }
            Err(vtomo_core::Error::Diverged { iteration, trace }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let v = io::load_volume(&a.input)?;
    let connectivity = Connectivity::from_count(a.connectivity)
        .ok_or_else(|| Error::Usage(format!("connectivity must be 6, 18 or 26, got {}", a.connectivity)))?;
    let cleanup = match (a.min_size, a.keep_largest) {
        (_, Some(n)) => Cleanup::KeepLargest(n),
        (Some(n), None) => Cleanup::MinSize(n),
        (None, None) => Cleanup::scaled_min_size(v.dims()),
    };
    let cfg = SegmentationConfig { percentile: a.percentile, connectivity, cleanup };
    let seg = segment(&v, &cfg)?;
    io::save_volume(&seg, &a.out)?;
    if let Some(p) = &a.components {
        io::write_components_csv(&connected_components(&seg, connectivity)?, p)?;
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let pred = io::load_volume(&a.pred)?.into_mask()?;
    let gt = io::load_volume(&a.gt)?.into_mask()?;
    let seg = full_report(&pred, &gt)?;
    let quality = match (&a.pred_stack, &a.gt_stack) {
        (Some(p), Some(g)) => Some(stack_quality(&io::load_stack(p)?, &io::load_stack(g)?, None)?),
        _ => None,
    };
    let record = MetricsRecord::new(&seg, quality);
    eprintln!("{}", record.summary());
    match &a.out {
        Some(p) => io::write_json(&record, p),
        None => {
            let text = serde_json::to_string_pretty(&record).expect("metrics serialize");
            writeln!(std::io::stdout(), "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

fn cmd_pipeline(a: &PipelineArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &a.out_dir {
        cfg.output_dir = d.clone();
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.k = a.k.unwrap_or(cfg.k);
    if let Some(e) = &a.estimator {
        cfg.estimator = e.clone();
    }
    if let Some(n) = a.iterations {
        cfg.reconstruction.optimizer.n_iterations = n;
    }
    for (slot, flag) in
        [(&mut cfg.inputs.ct, &a.ct), (&mut cfg.inputs.vessel, &a.vessel), (&mut cfg.inputs.liver_mask, &a.liver_mask)]
    {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    let manifest = with_workers(cfg.workers, || run_pipeline(&cfg))?;
    if let Some(m) = &manifest.metrics {
        eprintln!("{}", m.summary());
    }
    eprintln!("manifest: {}", cfg.output_dir.join("manifest.json").display());
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let header: io::StackHeader = io::read_json(&io::header_path(&a.input))?;
    if header.k.is_some() {
        io::export_topk_channel(&io::load_topk(&a.input)?, a.view, a.channel, &a.out)
    } else {
        io::export_view(&io::load_stack(&a.input)?, a.view, &a.out)
    }
}

/// Runs `f` in a dedicated pool of `workers` threads, or the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(0) => Err(Error::Usage("workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?
            .install(f),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pipeline(a) => cmd_pipeline(a, cli.workers),
        other => with_workers(cli.workers, || match other {
            Command::Phantom(a) => cmd_phantom(a),
            Command::ProjectIp(a) => cmd_project_ip(a),
            Command::ProjectTopk(a) => cmd_project_topk(a),
            Command::Fbp(a) => cmd_fbp(a),
            Command::Optimize(a) => cmd_optimize(a),
            Command::Segment(a) => cmd_segment(a),
            Command::Metrics(a) => cmd_metrics(a),
            Command::Estimate(a) => run_estimator_from_files(&a.cond, &a.spec, &a.out),
            Command::Export(a) => cmd_export(a),
            Command::Pipeline(_) => unreachable!(),
        }),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
