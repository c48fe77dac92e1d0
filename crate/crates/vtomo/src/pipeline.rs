//! End-to-end runs and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use vtomo_core::estimator::EstimatorSpec;
use vtomo_core::geometry::{forward_apply, Grid};
use vtomo_core::metrics::{full_report, stack_quality, ImageQualityReport};
use vtomo_core::phantom::{generate_ct_like, generate_vessel_tree, PhantomConfig};
use vtomo_core::postprocess::{connected_components, segment, SegmentationConfig};
use vtomo_core::projection::{integral_projection_with, topk_mip_with};
use vtomo_core::reconstruction::{initial_volume, suppress_artifacts, CtScaling, ReconstructionConfig};
use vtomo_core::volume::{apply_mask, resample};
use vtomo_core::{ProjectionGeometry, ProjectionStack, SliceProjector, Volume};

use crate::io::{self, MetricsRecord};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub ct: Option<PathBuf>,
    /// Ground-truth vessel mask.
    pub vessel: Option<PathBuf>,
    /// Region of interest applied to the CT.
    pub liver_mask: Option<PathBuf>,
}

/// Everything a pipeline run depends on. Optional sections take
/// dims-dependent defaults once the working grid is known.
///
/// Without `inputs.ct`, a phantom is generated from `phantom` using the
/// top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub inputs: Inputs,
    pub phantom: Option<PhantomConfig>,
    /// Resample loaded inputs to this grid first. Also the phantom size
    /// when there is no `phantom` section.
    pub working_dims: Option<[usize; 3]>,
    pub geometry: Option<ProjectionGeometry>,
    pub k: usize,
    /// Scaling of the CT before the top-k MIP condition is taken.
    pub condition_scaling: CtScaling,
    pub estimator: String,
    pub reconstruction: ReconstructionConfig,
    pub segmentation: Option<SegmentationConfig>,
    /// Views written as PGM images.
    pub export_views: Vec<usize>,
    pub output_dir: PathBuf,
    /// Thread count; the rayon default when absent.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            inputs: Inputs::default(),
            phantom: None,
            working_dims: None,
            geometry: None,
            k: DEFAULT_K,
            condition_scaling: CtScaling::MinMax,
            estimator: "oracle".into(),
            reconstruction: ReconstructionConfig::default(),
            segmentation: None,
            export_views: vec![0, 90],
            output_dir: PathBuf::from("out"),
            workers: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative input paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.inputs.ct, &mut cfg.inputs.vessel, &mut cfg.inputs.liver_mask].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Usage("k must be at least 1".into()));
        }
        for p in [&self.inputs.ct, &self.inputs.vessel, &self.inputs.liver_mask].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::format(p, "input file does not exist"));
            }
        }
        if self.inputs.ct.is_none() && self.inputs.vessel.is_some() {
            return Err(Error::Usage("a vessel mask without a CT volume; give both or neither".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Usage("workers must be at least 1".into()));
        }
        EstimatorSpec::parse(&self.estimator)?.build()?;
        self.reconstruction.optimizer.validate()?;
        self.reconstruction.fbp.validate()?;
        Ok(())
    }

    /// Fills dims-dependent defaults for a working grid of `dims`.
    pub fn resolved(&self, dims: [usize; 3]) -> Self {
        let mut c = self.clone();
        if c.inputs.ct.is_none() {
            let p = c.phantom.take().unwrap_or_else(|| PhantomConfig::for_dims(c.working_dims.unwrap_or(dims)));
            c.phantom = Some(PhantomConfig { seed: c.seed, ..p });
        }
        c.geometry.get_or_insert_with(|| ProjectionGeometry::for_dims(dims));
        c.segmentation.get_or_insert_with(|| SegmentationConfig::for_dims(dims));
        c
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash of the semantically meaningful configuration: the resolved config
/// minus output location and worker count, with input paths replaced by the
/// digests of their contents. serde_json orders object keys, so the
/// serialization is canonical.
pub fn config_hash(resolved: &PipelineConfig, input_digests: &BTreeMap<String, String>) -> String {
    let mut v = serde_json::to_value(resolved).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    obj.remove("output_dir");
    obj.remove("workers");
    obj.remove("inputs");
    obj.insert("input_digests".into(), serde_json::to_value(input_digests).expect("digests serialize"));
    sha256_hex(v.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub rays: usize,
    pub views: usize,
    pub ip_rays_per_sec: f64,
    pub ip_views_per_sec: f64,
    pub topk_rays_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSummary {
    pub iterations: usize,
    pub step_size: f64,
    pub initial_residual: f64,
    pub final_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written to `manifest.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub config: Value,
    pub inputs: BTreeMap<String, InputRecord>,
    pub generated_phantom: bool,
    pub outputs: BTreeMap<String, PathBuf>,
    pub workers: usize,
    pub stages: Vec<StageTiming>,
    pub throughput: Throughput,
    pub optimizer: OptimizerSummary,
    /// Segmentation and re-projection scores; absent without a vessel mask.
    pub metrics: Option<MetricsRecord>,
    /// Re-projection scores of the optimizer's starting volume.
    pub quality_before: Option<ImageQualityReport>,
}

struct Stopwatch {
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let seconds = t.elapsed().as_secs_f64();
        log::info!("{name}: {seconds:.3} s");
        self.stages.push(StageTiming { name: name.into(), seconds });
        Ok(out)
    }

    fn last(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.seconds)
    }
}

fn per_sec(n: usize, s: f64) -> f64 {
    if s > 0.0 {
        n as f64 / s
    } else {
        0.0
    }
}

/// Runs the whole chain in the current rayon pool and writes every
/// intermediate product plus `manifest.json` under `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut outputs = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    let mut sw = Stopwatch { stages: Vec::new() };
    let save_vol = |name: &str, v: &Volume, outputs: &mut BTreeMap<String, PathBuf>| -> Result<()> {
        let p = out.join(format!("{name}.vol"));
        io::save_volume(v, &p)?;
        outputs.insert(name.to_string(), p);
        Ok(())
    };

    // inputs
    let (ct, vessel, resolved) = sw.time("load", || {
        let Some(ct_path) = &cfg.inputs.ct else {
            let dims = cfg.phantom.as_ref().map_or(cfg.working_dims.unwrap_or([64; 3]), |p| p.dims);
            let resolved = cfg.resolved(dims);
            let pcfg = resolved.phantom.as_ref().expect("resolved phantom");
            let tree = generate_vessel_tree(pcfg)?;
            let ct = generate_ct_like(&tree.mask, pcfg)?;
            io::write_centerline(&tree.centerline, &out.join("centerline.json"))?;
            return Ok((ct, Some(tree.mask), resolved));
        };
        let mut ct = io::load_volume(ct_path)?;
        inputs.insert("ct".to_string(), InputRecord { path: ct_path.clone(), sha256: file_sha256(ct_path)? });
        let mut vessel = match &cfg.inputs.vessel {
            Some(p) => {
                inputs.insert("vessel".to_string(), InputRecord { path: p.clone(), sha256: file_sha256(p)? });
                Some(io::load_volume(p)?.into_mask()?)
            }
            None => None,
        };
        if let Some(p) = &cfg.inputs.liver_mask {
            inputs.insert("liver_mask".to_string(), InputRecord { path: p.clone(), sha256: file_sha256(p)? });
            ct = apply_mask(&ct, &io::load_volume(p)?)?;
        }
        if let Some(d) = cfg.working_dims {
            ct = resample(&ct, d)?;
            vessel = vessel.map(|v| resample(&v, d)).transpose()?;
        }
        let dims = ct.dims();
        Ok((ct, vessel, cfg.resolved(dims)))
    })?;
    let generated = cfg.inputs.ct.is_none();
    if generated {
        save_vol("ct", &ct, &mut outputs)?;
        if let Some(v) = &vessel {
            save_vol("vessel", v, &mut outputs)?;
        }
        outputs.insert("centerline".into(), out.join("centerline.json"));
    }
    if let Some(v) = &vessel {
        if v.dims() != ct.dims() {
            return Err(vtomo_core::Error::DimMismatch { left: ct.dims(), right: v.dims() }.into());
        }
    }
    let geometry = resolved.geometry.clone().expect("resolved geometry");
    let seg_cfg = resolved.segmentation.expect("resolved segmentation");
    let digests: BTreeMap<String, String> = inputs.iter().map(|(k, r)| (k.clone(), r.sha256.clone())).collect();
    let hash = config_hash(&resolved, &digests);

    let projector = sw.time("setup", || Ok(SliceProjector::new(&geometry, &Grid::new(ct.dims(), ct.spacing())?)?))?;
    let rays = geometry.n_rays();

    let gt_ip = match &vessel {
        Some(v) => {
            Some(sw.time("ground_truth_ip", || Ok(integral_projection_with(&projector, &v.clone().into_intensity())?))?)
        }
        None => None,
    };
    let ip_secs = sw.last();
    let topk = sw.time("topk_mip", || {
        let cond = match resolved.condition_scaling {
            CtScaling::MinMax => ct.min_max_normalized(),
            CtScaling::Raw => ct.clone(),
        };
        Ok(topk_mip_with(&projector, &cond, resolved.k)?)
    })?;
    let topk_secs = sw.last();

    let spec = EstimatorSpec::parse(&resolved.estimator)?;
    let estimate = sw.time("estimate", || {
        let est = spec.build()?;
        let gt_file = spec.get("gt").map(|p| io::load_stack(Path::new(p))).transpose()?;
        let ctx = gt_file.as_ref().or(gt_ip.as_ref());
        if est.capabilities().requires_ground_truth && ctx.is_none() {
            return Err(Error::Usage(format!("estimator {:?} needs a vessel mask or gt=PATH", est.name())));
        }
        Ok(est.estimate(&topk, ctx)?)
    })?;

    let init = initial_volume(&estimate, &projector, &ct, &resolved.reconstruction)?;
    let (recon, trace) = sw.time("optimize", || {
        Ok(suppress_artifacts(&estimate, &projector, &init, &resolved.reconstruction.optimizer)?)
    })?;
    let (seg, labels) = sw.time("segment", || {
        let seg = segment(&recon, &seg_cfg)?;
        let labels = connected_components(&seg, seg_cfg.connectivity)?;
        Ok((seg, labels))
    })?;
    let reproj = forward_apply(&projector, &recon)?;

    let (metrics, quality_before) = match (&vessel, &gt_ip) {
        (Some(v), Some(gt)) => sw.time("metrics", || {
            let seg_report = full_report(&seg, v)?;
            let after = stack_quality(&reproj, gt, None)?;
            let before = stack_quality(&forward_apply(&projector, &init)?, gt, None)?;
            Ok((Some(MetricsRecord::new(&seg_report, Some(after))), Some(before)))
        })?,
        _ => (None, None),
    };

    sw.time("write", || {
        let mut stack = |name: &str, s: &ProjectionStack| -> Result<()> {
            let p = out.join(format!("{name}.stk"));
            io::save_stack(s, &p)?;
            outputs.insert(name.to_string(), p);
            for &view in &resolved.export_views {
                if view < s.n_views() {
                    io::export_view(s, view, &out.join("views").join(format!("{name}_{view:03}.pgm")))?;
                }
            }
            Ok(())
        };
        if let Some(gt) = &gt_ip {
            stack("ground_truth_ip", gt)?;
        }
        stack("estimate", &estimate)?;
        stack("reprojection", &reproj)?;
        let tp = out.join("topk.stk");
        io::save_topk(&topk, &tp)?;
        outputs.insert("topk".into(), tp);
        for &view in &resolved.export_views {
            if view < topk.n_views() {
                io::export_topk_channel(&topk, view, 0, &out.join("views").join(format!("topk_{view:03}.pgm")))?;
            }
        }
        let mut save = |name: &str, v: &Volume| -> Result<()> {
            let p = out.join(format!("{name}.vol"));
            io::save_volume(v, &p)?;
            outputs.insert(name.to_string(), p);
            Ok(())
        };
        save("reconstruction", &recon)?;
        save("segmentation", &seg)?;
        let p = out.join("trace.csv");
        io::write_trace_csv(&trace, &p)?;
        outputs.insert("trace".into(), p);
        let p = out.join("components.csv");
        io::write_components_csv(&labels, &p)?;
        outputs.insert("components".into(), p);
        if let Some(m) = &metrics {
            let p = out.join("metrics.json");
            io::write_json(m, &p)?;
            outputs.insert("metrics".into(), p);
        }
        Ok(())
    })?;

    let manifest = Manifest {
        tool: "vtomo".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        config: serde_json::to_value(&resolved).expect("config serializes"),
        inputs,
        generated_phantom: generated,
        outputs,
        workers: rayon::current_num_threads(),
        stages: sw.stages,
        throughput: Throughput {
            rays,
            views: geometry.n_views,
            ip_rays_per_sec: per_sec(rays, ip_secs),
            ip_views_per_sec: per_sec(geometry.n_views, ip_secs),
            topk_rays_per_sec: per_sec(rays, topk_secs),
        },
        optimizer: OptimizerSummary {
            iterations: trace.entries.len().saturating_sub(1),
            step_size: trace.entries.last().map_or(0.0, |e| e.step_size),
            initial_residual: trace.initial_residual().unwrap_or(0.0),
            final_residual: trace.final_residual().unwrap_or(0.0),
        },
        metrics,
        quality_before,
    };
    io::write_json(&manifest, &out.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads a top-k stack, runs the estimator named by `spec`, writes the
/// estimated stack. A `gt=PATH` parameter is loaded as the context stack.
pub fn run_estimator_from_files(cond: &Path, spec: &str, out: &Path) -> Result<()> {
    let spec = EstimatorSpec::parse(spec)?;
    let est = spec.build()?;
    let cond = io::load_topk(cond)?;
    let gt = spec.get("gt").map(|p| io::load_stack(Path::new(p))).transpose()?;
    if est.capabilities().requires_ground_truth && gt.is_none() {
        return Err(Error::Usage(format!("estimator {:?} needs gt=PATH", est.name())));
    }
    let estimate = est.estimate(&cond, gt.as_ref())?;
    io::save_stack(&estimate, out)
}
