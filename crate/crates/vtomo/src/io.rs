//! On-disk formats.
//!
//! Volumes and stacks are raw little-endian `f32` payloads with a JSON
//! header next to them, named by appending `.json` to the payload path
//! (`ct.vol` + `ct.vol.json`). Volume payloads are x-fastest; stacks are
//! `(view, v, u)` and top-k stacks `(view, channel, v, u)`, u fastest.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vtomo_core::metrics::{ImageQualityReport, SegmentationReport};
use vtomo_core::phantom::CenterlineGraph;
use vtomo_core::postprocess::Labeling;
use vtomo_core::projection::to_gray8;
use vtomo_core::reconstruction::OptimizerTrace;
use vtomo_core::{ProjectionGeometry, ProjectionStack, TopKStack, Volume, VolumeKind};

use crate::{Error, Result};

pub const DTYPE: &str = "f32";
pub const ORDER: &str = "little";

pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
    pub dtype: String,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub n_views: usize,
    pub nu: usize,
    pub nv: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub geometry: ProjectionGeometry,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_f32(data: &[f32], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for x in data {
        w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    finish(w, path)
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header implies {} f32 values ({} bytes)",
                bytes.len(),
                expected,
                expected * 4
            ),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

fn check_tags(dtype: &str, order: &str, header: &Path) -> Result<()> {
    if dtype != DTYPE {
        return Err(Error::format(header, format!("unknown dtype {dtype:?}")));
    }
    if order != ORDER {
        return Err(Error::format(header, format!("unsupported byte order {order:?}")));
    }
    Ok(())
}

/// Header JSON or a format error naming the missing file.
fn read_header<T: DeserializeOwned>(payload: &Path) -> Result<T> {
    let h = header_path(payload);
    if !h.exists() {
        return Err(Error::format(payload, format!("missing header {}", h.display())));
    }
    read_json(&h)
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let header =
        VolumeHeader { dims: v.dims(), spacing: v.spacing(), kind: v.kind(), dtype: DTYPE.into(), order: ORDER.into() };
    write_f32(v.data(), path)?;
    write_json(&header, &header_path(path))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let h: VolumeHeader = read_header(path)?;
    check_tags(&h.dtype, &h.order, &header_path(path))?;
    let n = h.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.filter(|&n| n > 0).ok_or_else(|| Error::format(path, format!("bad dims {:?}", h.dims)))?;
    let data = read_f32(path, n)?;
    if h.kind == VolumeKind::BinaryMask {
        if let Some(i) = data.iter().position(|x| x.is_nan()) {
            return Err(Error::format(path, format!("NaN at voxel {i} in a mask")));
        }
    }
    Volume::new(h.dims, h.spacing, h.kind, data).map_err(|e| Error::format(path, e.to_string()))
}

fn stack_header(g: &ProjectionGeometry, k: Option<usize>) -> StackHeader {
    StackHeader { n_views: g.n_views, nu: g.nu(), nv: g.nv(), k, geometry: g.clone() }
}

fn load_stack_parts(path: &Path) -> Result<(StackHeader, Vec<f32>)> {
    let h: StackHeader = read_header(path)?;
    let g = &h.geometry;
    if (h.n_views, h.nu, h.nv) != (g.n_views, g.nu(), g.nv()) {
        return Err(Error::format(path, "header shape disagrees with its geometry"));
    }
    g.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let n = g.n_rays() * h.k.unwrap_or(1);
    Ok((h.clone(), read_f32(path, n)?))
}

pub fn save_stack(s: &ProjectionStack, path: &Path) -> Result<()> {
    write_f32(s.data(), path)?;
    write_json(&stack_header(s.geometry(), None), &header_path(path))
}

pub fn load_stack(path: &Path) -> Result<ProjectionStack> {
    let (h, data) = load_stack_parts(path)?;
    if h.k.is_some() {
        return Err(Error::format(path, "expected an integral projection stack, found a top-k stack"));
    }
    ProjectionStack::new(h.geometry, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_topk(s: &TopKStack, path: &Path) -> Result<()> {
    write_f32(s.data(), path)?;
    write_json(&stack_header(s.geometry(), Some(s.k())), &header_path(path))
}

pub fn load_topk(path: &Path) -> Result<TopKStack> {
    let (h, data) = load_stack_parts(path)?;
    let k = h.k.ok_or_else(|| Error::format(path, "expected a top-k stack, header has no k"))?;
    TopKStack::new(h.geometry, k, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_geometry(path: &Path) -> Result<ProjectionGeometry> {
    let g: ProjectionGeometry = read_json(path)?;
    g.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(g)
}

/// 8-bit grayscale image, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    /// Min-max normalized detector image with `v` pointing up.
    pub fn from_detector(image: &[f32], nu: usize, nv: usize) -> Self {
        let g = to_gray8(image);
        let mut pixels = Vec::with_capacity(g.len());
        for row in g.chunks_exact(nu).rev() {
            pixels.extend_from_slice(row);
        }
        debug_assert_eq!(pixels.len(), nu * nv);
        Self { width: nu, height: nv, pixels }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// PNG when the extension is `png`, binary PGM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            image::save_buffer(path, &self.pixels, self.width as u32, self.height as u32, image::ColorType::L8)
                .map_err(|e| Error::format(path, e.to_string()))
        } else {
            let mut w = create(path)?;
            w.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))?;
            finish(w, path)
        }
    }
}

fn check_view(view: usize, n_views: usize) -> Result<()> {
    if view >= n_views {
        return Err(vtomo_core::Error::ViewOutOfRange { index: view, n_views }.into());
    }
    Ok(())
}

pub fn export_view(stack: &ProjectionStack, view: usize, path: &Path) -> Result<()> {
    check_view(view, stack.n_views())?;
    Gray8::from_detector(stack.view(view), stack.nu(), stack.nv()).save(path)
}

pub fn export_topk_channel(stack: &TopKStack, view: usize, channel: usize, path: &Path) -> Result<()> {
    check_view(view, stack.n_views())?;
    if channel >= stack.k() {
        return Err(Error::Usage(format!("channel {channel} out of range for k = {}", stack.k())));
    }
    let g = stack.geometry();
    Gray8::from_detector(stack.channel(view, channel), g.nu(), g.nv()).save(path)
}

pub fn write_trace_csv(trace: &OptimizerTrace, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "iteration,residual,step_size").map_err(io)?;
    for e in &trace.entries {
        writeln!(w, "{},{:e},{:e}", e.iteration, e.residual, e.step_size).map_err(io)?;
    }
    finish(w, path)
}

pub fn write_components_csv(labels: &Labeling, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "label,size,centroid_x,centroid_y,centroid_z").map_err(io)?;
    for c in &labels.components {
        let [x, y, z] = c.centroid;
        writeln!(w, "{},{},{:.4},{:.4},{:.4}", c.label, c.size, x, y, z).map_err(io)?;
    }
    finish(w, path)
}

pub fn write_centerline(graph: &CenterlineGraph, path: &Path) -> Result<()> {
    write_json(graph, path)
}

/// Flat metric record as written by `metrics` and the pipeline. PSNR of
/// identical images is written as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dsc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cldice: Option<f64>,
    pub iou: f64,
    pub sen: f64,
    pub spe: f64,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<ImageQualityReport>,
}

impl MetricsRecord {
    pub fn new(seg: &SegmentationReport, quality: Option<ImageQualityReport>) -> Self {
        Self { dsc: seg.dsc, cldice: seg.cldice, iou: seg.iou, sen: seg.sensitivity, spe: seg.specificity, quality }
    }

    /// One line in percent with two decimals, e.g. `DSC 92.31% clDice 90.02% ...`.
    pub fn summary(&self) -> String {
        let pct = |x: f64| format!("{:.2}%", 100.0 * x);
        let mut s = format!("DSC {}", pct(self.dsc));
        if let Some(c) = self.cldice {
            s += &format!(" clDice {}", pct(c));
        }
        s += &format!(" IoU {} Sen {} Spe {}", pct(self.iou), pct(self.sen), pct(self.spe));
        if let Some(q) = &self.quality {
            s += &format!(" PSNR {:.2} dB SSIM {:.4}", q.psnr, q.ssim);
        }
        s
    }
}
