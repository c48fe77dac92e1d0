//! Segmentation overlap metrics, centerline Dice, PSNR and SSIM.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::postprocess::Connectivity;
use crate::{Error, ProjectionStack, Result, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub dsc: f64,
    pub iou: f64,
    #[serde(rename = "sen")]
    pub sensitivity: f64,
    #[serde(rename = "spe")]
    pub specificity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cldice: Option<f64>,
    pub counts: Confusion,
}

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch { left: a.dims(), right: b.dims() });
    }
    if !a.is_mask() || !b.is_mask() {
        return Err(Error::NotBinary("segmentation metrics need masks".into()));
    }
    Ok(())
}

pub fn confusion(pred: &Volume, gt: &Volume) -> Result<Confusion> {
    check_pair(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// Metrics from counts. Ratios with an empty denominator are 1 (nothing
    /// to get wrong), except that sensitivity is 0 when the ground truth is
    /// empty but the prediction is not.
    pub fn report(&self) -> SegmentationReport {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 1.0 };
        let sensitivity = if tp + fn_ > 0.0 {
            tp / (tp + fn_)
        } else if fp > 0.0 {
            0.0
        } else {
            1.0
        };
        SegmentationReport {
            dsc: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            sensitivity,
            specificity: ratio(tn, tn + fp),
            cldice: None,
            counts: *self,
        }
    }
}

/// DSC, IoU, sensitivity and specificity of `pred` against `gt`.
pub fn segmentation_metrics(pred: &Volume, gt: &Volume) -> Result<SegmentationReport> {
    Ok(confusion(pred, gt)?.report())
}

/// [`segmentation_metrics`] plus clDice.
pub fn full_report(pred: &Volume, gt: &Volume) -> Result<SegmentationReport> {
    let mut r = segmentation_metrics(pred, gt)?;
    r.cldice = Some(cl_dice(pred, gt)?);
    Ok(r)
}

// ---------------------------------------------------------------------------
// Skeletonization

/// Foreground bits of the 3×3×3 neighbourhood, bit `(dx+1) + 3(dy+1) + 9(dz+1)`.
fn neighbourhood(data: &[u8], dims: [usize; 3], i: usize, j: usize, k: usize) -> u32 {
    let mut bits = 0u32;
    for dz in 0..3 {
        let z = k as isize + dz as isize - 1;
        if z < 0 || z >= dims[2] as isize {
            continue;
        }
        for dy in 0..3 {
            let y = j as isize + dy as isize - 1;
            if y < 0 || y >= dims[1] as isize {
                continue;
            }
            for dx in 0..3 {
                let x = i as isize + dx as isize - 1;
                if x < 0 || x >= dims[0] as isize {
                    continue;
                }
                if data[x as usize + dims[0] * (y as usize + dims[1] * z as usize)] != 0 {
                    bits |= 1 << (dx + 3 * dy + 9 * dz);
                }
            }
        }
    }
    bits
}

const CENTER: usize = 13;

fn pos(b: usize) -> [isize; 3] {
    [(b % 3) as isize - 1, ((b / 3) % 3) as isize - 1, (b / 9) as isize - 1]
}

fn adjacent(a: usize, b: usize, conn: Connectivity) -> bool {
    let (p, q) = (pos(a), pos(b));
    let d: [isize; 3] = core::array::from_fn(|i| (p[i] - q[i]).abs());
    if d.iter().any(|&x| x > 1) {
        return false;
    }
    let n = d.iter().filter(|&&x| x == 1).count();
    match conn {
        Connectivity::Face => n == 1,
        Connectivity::Edge => (1..=2).contains(&n),
        Connectivity::Vertex => n >= 1,
    }
}

/// Number of `conn`-components among the neighbourhood positions in `set`,
/// counting only components that contain a position in `touch`.
fn count_components(set: u32, touch: u32, conn: Connectivity) -> usize {
    let mut seen = 0u32;
    let mut count = 0;
    for start in 0..27 {
        if set & (1 << start) == 0 || seen & (1 << start) != 0 {
            continue;
        }
        let mut stack = vec![start];
        seen |= 1 << start;
        let mut touches = false;
        while let Some(p) = stack.pop() {
            touches |= touch & (1 << p) != 0;
            for q in 0..27 {
                if set & (1 << q) != 0 && seen & (1 << q) == 0 && adjacent(p, q, conn) {
                    seen |= 1 << q;
                    stack.push(q);
                }
            }
        }
        if touches {
            count += 1;
        }
    }
    count
}

fn bitmask(pred: impl Fn([isize; 3]) -> bool) -> u32 {
    (0..27).filter(|&b| b != CENTER && pred(pos(b))).fold(0, |m, b| m | (1 << b))
}

/// True when removing the centre of `bits` preserves topology under
/// (26, 6) connectivity: one 26-component of foreground in the 26-neighbourhood
/// and one 6-component of background in the 18-neighbourhood touching a face.
fn is_simple(bits: u32) -> bool {
    let n26 = bitmask(|_| true);
    let n18 = bitmask(|p| p.iter().filter(|&&x| x != 0).count() <= 2);
    let n6 = bitmask(|p| p.iter().filter(|&&x| x != 0).count() == 1);
    let fg = bits & n26;
    if count_components(fg, fg, Connectivity::Vertex) != 1 {
        return false;
    }
    let bg = !bits & n18;
    count_components(bg, n6, Connectivity::Face) == 1
}

/// Topology-preserving 3D thinning by directional simple-point deletion.
///
/// Each pass sweeps the six face directions; in a sweep, border voxels open
/// in that direction are deleted one at a time (raster order) if they are
/// still simple and not curve endpoints. Passes repeat until stable. The
/// output is a subset of the input with the same 26-connected components.
pub fn skeletonize(mask: &Volume) -> Result<Volume> {
    if !mask.is_mask() {
        return Err(Error::NotBinary("skeletonize needs a mask".into()));
    }
    let dims = mask.dims();
    let [nx, ny, nz] = dims;
    let mut data: Vec<u8> = mask.data().iter().map(|&x| (x != 0.0) as u8).collect();
    let directions: [[isize; 3]; 6] = [[0, -1, 0], [0, 1, 0], [1, 0, 0], [-1, 0, 0], [0, 0, 1], [0, 0, -1]];
    let n26 = bitmask(|_| true);
    loop {
        let mut changed = false;
        for dir in directions {
            let open_bit = ((dir[0] + 1) + 3 * (dir[1] + 1) + 9 * (dir[2] + 1)) as usize;
            let mut candidates = Vec::new();
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = i + nx * (j + ny * k);
                        if data[idx] == 0 {
                            continue;
                        }
                        let bits = neighbourhood(&data, dims, i, j, k);
                        if bits & (1 << open_bit) != 0 {
                            continue;
                        }
                        if (bits & n26).count_ones() > 1 && is_simple(bits) {
                            candidates.push((i, j, k));
                        }
                    }
                }
            }
            for (i, j, k) in candidates {
                let bits = neighbourhood(&data, dims, i, j, k);
                if (bits & n26).count_ones() > 1 && is_simple(bits) {
                    data[i + nx * (j + ny * k)] = 0;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let out = data.into_iter().map(|b| b as f32).collect();
    Volume::new(dims, mask.spacing(), VolumeKind::BinaryMask, out)
}

fn overlap_fraction(skel: &Volume, other: &Volume) -> Option<f64> {
    let n = skel.count_nonzero();
    if n == 0 {
        return None;
    }
    let hit = skel.data().iter().zip(other.data()).filter(|(&s, &o)| s != 0.0 && o != 0.0).count();
    Some(hit as f64 / n as f64)
}

/// Centerline Dice: harmonic mean of `|S(pred) ∩ gt| / |S(pred)|` and
/// `|S(gt) ∩ pred| / |S(gt)|`, with `S` the skeleton.
///
/// An empty skeleton scores 1 if the other mask is empty too, else 0.
pub fn cl_dice(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_pair(pred, gt)?;
    let (sp, sg) = (skeletonize(pred)?, skeletonize(gt)?);
    let empty_rule = |other: &Volume| if other.count_nonzero() == 0 { 1.0 } else { 0.0 };
    let tprec = overlap_fraction(&sp, gt).unwrap_or_else(|| empty_rule(gt));
    let tsens = overlap_fraction(&sg, pred).unwrap_or_else(|| empty_rule(pred));
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

// ---------------------------------------------------------------------------
// Image quality

/// `+∞` is written as the string `"inf"` so reports stay valid JSON.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> core::result::Result<S::Ok, S::Error> {
        if x.is_infinite() && *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(alloc::string::String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(other) => Err(serde::de::Error::custom(format!("bad dB value {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageQualityReport {
    /// dB; `+∞` for identical inputs.
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Default dynamic range: `max − min` of the reference, or 1 if that is 0.
pub fn default_range(reference: &[f32]) -> f64 {
    let (lo, hi) =
        reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x as f64), hi.max(x as f64)));
    let r = hi - lo;
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// `10 log10(range² / MSE)`; `b` is the reference for the default range.
pub fn psnr(a: &[f32], b: &[f32], data_range: Option<f64>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    let range = data_range.unwrap_or_else(|| default_range(b));
    if !(range > 0.0) {
        return Err(Error::InvalidConfig(format!("data range must be positive, got {range}")));
    }
    let sse: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_kernel(cfg: &SsimConfig) -> Vec<f64> {
    let c = (cfg.window as f64 - 1.0) / 2.0;
    let w: Vec<f64> =
        (0..cfg.window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * cfg.sigma * cfg.sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable valid-mode filter of a `width × height` image.
fn filter_valid(img: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (width - n + 1, height - n + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|t| k[t] * img[y * width + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `width × height` images with a Gaussian window.
///
/// Local statistics are taken only where the window fits entirely inside the
/// image; the SSIM map over those positions is averaged.
pub fn ssim(
    a: &[f32],
    b: &[f32],
    width: usize,
    height: usize,
    data_range: Option<f64>,
    cfg: &SsimConfig,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(Error::ShapeMismatch(format!("{} and {} samples for a {width}x{height} image", a.len(), b.len())));
    }
    if cfg.window == 0 || width < cfg.window || height < cfg.window {
        return Err(Error::ShapeMismatch(format!("{width}x{height} image is smaller than the {} window", cfg.window)));
    }
    let range = data_range.unwrap_or_else(|| default_range(b));
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    let k = gaussian_kernel(cfg);
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, width, height, &k);
    let my = filter_valid(&y, width, height, &k);
    let mxx = filter_valid(&prod(&x, &x), width, height, &k);
    let myy = filter_valid(&prod(&y, &y), width, height, &k);
    let mxy = filter_valid(&prod(&x, &y), width, height, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// PSNR over the whole stack and SSIM averaged over views.
///
/// `reference` sets the default data range, shared by every view.
pub fn stack_quality(
    a: &ProjectionStack,
    reference: &ProjectionStack,
    data_range: Option<f64>,
) -> Result<ImageQualityReport> {
    a.same_shape(reference)?;
    let range = data_range.unwrap_or_else(|| default_range(reference.data()));
    let psnr = psnr(a.data(), reference.data(), Some(range))?;
    let cfg = SsimConfig::default();
    let mut s = 0.0;
    for view in 0..a.n_views() {
        s += ssim(a.view(view), reference.view(view), a.nu(), a.nv(), Some(range), &cfg)?;
    }
    Ok(ImageQualityReport { psnr, ssim: s / a.n_views() as f64 })
}
