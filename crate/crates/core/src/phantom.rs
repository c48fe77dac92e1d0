//! Procedural vessel trees and CT-like volumes.
//!
//! A tree is a root tube that bifurcates `depth − 1` times. Each segment is
//! rasterized as a capsule: every voxel whose centre lies within `radius` of
//! the segment. Child segments start at the parent's end point, shrink by
//! `radius_decay` and `length_decay`, and bend away from the parent axis by
//! an angle drawn from `branch_angle_deg`, on opposite sides of a random
//! plane through the parent axis.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{standard_normal, substream};
use crate::{Error, Result, Volume, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub seed: u64,
    pub depth: usize,
    /// Voxels.
    pub root_radius: f64,
    /// Voxels.
    pub root_length: f64,
    pub radius_decay: f64,
    pub length_decay: f64,
    /// `[min, max]` bend of each child from its parent's axis.
    pub branch_angle_deg: [f64; 2],
    pub background: f32,
    pub vessel: f32,
    pub noise_sigma: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::for_dims([64, 64, 64])
    }
}

impl PhantomConfig {
    /// Depth-3 tree sized to the smallest axis of `dims`.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let n = dims.iter().copied().min().unwrap_or(1) as f64;
        Self {
            dims,
            seed: 0,
            depth: 3,
            root_radius: 0.125 * n,
            root_length: 0.36 * n,
            radius_decay: 0.7,
            length_decay: 0.7,
            branch_angle_deg: [25.0, 45.0],
            background: 0.3,
            vessel: 1.0,
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        crate::volume::check_dims(self.dims)?;
        if !(self.root_radius > 0.0) || !(self.root_length > 0.0) {
            return bad("root radius and length must be positive".into());
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return bad(format!("radius decay must be in (0, 1], got {}", self.radius_decay));
        }
        if !(self.length_decay > 0.0 && self.length_decay <= 1.0) {
            return bad(format!("length decay must be in (0, 1], got {}", self.length_decay));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let [lo, hi] = self.branch_angle_deg;
        if !(lo >= 0.0 && lo <= hi && hi < 180.0) {
            return bad(format!("bad branch angle range {lo}..{hi}"));
        }
        if !(self.vessel > self.background) || self.background < 0.0 {
            return bad("vessel intensity must exceed a non-negative background".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Centerline nodes (voxel coordinates), segments between them, and the
/// tube radius at each node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterlineGraph {
    pub nodes: Vec<[f64; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselTree {
    pub mask: Volume,
    pub centerline: CenterlineGraph,
    /// Some capsule reached past the volume boundary and was cut off.
    pub clipped: bool,
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Rotates `v` by `angle` about the unit axis `k` (Rodrigues).
fn rotate(v: V3, k: V3, angle: f64) -> V3 {
    let (s, c) = angle.sin_cos();
    add(add(scale(v, c), scale(cross(k, v), s)), scale(k, dot(k, v) * (1.0 - c)))
}

fn distance_to_segment(p: V3, a: V3, b: V3) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    let d = sub(p, add(a, scale(ab, t)));
    dot(d, d).sqrt()
}

/// Sets every voxel within `r` of segment `ab`; returns whether the capsule was clipped.
fn rasterize_capsule(data: &mut [f32], dims: [usize; 3], a: V3, b: V3, r: f64) -> bool {
    let mut clipped = false;
    let mut range = [(0usize, 0usize); 3];
    for ax in 0..3 {
        let lo = a[ax].min(b[ax]) - r;
        let hi = a[ax].max(b[ax]) + r;
        if lo < -0.5 || hi > dims[ax] as f64 - 0.5 {
            clipped = true;
        }
        let lo = lo.ceil().max(0.0) as usize;
        let hi = hi.floor().min(dims[ax] as f64 - 1.0);
        if hi < 0.0 || lo as f64 > hi {
            return true;
        }
        range[ax] = (lo, hi as usize);
    }
    for k in range[2].0..=range[2].1 {
        for j in range[1].0..=range[1].1 {
            for i in range[0].0..=range[0].1 {
                if distance_to_segment([i as f64, j as f64, k as f64], a, b) <= r {
                    data[i + dims[0] * (j + dims[1] * k)] = 1.0;
                }
            }
        }
    }
    clipped
}

/// Any unit vector orthogonal to the unit vector `d`.
fn orthogonal(d: V3, rng: &mut impl Rng) -> V3 {
    loop {
        let v = [standard_normal(rng), standard_normal(rng), standard_normal(rng)];
        let w = sub(v, scale(d, dot(v, d)));
        let n = dot(w, w).sqrt();
        if n > 1e-6 {
            return scale(w, 1.0 / n);
        }
    }
}

pub fn generate_vessel_tree(cfg: &PhantomConfig) -> Result<VesselTree> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = substream(cfg.seed, 0);
    let mut data = vec![0.0f32; dims.iter().product()];
    let mut graph = CenterlineGraph { nodes: Vec::new(), edges: Vec::new(), radii: Vec::new() };
    let mut clipped = false;

    // root enters near the low-y face and heads up the y axis
    let centre = [0.5 * (dims[0] as f64 - 1.0), 0.5 * (dims[1] as f64 - 1.0), 0.5 * (dims[2] as f64 - 1.0)];
    let start = [
        centre[0],
        (0.5 * dims[1] as f64 - 0.5 * cfg.root_length * total_length_factor(cfg)).max(cfg.root_radius),
        centre[2],
    ];
    graph.nodes.push(start);
    graph.radii.push(cfg.root_radius);

    // (parent node, direction, radius, length, remaining depth)
    let mut pending = vec![(0usize, [0.0, 1.0, 0.0], cfg.root_radius, cfg.root_length, cfg.depth)];
    while let Some((from, dir, radius, length, depth)) = pending.pop() {
        let a = graph.nodes[from];
        let b = add(a, scale(dir, length));
        graph.nodes.push(b);
        graph.radii.push(radius);
        let to = graph.nodes.len() - 1;
        graph.edges.push([from, to]);
        clipped |= rasterize_capsule(&mut data, dims, a, b, radius);
        if depth > 1 {
            let axis = orthogonal(dir, &mut rng);
            let [lo, hi] = cfg.branch_angle_deg;
            for side in [1.0, -1.0] {
                let angle = rng.random_range(lo..=hi).to_radians() * side;
                let child = normalize(rotate(dir, axis, angle));
                pending.push((to, child, radius * cfg.radius_decay, length * cfg.length_decay, depth - 1));
            }
        }
    }
    if clipped {
        log::warn!("vessel tree clipped at the volume boundary");
    }
    let mask = Volume::new(dims, [1.0; 3], VolumeKind::BinaryMask, data)?;
    Ok(VesselTree { mask, centerline: graph, clipped })
}

/// Length of the longest root-to-leaf path in units of the root length.
fn total_length_factor(cfg: &PhantomConfig) -> f64 {
    (0..cfg.depth).map(|g| cfg.length_decay.powi(g as i32)).sum()
}

/// CT-like intensities: `background` off the mask, `vessel` on it, plus
/// seeded Gaussian noise of standard deviation `noise_sigma`, clamped at 0.
pub fn generate_ct_like(mask: &Volume, cfg: &PhantomConfig) -> Result<Volume> {
    cfg.validate()?;
    if !mask.is_mask() {
        return Err(Error::NotBinary("CT synthesis needs a vessel mask".into()));
    }
    let mut rng = substream(cfg.seed, 1);
    let sigma = cfg.noise_sigma as f64;
    let data = mask
        .data()
        .iter()
        .map(|&m| {
            let base = if m != 0.0 { cfg.vessel } else { cfg.background } as f64;
            let noise = if sigma > 0.0 { sigma * standard_normal(&mut rng) } else { 0.0 };
            (base + noise).max(0.0) as f32
        })
        .collect();
    Volume::new(mask.dims(), mask.spacing(), VolumeKind::Intensity, data)
}
