//! Percentile thresholding and connected-component cleanup.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Face,
    #[serde(rename = "18")]
    Edge,
    #[default]
    #[serde(rename = "26")]
    Vertex,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            6 => Some(Self::Face),
            18 => Some(Self::Edge),
            26 => Some(Self::Vertex),
            _ => None,
        }
    }

    pub fn count(self) -> usize {
        match self {
            Self::Face => 6,
            Self::Edge => 18,
            Self::Vertex => 26,
        }
    }

    /// Neighbour offsets `(dx, dy, dz)`, excluding the centre.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nonzero = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                    let keep = match self {
                        Self::Face => nonzero == 1,
                        Self::Edge => (1..=2).contains(&nonzero),
                        Self::Vertex => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cleanup {
    /// Drop components with fewer voxels.
    MinSize(usize),
    /// Keep only the n largest components (ties broken by label order).
    KeepLargest(usize),
}

/// Minimum component size at 256³; smaller grids scale it by voxel count.
pub const REFERENCE_MIN_SIZE: usize = 50;

/// Threshold noise leaves specks of a few voxels whatever the grid size, so
/// the scaled minimum never drops below this.
pub const MIN_SIZE_FLOOR: usize = 8;

impl Cleanup {
    /// [`REFERENCE_MIN_SIZE`] scaled to a grid of `dims`, at least [`MIN_SIZE_FLOOR`].
    pub fn scaled_min_size(dims: [usize; 3]) -> Self {
        let n = dims.iter().product::<usize>() as f64;
        let size = (REFERENCE_MIN_SIZE as f64 * n / (256.0f64).powi(3)).round() as usize;
        Self::MinSize(size.max(MIN_SIZE_FLOOR))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub percentile: f64,
    pub connectivity: Connectivity,
    pub cleanup: Cleanup,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { percentile: 95.0, connectivity: Connectivity::Vertex, cleanup: Cleanup::MinSize(REFERENCE_MIN_SIZE) }
    }
}

impl SegmentationConfig {
    pub fn for_dims(dims: [usize; 3]) -> Self {
        Self { cleanup: Cleanup::scaled_min_size(dims), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::InvalidConfig(format!("percentile must be in (0, 100), got {}", self.percentile)));
        }
        match self.cleanup {
            Cleanup::MinSize(0) => Err(Error::InvalidConfig("min component size must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// The `p`-th percentile by linear interpolation between order statistics.
///
/// With sorted values `s[0..n]`, the rank is `h = p/100 · (n − 1)` and the
/// result `s[⌊h⌋] + (h − ⌊h⌋)(s[⌊h⌋+1] − s[⌊h⌋])`. For the values 1..=100
/// and p = 95: h = 94.05, so the percentile is 95.05.
pub fn percentile(values: &[f32], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("percentile input".into()));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    Ok(a + (h - lo as f64) * (b - a))
}

/// Mask of voxels at or above the `p`-th percentile of `v`, with the
/// threshold rounded to the volume's f32 precision.
pub fn percentile_threshold(v: &Volume, p: f64) -> Result<Volume> {
    let t = percentile(v.data(), p)? as f32;
    let data = v.data().iter().map(|&x| if x >= t { 1.0 } else { 0.0 }).collect();
    Ok(v.map_data(VolumeKind::BinaryMask, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: u32,
    pub size: usize,
    /// Mean voxel index `(i, j, k)`.
    pub centroid: [f64; 3],
}

/// Component labels (0 = background) and per-component statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    /// `components[l - 1]` describes label `l`.
    pub components: Vec<Component>,
}

impl Labeling {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Labels the foreground of a mask. Labels follow the raster order of each
/// component's first voxel (x fastest).
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> Result<Labeling> {
    if !mask.is_mask() {
        return Err(Error::NotBinary("connected components need a mask".into()));
    }
    let dims = mask.dims();
    let n = mask.len();
    if n > u32::MAX as usize {
        return Err(Error::InvalidDims(dims));
    }
    let [nx, ny, nz] = dims;
    let data = mask.data();
    // offsets that precede the centre in raster order
    let backward: Vec<[isize; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
        .collect();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if data[idx] == 0.0 {
                    continue;
                }
                for &[dx, dy, dz] in &backward {
                    let (x, y, z) = (i as isize + dx, j as isize + dy, k as isize + dz);
                    if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize {
                        continue;
                    }
                    let nidx = x as usize + nx * (y as usize + ny * z as usize);
                    if data[nidx] != 0.0 {
                        union(&mut parent, idx as u32, nidx as u32);
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut root_label = vec![0u32; n];
    let mut sums: Vec<([f64; 3], usize)> = Vec::new();
    for idx in 0..n {
        if data[idx] == 0.0 {
            continue;
        }
        let r = find(&mut parent, idx as u32) as usize;
        if root_label[r] == 0 {
            sums.push(([0.0; 3], 0));
            root_label[r] = sums.len() as u32;
        }
        let l = root_label[r];
        labels[idx] = l;
        let s = &mut sums[l as usize - 1];
        s.0[0] += (idx % nx) as f64;
        s.0[1] += ((idx / nx) % ny) as f64;
        s.0[2] += (idx / (nx * ny)) as f64;
        s.1 += 1;
    }
    let components = sums
        .into_iter()
        .enumerate()
        .map(|(i, (c, size))| Component {
            label: i as u32 + 1,
            size,
            centroid: [c[0] / size as f64, c[1] / size as f64, c[2] / size as f64],
        })
        .collect();
    Ok(Labeling { dims, labels, components })
}

/// Drops components according to `cfg.cleanup`.
pub fn remove_small_components(mask: &Volume, cfg: &SegmentationConfig) -> Result<Volume> {
    cfg.validate()?;
    let lab = connected_components(mask, cfg.connectivity)?;
    let mut keep = vec![false; lab.n_components() + 1];
    match cfg.cleanup {
        Cleanup::MinSize(min) => {
            for c in &lab.components {
                keep[c.label as usize] = c.size >= min;
            }
        }
        Cleanup::KeepLargest(n) => {
            let mut order: Vec<&Component> = lab.components.iter().collect();
            order.sort_by(|a, b| b.size.cmp(&a.size).then(a.label.cmp(&b.label)));
            for c in order.into_iter().take(n) {
                keep[c.label as usize] = true;
            }
        }
    }
    let data = lab.labels.iter().map(|&l| if l != 0 && keep[l as usize] { 1.0 } else { 0.0 }).collect();
    Ok(mask.map_data(VolumeKind::BinaryMask, data))
}

/// Percentile threshold followed by component cleanup.
pub fn segment(v: &Volume, cfg: &SegmentationConfig) -> Result<Volume> {
    cfg.validate()?;
    let mask = percentile_threshold(v, cfg.percentile)?;
    remove_small_components(&mask, cfg)
}
