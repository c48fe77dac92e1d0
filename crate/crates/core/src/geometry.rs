//! Parallel-beam geometry and exact ray/voxel traversal.
//!
//! The volume is centred on the origin. Views rotate about the z axis; at
//! angle θ every ray of the view travels along `(cos θ, sin θ, 0)` and the
//! detector's u axis is `(-sin θ, cos θ, 0)`. Detector rows (v) are parallel
//! to z, so each ray stays in a single z-slice of the volume.
//!
//! Traversal is Siddon-style: the exact chord length of the ray through every
//! voxel it crosses. Voxels are half-open boxes `[lo, hi)` on every axis, so
//! a ray running exactly along a voxel face belongs to the voxel with the
//! larger index.
//!
//! Three projectors implement [`Projector`] with the same traversal:
//!
//! + [`SystemMatrix`] stores every ray explicitly (tests, small grids).
//! + [`RayTracer`] re-traces every ray on every application.
//! + [`SliceProjector`] traces the in-plane rays once and reuses them for all
//!   slices; this is the default for full-size volumes.
//!
//! `RayTracer` and `SliceProjector` give bit-identical results.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::par::for_each_chunk;
use crate::projection::ProjectionStack;
use crate::volume::{check_dims, check_spacing};
use crate::{Error, Result, Volume, VolumeKind};

/// Voxel grid placement: `dims` voxels of size `spacing` mm, centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Self { dims, spacing })
    }

    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn of(v: &Volume) -> Self {
        Self { dims: v.dims(), spacing: v.spacing() }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn lower(&self) -> [f64; 3] {
        core::array::from_fn(|a| -0.5 * self.dims[a] as f64 * self.spacing[a])
    }

    pub fn upper(&self) -> [f64; 3] {
        core::array::from_fn(|a| 0.5 * self.dims[a] as f64 * self.spacing[a])
    }

    pub fn diagonal(&self) -> f64 {
        let [x, y, z]: [f64; 3] = core::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a]);
        (x * x + y * y + z * z).sqrt()
    }

    /// Slice index containing world coordinate `z`, if any.
    pub fn slice_of(&self, z: f64) -> Option<usize> {
        let lo = self.lower()[2];
        let hi = self.upper()[2];
        if !(z >= lo && z < hi) {
            return None;
        }
        let k = ((z - lo) / self.spacing[2]).floor() as usize;
        Some(k.min(self.dims[2] - 1))
    }
}

/// Parallel-beam view set rotating about the volume z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    pub n_views: usize,
    pub angle_start_deg: f64,
    pub angle_step_deg: f64,
    /// `[nu, nv]`: detector columns (in-plane) and rows (along z).
    pub detector: [usize; 2],
    /// `[du, dv]` in mm.
    pub detector_spacing: [f64; 2],
}

impl Default for ProjectionGeometry {
    fn default() -> Self {
        Self {
            n_views: 180,
            angle_start_deg: 0.0,
            angle_step_deg: 1.0,
            detector: [256, 256],
            detector_spacing: [1.0, 1.0],
        }
    }
}

impl ProjectionGeometry {
    pub fn new(
        n_views: usize,
        angle_start_deg: f64,
        angle_step_deg: f64,
        detector: [usize; 2],
        detector_spacing: [f64; 2],
    ) -> Result<Self> {
        let g = Self { n_views, angle_start_deg, angle_step_deg, detector, detector_spacing };
        g.validate()?;
        Ok(g)
    }

    /// Default view set with a unit-spaced detector of `max(dims)` pixels per side.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let n = dims.iter().copied().max().unwrap_or(1);
        Self { detector: [n, n], ..Self::default() }
    }

    pub fn with_views(mut self, n_views: usize, start_deg: f64, step_deg: f64) -> Result<Self> {
        self.n_views = n_views;
        self.angle_start_deg = start_deg;
        self.angle_step_deg = step_deg;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidGeometry(m.into()));
        if self.n_views == 0 {
            return bad("n_views must be positive");
        }
        if self.detector[0] == 0 || self.detector[1] == 0 {
            return bad("detector needs at least one pixel per axis");
        }
        if !self.detector_spacing.iter().all(|&s| s.is_finite() && s > 0.0) {
            return bad("detector spacing must be positive");
        }
        if !self.angle_start_deg.is_finite() || !self.angle_step_deg.is_finite() {
            return bad("angles must be finite");
        }
        if self.n_views > 1 && self.angle_step_deg <= 0.0 {
            return bad("angle step must be positive");
        }
        let last = self.angle_deg(self.n_views - 1);
        if self.angle_start_deg < 0.0 || last >= 180.0 {
            return Err(Error::InvalidGeometry(format!(
                "angles must lie in [0, 180) degrees, got {} .. {}",
                self.angle_start_deg, last
            )));
        }
        Ok(())
    }

    pub fn angle_deg(&self, view: usize) -> f64 {
        self.angle_start_deg + view as f64 * self.angle_step_deg
    }

    pub fn angles_deg(&self) -> Vec<f64> {
        (0..self.n_views).map(|i| self.angle_deg(i)).collect()
    }

    pub fn nu(&self) -> usize {
        self.detector[0]
    }

    pub fn nv(&self) -> usize {
        self.detector[1]
    }

    pub fn pixels_per_view(&self) -> usize {
        self.detector[0] * self.detector[1]
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.pixels_per_view()
    }

    /// Detector coordinate of column `iu` (mm, centred).
    pub fn u_coord(&self, iu: usize) -> f64 {
        (iu as f64 + 0.5 - 0.5 * self.detector[0] as f64) * self.detector_spacing[0]
    }

    /// Detector coordinate of row `iv`, which is also the world z of its rays.
    pub fn v_coord(&self, iv: usize) -> f64 {
        (iv as f64 + 0.5 - 0.5 * self.detector[1] as f64) * self.detector_spacing[1]
    }

    /// Unit travel direction of the rays of `view`.
    pub fn direction(&self, view: usize) -> [f64; 3] {
        let t = self.angle_deg(view) * PI / 180.0;
        // exact zeros at multiples of 90° keep axis-aligned views axis-aligned
        let snap = |c: f64| if c.abs() < 1e-15 { 0.0 } else { c };
        [snap(t.cos()), snap(t.sin()), 0.0]
    }

    /// The ray through detector pixel `(iu, iv)` of `view`, starting outside `grid`.
    pub fn ray(&self, view: usize, iu: usize, iv: usize, grid: &Grid) -> Ray {
        let d = self.direction(view);
        let eu = [-d[1], d[0], 0.0];
        let u = self.u_coord(iu);
        let back = 0.5 * grid.diagonal() + 1.0;
        let origin = [u * eu[0] - back * d[0], u * eu[1] - back * d[1], self.v_coord(iv)];
        Ray { origin, direction: d, view, pixel: [iu, iv] }
    }

    /// Volume slice hit by each detector row.
    pub fn row_slices(&self, grid: &Grid) -> Vec<Option<usize>> {
        (0..self.nv()).map(|iv| grid.slice_of(self.v_coord(iv))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub view: usize,
    pub pixel: [usize; 2],
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], view: usize, pixel: [usize; 2]) -> Result<Self> {
        let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if !origin.iter().all(|x| x.is_finite()) || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidGeometry(format!("ray direction norm {norm} is not 1")));
        }
        Ok(Self { origin, direction, view, pixel })
    }
}

/// One ray/voxel intersection: linear voxel index and chord length in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub length: f64,
}

/// Exact intersections of the half-line `ray` (t ≥ 0) with `grid`, in traversal order.
pub fn trace_ray(ray: &Ray, grid: &Grid) -> Vec<Hit> {
    let mut out = Vec::new();
    trace_ray_into(ray, grid, &mut out);
    out
}

/// [`trace_ray`] into a reusable buffer (cleared first).
pub fn trace_ray_into(ray: &Ray, grid: &Grid, out: &mut Vec<Hit>) {
    out.clear();
    let o = ray.origin;
    let d = ray.direction;
    let lo = grid.lower();
    let hi = grid.upper();
    let s = grid.spacing;
    let n = grid.dims;
    let eps = 1e-10 * s.iter().copied().fold(f64::INFINITY, f64::min);

    let mut t_in = 0.0f64;
    let mut t_out = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if !(o[a] >= lo[a] && o[a] < hi[a]) {
                return;
            }
        } else {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            t_in = t_in.max(ta.min(tb));
            t_out = t_out.min(ta.max(tb));
        }
    }
    if !(t_out - t_in > eps) {
        return;
    }

    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    for a in 0..3 {
        let p = if d[a] == 0.0 { o[a] } else { o[a] + t_in * d[a] };
        let c = (p - lo[a]) / s[a];
        let i = if d[a] < 0.0 {
            step[a] = -1;
            c.ceil() - 1.0
        } else {
            step[a] = if d[a] > 0.0 { 1 } else { 0 };
            c.floor()
        };
        idx[a] = (i as isize).clamp(0, n[a] as isize - 1);
    }

    let stride = [1usize, n[0], n[0] * n[1]];
    let mut t = t_in;
    loop {
        let mut t_next = [f64::INFINITY; 3];
        for a in 0..3 {
            if step[a] != 0 {
                let face = idx[a] + if step[a] > 0 { 1 } else { 0 };
                t_next[a] = (lo[a] + face as f64 * s[a] - o[a]) / d[a];
            }
        }
        let t_min = t_next[0].min(t_next[1]).min(t_next[2]).min(t_out);
        let len = t_min - t;
        if len > eps {
            let index = idx[0] as usize * stride[0] + idx[1] as usize * stride[1] + idx[2] as usize * stride[2];
            out.push(Hit { index, length: len });
        }
        if t_min >= t_out - eps {
            break;
        }
        let mut left = false;
        for a in 0..3 {
            if step[a] != 0 && t_next[a] <= t_min + eps {
                idx[a] += step[a];
                if idx[a] < 0 || idx[a] >= n[a] as isize {
                    left = true;
                }
            }
        }
        if left {
            break;
        }
        t = t_min;
    }
}

/// Linear operator between a voxel grid and a projection stack.
///
/// Projection buffers are laid out `(view, v, u)` with u fastest.
pub trait Projector: Sync {
    fn grid(&self) -> &Grid;
    fn geometry(&self) -> &ProjectionGeometry;

    /// `out = A x`.
    fn forward(&self, x: &[f64], out: &mut [f64]);

    /// `out = Aᵀ p`.
    fn adjoint(&self, p: &[f64], out: &mut [f64]);

    fn n_rays(&self) -> usize {
        self.geometry().n_rays()
    }

    fn n_voxels(&self) -> usize {
        self.grid().n_voxels()
    }
}

/// Explicit sparse system matrix, one row per ray in `(view, v, u)` order.
///
/// Row entries are sorted by voxel index.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrix {
    geometry: ProjectionGeometry,
    grid: Grid,
    row_ptr: Vec<usize>,
    indices: Vec<u32>,
    lengths: Vec<f64>,
}

/// Nonzero cap used by [`SystemMatrix::build`].
pub const DEFAULT_MATRIX_BUDGET: usize = 1 << 26;

impl SystemMatrix {
    pub fn build(geometry: &ProjectionGeometry, grid: &Grid) -> Result<Self> {
        Self::build_with_budget(geometry, grid, DEFAULT_MATRIX_BUDGET)
    }

    pub fn build_with_budget(geometry: &ProjectionGeometry, grid: &Grid, max_nonzeros: usize) -> Result<Self> {
        geometry.validate()?;
        if grid.n_voxels() > u32::MAX as usize {
            return Err(Error::MemoryBudget { budget: max_nonzeros });
        }
        let mut row_ptr = Vec::with_capacity(geometry.n_rays() + 1);
        row_ptr.push(0);
        let mut indices = Vec::new();
        let mut lengths = Vec::new();
        let mut hits = Vec::new();
        for view in 0..geometry.n_views {
            for iv in 0..geometry.nv() {
                for iu in 0..geometry.nu() {
                    trace_ray_into(&geometry.ray(view, iu, iv, grid), grid, &mut hits);
                    if indices.len() + hits.len() > max_nonzeros {
                        return Err(Error::MemoryBudget { budget: max_nonzeros });
                    }
                    hits.sort_unstable_by_key(|h| h.index);
                    indices.extend(hits.iter().map(|h| h.index as u32));
                    lengths.extend(hits.iter().map(|h| h.length));
                    row_ptr.push(indices.len());
                }
            }
        }
        Ok(Self { geometry: geometry.clone(), grid: *grid, row_ptr, indices, lengths })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// `(voxel index, length)` pairs of ray `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.indices[span.clone()].iter().map(|&i| i as usize).zip(self.lengths[span].iter().copied())
    }
}

impl Projector for SystemMatrix {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.grid.n_voxels());
        assert_eq!(out.len(), self.n_rows());
        let per_view = self.geometry.pixels_per_view();
        for_each_chunk(out, per_view, |view, chunk| {
            for (p, o) in chunk.iter_mut().enumerate() {
                *o = self.row(view * per_view + p).map(|(i, l)| l * x[i]).sum();
            }
        });
    }

    fn adjoint(&self, p: &[f64], out: &mut [f64]) {
        assert_eq!(p.len(), self.n_rows());
        assert_eq!(out.len(), self.grid.n_voxels());
        out.fill(0.0);
        for (r, &w) in p.iter().enumerate() {
            if w != 0.0 {
                for (i, l) in self.row(r) {
                    out[i] += l * w;
                }
            }
        }
    }
}

/// Matrix-free projector that re-traces every ray on each application.
#[derive(Debug, Clone)]
pub struct RayTracer {
    geometry: ProjectionGeometry,
    grid: Grid,
    row_slices: Vec<Option<usize>>,
}

impl RayTracer {
    pub fn new(geometry: &ProjectionGeometry, grid: &Grid) -> Result<Self> {
        geometry.validate()?;
        Ok(Self { geometry: geometry.clone(), grid: *grid, row_slices: geometry.row_slices(grid) })
    }
}

impl Projector for RayTracer {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.grid.n_voxels());
        assert_eq!(out.len(), self.n_rays());
        let (nu, nv) = (self.geometry.nu(), self.geometry.nv());
        for_each_chunk(out, nu * nv, |view, chunk| {
            let mut hits = Vec::new();
            for iv in 0..nv {
                for iu in 0..nu {
                    trace_ray_into(&self.geometry.ray(view, iu, iv, &self.grid), &self.grid, &mut hits);
                    chunk[iv * nu + iu] = hits.iter().map(|h| h.length * x[h.index]).sum();
                }
            }
        });
    }

    fn adjoint(&self, p: &[f64], out: &mut [f64]) {
        assert_eq!(p.len(), self.n_rays());
        assert_eq!(out.len(), self.grid.n_voxels());
        let (nu, nv) = (self.geometry.nu(), self.geometry.nv());
        let nxy = self.grid.slice_len();
        for_each_chunk(out, nxy, |k, slice| {
            slice.fill(0.0);
            let mut hits = Vec::new();
            for view in 0..self.geometry.n_views {
                for iv in (0..nv).filter(|&iv| self.row_slices[iv] == Some(k)) {
                    for iu in 0..nu {
                        let w = p[(view * nv + iv) * nu + iu];
                        if w == 0.0 {
                            continue;
                        }
                        trace_ray_into(&self.geometry.ray(view, iu, iv, &self.grid), &self.grid, &mut hits);
                        for h in &hits {
                            slice[h.index - k * nxy] += h.length * w;
                        }
                    }
                }
            }
        });
    }
}

/// Projector that traces the in-plane ray set once and applies it slice by slice.
///
/// Memory is one 2D ray table (`n_views · nu` rays over an `nx · ny` slice),
/// independent of `nz` and `nv`.
#[derive(Debug, Clone)]
pub struct SliceProjector {
    geometry: ProjectionGeometry,
    grid: Grid,
    row_slices: Vec<Option<usize>>,
    /// Detector rows feeding each slice.
    slice_rows: Vec<Vec<usize>>,
    ray_ptr: Vec<usize>,
    indices: Vec<u32>,
    lengths: Vec<f64>,
}

impl SliceProjector {
    pub fn new(geometry: &ProjectionGeometry, grid: &Grid) -> Result<Self> {
        geometry.validate()?;
        let nxy = grid.slice_len();
        if nxy > u32::MAX as usize {
            return Err(Error::InvalidGeometry("slice too large".into()));
        }
        let row_slices = geometry.row_slices(grid);
        let mut slice_rows = vec![Vec::new(); grid.dims[2]];
        for (iv, s) in row_slices.iter().enumerate() {
            if let Some(k) = s {
                slice_rows[*k].push(iv);
            }
        }
        // Any row inside the volume gives the same in-plane chords; rows
        // outside trace nothing, so use one inside.
        let probe_row = row_slices.iter().position(Option::is_some);
        let mut ray_ptr = Vec::with_capacity(geometry.n_views * geometry.nu() + 1);
        ray_ptr.push(0);
        let mut indices = Vec::new();
        let mut lengths = Vec::new();
        if let Some(iv) = probe_row {
            let mut hits = Vec::new();
            for view in 0..geometry.n_views {
                for iu in 0..geometry.nu() {
                    trace_ray_into(&geometry.ray(view, iu, iv, grid), grid, &mut hits);
                    indices.extend(hits.iter().map(|h| (h.index % nxy) as u32));
                    lengths.extend(hits.iter().map(|h| h.length));
                    ray_ptr.push(indices.len());
                }
            }
        } else {
            ray_ptr.resize(geometry.n_views * geometry.nu() + 1, 0);
        }
        Ok(Self { geometry: geometry.clone(), grid: *grid, row_slices, slice_rows, ray_ptr, indices, lengths })
    }

    /// Stored in-plane intersections.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Volume slice fed by detector row `iv`.
    #[inline]
    pub fn row_slice(&self, iv: usize) -> Option<usize> {
        self.row_slices[iv]
    }

    /// In-plane voxel indices and chord lengths of column `iu` in `view`, in traversal order.
    #[inline]
    pub fn in_plane(&self, view: usize, iu: usize) -> (&[u32], &[f64]) {
        let r = view * self.geometry.nu() + iu;
        let span = self.ray_ptr[r]..self.ray_ptr[r + 1];
        (&self.indices[span.clone()], &self.lengths[span])
    }
}

impl Projector for SliceProjector {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.grid.n_voxels());
        assert_eq!(out.len(), self.n_rays());
        let (nu, nv) = (self.geometry.nu(), self.geometry.nv());
        let nxy = self.grid.slice_len();
        for_each_chunk(out, nu * nv, |view, chunk| {
            for iv in 0..nv {
                let row = &mut chunk[iv * nu..(iv + 1) * nu];
                let Some(k) = self.row_slices[iv] else {
                    row.fill(0.0);
                    continue;
                };
                let plane = &x[k * nxy..(k + 1) * nxy];
                for (iu, o) in row.iter_mut().enumerate() {
                    let (idx, len) = self.in_plane(view, iu);
                    *o = idx.iter().zip(len).map(|(&i, &l)| l * plane[i as usize]).sum();
                }
            }
        });
    }

    fn adjoint(&self, p: &[f64], out: &mut [f64]) {
        assert_eq!(p.len(), self.n_rays());
        assert_eq!(out.len(), self.grid.n_voxels());
        let (nu, nv) = (self.geometry.nu(), self.geometry.nv());
        let nxy = self.grid.slice_len();
        for_each_chunk(out, nxy, |k, slice| {
            slice.fill(0.0);
            for view in 0..self.geometry.n_views {
                for &iv in &self.slice_rows[k] {
                    let weights = &p[(view * nv + iv) * nu..(view * nv + iv + 1) * nu];
                    for (iu, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let (idx, len) = self.in_plane(view, iu);
                        for (&i, &l) in idx.iter().zip(len) {
                            slice[i as usize] += l * w;
                        }
                    }
                }
            }
        });
    }
}

fn check_grid(p: &dyn Projector, v: &Volume) -> Result<()> {
    let g = p.grid();
    if g.dims != v.dims() {
        return Err(Error::DimMismatch { left: g.dims, right: v.dims() });
    }
    if g.spacing != v.spacing() {
        return Err(Error::ShapeMismatch(format!(
            "projector spacing {:?} vs volume spacing {:?}",
            g.spacing,
            v.spacing()
        )));
    }
    Ok(())
}

pub(crate) fn to_f64(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&x| x as f64).collect()
}

pub(crate) fn to_f32(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&x| x as f32).collect()
}

/// Projects a volume: every pixel is `Σ length · value` along its ray.
pub fn forward_apply(p: &dyn Projector, v: &Volume) -> Result<ProjectionStack> {
    check_grid(p, v)?;
    let mut out = vec![0.0; p.n_rays()];
    p.forward(&to_f64(v.data()), &mut out);
    ProjectionStack::new(p.geometry().clone(), to_f32(&out))
}

/// Unfiltered backprojection `Aᵀ p`.
pub fn adjoint_apply(p: &dyn Projector, stack: &ProjectionStack) -> Result<Volume> {
    if stack.geometry() != p.geometry() {
        return Err(Error::ShapeMismatch("stack geometry differs from projector geometry".into()));
    }
    let mut out = vec![0.0; p.n_voxels()];
    p.adjoint(&to_f64(stack.data()), &mut out);
    let g = p.grid();
    Volume::new(g.dims, g.spacing, VolumeKind::Intensity, to_f32(&out))
}
