//! Integral projections and top-k maximum intensity projections.
//!
//! Both transforms walk the same exact ray traversal as the projectors in
//! [`crate::geometry`]. A ray sample is the length-weighted value
//! `Δl_i · μ_i` of the i-th voxel it crosses:
//!
//! + the integral projection sums the samples,
//! + the top-k MIP keeps the k largest samples in descending order.
//!
//! Note that top-k samples are length-weighted, unlike most MIP renderers
//! which use raw voxel values. With unit spacing and axis-aligned rays the
//! two coincide.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::{forward_apply, Grid, Projector, SliceProjector};
use crate::par::for_each_chunk;
use crate::{Error, ProjectionGeometry, Result, Volume};

/// Per-view 2D images laid out `(view, v, u)` with u fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    geometry: ProjectionGeometry,
    data: Vec<f32>,
}

impl ProjectionStack {
    pub fn new(geometry: ProjectionGeometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.n_rays() {
            return Err(Error::LengthMismatch { expected: geometry.n_rays(), actual: data.len() });
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: ProjectionGeometry) -> Result<Self> {
        let n = geometry.n_rays();
        Self::new(geometry, vec![0.0; n])
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views
    }

    pub fn nu(&self) -> usize {
        self.geometry.nu()
    }

    pub fn nv(&self) -> usize {
        self.geometry.nv()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Image of one view, `nv` rows of `nu` pixels.
    pub fn view(&self, view: usize) -> &[f32] {
        let n = self.geometry.pixels_per_view();
        &self.data[view * n..(view + 1) * n]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        let (a, b) = (&self.geometry, &other.geometry);
        if a.n_views != b.n_views || a.detector != b.detector {
            return Err(Error::ShapeMismatch(format!(
                "{} views of {:?} vs {} views of {:?}",
                a.n_views, a.detector, b.n_views, b.detector
            )));
        }
        Ok(())
    }
}

/// Per-view k-channel images. Channel 0 holds the largest sample.
///
/// Layout is `(view, channel, v, u)`, so each channel is a contiguous image.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKStack {
    geometry: ProjectionGeometry,
    k: usize,
    data: Vec<f32>,
}

impl TopKStack {
    pub fn new(geometry: ProjectionGeometry, k: usize, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let expected = geometry.n_rays() * k;
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: data.len() });
        }
        Ok(Self { geometry, k, data })
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, view: usize, c: usize) -> &[f32] {
        let n = self.geometry.pixels_per_view();
        let start = (view * self.k + c) * n;
        &self.data[start..start + n]
    }

    /// The k samples of pixel `(iu, iv)` of `view`, largest first.
    pub fn pixel(&self, view: usize, iu: usize, iv: usize) -> impl Iterator<Item = f32> + '_ {
        let n = self.geometry.pixels_per_view();
        let p = iv * self.geometry.nu() + iu;
        (0..self.k).map(move |c| self.data[(view * self.k + c) * n + p])
    }

    /// Per-pixel sum over channels.
    pub fn channel_sum(&self) -> ProjectionStack {
        let n = self.geometry.pixels_per_view();
        let mut out = vec![0.0f32; self.geometry.n_rays()];
        for view in 0..self.n_views() {
            let dst = &mut out[view * n..(view + 1) * n];
            for c in 0..self.k {
                for (d, &s) in dst.iter_mut().zip(self.channel(view, c)) {
                    *d += s;
                }
            }
        }
        ProjectionStack { geometry: self.geometry.clone(), data: out }
    }
}

/// Line integrals `Σ Δl · μ` of `v` over every ray of `geometry`.
pub fn integral_projection(v: &Volume, geometry: &ProjectionGeometry) -> Result<ProjectionStack> {
    let projector = SliceProjector::new(geometry, &Grid::of(v))?;
    forward_apply(&projector, v)
}

/// [`integral_projection`] with a prebuilt projector.
pub fn integral_projection_with(projector: &dyn Projector, v: &Volume) -> Result<ProjectionStack> {
    forward_apply(projector, v)
}

/// Transmitted intensities `R = R₀ · exp(−Σ Δl μ)` for each pixel of a line-integral stack.
pub fn simulate_transmission(stack: &ProjectionStack, r0: f64) -> Result<Vec<f64>> {
    check_r0(r0)?;
    Ok(stack.data.iter().map(|&p| r0 * (-(p as f64)).exp()).collect())
}

/// Line integrals `−ln(R / R₀)` from transmitted intensities.
pub fn line_integrals(transmission: &[f64], r0: f64, geometry: ProjectionGeometry) -> Result<ProjectionStack> {
    check_r0(r0)?;
    if let Some(bad) = transmission.iter().find(|&&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::NonFinite(format!("transmitted intensity {bad} is not positive")));
    }
    let data = transmission.iter().map(|&r| (-(r / r0).ln()) as f32).collect();
    ProjectionStack::new(geometry, data)
}

/// Round trip of a line-integral stack through the transmission model.
pub fn beer_lambert_form(stack: &ProjectionStack, r0: f64) -> Result<ProjectionStack> {
    let r = simulate_transmission(stack, r0)?;
    line_integrals(&r, r0, stack.geometry.clone())
}

fn check_r0(r0: f64) -> Result<()> {
    if r0 > 0.0 && r0.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("reference intensity R0 must be positive, got {r0}")))
    }
}

/// Heap entry ordered by sample value, then by earlier position along the ray.
#[derive(Debug, Clone, Copy)]
struct Sample {
    value: f64,
    pos: usize,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Sample {}

impl PartialOrd for Sample {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Sample {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then_with(|| other.pos.cmp(&self.pos))
    }
}

/// Sorts the `k` largest of `samples` to the front, largest first.
fn select_top(samples: &mut [Sample], k: usize) -> &[Sample] {
    let k = k.min(samples.len());
    if k < samples.len() {
        samples.select_nth_unstable_by(k, |a, b| b.cmp(a));
    }
    let top = &mut samples[..k];
    top.sort_unstable_by(|a, b| b.cmp(a));
    top
}

/// Top-k maximum intensity projection of `v`.
pub fn topk_mip(v: &Volume, geometry: &ProjectionGeometry, k: usize) -> Result<TopKStack> {
    let projector = SliceProjector::new(geometry, &Grid::of(v))?;
    topk_mip_with(&projector, v, k)
}

/// [`topk_mip`] with a prebuilt projector.
pub fn topk_mip_with(projector: &SliceProjector, v: &Volume, k: usize) -> Result<TopKStack> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let grid = projector.grid();
    if grid.dims != v.dims() || grid.spacing != v.spacing() {
        return Err(Error::DimMismatch { left: grid.dims, right: v.dims() });
    }
    let geometry = projector.geometry();
    let (nu, nv) = (geometry.nu(), geometry.nv());
    let n = nu * nv;
    let nxy = grid.slice_len();
    let x = v.data();
    let mut data = vec![0.0f32; geometry.n_rays() * k];
    for_each_chunk(&mut data, n * k, |view, chunk| {
        let mut samples = Vec::new();
        for iv in 0..nv {
            let Some(slice) = projector.row_slice(iv) else { continue };
            let plane = &x[slice * nxy..(slice + 1) * nxy];
            for iu in 0..nu {
                let (idx, len) = projector.in_plane(view, iu);
                samples.clear();
                samples.extend(
                    idx.iter()
                        .zip(len)
                        .enumerate()
                        .map(|(pos, (&i, &l))| Sample { value: l * plane[i as usize] as f64, pos }),
                );
                for (c, s) in select_top(&mut samples, k).iter().enumerate() {
                    chunk[c * n + iv * nu + iu] = s.value as f32;
                }
            }
        }
    });
    TopKStack::new(geometry.clone(), k, data)
}

/// Min-max scales `values` to 8-bit grey levels, rounding to nearest.
///
/// A constant image maps to all zeros.
pub fn to_gray8(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi as f64 - lo as f64;
    if !(range > 0.0) {
        return vec![0; values.len()];
    }
    values.iter().map(|&x| ((x as f64 - lo as f64) / range * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{trace_ray, SystemMatrix};
    use crate::VolumeKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64, binary: bool) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let data =
            (0..n).map(|_| if binary { rng.random_bool(0.3) as u8 as f32 } else { rng.random::<f32>() }).collect();
        let kind = if binary { VolumeKind::BinaryMask } else { VolumeKind::Intensity };
        Volume::new(dims, [1.0; 3], kind, data).unwrap()
    }

    fn geom12(dims: [usize; 3]) -> ProjectionGeometry {
        ProjectionGeometry::for_dims(dims).with_views(12, 0.0, 15.0).unwrap()
    }

    #[test]
    fn single_voxel_unit_chord() {
        let v = Volume::filled([1, 1, 1], 1.0).unwrap();
        let g = ProjectionGeometry::new(1, 0.0, 1.0, [1, 1], [1.0, 1.0]).unwrap();
        let p = integral_projection(&v, &g).unwrap();
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn empty_volume_projects_to_zero() {
        let v = Volume::zeros([6, 6, 6], VolumeKind::BinaryMask).unwrap();
        let p = integral_projection(&v, &geom12([6, 6, 6])).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_dense_matrix_oracle() {
        let v = random_volume([8, 8, 8], 5, true);
        let g = geom12([8, 8, 8]);
        let a = SystemMatrix::build(&g, &Grid::of(&v)).unwrap();
        // dense row-by-row multiply in f64
        let dense: Vec<f64> = (0..a.n_rows()).map(|r| a.row(r).map(|(i, l)| l * v.data()[i] as f64).sum()).collect();
        let p = integral_projection(&v, &g).unwrap();
        for (x, y) in p.data().iter().zip(&dense) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn beer_lambert_examples() {
        let g = ProjectionGeometry::new(1, 0.0, 1.0, [2, 1], [1.0, 1.0]).unwrap();
        let s = ProjectionStack::new(g.clone(), vec![0.0, 3.0]).unwrap();
        let r = simulate_transmission(&s, 1.0).unwrap();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - (-3.0f64).exp()).abs() < 1e-15);
        let back = beer_lambert_form(&s, 1.0).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert!((back.data()[1] - 3.0).abs() < 1e-6);
        assert!(beer_lambert_form(&s, 0.0).is_err());
        assert!(line_integrals(&[1.0, -1.0], 1.0, g).is_err());
    }

    #[test]
    fn beer_lambert_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ProjectionGeometry::new(3, 0.0, 10.0, [5, 4], [1.0, 1.0]).unwrap();
        let s = ProjectionStack::new(g, (0..60).map(|_| rng.random_range(0.0..20.0)).collect()).unwrap();
        for r0 in [1.0, 1e4] {
            let back = beer_lambert_form(&s, r0).unwrap();
            for (a, b) in s.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-5_f32.max(1e-6 * a.abs()));
            }
        }
    }

    #[test]
    fn topk_small_example() {
        // four voxels along one ray with values 0..3
        let v = Volume::new([4, 1, 1], [1.0; 3], VolumeKind::Intensity, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = ProjectionGeometry::new(1, 0.0, 1.0, [1, 1], [1.0, 1.0]).unwrap();
        let t = topk_mip(&v, &g, 2).unwrap();
        assert_eq!(t.pixel(0, 0, 0).collect::<Vec<_>>(), vec![3.0, 2.0]);
        let t = topk_mip(&v, &g, 6).unwrap();
        assert_eq!(t.pixel(0, 0, 0).collect::<Vec<_>>(), vec![3.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(topk_mip(&v, &g, 0).is_err());
    }

    #[test]
    fn topk_full_sort_oracle() {
        let v = random_volume([8, 8, 8], 21, false);
        let g = geom12([8, 8, 8]);
        let grid = Grid::of(&v);
        let k = 8 * 3;
        let t = topk_mip(&v, &g, k).unwrap();
        for view in 0..12 {
            for iv in 0..8 {
                for iu in 0..8 {
                    let mut samples: Vec<f32> = trace_ray(&g.ray(view, iu, iv, &grid), &grid)
                        .iter()
                        .map(|h| (h.length * v.data()[h.index] as f64) as f32)
                        .collect();
                    samples.sort_by(|a, b| b.total_cmp(a));
                    samples.resize(k, 0.0);
                    assert_eq!(t.pixel(view, iu, iv).collect::<Vec<_>>(), samples);
                }
            }
        }
    }

    #[test]
    fn topk_ties_prefer_earlier_samples() {
        let mut samples: Vec<Sample> = (0..5).map(|pos| Sample { value: 1.0, pos }).collect();
        let kept: Vec<usize> = select_top(&mut samples, 2).iter().map(|s| s.pos).collect();
        assert_eq!(kept, vec![0, 1]);
        let mut short = vec![Sample { value: 1.0, pos: 0 }, Sample { value: 3.0, pos: 1 }];
        assert_eq!(select_top(&mut short, 4).iter().map(|s| s.value).collect::<Vec<_>>(), vec![3.0, 1.0]);
    }

    #[test]
    fn channel_sum_bounded_by_integral() {
        let v = random_volume([8, 8, 8], 4, false);
        let g = geom12([8, 8, 8]);
        let ip = integral_projection(&v, &g).unwrap();
        let t = topk_mip(&v, &g, 4).unwrap();
        let s = t.channel_sum();
        for (a, b) in s.data().iter().zip(ip.data()) {
            assert!(*a as f64 <= *b as f64 * (1.0 + 1e-6) + 1e-6);
        }
    }

    #[test]
    fn gray8_conventions() {
        assert_eq!(to_gray8(&[3.0; 5]), vec![0; 5]);
        assert_eq!(to_gray8(&[0.0, 10.0, 10.0, 0.0]), vec![0, 255, 255, 0]);
        assert_eq!(to_gray8(&[0.0, 5.0, 10.0]), vec![0, 128, 255]);
    }
}
