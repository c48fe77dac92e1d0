//! Dense 3D scalar volumes.
//!
//! Voxels are stored row-major with x fastest: the linear index of voxel
//! `(i, j, k)` is `i + nx * (j + ny * k)`. Spacing is in millimetres.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Role of a volume's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    /// CT intensities, reconstructions, any real-valued field.
    Intensity,
    /// Only 0.0 and 1.0.
    #[serde(rename = "mask")]
    BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    kind: VolumeKind,
    data: Vec<f32>,
}

pub(crate) fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidDims(dims));
    }
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(Error::InvalidDims(dims))
}

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|&s| s.is_finite() && s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

fn check_binary(data: &[f32]) -> Result<()> {
    match data.iter().position(|&x| x != 0.0 && x != 1.0) {
        None => Ok(()),
        Some(i) => Err(Error::NotBinary(format!("voxel {i} has value {}", data[i]))),
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: data.len() });
        }
        if kind == VolumeKind::BinaryMask {
            check_binary(&data)?;
        }
        Ok(Self { dims, spacing, kind, data })
    }

    /// All-zero volume with unit spacing.
    pub fn zeros(dims: [usize; 3], kind: VolumeKind) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self { dims, spacing: [1.0; 3], kind, data: vec![0.0; n] })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self { dims, spacing: [1.0; 3], kind: VolumeKind::Intensity, data: vec![value; n] })
    }

    /// Builds a mask from a predicate over voxel indices `(i, j, k)`.
    pub fn mask_from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let n = check_dims(dims)?;
        let mut data = Vec::with_capacity(n);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(if f(i, j, k) { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(Self { dims, spacing: [1.0; 3], kind: VolumeKind::BinaryMask, data })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Reinterprets the volume as an intensity field.
    pub fn into_intensity(mut self) -> Self {
        self.kind = VolumeKind::Intensity;
        self
    }

    /// Reinterprets the volume as a mask, failing unless every value is 0 or 1.
    pub fn into_mask(mut self) -> Result<Self> {
        check_binary(&self.data)?;
        self.kind = VolumeKind::BinaryMask;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn is_mask(&self) -> bool {
        self.kind == VolumeKind::BinaryMask
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }

    /// Affine rescale of the values to [0, 1]. Constant volumes map to 0.
    pub fn min_max_normalized(&self) -> Self {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&x| (x - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Self { dims: self.dims, spacing: self.spacing, kind: VolumeKind::Intensity, data }
    }

    pub(crate) fn map_data(&self, kind: VolumeKind, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { dims: self.dims, spacing: self.spacing, kind, data }
    }
}

/// Elementwise product with a binary mask; keeps the input's kind.
pub fn apply_mask(v: &Volume, mask: &Volume) -> Result<Volume> {
    if v.dims != mask.dims {
        return Err(Error::DimMismatch { left: v.dims, right: mask.dims });
    }
    if !mask.is_mask() {
        return Err(Error::NotBinary("mask volume has intensity kind".into()));
    }
    let data = v.data.iter().zip(&mask.data).map(|(&a, &m)| a * m).collect();
    Ok(v.map_data(v.kind, data))
}

/// Source coordinate (in voxel units, centers at integers) of target voxel `i`.
#[inline]
fn source_coord(i: usize, n_src: usize, n_dst: usize) -> f64 {
    (i as f64 + 0.5) * (n_src as f64 / n_dst as f64) - 0.5
}

/// Resizes to `target` voxels per axis, covering the same physical extent.
///
/// Intensity volumes use trilinear interpolation with edge clamping; masks use
/// nearest neighbour so the result stays binary.
pub fn resample(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let n = check_dims(target)?;
    let src = v.dims;
    let spacing = [
        v.spacing[0] * src[0] as f64 / target[0] as f64,
        v.spacing[1] * src[1] as f64 / target[1] as f64,
        v.spacing[2] * src[2] as f64 / target[2] as f64,
    ];
    if src == target {
        return Ok(v.clone());
    }
    let mut data = Vec::with_capacity(n);
    match v.kind {
        VolumeKind::BinaryMask => {
            let nearest = |i: usize, a: usize| -> usize {
                let c = ((i as f64 + 0.5) * src[a] as f64 / target[a] as f64).floor() as usize;
                c.min(src[a] - 1)
            };
            for k in 0..target[2] {
                let sk = nearest(k, 2);
                for j in 0..target[1] {
                    let sj = nearest(j, 1);
                    for i in 0..target[0] {
                        data.push(v.get(nearest(i, 0), sj, sk));
                    }
                }
            }
        }
        VolumeKind::Intensity => {
            // (lower index, upper index, weight of upper)
            let axis = |a: usize| -> Vec<(usize, usize, f64)> {
                (0..target[a])
                    .map(|i| {
                        let c = source_coord(i, src[a], target[a]).clamp(0.0, (src[a] - 1) as f64);
                        let lo = c.floor() as usize;
                        let hi = (lo + 1).min(src[a] - 1);
                        (lo, hi, c - lo as f64)
                    })
                    .collect()
            };
            let (ax, ay, az) = (axis(0), axis(1), axis(2));
            let at = |i, j, k| v.get(i, j, k) as f64;
            for &(k0, k1, wz) in &az {
                for &(j0, j1, wy) in &ay {
                    for &(i0, i1, wx) in &ax {
                        let c00 = at(i0, j0, k0) * (1.0 - wx) + at(i1, j0, k0) * wx;
                        let c10 = at(i0, j1, k0) * (1.0 - wx) + at(i1, j1, k0) * wx;
                        let c01 = at(i0, j0, k1) * (1.0 - wx) + at(i1, j0, k1) * wx;
                        let c11 = at(i0, j1, k1) * (1.0 - wx) + at(i1, j1, k1) * wx;
                        let c0 = c00 * (1.0 - wy) + c10 * wy;
                        let c1 = c01 * (1.0 - wy) + c11 * wy;
                        data.push((c0 * (1.0 - wz) + c1 * wz) as f32);
                    }
                }
            }
        }
    }
    Ok(Volume { dims: target, spacing, kind: v.kind, data })
}
