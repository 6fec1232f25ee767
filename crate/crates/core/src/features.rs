//! Self-similarity descriptors on a stride-s lattice.
//!
//! Each lattice point carries one channel per neighborhood offset:
//! `exp(-Dp(x, x+r) / V(x))`, where `Dp` is the box-weighted SSD between
//! the patches at `x` and `x+r` and `V(x)` is the channel-mean of `Dp`,
//! floored at a small epsilon. Channels are then divided by their
//! per-point maximum, so the largest channel is exactly 1. The variance
//! normalization makes the descriptor invariant to affine intensity
//! changes of the input.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::rawmeta::{RawDtype, RawMetaArray};
use crate::volume::{IntensityUnit, Volume3};

const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    /// The six unit offsets along the coordinate axes.
    SixNn,
    /// The twelve sqrt(2) diagonal offsets (cube edge midpoints), the
    /// 12-channel self-similarity-context variant.
    Ssc12,
}

impl Neighborhood {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Neighborhood::SixNn => vec![
                [-1, 0, 0],
                [1, 0, 0],
                [0, -1, 0],
                [0, 1, 0],
                [0, 0, -1],
                [0, 0, 1],
            ],
            Neighborhood::Ssc12 => vec![
                [-1, -1, 0],
                [-1, 1, 0],
                [1, -1, 0],
                [1, 1, 0],
                [-1, 0, -1],
                [-1, 0, 1],
                [1, 0, -1],
                [1, 0, 1],
                [0, -1, -1],
                [0, -1, 1],
                [0, 1, -1],
                [0, 1, 1],
            ],
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Neighborhood::SixNn => 6,
            Neighborhood::Ssc12 => 12,
        }
    }
}

/// Multi-channel descriptors sampled on a stride-s lattice of a volume.
/// Values are stored lattice-point-major: `values[(lattice index) * C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    pub stride: usize,
    pub grid_dims: [usize; 3],
    pub channels: usize,
    pub origin_offset: [usize; 3],
    pub values: Vec<f32>,
}

impl DescriptorField {
    #[inline]
    pub fn lattice_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid_dims[0] * (j + self.grid_dims[1] * k)
    }

    #[inline]
    pub fn descriptor(&self, i: usize, j: usize, k: usize) -> &[f32] {
        let base = self.lattice_index(i, j, k) * self.channels;
        &self.values[base..base + self.channels]
    }

    pub fn to_rawmeta(&self) -> RawMetaArray {
        RawMetaArray {
            dims: self.grid_dims,
            spacing: [self.stride as f32; 3],
            channels: self.channels,
            dtype: RawDtype::Float32,
            data: self.values.clone(),
            extra: vec![("stride".into(), self.stride.to_string())],
        }
    }
}

/// Clamp intensities to `[clamp_lo, clamp_hi]` HU and map affinely to [0,1].
pub fn preprocess_ct(vol: &Volume3, clamp_lo: f32, clamp_hi: f32) -> Result<Volume3> {
    if !(clamp_lo < clamp_hi) {
        return Err(Error::Invalid(format!(
            "clamp_lo ({clamp_lo}) must be below clamp_hi ({clamp_hi})"
        )));
    }
    let span = clamp_hi - clamp_lo;
    let voxels = vol
        .voxels()
        .iter()
        .map(|&v| (v.clamp(clamp_lo, clamp_hi) - clamp_lo) / span)
        .collect();
    Volume3::new(vol.dims(), vol.spacing(), voxels, IntensityUnit::Normalized)
}

/// Compute descriptors on the stride-s lattice with origin 0.
/// Patch samples are edge-replicated; the volume must still be large
/// enough to hold one full patch plus the largest neighborhood offset.
pub fn compute_mind(
    vol: &Volume3,
    stride: usize,
    patch_radius: usize,
    neighborhood: Neighborhood,
) -> Result<DescriptorField> {
    if stride < 1 {
        return Err(Error::Invalid("stride must be >= 1".into()));
    }
    let offsets = neighborhood.offsets();
    let channels = offsets.len();
    let max_off = offsets
        .iter()
        .flat_map(|o| o.iter().map(|c| c.unsigned_abs() as usize))
        .max()
        .unwrap();
    let dims = vol.dims();
    let needed = 2 * patch_radius + 1 + max_off;
    for a in 0..3 {
        if dims[a] < needed {
            return Err(Error::Dimension(format!(
                "axis {a} has {} voxels, need at least {needed} for patch radius {patch_radius}",
                dims[a]
            )));
        }
    }

    let grid_dims = [dims[0] / stride, dims[1] / stride, dims[2] / stride];
    let n_points = grid_dims[0] * grid_dims[1] * grid_dims[2];
    let pr = patch_radius as i64;

    let values: Vec<f32> = (0..n_points)
        .into_par_iter()
        .flat_map_iter(|idx| {
            let gi = idx % grid_dims[0];
            let gj = (idx / grid_dims[0]) % grid_dims[1];
            let gk = idx / (grid_dims[0] * grid_dims[1]);
            let x = [
                (gi * stride) as i64,
                (gj * stride) as i64,
                (gk * stride) as i64,
            ];
            let mut dists = vec![0f64; channels];
            for (c, off) in offsets.iter().enumerate() {
                let mut acc = 0f64;
                let mut count = 0f64;
                for dk in -pr..=pr {
                    for dj in -pr..=pr {
                        for di in -pr..=pr {
                            let a = vol.get_clamped(x[0] + di, x[1] + dj, x[2] + dk) as f64;
                            let b = vol.get_clamped(
                                x[0] + off[0] + di,
                                x[1] + off[1] + dj,
                                x[2] + off[2] + dk,
                            ) as f64;
                            acc += (a - b) * (a - b);
                            count += 1.0;
                        }
                    }
                }
                dists[c] = acc / count;
            }
            let variance = (dists.iter().sum::<f64>() / channels as f64).max(VARIANCE_FLOOR);
            let raw: Vec<f64> = dists.iter().map(|&d| (-d / variance).exp()).collect();
            let max = raw.iter().cloned().fold(f64::MIN, f64::max);
            raw.into_iter().map(move |v| (v / max) as f32)
        })
        .collect();

    Ok(DescriptorField {
        stride,
        grid_dims,
        channels,
        origin_offset: [0, 0, 0],
        values,
    })
}
