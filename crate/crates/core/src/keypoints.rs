//! Distinctive fixed-image keypoints: Foerstner interest scores from the
//! smoothed structure tensor, then greedy non-maximum suppression.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::gaussian_smooth;
use crate::volume::{IntensityUnit, Volume3};

const TENSOR_REG: f64 = 1e-9;

/// Selected keypoints on the fixed grid, scores sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<[usize; 3]>,
    pub scores: Vec<f32>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Foerstner score volume: `1 / trace(S(x)^-1)` with S the
/// Gaussian-smoothed structure tensor of the image gradients.
/// `grad_sigma` smooths the image before differentiation, `sigma` smooths
/// the tensor components; both are given in mm.
pub fn foerstner_scores(vol: &Volume3, sigma_mm: f32, grad_sigma_mm: f32) -> Result<Volume3> {
    if !(sigma_mm > 0.0) || !(grad_sigma_mm > 0.0) {
        return Err(Error::Invalid("sigma and grad_sigma must be > 0".into()));
    }
    let dims = vol.dims();
    let spacing = vol.spacing();
    let grad_sigma_vox = [
        grad_sigma_mm / spacing[0],
        grad_sigma_mm / spacing[1],
        grad_sigma_mm / spacing[2],
    ];
    let sigma_vox = [
        sigma_mm / spacing[0],
        sigma_mm / spacing[1],
        sigma_mm / spacing[2],
    ];

    let smooth = gaussian_smooth(vol.voxels(), dims, grad_sigma_vox);
    let sv = Volume3::new(dims, spacing, smooth, vol.intensity_unit())?;

    let n = sv.len();
    let [nx, ny, _nz] = dims;
    // gradient in intensity per mm, clamped central differences
    let grads: Vec<[f32; 3]> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let i = (idx % nx) as i64;
            let j = ((idx / nx) % ny) as i64;
            let k = (idx / (nx * ny)) as i64;
            [
                (sv.get_clamped(i + 1, j, k) - sv.get_clamped(i - 1, j, k)) / (2.0 * spacing[0]),
                (sv.get_clamped(i, j + 1, k) - sv.get_clamped(i, j - 1, k)) / (2.0 * spacing[1]),
                (sv.get_clamped(i, j, k + 1) - sv.get_clamped(i, j, k - 1)) / (2.0 * spacing[2]),
            ]
        })
        .collect();

    // six unique tensor components, smoothed independently
    let comps: Vec<Vec<f32>> = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(a, b)| {
            let raw: Vec<f32> = grads.iter().map(|g| g[a] * g[b]).collect();
            gaussian_smooth(&raw, dims, sigma_vox)
        })
        .collect();

    let scores: Vec<f32> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let xx = comps[0][idx] as f64 + TENSOR_REG;
            let yy = comps[1][idx] as f64 + TENSOR_REG;
            let zz = comps[2][idx] as f64 + TENSOR_REG;
            let xy = comps[3][idx] as f64;
            let xz = comps[4][idx] as f64;
            let yz = comps[5][idx] as f64;
            // trace(S^-1) = sum of diagonal cofactors / det
            let det = xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz)
                + xz * (xy * yz - yy * xz);
            let cof = (yy * zz - yz * yz) + (xx * zz - xz * xz) + (xx * yy - xy * xy);
            if !det.is_finite() || !cof.is_finite() || det <= 0.0 || cof <= 0.0 {
                0.0
            } else {
                (det / cof) as f32
            }
        })
        .collect();

    Volume3::new(dims, spacing, scores, IntensityUnit::Arbitrary)
}

/// Greedy descending-score selection. A candidate is skipped when it lies
/// within Chebyshev distance `nms_radius` (inclusive) of an accepted point
/// or outside the mask. Ties are broken lexicographically on (i, j, k).
pub fn select_keypoints(
    scores: &Volume3,
    mask: Option<&Volume3>,
    target_count: usize,
    nms_radius: usize,
) -> Result<KeypointSet> {
    if target_count < 1 {
        return Err(Error::Invalid("target_count must be >= 1".into()));
    }
    if nms_radius < 1 {
        return Err(Error::Invalid("nms_radius must be >= 1".into()));
    }
    if let Some(m) = mask {
        if m.dims() != scores.dims() {
            return Err(Error::Dimension("mask dims must match score volume".into()));
        }
    }
    let [nx, ny, nz] = scores.dims();
    let mut candidates: Vec<(f32, [usize; 3])> = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let s = scores.get(i, j, k);
                if s <= 0.0 {
                    continue;
                }
                if let Some(m) = mask {
                    if m.get(i, j, k) <= 0.0 {
                        continue;
                    }
                }
                candidates.push((s, [i, j, k]));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Invalid(
            "no keypoint candidates under the mask; registration cannot proceed".into(),
        ));
    }
    candidates.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let cell = nms_radius + 1;
    let mut grid: HashMap<[usize; 3], Vec<[usize; 3]>> = HashMap::new();
    let mut coords = Vec::new();
    let mut out_scores = Vec::new();
    'next: for (s, c) in candidates {
        let cc = [c[0] / cell, c[1] / cell, c[2] / cell];
        for dk in cc[2].saturating_sub(1)..=cc[2] + 1 {
            for dj in cc[1].saturating_sub(1)..=cc[1] + 1 {
                for di in cc[0].saturating_sub(1)..=cc[0] + 1 {
                    if let Some(pts) = grid.get(&[di, dj, dk]) {
                        for p in pts {
                            let d = cheb(*p, c);
                            if d <= nms_radius {
                                continue 'next;
                            }
                        }
                    }
                }
            }
        }
        grid.entry(cc).or_default().push(c);
        coords.push(c);
        out_scores.push(s);
        if coords.len() == target_count {
            break;
        }
    }
    Ok(KeypointSet {
        coords,
        scores: out_scores,
    })
}

fn cheb(a: [usize; 3], b: [usize; 3]) -> usize {
    (0..3)
        .map(|x| a[x].abs_diff(b[x]))
        .max()
        .unwrap()
}
