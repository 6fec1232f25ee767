//! Per-keypoint displacement cost maps over a discrete candidate lattice,
//! and the soft-/hard-argmin decoders that turn a cost map back into a
//! displacement vector.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::DescriptorField;
use crate::io::rawmeta::{RawDtype, RawMetaArray};
use crate::keypoints::KeypointSet;

/// Discrete displacement candidates: (2L+1)^3 integer offsets with
/// components in {-Lq, ..., -q, 0, q, ..., Lq}, stored x-fastest /
/// z-slowest. Index 0 is (-Lq, -Lq, -Lq); the center index holds (0,0,0).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementLattice {
    radius_steps: usize,
    step_voxels: usize,
    offsets: Vec<[i32; 3]>,
}

impl DisplacementLattice {
    pub fn new(radius_steps: usize, step_voxels: usize) -> Result<Self> {
        if step_voxels < 1 {
            return Err(Error::Invalid("lattice step must be >= 1".into()));
        }
        let l = radius_steps as i32;
        let q = step_voxels as i32;
        let mut offsets = Vec::with_capacity((2 * radius_steps + 1).pow(3));
        for dz in -l..=l {
            for dy in -l..=l {
                for dx in -l..=l {
                    offsets.push([dx * q, dy * q, dz * q]);
                }
            }
        }
        Ok(Self {
            radius_steps,
            step_voxels,
            offsets,
        })
    }

    pub fn radius_steps(&self) -> usize {
        self.radius_steps
    }

    pub fn step_voxels(&self) -> usize {
        self.step_voxels
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// Number of candidates D = (2L+1)^3.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center_index(&self) -> usize {
        (self.offsets.len() - 1) / 2
    }

    /// Capture range: the largest representable |component| in voxels.
    pub fn bound_voxels(&self) -> f64 {
        (self.radius_steps * self.step_voxels) as f64
    }
}

/// Cost maps for N keypoints over a shared lattice: `costs[[n, d]]` is the
/// dissimilarity of keypoint n under offset d. Keypoints whose fixed patch
/// left the descriptor lattice are dropped; `excluded` counts them.
#[derive(Debug, Clone)]
pub struct CostMapSet {
    pub keypoints: KeypointSet,
    pub lattice: DisplacementLattice,
    pub costs: Array2<f64>,
    pub excluded: usize,
}

impl CostMapSet {
    pub fn to_rawmeta(&self) -> RawMetaArray {
        RawMetaArray {
            dims: [self.lattice.len(), self.costs.nrows(), 1],
            spacing: [1.0; 3],
            channels: 1,
            dtype: RawDtype::Float32,
            data: self.costs.iter().map(|&v| v as f32).collect(),
            extra: vec![
                (
                    "lattice_radius_steps".into(),
                    self.lattice.radius_steps().to_string(),
                ),
                (
                    "lattice_step_voxels".into(),
                    self.lattice.step_voxels().to_string(),
                ),
            ],
        }
    }
}

/// Mean SSD over a (2*patch_radius_f+1)^3 descriptor-lattice patch and all
/// channels, between the fixed patch at each keypoint and the moving patch
/// displaced by every lattice offset. Moving samples are edge-replicated;
/// keypoints whose fixed patch exits the lattice are excluded.
pub fn build_cost_maps(
    fixed: &DescriptorField,
    moving: &DescriptorField,
    kps: &KeypointSet,
    lattice: &DisplacementLattice,
    patch_radius_f: usize,
) -> Result<CostMapSet> {
    if fixed.stride != moving.stride {
        return Err(Error::Dimension(format!(
            "stride mismatch: fixed {} vs moving {}",
            fixed.stride, moving.stride
        )));
    }
    if fixed.channels != moving.channels {
        return Err(Error::Dimension(format!(
            "channel mismatch: fixed {} vs moving {}",
            fixed.channels, moving.channels
        )));
    }
    let stride = fixed.stride as f64;
    let pf = patch_radius_f as i64;

    // nearest descriptor-lattice point for each keypoint; drop keypoints
    // whose fixed patch would leave the lattice
    let mut centers = Vec::new();
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    let mut excluded = 0usize;
    for (n, c) in kps.coords.iter().enumerate() {
        let mut lc = [0i64; 3];
        let mut ok = true;
        for a in 0..3 {
            let p = ((c[a] as f64 - fixed.origin_offset[a] as f64) / stride).round() as i64;
            if p - pf < 0 || p + pf >= fixed.grid_dims[a] as i64 {
                ok = false;
                break;
            }
            lc[a] = p;
        }
        if ok {
            centers.push(lc);
            coords.push(*c);
            scores.push(kps.scores[n]);
        } else {
            excluded += 1;
        }
    }

    let d = lattice.len();
    let c_count = fixed.channels;
    let patch: Vec<[i64; 3]> = {
        let mut v = Vec::new();
        for dk in -pf..=pf {
            for dj in -pf..=pf {
                for di in -pf..=pf {
                    v.push([di, dj, dk]);
                }
            }
        }
        v
    };
    let norm = (patch.len() * c_count) as f64;

    let rows: Vec<Vec<f64>> = centers
        .par_iter()
        .enumerate()
        .map(|(n, lc)| {
            let kp = coords[n];
            // nearest moving lattice point per offset; when the lattice step
            // is finer than the descriptor stride, several offsets round to
            // the same cell, so the patch SSD is computed once per distinct
            // cell and shared
            let mcs: Vec<[i64; 3]> = lattice
                .offsets()
                .iter()
                .map(|off| {
                    let mut mc = [0i64; 3];
                    for a in 0..3 {
                        mc[a] = ((kp[a] as f64 + off[a] as f64
                            - moving.origin_offset[a] as f64)
                            / stride)
                            .round() as i64;
                    }
                    mc
                })
                .collect();
            let mut lo = [i64::MAX; 3];
            let mut hi = [i64::MIN; 3];
            for mc in &mcs {
                for a in 0..3 {
                    lo[a] = lo[a].min(mc[a]);
                    hi[a] = hi[a].max(mc[a]);
                }
            }
            let ext = [
                (hi[0] - lo[0] + 1) as usize,
                (hi[1] - lo[1] + 1) as usize,
                (hi[2] - lo[2] + 1) as usize,
            ];
            let mut cache = vec![f64::NAN; ext[0] * ext[1] * ext[2]];
            let mut row = vec![0f64; d];
            for (di, mc) in mcs.iter().enumerate() {
                let ci = (mc[0] - lo[0]) as usize
                    + ext[0] * ((mc[1] - lo[1]) as usize + ext[1] * (mc[2] - lo[2]) as usize);
                if cache[ci].is_nan() {
                    let mut acc = 0f64;
                    for p in &patch {
                        let fi = [
                            (lc[0] + p[0]) as usize,
                            (lc[1] + p[1]) as usize,
                            (lc[2] + p[2]) as usize,
                        ];
                        let fb = fixed.lattice_index(fi[0], fi[1], fi[2]) * c_count;
                        let mi = [
                            (mc[0] + p[0]).clamp(0, moving.grid_dims[0] as i64 - 1) as usize,
                            (mc[1] + p[1]).clamp(0, moving.grid_dims[1] as i64 - 1) as usize,
                            (mc[2] + p[2]).clamp(0, moving.grid_dims[2] as i64 - 1) as usize,
                        ];
                        let mb = moving.lattice_index(mi[0], mi[1], mi[2]) * c_count;
                        for c in 0..c_count {
                            let diff = (fixed.values[fb + c] - moving.values[mb + c]) as f64;
                            acc += diff * diff;
                        }
                    }
                    cache[ci] = acc / norm;
                }
                row[di] = cache[ci];
            }
            row
        })
        .collect();

    let n = rows.len();
    let mut costs = Array2::zeros((n, d));
    for (i, row) in rows.into_iter().enumerate() {
        costs.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    Ok(CostMapSet {
        keypoints: KeypointSet { coords, scores },
        lattice: lattice.clone(),
        costs,
        excluded,
    })
}

/// Softmax-weighted expectation of lattice offsets under negated costs,
/// computed with max-subtraction. The output lies in the convex hull of
/// the offsets, so every component is within [-Lq, Lq].
pub fn soft_argmin(costs: &[f64], lattice: &DisplacementLattice, temperature: f64) -> [f64; 3] {
    assert!(temperature > 0.0, "temperature must be > 0");
    assert_eq!(costs.len(), lattice.len(), "cost map length mismatch");
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut wsum = 0f64;
    let mut acc = [0f64; 3];
    for (c, off) in costs.iter().zip(lattice.offsets()) {
        let w = (-(c - min) / temperature).exp();
        wsum += w;
        acc[0] += w * off[0] as f64;
        acc[1] += w * off[1] as f64;
        acc[2] += w * off[2] as f64;
    }
    [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]
}

/// Offset of the minimum cost; ties resolve to the lowest offset index.
pub fn hard_argmin(costs: &[f64], lattice: &DisplacementLattice) -> [i32; 3] {
    assert_eq!(costs.len(), lattice.len(), "cost map length mismatch");
    let mut best = 0usize;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    lattice.offsets()[best]
}

/// Sparse displacement estimates at the cost-map keypoints, voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDisplacements {
    pub keypoints: KeypointSet,
    pub vectors: Vec<[f32; 3]>,
}
