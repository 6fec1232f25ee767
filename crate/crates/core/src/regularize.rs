//! Keypoint-graph regularization: kNN graph construction, anchored
//! graph-Laplacian diffusion of embedded cost codes (optionally of the
//! decoded vectors), and extrapolation of sparse displacements to a dense
//! field plus backward warping.

use ndarray::Array2;
use rayon::prelude::*;

use crate::correspondence::{soft_argmin, CostMapSet, SparseDisplacements};
use crate::embedding::{decode, encode, Embedding};
use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::volume::{DenseField, Volume3};

/// Symmetric kNN graph over keypoint coordinates in mm with Gaussian edge
/// weights `exp(-|xi - xj|^2 / (2 h^2))`.
#[derive(Debug, Clone)]
pub struct KeypointGraph {
    n: usize,
    /// adjacency lists sorted by neighbor index; weights symmetric
    neighbors: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    bandwidth_mm: f64,
    mean_nn_dist_mm: f64,
}

impl KeypointGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn bandwidth_mm(&self) -> f64 {
        self.bandwidth_mm
    }

    /// Mean distance to the nearest neighbor, a proxy for keypoint spacing.
    pub fn mean_nn_dist_mm(&self) -> f64 {
        self.mean_nn_dist_mm
    }

    /// Row sum of the Laplacian L = D - W (zero up to round-off).
    pub fn laplacian_row_sum(&self, i: usize) -> f64 {
        self.degree[i] - self.neighbors[i].iter().map(|(_, w)| w).sum::<f64>()
    }
}

/// Connect each node to its k nearest neighbors in mm and symmetrize by
/// union; h = bandwidth_factor x mean kNN distance.
pub fn build_graph(
    kps: &KeypointSet,
    spacing: [f32; 3],
    k_neighbors: usize,
    bandwidth_factor: f64,
) -> Result<KeypointGraph> {
    let n = kps.len();
    if n < 2 {
        return Err(Error::Invalid(format!("graph needs >= 2 keypoints, got {n}")));
    }
    if k_neighbors < 1 {
        return Err(Error::Invalid("k_neighbors must be >= 1".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for c in &kps.coords {
            if !seen.insert(*c) {
                return Err(Error::Invalid(format!("duplicate keypoint coordinate {c:?}")));
            }
        }
    }
    let pts: Vec<[f64; 3]> = kps
        .coords
        .iter()
        .map(|c| {
            [
                c[0] as f64 * spacing[0] as f64,
                c[1] as f64 * spacing[1] as f64,
                c[2] as f64 * spacing[2] as f64,
            ]
        })
        .collect();
    let k = k_neighbors.min(n - 1);

    let knn: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dists: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2 = (0..3)
                        .map(|a| (pts[i][a] - pts[j][a]).powi(2))
                        .sum::<f64>();
                    (j, d2.sqrt())
                })
                .collect();
            dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            dists.truncate(k);
            dists
        })
        .collect();

    let mean_knn: f64 =
        knn.iter().flat_map(|v| v.iter().map(|(_, d)| d)).sum::<f64>() / (n * k) as f64;
    let mean_nn: f64 = knn.iter().map(|v| v[0].1).sum::<f64>() / n as f64;
    let h = bandwidth_factor * mean_knn;
    if !(h > 0.0) {
        return Err(Error::Invalid("graph bandwidth collapsed to zero".into()));
    }

    let mut edges = std::collections::BTreeSet::new();
    for (i, nb) in knn.iter().enumerate() {
        for &(j, _) in nb {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let mut neighbors = vec![Vec::new(); n];
    let mut degree = vec![0f64; n];
    for (i, j) in edges {
        let d2 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>();
        let w = (-d2 / (2.0 * h * h)).exp();
        neighbors[i].push((j, w));
        neighbors[j].push((i, w));
        degree[i] += w;
        degree[j] += w;
    }
    for nb in &mut neighbors {
        nb.sort_by_key(|(j, _)| *j);
    }
    Ok(KeypointGraph {
        n,
        neighbors,
        degree,
        bandwidth_mm: h,
        mean_nn_dist_mm: mean_nn,
    })
}

/// Anchored diffusion: `x <- (1 - alpha) x0 + alpha W_hat x` for `iters`
/// synchronous (Jacobi) steps, with `W_hat = D^-1 W` the random-walk
/// normalized adjacency. Columns are treated independently; constants are
/// exact fixed points.
pub fn diffuse(
    graph: &KeypointGraph,
    signal: &Array2<f64>,
    alpha: f64,
    iters: usize,
) -> Result<Array2<f64>> {
    if signal.nrows() != graph.n {
        return Err(Error::Dimension(format!(
            "signal has {} rows, graph has {} nodes",
            signal.nrows(),
            graph.n
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if alpha == 0.0 || iters == 0 {
        return Ok(signal.clone());
    }
    let m = signal.ncols();
    let mut cur = signal.clone();
    for _ in 0..iters {
        let rows: Vec<Vec<f64>> = (0..graph.n)
            .into_par_iter()
            .map(|i| {
                let mut avg = vec![0f64; m];
                for &(j, w) in &graph.neighbors[i] {
                    for (c, slot) in avg.iter_mut().enumerate() {
                        *slot += w * cur[[j, c]];
                    }
                }
                let deg = graph.degree[i];
                (0..m)
                    .map(|c| (1.0 - alpha) * signal[[i, c]] + alpha * avg[c] / deg)
                    .collect()
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                cur[[i, c]] = v;
            }
        }
    }
    Ok(cur)
}

/// Diffusion passes applied to the decoded per-keypoint vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorStage {
    pub alpha: f64,
    pub iters: usize,
}

/// Encode cost maps, diffuse the codes over the graph, decode and read
/// displacements off the reconstructed maps by soft-argmin. An optional
/// second diffusion pass smooths the decoded vectors directly.
pub fn regularize_displacements(
    costs: &CostMapSet,
    e: &Embedding,
    graph: &KeypointGraph,
    alpha: f64,
    iters: usize,
    temperature: f64,
    vector_stage: Option<VectorStage>,
) -> Result<SparseDisplacements> {
    if graph.len() != costs.costs.nrows() {
        return Err(Error::Dimension(
            "graph node count does not match cost-map keypoints".into(),
        ));
    }
    let codes = encode(e, &costs.costs)?;
    let codes = diffuse(graph, &codes, alpha, iters)?;
    let recon = decode(e, &codes)?;

    let n = recon.nrows();
    let mut vectors = Array2::<f64>::zeros((n, 3));
    let decoded: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = recon.row(i);
            // Normalize each reconstructed row to a common scale before the
            // soft-argmin: raw dissimilarities vary by orders of magnitude
            // with local texture strength, so a single temperature would act
            // nearly hard on strong-texture keypoints and nearly uniform on
            // weak ones. Shifting by the row minimum and dividing by the mean
            // excess makes the temperature scale-free; the argmin location is
            // unchanged.
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let scale = (mean - min).max(f64::EPSILON);
            let mut normalized: Vec<f64> = row.iter().map(|c| (c - min) / scale).collect();
            // Restrict the softmax support to the cells within 2 lattice
            // steps of the minimum. The softmax over the full lattice has no
            // usable temperature range: thousands of bulk cells outweigh the
            // basin long before adjacent cells interpolate, so a global
            // temperature is either effectively hard (lattice-quantized) or
            // pulled toward the lattice mean.
            let argmin = normalized
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let side = 2 * costs.lattice.radius_steps() + 1;
            let ac = [
                argmin % side,
                (argmin / side) % side,
                argmin / (side * side),
            ];
            for (d, c) in normalized.iter_mut().enumerate() {
                let dc = [d % side, (d / side) % side, d / (side * side)];
                let cheb = (0..3)
                    .map(|a| ac[a].abs_diff(dc[a]))
                    .max()
                    .unwrap_or(0);
                if cheb > 2 {
                    // large finite sentinel: zero softmax weight, keeps the
                    // soft_argmin all-finite contract
                    *c = 1e9;
                }
            }
            soft_argmin(&normalized, &costs.lattice, temperature)
        })
        .collect();
    for (i, v) in decoded.iter().enumerate() {
        for a in 0..3 {
            vectors[[i, a]] = v[a];
        }
    }
    // Consistency repair: a decoded vector that disagrees with the
    // component-wise median of its graph neighbors by more than 1.5 lattice
    // steps is a residual false minimum that survived diffusion; replace it
    // with the neighborhood median instead of letting it leak into the dense
    // extrapolation.
    // Skipped when regularization is off (alpha = 0 or no iterations) so
    // that configuration stays an exact unregularized argmin baseline.
    let repair_active = alpha > 0.0 && iters > 0;
    let tau = 1.5 * costs.lattice.step_voxels() as f64;
    let repaired: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = [vectors[[i, 0]], vectors[[i, 1]], vectors[[i, 2]]];
            let nbrs = graph.neighbors(i);
            if !repair_active || nbrs.is_empty() {
                return own;
            }
            let mut med = [0f64; 3];
            for a in 0..3 {
                let mut comp: Vec<f64> = nbrs.iter().map(|&(j, _)| vectors[[j, a]]).collect();
                comp.sort_by(f64::total_cmp);
                med[a] = comp[comp.len() / 2];
            }
            let dev = (0..3)
                .map(|a| (own[a] - med[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            if dev > tau {
                med
            } else {
                own
            }
        })
        .collect();
    for (i, v) in repaired.iter().enumerate() {
        for a in 0..3 {
            vectors[[i, a]] = v[a];
        }
    }
    if let Some(stage) = vector_stage {
        vectors = diffuse(graph, &vectors, stage.alpha, stage.iters)?;
    }
    Ok(SparseDisplacements {
        keypoints: costs.keypoints.clone(),
        vectors: (0..n)
            .map(|i| [vectors[[i, 0]] as f32, vectors[[i, 1]] as f32, vectors[[i, 2]] as f32])
            .collect(),
    })
}

/// Nadaraya-Watson extrapolation of sparse displacements to every voxel of
/// the fixed grid, Gaussian kernel in physical (mm) coordinates. The
/// output at any voxel is a convex combination of the keypoint vectors.
pub fn extrapolate_dense(
    sparse: &SparseDisplacements,
    dims: [usize; 3],
    spacing: [f32; 3],
    bandwidth_mm: f64,
) -> Result<DenseField> {
    let n = sparse.keypoints.len();
    if n == 0 {
        return Err(Error::Invalid("need at least one keypoint to extrapolate".into()));
    }
    if !(bandwidth_mm > 0.0) {
        return Err(Error::Invalid("bandwidth must be > 0".into()));
    }
    let pts: Vec<[f64; 3]> = sparse
        .keypoints
        .coords
        .iter()
        .map(|c| {
            [
                c[0] as f64 * spacing[0] as f64,
                c[1] as f64 * spacing[1] as f64,
                c[2] as f64 * spacing[2] as f64,
            ]
        })
        .collect();
    let vecs = &sparse.vectors;
    let inv_two_h2 = 1.0 / (2.0 * bandwidth_mm * bandwidth_mm);
    // weights more than e^-60 below the nearest keypoint's contribute
    // nothing at f64 precision
    let cutoff = 60.0 / inv_two_h2;

    let [nx, ny, nz] = dims;
    let slices: Vec<Vec<[f32; 3]>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut slice = vec![[0f32; 3]; nx * ny];
            let mut d2s = vec![0f64; n];
            let z = k as f64 * spacing[2] as f64;
            for j in 0..ny {
                let y = j as f64 * spacing[1] as f64;
                for i in 0..nx {
                    let x = i as f64 * spacing[0] as f64;
                    let mut d2min = f64::INFINITY;
                    for (p, d2slot) in pts.iter().zip(d2s.iter_mut()) {
                        let dx = x - p[0];
                        let dy = y - p[1];
                        let dz = z - p[2];
                        let d2 = dx * dx + dy * dy + dz * dz;
                        *d2slot = d2;
                        if d2 < d2min {
                            d2min = d2;
                        }
                    }
                    let mut wsum = 0f64;
                    let mut acc = [0f64; 3];
                    for (d2, v) in d2s.iter().zip(vecs.iter()) {
                        let rel = d2 - d2min;
                        if rel > cutoff {
                            continue;
                        }
                        let w = (-rel * inv_two_h2).exp();
                        wsum += w;
                        acc[0] += w * v[0] as f64;
                        acc[1] += w * v[1] as f64;
                        acc[2] += w * v[2] as f64;
                    }
                    slice[i + nx * j] = [
                        (acc[0] / wsum) as f32,
                        (acc[1] / wsum) as f32,
                        (acc[2] / wsum) as f32,
                    ];
                }
            }
            slice
        })
        .collect();
    let mut vectors = Vec::with_capacity(nx * ny * nz);
    for slice in slices {
        vectors.extend(slice);
    }
    DenseField::new(dims, spacing, vectors)
}

/// Backward warping: `out(x) = moving(x + u(x))` with trilinear sampling
/// and edge-replicated out-of-bounds handling.
pub fn warp(moving: &Volume3, field: &DenseField) -> Result<Volume3> {
    let dims = field.dims();
    let [nx, ny, nz] = dims;
    let slices: Vec<Vec<f32>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut slice = vec![0f32; nx * ny];
            for j in 0..ny {
                for i in 0..nx {
                    let u = field.get(i, j, k);
                    let p = [i as f32 + u[0], j as f32 + u[1], k as f32 + u[2]];
                    slice[i + nx * j] = moving.trilinear(p);
                }
            }
            slice
        })
        .collect();
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for slice in slices {
        voxels.extend(slice);
    }
    Volume3::new(dims, field.spacing(), voxels, moving.intensity_unit())
}
