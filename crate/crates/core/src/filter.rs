//! Separable volume filters shared by the detector, the evaluator and the
//! mask builder. All filters replicate edge values and are data-parallel
//! over output lines with deterministic results.

use rayon::prelude::*;

/// Normalized 1D Gaussian taps for a sigma given in voxels.
/// Radius is `ceil(3 sigma)`, at least 1; sigma <= 0 yields an identity tap.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Convolve along one axis with the given taps, edge-replicated.
fn convolve_axis(data: &[f32], dims: [usize; 3], axis: usize, taps: &[f32]) -> Vec<f32> {
    if taps.len() == 1 {
        return data.to_vec();
    }
    let radius = (taps.len() / 2) as i64;
    let [nx, ny, nz] = dims;
    let n_axis = dims[axis] as i64;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    // enumerate lines along `axis` by iterating the other two dims
    let (du, dv, su, sv) = match axis {
        0 => (ny, nz, nx, nx * ny),
        1 => (nx, nz, 1, nx * ny),
        _ => (nx, ny, 1, nx),
    };
    let mut out = vec![0f32; data.len()];
    let lines: Vec<(usize, usize)> = (0..dv).flat_map(|v| (0..du).map(move |u| (u, v))).collect();
    let results: Vec<(usize, Vec<f32>)> = lines
        .par_iter()
        .map(|&(u, v)| {
            let base = u * su + v * sv;
            let mut line = vec![0f32; n_axis as usize];
            for (x, slot) in line.iter_mut().enumerate() {
                let mut acc = 0f32;
                for (t, &w) in taps.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - radius).clamp(0, n_axis - 1) as usize;
                    acc += w * data[base + xx * stride];
                }
                *slot = acc;
            }
            (base, line)
        })
        .collect();
    for (base, line) in results {
        for (x, v) in line.into_iter().enumerate() {
            out[base + x * stride] = v;
        }
    }
    out
}

/// Separable Gaussian smoothing with per-axis sigmas in voxels.
pub fn gaussian_smooth(data: &[f32], dims: [usize; 3], sigma_voxels: [f32; 3]) -> Vec<f32> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let taps = gaussian_kernel(sigma_voxels[axis]);
        cur = convolve_axis(&cur, dims, axis, &taps);
    }
    cur
}

fn extremum_axis(data: &[f32], dims: [usize; 3], axis: usize, radius: usize, take_max: bool) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let n_axis = dims[axis] as i64;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let (du, dv, su, sv) = match axis {
        0 => (ny, nz, nx, nx * ny),
        1 => (nx, nz, 1, nx * ny),
        _ => (nx, ny, 1, nx),
    };
    let mut out = vec![0f32; data.len()];
    let lines: Vec<(usize, usize)> = (0..dv).flat_map(|v| (0..du).map(move |u| (u, v))).collect();
    let results: Vec<(usize, Vec<f32>)> = lines
        .par_iter()
        .map(|&(u, v)| {
            let base = u * su + v * sv;
            let mut line = vec![0f32; n_axis as usize];
            for (x, slot) in line.iter_mut().enumerate() {
                let lo = (x as i64 - radius as i64).max(0) as usize;
                let hi = (x as i64 + radius as i64).min(n_axis - 1) as usize;
                let mut best = data[base + lo * stride];
                for xx in lo + 1..=hi {
                    let v = data[base + xx * stride];
                    best = if take_max { best.max(v) } else { best.min(v) };
                }
                *slot = best;
            }
            (base, line)
        })
        .collect();
    for (base, line) in results {
        for (x, v) in line.into_iter().enumerate() {
            out[base + x * stride] = v;
        }
    }
    out
}

/// Chebyshev-ball (cube) dilation: separable running max per axis.
pub fn dilate(data: &[f32], dims: [usize; 3], radius: usize) -> Vec<f32> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        cur = extremum_axis(&cur, dims, axis, radius, true);
    }
    cur
}

/// Chebyshev-ball erosion: separable running min per axis.
pub fn erode(data: &[f32], dims: [usize; 3], radius: usize) -> Vec<f32> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        cur = extremum_axis(&cur, dims, axis, radius, false);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.7);
        let sum: f32 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let data = vec![3.5f32; 4 * 5 * 6];
        let out = gaussian_smooth(&data, [4, 5, 6], [1.0, 2.0, 0.5]);
        for v in out {
            assert!((v - 3.5).abs() < 1e-5);
        }
    }

    #[test]
    fn dilate_then_erode_closes_small_gaps() {
        let dims = [9, 1, 1];
        let mut data = vec![1f32; 9];
        data[4] = 0.0; // one-voxel hole
        let closed = erode(&dilate(&data, dims, 1), dims, 1);
        assert!(closed.iter().all(|&v| v == 1.0));
    }
}
