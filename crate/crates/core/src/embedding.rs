//! Linear displacement embedding: truncated PCA mapping length-D cost
//! vectors to k-dimensional codes and back.
//!
//! With N keypoints and D lattice candidates, N is usually far below D,
//! so the fit goes through the N x N Gram matrix of the centered data;
//! when N exceeds D the D x D covariance is decomposed instead. Basis
//! rows follow a deterministic sign convention (largest-magnitude entry
//! positive) so serialized embeddings are reproducible.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

const RANK_EPS: f64 = 1e-12;

/// Fixed row-block size for parallel matrix products. The block size must
/// not depend on the thread count: identical block shapes give identical
/// per-element accumulation order, keeping results bit-identical under any
/// `--threads` setting.
const PAR_DOT_BLOCK: usize = 128;

/// `a . b` computed as independent row blocks of `a` in parallel.
fn par_dot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let starts: Vec<usize> = (0..n).step_by(PAR_DOT_BLOCK.max(1)).collect();
    let blocks: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + PAR_DOT_BLOCK).min(n);
            a.slice(s![start..end, ..]).dot(&b)
        })
        .collect();
    let mut out = Array2::<f64>::zeros((n, m));
    for (&start, block) in starts.iter().zip(&blocks) {
        out.slice_mut(s![start..start + block.nrows(), ..])
            .assign(block);
    }
    out
}

/// Mean vector plus an orthonormal basis (rows) for the top-k principal
/// directions of a cost-vector population.
#[derive(Debug, Clone)]
pub struct Embedding {
    dim_in: usize,
    dim_out: usize,
    mean: Array1<f64>,
    basis: Array2<f64>,
    explained_variance: Vec<f64>,
    rank_deficient: bool,
}

impl Embedding {
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// True when the data rank fell below k and the basis was padded with
    /// orthonormal complements carrying zero variance.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Fraction of the cost-vector dimensionality removed: 1 - k/D.
    pub fn compression_ratio(&self) -> f64 {
        1.0 - self.dim_out as f64 / self.dim_in as f64
    }

    pub fn from_parts(
        mean: Array1<f64>,
        basis: Array2<f64>,
        explained_variance: Vec<f64>,
        rank_deficient: bool,
    ) -> Result<Self> {
        let (k, d) = basis.dim();
        if mean.len() != d || explained_variance.len() != k {
            return Err(Error::Dimension("inconsistent embedding parts".into()));
        }
        Ok(Self {
            dim_in: d,
            dim_out: k,
            mean,
            basis,
            explained_variance,
            rank_deficient,
        })
    }
}

/// Fit a k-dimensional PCA embedding to N cost vectors (rows of `costs`).
pub fn fit_pca(costs: &Array2<f64>, k: usize) -> Result<Embedding> {
    let (n, d) = costs.dim();
    if n < 2 {
        return Err(Error::Dimension(format!("need at least 2 rows, got {n}")));
    }
    if k < 1 || k > n.min(d) {
        return Err(Error::Dimension(format!(
            "k = {k} outside [1, min(N, D) = {}]",
            n.min(d)
        )));
    }

    let mean = costs.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = costs - &mean.clone().insert_axis(ndarray::Axis(0));

    let mut basis = Array2::<f64>::zeros((k, d));
    let mut variance = vec![0f64; k];
    let mut rank;

    if n <= d {
        // Gram route: eigenvectors u of X X^T give basis rows X^T u / sigma
        let gram_nd = par_dot(centered.view(), centered.t());
        let gram = DMatrix::from_fn(n, n, |r, c| gram_nd[[r, c]]);
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lambda_max = eig.eigenvalues[order[0]].max(0.0);
        let tol = (lambda_max * RANK_EPS).max(RANK_EPS);
        rank = 0;
        for j in 0..k {
            let lambda = eig.eigenvalues[order[j]];
            if lambda <= tol {
                break;
            }
            variance[j] = lambda / (n as f64 - 1.0);
            rank += 1;
        }
        if rank > 0 {
            // basis rows = (U_rank / sigma)^T X as one matrix product
            let mut ut = Array2::<f64>::zeros((rank, n));
            for j in 0..rank {
                let sigma = eig.eigenvalues[order[j]].sqrt();
                let u = eig.eigenvectors.column(order[j]);
                for r in 0..n {
                    ut[[j, r]] = u[r] / sigma;
                }
            }
            let rows = par_dot(ut.view(), centered.view());
            basis.slice_mut(ndarray::s![0..rank, ..]).assign(&rows);
        }
    } else {
        // covariance route for wide-sample populations
        let cov_nd = par_dot(centered.t(), centered.view());
        let cov = DMatrix::from_fn(d, d, |r, c| cov_nd[[r, c]]);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lambda_max = eig.eigenvalues[order[0]].max(0.0);
        let tol = (lambda_max * RANK_EPS).max(RANK_EPS);
        rank = 0;
        for j in 0..k {
            let lambda = eig.eigenvalues[order[j]];
            if lambda <= tol {
                break;
            }
            let v = eig.eigenvectors.column(order[j]);
            let mut row = basis.row_mut(j);
            for c in 0..d {
                row[c] = v[c];
            }
            variance[j] = lambda / (n as f64 - 1.0);
            rank += 1;
        }
    }

    // re-normalize rows (guards the Gram route against tiny sigma drift)
    for j in 0..rank {
        let norm = basis.row(j).dot(&basis.row(j)).sqrt();
        if norm > 0.0 {
            basis.row_mut(j).mapv_inplace(|v| v / norm);
        }
    }

    let rank_deficient = rank < k;
    if rank_deficient {
        pad_with_complements(&mut basis, rank)?;
    }

    // deterministic sign convention: largest-magnitude entry positive
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = 0f64;
        for c in 0..d {
            let a = basis[[j, c]].abs();
            if a > best_abs {
                best_abs = a;
                best = c;
            }
        }
        if basis[[j, best]] < 0.0 {
            basis.row_mut(j).mapv_inplace(|v| -v);
        }
    }

    Embedding::from_parts(mean, basis, variance, rank_deficient)
}

/// Fill rows `rank..k` with canonical vectors orthonormalized against all
/// previous rows (deterministic Gram-Schmidt sweep).
fn pad_with_complements(basis: &mut Array2<f64>, rank: usize) -> Result<()> {
    let (k, d) = basis.dim();
    let mut filled = rank;
    let mut candidate = 0usize;
    while filled < k {
        if candidate >= d {
            return Err(Error::Dimension(
                "could not complete an orthonormal basis".into(),
            ));
        }
        let mut v = vec![0f64; d];
        v[candidate] = 1.0;
        candidate += 1;
        for j in 0..filled {
            let proj: f64 = (0..d).map(|c| basis[[j, c]] * v[c]).sum();
            for c in 0..d {
                v[c] -= proj * basis[[j, c]];
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for c in 0..d {
            basis[[filled, c]] = v[c] / norm;
        }
        filled += 1;
    }
    Ok(())
}

/// Project cost vectors to codes: (costs - mean) . basis^T.
pub fn encode(e: &Embedding, costs: &Array2<f64>) -> Result<Array2<f64>> {
    if costs.ncols() != e.dim_in {
        return Err(Error::Dimension(format!(
            "encode expects {} columns, got {}",
            e.dim_in,
            costs.ncols()
        )));
    }
    let centered = costs - &e.mean.clone().insert_axis(ndarray::Axis(0));
    Ok(par_dot(centered.view(), e.basis.t()))
}

/// Reconstruct cost vectors from codes: codes . basis + mean.
pub fn decode(e: &Embedding, codes: &Array2<f64>) -> Result<Array2<f64>> {
    if codes.ncols() != e.dim_out {
        return Err(Error::Dimension(format!(
            "decode expects {} columns, got {}",
            e.dim_out,
            codes.ncols()
        )));
    }
    Ok(par_dot(codes.view(), e.basis.view()) + &e.mean.clone().insert_axis(ndarray::Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn recon_error(e: &Embedding, x: &Array2<f64>) -> f64 {
        let codes = encode(e, x).unwrap();
        let rec = decode(e, &codes).unwrap();
        (x - &rec).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_one_data_reconstructs_exactly() {
        let d = 50;
        let dir: Vec<f64> = (0..d).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let mut x = Array2::<f64>::zeros((6, d));
        for (r, scale) in [1.0, -2.0, 0.5, 3.0, -1.5, 2.2].iter().enumerate() {
            for c in 0..d {
                x[[r, c]] = scale * dir[c] + 10.0;
            }
        }
        let e = fit_pca(&x, 1).unwrap();
        assert!(recon_error(&e, &x) < 1e-8);
    }

    #[test]
    fn complete_basis_reconstructs_every_row() {
        let x = random_matrix(8, 20, 1);
        let e = fit_pca(&x, 8).unwrap();
        // centering drops one rank, so the basis is padded
        assert!(e.rank_deficient());
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(recon_error(&e, &x) / norm < 1e-6);
    }

    /// Independent oracle: hand-rolled Jacobi eigendecomposition of the
    /// D x D covariance, no shared code with the Gram-route fit.
    pub(crate) fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v = vec![vec![0f64; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _sweep in 0..100 {
            let mut off = 0f64;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let aip = a[i][p];
                        let aiq = a[i][q];
                        a[i][p] = c * aip - s * aiq;
                        a[i][q] = s * aip + c * aiq;
                    }
                    for i in 0..n {
                        let api = a[p][i];
                        let aqi = a[q][i];
                        a[p][i] = c * api - s * aqi;
                        a[q][i] = s * api + c * aqi;
                    }
                    for i in 0..n {
                        let vip = v[i][p];
                        let viq = v[i][q];
                        v[i][p] = c * vip - s * viq;
                        v[i][q] = s * vip + c * viq;
                    }
                }
            }
        }
        let evals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        (evals, v)
    }

    pub(crate) fn oracle_best_rank_k_error(x: &Array2<f64>, k: usize) -> f64 {
        let (n, d) = x.dim();
        let mean: Vec<f64> = (0..d).map(|c| x.column(c).sum() / n as f64).collect();
        let mut cov = vec![vec![0f64; d]; d];
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0f64;
                for r in 0..n {
                    acc += (x[[r, a]] - mean[a]) * (x[[r, b]] - mean[b]);
                }
                cov[a][b] = acc;
            }
        }
        let (evals, _) = jacobi_eigen(cov);
        let mut sorted = evals;
        sorted.sort_by(|a, b| b.total_cmp(a));
        // best rank-k squared error is the tail eigenvalue sum of X^T X
        sorted.iter().skip(k).map(|&l| l.max(0.0)).sum::<f64>().sqrt()
    }

    #[test]
    fn matches_dense_eigendecomposition_oracle_small() {
        for seed in [2u64, 3, 4] {
            let x = random_matrix(40, 60, seed);
            for k in [1usize, 5, 20] {
                let e = fit_pca(&x, k).unwrap();
                let got = recon_error(&e, &x);
                let want = oracle_best_rank_k_error(&x, k);
                assert!(
                    (got - want).abs() < 1e-8,
                    "seed {seed} k {k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn matches_svd_oracle_on_wide_matrix() {
        // second, algorithmically different route: singular values of the
        // centered matrix via nalgebra's bidiagonalization SVD
        let x = random_matrix(200, 9261, 7);
        let k = 20;
        let e = fit_pca(&x, k).unwrap();
        let got = recon_error(&e, &x);

        let n = 200;
        let d = 9261;
        let mean: Vec<f64> = (0..d).map(|c| x.column(c).sum() / n as f64).collect();
        let m = DMatrix::from_fn(n, d, |r, c| x[[r, c]] - mean[c]);
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let want = sv.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt();
        assert!(
            (got - want).abs() / want.max(1e-12) < 1e-6,
            "{got} vs {want}"
        );
    }

    #[test]
    fn encode_trivia() {
        let x = random_matrix(10, 30, 11);
        let e = fit_pca(&x, 4).unwrap();
        // the mean row encodes to zero
        let mean_row = e.mean().clone().insert_axis(ndarray::Axis(0));
        let code = encode(&e, &mean_row).unwrap();
        for v in code.iter() {
            assert!(v.abs() < 1e-10);
        }
        // mean + first basis row encodes to e_1
        let shifted = &mean_row + &e.basis().row(0).insert_axis(ndarray::Axis(0));
        let code = encode(&e, &shifted.to_owned()).unwrap();
        assert!((code[[0, 0]] - 1.0).abs() < 1e-10);
        for j in 1..4 {
            assert!(code[[0, j]].abs() < 1e-10);
        }
        // zero codes decode to the mean
        let rec = decode(&e, &Array2::zeros((1, 4))).unwrap();
        for (a, b) in rec.iter().zip(e.mean().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compression_ratios_match_lattice_arithmetic() {
        let mean = Array1::zeros(9261);
        let basis = Array2::zeros((256, 9261));
        let e = Embedding {
            dim_in: 9261,
            dim_out: 256,
            mean: mean.clone(),
            basis,
            explained_variance: vec![0.0; 256],
            rank_deficient: false,
        };
        assert!((e.compression_ratio() - 0.9724).abs() < 5e-4);
        let e512 = Embedding {
            dim_in: 9261,
            dim_out: 512,
            mean,
            basis: Array2::zeros((512, 9261)),
            explained_variance: vec![0.0; 512],
            rank_deficient: false,
        };
        assert!((e512.compression_ratio() - 0.9447).abs() < 5e-4);
    }

    #[test]
    fn orthonormality_and_idempotence() {
        let x = random_matrix(30, 80, 13);
        let e = fit_pca(&x, 12).unwrap();
        let gram = e.basis().dot(&e.basis().t());
        for r in 0..12 {
            for c in 0..12 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((gram[[r, c]] - want).abs() < 1e-6);
            }
        }
        let code1 = encode(&e, &x).unwrap();
        let rec = decode(&e, &code1).unwrap();
        let code2 = encode(&e, &rec).unwrap();
        for (a, b) in code1.iter().zip(code2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruction_error_monotone_in_k() {
        let x = random_matrix(550, 700, 17);
        let mut prev = f64::INFINITY;
        for k in [8usize, 32, 128, 256, 512] {
            let e = fit_pca(&x, k).unwrap();
            let err = recon_error(&e, &x);
            assert!(err <= prev + 1e-9, "k {k}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn k_out_of_range_is_an_error() {
        let x = random_matrix(5, 10, 19);
        assert!(fit_pca(&x, 0).is_err());
        assert!(fit_pca(&x, 6).is_err());
    }
}
