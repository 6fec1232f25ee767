//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL (or SKIP) line. Run with `--nocapture` to see the lines for
//! passing tests too.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dispembed_core::evaluation::{gen_phantom, gen_synthetic_case, tre};
use dispembed_core::io;
use dispembed_core::pipeline::{register, register_full, EmbedDim, PipelineConfig};
use dispembed_core::volume::{IntensityUnit, LandmarkSet, Volume3};
use dispembed_core::{
    build_graph, diffuse, encode, fit_pca, hard_argmin, soft_argmin, warp, DisplacementLattice,
    Embedding, KeypointSet,
};

fn report(criterion: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE [{criterion}]: {verdict} — {detail}");
    assert!(ok, "acceptance criterion `{criterion}` failed: {detail}");
}

/// Registration config used for the data-driven criteria. The pinned
/// defaults keep temperature at 1.0, which is far too diffuse for the
/// near-binary descriptor costs; the acceptance runs sharpen it.
fn tuned_config() -> PipelineConfig {
    PipelineConfig {
        keypoint_target: 4000,
        grid_radius: 14,
        grid_step: 1,
        patch_radius_f: 2,
        alpha: 0.8,
        iters: 10,
        temperature: 0.05,
        knn: 10,
        extrap_bandwidth_factor: 0.75,
        embed_dim: EmbedDim::Fixed(256),
        ..PipelineConfig::default()
    }
}

// --- synthetic end-to-end -------------------------------------------------

#[test]
fn synthetic_end_to_end() {
    let start = Instant::now();
    let spacing = [1.5f32; 3];
    let base = gen_phantom([128; 3], spacing, 7).unwrap();
    let case = gen_synthetic_case(&base, 20.0, 30.0, 7).unwrap();

    let cfg = tuned_config();
    // evaluate over the whole textured phantom: an explicit all-body mask
    // (everything denser than air) instead of the automatic lung mask, since
    // the generated landmarks sample structure across the full volume
    let body: Vec<f32> = base
        .voxels()
        .iter()
        .map(|&v| if v > -900.0 { 1.0 } else { 0.0 })
        .collect();
    let body = Volume3::new(base.dims(), spacing, body, IntensityUnit::Arbitrary).unwrap();
    let (_, field, log) = register(&base, &case.moving, Some(&body), &cfg).unwrap();
    let initial = tre(&case.fixed_lms, &case.moving_lms, None, spacing).unwrap();
    let registered = tre(&case.fixed_lms, &case.moving_lms, Some(&field), spacing).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let reduction = initial.mean_mm / registered.mean_mm.max(1e-12);

    print!("{log}");
    report(
        "synthetic end-to-end",
        registered.mean_mm <= 2.0 && reduction >= 5.0 && elapsed <= 300.0,
        &format!(
            "initial {:.2} mm -> registered {:.2} mm ({:.1}x, need >=5x and <=2.0 mm) in {:.0}s (budget 300s)",
            initial.mean_mm, registered.mean_mm, reduction, elapsed
        ),
    );
}

// --- oracle equivalence ----------------------------------------------------

/// Smoothly textured pair with an exact rigid x-shift: two windows cut from
/// one smoothed-noise volume. Normalized unit so the pipeline skips masking.
fn textured_pair(dims: [usize; 3], shift_x: usize) -> (Volume3, Volume3) {
    let ext = [dims[0] + shift_x, dims[1], dims[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let raw: Vec<f32> = (0..ext[0] * ext[1] * ext[2])
        .map(|_| rng.gen::<f32>())
        .collect();
    let smooth = dispembed_core::filter::gaussian_smooth(&raw, ext, [1.5, 1.5, 1.5]);
    let cut = |x0: usize| {
        let mut vox = vec![0f32; dims[0] * dims[1] * dims[2]];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    vox[i + dims[0] * (j + dims[1] * k)] =
                        smooth[i + x0 + ext[0] * (j + ext[1] * k)];
                }
            }
        }
        Volume3::new(dims, [1.0; 3], vox, IntensityUnit::Normalized).unwrap()
    };
    // fixed(i) = ext(i + s), moving(i) = ext(i), so moving(x) = fixed(x - s)
    (cut(shift_x), cut(0))
}

#[test]
fn oracle_pipeline_collapse() {
    let (fixed, moving) = textured_pair([48, 40, 40], 4);
    let cfg = PipelineConfig {
        clamp_lo_hu: 0.0,
        clamp_hi_hu: 1.0,
        keypoint_target: 80,
        grid_radius: 4,
        embed_dim: EmbedDim::Full,
        alpha: 0.0,
        temperature: 1e-3,
        ..PipelineConfig::default()
    };
    let (sparse, _, _, extras) = register_full(&fixed, &moving, None, &cfg, None).unwrap();

    let mut checked = 0usize;
    let mut matched = 0usize;
    for (n, v) in sparse.vectors.iter().enumerate() {
        let row: Vec<f64> = extras.costs.costs.row(n).to_vec();
        // unique minimum with a clear margin
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        if sorted[1] - sorted[0] < 1e-2 {
            continue;
        }
        checked += 1;
        let hard = hard_argmin(&row, &extras.costs.lattice);
        if (0..3).all(|a| (v[a] as f64 - hard[a] as f64).abs() < 0.1) {
            matched += 1;
        }
    }
    report(
        "oracle: degenerate pipeline = hard argmin",
        checked > 20 && matched == checked,
        &format!("{matched}/{checked} unique-minimum keypoints match"),
    );
}

/// Hand-rolled Jacobi eigensolver: the independent route for the PCA oracle.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
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
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let (api, aqi) = (a[p][i], a[q][i]);
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn oracle_pca_reconstruction() {
    let mut worst = 0f64;
    for seed in [11u64, 12, 13] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((40, 60), |_| rng.gen::<f64>() * 2.0 - 1.0);
        for k in [1usize, 5, 20] {
            let e = fit_pca(&x, k).unwrap();
            let codes = encode(&e, &x).unwrap();
            let rec = dispembed_core::decode(&e, &codes).unwrap();
            let got = (&x - &rec).iter().map(|v| v * v).sum::<f64>().sqrt();

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
            let mut evals = jacobi_eigenvalues(cov);
            evals.sort_by(|a, b| b.total_cmp(a));
            let want = evals.iter().skip(k).map(|&l| l.max(0.0)).sum::<f64>().sqrt();
            worst = worst.max((got - want).abs());
        }
    }
    report(
        "oracle: fit_pca vs dense eigendecomposition",
        worst < 1e-8,
        &format!("worst reconstruction-error deviation {worst:.3e} (limit 1e-8)"),
    );
}

#[test]
fn oracle_diffusion_matrix_power() {
    // 7-node graph; dense anchored iteration as the oracle
    let coords: Vec<[usize; 3]> = vec![
        [0, 0, 0],
        [3, 0, 0],
        [6, 1, 0],
        [2, 4, 0],
        [5, 5, 1],
        [1, 7, 3],
        [7, 7, 7],
    ];
    let kps = KeypointSet {
        scores: vec![1.0; coords.len()],
        coords,
    };
    let g = build_graph(&kps, [1.0; 3], 3, 1.0).unwrap();
    let n = g.len();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = Array2::from_shape_fn((n, 4), |_| rng.gen::<f64>());
    let alpha = 0.6;
    let iters = 5;
    let got = diffuse(&g, &x0, alpha, iters).unwrap();

    let mut w = vec![vec![0f64; n]; n];
    for i in 0..n {
        for &(j, wij) in g.neighbors(i) {
            w[i][j] = wij;
        }
    }
    let mut x = x0.clone();
    for _ in 0..iters {
        let mut next = Array2::<f64>::zeros((n, 4));
        for i in 0..n {
            let deg: f64 = w[i].iter().sum();
            for c in 0..4 {
                let mut avg = 0f64;
                if deg > 0.0 {
                    for j in 0..n {
                        avg += w[i][j] * x[[j, c]];
                    }
                    avg /= deg;
                }
                next[[i, c]] = (1.0 - alpha) * x0[[i, c]] + alpha * avg;
            }
        }
        x = next;
    }
    let worst = (&got - &x).iter().fold(0f64, |m, v| m.max(v.abs()));
    report(
        "oracle: diffuse vs dense matrix power",
        worst < 1e-10,
        &format!("worst entry deviation {worst:.3e} (limit 1e-10)"),
    );
}

// --- invariant summary ------------------------------------------------------

#[test]
fn invariant_suite() {
    let mut fails: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };

    // descriptor range and affine invariance
    {
        use dispembed_core::{compute_mind, Neighborhood};
        let (vol, _) = textured_pair([20, 20, 20], 0);
        let f = compute_mind(&vol, 2, 1, Neighborhood::Ssc12).unwrap();
        check(
            "descriptor range (0, 1]",
            f.values.iter().all(|&v| v > 0.0 && v <= 1.0),
        );
        let scaled = Volume3::new(
            vol.dims(),
            vol.spacing(),
            vol.voxels().iter().map(|v| 2.0 * v + 5.0).collect(),
            IntensityUnit::Arbitrary,
        )
        .unwrap();
        let f2 = compute_mind(&scaled, 2, 1, Neighborhood::Ssc12).unwrap();
        let worst = f
            .values
            .iter()
            .zip(f2.values.iter())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        check("descriptor affine invariance", worst < 1e-4);
    }

    // keypoint NMS separation
    {
        use dispembed_core::{foerstner_scores, select_keypoints};
        let base = gen_phantom([32; 3], [1.0; 3], 4).unwrap();
        let scores = foerstner_scores(&base, 1.5, 1.0).unwrap();
        let kps = select_keypoints(&scores, None, 100, 3).unwrap();
        let mut ok = true;
        for a in 0..kps.len() {
            for b in a + 1..kps.len() {
                let cheb = (0..3)
                    .map(|x| kps.coords[a][x].abs_diff(kps.coords[b][x]))
                    .max()
                    .unwrap();
                ok &= cheb > 3;
            }
        }
        check("keypoint NMS separation", ok);
    }

    // soft-argmin hull bound and temperature limit
    {
        let lat = DisplacementLattice::new(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let costs: Vec<f64> = (0..lat.len()).map(|_| rng.gen::<f64>() * 10.0).collect();
        let v = soft_argmin(&costs, &lat, 0.5);
        check(
            "soft-argmin convex hull bound",
            v.iter().all(|&c| c.abs() <= lat.bound_voxels() + 1e-9),
        );
        let sharp = soft_argmin(&costs, &lat, 1e-4);
        let hard = hard_argmin(&costs, &lat);
        check(
            "soft-argmin temperature limit",
            (0..3).all(|a| (sharp[a] - hard[a] as f64).abs() < 1e-6),
        );
    }

    // Laplacian row sums and diffusion constant fixed point
    {
        let base = gen_phantom([24; 3], [1.0; 3], 2).unwrap();
        let scores = dispembed_core::foerstner_scores(&base, 1.5, 1.0).unwrap();
        let kps = dispembed_core::select_keypoints(&scores, None, 60, 2).unwrap();
        let g = build_graph(&kps, [1.0; 3], 5, 1.0).unwrap();
        let worst_row = (0..g.len()).fold(0f64, |m, i| m.max(g.laplacian_row_sum(i).abs()));
        check("Laplacian row sums vanish", worst_row < 1e-9);
        let constant = Array2::from_elem((g.len(), 3), 1.75f64);
        let out = diffuse(&g, &constant, 0.5, 6).unwrap();
        let worst = (&out - &constant).iter().fold(0f64, |m, v| m.max(v.abs()));
        check("diffusion constant fixed point", worst < 1e-12);
    }

    // PCA orthonormality and idempotence
    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((30, 25), |_| rng.gen::<f64>());
        let e = fit_pca(&x, 8).unwrap();
        let gram = e.basis().dot(&e.basis().t());
        let mut worst = 0f64;
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - want).abs());
            }
        }
        check("PCA basis orthonormality", worst < 1e-6);
        let codes = encode(&e, &x).unwrap();
        let rec = dispembed_core::decode(&e, &codes).unwrap();
        let codes2 = encode(&e, &rec).unwrap();
        let drift = (&codes - &codes2).iter().fold(0f64, |m, v| m.max(v.abs()));
        check("PCA encode-decode idempotence", drift < 1e-9);
    }

    // warp and TRE trivial cases
    {
        let base = gen_phantom([16; 3], [1.0; 3], 1).unwrap();
        let zero = dispembed_core::DenseField::zeros([16; 3], [1.0; 3]).unwrap();
        check(
            "warp zero field identity",
            warp(&base, &zero).unwrap().voxels() == base.voxels(),
        );
        let f = LandmarkSet::new(vec![[0.0; 3]]);
        let m = LandmarkSet::new(vec![[3.0, 4.0, 0.0]]);
        let r = tre(&f, &m, None, [1.0; 3]).unwrap();
        check("TRE 3-4-5 triangle", (r.mean_mm - 5.0).abs() < 1e-12);
    }

    report(
        "invariant suite",
        fails.is_empty(),
        &if fails.is_empty() {
            "all representative invariants hold (full suites run as unit tests)".to_string()
        } else {
            format!("failed: {}", fails.join(", "))
        },
    );
}

// --- compression arithmetic --------------------------------------------------

#[test]
fn compression_arithmetic() {
    let d = 9261usize;
    let make = |k: usize| {
        let mut basis = Array2::<f64>::zeros((k, d));
        for i in 0..k {
            basis[[i, i]] = 1.0;
        }
        Embedding::from_parts(ndarray::Array1::zeros(d), basis, vec![0.0; k], true).unwrap()
    };
    let r256 = make(256).compression_ratio() * 100.0;
    let r512 = make(512).compression_ratio() * 100.0;
    let ok = ((r256 * 10.0).round() / 10.0 - 97.2).abs() < 1e-9
        && ((r512 * 10.0).round() / 10.0 - 94.5).abs() < 1e-9;
    report(
        "compression arithmetic",
        ok,
        &format!("k=256 -> {r256:.1}%, k=512 -> {r512:.1}% (expect 97.2% / 94.5%)"),
    );
}

// --- determinism across thread counts ---------------------------------------

#[test]
fn thread_count_determinism() {
    let spacing = [1.5f32; 3];
    let base = gen_phantom([48; 3], spacing, 3).unwrap();
    let case = gen_synthetic_case(&base, 6.0, 15.0, 3).unwrap();
    let cfg = PipelineConfig {
        keypoint_target: 300,
        embed_dim: EmbedDim::Fixed(128),
        temperature: 0.02,
        ..PipelineConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| register(&base, &case.moving, None, &cfg).unwrap())
    };
    let (sparse_a, field_a, _) = run(1);
    let (sparse_b, field_b, _) = run(4);
    let same_sparse = sparse_a.vectors == sparse_b.vectors
        && sparse_a.keypoints.coords == sparse_b.keypoints.coords;
    let same_field = field_a.vectors() == field_b.vectors();
    report(
        "thread-count determinism",
        same_sparse && same_field,
        &format!(
            "1 vs 4 threads: sparse bit-identical = {same_sparse}, dense bit-identical = {same_field}"
        ),
    );
}

// --- conditional DIR-Lab criteria --------------------------------------------

struct DirlabCase {
    name: String,
    fixed: Volume3,
    moving: Volume3,
    fixed_lms: LandmarkSet,
    moving_lms: LandmarkSet,
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["nii.gz", "nii", "raw"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Expected layout (documented in the README): one directory per case with
/// fixed/moving volumes and one-based landmark text files.
fn load_dirlab_cases(root: &Path) -> Vec<DirlabCase> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", root.display()))
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut cases = Vec::new();
    for dir in dirs {
        let fixed = find_file(&dir, "fixed");
        let moving = find_file(&dir, "moving");
        let fl = dir.join("fixed_landmarks.txt");
        let ml = dir.join("moving_landmarks.txt");
        let (Some(fixed), Some(moving)) = (fixed, moving) else {
            continue;
        };
        if !fl.exists() || !ml.exists() {
            continue;
        }
        cases.push(DirlabCase {
            name: dir.file_name().unwrap().to_string_lossy().into_owned(),
            fixed: io::load_volume(&fixed, None).unwrap().with_unit(IntensityUnit::Hu),
            moving: io::load_volume(&moving, None).unwrap().with_unit(IntensityUnit::Hu),
            fixed_lms: io::load_landmarks(&fl).unwrap().to_zero_based(),
            moving_lms: io::load_landmarks(&ml).unwrap().to_zero_based(),
        });
    }
    cases
}

fn dirlab_criterion(env_var: &str, label: &str, want_initial: f64, max_registered: f64) {
    let Some(root) = std::env::var_os(env_var) else {
        println!("ACCEPTANCE [{label}]: SKIP — {env_var} not set (data must be user-supplied)");
        return;
    };
    let cases = load_dirlab_cases(Path::new(&root));
    assert!(!cases.is_empty(), "{env_var} set but no cases found");

    let mut initial_means = Vec::new();
    let mut registered_means = Vec::new();
    for case in &cases {
        let spacing = case.fixed.spacing();
        let initial = tre(&case.fixed_lms, &case.moving_lms, None, spacing).unwrap();
        // default +/-20 voxel lattice (COPD displacements exceed the finer
        // synthetic lattice's capture range) with the tuned regularization
        let cfg = PipelineConfig {
            embed_dim: EmbedDim::Fixed(512),
            keypoint_target: 1500,
            grid_radius: 10,
            grid_step: 2,
            patch_radius_f: 1,
            ..tuned_config()
        };
        let (_, field, _) = register(&case.fixed, &case.moving, None, &cfg).unwrap();
        let reg = tre(&case.fixed_lms, &case.moving_lms, Some(&field), spacing).unwrap();
        println!(
            "  {}: initial {:.2} mm -> registered {:.2} mm",
            case.name, initial.mean_mm, reg.mean_mm
        );
        initial_means.push(initial.mean_mm);
        registered_means.push(reg.mean_mm);
    }
    let initial = initial_means.iter().sum::<f64>() / initial_means.len() as f64;
    let registered = registered_means.iter().sum::<f64>() / registered_means.len() as f64;
    report(
        label,
        (initial - want_initial).abs() <= 0.05 && registered <= max_registered,
        &format!(
            "initial {initial:.2} mm (expect {want_initial} ± 0.05), registered {registered:.2} mm (limit {max_registered})"
        ),
    );
}

#[test]
fn dirlab_4dct() {
    dirlab_criterion("DIRLAB_4DCT_DIR", "DIR-Lab 4D-CT", 8.46, 3.0);
}

#[test]
fn dirlab_copd() {
    dirlab_criterion("DIRLAB_COPD_DIR", "DIR-Lab COPD", 23.36, 6.0);
}
