//! End-to-end registration orchestration, configuration defaults, and the
//! lung-mask fallback used when no mask is supplied.

use std::collections::VecDeque;
use std::fmt;
use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::correspondence::{build_cost_maps, CostMapSet, DisplacementLattice, SparseDisplacements};
use crate::embedding::{fit_pca, Embedding};
use crate::error::{Error, Result};
use crate::features::{compute_mind, preprocess_ct, Neighborhood};
use crate::filter::{dilate, erode};
use crate::io::rawmeta::{RawDtype, RawMetaArray};
use crate::keypoints::{foerstner_scores, select_keypoints};
use crate::regularize::{build_graph, extrapolate_dense, regularize_displacements, VectorStage};
use crate::volume::{DenseField, IntensityUnit, Volume3};

/// Requested embedding width: a fixed k or the full (lossless) basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedDim {
    Fixed(usize),
    Full,
}

impl fmt::Display for EmbedDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedDim::Fixed(k) => write!(f, "{k}"),
            EmbedDim::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for EmbedDim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(EmbedDim::Full);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::Invalid(format!("embed_dim must be a positive integer or `full`, got `{s}`")))?;
        if k == 0 {
            return Err(Error::Invalid("embed_dim must be >= 1".into()));
        }
        Ok(EmbedDim::Fixed(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub clamp_lo_hu: f32,
    pub clamp_hi_hu: f32,
    /// Optional isotropic resample target before registration; the output
    /// field is mapped back to the original fixed grid.
    pub resample_spacing_mm: Option<f32>,
    pub stride: usize,
    pub neighborhood: Neighborhood,
    pub patch_radius: usize,
    pub keypoint_target: usize,
    pub nms_radius: usize,
    pub sigma_mm: f32,
    pub grad_sigma_mm: f32,
    /// Lattice half-width in steps (L) and step size in voxels (q).
    pub grid_radius: usize,
    pub grid_step: usize,
    pub patch_radius_f: usize,
    pub embed_dim: EmbedDim,
    pub knn: usize,
    pub bandwidth_factor: f64,
    pub alpha: f64,
    pub iters: usize,
    pub vector_alpha: f64,
    /// 0 disables the optional second diffusion pass on decoded vectors.
    pub vector_iters: usize,
    pub temperature: f64,
    /// Dense extrapolation bandwidth as a multiple of the mean keypoint
    /// nearest-neighbor distance.
    pub extrap_bandwidth_factor: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            clamp_lo_hu: -1000.0,
            clamp_hi_hu: 500.0,
            resample_spacing_mm: None,
            stride: 2,
            neighborhood: Neighborhood::Ssc12,
            patch_radius: 1,
            keypoint_target: 1500,
            nms_radius: 4,
            sigma_mm: 1.5,
            grad_sigma_mm: 1.0,
            grid_radius: 10,
            grid_step: 2,
            patch_radius_f: 1,
            embed_dim: EmbedDim::Fixed(512),
            knn: 10,
            bandwidth_factor: 1.0,
            alpha: 0.5,
            iters: 5,
            vector_alpha: 0.5,
            vector_iters: 0,
            temperature: 1.0,
            extrap_bandwidth_factor: 2.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_lo_hu < self.clamp_hi_hu) {
            return Err(Error::Invalid("clamp_lo_hu must be below clamp_hi_hu".into()));
        }
        if let Some(s) = self.resample_spacing_mm {
            if !(s > 0.0) {
                return Err(Error::Invalid("resample_spacing_mm must be > 0".into()));
            }
        }
        if self.stride < 1 || self.grid_step < 1 {
            return Err(Error::Invalid("stride and grid_step must be >= 1".into()));
        }
        if self.keypoint_target < 1 {
            return Err(Error::Invalid("keypoint_target must be >= 1".into()));
        }
        if !(self.sigma_mm > 0.0) || !(self.grad_sigma_mm > 0.0) {
            return Err(Error::Invalid("sigma_mm and grad_sigma_mm must be > 0".into()));
        }
        if let EmbedDim::Fixed(k) = self.embed_dim {
            if k == 0 {
                return Err(Error::Invalid("embed_dim must be >= 1".into()));
            }
        }
        if self.knn < 1 {
            return Err(Error::Invalid("knn must be >= 1".into()));
        }
        if !(self.bandwidth_factor > 0.0) || !(self.extrap_bandwidth_factor > 0.0) {
            return Err(Error::Invalid("bandwidth factors must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.vector_alpha) {
            return Err(Error::Invalid("alpha values must lie in [0, 1)".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Invalid("temperature must be > 0".into()));
        }
        Ok(())
    }

    /// Serialize as flat `key = value` lines; `from_text` inverts this.
    pub fn to_text(&self) -> String {
        let neighborhood = match self.neighborhood {
            Neighborhood::SixNn => "six_nn",
            Neighborhood::Ssc12 => "ssc12",
        };
        let resample = match self.resample_spacing_mm {
            Some(s) => s.to_string(),
            None => "none".into(),
        };
        format!(
            "clamp_lo_hu = {}\nclamp_hi_hu = {}\nresample_spacing_mm = {}\nstride = {}\n\
             neighborhood = {}\npatch_radius = {}\nkeypoint_target = {}\nnms_radius = {}\n\
             sigma_mm = {}\ngrad_sigma_mm = {}\ngrid_radius = {}\ngrid_step = {}\n\
             patch_radius_f = {}\nembed_dim = {}\nknn = {}\nbandwidth_factor = {}\n\
             alpha = {}\niters = {}\nvector_alpha = {}\nvector_iters = {}\n\
             temperature = {}\nextrap_bandwidth_factor = {}\nseed = {}\n",
            self.clamp_lo_hu,
            self.clamp_hi_hu,
            resample,
            self.stride,
            neighborhood,
            self.patch_radius,
            self.keypoint_target,
            self.nms_radius,
            self.sigma_mm,
            self.grad_sigma_mm,
            self.grid_radius,
            self.grid_step,
            self.patch_radius_f,
            self.embed_dim,
            self.knn,
            self.bandwidth_factor,
            self.alpha,
            self.iters,
            self.vector_alpha,
            self.vector_iters,
            self.temperature,
            self.extrap_bandwidth_factor,
            self.seed,
        )
    }

    /// Parse `key = value` lines; unknown keys are errors, missing keys keep
    /// their defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: String| Error::Parse {
                line: lineno + 1,
                msg,
            };
            macro_rules! num {
                ($ty:ty) => {
                    value
                        .parse::<$ty>()
                        .map_err(|e| bad(format!("`{key}`: {e}")))?
                };
            }
            match key {
                "clamp_lo_hu" => cfg.clamp_lo_hu = num!(f32),
                "clamp_hi_hu" => cfg.clamp_hi_hu = num!(f32),
                "resample_spacing_mm" => {
                    cfg.resample_spacing_mm = if value.eq_ignore_ascii_case("none") {
                        None
                    } else {
                        Some(num!(f32))
                    }
                }
                "stride" => cfg.stride = num!(usize),
                "neighborhood" => {
                    cfg.neighborhood = match value {
                        "six_nn" => Neighborhood::SixNn,
                        "ssc12" => Neighborhood::Ssc12,
                        other => return Err(bad(format!("unknown neighborhood `{other}`"))),
                    }
                }
                "patch_radius" => cfg.patch_radius = num!(usize),
                "keypoint_target" => cfg.keypoint_target = num!(usize),
                "nms_radius" => cfg.nms_radius = num!(usize),
                "sigma_mm" => cfg.sigma_mm = num!(f32),
                "grad_sigma_mm" => cfg.grad_sigma_mm = num!(f32),
                "grid_radius" => cfg.grid_radius = num!(usize),
                "grid_step" => cfg.grid_step = num!(usize),
                "patch_radius_f" => cfg.patch_radius_f = num!(usize),
                "embed_dim" => cfg.embed_dim = value.parse()?,
                "knn" => cfg.knn = num!(usize),
                "bandwidth_factor" => cfg.bandwidth_factor = num!(f64),
                "alpha" => cfg.alpha = num!(f64),
                "iters" => cfg.iters = num!(usize),
                "vector_alpha" => cfg.vector_alpha = num!(f64),
                "vector_iters" => cfg.vector_iters = num!(usize),
                "temperature" => cfg.temperature = num!(f64),
                "extrap_bandwidth_factor" => cfg.extrap_bandwidth_factor = num!(f64),
                "seed" => cfg.seed = num!(u64),
                other => return Err(bad(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-stage wall times and the counters needed to audit a run.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub stages: Vec<(String, f64)>,
    pub keypoints_detected: usize,
    pub keypoints_used: usize,
    pub keypoints_excluded: usize,
    pub embed_dim: usize,
    pub explained_variance_sum: f64,
    pub notes: Vec<String>,
}

impl fmt::Display for RunLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, secs) in &self.stages {
            writeln!(f, "stage {name}: {secs:.3}s")?;
        }
        writeln!(
            f,
            "keypoints: detected {} used {} excluded {}",
            self.keypoints_detected, self.keypoints_used, self.keypoints_excluded
        )?;
        writeln!(
            f,
            "embedding: dim {} explained-variance sum {:.6e}",
            self.embed_dim, self.explained_variance_sum
        )?;
        for note in &self.notes {
            writeln!(f, "note: {note}")?;
        }
        Ok(())
    }
}

/// Byproducts of `register_full` that some callers persist.
#[derive(Debug)]
pub struct RegisterExtras {
    pub embedding: Embedding,
    pub costs: CostMapSet,
}

pub fn register(
    fixed: &Volume3,
    moving: &Volume3,
    mask: Option<&Volume3>,
    cfg: &PipelineConfig,
) -> Result<(SparseDisplacements, DenseField, RunLog)> {
    let (sparse, field, log, _) = register_full(fixed, moving, mask, cfg, None)?;
    Ok((sparse, field, log))
}

/// Full pipeline: preprocess → descriptors → keypoints → cost maps →
/// embedding → graph diffusion → soft-argmin decode → dense extrapolation.
/// A preloaded embedding skips the PCA fit. Every stage failure carries the
/// stage name.
pub fn register_full(
    fixed: &Volume3,
    moving: &Volume3,
    mask: Option<&Volume3>,
    cfg: &PipelineConfig,
    preloaded: Option<Embedding>,
) -> Result<(SparseDisplacements, DenseField, RunLog, RegisterExtras)> {
    cfg.validate()?;
    let mut log = RunLog::default();
    let orig_dims = fixed.dims();
    let orig_spacing = fixed.spacing();

    let mut timer = Instant::now();
    let stage = |log: &mut RunLog, name: &str, t: &mut Instant| {
        log.stages.push((name.to_string(), t.elapsed().as_secs_f64()));
        *t = Instant::now();
    };

    // optional isotropic resample of all inputs
    let (fixed_w, moving_w, mask_w) = match cfg.resample_spacing_mm {
        Some(s) => {
            let sp = [s; 3];
            let f = fixed.resample(sp).map_err(|e| e.in_stage("resample"))?;
            let m = moving.resample(sp).map_err(|e| e.in_stage("resample"))?;
            let mk = match mask {
                Some(mk) => Some(mk.resample(sp).map_err(|e| e.in_stage("resample"))?),
                None => None,
            };
            (f, m, mk)
        }
        None => (fixed.clone(), moving.clone(), mask.cloned()),
    };
    if fixed_w.dims() != moving_w.dims() {
        return Err(Error::Dimension(format!(
            "fixed and moving dims differ after preprocessing: {:?} vs {:?}",
            fixed_w.dims(),
            moving_w.dims()
        ))
        .in_stage("preprocess"));
    }
    stage(&mut log, "resample", &mut timer);

    // fall back to an automatic lung mask on HU inputs; keep going unmasked
    // when the heuristic finds nothing plausible
    let mask_w = match (&mask_w, fixed_w.intensity_unit()) {
        (None, IntensityUnit::Hu) => match lung_mask_fallback(&fixed_w, -400.0) {
            Ok(m) => {
                log.notes.push("using automatic lung mask (HU < -400)".into());
                Some(m)
            }
            Err(e) => {
                log.notes.push(format!("automatic lung mask unavailable ({e}); running unmasked"));
                None
            }
        },
        _ => mask_w,
    };
    stage(&mut log, "mask", &mut timer);

    let fixed_pp = preprocess_ct(&fixed_w, cfg.clamp_lo_hu, cfg.clamp_hi_hu)
        .map_err(|e| e.in_stage("preprocess"))?;
    let moving_pp = preprocess_ct(&moving_w, cfg.clamp_lo_hu, cfg.clamp_hi_hu)
        .map_err(|e| e.in_stage("preprocess"))?;
    stage(&mut log, "preprocess", &mut timer);

    let desc_fixed = compute_mind(&fixed_pp, cfg.stride, cfg.patch_radius, cfg.neighborhood)
        .map_err(|e| e.in_stage("descriptors"))?;
    let desc_moving = compute_mind(&moving_pp, cfg.stride, cfg.patch_radius, cfg.neighborhood)
        .map_err(|e| e.in_stage("descriptors"))?;
    stage(&mut log, "descriptors", &mut timer);

    let scores = foerstner_scores(&fixed_pp, cfg.sigma_mm, cfg.grad_sigma_mm)
        .map_err(|e| e.in_stage("keypoints"))?;
    let kps = select_keypoints(&scores, mask_w.as_ref(), cfg.keypoint_target, cfg.nms_radius)
        .map_err(|e| e.in_stage("keypoints"))?;
    log.keypoints_detected = kps.len();
    stage(&mut log, "keypoints", &mut timer);

    let lattice =
        DisplacementLattice::new(cfg.grid_radius, cfg.grid_step).map_err(|e| e.in_stage("cost_maps"))?;
    let costs = build_cost_maps(&desc_fixed, &desc_moving, &kps, &lattice, cfg.patch_radius_f)
        .map_err(|e| e.in_stage("cost_maps"))?;
    log.keypoints_used = costs.keypoints.len();
    log.keypoints_excluded = costs.excluded;
    stage(&mut log, "cost_maps", &mut timer);

    let embedding = match preloaded {
        Some(e) => {
            if e.dim_in() != lattice.len() {
                return Err(Error::Dimension(format!(
                    "loaded embedding expects {} cost entries, lattice has {}",
                    e.dim_in(),
                    lattice.len()
                ))
                .in_stage("embedding"));
            }
            e
        }
        None => {
            let n = costs.costs.nrows();
            let d = costs.costs.ncols();
            let k = match cfg.embed_dim {
                EmbedDim::Fixed(k) => k.min(n.min(d)),
                EmbedDim::Full => n.min(d),
            };
            fit_pca(&costs.costs, k).map_err(|e| e.in_stage("embedding"))?
        }
    };
    log.embed_dim = embedding.dim_out();
    log.explained_variance_sum = embedding.explained_variance().iter().sum();
    stage(&mut log, "embedding", &mut timer);

    let graph = build_graph(&costs.keypoints, fixed_w.spacing(), cfg.knn, cfg.bandwidth_factor)
        .map_err(|e| e.in_stage("graph"))?;
    let vector_stage = (cfg.vector_iters > 0).then_some(VectorStage {
        alpha: cfg.vector_alpha,
        iters: cfg.vector_iters,
    });
    let sparse = regularize_displacements(
        &costs,
        &embedding,
        &graph,
        cfg.alpha,
        cfg.iters,
        cfg.temperature,
        vector_stage,
    )
    .map_err(|e| e.in_stage("regularize"))?;
    stage(&mut log, "regularize", &mut timer);

    let bandwidth_mm = cfg.extrap_bandwidth_factor * graph.mean_nn_dist_mm();
    let field_w = extrapolate_dense(&sparse, fixed_w.dims(), fixed_w.spacing(), bandwidth_mm)
        .map_err(|e| e.in_stage("extrapolate"))?;

    // map the field back to the original fixed grid when we resampled
    let field = if cfg.resample_spacing_mm.is_some() {
        resample_field(&field_w, orig_dims, orig_spacing)
            .map_err(|e| e.in_stage("extrapolate"))?
    } else {
        field_w
    };
    stage(&mut log, "extrapolate", &mut timer);

    Ok((sparse, field, log, RegisterExtras { embedding, costs }))
}

/// Trilinearly resample a displacement field onto another grid, rescaling
/// the vectors from source-grid voxels to target-grid voxels.
fn resample_field(
    field: &DenseField,
    dims: [usize; 3],
    spacing: [f32; 3],
) -> Result<DenseField> {
    let src_spacing = field.spacing();
    let n = dims[0] * dims[1] * dims[2];
    let mut vectors = Vec::with_capacity(n);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [
                    i as f32 * spacing[0] / src_spacing[0],
                    j as f32 * spacing[1] / src_spacing[1],
                    k as f32 * spacing[2] / src_spacing[2],
                ];
                let u = field.trilinear(p);
                vectors.push([
                    u[0] * src_spacing[0] / spacing[0],
                    u[1] * src_spacing[1] / spacing[1],
                    u[2] * src_spacing[2] / spacing[2],
                ]);
            }
        }
    }
    DenseField::new(dims, spacing, vectors)
}

/// Heuristic lung mask: threshold below `threshold_hu`, 26-connected
/// component labeling, then keep interior components of meaningful size and
/// close small gaps. Errors when nothing plausible survives.
pub fn lung_mask_fallback(vol: &Volume3, threshold_hu: f32) -> Result<Volume3> {
    if vol.intensity_unit() != IntensityUnit::Hu {
        return Err(Error::Invalid(
            "lung mask fallback expects HU intensities; supply a mask explicitly".into(),
        ));
    }
    let dims = vol.dims();
    let [nx, ny, nz] = dims;
    let total = nx * ny * nz;
    let air: Vec<bool> = vol.voxels().iter().map(|&v| v < threshold_hu).collect();

    let mut label = vec![0u32; total]; // 0 = unlabeled
    let mut next = 1u32;
    let mut kept = vec![false; total];
    let mut any_component = false;
    let mut queue = VecDeque::new();
    for start in 0..total {
        if !air[start] || label[start] != 0 {
            continue;
        }
        any_component = true;
        let id = next;
        next += 1;
        let mut members = Vec::new();
        let mut border = 0usize;
        label[start] = id;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
                border += 1;
            }
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        if di == 0 && dj == 0 && dk == 0 {
                            continue;
                        }
                        let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= nx as i64
                            || nj >= ny as i64
                            || nk >= nz as i64
                        {
                            continue;
                        }
                        let nidx = ni as usize + nx * (nj as usize + ny * nk as usize);
                        if air[nidx] && label[nidx] == 0 {
                            label[nidx] = id;
                            queue.push_back(nidx);
                        }
                    }
                }
            }
        }
        // interior (few border voxels) and big enough to be a lung
        if border * 100 <= members.len() && members.len() * 100 >= total {
            for idx in members {
                kept[idx] = true;
            }
        }
    }
    if !any_component {
        return Err(Error::Invalid(format!(
            "no voxels below {threshold_hu} HU; supply a mask explicitly"
        )));
    }
    if !kept.iter().any(|&k| k) {
        return Err(Error::Invalid(
            "no interior air component of plausible lung size; supply a mask explicitly".into(),
        ));
    }
    let binary: Vec<f32> = kept.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let closed = erode(&dilate(&binary, dims, 2), dims, 2);
    Volume3::new(dims, vol.spacing(), closed, IntensityUnit::Arbitrary)
}

/// Persist an embedding as a single raw+meta array: row 0 the mean, rows
/// 1..=k the basis, row k+1 the explained variances (zero-padded to D).
pub fn embedding_to_rawmeta(e: &Embedding) -> RawMetaArray {
    let d = e.dim_in();
    let k = e.dim_out();
    let mut data = Vec::with_capacity(d * (k + 2));
    data.extend(e.mean().iter().map(|&v| v as f32));
    for row in e.basis().rows() {
        data.extend(row.iter().map(|&v| v as f32));
    }
    let mut var: Vec<f32> = e.explained_variance().iter().map(|&v| v as f32).collect();
    var.resize(d, 0.0);
    data.extend(var);
    RawMetaArray {
        dims: [d, k + 2, 1],
        spacing: [1.0; 3],
        channels: 1,
        dtype: RawDtype::Float32,
        data,
        extra: vec![
            ("embed_dim".into(), k.to_string()),
            ("rank_deficient".into(), (e.rank_deficient() as u8).to_string()),
        ],
    }
}

pub fn embedding_from_rawmeta(arr: &RawMetaArray) -> Result<Embedding> {
    let d = arr.dims[0];
    if arr.dims[1] < 3 || arr.dims[2] != 1 || arr.channels != 1 {
        return Err(Error::Format("not an embedding array".into()));
    }
    let k = arr.dims[1] - 2;
    let mean = Array1::from_iter(arr.data[..d].iter().map(|&v| v as f64));
    let basis = Array2::from_shape_vec(
        (k, d),
        arr.data[d..d * (k + 1)].iter().map(|&v| v as f64).collect(),
    )
    .map_err(|e| Error::Format(format!("embedding basis shape: {e}")))?;
    let variance: Vec<f64> = arr.data[d * (k + 1)..d * (k + 1) + k]
        .iter()
        .map(|&v| v as f64)
        .collect();
    let rank_deficient = arr
        .extra
        .iter()
        .find(|(key, _)| key == "rank_deficient")
        .map(|(_, v)| v == "1")
        .unwrap_or(false);
    Embedding::from_parts(mean, basis, variance, rank_deficient)
}
