use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dispembed_core::io::{
    load_landmarks, load_volume, rawmeta, save_field, save_landmarks, save_volume,
};
use dispembed_core::pipeline::{
    embedding_from_rawmeta, embedding_to_rawmeta, register_full, EmbedDim, PipelineConfig,
};
use dispembed_core::{
    foerstner_scores, gen_synthetic_case, preprocess_ct, select_keypoints, tre, LandmarkSet,
    Volume3,
};

/// Sparse-keypoint deformable registration of 3D CT volume pairs via
/// displacement-embedding cost maps.
#[derive(Parser)]
#[command(name = "dispembed", version, disable_help_subcommand = true)]
struct Cli {
    /// Worker thread cap (default: all cores; env fallback DISPEMBED_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed volume
    Register(RegisterArgs),
    /// Compute target registration error over landmark pairs
    Evaluate(EvaluateArgs),
    /// Detect and export distinctive keypoints of a volume
    Keypoints(KeypointsArgs),
    /// Generate a deterministic synthetic registration case
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigOverrides {
    /// Flat key=value config file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding width: positive integer or `full`
    #[arg(long)]
    embed_dim: Option<EmbedDim>,
    /// Displacement lattice half-width in steps (L)
    #[arg(long)]
    grid_radius: Option<usize>,
    /// Displacement lattice step in voxels (q)
    #[arg(long)]
    grid_step: Option<usize>,
    /// Descriptor grid stride in voxels
    #[arg(long)]
    stride: Option<usize>,
    /// Diffusion anchor weight in [0, 1)
    #[arg(long)]
    alpha: Option<f64>,
    /// Diffusion iteration count
    #[arg(long)]
    iters: Option<usize>,
    /// Soft-argmin temperature
    #[arg(long)]
    temperature: Option<f64>,
    /// Keypoint-graph neighbor count
    #[arg(long)]
    knn: Option<usize>,
    /// Seed recorded in the run configuration
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOverrides {
    fn build(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::data(format!("cannot read config {path:?}: {e}")))?;
                PipelineConfig::from_text(&text)
                    .map_err(|e| CliError::usage(format!("bad config {path:?}: {e}")))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.grid_radius {
            cfg.grid_radius = v;
        }
        if let Some(v) = self.grid_step {
            cfg.grid_step = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.knn {
            cfg.knn = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()
            .map_err(|e| CliError::usage(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RegisterArgs {
    /// Fixed (reference) volume: NIfTI-1 or raw+meta
    #[arg(long)]
    fixed: PathBuf,
    /// Moving volume to register onto the fixed grid
    #[arg(long)]
    moving: PathBuf,
    /// Binary region-of-interest mask on the fixed grid
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output dense displacement field (3-channel raw+meta)
    #[arg(long)]
    out_field: Option<PathBuf>,
    /// Output sparse keypoint displacements (6-column text)
    #[arg(long)]
    out_sparse: Option<PathBuf>,
    /// Persist the fitted embedding (raw+meta)
    #[arg(long)]
    save_embedding: Option<PathBuf>,
    /// Reuse a previously fitted embedding instead of fitting PCA
    #[arg(long)]
    load_embedding: Option<PathBuf>,
    /// Dump the N x D cost maps for offline analysis (raw+meta)
    #[arg(long)]
    dump_costs: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Print the per-stage run log
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dense displacement field to evaluate (3-channel raw+meta)
    #[arg(long)]
    field: Option<PathBuf>,
    /// Fixed-volume landmarks, one `i j k` triple per line
    #[arg(long)]
    lms_fixed: PathBuf,
    /// Moving-volume landmarks, same format and order
    #[arg(long)]
    lms_moving: PathBuf,
    /// Volume supplying voxel spacing when no field is given
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Treat landmark coordinates as one-based (DIR-Lab convention)
    #[arg(long)]
    one_based: bool,
    /// Also print one row per landmark
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct KeypointsArgs {
    /// Volume to detect keypoints in: NIfTI-1 or raw+meta
    #[arg(long)]
    fixed: PathBuf,
    /// Binary region-of-interest mask
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output path for the keypoint list (landmark text format)
    #[arg(long)]
    keypoints: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Print the selected keypoint count
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Base volume deformed into the synthetic moving image
    #[arg(long)]
    base: PathBuf,
    /// Maximum displacement vector norm in mm
    #[arg(long, default_value_t = 20.0)]
    max_disp: f64,
    /// Deformation smoothness (Gaussian kernel width) in mm
    #[arg(long, default_value_t = 30.0)]
    smoothness: f64,
    /// Noise seed; identical seeds give bit-identical cases
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving moving volume, truth field, and landmarks
    #[arg(long)]
    out_dir: PathBuf,
}

/// Error with the exit code it maps to: 1 usage, 2 data/processing.
struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 1 }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 2 }
    }
}

impl From<dispembed_core::Error> for CliError {
    fn from(e: dispembed_core::Error) -> Self {
        CliError::data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successful exits; anything else is a
            // usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("DISPEMBED_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Register(args) => run_register(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Keypoints(args) => run_keypoints(args),
        Command::Synth(args) => run_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load(path: &Path) -> Result<Volume3, CliError> {
    load_volume(path, None).map_err(CliError::from)
}

fn run_register(args: RegisterArgs) -> Result<(), CliError> {
    let cfg = args.overrides.build()?;
    let fixed = load(&args.fixed)?;
    let moving = load(&args.moving)?;
    let mask = args.mask.as_deref().map(load).transpose()?;
    let preloaded = args
        .load_embedding
        .as_deref()
        .map(|p| rawmeta::read(p).and_then(|arr| embedding_from_rawmeta(&arr)))
        .transpose()?;

    let (sparse, field, log, extras) =
        register_full(&fixed, &moving, mask.as_ref(), &cfg, preloaded)?;

    if args.verbose {
        print!("{log}");
    }
    if let Some(path) = &args.out_field {
        save_field(&field, path)?;
    }
    if let Some(path) = &args.out_sparse {
        let mut text = String::new();
        for (c, v) in sparse.keypoints.coords.iter().zip(&sparse.vectors) {
            text.push_str(&format!(
                "{} {} {} {} {} {}\n",
                c[0], c[1], c[2], v[0], v[1], v[2]
            ));
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::data(format!("cannot write {path:?}: {e}")))?;
    }
    if let Some(path) = &args.save_embedding {
        rawmeta::write(path, &embedding_to_rawmeta(&extras.embedding))?;
    }
    if let Some(path) = &args.dump_costs {
        rawmeta::write(path, &extras.costs.to_rawmeta())?;
    }
    println!(
        "registered {} keypoints ({} excluded); field {}x{}x{}",
        log.keypoints_used,
        log.keypoints_excluded,
        field.dims()[0],
        field.dims()[1],
        field.dims()[2]
    );
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut fixed_lms = load_landmarks(&args.lms_fixed)?;
    let mut moving_lms = load_landmarks(&args.lms_moving)?;
    if args.one_based {
        fixed_lms = fixed_lms.to_zero_based();
        moving_lms = moving_lms.to_zero_based();
    }
    let field = args.field.as_deref().map(dispembed_core::io::load_field).transpose()?;
    let spacing = match (&field, &args.fixed) {
        (Some(f), _) => f.spacing(),
        (None, Some(path)) => load(path)?.spacing(),
        (None, None) => [1.0; 3],
    };
    let report = tre(&fixed_lms, &moving_lms, field.as_ref(), spacing)?;
    let case = args
        .field
        .as_deref()
        .or(Some(args.lms_fixed.as_path()))
        .and_then(Path::file_stem)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    println!(
        "{case}, {}, {:.4}, {:.4}",
        report.count, report.mean_mm, report.std_mm
    );
    println!(
        "TRE over {} landmarks: mean {:.2} mm, sample std {:.2} mm",
        report.count, report.mean_mm, report.std_mm
    );
    if args.verbose {
        for (i, e) in report.per_landmark_mm.iter().enumerate() {
            println!("{i}, {e:.4}");
        }
    }
    Ok(())
}

fn run_keypoints(args: KeypointsArgs) -> Result<(), CliError> {
    let cfg = args.overrides.build()?;
    let vol = load(&args.fixed)?;
    let mask = args.mask.as_deref().map(load).transpose()?;
    let pre = preprocess_ct(&vol, cfg.clamp_lo_hu, cfg.clamp_hi_hu)?;
    let scores = foerstner_scores(&pre, cfg.sigma_mm, cfg.grad_sigma_mm)?;
    let kps = select_keypoints(&scores, mask.as_ref(), cfg.keypoint_target, cfg.nms_radius)?;
    let lms = LandmarkSet::new(
        kps.coords
            .iter()
            .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
            .collect(),
    );
    save_landmarks(&lms, &args.keypoints)?;
    if args.verbose {
        println!("selected {} keypoints", kps.len());
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    if args.max_disp < 0.0 || args.smoothness <= 0.0 {
        return Err(CliError::usage(
            "--max-disp must be >= 0 and --smoothness must be > 0",
        ));
    }
    let base = load(&args.base)?;
    let case = gen_synthetic_case(&base, args.max_disp, args.smoothness, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::data(format!("cannot create {:?}: {e}", args.out_dir)))?;
    save_volume(&case.moving, &args.out_dir.join("moving.raw"))?;
    save_field(&case.truth, &args.out_dir.join("truth_field.raw"))?;
    save_landmarks(&case.fixed_lms, &args.out_dir.join("fixed_landmarks.txt"))?;
    save_landmarks(&case.moving_lms, &args.out_dir.join("moving_landmarks.txt"))?;
    println!(
        "wrote synthetic case to {:?} ({} landmark pairs)",
        args.out_dir,
        case.fixed_lms.count()
    );
    Ok(())
}
