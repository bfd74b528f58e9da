//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 solver failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cli_io;
use crate::error::{GroundPoseError, Result};
use crate::evaluation::{accuracy_curve, add_distance, geodesic_error, ADD_THRESHOLDS, VIEWPOINT_THRESHOLDS};
use crate::joint_solver::solve_scene;
use crate::scene_model::{CameraIntrinsics, FocalMode, SceneEstimate, ShapeAtlas, SolverConfig};
use crate::synth_oracle::{car_atlas, generate_scene, SynthConfig};

/// Environment variable consulted when neither `--seed` nor the config sets a seed.
pub const SEED_ENV: &str = "GROUNDPOSE_SEED";

#[derive(Debug, Parser)]
#[command(name = "groundpose", version, about = "Joint object pose, ground plane and focal estimation from keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate poses, plane and focal for one scene.
    Solve(SolveArgs),
    /// Generate a synthetic scene and its ground truth.
    Synth(SynthArgs),
    /// Print ADD accuracy and viewpoint precision tables.
    Eval(EvalArgs),
    /// Collect estimates of a directory into one trajectory file.
    ExportTraj(ExportArgs),
    /// Write the built-in 12-keypoint car atlas.
    WriteAtlas {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// Known focal length in pixels; disables focal refinement.
    #[arg(long)]
    focal: Option<f64>,
    /// Solve every object independently, without plane terms.
    #[arg(long)]
    no_plane: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Solver configuration JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration JSON-lines; defaults to `<out>.diagnostics.jsonl`.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    atlas: PathBuf,
    /// Generator configuration JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_scene: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Estimate file, or a directory of them.
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth file, or a directory with files of the same names.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// ADD thresholds in object diameters.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Viewpoint thresholds in radians.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    viewpoint_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    estimates: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn exit_code(e: &GroundPoseError) -> i32 {
    match e {
        GroundPoseError::InvalidArgument(_)
        | GroundPoseError::Parse { .. }
        | GroundPoseError::Validation(_)
        | GroundPoseError::Io { .. }
        | GroundPoseError::EmptyScene
        | GroundPoseError::InvalidPlane => 1,
        GroundPoseError::BehindCamera { .. }
        | GroundPoseError::Underdetermined { .. }
        | GroundPoseError::Degenerate(_)
        | GroundPoseError::NoProgress { .. }
        | GroundPoseError::InsufficientData(_)
        | GroundPoseError::UnobservableFocal { .. }
        | GroundPoseError::Generation(_) => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Solve(a) => solve(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a).map(|table| print!("{table}")),
        Command::ExportTraj(a) => export(a),
        Command::WriteAtlas { out } => cli_io::save_atlas(&car_atlas(), &out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("groundpose: {e}");
            exit_code(&e)
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| GroundPoseError::invalid(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// `--seed`, then the config's own `seed`, then the environment.
fn resolve_seed(flag: Option<u64>, config_path: Option<&Path>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| GroundPoseError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let value: serde_json::Value = cli_io::parse_json(&text, &path.display().to_string())?;
        if value.get("seed").is_some() {
            return Ok(None);
        }
    }
    env_seed()
}

fn solve(a: SolveArgs) -> Result<()> {
    let mut scene = cli_io::load_scene(&a.scene)?;
    let atlas = cli_io::load_atlas(&a.atlas)?;
    let mut config = match &a.config {
        Some(p) => cli_io::load_solver_config(p)?,
        None => SolverConfig::default(),
    };
    if let Some(seed) = resolve_seed(a.seed, a.config.as_deref())? {
        config.seed = seed;
        config.ransac.seed = seed;
    }
    if let Some(f) = a.focal {
        let pp = scene.principal_point();
        scene.intrinsics_hint = Some(CameraIntrinsics::new(f, pp)?);
        config.focal_mode = FocalMode::Fixed;
    }
    if a.no_plane {
        config.use_plane = false;
    }
    if scene.detections.is_empty() {
        return Err(GroundPoseError::EmptyScene);
    }
    let solution = solve_scene(&scene, &atlas, &config)?;
    cli_io::save_estimate(&solution.estimate, &a.out)?;
    let diag_path = a.diagnostics.unwrap_or_else(|| cli_io::diagnostics_path(&a.out));
    cli_io::save_diagnostics(&solution.diagnostics, &diag_path)
}

fn synth(a: SynthArgs) -> Result<()> {
    let atlas = cli_io::load_atlas(&a.atlas)?;
    let mut config = match &a.config {
        Some(p) => cli_io::load_synth_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = resolve_seed(a.seed, a.config.as_deref())? {
        config.seed = seed;
    }
    let s = generate_scene(&atlas, &config)?;
    cli_io::save_scene(&s.scene, &a.out_scene)?;
    cli_io::save_truth(&s.truth, &s.object_outliers, &a.out_truth)
}

fn file_pairs(est: &Path, truth: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if est.is_dir() {
        if !truth.is_dir() {
            return Err(GroundPoseError::invalid("--est is a directory, so --truth must be one too"));
        }
        let pairs: Vec<(PathBuf, PathBuf)> = cli_io::json_files(est)?
            .into_iter()
            .map(|e| {
                let t = truth.join(e.file_name().expect("listed file"));
                (e, t)
            })
            .collect();
        if pairs.is_empty() {
            return Err(GroundPoseError::InsufficientData(format!("no estimate files in {}", est.display())));
        }
        Ok(pairs)
    } else {
        Ok(vec![(est.to_path_buf(), truth.to_path_buf())])
    }
}

/// ADD and rotation errors per ground-truth object; failed estimates count as infinite.
pub fn pose_errors(est: &SceneEstimate, truth: &SceneEstimate, atlas: &ShapeAtlas) -> Result<Vec<(f64, f64)>> {
    if est.ids != truth.ids {
        return Err(GroundPoseError::Validation("estimate and ground truth list different objects".into()));
    }
    est.objects
        .iter()
        .zip(&truth.objects)
        .filter_map(|(e, g)| g.as_ref().map(|g| (e, g)))
        .map(|(e, g)| match e {
            Some(e) => Ok((add_distance(e, g, atlas)?, geodesic_error(&e.rotation, &g.rotation))),
            None => Ok((f64::INFINITY, f64::INFINITY)),
        })
        .collect()
}

fn table_row(label: &str, values: &[f64], precision: usize) -> String {
    let mut row = format!("{label:<10}");
    for v in values {
        let _ = write!(row, " {v:>8.precision$}");
    }
    row.push('\n');
    row
}

fn eval(a: EvalArgs) -> Result<String> {
    let atlas = cli_io::load_atlas(&a.atlas)?;
    let add_t = a.thresholds.unwrap_or_else(|| ADD_THRESHOLDS.to_vec());
    let view_t = a.viewpoint_thresholds.unwrap_or_else(|| VIEWPOINT_THRESHOLDS.to_vec());
    let mut add = Vec::new();
    let mut view = Vec::new();
    let mut failed = 0;
    for (e, t) in file_pairs(&a.est, &a.truth)? {
        let est = cli_io::load_estimate(&e)?;
        let (truth, _) = cli_io::load_truth(&t)?;
        for (d, r) in pose_errors(&est, &truth, &atlas)? {
            if d.is_infinite() {
                failed += 1;
            }
            add.push(d);
            view.push(r);
        }
    }
    let add_acc = accuracy_curve(&add, &add_t)?;
    let view_acc = accuracy_curve(&view, &view_t)?;
    let mut out = String::new();
    out.push_str("ADD accuracy (%), thresholds in object diameters\n");
    out.push_str(&table_row("threshold", &add_t, 2));
    out.push_str(&table_row("accuracy", &add_acc, 2));
    out.push_str("Viewpoint precision (%), thresholds in radians\n");
    out.push_str(&table_row("threshold", &view_t, 2));
    out.push_str(&table_row("precision", &view_acc, 2));
    let _ = writeln!(out, "objects: {} (failed: {failed})", add.len());
    Ok(out)
}

fn export(a: ExportArgs) -> Result<()> {
    let traj = cli_io::build_trajectory(&a.estimates)?;
    std::fs::write(&a.out, cli_io::to_json(&traj)?).map_err(|e| GroundPoseError::Io {
        path: a.out.display().to_string(),
        message: e.to_string(),
    })
}
