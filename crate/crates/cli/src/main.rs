use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stillmesh::frames::{read_jsonl, write_jsonl};
use stillmesh::geometry::GeometryError;
use stillmesh::metrics::{evaluate, rows_to_csv, MetricsError};
use stillmesh::pipeline::{run_pipeline, PipelineConfig, PipelineError, Preset};
use stillmesh::rigidfit::RigidFitError;
use stillmesh::synthgen::{generate_scenario, load_masks, make_procedural_body, read_bundle, write_bundle, ScenarioSpec};

#[derive(Parser)]
#[command(name = "stillmesh", version, about = "Temporal correction of per-frame body meshes for a static subject")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle with ground truth.
    Gen {
        /// Scenario JSON; defaults are used for missing keys or when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the seed from the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct the predictions of a bundle with one preset.
    Run {
        #[arg(long)]
        bundle: PathBuf,
        /// Frame records to correct instead of the bundle's predictions.
        /// Mask paths stay relative to the bundle.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long, default_value = "F")]
        preset: Preset,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score corrected frames against a bundle.
    Eval {
        #[arg(long)]
        corrected: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Frame offset for the cross-view IoU.
        #[arg(long, default_value_t = 20)]
        lag: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit code 2 for bad input, 3 for numerical failure.
enum Failure {
    Input(String),
    Numerical(String),
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure::Input(e.to_string())
    }
}

fn numerical_geometry(e: &GeometryError) -> bool {
    matches!(e, GeometryError::NotARotation(_) | GeometryError::Degenerate(_) | GeometryError::EmptyCloud)
}

fn from_metrics(e: MetricsError) -> Failure {
    match &e {
        MetricsError::Geometry(g) if numerical_geometry(g) => Failure::Numerical(e.to_string()),
        _ => Failure::input(e),
    }
}

fn from_pipeline(e: PipelineError) -> Failure {
    let numerical = match &e {
        PipelineError::RigidFit(RigidFitError::NonFiniteObjective) => true,
        PipelineError::RigidFit(RigidFitError::Geometry(g)) => numerical_geometry(g),
        PipelineError::Metrics(MetricsError::Geometry(g)) => numerical_geometry(g),
        _ => false,
    };
    if numerical {
        Failure::Numerical(e.to_string())
    } else {
        Failure::input(e)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn cmd_gen(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut spec: ScenarioSpec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?
        }
        None => ScenarioSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let model = make_procedural_body();
    let bundle = generate_scenario(&spec, &model).map_err(Failure::input)?;
    create_dir(out)?;
    write_bundle(&bundle, out).map_err(Failure::input)?;
    let log = &bundle.injection_log;
    println!("wrote {} frames to {}", bundle.pred_frames.len(), out.display());
    for kind in ["outlier", "dropout", "occlusion"] {
        println!("  {kind}: {}", log.frames_of_kind(kind).len());
    }
    Ok(())
}

fn cmd_run(bundle_dir: &Path, frames: Option<&Path>, preset: Preset, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_json(&text).map_err(Failure::input)?
        }
        None => PipelineConfig::default(),
    };
    let bundle = read_bundle(bundle_dir).map_err(Failure::input)?;
    let (input, masks) = match frames {
        Some(p) => {
            let records = read_jsonl(p).map_err(Failure::input)?;
            let masks = load_masks(bundle_dir, &records).map_err(Failure::input)?;
            (records, masks)
        }
        None => (bundle.pred_frames, bundle.masks),
    };
    let (corrected, diag) =
        run_pipeline(&input, &masks, &bundle.model, &bundle.intrinsics, preset, &cfg).map_err(from_pipeline)?;
    create_dir(out)?;
    write_jsonl(&out.join("corrected_frames.jsonl"), &corrected).map_err(Failure::input)?;
    let report = serde_json::to_string_pretty(&diag).expect("diagnostics serialize");
    write_file(&out.join("fit_report.json"), &report)?;
    println!(
        "preset {preset}: {} frames, mean IoU {:.4}, {} fallback frames",
        corrected.len(),
        diag.mean_iou,
        diag.fallback_frames.len()
    );
    Ok(())
}

fn cmd_eval(corrected: &Path, bundle_dir: &Path, lag: usize, out: &Path) -> Result<(), Failure> {
    let frames = read_jsonl(corrected).map_err(Failure::input)?;
    let bundle = read_bundle(bundle_dir).map_err(Failure::input)?;
    // score against the true silhouettes when the bundle has them
    let masks = if bundle.gt_masks.is_empty() { &bundle.masks } else { &bundle.gt_masks };
    let eval = evaluate(&frames, masks, &bundle.model, &bundle.intrinsics, lag, bundle.gt_vertices.as_deref())
        .map_err(from_metrics)?;
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&eval.report).expect("report serializes");
    write_file(&out.join("metrics.json"), &json)?;
    write_file(&out.join("per_frame.csv"), &rows_to_csv(&eval.rows))?;
    let r = &eval.report;
    println!(
        "mean IoU {:.4}  >0.6 {:.1}%  <0.3 {:.1}%  cv-IoU {:.4}  mesh delta {:.5}  pose delta {:.5}",
        r.mean_iou, r.pct_above_0_6, r.pct_below_0_3, r.cv_iou, r.delta_mesh, r.delta_pose
    );
    if let Some(p) = r.pa_pve {
        println!("PA-PVE {p:.3} mm");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { spec, seed, out } => cmd_gen(spec.as_deref(), *seed, out),
        Command::Run { bundle, frames, preset, config, out } => {
            cmd_run(bundle, frames.as_deref(), *preset, config.as_deref(), out)
        }
        Command::Eval { corrected, bundle, lag, out } => cmd_eval(corrected, bundle, *lag, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
