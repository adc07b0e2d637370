//! `msfm`: runs the reconstruction pipeline stage by stage or end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msfm_core::eval::evaluate;
use msfm_core::export::{model_from_state, write_json, write_ply};
use msfm_core::io::state::{load_state, save_state, PipelineState, Stage};
use msfm_core::pipeline::{run_ba, run_pipeline, run_stage, write_stage_log, RunOptions, StageTiming};
use msfm_core::synth::{generate_scene, GroundTruth, SceneConfig};
use msfm_core::{Dataset, Error, ErrorClass, PipelineConfig};

const DEFAULT_STATE: &str = "state.msfm";
const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Parser)]
#[command(
    name = "msfm",
    version,
    about = "Line-based structure from motion for panoramic indoor captures"
)]
struct Cli {
    /// JSON configuration: a scene for `synth`, the pipeline otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Pipeline state file.
    #[arg(long, global = true)]
    state: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct LogDir {
    /// Directory for the stage CSV logs [default: next to the state file].
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ply,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene as a dataset directory plus ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the scene configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Leave out the normal maps.
        #[arg(long)]
        no_normal_maps: bool,
    },
    /// Start a new state from a dataset and merge and filter its segments.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        logs: LogDir,
    },
    /// Extract the Manhattan frame.
    Frame {
        #[command(flatten)]
        logs: LogDir,
    },
    /// Refine the camera rotations against the Manhattan frame.
    RefineRotations {
        #[command(flatten)]
        logs: LogDir,
    },
    /// Match segments between neighboring frames and build line tracks.
    Track {
        #[command(flatten)]
        logs: LogDir,
    },
    /// Detect coplanarity relations between tracks.
    Coplanarity {
        #[command(flatten)]
        logs: LogDir,
    },
    /// Solve the constrained linear system for translations and depths.
    Solve {
        #[command(flatten)]
        logs: LogDir,
    },
    /// Bundle adjustment.
    Ba {
        /// Last phase to run; earlier phases always run first.
        #[arg(long, value_enum, default_value = "all")]
        phase: Phase,
        #[command(flatten)]
        logs: LogDir,
    },
    /// Compare the state with ground truth and write a report.
    Evaluate {
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Write the line model.
    Export {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
    /// Every stage from a dataset, then export and, with ground truth, evaluation.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// [default: `ground_truth.json` in the dataset, if present]
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn read_text(path: &Path) -> msfm_core::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn pipeline_config(path: Option<&Path>) -> msfm_core::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::from_json(&read_text(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn scene_config(path: Option<&Path>) -> msfm_core::Result<SceneConfig> {
    match path {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string())),
        None => Ok(SceneConfig::default()),
    }
}

/// Stage timings live beside the state so `evaluate` can report them.
fn timings_path(state: &Path) -> PathBuf {
    state.with_extension("timings.json")
}

fn load_timings(state: &Path) -> msfm_core::Result<Vec<StageTiming>> {
    let path = timings_path(state);
    if !path.exists() {
        return Ok(Vec::new());
    }
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::load(&path, "timings", e.to_string()))
}

fn save_timings(state: &Path, timings: &[StageTiming]) -> msfm_core::Result<()> {
    let path = timings_path(state);
    let text = serde_json::to_string_pretty(timings).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn summary(state: &PipelineState, stage: Stage) -> String {
    match stage {
        Stage::Preprocess => format!("{} segments kept", state.preprocessed.as_ref().map_or(0, Vec::len)),
        Stage::Frame => "manhattan frame extracted".to_string(),
        Stage::RefineRotations => state.refined.as_ref().map_or_else(String::new, |r| {
            format!(
                "{} outer iterations, {} labeled segments",
                r.outer_iterations,
                r.assignment.labeled_count()
            )
        }),
        Stage::Track => state.tracking.as_ref().map_or_else(String::new, |t| {
            format!(
                "{} tracks from {} matches over {} frame pairs",
                t.tracks.len(),
                t.match_count,
                t.pair_count
            )
        }),
        Stage::Coplanarity => {
            format!(
                "{} relations",
                state.coplanarity.as_ref().map_or(0, |c| c.relations.len())
            )
        }
        Stage::Solve => state.linear.as_ref().map_or_else(String::new, |s| {
            format!(
                "registered ratio {:.3}, {} components",
                s.registered_ratio,
                s.components.len()
            )
        }),
        Stage::Ba => state.ba.as_ref().map_or_else(String::new, |b| {
            format!(
                "reprojection error {:.4} px -> {:.4} px",
                b.initial_reprojection.mean, b.final_reprojection.mean
            )
        }),
    }
}

/// Loads the state, runs one stage and saves it. A failed stage leaves the
/// file untouched.
fn stage_command(cli: &Cli, stage: Stage, logs: &LogDir, ba_phase: Option<u8>) -> msfm_core::Result<()> {
    let state_path = cli.state.clone().unwrap_or_else(|| DEFAULT_STATE.into());
    let mut state = load_state(&state_path)?;
    if let Some(path) = &cli.config {
        state.config = pipeline_config(Some(path))?;
    }
    state.require_before(stage)?;
    execute(&mut state, stage, ba_phase, &state_path, logs)
}

fn execute(
    state: &mut PipelineState,
    stage: Stage,
    ba_phase: Option<u8>,
    state_path: &Path,
    logs: &LogDir,
) -> msfm_core::Result<()> {
    let start = Instant::now();
    let result = match ba_phase {
        Some(p) => run_ba(state, p),
        None => run_stage(state, stage),
    };
    result.map_err(|e| e.in_stage(stage.name()))?;
    let seconds = start.elapsed().as_secs_f64();
    let log_dir = logs.log_dir.clone().unwrap_or_else(|| parent_dir(state_path));
    std::fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;
    write_stage_log(state, stage, &log_dir)?;
    save_state(state_path, state)?;

    let mut timings = load_timings(state_path)?;
    timings.retain(|t| Stage::ALL.iter().any(|s| s.name() == t.stage && *s < stage));
    timings.push(StageTiming {
        stage: stage.name().to_string(),
        seconds,
    });
    save_timings(state_path, &timings)?;
    println!("{stage}: {} ({seconds:.2}s)", summary(state, stage));
    Ok(())
}

fn synth(cli: &Cli, out: &Path, seed: Option<u64>, no_normal_maps: bool) -> msfm_core::Result<()> {
    let mut scene = scene_config(cli.config.as_deref())?;
    if let Some(s) = seed {
        scene.seed = s;
    }
    let (mut dataset, truth) = generate_scene(&scene)?;
    if no_normal_maps {
        for f in &mut dataset.frames {
            f.normal_map = None;
        }
    }
    dataset.save(out)?;
    truth.save(&out.join(GROUND_TRUTH_FILE))?;
    println!(
        "synth: {} frames, {} segments written to {}",
        dataset.frames.len(),
        dataset.segments.len(),
        out.display()
    );
    Ok(())
}

fn preprocess(cli: &Cli, dataset: &Path, logs: &LogDir) -> msfm_core::Result<()> {
    let state_path = cli.state.clone().unwrap_or_else(|| DEFAULT_STATE.into());
    let data = Dataset::load(dataset)?;
    data.validate()?;
    let mut state = PipelineState::new(data, pipeline_config(cli.config.as_deref())?);
    execute(&mut state, Stage::Preprocess, None, &state_path, logs)
}

fn evaluate_command(cli: &Cli, gt_path: &Path, out: &Path) -> msfm_core::Result<()> {
    let state_path = cli.state.clone().unwrap_or_else(|| DEFAULT_STATE.into());
    let state = load_state(&state_path)?;
    let gt = GroundTruth::load(gt_path)?;
    let report = evaluate(&state, &gt, &load_timings(&state_path)?)?;
    report.write_json(out)?;
    for name in &report.absent {
        log::warn!("report has no {name}");
    }
    println!("evaluate: report written to {}", out.display());
    Ok(())
}

fn export_command(cli: &Cli, out: &Path, format: Format) -> msfm_core::Result<()> {
    let state_path = cli.state.clone().unwrap_or_else(|| DEFAULT_STATE.into());
    let model = model_from_state(&load_state(&state_path)?)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if matches!(format, Format::Ply | Format::Both) {
        write_ply(&out.join("model.ply"), &model)?;
    }
    if matches!(format, Format::Json | Format::Both) {
        write_json(&out.join("model.json"), &model)?;
    }
    println!(
        "export: {} lines, {} cameras from the {} solution",
        model.lines.len(),
        model.cameras.len(),
        model.source
    );
    Ok(())
}

fn run_command(cli: &Cli, dataset: &Path, out: &Path, ground_truth: Option<&Path>) -> msfm_core::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let state_path = cli.state.clone().unwrap_or_else(|| out.join(DEFAULT_STATE));
    let data = Dataset::load(dataset)?;
    data.validate()?;
    let mut state = PipelineState::new(data, pipeline_config(cli.config.as_deref())?);
    let opts = RunOptions {
        state_path: Some(state_path.clone()),
        log_dir: Some(out.to_path_buf()),
    };
    let timings = run_pipeline(&mut state, &opts)?;
    save_timings(&state_path, &timings)?;
    for t in &timings {
        let stage = Stage::ALL.iter().find(|s| s.name() == t.stage).expect("pipeline stage");
        println!("{}: {} ({:.2}s)", t.stage, summary(&state, *stage), t.seconds);
    }

    let model = model_from_state(&state)?;
    write_ply(&out.join("model.ply"), &model)?;
    write_json(&out.join("model.json"), &model)?;

    let default_gt = dataset.join(GROUND_TRUTH_FILE);
    let gt_path = match ground_truth {
        Some(p) => Some(p.to_path_buf()),
        None => default_gt.exists().then_some(default_gt),
    };
    if let Some(p) = gt_path {
        let report = evaluate(&state, &GroundTruth::load(&p)?, &timings)?;
        report.write_json(&out.join("report.json"))?;
        println!("evaluate: report written to {}", out.join("report.json").display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> msfm_core::Result<()> {
    match &cli.command {
        Command::Synth {
            out,
            seed,
            no_normal_maps,
        } => synth(cli, out, *seed, *no_normal_maps),
        Command::Preprocess { dataset, logs } => preprocess(cli, dataset, logs),
        Command::Frame { logs } => stage_command(cli, Stage::Frame, logs, None),
        Command::RefineRotations { logs } => stage_command(cli, Stage::RefineRotations, logs, None),
        Command::Track { logs } => stage_command(cli, Stage::Track, logs, None),
        Command::Coplanarity { logs } => stage_command(cli, Stage::Coplanarity, logs, None),
        Command::Solve { logs } => stage_command(cli, Stage::Solve, logs, None),
        Command::Ba { phase, logs } => {
            let last = match phase {
                Phase::One => 1,
                Phase::Two => 2,
                Phase::Three | Phase::All => 3,
            };
            stage_command(cli, Stage::Ba, logs, Some(last))
        }
        Command::Evaluate { ground_truth, out } => evaluate_command(cli, ground_truth, out),
        Command::Export { out, format } => export_command(cli, out, *format),
        Command::Run {
            dataset,
            out,
            ground_truth,
        } => run_command(cli, dataset, out, ground_truth.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
