//! `cowfinder` command line: enroll, identify, find, synth, evaluate.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, TimeZone, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cowfinder_core::alignment::AlignConfig;
use cowfinder_core::annotations::{load_stream, write_stream, ImageDir};
use cowfinder_core::barcode::EncodeConfig;
use cowfinder_core::cattlog::{Cattlog, Enrollment};
use cowfinder_core::cowfinder::{
    evaluate_segments, find_cows, read_segments, segments_to_csv, FinderConfig, DEFAULT_REJECT_THRESHOLD,
};
use cowfinder_core::pipeline::PipelineConfig;
use cowfinder_core::recognizer::Recognizer;
use cowfinder_core::synthherd::{generate_scenario, WalkSchedule};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "cowfinder", version, about = "Coat-barcode cattle enrollment, identification and retrieval")]
struct Cli {
    /// Where to write the run manifest (defaults to a file next to the primary output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a catalog entry from a single-animal clip.
    Enroll(EnrollArgs),
    /// Identify the animal in a single-animal clip.
    Identify(IdentifyArgs),
    /// Retrieve per-animal segments from a continuous stream.
    Find(FindArgs),
    /// Generate a synthetic scenario: stream, frame images and ground truth.
    Synth(SynthArgs),
    /// Score predicted segments against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Clone, Copy, Serialize)]
struct PipelineArgs {
    /// Minimum keypoint confidence.
    #[arg(long, default_value_t = 0.5)]
    min_conf: f64,
    /// Minimum gap between the mask and the image border for enrollment frames.
    #[arg(long, default_value_t = 8)]
    border_margin: u32,
    /// Minimum fraction of a barcode cell inside the body mask.
    #[arg(long, default_value_t = 0.25)]
    min_coverage: f64,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            align: AlignConfig {
                min_conf: self.min_conf,
                border_margin: self.border_margin,
                ..AlignConfig::default()
            },
            encode: EncodeConfig {
                min_coverage: self.min_coverage,
            },
        }
    }
}

#[derive(Args, Serialize)]
struct EnrollArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    cow_id: String,
    /// Catalog file; created when absent.
    #[arg(long)]
    catalog: PathBuf,
    /// Enrollment timestamp (RFC 3339). Defaults to SOURCE_DATE_EPOCH, then the current time.
    #[arg(long)]
    enrolled_at: Option<String>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Serialize)]
struct IdentifyArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Serialize)]
struct FindArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Segment CSV to write.
    #[arg(long)]
    output: PathBuf,
    /// Reject frames whose best distance exceeds this many bits.
    #[arg(long, default_value_t = DEFAULT_REJECT_THRESHOLD)]
    threshold: u32,
    /// Largest frame gap inside a segment [default: one second of frames].
    #[arg(long)]
    max_gap_frames: Option<u64>,
    #[arg(long, default_value_t = 2.0)]
    merge_gap_s: f64,
    #[arg(long, default_value_t = 5)]
    min_segment_frames: usize,
    /// Stream frame rate.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Scenario TOML: fps, noise_sigma, path_seed, [render] and [[cow]] entries.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Override the scenario frame rate.
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    predicted: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also write the metrics to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let manifest_override = cli.manifest;
    match cli.command {
        Command::Enroll(a) => enroll(a, manifest_override),
        Command::Identify(a) => identify(a, manifest_override),
        Command::Find(a) => find(a, manifest_override),
        Command::Synth(a) => synth(a, manifest_override),
        Command::Evaluate(a) => evaluate(a, manifest_override),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn enrolled_at(flag: Option<&str>) -> Result<DateTime<Utc>> {
    if let Some(s) = flag {
        return Ok(DateTime::parse_from_rfc3339(s)
            .with_context(|| format!("bad --enrolled-at `{s}`"))?
            .with_timezone(&Utc));
    }
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        let secs: i64 = epoch.trim().parse().context("bad SOURCE_DATE_EPOCH")?;
        return Utc
            .timestamp_opt(secs, 0)
            .single()
            .context("SOURCE_DATE_EPOCH out of range");
    }
    Ok(Utc::now())
}

fn enroll(a: EnrollArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let run = Manifest::start("enroll", &a);
    let stream = load_stream(&a.stream)?;
    let mut catalog = if a.catalog.exists() {
        Cattlog::load(&a.catalog)?
    } else {
        Cattlog::new()
    };
    let source_ref = a.stream.display().to_string();
    let req = Enrollment {
        cow_id: &a.cow_id,
        source_ref: &source_ref,
        enrolled_at: enrolled_at(a.enrolled_at.as_deref())?,
    };
    let entry = catalog.enroll(&stream, &ImageDir::for_stream(&a.stream), &req, &a.pipeline.config())?;
    let frames_used = entry.frames_used;
    catalog.add_entry(entry)?;
    catalog.save(&a.catalog)?;
    println!(
        "enrolled `{}` from {} frame(s); catalog now holds {} entries",
        a.cow_id,
        frames_used,
        catalog.len()
    );
    run.finish(
        manifest_path.unwrap_or_else(|| sibling(&a.catalog, ".manifest.json")),
        &[&a.stream, &a.catalog],
        &[&a.catalog],
    )
}

fn identify(a: IdentifyArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let run = Manifest::start("identify", &a);
    let stream = load_stream(&a.stream)?;
    let catalog = Cattlog::load(&a.catalog)?;
    let recognizer = Recognizer::new(&catalog, a.pipeline.config())?;
    let prediction = recognizer.recognize_video(&stream, &ImageDir::for_stream(&a.stream))?;
    let report = prediction.report();
    print!("{report}");
    let mut outputs = Vec::new();
    if let Some(path) = &a.report {
        fs::write(path, &report).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.as_path());
    }
    let default = match &a.report {
        Some(r) => sibling(r, ".manifest.json"),
        None => sibling(&a.stream, ".identify.manifest.json"),
    };
    run.finish(manifest_path.unwrap_or(default), &[&a.stream, &a.catalog], &outputs)
}

fn find(a: FindArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    if !(a.fps > 0.0) {
        bail!("--fps must be positive");
    }
    let cfg = FinderConfig {
        reject_threshold: a.threshold,
        max_gap_frames: a.max_gap_frames.unwrap_or(a.fps.round() as u64),
        merge_gap_s: a.merge_gap_s,
        min_segment_frames: a.min_segment_frames,
    };
    cfg.validate()?;
    let run = Manifest::start("find", &(&a, &cfg));
    let stream = load_stream(&a.stream)?.with_fps(a.fps);
    let catalog = Cattlog::load(&a.catalog)?;
    let segments = find_cows(
        &stream,
        &ImageDir::for_stream(&a.stream),
        &catalog,
        &cfg,
        &a.pipeline.config(),
    )?;
    fs::write(&a.output, segments_to_csv(&segments)).with_context(|| format!("writing {}", a.output.display()))?;
    println!("{} segment(s) written to {}", segments.len(), a.output.display());
    run.finish(
        manifest_path.unwrap_or_else(|| sibling(&a.output, ".manifest.json")),
        &[&a.stream, &a.catalog],
        &[&a.output],
    )
}

fn synth(a: SynthArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(&a.scenario).with_context(|| format!("reading {}", a.scenario.display()))?;
    let mut schedule: WalkSchedule =
        toml::from_str(&text).with_context(|| format!("parsing scenario {}", a.scenario.display()))?;
    if let Some(fps) = a.fps {
        schedule.fps = fps;
    }
    let run = Manifest::start("synth", &(&a, &schedule));
    let scenario = generate_scenario(&schedule)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let stream_path = a.output.join("stream.jsonl");
    let truth_path = a.output.join("truth.csv");
    write_stream(&stream_path, &scenario.stream)?;
    scenario.frames.write_images(&a.output, &scenario.stream)?;
    fs::write(&truth_path, segments_to_csv(&scenario.truth))?;
    println!(
        "{} frame(s), {} truth segment(s) written to {}",
        scenario.stream.len(),
        scenario.truth.len(),
        a.output.display()
    );
    run.finish(
        manifest_path.unwrap_or_else(|| a.output.join("manifest.json")),
        &[&a.scenario],
        &[&stream_path, &truth_path, &a.output.join("frames")],
    )
}

fn evaluate(a: EvaluateArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let run = Manifest::start("evaluate", &a);
    let predicted = read_segments(&a.predicted)?;
    let truth = read_segments(&a.truth)?;
    let metrics = evaluate_segments(&predicted, &truth).to_string();
    print!("{metrics}");
    let mut outputs = Vec::new();
    if let Some(path) = &a.report {
        fs::write(path, &metrics).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.as_path());
    }
    let default = match &a.report {
        Some(r) => sibling(r, ".manifest.json"),
        None => sibling(&a.predicted, ".evaluate.manifest.json"),
    };
    run.finish(manifest_path.unwrap_or(default), &[&a.predicted, &a.truth], &outputs)
}
