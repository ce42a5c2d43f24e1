//! Continuous-stream retrieval: reject weak matches, cluster accepted frames
//! into per-animal segments, merge repeats, and score against ground truth.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{AnnotationStream, FrameImages};
use crate::barcode::BARCODE_BITS;
use crate::cattlog::Cattlog;
use crate::pipeline::PipelineConfig;
use crate::recognizer::{FrameMatch, FrameOutcome, RecognizeError, Recognizer};

/// Slack for comparing frame-derived times against interval bounds.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FinderError {
    #[error("invalid finder config: {0}")]
    Config(String),
    #[error(transparent)]
    Recognize(#[from] RecognizeError),
    #[error("segment file {path}: {message}")]
    Csv { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinderConfig {
    /// Frames whose best distance exceeds this many bits are rejected.
    pub reject_threshold: u32,
    /// Largest frame gap tolerated inside one segment.
    pub max_gap_frames: u64,
    /// Same-animal segments separated by at most this many seconds are merged.
    pub merge_gap_s: f64,
    /// Segments with fewer accepted frames are dropped.
    pub min_segment_frames: usize,
}

/// Calibrated on synthetic herds: genuine distances stay far below this and
/// the nearest impostor stays far above (see the calibration test).
pub const DEFAULT_REJECT_THRESHOLD: u32 = 128;

impl Default for FinderConfig {
    fn default() -> Self {
        Self {
            reject_threshold: DEFAULT_REJECT_THRESHOLD,
            max_gap_frames: 30,
            merge_gap_s: 2.0,
            min_segment_frames: 5,
        }
    }
}

impl FinderConfig {
    pub fn validate(&self) -> Result<(), FinderError> {
        if self.reject_threshold == 0 || self.reject_threshold as usize > BARCODE_BITS {
            return Err(FinderError::Config(format!(
                "reject_threshold {} must be in 1..={BARCODE_BITS}",
                self.reject_threshold
            )));
        }
        if self.max_gap_frames == 0 {
            return Err(FinderError::Config("max_gap_frames must be positive".into()));
        }
        if !(self.merge_gap_s > 0.0) {
            return Err(FinderError::Config("merge_gap_s must be positive".into()));
        }
        if self.min_segment_frames == 0 {
            return Err(FinderError::Config("min_segment_frames must be positive".into()));
        }
        Ok(())
    }
}

/// An accepted per-frame identification.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_index: u64,
    pub time_s: f64,
    pub cow_id: String,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub cow_id: String,
    pub start_frame: u64,
    pub end_frame: u64,
    pub start_time_s: f64,
    pub end_time_s: f64,
    pub n_frames: usize,
    pub min_distance: u32,
    pub mean_distance: f64,
}

impl Segment {
    fn from_run(run: &[Detection]) -> Self {
        let first = &run[0];
        let last = &run[run.len() - 1];
        let total: u64 = run.iter().map(|d| d.distance as u64).sum();
        Segment {
            cow_id: first.cow_id.clone(),
            start_frame: first.frame_index,
            end_frame: last.frame_index,
            start_time_s: first.time_s,
            end_time_s: last.time_s,
            n_frames: run.len(),
            min_distance: run.iter().map(|d| d.distance).min().unwrap_or(0),
            mean_distance: total as f64 / run.len() as f64,
        }
    }

    fn absorb(&mut self, next: &Segment) {
        let n = self.n_frames + next.n_frames;
        self.mean_distance =
            (self.mean_distance * self.n_frames as f64 + next.mean_distance * next.n_frames as f64) / n as f64;
        self.n_frames = n;
        self.min_distance = self.min_distance.min(next.min_distance);
        self.end_frame = next.end_frame;
        self.end_time_s = next.end_time_s;
    }

    /// `self` lies within `truth` and names the same animal.
    pub fn contained_in(&self, truth: &Segment) -> bool {
        self.cow_id == truth.cow_id
            && self.start_time_s >= truth.start_time_s - TIME_EPS
            && self.end_time_s <= truth.end_time_s + TIME_EPS
    }
}

/// Accepts the frame's top-1 identity iff its distance is within the threshold.
pub fn threshold_filter(m: &FrameMatch, cfg: &FinderConfig) -> Option<Detection> {
    let best = m.top3.first()?;
    (best.distance <= cfg.reject_threshold).then(|| Detection {
        frame_index: m.frame_index,
        time_s: m.time_s,
        cow_id: best.cow_id.clone(),
        distance: best.distance,
    })
}

/// Splits frame-ordered detections into maximal same-animal runs with no gap
/// above `max_gap_frames`, then drops runs below `min_segment_frames`.
pub fn cluster_detections(detections: &[Detection], cfg: &FinderConfig) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 1..=detections.len() {
        let breaks = i == detections.len() || {
            let (prev, cur) = (&detections[i - 1], &detections[i]);
            cur.cow_id != prev.cow_id || cur.frame_index - prev.frame_index > cfg.max_gap_frames
        };
        if breaks && i > start {
            let run = &detections[start..i];
            if run.len() >= cfg.min_segment_frames {
                segments.push(Segment::from_run(run));
            }
            start = i;
        }
    }
    segments
}

/// Fuses neighbouring segments of the same animal separated by at most
/// `merge_gap_s`. Different animals are never merged.
pub fn merge_consecutive(segments: &[Segment], cfg: &FinderConfig) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    for seg in segments {
        match out.last_mut() {
            Some(prev)
                if prev.cow_id == seg.cow_id && seg.start_time_s - prev.end_time_s <= cfg.merge_gap_s + TIME_EPS =>
            {
                prev.absorb(seg);
            }
            _ => out.push(seg.clone()),
        }
    }
    out
}

/// Detections from already-recognized frames, in frame order.
pub fn detections(outcomes: &[FrameOutcome], cfg: &FinderConfig) -> Vec<Detection> {
    outcomes
        .iter()
        .filter_map(FrameOutcome::as_match)
        .filter_map(|m| threshold_filter(m, cfg))
        .collect()
}

pub fn segments_from_outcomes(outcomes: &[FrameOutcome], cfg: &FinderConfig) -> Vec<Segment> {
    let clustered = cluster_detections(&detections(outcomes, cfg), cfg);
    let mut merged = merge_consecutive(&clustered, cfg);
    merged.sort_by(|a, b| a.start_time_s.total_cmp(&b.start_time_s));
    merged
}

/// Retrieves per-animal segments from an unlabeled stream.
pub fn find_cows(
    stream: &AnnotationStream,
    images: &dyn FrameImages,
    catalog: &Cattlog,
    cfg: &FinderConfig,
    pipeline: &PipelineConfig,
) -> Result<Vec<Segment>, FinderError> {
    cfg.validate()?;
    let recognizer = Recognizer::new(catalog, *pipeline)?;
    let outcomes = recognizer.recognize_frames(stream, images)?;
    Ok(segments_from_outcomes(&outcomes, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub found: usize,
    pub missed: usize,
    pub spurious: usize,
    pub retrieval_rate: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "found = {}", self.found)?;
        writeln!(f, "missed = {}", self.missed)?;
        writeln!(f, "spurious = {}", self.spurious)?;
        writeln!(f, "retrieval_rate = {:.3}", self.retrieval_rate)
    }
}

/// A truth segment is found when some prediction for the same animal starts
/// and ends within it. Predictions contained in no truth segment are spurious.
/// With no truth segments the rate is 0.
pub fn evaluate_segments(predicted: &[Segment], truth: &[Segment]) -> Metrics {
    let found = truth
        .iter()
        .filter(|t| predicted.iter().any(|p| p.contained_in(t)))
        .count();
    let spurious = predicted
        .iter()
        .filter(|p| !truth.iter().any(|t| p.contained_in(t)))
        .count();
    let missed = truth.len() - found;
    let retrieval_rate = if truth.is_empty() {
        0.0
    } else {
        found as f64 / (found + missed) as f64
    };
    Metrics {
        found,
        missed,
        spurious,
        retrieval_rate,
    }
}

pub const SEGMENT_CSV_HEADER: &str =
    "cow_id,start_frame,end_frame,start_time_s,end_time_s,n_frames,min_distance,mean_distance";

#[derive(Serialize, Deserialize)]
struct SegmentRow {
    cow_id: String,
    start_frame: u64,
    end_frame: u64,
    start_time_s: f64,
    end_time_s: f64,
    n_frames: usize,
    min_distance: u32,
    mean_distance: String,
}

pub fn segments_to_csv(segments: &[Segment]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for s in segments {
        w.serialize(SegmentRow {
            cow_id: s.cow_id.clone(),
            start_frame: s.start_frame,
            end_frame: s.end_frame,
            start_time_s: s.start_time_s,
            end_time_s: s.end_time_s,
            n_frames: s.n_frames,
            min_distance: s.min_distance,
            mean_distance: format!("{:.3}", s.mean_distance),
        })
        .expect("segment rows serialize");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8");
    format!("{SEGMENT_CSV_HEADER}\n{body}")
}

pub fn segments_from_csv(text: &str, source: &str) -> Result<Vec<Segment>, FinderError> {
    let err = |message: String| FinderError::Csv {
        path: source.to_string(),
        message,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != SEGMENT_CSV_HEADER {
        return Err(err(format!("expected header `{SEGMENT_CSV_HEADER}`")));
    }
    r.deserialize::<SegmentRow>()
        .map(|row| {
            let row = row.map_err(|e| err(e.to_string()))?;
            let mean_distance = row
                .mean_distance
                .parse()
                .map_err(|_| err(format!("bad mean_distance `{}`", row.mean_distance)))?;
            if row.start_time_s > row.end_time_s {
                return Err(err(format!("segment for `{}` ends before it starts", row.cow_id)));
            }
            Ok(Segment {
                cow_id: row.cow_id,
                start_frame: row.start_frame,
                end_frame: row.end_frame,
                start_time_s: row.start_time_s,
                end_time_s: row.end_time_s,
                n_frames: row.n_frames,
                min_distance: row.min_distance,
                mean_distance,
            })
        })
        .collect()
}

pub fn read_segments(path: &Path) -> Result<Vec<Segment>, FinderError> {
    let text = std::fs::read_to_string(path).map_err(|e| FinderError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    segments_from_csv(&text, &path.display().to_string())
}
