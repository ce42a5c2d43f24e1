//! Per-frame top-3 matching and the whole-clip minimum-distance decision.

use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::{AnnotationStream, FrameAnnotation, FrameImageError, FrameImages};
use crate::barcode::Barcode;
use crate::cattlog::{Cattlog, CattlogError, Match};
use crate::pipeline::{frame_barcode, PipelineConfig, SkipReason};
use crate::template::TemplateShape;

pub const TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum RecognizeError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("catalog template {catalog} does not match pipeline template {pipeline}")]
    TemplateMismatch { catalog: String, pipeline: String },
    #[error("no evidence: all {0} frames were skipped")]
    NoEvidence(usize),
    #[error(transparent)]
    Image(#[from] FrameImageError),
    #[error(transparent)]
    Catalog(#[from] CattlogError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub frame_index: u64,
    pub time_s: f64,
    pub barcode: Barcode,
    /// Ascending by distance.
    pub top3: Vec<Match>,
}

impl FrameMatch {
    pub fn best(&self) -> &Match {
        &self.top3[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    Matched(FrameMatch),
    Skipped {
        frame_index: u64,
        time_s: f64,
        reason: SkipReason,
    },
}

impl FrameOutcome {
    pub fn frame_index(&self) -> u64 {
        match self {
            FrameOutcome::Matched(m) => m.frame_index,
            FrameOutcome::Skipped { frame_index, .. } => *frame_index,
        }
    }

    pub fn as_match(&self) -> Option<&FrameMatch> {
        match self {
            FrameOutcome::Matched(m) => Some(m),
            FrameOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub predicted_id: String,
    pub best_distance: u32,
    pub best_frame_index: u64,
    pub frames: Vec<FrameOutcome>,
}

/// Nearest-barcode recognizer bound to one catalog.
pub struct Recognizer<'a> {
    catalog: &'a Cattlog,
    template: &'static TemplateShape,
    config: PipelineConfig,
}

impl<'a> Recognizer<'a> {
    pub fn new(catalog: &'a Cattlog, config: PipelineConfig) -> Result<Self, RecognizeError> {
        if catalog.is_empty() {
            return Err(RecognizeError::EmptyCatalog);
        }
        let template = TemplateShape::standard();
        if catalog.template_id() != template.id() {
            return Err(RecognizeError::TemplateMismatch {
                catalog: catalog.template_id().to_string(),
                pipeline: template.id().to_string(),
            });
        }
        Ok(Self {
            catalog,
            template,
            config,
        })
    }

    pub fn catalog(&self) -> &Cattlog {
        self.catalog
    }

    pub fn recognize_frame(
        &self,
        frame: &FrameAnnotation,
        images: &dyn FrameImages,
    ) -> Result<FrameOutcome, RecognizeError> {
        let skipped = |reason| FrameOutcome::Skipped {
            frame_index: frame.frame_index,
            time_s: frame.time_s,
            reason,
        };
        // cheap keypoint rejection before touching the image
        if let Err(u) = crate::alignment::rectify_keypoints(&frame.keypoints, &self.config.align) {
            return Ok(skipped(SkipReason::Unrectifiable(u)));
        }
        let image = images.frame_image(frame)?;
        match frame_barcode(frame, &image, self.template, &self.config) {
            Ok(barcode) => Ok(FrameOutcome::Matched(self.match_barcode(frame, barcode)?)),
            Err(reason) => Ok(skipped(reason)),
        }
    }

    fn match_barcode(&self, frame: &FrameAnnotation, barcode: Barcode) -> Result<FrameMatch, RecognizeError> {
        Ok(FrameMatch {
            frame_index: frame.frame_index,
            time_s: frame.time_s,
            top3: self.catalog.match_top_k(&barcode, TOP_K)?,
            barcode,
        })
    }

    /// Every frame's outcome, in stream order.
    pub fn recognize_frames(
        &self,
        stream: &AnnotationStream,
        images: &dyn FrameImages,
    ) -> Result<Vec<FrameOutcome>, RecognizeError> {
        stream
            .frames()
            .par_iter()
            .map(|f| self.recognize_frame(f, images))
            .collect()
    }

    /// The identity with the smallest top-1 distance over all frames; equal
    /// distances keep the earliest frame.
    pub fn recognize_video(
        &self,
        stream: &AnnotationStream,
        images: &dyn FrameImages,
    ) -> Result<VideoPrediction, RecognizeError> {
        let frames = self.recognize_frames(stream, images)?;
        let (predicted_id, best_distance, best_frame_index) = frames
            .iter()
            .filter_map(FrameOutcome::as_match)
            .min_by_key(|m| (m.best().distance, m.frame_index))
            .map(|m| (m.best().cow_id.clone(), m.best().distance, m.frame_index))
            .ok_or(RecognizeError::NoEvidence(frames.len()))?;
        Ok(VideoPrediction {
            predicted_id,
            best_distance,
            best_frame_index,
            frames,
        })
    }
}

impl VideoPrediction {
    /// Plain-text report: summary lines then one row per frame.
    pub fn report(&self) -> String {
        let mut out = format!(
            "predicted_id = {}\nbest_distance = {}\nbest_frame = {}\n\nframe,time_s,status,top1,d1,top2,d2,top3,d3\n",
            self.predicted_id, self.best_distance, self.best_frame_index
        );
        for f in &self.frames {
            match f {
                FrameOutcome::Matched(m) => {
                    let mut cols: Vec<String> = Vec::new();
                    for i in 0..TOP_K {
                        match m.top3.get(i) {
                            Some(hit) => {
                                cols.push(hit.cow_id.clone());
                                cols.push(hit.distance.to_string());
                            }
                            None => cols.extend([String::new(), String::new()]),
                        }
                    }
                    out.push_str(&format!("{},{},matched,{}\n", m.frame_index, m.time_s, cols.join(",")));
                }
                FrameOutcome::Skipped {
                    frame_index,
                    time_s,
                    reason,
                } => {
                    out.push_str(&format!("{frame_index},{time_s},skipped: {reason},,,,,,\n"));
                }
            }
        }
        out
    }
}
