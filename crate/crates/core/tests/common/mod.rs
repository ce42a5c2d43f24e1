#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{DateTime, TimeZone, Utc};
use image::GrayImage;
use rayon::prelude::*;

use cowfinder_core::annotations::{FrameImageError, FrameImages, NOMINAL_FPS};
use cowfinder_core::pipeline::{frame_barcode, PipelineConfig};
use cowfinder_core::synthherd::{image_ref, render_frame, single_cow_clip, CoatPattern, Pose, RenderConfig, Scenario};
use cowfinder_core::{AnnotationStream, Barcode, Cattlog, CattlogEntry, Enrollment, FrameAnnotation, TemplateShape};

pub fn stamp() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 1, 6, 30, 0).unwrap()
}

/// Frame images held in memory, keyed by frame index.
#[derive(Default)]
pub struct Rendered(pub BTreeMap<u64, GrayImage>);

impl FrameImages for Rendered {
    fn frame_image(&self, frame: &FrameAnnotation) -> Result<GrayImage, FrameImageError> {
        self.0
            .get(&frame.frame_index)
            .cloned()
            .ok_or(FrameImageError::Missing { frame: frame.frame_index })
    }
}

/// One frame per pose, at consecutive indices from 0.
pub fn posed_clip(coat: &CoatPattern, poses: &[Pose]) -> (AnnotationStream, Rendered) {
    let cfg = RenderConfig::default();
    let mut frames = Vec::new();
    let mut images = Rendered::default();
    for (k, pose) in poses.iter().enumerate() {
        let r = render_frame(coat, pose, &cfg).unwrap();
        let mut a = r.annotation;
        a.frame_index = k as u64;
        a.time_s = k as f64 / NOMINAL_FPS;
        a.image_ref = image_ref(k as u64);
        frames.push(a);
        images.0.insert(k as u64, r.image);
    }
    (AnnotationStream::new(frames, NOMINAL_FPS).unwrap(), images)
}

pub fn barcode_at(coat: &CoatPattern, pose: &Pose) -> Barcode {
    let r = render_frame(coat, pose, &RenderConfig::default()).unwrap();
    frame_barcode(&r.annotation, &r.image, TemplateShape::standard(), &PipelineConfig::default()).unwrap()
}

pub fn entry_from(catalog: &Cattlog, id: &str, clip: &Scenario) -> CattlogEntry {
    let req = Enrollment {
        cow_id: id,
        source_ref: "synthetic",
        enrolled_at: stamp(),
    };
    catalog
        .enroll(&clip.stream, &clip.frames, &req, &PipelineConfig::default())
        .unwrap()
}

/// Catalog of the given cows, each enrolled from a 30-frame clean clip and
/// keyed by its seed.
pub fn herd_catalog(seeds: &[u64], path_seed: u64) -> Cattlog {
    let mut catalog = Cattlog::new();
    let entries: Vec<CattlogEntry> = seeds
        .par_iter()
        .map(|&s| entry_from(&catalog, &s.to_string(), &single_cow_clip(s, 30, path_seed, 0.0)))
        .collect();
    for e in entries {
        catalog.add_entry(e).unwrap();
    }
    catalog
}
