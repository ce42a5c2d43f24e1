//! Per-frame barcode extraction: rectify, remove background, align, encode.

use std::fmt;

use image::GrayImage;

use crate::alignment::{align_with_mask, rectify_keypoints, remove_background, AlignConfig, Unrectifiable};
use crate::annotations::FrameAnnotation;
use crate::barcode::{encode, Barcode, EncodeConfig};
use crate::template::TemplateShape;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineConfig {
    pub align: AlignConfig,
    pub encode: EncodeConfig,
}

/// Why a frame produced no barcode. Skips are data, not errors.
#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    Unrectifiable(Unrectifiable),
    Alignment(String),
    Encode(String),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::Unrectifiable(u) => write!(f, "{u}"),
            SkipReason::Alignment(m) => write!(f, "alignment failed: {m}"),
            SkipReason::Encode(m) => write!(f, "encode failed: {m}"),
        }
    }
}

pub fn frame_barcode(
    frame: &FrameAnnotation,
    image: &GrayImage,
    template: &TemplateShape,
    cfg: &PipelineConfig,
) -> Result<Barcode, SkipReason> {
    let keypoints = rectify_keypoints(&frame.keypoints, &cfg.align).map_err(SkipReason::Unrectifiable)?;
    let mask = frame.mask.decode();
    let body = remove_background(image, &mask).map_err(|e| SkipReason::Alignment(e.to_string()))?;
    let aligned = align_with_mask(&body, &mask, &keypoints, template)
        .map_err(|e| SkipReason::Alignment(e.to_string()))?;
    encode(&aligned.image, &aligned.mask, &cfg.encode).map_err(|e| SkipReason::Encode(e.to_string()))
}
