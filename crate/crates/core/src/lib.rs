//! Identification of individual cattle from top-view video by coat barcode.
//!
//! The workflow has three stages:
//!
//! * enrollment ([`cattlog::Cattlog::enroll`]) turns one single-animal clip
//!   into a catalog entry holding the bitwise mode of its per-frame barcodes;
//! * recognition ([`recognizer::Recognizer`]) matches every frame of a clip
//!   against the catalog by Hamming distance and keeps the closest frame;
//! * retrieval ([`cowfinder::find_cows`]) thresholds per-frame matches on a
//!   continuous stream and clusters them into time-stamped segments.
//!
//! Frames reach the pipeline as annotation records (mask + ten keypoints) with
//! a referenced image; [`synthherd`] generates such streams with ground truth.

pub mod alignment;
pub mod annotations;
pub mod barcode;
pub mod cattlog;
pub mod cowfinder;
pub mod pipeline;
pub mod raster;
pub mod recognizer;
pub mod synthherd;
pub mod template;

pub use annotations::{AnnotationStream, FrameAnnotation, FrameImages, ImageDir, KeypointSet, Landmark, MaskRaster};
pub use barcode::{bitwise_mode, hamming, Barcode};
pub use cattlog::{Cattlog, CattlogEntry, Enrollment};
pub use cowfinder::{evaluate_segments, find_cows, FinderConfig, Metrics, Segment};
pub use pipeline::PipelineConfig;
pub use recognizer::{Recognizer, VideoPrediction};
pub use template::TemplateShape;
