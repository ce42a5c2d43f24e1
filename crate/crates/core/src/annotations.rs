//! Detector-output data model and the JSONL annotation stream.
//!
//! One record per frame:
//!
//! ```text
//! {"frame":0,"t":0.0,"image":"frames/000000.png","width":640,"height":400,
//!  "mask_rle":[...],"keypoints":[{"name":"poll","x":1.0,"y":2.0,"conf":0.9}, ...]}
//! ```
//!
//! `mask_rle` is column-major and alternates background/foreground run lengths,
//! starting with a (possibly empty) background run.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::raster::BitRaster;

pub const KEYPOINT_COUNT: usize = 10;

/// Nominal stream rate of the top-view camera.
pub const NOMINAL_FPS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("{field}: {message}")]
    Validation { field: &'static str, message: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<AnnotationError>,
    },
    #[error("stream order error at line {line}: {message}")]
    StreamOrder { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AnnotationError {
    fn parse(field: &str, message: impl Into<String>) -> Self {
        Self::Parse {
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self::Validation {
            field,
            message: message.into(),
        }
    }
}

/// The ten top-view landmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Landmark {
    Poll,
    Withers,
    SpineMid,
    TailHead,
    LeftShoulder,
    RightShoulder,
    LeftFlank,
    RightFlank,
    LeftHip,
    RightHip,
}

impl Landmark {
    pub const ALL: [Landmark; KEYPOINT_COUNT] = [
        Landmark::Poll,
        Landmark::Withers,
        Landmark::SpineMid,
        Landmark::TailHead,
        Landmark::LeftShoulder,
        Landmark::RightShoulder,
        Landmark::LeftFlank,
        Landmark::RightFlank,
        Landmark::LeftHip,
        Landmark::RightHip,
    ];

    /// Dorsal midline, head to tail.
    pub const SPINE: [Landmark; 4] = [
        Landmark::Poll,
        Landmark::Withers,
        Landmark::SpineMid,
        Landmark::TailHead,
    ];

    /// `(left, right)` pairs.
    pub const BILATERAL: [(Landmark, Landmark); 3] = [
        (Landmark::LeftShoulder, Landmark::RightShoulder),
        (Landmark::LeftFlank, Landmark::RightFlank),
        (Landmark::LeftHip, Landmark::RightHip),
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Landmark::Poll => "poll",
            Landmark::Withers => "withers",
            Landmark::SpineMid => "spine_mid",
            Landmark::TailHead => "tail_head",
            Landmark::LeftShoulder => "left_shoulder",
            Landmark::RightShoulder => "right_shoulder",
            Landmark::LeftFlank => "left_flank",
            Landmark::RightFlank => "right_flank",
            Landmark::LeftHip => "left_hip",
            Landmark::RightHip => "right_hip",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, conf: f64) -> Self {
        Self { x, y, conf }
    }

    fn validate(&self, landmark: Landmark) -> Result<(), AnnotationError> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(AnnotationError::invalid(
                "keypoints",
                format!("{}: non-finite coordinate", landmark.name()),
            ));
        }
        if !(0.0..=1.0).contains(&self.conf) {
            return Err(AnnotationError::invalid(
                "keypoints",
                format!("{}: conf {} outside [0, 1]", landmark.name(), self.conf),
            ));
        }
        Ok(())
    }
}

/// Exactly one [`Keypoint`] per [`Landmark`], indexed by [`Landmark::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: [Keypoint; KEYPOINT_COUNT],
}

impl KeypointSet {
    pub fn new(points: [Keypoint; KEYPOINT_COUNT]) -> Result<Self, AnnotationError> {
        for (landmark, kp) in Landmark::ALL.iter().zip(points.iter()) {
            kp.validate(*landmark)?;
        }
        Ok(Self { points })
    }

    /// Builds a set from `(name, keypoint)` pairs in any order.
    pub fn from_named<'a>(
        entries: impl IntoIterator<Item = (&'a str, Keypoint)>,
    ) -> Result<Self, AnnotationError> {
        let mut slots: [Option<Keypoint>; KEYPOINT_COUNT] = [None; KEYPOINT_COUNT];
        let mut count = 0usize;
        for (name, kp) in entries {
            count += 1;
            let landmark = Landmark::from_name(name).ok_or_else(|| {
                AnnotationError::invalid("keypoints", format!("unknown landmark `{name}`"))
            })?;
            if slots[landmark.index()].replace(kp).is_some() {
                return Err(AnnotationError::invalid(
                    "keypoints",
                    format!("landmark `{name}` repeated"),
                ));
            }
        }
        if count != KEYPOINT_COUNT {
            return Err(AnnotationError::invalid(
                "keypoints",
                format!("expected {KEYPOINT_COUNT}, got {count}"),
            ));
        }
        let points = slots.map(|s| s.expect("all ten landmarks present"));
        Self::new(points)
    }

    #[inline]
    pub fn get(&self, landmark: Landmark) -> Keypoint {
        self.points[landmark.index()]
    }

    #[inline]
    pub fn xy(&self, landmark: Landmark) -> (f64, f64) {
        let kp = self.points[landmark.index()];
        (kp.x, kp.y)
    }

    pub fn set(&mut self, landmark: Landmark, kp: Keypoint) -> Result<(), AnnotationError> {
        kp.validate(landmark)?;
        self.points[landmark.index()] = kp;
        Ok(())
    }

    /// Exchanges the keypoints stored under two landmarks.
    pub fn swap(&mut self, a: Landmark, b: Landmark) {
        self.points.swap(a.index(), b.index());
    }

    pub fn iter(&self) -> impl Iterator<Item = (Landmark, Keypoint)> + '_ {
        Landmark::ALL.into_iter().zip(self.points.iter().copied())
    }

    pub fn min_conf(&self) -> f64 {
        self.points.iter().map(|p| p.conf).fold(f64::INFINITY, f64::min)
    }

    /// Copy with every confidence replaced.
    pub fn with_conf(&self, conf: f64) -> Result<Self, AnnotationError> {
        let mut points = self.points;
        for p in &mut points {
            p.conf = conf;
        }
        Self::new(points)
    }

    pub fn map_points(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Result<Self, AnnotationError> {
        let mut points = self.points;
        for p in &mut points {
            let (x, y) = f(p.x, p.y);
            p.x = x;
            p.y = y;
        }
        Self::new(points)
    }
}

/// Column-major run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl MaskRaster {
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, AnnotationError> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = width as u64 * height as u64;
        if total != expected {
            return Err(AnnotationError::invalid(
                "mask",
                format!("run-length mismatch (runs sum to {total}, expected {expected})"),
            ));
        }
        Ok(Self { width, height, runs })
    }

    pub fn encode(raster: &BitRaster) -> Self {
        let (w, h) = (raster.width(), raster.height());
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = raster.get(x, y);
                if v != current {
                    runs.push(len);
                    len = 0;
                    current = v;
                }
                len += 1;
            }
        }
        runs.push(len);
        Self {
            width: w,
            height: h,
            runs,
        }
    }

    pub fn decode(&self) -> BitRaster {
        let h = self.height as usize;
        let mut raster = BitRaster::new(self.width, self.height);
        let mut pos = 0usize;
        let mut value = false;
        for &run in &self.runs {
            if value {
                for p in pos..pos + run as usize {
                    raster.set((p / h) as u32, (p % h) as u32, true);
                }
            }
            pos += run as usize;
            value = !value;
        }
        raster
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn foreground_count(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }
}

/// One frame of detector output: a single animal's mask and keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub frame_index: u64,
    pub time_s: f64,
    /// Frame image path, relative to the stream file's directory unless absolute.
    pub image_ref: String,
    pub mask: MaskRaster,
    pub keypoints: KeypointSet,
}

/// Frames in strictly increasing index and time order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationStream {
    frames: Vec<FrameAnnotation>,
    fps: f64,
}

impl AnnotationStream {
    pub fn new(frames: Vec<FrameAnnotation>, fps: f64) -> Result<Self, AnnotationError> {
        for (i, pair) in frames.windows(2).enumerate() {
            check_order(&pair[0], &pair[1], i + 2)?;
        }
        Ok(Self { frames, fps })
    }

    pub fn empty(fps: f64) -> Self {
        Self {
            frames: Vec::new(),
            fps,
        }
    }

    pub fn frames(&self) -> &[FrameAnnotation] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FrameAnnotation> {
        self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = fps;
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn check_order(prev: &FrameAnnotation, next: &FrameAnnotation, line: usize) -> Result<(), AnnotationError> {
    if next.frame_index == prev.frame_index {
        return Err(AnnotationError::StreamOrder {
            line,
            message: format!(
                "frame {} repeated; only one detection per frame is supported",
                next.frame_index
            ),
        });
    }
    if next.frame_index < prev.frame_index {
        return Err(AnnotationError::StreamOrder {
            line,
            message: format!(
                "frame index {} follows {}",
                next.frame_index, prev.frame_index
            ),
        });
    }
    if next.time_s <= prev.time_s {
        return Err(AnnotationError::StreamOrder {
            line,
            message: format!("time {} does not exceed {}", next.time_s, prev.time_s),
        });
    }
    Ok(())
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, AnnotationError> {
    obj.get(name)
        .ok_or_else(|| AnnotationError::parse(name, "missing field"))
}

fn field_u64(obj: &Map<String, Value>, name: &str) -> Result<u64, AnnotationError> {
    field(obj, name)?
        .as_u64()
        .ok_or_else(|| AnnotationError::parse(name, "expected a non-negative integer"))
}

fn field_u32(obj: &Map<String, Value>, name: &str) -> Result<u32, AnnotationError> {
    let v = field_u64(obj, name)?;
    u32::try_from(v).map_err(|_| AnnotationError::parse(name, "integer out of range"))
}

fn field_f64(obj: &Map<String, Value>, name: &str) -> Result<f64, AnnotationError> {
    field(obj, name)?
        .as_f64()
        .ok_or_else(|| AnnotationError::parse(name, "expected a number"))
}

/// Parses and validates one JSONL record.
pub fn parse_annotation_line(text: &str) -> Result<FrameAnnotation, AnnotationError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| AnnotationError::parse("record", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| AnnotationError::parse("record", "expected a JSON object"))?;

    let frame_index = field_u64(obj, "frame")?;
    let time_s = field_f64(obj, "t")?;
    if !time_s.is_finite() || time_s < 0.0 {
        return Err(AnnotationError::invalid("t", format!("{time_s} is not a time >= 0")));
    }
    let image_ref = field(obj, "image")?
        .as_str()
        .ok_or_else(|| AnnotationError::parse("image", "expected a string"))?
        .to_string();
    let width = field_u32(obj, "width")?;
    let height = field_u32(obj, "height")?;

    let runs = field(obj, "mask_rle")?
        .as_array()
        .ok_or_else(|| AnnotationError::parse("mask_rle", "expected an array of integers"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .and_then(|r| u32::try_from(r).ok())
                .ok_or_else(|| AnnotationError::parse("mask_rle", "expected a non-negative integer run"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mask = MaskRaster::from_runs(width, height, runs)?;

    let raw_kps = field(obj, "keypoints")?
        .as_array()
        .ok_or_else(|| AnnotationError::parse("keypoints", "expected an array"))?;
    let mut named = Vec::with_capacity(raw_kps.len());
    for kp in raw_kps {
        let kp = kp
            .as_object()
            .ok_or_else(|| AnnotationError::parse("keypoints", "expected objects"))?;
        let name = field(kp, "name")
            .and_then(|v| {
                v.as_str()
                    .ok_or_else(|| AnnotationError::parse("name", "expected a string"))
            })
            .map_err(|e| nest("keypoints", e))?;
        let point = (|| {
            Ok::<_, AnnotationError>(Keypoint::new(
                field_f64(kp, "x")?,
                field_f64(kp, "y")?,
                field_f64(kp, "conf")?,
            ))
        })()
        .map_err(|e| nest("keypoints", e))?;
        named.push((name, point));
    }
    let keypoints = KeypointSet::from_named(named)?;

    Ok(FrameAnnotation {
        frame_index,
        time_s,
        image_ref,
        mask,
        keypoints,
    })
}

fn nest(parent: &str, err: AnnotationError) -> AnnotationError {
    match err {
        AnnotationError::Parse { field, message } => AnnotationError::Parse {
            field: format!("{parent}.{field}"),
            message,
        },
        other => other,
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    frame: u64,
    t: f64,
    image: &'a str,
    width: u32,
    height: u32,
    mask_rle: &'a [u32],
    keypoints: Vec<KeypointOut>,
}

#[derive(Serialize)]
struct KeypointOut {
    name: &'static str,
    x: f64,
    y: f64,
    conf: f64,
}

/// Serializes a frame as one JSONL record (no trailing newline).
pub fn to_json_line(frame: &FrameAnnotation) -> String {
    let record = RecordOut {
        frame: frame.frame_index,
        t: frame.time_s,
        image: &frame.image_ref,
        width: frame.mask.width(),
        height: frame.mask.height(),
        mask_rle: frame.mask.runs(),
        keypoints: frame
            .keypoints
            .iter()
            .map(|(l, kp)| KeypointOut {
                name: l.name(),
                x: kp.x,
                y: kp.y,
                conf: kp.conf,
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("annotation records always serialize")
}

/// Reads a JSONL stream. Blank lines are ignored; the first bad line is reported.
pub fn load_stream(path: &Path) -> Result<AnnotationStream, AnnotationError> {
    let io_err = |source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut frames: Vec<FrameAnnotation> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = parse_annotation_line(&line).map_err(|e| AnnotationError::Line {
            line: line_no,
            source: Box::new(e),
        })?;
        if let Some(prev) = frames.last() {
            check_order(prev, &frame, line_no)?;
        }
        frames.push(frame);
    }
    Ok(AnnotationStream {
        frames,
        fps: NOMINAL_FPS,
    })
}

pub fn write_stream(path: &Path, stream: &AnnotationStream) -> Result<(), AnnotationError> {
    let io_err = |source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for frame in stream.frames() {
        writeln!(out, "{}", to_json_line(frame)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Error)]
pub enum FrameImageError {
    #[error("cannot read frame image {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("frame {frame}: mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        frame: u64,
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("frame {frame}: no image available")]
    Missing { frame: u64 },
}

/// Supplies the grayscale image behind a frame annotation.
pub trait FrameImages: Sync {
    fn frame_image(&self, frame: &FrameAnnotation) -> Result<GrayImage, FrameImageError>;
}

/// Loads frame images from disk, resolving relative refs against `root`.
#[derive(Debug, Clone)]
pub struct ImageDir {
    root: PathBuf,
}

impl ImageDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Resolves against the directory containing `stream_path`.
    pub fn for_stream(stream_path: &Path) -> Self {
        let root = stream_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self { root }
    }
}

impl FrameImages for ImageDir {
    fn frame_image(&self, frame: &FrameAnnotation) -> Result<GrayImage, FrameImageError> {
        let path = self.root.join(&frame.image_ref);
        let img = image::open(&path)
            .map_err(|e| FrameImageError::Read {
                path: path.clone(),
                message: e.to_string(),
            })?
            .to_luma8();
        check_dimensions(frame, &img)?;
        Ok(img)
    }
}

pub(crate) fn check_dimensions(frame: &FrameAnnotation, img: &GrayImage) -> Result<(), FrameImageError> {
    if img.width() != frame.mask.width() || img.height() != frame.mask.height() {
        return Err(FrameImageError::DimensionMismatch {
            frame: frame.frame_index,
            mask_w: frame.mask.width(),
            mask_h: frame.mask.height(),
            image_w: img.width(),
            image_h: img.height(),
        });
    }
    Ok(())
}
