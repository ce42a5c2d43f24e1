//! Deterministic synthetic herd: piebald coat patterns, rendered top-view
//! frames with exact ground-truth annotations, and single-file walk scenarios.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{bilinear, round_level};
use crate::annotations::{
    check_dimensions, AnnotationStream, FrameAnnotation, FrameImageError, FrameImages, Keypoint, KeypointSet,
    Landmark, MaskRaster, NOMINAL_FPS,
};
use crate::cowfinder::Segment;
use crate::raster::BitRaster;
use crate::template::{TemplateShape, BODY_OUTLINE, CANVAS_HEIGHT, CANVAS_WIDTH};

/// Accepted foreground fraction over the whole pattern.
const PATTERN_FRACTION: (f64, f64) = (0.1, 0.9);
/// Accepted foreground fraction inside the body outline. Keeps coats far
/// enough from all-black or all-white that distinct animals stay separable.
const BODY_FRACTION: (f64, f64) = (0.3, 0.7);

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("scale {0} outside [0.5, 2.0]")]
    Scale(f64),
    #[error("every keypoint falls outside the {width}x{height} frame")]
    OutOfFrame { width: u32, height: u32 },
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("entry {index}: enter time {enter} is not before exit time {exit}")]
    EmptyInterval { index: usize, enter: f64, exit: f64 },
    #[error("entry {index} is not sorted by enter time")]
    Unsorted { index: usize },
    #[error("entry {index} overlaps the previous entry (single file only)")]
    Overlap { index: usize },
    #[error("entry {index} spans no frame at {fps} fps")]
    NoFrames { index: usize, fps: f64 },
    #[error("fps must be positive, got {0}")]
    Fps(f64),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Binary coat raster at template resolution: 1 = white, 0 = black.
#[derive(Debug, Clone, PartialEq)]
pub struct CoatPattern {
    pub seed: u64,
    pub pattern: BitRaster,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn box_blur(field: &mut [f32], w: usize, h: usize, radius: usize) {
    let mut tmp = vec![0f32; field.len()];
    let norm = 1.0 / (2 * radius + 1) as f32;
    for y in 0..h {
        let row = &field[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for dx in 0..=2 * radius {
                let xx = (x + dx).saturating_sub(radius).min(w - 1);
                acc += row[xx];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..=2 * radius {
                let yy = (y + dy).saturating_sub(radius).min(h - 1);
                acc += tmp[yy * w + x];
            }
            field[y * w + x] = acc * norm;
        }
    }
}

fn coat_attempt(rng: &mut ChaCha8Rng) -> BitRaster {
    let (w, h) = (CANVAS_WIDTH as usize, CANVAS_HEIGHT as usize);
    let mut field = vec![0f32; w * h];
    let blobs = rng.random_range(9..=15);
    for _ in 0..blobs {
        let cx: f64 = rng.random_range(-20.0..CANVAS_WIDTH as f64 + 20.0);
        let cy: f64 = rng.random_range(-20.0..CANVAS_HEIGHT as f64 + 20.0);
        let a: f64 = rng.random_range(22.0..70.0);
        let b: f64 = rng.random_range(16.0..50.0);
        let theta: f64 = rng.random_range(0.0..PI);
        let (s, c) = theta.sin_cos();
        let r = a.max(b);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(w);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    field[y * w + x] = 1.0;
                }
            }
        }
    }
    box_blur(&mut field, w, h, 6);
    box_blur(&mut field, w, h, 6);
    BitRaster::from_fn(CANVAS_WIDTH, CANVAS_HEIGHT, |x, y| {
        field[y as usize * w + x as usize] >= 0.5
    })
}

fn body_fraction(pattern: &BitRaster) -> f64 {
    let body = BODY_OUTLINE;
    let (mut inside, mut white) = (0usize, 0usize);
    for y in 0..pattern.height() {
        for x in 0..pattern.width() {
            if body.contains(x as f64, y as f64) {
                inside += 1;
                white += pattern.get(x, y) as usize;
            }
        }
    }
    white as f64 / inside as f64
}

/// Union of random ellipses, smoothed and thresholded. Attempts whose white
/// fraction falls outside the accepted ranges are redrawn from a derived seed.
pub fn generate_coat(seed: u64) -> CoatPattern {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, attempt));
        let pattern = coat_attempt(&mut rng);
        let total = pattern.fraction_ones();
        let body = body_fraction(&pattern);
        if (PATTERN_FRACTION.0..=PATTERN_FRACTION.1).contains(&total)
            && (BODY_FRACTION.0..=BODY_FRACTION.1).contains(&body)
        {
            return CoatPattern { seed, pattern };
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Similarity pose about the template body centre, plus image noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
    pub scale: f64,
    /// Additive Gaussian noise, as a fraction of full scale.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            rotation_deg: 0.0,
            scale: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Translation placing the body centre in the middle of the frame.
    pub fn centered(cfg: &RenderConfig) -> Self {
        Self {
            tx: cfg.width as f64 / 2.0 - BODY_OUTLINE.cx,
            ty: cfg.height as f64 / 2.0 - BODY_OUTLINE.cy,
            ..Self::identity()
        }
    }

    pub fn translated(self, dx: f64, dy: f64) -> Self {
        Self {
            tx: self.tx + dx,
            ty: self.ty + dy,
            ..self
        }
    }

    /// Template coordinates to frame coordinates.
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        self.forward_map()(p)
    }

    /// Frame coordinates to template coordinates.
    pub fn invert(&self, p: (f64, f64)) -> (f64, f64) {
        self.inverse_map()(p)
    }

    fn forward_map(&self) -> impl Fn((f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (cx, cy) = (BODY_OUTLINE.cx, BODY_OUTLINE.cy);
        let (tx, ty, k) = (self.tx, self.ty, self.scale);
        move |(x, y)| {
            let (dx, dy) = (x - cx, y - cy);
            (cx + tx + k * (c * dx - s * dy), cy + ty + k * (s * dx + c * dy))
        }
    }

    fn inverse_map(&self) -> impl Fn((f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (cx, cy) = (BODY_OUTLINE.cx, BODY_OUTLINE.cy);
        let (tx, ty, k) = (self.tx, self.ty, self.scale);
        move |(x, y)| {
            let (dx, dy) = ((x - cx - tx) / k, (y - cy - ty) / k);
            (cx + c * dx + s * dy, cy - s * dx + c * dy)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub keypoint_conf: f64,
    pub black_level: u8,
    pub white_level: u8,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 400,
            keypoint_conf: 0.95,
            black_level: 40,
            white_level: 215,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: GrayImage,
    /// Frame index and time are zero; callers stamp them.
    pub annotation: FrameAnnotation,
}

fn check_pose(pose: &Pose) -> Result<(), RenderError> {
    if !(0.5..=2.0).contains(&pose.scale) {
        return Err(RenderError::Scale(pose.scale));
    }
    Ok(())
}

fn pose_keypoints(pose: &Pose, cfg: &RenderConfig) -> Result<KeypointSet, RenderError> {
    let template = TemplateShape::standard();
    let points = Landmark::ALL.map(|l| {
        let (x, y) = pose.apply(template.canonical(l));
        Keypoint::new(x, y, cfg.keypoint_conf)
    });
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    if points.iter().all(|p| p.x < 0.0 || p.y < 0.0 || p.x > w - 1.0 || p.y > h - 1.0) {
        return Err(RenderError::OutOfFrame {
            width: cfg.width,
            height: cfg.height,
        });
    }
    Ok(KeypointSet::new(points).expect("transformed template keypoints are finite"))
}

/// Frame pixels inside the posed body outline.
fn pose_mask(pose: &Pose, cfg: &RenderConfig) -> BitRaster {
    let body = BODY_OUTLINE;
    let invert = pose.inverse_map();
    BitRaster::from_fn(cfg.width, cfg.height, |x, y| {
        let (px, py) = invert((x as f64, y as f64));
        body.contains(px, py)
    })
}

fn annotation(pose: &Pose, cfg: &RenderConfig, mask: &BitRaster) -> Result<FrameAnnotation, RenderError> {
    check_pose(pose)?;
    Ok(FrameAnnotation {
        frame_index: 0,
        time_s: 0.0,
        image_ref: String::new(),
        mask: MaskRaster::encode(mask),
        keypoints: pose_keypoints(pose, cfg)?,
    })
}

/// The frame image and its body mask, in one pass. The mask test is the same
/// as `pose_mask`.
fn paint(coat: &CoatPattern, pose: &Pose, cfg: &RenderConfig) -> (GrayImage, BitRaster) {
    let body = BODY_OUTLINE;
    let invert = pose.inverse_map();
    let coat_raw = coat.pattern.as_bytes();
    let (black, white) = (cfg.black_level as f64, cfg.white_level as f64);
    let mut noise = (pose.noise_sigma > 0.0).then(|| {
        (
            ChaCha8Rng::seed_from_u64(mix(coat.seed, pose.noise_seed)),
            Normal::new(0.0, pose.noise_sigma * 255.0).expect("finite sigma"),
        )
    });

    let mut mask = BitRaster::new(cfg.width, cfg.height);
    let mut pixels = Vec::with_capacity((cfg.width * cfg.height) as usize);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (px, py) = invert((x as f64, y as f64));
            let mut v = if body.contains(px, py) {
                mask.set(x, y, true);
                black + (white - black) * bilinear(coat_raw, CANVAS_WIDTH, CANVAS_HEIGHT, px, py)
            } else if (x / 20 + y / 20) % 2 == 0 {
                70.0
            } else {
                95.0
            };
            if let Some((rng, normal)) = noise.as_mut() {
                v += normal.sample(rng);
            }
            pixels.push(round_level(v));
        }
    }
    let image = GrayImage::from_raw(cfg.width, cfg.height, pixels).expect("buffer matches frame size");
    (image, mask)
}

/// Renders a coat under `pose`. Keypoints and mask are the exact transforms of
/// the template landmarks and body outline; noise touches the image only.
pub fn render_frame(coat: &CoatPattern, pose: &Pose, cfg: &RenderConfig) -> Result<RenderedFrame, RenderError> {
    check_pose(pose)?;
    let (image, mask) = paint(coat, pose, cfg);
    Ok(RenderedFrame {
        annotation: annotation(pose, cfg, &mask)?,
        image,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkEntry {
    pub cow_seed: u64,
    pub enter_time_s: f64,
    pub exit_time_s: f64,
}

/// Animals crossing the recording region one at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkSchedule {
    pub fps: f64,
    pub noise_sigma: f64,
    /// Varies walk paths independently of coats.
    pub path_seed: u64,
    pub render: RenderConfig,
    #[serde(rename = "cow")]
    pub entries: Vec<WalkEntry>,
}

impl Default for WalkSchedule {
    fn default() -> Self {
        Self {
            fps: NOMINAL_FPS,
            noise_sigma: 0.0,
            path_seed: 0,
            render: RenderConfig::default(),
            entries: Vec::new(),
        }
    }
}

impl WalkSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.fps > 0.0) {
            return Err(ScheduleError::Fps(self.fps));
        }
        for (index, e) in self.entries.iter().enumerate() {
            if !(e.enter_time_s < e.exit_time_s) || e.enter_time_s < 0.0 {
                return Err(ScheduleError::EmptyInterval {
                    index,
                    enter: e.enter_time_s,
                    exit: e.exit_time_s,
                });
            }
            if index > 0 {
                let prev = &self.entries[index - 1];
                if e.enter_time_s < prev.enter_time_s {
                    return Err(ScheduleError::Unsorted { index });
                }
                if e.enter_time_s < prev.exit_time_s {
                    return Err(ScheduleError::Overlap { index });
                }
            }
            if self.frame_range(e).is_empty() {
                return Err(ScheduleError::NoFrames { index, fps: self.fps });
            }
        }
        Ok(())
    }

    /// Frames whose timestamp lies in `[enter, exit)`.
    pub fn frame_range(&self, e: &WalkEntry) -> std::ops::Range<u64> {
        let first = (e.enter_time_s * self.fps - 1e-9).ceil().max(0.0) as u64;
        let end = (e.exit_time_s * self.fps - 1e-9).ceil().max(0.0) as u64;
        first..end
    }

    /// Pose of entry `index` at fractional progress `u` through its interval.
    /// Translation stays within 45 px of centre and rotation within 12 degrees.
    pub fn walk_pose(&self, index: usize, u: f64, frame_index: u64) -> Pose {
        let e = &self.entries[index];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.path_seed, index as u64), e.cow_seed));
        let dx0: f64 = rng.random_range(-40.0..-15.0);
        let dx1: f64 = rng.random_range(15.0..40.0);
        let dy0: f64 = rng.random_range(-15.0..15.0);
        let dy1: f64 = rng.random_range(-15.0..15.0);
        let rot_base: f64 = rng.random_range(-4.0..4.0);
        let rot_amp: f64 = rng.random_range(-8.0..8.0);
        let base = Pose::centered(&self.render);
        Pose {
            rotation_deg: rot_base + rot_amp * (2.0 * PI * u).sin(),
            noise_sigma: self.noise_sigma,
            noise_seed: mix(self.path_seed, frame_index),
            ..base.translated(dx0 + (dx1 - dx0) * u, dy0 + (dy1 - dy0) * u)
        }
    }
}

/// Renders scenario frames on demand from their coat and pose.
#[derive(Debug, Clone)]
pub struct SyntheticFrames {
    coats: Vec<CoatPattern>,
    poses: BTreeMap<u64, (usize, Pose)>,
    render: RenderConfig,
}

impl SyntheticFrames {
    pub fn render(&self, frame_index: u64) -> Option<GrayImage> {
        let (coat, pose) = self.poses.get(&frame_index)?;
        check_pose(pose).ok()?;
        Some(paint(&self.coats[*coat], pose, &self.render).0)
    }

    /// Writes every frame image to `root/<image_ref>`.
    pub fn write_images(&self, root: &Path, stream: &AnnotationStream) -> Result<(), FrameImageError> {
        stream.frames().par_iter().try_for_each(|f| {
            let path = root.join(&f.image_ref);
            let img = self.frame_image(f)?;
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| FrameImageError::Read {
                    path: dir.to_path_buf(),
                    message: e.to_string(),
                })?;
            }
            img.save(&path).map_err(|e| FrameImageError::Read {
                path: path.clone(),
                message: e.to_string(),
            })
        })
    }
}

impl FrameImages for SyntheticFrames {
    fn frame_image(&self, frame: &FrameAnnotation) -> Result<GrayImage, FrameImageError> {
        let img = self
            .render(frame.frame_index)
            .ok_or(FrameImageError::Missing { frame: frame.frame_index })?;
        check_dimensions(frame, &img)?;
        Ok(img)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub stream: AnnotationStream,
    pub truth: Vec<Segment>,
    pub frames: SyntheticFrames,
}

pub fn image_ref(frame_index: u64) -> String {
    format!("frames/{frame_index:06}.png")
}

pub fn generate_scenario(schedule: &WalkSchedule) -> Result<Scenario, ScheduleError> {
    schedule.validate()?;
    let coats: Vec<CoatPattern> = schedule
        .entries
        .par_iter()
        .map(|e| generate_coat(e.cow_seed))
        .collect();

    let mut jobs = Vec::new();
    let mut truth = Vec::with_capacity(schedule.entries.len());
    for (index, e) in schedule.entries.iter().enumerate() {
        let range = schedule.frame_range(e);
        let span = e.exit_time_s - e.enter_time_s;
        for k in range.clone() {
            let t = k as f64 / schedule.fps;
            let u = ((t - e.enter_time_s) / span).clamp(0.0, 1.0);
            jobs.push((k, t, index, schedule.walk_pose(index, u, k)));
        }
        truth.push(Segment {
            cow_id: e.cow_seed.to_string(),
            start_time_s: e.enter_time_s,
            end_time_s: e.exit_time_s,
            start_frame: range.start,
            end_frame: range.end - 1,
            n_frames: (range.end - range.start) as usize,
            min_distance: 0,
            mean_distance: 0.0,
        });
    }

    let frames = jobs
        .par_iter()
        .map(|&(k, t, _, pose)| {
            let mut annotation = annotation(&pose, &schedule.render, &pose_mask(&pose, &schedule.render))?;
            annotation.frame_index = k;
            annotation.time_s = t;
            annotation.image_ref = image_ref(k);
            Ok(annotation)
        })
        .collect::<Result<Vec<_>, RenderError>>()?;
    let stream = AnnotationStream::new(frames, schedule.fps).expect("schedule frames are ordered");

    let poses = jobs.into_iter().map(|(k, _, i, pose)| (k, (i, pose))).collect();
    Ok(Scenario {
        stream,
        truth,
        frames: SyntheticFrames {
            coats,
            poses,
            render: schedule.render,
        },
    })
}

/// A single-animal clip of `n_frames` consecutive frames starting at t = 0.
pub fn single_cow_clip(cow_seed: u64, n_frames: u64, path_seed: u64, noise_sigma: f64) -> Scenario {
    let schedule = WalkSchedule {
        noise_sigma,
        path_seed,
        entries: vec![WalkEntry {
            cow_seed,
            enter_time_s: 0.0,
            exit_time_s: n_frames as f64 / NOMINAL_FPS,
        }],
        ..WalkSchedule::default()
    };
    generate_scenario(&schedule).expect("single-entry schedule is valid")
}
