//! Keypoint checking and rectification, background removal, and the
//! piecewise-affine warp onto the template canvas.

use std::fmt;

use image::GrayImage;
use thiserror::Error;

use crate::annotations::{FrameAnnotation, KeypointSet, Landmark};
use crate::raster::BitRaster;
use crate::template::{barycentric, signed_area2, TemplateShape, CONTROL_POINTS};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    DimensionMismatch {
        image_w: u32,
        image_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("degenerate source triangle {triangle} (signed area {area:.3})")]
    DegenerateTriangle { triangle: usize, area: f64 },
}

/// Keypoint checker rule identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    SpineOrder,
    BilateralSide,
    DistanceRange,
    LowConfidence,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::SpineOrder => "spine-order",
            Rule::BilateralSide => "bilateral-side",
            Rule::DistanceRange => "distance-range",
            Rule::LowConfidence => "low-confidence",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckReport {
    pub passed: bool,
    pub violations: Vec<Rule>,
}

impl CheckReport {
    fn from_violations(violations: Vec<Rule>) -> Self {
        Self {
            passed: violations.is_empty(),
            violations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub min_conf: f64,
    /// Inter-landmark distances must lie within these multiples of body length.
    pub min_distance_ratio: f64,
    pub max_distance_ratio: f64,
    /// Minimum gap in pixels between the mask bounding box and the image border
    /// for a frame to count as showing the full back.
    pub border_margin: u32,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            min_conf: 0.5,
            min_distance_ratio: 0.05,
            max_distance_ratio: 1.5,
            border_margin: 8,
        }
    }
}

/// Body axis from poll to tail head.
struct Axis {
    origin: (f64, f64),
    dir: (f64, f64),
    length: f64,
}

impl Axis {
    fn of(k: &KeypointSet) -> Self {
        let origin = k.xy(Landmark::Poll);
        let tail = k.xy(Landmark::TailHead);
        let (dx, dy) = (tail.0 - origin.0, tail.1 - origin.1);
        let length = dx.hypot(dy);
        let dir = if length > 0.0 {
            (dx / length, dy / length)
        } else {
            (0.0, 0.0)
        };
        Self { origin, dir, length }
    }

    fn projection(&self, p: (f64, f64)) -> f64 {
        (p.0 - self.origin.0) * self.dir.0 + (p.1 - self.origin.1) * self.dir.1
    }

    /// Positive on the animal's left. With image y pointing down and the axis
    /// running poll -> tail, the left side has a positive cross product.
    fn side(&self, p: (f64, f64)) -> f64 {
        self.dir.0 * (p.1 - self.origin.1) - self.dir.1 * (p.0 - self.origin.0)
    }
}

pub fn check_keypoints(k: &KeypointSet, cfg: &AlignConfig) -> CheckReport {
    let axis = Axis::of(k);
    let mut violations = Vec::new();

    let proj: Vec<f64> = Landmark::SPINE.iter().map(|&l| axis.projection(k.xy(l))).collect();
    if axis.length == 0.0 || proj.windows(2).any(|w| w[0] >= w[1]) {
        violations.push(Rule::SpineOrder);
    }

    let sides_ok = axis.length > 0.0
        && Landmark::BILATERAL
            .iter()
            .all(|&(l, r)| axis.side(k.xy(l)) > 0.0 && axis.side(k.xy(r)) < 0.0);
    if !sides_ok {
        violations.push(Rule::BilateralSide);
    }

    let (lo, hi) = (
        cfg.min_distance_ratio * axis.length,
        cfg.max_distance_ratio * axis.length,
    );
    let mut distances_ok = axis.length > 0.0;
    'outer: for (i, a) in Landmark::ALL.iter().enumerate() {
        for b in &Landmark::ALL[i + 1..] {
            let (pa, pb) = (k.xy(*a), k.xy(*b));
            let d = (pa.0 - pb.0).hypot(pa.1 - pb.1);
            if d < lo || d > hi {
                distances_ok = false;
                break 'outer;
            }
        }
    }
    if !distances_ok {
        violations.push(Rule::DistanceRange);
    }

    if k.min_conf() < cfg.min_conf {
        violations.push(Rule::LowConfidence);
    }

    CheckReport::from_violations(violations)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unrectifiable {
    /// Rules still violated after the repair pass.
    pub violations: Vec<Rule>,
}

impl fmt::Display for Unrectifiable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.violations.iter().map(|r| r.id()).collect();
        write!(f, "unrectifiable keypoints ({})", ids.join("; "))
    }
}

/// Single repair pass: reorder the spine landmarks by projection on the body
/// axis, then swap any bilateral pair whose members sit on opposite wrong
/// sides. The result passes the checker or the frame is unrectifiable.
pub fn rectify_keypoints(k: &KeypointSet, cfg: &AlignConfig) -> Result<KeypointSet, Unrectifiable> {
    let mut out = k.clone();
    let axis = Axis::of(k);

    let mut spine: Vec<_> = Landmark::SPINE.iter().map(|&l| k.get(l)).collect();
    spine.sort_by(|a, b| {
        axis.projection((a.x, a.y))
            .total_cmp(&axis.projection((b.x, b.y)))
    });
    for (&l, kp) in Landmark::SPINE.iter().zip(spine) {
        out.set(l, kp).expect("keypoints already validated");
    }

    let axis = Axis::of(&out);
    for (l, r) in Landmark::BILATERAL {
        if axis.side(out.xy(l)) < 0.0 && axis.side(out.xy(r)) > 0.0 {
            out.swap(l, r);
        }
    }

    let report = check_keypoints(&out, cfg);
    if report.passed {
        Ok(out)
    } else {
        Err(Unrectifiable {
            violations: report.violations,
        })
    }
}

/// Zeroes every pixel outside the mask.
pub fn remove_background(image: &GrayImage, mask: &BitRaster) -> Result<GrayImage, AlignError> {
    if (image.width(), image.height()) != (mask.width(), mask.height()) {
        return Err(AlignError::DimensionMismatch {
            image_w: image.width(),
            image_h: image.height(),
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    let mut out = image.clone();
    for (p, &m) in out.iter_mut().zip(mask.as_bytes()) {
        if m == 0 {
            *p = 0;
        }
    }
    Ok(out)
}

/// `[a, b, c, d, e, f]` mapping `(x, y)` to `(a x + b y + c, d x + e y + f)`.
type Affine = [f64; 6];

#[inline]
fn apply(m: &Affine, (x, y): (f64, f64)) -> (f64, f64) {
    (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let d = det3(m);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, slot) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = rhs[row];
        }
        *slot = det3(mc) / d;
    }
    Some(out)
}

/// Least-squares affine map taking `from[i]` to `to[i]`.
fn fit_affine(from: &[(f64, f64)], to: &[(f64, f64)]) -> Option<Affine> {
    let mut ata = [[0.0; 3]; 3];
    let mut atx = [0.0; 3];
    let mut aty = [0.0; 3];
    for (&(x, y), &(u, v)) in from.iter().zip(to) {
        let row = [x, y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atx[i] += row[i] * u;
            aty[i] += row[i] * v;
        }
    }
    let [a, b, c] = solve3(ata, atx)?;
    let [d, e, f] = solve3(ata, aty)?;
    Some([a, b, c, d, e, f])
}

/// Exact affine map taking triangle `from` to triangle `to`.
fn triangle_affine(from: [(f64, f64); 3], to: [(f64, f64); 3]) -> Option<Affine> {
    let m = from.map(|(x, y)| [x, y, 1.0]);
    let [a, b, c] = solve3(m, to.map(|p| p.0))?;
    let [d, e, f] = solve3(m, to.map(|p| p.1))?;
    Some([a, b, c, d, e, f])
}

/// Piecewise-affine correspondence between a source frame and the template.
///
/// Landmarks map to their canonical positions; the canvas corners map to the
/// source positions predicted by a least-squares affine fit of the landmarks.
#[derive(Debug, Clone)]
pub struct PiecewiseWarp<'t> {
    template: &'t TemplateShape,
    source: [(f64, f64); CONTROL_POINTS],
    /// Template-to-source map per triangle.
    to_source: Vec<Affine>,
}

impl<'t> PiecewiseWarp<'t> {
    pub fn new(k: &KeypointSet, template: &'t TemplateShape) -> Result<Self, AlignError> {
        let tpl = template.control_points();
        let mut source = [(0.0, 0.0); CONTROL_POINTS];
        for l in Landmark::ALL {
            source[l.index()] = k.xy(l);
        }
        let landmarks = &tpl[..Landmark::ALL.len()];
        let fit = fit_affine(landmarks, &source[..Landmark::ALL.len()]).ok_or(
            AlignError::DegenerateTriangle {
                triangle: usize::MAX,
                area: 0.0,
            },
        )?;
        for i in Landmark::ALL.len()..CONTROL_POINTS {
            source[i] = apply(&fit, tpl[i]);
        }

        let mut to_source = Vec::with_capacity(template.triangles().len());
        for (ti, tri) in template.triangles().iter().enumerate() {
            let t = tri.map(|i| tpl[i]);
            let s = tri.map(|i| source[i]);
            let (ta, sa) = (signed_area2(t[0], t[1], t[2]), signed_area2(s[0], s[1], s[2]));
            // folded or collapsed triangles break the correspondence
            if sa.abs() < 1e-6 || sa.signum() != ta.signum() {
                return Err(AlignError::DegenerateTriangle {
                    triangle: ti,
                    area: sa / 2.0,
                });
            }
            let m = triangle_affine(t, s).ok_or(AlignError::DegenerateTriangle {
                triangle: ti,
                area: sa / 2.0,
            })?;
            to_source.push(m);
        }
        Ok(Self {
            template,
            source,
            to_source,
        })
    }

    /// Source position sampled for canvas pixel `(x, y)`.
    #[inline]
    pub fn source_point(&self, x: u32, y: u32) -> (f64, f64) {
        let tri = self.template.triangle_at(x, y);
        apply(&self.to_source[tri], (x as f64, y as f64))
    }

    /// Maps a source point to template coordinates, or `None` when it falls
    /// outside every source triangle.
    pub fn forward(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        let tpl = self.template.control_points();
        let tol = 1e-9;
        for tri in self.template.triangles() {
            let s = tri.map(|i| self.source[i]);
            if let Some((u, v, w)) = barycentric(s[0], s[1], s[2], p) {
                if u >= -tol && v >= -tol && w >= -tol {
                    let t = tri.map(|i| tpl[i]);
                    return Some((
                        u * t[0].0 + v * t[1].0 + w * t[2].0,
                        u * t[0].1 + v * t[1].1 + w * t[2].1,
                    ));
                }
            }
        }
        None
    }

    /// Calls `f(index, source point)` for each canvas pixel in row-major order.
    fn for_each_source(&self, mut f: impl FnMut(usize, (f64, f64))) {
        let w = self.template.width();
        for y in 0..self.template.height() {
            for x in 0..w {
                f((y * w + x) as usize, self.source_point(x, y));
            }
        }
    }

    fn canvas_len(&self) -> usize {
        (self.template.width() * self.template.height()) as usize
    }

    pub fn warp_image(&self, src: &GrayImage) -> GrayImage {
        self.warp_pair(src, None).0
    }

    pub fn warp_mask(&self, mask: &BitRaster) -> BitRaster {
        let inside = self.sample_mask(mask);
        let w = self.template.width();
        BitRaster::from_fn(w, self.template.height(), |x, y| inside[(y * w + x) as usize])
    }

    fn sample_mask(&self, mask: &BitRaster) -> Vec<bool> {
        let (mw, mh, raw) = (mask.width(), mask.height(), mask.as_bytes());
        let mut inside = vec![false; self.canvas_len()];
        self.for_each_source(|i, (sx, sy)| inside[i] = bilinear(raw, mw, mh, sx, sy) >= 0.5);
        inside
    }

    /// Image and optional mask warped in one pass over the canvas.
    fn warp_pair(&self, src: &GrayImage, mask: Option<&BitRaster>) -> (GrayImage, Option<BitRaster>) {
        let (w, h) = (self.template.width(), self.template.height());
        let (raw, sw, sh) = (src.as_raw(), src.width(), src.height());
        let mut pixels = vec![0u8; self.canvas_len()];
        let mut inside = mask.map(|_| vec![false; self.canvas_len()]);
        let shared = mask.is_some_and(|m| (m.width(), m.height()) == (sw, sh));
        self.for_each_source(|i, (sx, sy)| {
            let fp = Footprint::at(sw, sh, sx, sy);
            let v = fp.map_or(0.0, |fp| fp.sample(raw));
            pixels[i] = round_level(v);
            if let (Some(m), Some(out)) = (mask, inside.as_mut()) {
                let level = if shared {
                    fp.map_or(0.0, |fp| fp.sample(m.as_bytes()))
                } else {
                    bilinear(m.as_bytes(), m.width(), m.height(), sx, sy)
                };
                out[i] = level >= 0.5;
            }
        });
        let image = GrayImage::from_raw(w, h, pixels).expect("buffer matches canvas");
        let mask = inside.map(|b| BitRaster::from_fn(w, h, |x, y| b[(y * w + x) as usize]));
        (image, mask)
    }
}

/// Nearest 8-bit level, halves rounding up. The float-to-int cast saturates,
/// so this also clamps to [0, 255].
#[inline]
pub(crate) fn round_level(v: f64) -> u8 {
    (v + 0.5) as u8
}

/// Bilinear sample with edge clamping; points beyond the outer pixel
/// footprint read as zero.
#[inline]
pub(crate) fn bilinear(raw: &[u8], w: u32, h: u32, x: f64, y: f64) -> f64 {
    Footprint::at(w, h, x, y).map_or(0.0, |fp| fp.sample(raw))
}

/// The four pixels and weights behind one bilinear sample.
#[derive(Clone, Copy)]
pub(crate) struct Footprint {
    index: usize,
    step_x: usize,
    step_y: usize,
    fx: f64,
    fy: f64,
}

impl Footprint {
    #[inline]
    pub(crate) fn at(w: u32, h: u32, x: f64, y: f64) -> Option<Self> {
        let (wf, hf) = (w as f64, h as f64);
        if !(x >= -0.5 && y >= -0.5 && x <= wf - 0.5 && y <= hf - 0.5) {
            return None;
        }
        let x = x.clamp(0.0, wf - 1.0);
        let y = y.clamp(0.0, hf - 1.0);
        // both are non-negative here, so truncation is floor
        let (x0, y0) = (x as u32, y as u32);
        Some(Self {
            index: (y0 * w + x0) as usize,
            step_x: usize::from(x0 + 1 < w),
            step_y: if y0 + 1 < h { w as usize } else { 0 },
            fx: x - x0 as f64,
            fy: y - y0 as f64,
        })
    }

    #[inline]
    pub(crate) fn sample(&self, raw: &[u8]) -> f64 {
        let i = self.index;
        let (a, b) = (raw[i] as f64, raw[i + self.step_x] as f64);
        let (c, d) = (raw[i + self.step_y] as f64, raw[i + self.step_y + self.step_x] as f64);
        let top = a + (b - a) * self.fx;
        let bottom = c + (d - c) * self.fx;
        top + (bottom - top) * self.fy
    }
}

/// The aligned canvas and the warped body mask.
#[derive(Debug, Clone)]
pub struct AlignedFrame {
    pub image: GrayImage,
    pub mask: BitRaster,
}

/// Warps `image` so the keypoints land on the template landmarks.
pub fn align_to_template(image: &GrayImage, k: &KeypointSet, template: &TemplateShape) -> Result<GrayImage, AlignError> {
    Ok(PiecewiseWarp::new(k, template)?.warp_image(image))
}

/// Warps both the image and its mask onto the template canvas.
pub fn align_with_mask(
    image: &GrayImage,
    mask: &BitRaster,
    k: &KeypointSet,
    template: &TemplateShape,
) -> Result<AlignedFrame, AlignError> {
    let warp = PiecewiseWarp::new(k, template)?;
    let (image, mask) = warp.warp_pair(image, Some(mask));
    Ok(AlignedFrame {
        image,
        mask: mask.expect("mask was supplied"),
    })
}

/// A frame clearly shows the full back when its keypoints survive
/// rectification with high confidence and its mask stays clear of the border.
pub fn is_enrollable(f: &FrameAnnotation, cfg: &AlignConfig) -> bool {
    if f.keypoints.min_conf() < cfg.min_conf || rectify_keypoints(&f.keypoints, cfg).is_err() {
        return false;
    }
    let mask = f.mask.decode();
    let Some((x0, y0, x1, y1)) = mask.bounding_box() else {
        return false;
    };
    let m = cfg.border_margin;
    x0 >= m && y0 >= m && x1 + m < mask.width() && y1 + m < mask.height()
}
