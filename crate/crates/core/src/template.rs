//! Canonical top-view template: canvas, landmark coordinates, body outline and
//! the fixed triangulation used by the piecewise-affine warp.
//!
//! Barcodes are only comparable when produced against the same template, so
//! any change to these constants must also change [`TEMPLATE_ID`].

use std::sync::OnceLock;

use crate::annotations::{Keypoint, KeypointSet, Landmark, KEYPOINT_COUNT};

pub const TEMPLATE_ID: &str = "top10-ellipse-v1";
pub const CANVAS_WIDTH: u32 = 512;
pub const CANVAS_HEIGHT: u32 = 256;

/// Spine y coordinate; the body axis points towards +x (head right).
pub const MIDLINE_Y: f64 = 128.0;

/// Canonical `(x, y)` per landmark, indexed by [`Landmark::index`].
/// Left landmarks sit above the midline (smaller y) since the head faces +x.
const CANONICAL: [(f64, f64); KEYPOINT_COUNT] = [
    (472.0, 128.0), // poll
    (368.0, 128.0), // withers
    (240.0, 128.0), // spine_mid
    (48.0, 128.0),  // tail_head
    (376.0, 76.0),  // left_shoulder
    (376.0, 180.0), // right_shoulder
    (232.0, 60.0),  // left_flank
    (232.0, 196.0), // right_flank
    (104.0, 68.0),  // left_hip
    (104.0, 188.0), // right_hip
];

/// Control point indices: 0..10 are landmarks, 10..14 canvas corners
/// (top-left, top-right, bottom-right, bottom-left).
pub const CONTROL_POINTS: usize = KEYPOINT_COUNT + 4;

const TL: usize = 10;
const TR: usize = 11;
const BR: usize = 12;
const BL: usize = 13;

const P: usize = 0;
const W: usize = 1;
const S: usize = 2;
const T: usize = 3;
const LS: usize = 4;
const RS: usize = 5;
const LF: usize = 6;
const RF: usize = 7;
const LH: usize = 8;
const RH: usize = 9;

const TRIANGLES: [[usize; 3]; 22] = [
    // upper (left) half
    [TL, T, LH],
    [TL, LH, LF],
    [T, S, LH],
    [S, LF, LH],
    [S, W, LF],
    [W, LS, LF],
    [TL, LF, TR],
    [LF, LS, TR],
    [LS, P, TR],
    [LS, W, P],
    // lower (right) half
    [BL, RH, T],
    [BL, RF, RH],
    [T, RH, S],
    [S, RH, RF],
    [S, RF, W],
    [W, RF, RS],
    [BL, BR, RF],
    [RF, BR, RS],
    [RS, BR, P],
    [RS, P, W],
    // ends
    [TL, BL, T],
    [TR, P, BR],
];

/// Axis-aligned ellipse used as the body silhouette.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

pub const BODY_OUTLINE: Ellipse = Ellipse {
    cx: 256.0,
    cy: 128.0,
    rx: 236.0,
    ry: 92.0,
};

#[derive(Debug)]
pub struct TemplateShape {
    id: &'static str,
    points: [(f64, f64); CONTROL_POINTS],
    triangles: &'static [[usize; 3]],
    body: Ellipse,
    /// Triangle index containing each canvas pixel centre, row-major.
    lookup: Vec<u8>,
}

impl TemplateShape {
    /// The built-in template, built once.
    pub fn standard() -> &'static TemplateShape {
        static STANDARD: OnceLock<TemplateShape> = OnceLock::new();
        STANDARD.get_or_init(Self::build)
    }

    fn build() -> Self {
        let mut points = [(0.0, 0.0); CONTROL_POINTS];
        points[..KEYPOINT_COUNT].copy_from_slice(&CANONICAL);
        let (xmax, ymax) = ((CANVAS_WIDTH - 1) as f64, (CANVAS_HEIGHT - 1) as f64);
        points[TL] = (0.0, 0.0);
        points[TR] = (xmax, 0.0);
        points[BR] = (xmax, ymax);
        points[BL] = (0.0, ymax);

        let mut lookup = vec![u8::MAX; (CANVAS_WIDTH * CANVAS_HEIGHT) as usize];
        for y in 0..CANVAS_HEIGHT {
            for x in 0..CANVAS_WIDTH {
                let (px, py) = (x as f64, y as f64);
                let tri = TRIANGLES.iter().position(|t| {
                    let [a, b, c] = t.map(|i| points[i]);
                    barycentric(a, b, c, (px, py))
                        .is_some_and(|(u, v, w)| u >= -1e-9 && v >= -1e-9 && w >= -1e-9)
                });
                lookup[(y * CANVAS_WIDTH + x) as usize] =
                    tri.expect("triangulation covers the canvas") as u8;
            }
        }

        Self {
            id: TEMPLATE_ID,
            points,
            triangles: &TRIANGLES,
            body: BODY_OUTLINE,
            lookup,
        }
    }

    pub fn id(&self) -> &str {
        self.id
    }

    pub fn width(&self) -> u32 {
        CANVAS_WIDTH
    }

    pub fn height(&self) -> u32 {
        CANVAS_HEIGHT
    }

    pub fn canonical(&self, landmark: Landmark) -> (f64, f64) {
        self.points[landmark.index()]
    }

    /// All 14 control points (landmarks then corners).
    pub fn control_points(&self) -> &[(f64, f64); CONTROL_POINTS] {
        &self.points
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [self.points[TL], self.points[TR], self.points[BR], self.points[BL]]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        self.triangles
    }

    pub fn body(&self) -> Ellipse {
        self.body
    }

    #[inline]
    pub(crate) fn triangle_at(&self, x: u32, y: u32) -> usize {
        self.lookup[(y * CANVAS_WIDTH + x) as usize] as usize
    }

    /// The template landmarks as a keypoint set with the given confidence.
    pub fn keypoints(&self, conf: f64) -> KeypointSet {
        let points = Landmark::ALL.map(|l| {
            let (x, y) = self.canonical(l);
            Keypoint::new(x, y, conf)
        });
        KeypointSet::new(points).expect("template keypoints are valid")
    }
}

/// Twice the signed area of triangle `abc` (positive when counter-clockwise in
/// y-up coordinates, i.e. clockwise on screen).
#[inline]
pub(crate) fn signed_area2(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)
}

/// Barycentric weights of `p` in triangle `abc`, or `None` when degenerate.
#[inline]
pub(crate) fn barycentric(
    a: (f64, f64),
    b: (f64, f64),
    c: (f64, f64),
    p: (f64, f64),
) -> Option<(f64, f64, f64)> {
    let d = signed_area2(a, b, c);
    if d.abs() < 1e-12 {
        return None;
    }
    let u = signed_area2(p, b, c) / d;
    let v = signed_area2(a, p, c) / d;
    Some((u, v, 1.0 - u - v))
}
