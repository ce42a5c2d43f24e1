//! 2048-bit coat barcodes: pixelate-and-binarize encoding, Hamming distance,
//! bitwise majority and the canonical hex form.

use std::fmt;

use image::GrayImage;
use thiserror::Error;

use crate::raster::BitRaster;
use crate::template::{CANVAS_HEIGHT, CANVAS_WIDTH};

pub const BARCODE_BITS: usize = 2048;
pub const GRID_ROWS: u32 = 32;
pub const GRID_COLS: u32 = 64;
pub const CELL_WIDTH: u32 = CANVAS_WIDTH / GRID_COLS;
pub const CELL_HEIGHT: u32 = CANVAS_HEIGHT / GRID_ROWS;
const WORDS: usize = BARCODE_BITS / 64;
pub const HEX_LEN: usize = BARCODE_BITS / 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BarcodeError {
    #[error("empty mask: no body pixels to encode")]
    EmptyMask,
    #[error("aligned inputs must be {expected_w}x{expected_h}, got {w}x{h}")]
    CanvasSize {
        expected_w: u32,
        expected_h: u32,
        w: u32,
        h: u32,
    },
    #[error("bitwise mode of an empty barcode list")]
    EmptyInput,
    #[error("barcode hex must be {HEX_LEN} characters, got {0}")]
    HexLength(usize),
    #[error("invalid hex character {0:?}")]
    HexChar(char),
}

/// Fixed 2048-bit fingerprint. Bit `i` covers grid cell `(i / 64, i % 64)`,
/// row-major from the top-left; bit 0 is the most significant bit of word 0.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Barcode {
    words: [u64; WORDS],
}

impl Barcode {
    pub const ZERO: Barcode = Barcode { words: [0; WORDS] };

    pub fn from_words(words: [u64; WORDS]) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[u64; WORDS] {
        &self.words
    }

    /// Builds a barcode from `f(i)` for every bit index.
    pub fn from_fn(mut f: impl FnMut(usize) -> bool) -> Self {
        let mut words = [0u64; WORDS];
        for (i, slot) in (0..BARCODE_BITS).map(|i| (i, f(i))) {
            if slot {
                words[i / 64] |= 1 << (63 - i % 64);
            }
        }
        Self { words }
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        assert!(i < BARCODE_BITS, "bit index {i} out of range");
        self.words[i / 64] >> (63 - i % 64) & 1 == 1
    }

    #[inline]
    pub fn cell(&self, row: u32, col: u32) -> bool {
        self.bit((row * GRID_COLS + col) as usize)
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            words: self.words.map(|w| !w),
        }
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(HEX_LEN);
        for w in &self.words {
            s.push_str(&format!("{w:016x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Result<Self, BarcodeError> {
        let n = s.chars().count();
        if n != HEX_LEN {
            return Err(BarcodeError::HexLength(n));
        }
        let mut words = [0u64; WORDS];
        for (i, c) in s.chars().enumerate() {
            let nibble = c.to_digit(16).ok_or(BarcodeError::HexChar(c))? as u64;
            words[i / 16] |= nibble << (60 - 4 * (i % 16));
        }
        Ok(Self { words })
    }
}

impl fmt::Debug for Barcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Barcode({}..)", &self.to_hex()[..16])
    }
}

impl fmt::Display for Barcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Number of differing bit positions.
#[inline]
pub fn hamming(a: &Barcode, b: &Barcode) -> u32 {
    a.words
        .iter()
        .zip(b.words.iter())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Per-bit strict majority; exact ties resolve to 0.
pub fn bitwise_mode(codes: &[Barcode]) -> Result<Barcode, BarcodeError> {
    if codes.is_empty() {
        return Err(BarcodeError::EmptyInput);
    }
    let n = codes.len();
    let mut words = [0u64; WORDS];
    for (w, out) in words.iter_mut().enumerate() {
        let mut counts = [0u32; 64];
        for code in codes {
            let mut word = code.words[w];
            while word != 0 {
                let b = word.trailing_zeros();
                counts[b as usize] += 1;
                word &= word - 1;
            }
        }
        for (b, &c) in counts.iter().enumerate() {
            if 2 * c as usize > n {
                *out |= 1 << b;
            }
        }
    }
    Ok(Barcode { words })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeConfig {
    /// Minimum fraction of a cell inside the mask for the cell to carry pattern.
    pub min_coverage: f64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self { min_coverage: 0.25 }
    }
}

/// Otsu threshold over a histogram. `None` when fewer than two distinct values
/// occur. Ties across a plateau of equally good splits resolve to its midpoint.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<f64> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    let mut best = -1.0f64;
    let (mut first, mut last) = (0usize, 0usize);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        let tol = 1e-9 * best.abs().max(1.0);
        if between > best + tol {
            best = between;
            first = t;
            last = t;
        } else if (between - best).abs() <= tol {
            last = t;
        }
    }
    Some((first + last) as f64 / 2.0)
}

/// Pixelates an aligned, background-removed canvas into a barcode.
///
/// A cell's bit is 1 when at least `min_coverage` of it lies inside the mask
/// and its mean in-mask intensity exceeds the Otsu threshold of all in-mask
/// pixels. A uniform body (Otsu undefined) is white when its level is >= 128.
pub fn encode(image: &GrayImage, mask: &BitRaster, cfg: &EncodeConfig) -> Result<Barcode, BarcodeError> {
    for (w, h) in [(image.width(), image.height()), (mask.width(), mask.height())] {
        if (w, h) != (CANVAS_WIDTH, CANVAS_HEIGHT) {
            return Err(BarcodeError::CanvasSize {
                expected_w: CANVAS_WIDTH,
                expected_h: CANVAS_HEIGHT,
                w,
                h,
            });
        }
    }

    let pixels = image.as_raw();
    let inside = mask.as_bytes();
    let mut hist = [0u64; 256];
    for (&p, &m) in pixels.iter().zip(inside) {
        if m != 0 {
            hist[p as usize] += 1;
        }
    }
    if hist.iter().all(|&c| c == 0) {
        return Err(BarcodeError::EmptyMask);
    }
    let threshold = otsu_threshold(&hist);
    let uniform_white = threshold.is_none() && hist[128..].iter().any(|&c| c > 0);

    let cell_area = (CELL_WIDTH * CELL_HEIGHT) as f64;
    Ok(Barcode::from_fn(|i| {
        let row = i as u32 / GRID_COLS;
        let col = i as u32 % GRID_COLS;
        let (mut n, mut sum) = (0u32, 0u64);
        for y in row * CELL_HEIGHT..(row + 1) * CELL_HEIGHT {
            let base = (y * CANVAS_WIDTH) as usize;
            for x in col * CELL_WIDTH..(col + 1) * CELL_WIDTH {
                let idx = base + x as usize;
                if inside[idx] != 0 {
                    n += 1;
                    sum += pixels[idx] as u64;
                }
            }
        }
        if (n as f64) < cfg.min_coverage * cell_area || n == 0 {
            return false;
        }
        match threshold {
            Some(t) => sum as f64 / n as f64 > t,
            None => uniform_white,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas(f: impl Fn(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(CANVAS_WIDTH, CANVAS_HEIGHT, |x, y| image::Luma([f(x, y)]))
    }

    fn full_mask() -> BitRaster {
        BitRaster::filled(CANVAS_WIDTH, CANVAS_HEIGHT, true)
    }

    #[test]
    fn cells_are_eight_pixels_square() {
        assert_eq!((CELL_WIDTH, CELL_HEIGHT), (8, 8));
        assert_eq!((GRID_ROWS * GRID_COLS) as usize, BARCODE_BITS);
    }

    #[test]
    fn uniform_white_body_is_all_ones() {
        let b = encode(&canvas(|_, _| 255), &full_mask(), &EncodeConfig::default()).unwrap();
        assert_eq!(b.count_ones(), 2048);
        let b = encode(&canvas(|_, _| 128), &full_mask(), &EncodeConfig::default()).unwrap();
        assert_eq!(b.count_ones(), 2048);
        let b = encode(&canvas(|_, _| 127), &full_mask(), &EncodeConfig::default()).unwrap();
        assert_eq!(b.count_ones(), 0);
    }

    #[test]
    fn half_white_half_black() {
        let img = canvas(|x, _| if x < CANVAS_WIDTH / 2 { 255 } else { 0 });
        let b = encode(&img, &full_mask(), &EncodeConfig::default()).unwrap();
        for row in 0..GRID_ROWS {
            for col in 0..GRID_COLS {
                assert_eq!(b.cell(row, col), col < 32, "cell ({row}, {col})");
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mask = BitRaster::new(CANVAS_WIDTH, CANVAS_HEIGHT);
        assert_eq!(
            encode(&canvas(|_, _| 200), &mask, &EncodeConfig::default()),
            Err(BarcodeError::EmptyMask)
        );
    }

    #[test]
    fn sparsely_covered_cells_are_zero() {
        // only one row of each cell is inside the mask: 12.5% < 25%
        let mask = BitRaster::from_fn(CANVAS_WIDTH, CANVAS_HEIGHT, |_, y| y % 8 == 0);
        let b = encode(&canvas(|x, _| if x < 256 { 255 } else { 0 }), &mask, &EncodeConfig::default()).unwrap();
        assert_eq!(b.count_ones(), 0);
        // two rows per cell: exactly 25% qualifies
        let mask = BitRaster::from_fn(CANVAS_WIDTH, CANVAS_HEIGHT, |_, y| y % 8 < 2);
        let b = encode(&canvas(|x, _| if x < 256 { 255 } else { 0 }), &mask, &EncodeConfig::default()).unwrap();
        assert_eq!(b.count_ones(), 32 * 32);
    }

    #[test]
    fn wrong_canvas_size_is_rejected() {
        let img = GrayImage::new(10, 10);
        let mask = BitRaster::filled(10, 10, true);
        assert!(matches!(
            encode(&img, &mask, &EncodeConfig::default()),
            Err(BarcodeError::CanvasSize { .. })
        ));
    }

    #[test]
    fn otsu_splits_two_levels_at_plateau_midpoint() {
        let mut hist = [0u64; 256];
        hist[40] = 100;
        hist[200] = 50;
        assert_eq!(otsu_threshold(&hist), Some(119.5));
        let mut single = [0u64; 256];
        single[7] = 3;
        assert_eq!(otsu_threshold(&single), None);
    }

    #[test]
    fn hex_bit_order() {
        assert_eq!(Barcode::ZERO.to_hex(), "0".repeat(512));
        let b = Barcode::from_fn(|i| i == 0);
        let hex = b.to_hex();
        assert_eq!(&hex[..1], "8");
        assert!(hex[1..].chars().all(|c| c == '0'));
        assert_eq!(Barcode::from_hex(&hex).unwrap(), b);
    }

    #[test]
    fn hex_parse_errors() {
        assert_eq!(Barcode::from_hex("abc"), Err(BarcodeError::HexLength(3)));
        let bad = format!("{}g", "0".repeat(511));
        assert_eq!(Barcode::from_hex(&bad), Err(BarcodeError::HexChar('g')));
        assert!(Barcode::from_hex(&"F".repeat(512)).is_ok());
    }

    #[test]
    fn mode_of_nothing_is_an_error() {
        assert_eq!(bitwise_mode(&[]), Err(BarcodeError::EmptyInput));
    }

    #[test]
    fn mode_majority_on_bit_five() {
        let one = Barcode::from_fn(|i| i == 5);
        let m = bitwise_mode(&[one, one, Barcode::ZERO]).unwrap();
        assert!(m.bit(5));
        assert_eq!(m.count_ones(), 1);
        let tie = bitwise_mode(&[one, Barcode::ZERO]).unwrap();
        assert!(!tie.bit(5));
    }
}
