//! Binary masks: IoU, nearest-neighbor resizing, ground-truth noise, run-length
//! encoding and conversion to attention-blocking grids.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("mask extents differ: {0}x{1} vs {2}x{3}")]
    ExtentMismatch(usize, usize, usize, usize),
    #[error("{0} needs a non-empty mask")]
    EmptyMask(&'static str),
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error("malformed run-length encoding: {0}")]
    Rle(String),
}

/// H×W grid of booleans, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{} area={}", self.height, self.width, self.area())?;
        for y in 0..self.height {
            let row: String = (0..self.width)
                .map(|x| if self.get(y, x) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    /// Whether a point in pixel-center coordinates lies strictly inside the
    /// box's pixel area.
    pub fn strictly_contains(&self, y: f64, x: f64) -> bool {
        y > self.y0 as f64 - 0.5
            && y < self.y1 as f64 + 0.5
            && x > self.x0 as f64 - 0.5
            && x < self.x1 as f64 + 0.5
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask extents must be positive");
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let mut m = Self::new(height, width);
        m.bits.fill(true);
        m
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(MaskError::ExtentMismatch(height, width, bits.len(), 1));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(y, x);
            }
        }
        m
    }

    /// Pixels where `logits > 0`, i.e. `sigmoid(logit) > 0.5`.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Self {
        debug_assert_eq!(logits.len(), height * width);
        Self {
            height,
            width,
            bits: logits.iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Mask bits as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn check_extents(&self, other: &Self) -> Result<(), MaskError> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::ExtentMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                bb = Some(match bb {
                    None => BBox { y0: y, x0: x, y1: y, x1: x },
                    Some(b) => BBox {
                        y0: b.y0.min(y),
                        x0: b.x0.min(x),
                        y1: b.y1.max(y),
                        x1: b.x1.max(x),
                    },
                });
            }
        }
        bb
    }

    /// Mean pixel-center coordinate `(y, x)` of set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0usize, 0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y;
                    sx += x;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy as f64 / n as f64, sx as f64 / n as f64))
    }

    /// Number of differing pixels.
    pub fn hamming(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }

    /// Row-major run lengths alternating false/true, starting with a
    /// (possibly zero) false run.
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[usize]) -> Result<Self, MaskError> {
        let total: usize = runs.iter().sum();
        if total != height * width {
            return Err(MaskError::Rle(format!(
                "runs cover {total} pixels, expected {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        Self::from_bits(height, width, bits)
    }

    /// Text form `HxW:r0,r1,...`.
    pub fn to_rle_string(&self) -> String {
        let runs: Vec<String> = self.to_runs().iter().map(usize::to_string).collect();
        format!("{}x{}:{}", self.height, self.width, runs.join(","))
    }

    pub fn parse_rle(s: &str) -> Result<Self, MaskError> {
        let (dims, runs) = s
            .split_once(':')
            .ok_or_else(|| MaskError::Rle(format!("missing ':' in {s:?}")))?;
        let (h, w) = dims
            .split_once('x')
            .ok_or_else(|| MaskError::Rle(format!("bad extents {dims:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| MaskError::Rle(format!("{v:?}: {e}")))
        };
        let (h, w) = (parse(h)?, parse(w)?);
        let runs = runs.split(',').map(parse).collect::<Result<Vec<_>, _>>()?;
        Self::from_runs(h, w, &runs)
    }
}

/// `|a∩b| / |a∪b|`; 1 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.check_extents(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Source index sampled by the destination cell center.
fn nearest_source(dst: usize, dst_extent: usize, src_extent: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_extent as f64 / dst_extent as f64).floor() as usize;
    s.min(src_extent - 1)
}

/// Nearest-neighbor resampling at cell centers.
pub fn resize_nearest(m: &BinaryMask, h2: usize, w2: usize) -> BinaryMask {
    assert!(h2 > 0 && w2 > 0, "target extents must be positive");
    if h2 == m.height && w2 == m.width {
        return m.clone();
    }
    let ys: Vec<usize> = (0..h2).map(|y| nearest_source(y, h2, m.height)).collect();
    let xs: Vec<usize> = (0..w2).map(|x| nearest_source(x, w2, m.width)).collect();
    BinaryMask::from_fn(h2, w2, |y, x| m.get(ys[y], xs[x]))
}

/// Blocking grid confining attention to `m`. An empty mask blocks nothing,
/// so no attention row is left without support.
pub fn to_attention_block(m: &BinaryMask) -> Vec<bool> {
    if m.is_empty() {
        vec![false; m.bits.len()]
    } else {
        m.bits.iter().map(|b| !b).collect()
    }
}

/// Bounding box grown by 10% of its extent on each side, clipped to the image.
fn dilated_bbox(b: BBox, height: usize, width: usize) -> BBox {
    let my = (b.height() as f64 * 0.1).ceil() as usize;
    let mx = (b.width() as f64 * 0.1).ceil() as usize;
    BBox {
        y0: b.y0.saturating_sub(my),
        x0: b.x0.saturating_sub(mx),
        y1: (b.y1 + my).min(height - 1),
        x1: (b.x1 + mx).min(width - 1),
    }
}

/// Largest number of pixels point noise may flip.
pub fn max_point_flips(area: usize, ratio: f64) -> usize {
    (ratio * area as f64).floor() as usize
}

/// Flips `c ~ U{0..⌊ratio·area⌋}` distinct pixels drawn from the dilated
/// bounding box, in both directions.
pub fn point_noise(m: &BinaryMask, ratio: f64, seed: u64) -> Result<BinaryMask, MaskError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MaskError::InvalidNoise(format!("point ratio {ratio} outside [0,1]")));
    }
    let Some(bb) = m.bbox() else {
        return Ok(m.clone());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(0..=max_point_flips(m.area(), ratio));
    let region = dilated_bbox(bb, m.height, m.width);
    let (rh, rw) = (region.height(), region.width());
    let mut out = m.clone();
    for p in index::sample(&mut rng, rh * rw, count) {
        let (y, x) = (region.y0 + p / rw, region.x0 + p % rw);
        out.set(y, x, !m.get(y, x));
    }
    Ok(out)
}

/// Integer offsets `d` keeping `c + d` strictly inside `(lo − ½, hi + ½)`.
fn legal_offsets(c: f64, lo: usize, hi: usize) -> (i64, i64) {
    let min = (lo as f64 - 0.5 - c).floor() as i64 + 1;
    let max = (hi as f64 + 0.5 - c).ceil() as i64 - 1;
    (min, max)
}

fn translate(m: &BinaryMask, dy: i64, dx: i64) -> BinaryMask {
    let mut out = BinaryMask::new(m.height, m.width);
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.get(y, x) {
                continue;
            }
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < m.height && (nx as usize) < m.width {
                out.set(ny as usize, nx as usize, true);
            }
        }
    }
    out
}

/// Shift noise that also reports the drawn `(dy, dx)` offset.
pub fn shift_noise_with_offset(
    m: &BinaryMask,
    seed: u64,
) -> Result<(BinaryMask, (i64, i64)), MaskError> {
    let (bb, (cy, cx)) = m
        .bbox()
        .zip(m.centroid())
        .ok_or(MaskError::EmptyMask("shift_noise"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ylo, yhi) = legal_offsets(cy, bb.y0, bb.y1);
    let (xlo, xhi) = legal_offsets(cx, bb.x0, bb.x1);
    let dy = rng.gen_range(ylo..=yhi);
    let dx = rng.gen_range(xlo..=xhi);
    Ok((translate(m, dy, dx), (dy, dx)))
}

/// Translates the mask by a uniform integer offset that keeps its centroid
/// strictly inside the original bounding box. Pixels leaving the image are
/// dropped.
pub fn shift_noise(m: &BinaryMask, seed: u64) -> Result<BinaryMask, MaskError> {
    shift_noise_with_offset(m, seed).map(|(out, _)| out)
}

/// Rescales about the centroid by `r ~ U[lo, hi]` with nearest-neighbor
/// resampling, clipped to the image.
pub fn scale_noise(m: &BinaryMask, range: (f64, f64), seed: u64) -> Result<BinaryMask, MaskError> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi <= 2.0 && lo <= hi) {
        return Err(MaskError::InvalidNoise(format!(
            "scale range [{lo}, {hi}] not within (0, 2]"
        )));
    }
    let (cy, cx) = m.centroid().ok_or(MaskError::EmptyMask("scale_noise"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    Ok(scale_about(m, cy, cx, r))
}

fn scale_about(m: &BinaryMask, cy: f64, cx: f64, r: f64) -> BinaryMask {
    let sample = |v: usize, c: f64, extent: usize| -> Option<usize> {
        let s = (c + (v as f64 - c) / r + 0.5).floor();
        (s >= 0.0 && (s as usize) < extent).then_some(s as usize)
    };
    BinaryMask::from_fn(m.height, m.width, |y, x| {
        match (sample(y, cy, m.height), sample(x, cx, m.width)) {
            (Some(sy), Some(sx)) => m.get(sy, sx),
            _ => false,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    None,
    Point,
    Shift,
    Scale,
}

/// Noise recipe applied to ground-truth masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub point_ratio: f64,
    pub scale_range: (f64, f64),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            point_ratio: 0.2,
            scale_range: (0.8, 1.2),
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(0.0..=1.0).contains(&self.point_ratio) {
            return Err(MaskError::InvalidNoise(format!(
                "point ratio {} outside [0,1]",
                self.point_ratio
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi <= 2.0 && lo <= hi) {
            return Err(MaskError::InvalidNoise(format!(
                "scale range [{lo}, {hi}] not within (0, 2]"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, m: &BinaryMask, seed: u64) -> Result<BinaryMask, MaskError> {
        match self.kind {
            NoiseKind::None => Ok(m.clone()),
            NoiseKind::Point => point_noise(m, self.point_ratio, seed),
            NoiseKind::Shift => shift_noise(m, seed),
            NoiseKind::Scale => scale_noise(m, self.scale_range, seed),
        }
    }
}
