//! Point-prompted segmentation: prompt points → object mask → detection box.
//!
//! The built-in backend grows one region per prompt pixel (8-connected, admitting
//! pixels within `tau` RGB distance of the region's running mean), unions the
//! regions, keeps the connected component that holds the most prompts and fills
//! its enclosed holes so glyphs printed on a plate become part of the plate mask.

use std::collections::VecDeque;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BBox, Point};
use crate::raster::GrayImage;
use crate::transport::{HttpTransport, TransportError};
use crate::videoio::Frame;

pub const DEFAULT_TAU: f64 = 30.0;
pub const DEFAULT_AREA_CAP: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no admissible region at the prompt points")]
    EmptyMask,
    #[error("region covers {area} px, above the cap of {cap} px")]
    AreaCapExceeded { area: usize, cap: usize },
    #[error("no visible prompt points")]
    NoPrompts,
    #[error("prompt ({x}, {y}) lies outside the frame")]
    PromptOutOfBounds { x: f64, y: f64 },
    #[error("invalid segmenter parameter: {0}")]
    InvalidParameter(String),
    #[error("segmenter backend failure: {0}")]
    Backend(#[from] TransportError),
}

/// Binary mask aligned with a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    pub score: f64,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            score: 0.0,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>, score: f64) -> Option<Self> {
        (bits.len() == width * height && (0.0..=1.0).contains(&score)).then_some(Self {
            width,
            height,
            bits,
            score,
        })
    }

    /// Mask with exactly the listed pixels set.
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Mask::empty(width, height);
        for &(x, y) in pixels {
            m.set(x, y, true);
        }
        m.score = 1.0;
        m
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.in_bounds(self.width, self.height) && {
            let (x, y) = p.to_pixel(self.width, self.height);
            self.get(x, y)
        }
    }

    /// Mean foreground coordinate.
    pub fn centroid(&self) -> Option<Point> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (x, y) in self.pixels() {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64))
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 0/255 grayscale rendering, for P5 dumps.
    pub fn to_gray(&self) -> GrayImage {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width, self.height, data).expect("dimensions match")
    }

    pub fn from_gray(img: &GrayImage, score: f64) -> Self {
        let bits = img.as_raw().iter().map(|&v| v >= 128).collect();
        Self {
            width: img.width(),
            height: img.height(),
            bits,
            score: score.clamp(0.0, 1.0),
        }
    }
}

/// Tight half-open bounds of the foreground.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox, SegmentError> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (x, y) in mask.pixels() {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x0 == usize::MAX {
        return Err(SegmentError::EmptyMask);
    }
    Ok(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_index: usize,
    pub instance_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
    pub mask: Option<Mask>,
}

pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, frame: &Frame, prompts: &[Point]) -> Result<Mask, SegmentError>;

    /// Upper bound on concurrent `segment` calls; `None` means unbounded.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinSegmenter {
    pub tau: f64,
    pub area_cap: f64,
}

impl Default for BuiltinSegmenter {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            area_cap: DEFAULT_AREA_CAP,
        }
    }
}

const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

impl BuiltinSegmenter {
    pub fn new(tau: f64, area_cap: f64) -> Result<Self, SegmentError> {
        if !(tau > 0.0) {
            return Err(SegmentError::InvalidParameter(format!(
                "tau must be > 0, got {tau}"
            )));
        }
        if !(area_cap > 0.0 && area_cap <= 1.0) {
            return Err(SegmentError::InvalidParameter(format!(
                "area_cap must be in (0, 1], got {area_cap}"
            )));
        }
        Ok(Self { tau, area_cap })
    }

    fn cap_pixels(&self, frame: &Frame) -> usize {
        (self.area_cap * (frame.width() * frame.height()) as f64).floor() as usize
    }

    /// Grows one region from `seed`; `None` when it exceeds `cap` pixels.
    fn grow(&self, frame: &Frame, seed: usize, cap: usize) -> Option<Vec<usize>> {
        let (w, h) = (frame.width(), frame.height());
        let px = frame.pixels();
        let color = |i: usize| [px[3 * i] as f64, px[3 * i + 1] as f64, px[3 * i + 2] as f64];
        let tau2 = self.tau * self.tau;

        let mut in_region = vec![false; w * h];
        let mut region = vec![seed];
        let mut queue = VecDeque::from([seed]);
        in_region[seed] = true;
        let mut sum = color(seed);

        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if in_region[j] {
                    continue;
                }
                let n = region.len() as f64;
                let c = color(j);
                let d2: f64 = (0..3).map(|k| (c[k] - sum[k] / n).powi(2)).sum();
                if d2 < tau2 {
                    in_region[j] = true;
                    region.push(j);
                    if region.len() > cap {
                        return None;
                    }
                    for k in 0..3 {
                        sum[k] += c[k];
                    }
                    queue.push_back(j);
                }
            }
        }
        Some(region)
    }
}

impl SegmenterBackend for BuiltinSegmenter {
    fn segment(&self, frame: &Frame, prompts: &[Point]) -> Result<Mask, SegmentError> {
        if prompts.is_empty() {
            return Err(SegmentError::NoPrompts);
        }
        let (w, h) = (frame.width(), frame.height());
        if let Some(p) = prompts.iter().find(|p| !p.in_bounds(w, h)) {
            return Err(SegmentError::PromptOutOfBounds { x: p.x, y: p.y });
        }
        let cap = self.cap_pixels(frame);
        let prompt_px: Vec<usize> = prompts
            .iter()
            .map(|p| {
                let (x, y) = p.to_pixel(w, h);
                y * w + x
            })
            .collect();
        let mut seeds = prompt_px.clone();
        seeds.sort_unstable();
        seeds.dedup();

        let mut union = vec![false; w * h];
        let mut grown = 0;
        // Every seed grows independently, even when already covered, so the
        // union does not depend on prompt order.
        for &seed in &seeds {
            if let Some(region) = self.grow(frame, seed, cap) {
                grown += 1;
                for i in region {
                    union[i] = true;
                }
            }
        }
        if grown == 0 {
            return Err(SegmentError::AreaCapExceeded { area: cap + 1, cap });
        }

        let labels = label_components(&union, w, h);
        let n_labels = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut prompt_hits = vec![0usize; n_labels];
        for &i in &prompt_px {
            if let Some(l) = labels[i] {
                prompt_hits[l] += 1;
            }
        }
        let mut areas = vec![0usize; n_labels];
        let mut first_px = vec![usize::MAX; n_labels];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                areas[l] += 1;
                first_px[l] = first_px[l].min(i);
            }
        }
        let best = (0..n_labels)
            .max_by(|&a, &b| {
                prompt_hits[a]
                    .cmp(&prompt_hits[b])
                    .then(areas[a].cmp(&areas[b]))
                    .then(first_px[b].cmp(&first_px[a]))
            })
            .ok_or(SegmentError::EmptyMask)?;

        let mut bits: Vec<bool> = labels.iter().map(|l| *l == Some(best)).collect();
        fill_holes(&mut bits, w, h);
        let area = bits.iter().filter(|&&b| b).count();
        if area == 0 {
            return Err(SegmentError::EmptyMask);
        }
        if area > cap {
            return Err(SegmentError::AreaCapExceeded { area, cap });
        }
        let inside = prompt_px.iter().filter(|&&i| bits[i]).count();
        let score = inside as f64 / prompt_px.len() as f64;
        Ok(Mask {
            width: w,
            height: h,
            bits,
            score,
        })
    }
}

/// 8-connected component labels; `None` for background.
pub(crate) fn label_components(fg: &[bool], w: usize, h: usize) -> Vec<Option<usize>> {
    let mut labels = vec![None; w * h];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !fg[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if fg[j] && labels[j].is_none() {
                    labels[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Sets every background pixel that is not 4-connected to the raster border.
pub(crate) fn fill_holes(bits: &mut [bool], w: usize, h: usize) {
    let mut outside = vec![false; w * h];
    let mut stack = Vec::new();
    let seed = |i: usize, stack: &mut Vec<usize>, outside: &mut Vec<bool>| {
        if !bits[i] && !outside[i] {
            outside[i] = true;
            stack.push(i);
        }
    };
    for x in 0..w {
        seed(x, &mut stack, &mut outside);
        seed((h - 1) * w + x, &mut stack, &mut outside);
    }
    for y in 0..h {
        seed(y * w, &mut stack, &mut outside);
        seed(y * w + w - 1, &mut stack, &mut outside);
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !bits[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    for (b, o) in bits.iter_mut().zip(outside) {
        if !o {
            *b = true;
        }
    }
}

/// Segments one frame from the visible trajectory points of one instance.
///
/// Any failure is returned to the caller, which records the frame as a miss.
pub fn detect_frame(
    frame: &Frame,
    instance_id: u32,
    prompts: &[Point],
    backend: &dyn SegmenterBackend,
) -> Result<Detection, SegmentError> {
    if prompts.is_empty() {
        return Err(SegmentError::NoPrompts);
    }
    let mask = backend.segment(frame, prompts)?;
    let bbox = mask_to_bbox(&mask)?;
    Ok(Detection {
        frame_index: frame.index,
        instance_id,
        bbox,
        confidence: mask.score,
        mask: Some(mask),
    })
}

#[derive(Debug, Serialize)]
struct SegmentRequest<'a> {
    image_ppm_b64: String,
    points: &'a [[f64; 2]],
}

#[derive(Debug, Deserialize)]
struct SegmentReply {
    mask_pgm_b64: String,
    score: f64,
}

/// Segmenter served over HTTP: `POST /segment` with
/// `{image_ppm_b64, points: [[x, y], ...]}` → `{mask_pgm_b64, score}`.
#[derive(Debug)]
pub struct ExternalSegmenter {
    transport: HttpTransport,
}

impl ExternalSegmenter {
    pub fn new(
        endpoint: &str,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Result<Self, SegmentError> {
        Ok(Self {
            transport: HttpTransport::new(endpoint, timeout, max_in_flight)?,
        })
    }
}

impl SegmenterBackend for ExternalSegmenter {
    fn segment(&self, frame: &Frame, prompts: &[Point]) -> Result<Mask, SegmentError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let points: Vec<[f64; 2]> = prompts.iter().map(|p| [p.x, p.y]).collect();
        let req = SegmentRequest {
            image_ppm_b64: b64.encode(frame.image.to_ppm_bytes()),
            points: &points,
        };
        let reply: SegmentReply = self.transport.post_json("/segment", &req)?;
        let invalid = |msg: String| {
            SegmentError::Backend(TransportError::InvalidReply {
                url: self.transport.base().to_string(),
                msg,
            })
        };
        let bytes = b64
            .decode(reply.mask_pgm_b64)
            .map_err(|e| invalid(e.to_string()))?;
        let gray = GrayImage::from_pgm_bytes(&bytes).map_err(|e| invalid(e.to_string()))?;
        if (gray.width(), gray.height()) != (frame.width(), frame.height()) {
            return Err(invalid("mask dimensions differ from the frame".into()));
        }
        let mask = Mask::from_gray(&gray, reply.score);
        if mask.area() == 0 {
            return Err(SegmentError::EmptyMask);
        }
        Ok(mask)
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.transport.max_in_flight())
    }
}
