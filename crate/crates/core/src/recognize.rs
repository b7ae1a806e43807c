//! Plate recognition: patch extraction, prompts, captioning backends and
//! caption parsing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::font::{Font, Glyph};
use crate::geom::BBox;
use crate::raster::RgbImage;
use crate::segment::{label_components, Detection};
use crate::transport::{HttpTransport, TransportError};
use crate::videoio::Frame;

pub const PATCH_SIZE: usize = 448;
pub const WINDOW_SIZE: usize = 256;
pub const DEFAULT_PLATE_PATTERN: &str = r"\b[A-Z]{3}[-\s]?[0-9]{4}\b";
pub const NO_TEXT_CAPTION: &str = "no text detected";

/// Components smaller than this many pixels are treated as noise.
const MIN_GLYPH_AREA: usize = 8;
/// Template sampling density, samples per font unit.
const TEMPLATE_RES: usize = 4;
const SIZE_PENALTY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RecognizeError {
    #[error("detection box {0:?} has zero area")]
    DegenerateBBox(BBox),
    #[error("unknown prompt {0:?} (expected P1..P6)")]
    UnknownPrompt(String),
    #[error("unknown input strategy {0:?} (expected resize, center_crop or background_add)")]
    UnknownStrategy(String),
    #[error("invalid plate pattern: {0}")]
    InvalidPattern(#[from] regex::Error),
    #[error("recognizer timed out: {0}")]
    BackendTimeout(String),
    #[error("recognizer failed: {0}")]
    BackendError(String),
    #[error("no glyphs found in the patch")]
    NoGlyphs,
    #[error("no plate string in caption {0:?}")]
    NoPlateFound(String),
    #[error("no frame of instance {0} yielded a plate string")]
    NoPlateInSequence(u32),
}

impl From<TransportError> for RecognizeError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout { .. } => RecognizeError::BackendTimeout(e.to_string()),
            other => RecognizeError::BackendError(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchStrategy {
    Resize,
    #[default]
    CenterCrop,
    BackgroundAdd,
}

impl PatchStrategy {
    pub const ALL: [PatchStrategy; 3] = [
        PatchStrategy::Resize,
        PatchStrategy::CenterCrop,
        PatchStrategy::BackgroundAdd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchStrategy::Resize => "resize",
            PatchStrategy::CenterCrop => "center_crop",
            PatchStrategy::BackgroundAdd => "background_add",
        }
    }
}

impl fmt::Display for PatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchStrategy {
    type Err = RecognizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PatchStrategy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| RecognizeError::UnknownStrategy(s.to_string()))
    }
}

/// Recognizer input: a 448×448 raster plus where the plate landed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatePatch {
    pixels: RgbImage,
    pub strategy: PatchStrategy,
    pub source_bbox: BBox,
    pub source_frame: usize,
    /// Detection box mapped into patch coordinates.
    pub plate_region: BBox,
    /// Patch pixels per source pixel along x and y.
    pub scale: (f64, f64),
}

impl PlatePatch {
    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }
}

/// Integer pixel span `[x0, x0+w) × [y0, y0+h)` covering the box.
fn pixel_span(b: &BBox) -> (i64, i64, usize, usize) {
    let x0 = b.x0.floor() as i64;
    let y0 = b.y0.floor() as i64;
    let x1 = b.x1.ceil() as i64;
    let y1 = b.y1.ceil() as i64;
    (x0, y0, (x1 - x0).max(1) as usize, (y1 - y0).max(1) as usize)
}

/// Left/top edge of a `WINDOW_SIZE` window centered on `c`, kept inside
/// `[0, extent)` when the frame is large enough.
fn window_origin(c: f64, extent: usize) -> i64 {
    let max = extent.saturating_sub(WINDOW_SIZE) as i64;
    (c.round() as i64 - (WINDOW_SIZE / 2) as i64).clamp(0, max)
}

pub fn center_crop_window(centroid: crate::geom::Point, frame_dims: (usize, usize)) -> (i64, i64) {
    (
        window_origin(centroid.x, frame_dims.0),
        window_origin(centroid.y, frame_dims.1),
    )
}

pub fn extract_patch(
    frame: &Frame,
    det: &Detection,
    strategy: PatchStrategy,
) -> Result<PlatePatch, RecognizeError> {
    let b = det.bbox;
    if !(b.area() > 0.0) || !b.is_well_formed() {
        return Err(RecognizeError::DegenerateBBox(b));
    }
    let (bx, by, bw, bh) = pixel_span(&b);
    let map = |ox: f64, oy: f64, s: (f64, f64)| {
        BBox::new(
            (b.x0 - ox) * s.0,
            (b.y0 - oy) * s.1,
            (b.x1 - ox) * s.0,
            (b.y1 - oy) * s.1,
        )
    };
    let (pixels, region, scale) = match strategy {
        PatchStrategy::Resize => {
            let crop = frame.image.crop(bx, by, bw, bh);
            let s = (PATCH_SIZE as f64 / bw as f64, PATCH_SIZE as f64 / bh as f64);
            (
                crop.resize_bilinear(PATCH_SIZE, PATCH_SIZE),
                map(bx as f64, by as f64, s),
                s,
            )
        }
        PatchStrategy::CenterCrop => {
            let c = det
                .mask
                .as_ref()
                .and_then(|m| m.centroid())
                .unwrap_or_else(|| b.center());
            let (wx, wy) = center_crop_window(c, (frame.width(), frame.height()));
            let window = frame.image.crop(wx, wy, WINDOW_SIZE, WINDOW_SIZE);
            let k = PATCH_SIZE as f64 / WINDOW_SIZE as f64;
            (
                window.resize_bilinear(PATCH_SIZE, PATCH_SIZE),
                map(wx as f64, wy as f64, (k, k)),
                (k, k),
            )
        }
        PatchStrategy::BackgroundAdd => {
            let mut crop = frame.image.crop(bx, by, bw, bh);
            let mut shrink = 1.0;
            if bw.max(bh) > WINDOW_SIZE {
                shrink = WINDOW_SIZE as f64 / bw.max(bh) as f64;
                let nw = ((bw as f64 * shrink).round() as usize).clamp(1, WINDOW_SIZE);
                let nh = ((bh as f64 * shrink).round() as usize).clamp(1, WINDOW_SIZE);
                crop = crop.resize_bilinear(nw, nh);
            }
            let (ox, oy) = (
                (WINDOW_SIZE - crop.width()) / 2,
                (WINDOW_SIZE - crop.height()) / 2,
            );
            let mut canvas = RgbImage::new(WINDOW_SIZE, WINDOW_SIZE);
            canvas.paste(&crop, ox as i64, oy as i64);
            let k = PATCH_SIZE as f64 / WINDOW_SIZE as f64;
            let s = (k * shrink, k * shrink);
            let region = BBox::new(
                (ox as f64 + (b.x0 - bx as f64) * shrink) * k,
                (oy as f64 + (b.y0 - by as f64) * shrink) * k,
                (ox as f64 + (b.x1 - bx as f64) * shrink) * k,
                (oy as f64 + (b.y1 - by as f64) * shrink) * k,
            );
            (canvas.resize_bilinear(PATCH_SIZE, PATCH_SIZE), region, s)
        }
    };
    Ok(PlatePatch {
        pixels,
        strategy,
        source_bbox: b,
        source_frame: frame.index,
        plate_region: region,
        scale,
    })
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum PromptId {
    P1,
    P2,
    P3,
    P4,
    P5,
    #[default]
    P6,
}

impl PromptId {
    pub const ALL: [PromptId; 6] = [
        PromptId::P1,
        PromptId::P2,
        PromptId::P3,
        PromptId::P4,
        PromptId::P5,
        PromptId::P6,
    ];

    pub fn text(self) -> &'static str {
        match self {
            PromptId::P1 => "What is the license plate number?",
            PromptId::P2 => "What is the text on this licesne plate?",
            PromptId::P3 => "Please describe the texts in this image step-by-step, especially the license plate.",
            PromptId::P4 => {
                "The license plates are always located at the bottom of vehicle. Please describe the texts in this image step-by-step, especially the license plate."
            }
            PromptId::P5 => {
                "Please describe the texts in this image detailly, especially the license plate. When you read the texts, please read them step-by-step and consider the locations of all characters."
            }
            PromptId::P6 => {
                "Please describe the texts in this image detailly, especially the license plate. The license plates are always located at the bottom of vehicle. When you read the texts, please read them step-by-step and consider the locations of all characters."
            }
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PromptId {
    type Err = RecognizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptId::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| RecognizeError::UnknownPrompt(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub text: &'static str,
}

pub fn get_prompt(id: &str) -> Result<PromptTemplate, RecognizeError> {
    let id: PromptId = id.parse()?;
    Ok(PromptTemplate {
        id,
        text: id.text(),
    })
}

impl From<PromptId> for PromptTemplate {
    fn from(id: PromptId) -> Self {
        PromptTemplate {
            id,
            text: id.text(),
        }
    }
}

pub trait RecognizerBackend: Send + Sync {
    /// Free-text caption of the patch under the given prompt.
    fn caption(
        &self,
        patch: &PlatePatch,
        prompt: &PromptTemplate,
    ) -> Result<String, RecognizeError>;

    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Template-matching OCR over the built-in font; the prompt text is ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinRecognizer {
    pub font: Font,
}

impl RecognizerBackend for BuiltinRecognizer {
    fn caption(
        &self,
        patch: &PlatePatch,
        _prompt: &PromptTemplate,
    ) -> Result<String, RecognizeError> {
        match builtin_ocr(patch, &self.font) {
            Ok(text) => Ok(format!("The license plate reads {text}.")),
            Err(RecognizeError::NoGlyphs) => Ok(NO_TEXT_CAPTION.to_string()),
            Err(e) => Err(e),
        }
    }
}

/// Otsu threshold of a 256-bin histogram; `None` when all values are equal.
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(f64, u8)> = None;
    for (t, &count) in hist.iter().enumerate().take(255) {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, t as u8));
        }
    }
    best.map(|(_, t)| t)
}

struct GlyphBlob {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    labels: Vec<usize>,
}

fn classify(
    blob: &GlyphBlob,
    fg_label: &[Option<usize>],
    roi_w: usize,
    unit: (f64, f64),
    font: &Font,
) -> char {
    let (bw, bh) = ((blob.x1 - blob.x0) as f64, (blob.y1 - blob.y0) as f64);
    let inside =
        |x: usize, y: usize| fg_label[y * roi_w + x].is_some_and(|l| blob.labels.contains(&l));
    let mut best: Option<(f64, char)> = None;
    for g in font.glyphs() {
        let score = match_glyph(g, blob, bw, bh, unit, &inside);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, g.ch));
        }
    }
    best.map(|(_, c)| c).unwrap_or('?')
}

fn match_glyph(
    g: &Glyph,
    blob: &GlyphBlob,
    bw: f64,
    bh: f64,
    unit: (f64, f64),
    inside: &dyn Fn(usize, usize) -> bool,
) -> f64 {
    let (c0, r0, c1, r1) = g.ink_bounds();
    let (iw, ih) = (c1 - c0, r1 - r0);
    let (gw, gh) = (iw * TEMPLATE_RES, ih * TEMPLATE_RES);
    let mut sample = Vec::with_capacity(gw * gh);
    let mut tmpl = Vec::with_capacity(gw * gh);
    for v in 0..gh {
        for u in 0..gw {
            let px = blob.x0 + (((u as f64 + 0.5) / gw as f64) * bw) as usize;
            let py = blob.y0 + (((v as f64 + 0.5) / gh as f64) * bh) as usize;
            sample.push(if inside(px, py) { 1.0 } else { 0.0 });
            tmpl.push(if g.ink(c0 + u / TEMPLATE_RES, r0 + v / TEMPLATE_RES) {
                1.0
            } else {
                0.0
            });
        }
    }
    let shape = ncc_or_agreement(&sample, &tmpl);
    let size = (bw / (iw as f64 * unit.0)).ln().abs() + (bh / (ih as f64 * unit.1)).ln().abs();
    shape - SIZE_PENALTY * size
}

/// NCC of two equal-length vectors; when either is constant, agreement
/// rescaled to `[-1, 1]`.
fn ncc_or_agreement(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa < 1e-12 || sbb < 1e-12 {
        let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
        return 2.0 * agree - 1.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Reads the glyphs inside the patch's plate region, left to right.
///
/// The region is binarized with Otsu's threshold (the minority class is ink),
/// split into 8-connected components, and components that touch the region
/// border or are tiny are dropped. Pieces whose column ranges overlap are
/// merged into one glyph. Each glyph is classified by NCC against the font
/// templates, penalized by how far its size is from the template's size at the
/// plate's estimated font unit.
pub fn builtin_ocr(patch: &PlatePatch, font: &Font) -> Result<String, RecognizeError> {
    let img = &patch.pixels;
    let r = patch.plate_region;
    let x0 = (r.x0.floor().max(0.0) as usize).min(img.width());
    let y0 = (r.y0.floor().max(0.0) as usize).min(img.height());
    let x1 = (r.x1.ceil().max(0.0) as usize).min(img.width());
    let y1 = (r.y1.ceil().max(0.0) as usize).min(img.height());
    if x1 <= x0 + 2 || y1 <= y0 + 2 {
        return Err(RecognizeError::NoGlyphs);
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let gray: Vec<u8> = (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = img.get(x, y);
            crate::raster::luma(p[0], p[1], p[2])
        })
        .collect();
    let t = otsu_threshold(&gray).ok_or(RecognizeError::NoGlyphs)?;
    let mut fg: Vec<bool> = gray.iter().map(|&v| v <= t).collect();
    if fg.iter().filter(|&&b| b).count() * 2 > fg.len() {
        fg.iter_mut().for_each(|b| *b = !*b);
    }
    let labels = label_components(&fg, w, h);

    let n_labels = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0usize); n_labels];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            let (x, y) = (i % w, i / w);
            let b = &mut boxes[l];
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x + 1);
            b.3 = b.3.max(y + 1);
            b.4 += 1;
        }
    }
    let mut kept: Vec<(usize, (usize, usize, usize, usize))> = boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.4 >= MIN_GLYPH_AREA && b.0 > 0 && b.1 > 0 && b.2 < w && b.3 < h)
        .map(|(l, b)| (l, (b.0, b.1, b.2, b.3)))
        .collect();
    kept.sort_by_key(|&(l, b)| (b.0, l));

    let mut blobs: Vec<GlyphBlob> = Vec::new();
    for (l, (bx0, by0, bx1, by1)) in kept {
        match blobs.last_mut() {
            Some(last) if bx0 <= last.x1 + 1 => {
                last.x1 = last.x1.max(bx1);
                last.y0 = last.y0.min(by0);
                last.y1 = last.y1.max(by1);
                last.labels.push(l);
            }
            _ => blobs.push(GlyphBlob {
                x0: bx0,
                y0: by0,
                x1: bx1,
                y1: by1,
                labels: vec![l],
            }),
        }
    }
    let tallest = blobs
        .iter()
        .map(|b| b.y1 - b.y0)
        .max()
        .ok_or(RecognizeError::NoGlyphs)?;
    let unit_y = tallest as f64 / crate::font::GLYPH_H as f64;
    let unit_x = unit_y * patch.scale.0 / patch.scale.1;
    // fragments far below glyph scale in both directions are noise
    blobs.retain(|b| (b.y1 - b.y0) as f64 >= 0.5 * unit_y || (b.x1 - b.x0) as f64 >= 0.5 * unit_x);
    let text: String = blobs
        .iter()
        .map(|b| classify(b, &labels, w, (unit_x, unit_y), font))
        .collect();
    if text.is_empty() {
        return Err(RecognizeError::NoGlyphs);
    }
    Ok(text)
}

#[derive(Debug, Clone)]
pub struct ExternalRecognizer {
    transport: std::sync::Arc<HttpTransport>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RecognizeRequest {
    pub image_ppm_b64: String,
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RecognizeReply {
    pub text: String,
}

impl ExternalRecognizer {
    pub fn new(
        endpoint: &str,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Result<Self, RecognizeError> {
        Ok(Self {
            transport: std::sync::Arc::new(HttpTransport::new(endpoint, timeout, max_in_flight)?),
        })
    }
}

impl RecognizerBackend for ExternalRecognizer {
    fn caption(
        &self,
        patch: &PlatePatch,
        prompt: &PromptTemplate,
    ) -> Result<String, RecognizeError> {
        let req = RecognizeRequest {
            image_ppm_b64: base64::engine::general_purpose::STANDARD
                .encode(patch.pixels.to_ppm_bytes()),
            prompt: prompt.text.to_string(),
        };
        let reply: RecognizeReply = self.transport.post_json("/recognize", &req)?;
        if reply.text.trim().is_empty() {
            return Err(RecognizeError::BackendError("empty caption".into()));
        }
        Ok(reply.text)
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.transport.max_in_flight())
    }
}

/// Plate-string extractor: first regex match in the uppercased caption with
/// hyphens and whitespace removed.
#[derive(Debug, Clone)]
pub struct PlatePattern {
    re: Regex,
}

impl PlatePattern {
    pub fn new(pattern: &str) -> Result<Self, RecognizeError> {
        Ok(Self {
            re: Regex::new(pattern)?,
        })
    }

    pub fn as_str(&self) -> &str {
        self.re.as_str()
    }

    pub fn parse(&self, caption: &str) -> Result<String, RecognizeError> {
        let upper = caption.to_uppercase();
        let m = self
            .re
            .find(&upper)
            .ok_or_else(|| RecognizeError::NoPlateFound(caption.to_string()))?;
        Ok(m.as_str()
            .chars()
            .filter(|c| *c != '-' && !c.is_whitespace())
            .collect())
    }
}

impl Default for PlatePattern {
    fn default() -> Self {
        Self::new(DEFAULT_PLATE_PATTERN).expect("default pattern compiles")
    }
}

pub fn parse_plate(caption: &str, pattern: &PlatePattern) -> Result<String, RecognizeError> {
    pattern.parse(caption)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    #[serde(rename = "frame")]
    pub frame_index: usize,
    #[serde(rename = "instance")]
    pub instance_id: u32,
    pub caption: String,
    pub plate: Option<String>,
    #[serde(rename = "prompt")]
    pub prompt_id: PromptId,
    /// Confidence of the detection the patch came from.
    pub confidence: f64,
}

/// Patch → caption → parsed plate for one detection. Backend failures are
/// errors; a caption without a plate string yields `plate: None`.
pub fn recognize_detection(
    frame: &Frame,
    det: &Detection,
    strategy: PatchStrategy,
    prompt: &PromptTemplate,
    pattern: &PlatePattern,
    backend: &dyn RecognizerBackend,
) -> Result<RecognitionResult, RecognizeError> {
    let patch = extract_patch(frame, det, strategy)?;
    let caption = backend.caption(&patch, prompt)?;
    Ok(RecognitionResult {
        frame_index: det.frame_index,
        instance_id: det.instance_id,
        plate: pattern.parse(&caption).ok(),
        caption,
        prompt_id: prompt.id,
        confidence: det.confidence,
    })
}

/// Majority vote over the parsed per-frame plates of one instance. Ties go to
/// the higher mean detection confidence, then to the lexicographically
/// smaller string.
pub fn recognize_sequence(
    results: &[RecognitionResult],
    instance_id: u32,
) -> Result<String, RecognizeError> {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in results.iter().filter(|r| r.instance_id == instance_id) {
        if let Some(p) = &r.plate {
            let e = tally.entry(p.as_str()).or_default();
            e.0 += 1;
            e.1 += r.confidence;
        }
    }
    let mut best: Option<(&str, usize, f64)> = None;
    for (plate, (count, sum)) in tally {
        let mean = sum / count as f64;
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mean > bm),
        };
        if better {
            best = Some((plate, count, mean));
        }
    }
    best.map(|(p, _, _)| p.to_string())
        .ok_or(RecognizeError::NoPlateInSequence(instance_id))
}
