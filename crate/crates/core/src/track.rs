//! Point tracking across a sequence and forward/backward trajectory refinement.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point;
use crate::par::Exec;
use crate::transport::{HttpTransport, TransportError};
use crate::videoio::{Frame, VideoSequence};

pub const DEFAULT_PATCH_RADIUS: usize = 7;
pub const DEFAULT_SEARCH_RADIUS: usize = 20;
pub const DEFAULT_DROP_THRESHOLD_PX: f64 = 8.0;
pub const DEFAULT_LOST_SCORE: f64 = 0.5;
pub const DEFAULT_LOST_FRAMES: usize = 3;
pub const DEFAULT_MOTION_WEIGHT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("patch around ({x:.1}, {y:.1}) has zero variance")]
    DegeneratePatch { x: f64, y: f64 },
    #[error("patch radius {patch_radius} does not fit a {width}x{height} frame")]
    PatchTooLarge {
        patch_radius: usize,
        width: usize,
        height: usize,
    },
    #[error("seed ({x}, {y}) lies outside the frame")]
    SeedOutOfBounds { x: f64, y: f64 },
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("backend does not support backward tracking")]
    BackwardUnsupported,
    #[error("tracker backend failure: {0}")]
    BackendFailure(String),
}

impl From<TransportError> for TrackError {
    fn from(e: TransportError) -> Self {
        TrackError::BackendFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Positions and visibility of one tracked point over every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub instance_id: u32,
    pub point_index: usize,
    pub positions: Vec<Point>,
    pub visible: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

pub trait TrackerBackend: Send + Sync {
    /// Tracks `seeds` through `video`. For [`Direction::Backward`] the seeds are
    /// positions in the last frame and frames are visited in reverse; the
    /// returned trajectories are still indexed by frame number.
    fn track(
        &self,
        video: &VideoSequence,
        instance_id: u32,
        seeds: &[Point],
        direction: Direction,
    ) -> Result<Vec<Trajectory>, TrackError>;

    fn supports_backward(&self) -> bool {
        true
    }
}

/// Single-channel float plane used for matching.
#[derive(Debug, Clone)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn from_frame(frame: &Frame) -> Self {
        let data = frame
            .pixels()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect();
        Self {
            width: frame.width(),
            height: frame.height(),
            data,
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Finds `pos` from `prev` in `next` by normalized cross-correlation.
///
/// Returns the new position and the peak NCC score.
pub fn ncc_track_point(
    prev: &Frame,
    next: &Frame,
    pos: Point,
    patch_radius: usize,
    search_radius: usize,
) -> Result<(Point, f64), TrackError> {
    ncc_match(
        &Plane::from_frame(prev),
        &Plane::from_frame(next),
        pos,
        patch_radius,
        search_radius,
    )
}

const EXACT_MATCH_EPS: f64 = 1e-9;

/// Expected displacement for the next match and how strongly to favour it.
///
/// Candidates are ranked by `ncc - weight * |d - expected| / search_radius`,
/// which separates near-equal peaks (repeated glyphs) without overriding a
/// clearly better match. The reported score is still the plain NCC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPrior {
    pub dx: f64,
    pub dy: f64,
    pub weight: f64,
}

/// Pure NCC argmax over the search window.
pub fn ncc_match(
    prev: &Plane,
    next: &Plane,
    pos: Point,
    patch_radius: usize,
    search_radius: usize,
) -> Result<(Point, f64), TrackError> {
    ncc_match_with_prior(prev, next, pos, patch_radius, search_radius, None)
}

pub fn ncc_match_with_prior(
    prev: &Plane,
    next: &Plane,
    pos: Point,
    patch_radius: usize,
    search_radius: usize,
    prior: Option<MotionPrior>,
) -> Result<(Point, f64), TrackError> {
    let (w, h) = (prev.width, prev.height);
    let r = patch_radius as i64;
    let side = 2 * patch_radius + 1;
    if side > w || side > h {
        return Err(TrackError::PatchTooLarge {
            patch_radius,
            width: w,
            height: h,
        });
    }
    let cx = (pos.x.round() as i64).clamp(r, w as i64 - 1 - r);
    let cy = (pos.y.round() as i64).clamp(r, h as i64 - 1 - r);

    let n = (side * side) as f64;
    let mut tmpl = Vec::with_capacity(side * side);
    for y in (cy - r)..=(cy + r) {
        for x in (cx - r)..=(cx + r) {
            tmpl.push(prev.at(x as usize, y as usize) as f64);
        }
    }
    let mean = tmpl.iter().sum::<f64>() / n;
    for v in tmpl.iter_mut() {
        *v -= mean;
    }
    let t_norm = tmpl.iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm < 1e-6 {
        return Err(TrackError::DegeneratePatch { x: pos.x, y: pos.y });
    }

    // candidate centers must keep the window inside `next`
    let s = search_radius as i64;
    let dx_lo = (-s).max(r - cx);
    let dx_hi = s.min(next.width as i64 - 1 - r - cx);
    let dy_lo = (-s).max(r - cy);
    let dy_hi = s.min(next.height as i64 - 1 - r - cy);
    let nx = (dx_hi - dx_lo + 1) as usize;
    let ny = (dy_hi - dy_lo + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; nx * ny];

    for (iy, dy) in (dy_lo..=dy_hi).enumerate() {
        for (ix, dx) in (dx_lo..=dx_hi).enumerate() {
            let (ox, oy) = (cx + dx - r, cy + dy - r);
            let (mut sw, mut sww, mut stw) = (0.0f64, 0.0f64, 0.0f64);
            let mut k = 0;
            for y in oy..oy + side as i64 {
                let row = &next.data[y as usize * next.width + ox as usize..][..side];
                for &v in row {
                    let v = v as f64;
                    sw += v;
                    sww += v * v;
                    stw += tmpl[k] * v;
                    k += 1;
                }
            }
            let var = sww - sw * sw / n;
            scores[iy * nx + ix] = if var <= 1e-9 {
                0.0
            } else {
                stw / (t_norm * var.sqrt())
            };
        }
    }

    let rank = |i: usize| match prior {
        Some(m) if m.weight > 0.0 => {
            let dx = (dx_lo + (i % nx) as i64) as f64 - m.dx;
            let dy = (dy_lo + (i / nx) as i64) as f64 - m.dy;
            scores[i] - m.weight * dx.hypot(dy) / search_radius.max(1) as f64
        }
        _ => scores[i],
    };
    // first maximum in row-major order keeps ties deterministic
    let mut best = 0;
    let mut best_rank = f64::NEG_INFINITY;
    for i in 0..scores.len() {
        let v = rank(i);
        if v > best_rank {
            best = i;
            best_rank = v;
        }
    }
    let peak = scores[best];
    let (bx, by) = (best % nx, best / nx);
    // an exact integer match needs no sub-pixel correction; fitting a parabola
    // to an asymmetric neighbourhood would only add bias that accumulates
    let exact = peak >= 1.0 - EXACT_MATCH_EPS;
    let refine = |lo: Option<f64>, hi: Option<f64>| -> f64 {
        match (lo, hi) {
            (Some(l), Some(h)) if !exact => {
                let denom = l - 2.0 * peak + h;
                if denom < -1e-12 {
                    (0.5 * (l - h) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let sx = refine(
        (bx > 0).then(|| scores[by * nx + bx - 1]),
        (bx + 1 < nx).then(|| scores[by * nx + bx + 1]),
    );
    let sy = refine(
        (by > 0).then(|| scores[(by - 1) * nx + bx]),
        (by + 1 < ny).then(|| scores[(by + 1) * nx + bx]),
    );
    let dx = (dx_lo + bx as i64) as f64 + sx;
    let dy = (dy_lo + by as i64) as f64 + sy;
    Ok((Point::new(pos.x + dx, pos.y + dy), peak.clamp(-1.0, 1.0)))
}

/// Built-in frame-to-frame NCC tracker.
///
/// A point whose match score stays below `lost_score` for `lost_frames`
/// consecutive frames is declared lost: it becomes invisible and its position
/// freezes at the last confident estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NccTracker {
    pub patch_radius: usize,
    pub search_radius: usize,
    pub lost_score: f64,
    pub lost_frames: usize,
    /// Weight of the constant-velocity prior; 0 gives the pure NCC argmax.
    pub motion_weight: f64,
    pub exec: Exec,
}

impl Default for NccTracker {
    fn default() -> Self {
        Self {
            patch_radius: DEFAULT_PATCH_RADIUS,
            search_radius: DEFAULT_SEARCH_RADIUS,
            lost_score: DEFAULT_LOST_SCORE,
            lost_frames: DEFAULT_LOST_FRAMES,
            motion_weight: DEFAULT_MOTION_WEIGHT,
            exec: Exec::default(),
        }
    }
}

impl NccTracker {
    fn track_one(&self, planes: &[Plane], order: &[usize], seed: Point) -> (Vec<Point>, Vec<bool>) {
        let n = planes.len();
        let mut positions = vec![seed; n];
        let mut visible = vec![false; n];
        visible[order[0]] = true;
        let mut pos = seed;
        let mut last_confident = seed;
        let mut streak = 0;
        let mut lost = false;
        let mut velocity = (0.0, 0.0);
        for step in order.windows(2) {
            let (from, to) = (step[0], step[1]);
            if lost {
                positions[to] = last_confident;
                continue;
            }
            let prior = MotionPrior {
                dx: velocity.0,
                dy: velocity.1,
                weight: self.motion_weight,
            };
            match ncc_match_with_prior(
                &planes[from],
                &planes[to],
                pos,
                self.patch_radius,
                self.search_radius,
                Some(prior),
            ) {
                Ok((p, score)) => {
                    velocity = (p.x - pos.x, p.y - pos.y);
                    pos = p;
                    if score >= self.lost_score {
                        last_confident = p;
                        streak = 0;
                    } else {
                        streak += 1;
                    }
                }
                Err(_) => streak += 1,
            }
            if streak >= self.lost_frames {
                lost = true;
                positions[to] = last_confident;
            } else {
                positions[to] = pos;
                visible[to] = true;
            }
        }
        (positions, visible)
    }
}

impl TrackerBackend for NccTracker {
    fn track(
        &self,
        video: &VideoSequence,
        instance_id: u32,
        seeds: &[Point],
        direction: Direction,
    ) -> Result<Vec<Trajectory>, TrackError> {
        let (w, h) = video.dims();
        if let Some(p) = seeds.iter().find(|p| !p.in_bounds(w, h)) {
            return Err(TrackError::SeedOutOfBounds { x: p.x, y: p.y });
        }
        let side = 2 * self.patch_radius + 1;
        if side > w || side > h {
            return Err(TrackError::PatchTooLarge {
                patch_radius: self.patch_radius,
                width: w,
                height: h,
            });
        }
        let planes = self.exec.map(video.frames(), Plane::from_frame);
        let mut order: Vec<usize> = (0..video.len()).collect();
        if direction == Direction::Backward {
            order.reverse();
        }
        let tracks = self
            .exec
            .map(seeds, |&s| self.track_one(&planes, &order, s));
        Ok(tracks
            .into_iter()
            .enumerate()
            .map(|(i, (positions, visible))| Trajectory {
                instance_id,
                point_index: i,
                positions,
                visible,
            })
            .collect())
    }
}

/// Distance between the forward and backward passes at frame 0.
pub fn round_trip_error(forward: &Trajectory, backward: &Trajectory) -> Result<f64, TrackError> {
    if forward.len() != backward.len() {
        return Err(TrackError::LengthMismatch(forward.len(), backward.len()));
    }
    match (forward.positions.first(), backward.positions.first()) {
        (Some(a), Some(b)) => Ok(a.distance(*b)),
        _ => Ok(0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub trajectories: Vec<Trajectory>,
    pub backward: Vec<Trajectory>,
    pub round_trip_errors: Vec<f64>,
}

/// Re-tracks every forward endpoint from the last frame back to the first and
/// merges the two passes.
///
/// Where both passes see a point its position is their mean; where only one
/// does, that one is used. Visibility never exceeds the forward pass, and a
/// point whose round-trip error exceeds `drop_threshold_px` is hidden in every
/// frame.
pub fn backward_refine(
    video: &VideoSequence,
    forward: &[Trajectory],
    backend: &dyn TrackerBackend,
    drop_threshold_px: f64,
) -> Result<Refinement, TrackError> {
    if !backend.supports_backward() {
        return Err(TrackError::BackwardUnsupported);
    }
    let n = video.len();
    if let Some(t) = forward.iter().find(|t| t.len() != n) {
        return Err(TrackError::LengthMismatch(t.len(), n));
    }

    // one backward call per instance, preserving input order
    let mut backward: Vec<Option<Trajectory>> = vec![None; forward.len()];
    let mut instances: Vec<u32> = forward.iter().map(|t| t.instance_id).collect();
    instances.sort_unstable();
    instances.dedup();
    for inst in instances {
        let idx: Vec<usize> = (0..forward.len())
            .filter(|&i| forward[i].instance_id == inst)
            .collect();
        let seeds: Vec<Point> = idx.iter().map(|&i| forward[i].positions[n - 1]).collect();
        let result = backend.track(video, inst, &seeds, Direction::Backward)?;
        if result.len() != idx.len() {
            return Err(TrackError::BackendFailure(format!(
                "expected {} backward trajectories, got {}",
                idx.len(),
                result.len()
            )));
        }
        for (&i, mut t) in idx.iter().zip(result) {
            t.point_index = forward[i].point_index;
            backward[i] = Some(t);
        }
    }
    let backward: Vec<Trajectory> = backward
        .into_iter()
        .map(|t| t.expect("filled above"))
        .collect();

    let mut refined = Vec::with_capacity(forward.len());
    let mut errors = Vec::with_capacity(forward.len());
    for (f, b) in forward.iter().zip(&backward) {
        let err = round_trip_error(f, b)?;
        let dropped = err > drop_threshold_px;
        let mut positions = Vec::with_capacity(n);
        let mut visible = Vec::with_capacity(n);
        for t in 0..n {
            let p = match (f.visible[t], b.visible[t]) {
                (true, true) => f.positions[t].midpoint(b.positions[t]),
                (false, true) => b.positions[t],
                _ => f.positions[t],
            };
            positions.push(p);
            visible.push(f.visible[t] && !dropped);
        }
        refined.push(Trajectory {
            instance_id: f.instance_id,
            point_index: f.point_index,
            positions,
            visible,
        });
        errors.push(err);
    }
    Ok(Refinement {
        trajectories: refined,
        backward,
        round_trip_errors: errors,
    })
}

#[derive(Debug, Serialize)]
struct TrackRequest<'a> {
    frames_ref: &'a str,
    instance: u32,
    seeds: Vec<[f64; 2]>,
    direction: Direction,
}

#[derive(Debug, Deserialize)]
struct TrackReply {
    trajectories: Vec<WireTrajectory>,
}

#[derive(Debug, Deserialize)]
struct WireTrajectory {
    positions: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

/// Tracker served over HTTP: `POST /track` with
/// `{frames_ref, instance, seeds: [[x, y]], direction}` → `{trajectories: [{positions, visible}]}`.
///
/// `frames_ref` is the frame directory the service reads the video from.
#[derive(Debug)]
pub struct ExternalTracker {
    transport: HttpTransport,
    frames_ref: PathBuf,
}

impl ExternalTracker {
    pub fn new(endpoint: &str, frames_ref: PathBuf, timeout: Duration) -> Result<Self, TrackError> {
        Ok(Self {
            transport: HttpTransport::new(endpoint, timeout, 1)?,
            frames_ref,
        })
    }
}

impl TrackerBackend for ExternalTracker {
    fn track(
        &self,
        video: &VideoSequence,
        instance_id: u32,
        seeds: &[Point],
        direction: Direction,
    ) -> Result<Vec<Trajectory>, TrackError> {
        let frames_ref = self.frames_ref.to_string_lossy();
        let req = TrackRequest {
            frames_ref: &frames_ref,
            instance: instance_id,
            seeds: seeds.iter().map(|p| [p.x, p.y]).collect(),
            direction,
        };
        let reply: TrackReply = self.transport.post_json("/track", &req)?;
        if reply.trajectories.len() != seeds.len() {
            return Err(TrackError::BackendFailure(format!(
                "expected {} trajectories, got {}",
                seeds.len(),
                reply.trajectories.len()
            )));
        }
        reply
            .trajectories
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if t.positions.len() != video.len() || t.visible.len() != video.len() {
                    return Err(TrackError::BackendFailure(format!(
                        "trajectory {i} covers {} frames, video has {}",
                        t.positions.len(),
                        video.len()
                    )));
                }
                Ok(Trajectory {
                    instance_id,
                    point_index: i,
                    positions: t
                        .positions
                        .into_iter()
                        .map(|[x, y]| Point::new(x, y))
                        .collect(),
                    visible: t.visible,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbImage;

    /// Deterministic high-contrast texture, wrapping with period `w × h`.
    fn texture(w: usize, h: usize, shift_x: i64, shift_y: i64) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let sx = (x as i64 - shift_x).rem_euclid(w as i64) as u64;
                let sy = (y as i64 - shift_y).rem_euclid(h as i64) as u64;
                let v = (sx.wrapping_mul(2654435761) ^ sy.wrapping_mul(40503))
                    .wrapping_mul(2246822519)
                    >> 13;
                let g = (v % 256) as u8;
                img.put(x, y, [g, g, g]);
            }
        }
        img
    }

    /// Exhaustive integer-displacement NCC, written independently of `ncc_match`.
    fn exhaustive_ncc(
        prev: &RgbImage,
        next: &RgbImage,
        c: (i64, i64),
        r: i64,
        s: i64,
    ) -> (i64, i64) {
        let g = |img: &RgbImage, x: i64, y: i64| img.get(x as usize, y as usize)[0] as f64;
        let mut best = (f64::MIN, (0, 0));
        for dy in -s..=s {
            for dx in -s..=s {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for y in -r..=r {
                    for x in -r..=r {
                        let (px, py) = (c.0 + x, c.1 + y);
                        let (qx, qy) = (c.0 + dx + x, c.1 + dy + y);
                        if qx < 0
                            || qy < 0
                            || qx >= next.width() as i64
                            || qy >= next.height() as i64
                        {
                            continue;
                        }
                        a.push(g(prev, px, py));
                        b.push(g(next, qx, qy));
                    }
                }
                if a.len() != ((2 * r + 1) * (2 * r + 1)) as usize {
                    continue;
                }
                let ma = a.iter().sum::<f64>() / a.len() as f64;
                let mb = b.iter().sum::<f64>() / b.len() as f64;
                let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
                let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
                let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
                let v = num / (da * db);
                if v > best.0 {
                    best = (v, (dx, dy));
                }
            }
        }
        best.1
    }

    #[test]
    fn self_correlation_is_exact() {
        let f = Frame::new(0, texture(64, 48, 0, 0));
        let (p, score) = ncc_track_point(&f, &f, Point::new(30.0, 20.0), 7, 10).unwrap();
        assert_eq!(p, Point::new(30.0, 20.0));
        assert!((score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shifted_texture_matches_exhaustive_oracle() {
        let prev = texture(64, 48, 0, 0);
        let next = texture(64, 48, 3, 0);
        let oracle = exhaustive_ncc(&prev, &next, (30, 24), 7, 6);
        assert_eq!(oracle, (3, 0));
        let (p, score) = ncc_track_point(
            &Frame::new(0, prev),
            &Frame::new(1, next),
            Point::new(30.0, 24.0),
            7,
            6,
        )
        .unwrap();
        assert!(
            (p.x - 33.0).abs() <= 0.5 && (p.y - 24.0).abs() <= 0.5,
            "{p:?}"
        );
        assert!(score > 0.99);
    }

    #[test]
    fn uniform_patch_is_degenerate() {
        let f = Frame::new(0, RgbImage::filled(40, 40, [128, 128, 128]));
        assert!(matches!(
            ncc_track_point(&f, &f, Point::new(20.0, 20.0), 7, 5),
            Err(TrackError::DegeneratePatch { .. })
        ));
    }

    #[test]
    fn translation_equivariance() {
        // Shifting both frames by the same offset shifts the result by it too.
        let base_prev = texture(80, 60, 0, 0);
        let base_next = texture(80, 60, 2, -1);
        let (p0, s0) = ncc_track_point(
            &Frame::new(0, base_prev),
            &Frame::new(1, base_next),
            Point::new(30.0, 30.0),
            7,
            8,
        )
        .unwrap();
        let (p1, s1) = ncc_track_point(
            &Frame::new(0, texture(80, 60, 5, 4)),
            &Frame::new(1, texture(80, 60, 7, 3)),
            Point::new(35.0, 34.0),
            7,
            8,
        )
        .unwrap();
        assert!((p1.x - p0.x - 5.0).abs() < 1e-9 && (p1.y - p0.y - 4.0).abs() < 1e-9);
        assert!((s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn static_video_gives_constant_visible_trajectories() {
        let video = VideoSequence::from_images(vec![texture(64, 48, 0, 0); 6]).unwrap();
        let seeds = [Point::new(20.0, 20.0), Point::new(40.5, 30.25)];
        let tr = NccTracker::default();
        for dir in [Direction::Forward, Direction::Backward] {
            let out = tr.track(&video, 0, &seeds, dir).unwrap();
            for (t, s) in out.iter().zip(&seeds) {
                assert!(t.positions.iter().all(|p| p == s));
                assert!(t.visible.iter().all(|&v| v));
            }
        }
    }

    #[test]
    fn point_on_uniform_background_is_lost() {
        // textureless background; a textured square moves elsewhere in the frame
        let frames: Vec<RgbImage> = (0..10)
            .map(|t| {
                let mut img = RgbImage::filled(96, 64, [90, 90, 90]);
                let tex = texture(12, 12, 0, 0);
                img.paste(&tex, 50 + 2 * t, 20);
                img
            })
            .collect();
        let video = VideoSequence::from_images(frames).unwrap();
        let out = NccTracker::default()
            .track(&video, 0, &[Point::new(15.0, 30.0)], Direction::Forward)
            .unwrap();
        let first_lost = out[0].visible.iter().position(|v| !v).unwrap();
        assert!(first_lost <= 5, "lost only at frame {first_lost}");
        assert!(out[0].visible[first_lost..].iter().all(|v| !v));
        assert!(out[0].positions[first_lost..]
            .iter()
            .all(|p| *p == Point::new(15.0, 30.0)));
    }

    #[test]
    fn round_trip_error_cases() {
        let mk = |p: Point, n| Trajectory {
            instance_id: 0,
            point_index: 0,
            positions: vec![p; n],
            visible: vec![true; n],
        };
        assert_eq!(
            round_trip_error(&mk(Point::new(0.0, 0.0), 3), &mk(Point::new(3.0, 4.0), 3)).unwrap(),
            5.0
        );
        assert_eq!(
            round_trip_error(&mk(Point::new(1.0, 1.0), 3), &mk(Point::new(1.0, 1.0), 3)).unwrap(),
            0.0
        );
        assert!(matches!(
            round_trip_error(&mk(Point::default(), 3), &mk(Point::default(), 4)),
            Err(TrackError::LengthMismatch(3, 4))
        ));
    }

    /// Backend that replays fixed backward trajectories.
    struct Replay(Vec<Trajectory>);

    impl TrackerBackend for Replay {
        fn track(
            &self,
            _: &VideoSequence,
            _: u32,
            _: &[Point],
            _: Direction,
        ) -> Result<Vec<Trajectory>, TrackError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn averaging_halves_an_injected_jump() {
        let n = 8;
        let truth: Vec<Point> = (0..n)
            .map(|t| Point::new(10.0 + 2.0 * t as f64, 20.0))
            .collect();
        let mut fwd = truth.clone();
        fwd[4].x += 20.0;
        let forward = vec![Trajectory {
            instance_id: 0,
            point_index: 0,
            positions: fwd,
            visible: vec![true; n],
        }];
        let backward = Replay(vec![Trajectory {
            instance_id: 0,
            point_index: 0,
            positions: truth.clone(),
            visible: vec![true; n],
        }]);
        let video = VideoSequence::from_images(vec![RgbImage::new(4, 4); n]).unwrap();
        let out = backward_refine(&video, &forward, &backward, DEFAULT_DROP_THRESHOLD_PX).unwrap();
        let refined = &out.trajectories[0];
        assert!(refined.positions[4].distance(truth[4]) <= 10.0);
        assert_eq!(refined.positions[2], truth[2]);
        assert_eq!(out.round_trip_errors, vec![0.0]);
    }

    #[test]
    fn large_round_trip_error_hides_the_point() {
        let n = 5;
        let mk = |x: f64| Trajectory {
            instance_id: 0,
            point_index: 0,
            positions: vec![Point::new(x, 0.0); n],
            visible: vec![true; n],
        };
        let video = VideoSequence::from_images(vec![RgbImage::new(4, 4); n]).unwrap();
        let out = backward_refine(&video, &[mk(0.0)], &Replay(vec![mk(9.0)]), 8.0).unwrap();
        assert!(out.trajectories[0].visible.iter().all(|v| !v));
        let out = backward_refine(&video, &[mk(0.0)], &Replay(vec![mk(7.9)]), 8.0).unwrap();
        assert!(out.trajectories[0].visible.iter().all(|v| *v));
    }

    #[test]
    fn palindrome_video_refines_symmetrically() {
        let shifts = [0i64, 2, 4, 2, 0];
        let frames: Vec<RgbImage> = shifts.iter().map(|&s| texture(80, 60, s, 0)).collect();
        let video = VideoSequence::from_images(frames).unwrap();
        let tr = NccTracker::default();
        let fwd = tr
            .track(&video, 0, &[Point::new(40.0, 30.0)], Direction::Forward)
            .unwrap();
        let out = backward_refine(&video, &fwd, &tr, DEFAULT_DROP_THRESHOLD_PX).unwrap();
        let p = &out.trajectories[0].positions;
        for t in 0..p.len() {
            assert!(
                p[t].distance(p[p.len() - 1 - t]) < 1e-9,
                "frame {t}: {:?}",
                p
            );
        }
    }
}
