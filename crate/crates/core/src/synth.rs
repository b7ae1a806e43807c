//! Deterministic synthetic plate videos with exact ground truth.
//!
//! Randomness comes from ChaCha8 streams seeded with the scene seed: stream 0
//! lays out the scene, stream `t + 1` draws the pixel noise of frame `t`
//! (Ziggurat normal sampling), so output bytes are identical on every platform.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::font::{Font, GLYPH_H, GLYPH_W};
use crate::geom::{BBox, Point};
use crate::raster::RgbImage;
use crate::videoio::{self, GroundTruthRecord, QueryAnnotation, VideoIoError, VideoSequence};

pub const PLATE_BACKGROUND: [u8; 3] = [236, 236, 228];
pub const PLATE_INK: [u8; 3] = [24, 24, 32];
pub const PLATE_PADDING: usize = 4;
pub const MIN_GLYPH_HEIGHT: usize = 8;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("plate string is empty")]
    EmptyString,
    #[error("character {0:?} is not in the font")]
    UnknownGlyph(char),
    #[error("{len} characters do not fit a {width}x{height} plate at {MIN_GLYPH_HEIGHT} px glyph height")]
    StringTooLong {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("plate leaves the frame at frame {frame}")]
    PlateOutOfBounds { frame: usize },
    #[error("plate moves {step:.1} px between frames {frame} and {next}, above the {limit} px limit", next = frame + 1)]
    MotionTooFast { frame: usize, step: f64, limit: f64 },
    #[error("invalid scene: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] VideoIoError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// Constant velocity in px/frame.
    Linear { vx: f64, vy: f64 },
    /// Horizontal oscillation around the start position.
    Sinusoidal { amp: f64, period: f64 },
}

impl Motion {
    fn offset(&self, t: usize) -> (f64, f64) {
        match *self {
            Motion::Linear { vx, vy } => (vx * t as f64, vy * t as f64),
            Motion::Sinusoidal { amp, period } => (amp * (2.0 * PI * t as f64 / period).sin(), 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Uniform([u8; 3]),
    /// Mid-tone background with this many static distractor rectangles.
    Clutter(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub frame_dims: (usize, usize),
    pub plate_string: String,
    pub plate_dims: (usize, usize),
    /// Plate center in frame 0.
    pub start: Point,
    pub motion: Motion,
    pub noise_sigma: f64,
    pub background: Background,
    /// Largest allowed per-frame displacement (the tracker search radius).
    pub max_step: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 30,
            frame_dims: (320, 240),
            plate_string: "ABC1234".into(),
            plate_dims: (120, 40),
            start: Point::new(100.0, 120.0),
            motion: Motion::Linear { vx: 2.0, vy: 0.0 },
            noise_sigma: 0.0,
            background: Background::Clutter(6),
            max_step: crate::track::DEFAULT_SEARCH_RADIUS as f64,
        }
    }
}

impl SceneConfig {
    /// Default scene with a seed-derived plate string (three letters, four
    /// digits), start position, integer velocity of at most `max_speed` px/frame
    /// per axis and clutter.
    pub fn randomized(seed: u64, max_speed: i64, noise_sigma: f64) -> Self {
        let mut cfg = SceneConfig {
            seed,
            noise_sigma,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5cea);
        let letters: String = (0..3)
            .map(|_| (b'A' + rng.random_range(0..26u8)) as char)
            .collect();
        let digits: String = (0..4)
            .map(|_| (b'0' + rng.random_range(0..10u8)) as char)
            .collect();
        cfg.plate_string = letters + &digits;
        let vx = rng.random_range(-max_speed..=max_speed) as f64;
        let vy = rng.random_range(-max_speed..=max_speed) as f64;
        cfg.motion = Motion::Linear { vx, vy };
        let (w, h) = cfg.frame_dims;
        let (pw, ph) = cfg.plate_dims;
        let travel_x = vx * (cfg.frames - 1) as f64;
        let travel_y = vy * (cfg.frames - 1) as f64;
        // start range keeping the whole path inside the frame with a small margin
        let margin = 4.0;
        let lo_x = pw as f64 / 2.0 + margin - travel_x.min(0.0);
        let hi_x = w as f64 - pw as f64 / 2.0 - margin - travel_x.max(0.0);
        let lo_y = ph as f64 / 2.0 + margin - travel_y.min(0.0);
        let hi_y = h as f64 - ph as f64 / 2.0 - margin - travel_y.max(0.0);
        cfg.start = Point::new(
            rng.random_range(lo_x.ceil() as i64..=hi_x.floor() as i64) as f64,
            rng.random_range(lo_y.ceil() as i64..=hi_y.floor() as i64) as f64,
        );
        cfg.background = Background::Clutter(rng.random_range(3..=8));
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub video: VideoSequence,
    pub truth: Vec<GroundTruthRecord>,
    pub true_center: Vec<Point>,
    pub plate: RgbImage,
}

impl SyntheticScene {
    /// The query annotation a human would give: the true frame-0 plate center.
    pub fn query(&self) -> QueryAnnotation {
        let c = self.true_center[0];
        QueryAnnotation::new(0, c.x, c.y)
    }

    /// Writes the frame directory, `annotations.json` and `truth.jsonl` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(VideoIoError::from)?;
        videoio::save_sequence(&self.video, dir)?;
        videoio::save_annotations(&[self.query()], dir.join(ANNOTATIONS_FILE))?;
        videoio::save_ground_truth(&self.truth, dir.join(TRUTH_FILE))?;
        Ok(())
    }
}

/// Dark glyphs from the 5×7 font, scaled by the largest integer factor that
/// fits, centered on a light plate with fixed padding.
pub fn render_plate(text: &str, font: &Font, dims: (usize, usize)) -> Result<RgbImage, SynthError> {
    if text.is_empty() {
        return Err(SynthError::EmptyString);
    }
    let glyphs = text
        .chars()
        .map(|c| font.glyph(c).ok_or(SynthError::UnknownGlyph(c)))
        .collect::<Result<Vec<_>, _>>()?;
    let (pw, ph) = dims;
    let n = glyphs.len();
    let cells_w = n * (GLYPH_W + 1) - 1;
    let avail_w = pw.saturating_sub(2 * PLATE_PADDING);
    let avail_h = ph.saturating_sub(2 * PLATE_PADDING);
    let scale = (avail_w / cells_w).min(avail_h / GLYPH_H);
    if scale * GLYPH_H < MIN_GLYPH_HEIGHT {
        return Err(SynthError::StringTooLong {
            len: n,
            width: pw,
            height: ph,
        });
    }
    let mut img = RgbImage::filled(pw, ph, PLATE_BACKGROUND);
    let x_off = (pw - cells_w * scale) / 2;
    let y_off = (ph - GLYPH_H * scale) / 2;
    for (i, g) in glyphs.iter().enumerate() {
        let gx = x_off + i * (GLYPH_W + 1) * scale;
        for r in 0..GLYPH_H {
            for c in 0..GLYPH_W {
                if g.ink(c, r) {
                    img.fill_rect(gx + c * scale, y_off + r * scale, scale, scale, PLATE_INK);
                }
            }
        }
    }
    Ok(img)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.intersection_area(b) > 0.0
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    let (w, h) = cfg.frame_dims;
    let (pw, ph) = cfg.plate_dims;
    if cfg.frames == 0 || w == 0 || h == 0 {
        return Err(SynthError::InvalidConfig(
            "frames and dimensions must be positive".into(),
        ));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(SynthError::InvalidConfig(format!(
            "noise sigma {} < 0",
            cfg.noise_sigma
        )));
    }
    if let Motion::Sinusoidal { period, .. } = cfg.motion {
        if !(period > 0.0) {
            return Err(SynthError::InvalidConfig(
                "sinusoid period must be > 0".into(),
            ));
        }
    }
    let plate = render_plate(&cfg.plate_string, &Font::builtin(), cfg.plate_dims)?;

    let mut origins = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let (dx, dy) = cfg.motion.offset(t);
        let x0 = (cfg.start.x + dx - pw as f64 / 2.0).round() as i64;
        let y0 = (cfg.start.y + dy - ph as f64 / 2.0).round() as i64;
        if x0 < 0 || y0 < 0 || x0 as usize + pw > w || y0 as usize + ph > h {
            return Err(SynthError::PlateOutOfBounds { frame: t });
        }
        if let Some(&(px, py)) = origins.last() {
            let step = ((x0 - px) as f64).hypot((y0 - py) as f64);
            if step > cfg.max_step {
                return Err(SynthError::MotionTooFast {
                    frame: t - 1,
                    step,
                    limit: cfg.max_step,
                });
            }
        }
        origins.push((x0, y0));
    }
    let boxes: Vec<BBox> = origins
        .iter()
        .map(|&(x, y)| {
            BBox::new(
                x as f64,
                y as f64,
                (x as usize + pw) as f64,
                (y as usize + ph) as f64,
            )
        })
        .collect();

    let mut layout = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backdrop = match cfg.background {
        Background::Uniform(c) => RgbImage::filled(w, h, c),
        Background::Clutter(n) => {
            let base = [
                layout.random_range(40..=140u8),
                layout.random_range(40..=140u8),
                layout.random_range(40..=140u8),
            ];
            let mut img = RgbImage::filled(w, h, base);
            // distractors stay clear of every plate position, with a 2 px gap
            let keep_out: Vec<BBox> = boxes
                .iter()
                .map(|b| BBox::new(b.x0 - 2.0, b.y0 - 2.0, b.x1 + 2.0, b.y1 + 2.0))
                .collect();
            let mut placed = 0;
            let mut attempts = 0;
            while placed < n && attempts < 1000 {
                attempts += 1;
                let dw = layout.random_range(8..=(w / 4).max(9));
                let dh = layout.random_range(8..=(h / 4).max(9));
                if dw >= w || dh >= h {
                    continue;
                }
                let x = layout.random_range(0..=w - dw);
                let y = layout.random_range(0..=h - dh);
                let color = [layout.random(), layout.random(), layout.random()];
                let b = BBox::new(x as f64, y as f64, (x + dw) as f64, (y + dh) as f64);
                if keep_out.iter().any(|k| overlaps(k, &b)) {
                    continue;
                }
                img.fill_rect(x, y, dw, dh, color);
                placed += 1;
            }
            img
        }
    };

    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma checked above"));
    let mut images = Vec::with_capacity(cfg.frames);
    for (t, &(x0, y0)) in origins.iter().enumerate() {
        let mut img = backdrop.clone();
        img.paste(&plate, x0, y0);
        if let Some(dist) = noise {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64 + 1);
            let mut data = img.into_raw();
            for v in data.iter_mut() {
                let n: f64 = dist.sample(&mut rng);
                *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
            }
            img = RgbImage::from_raw(w, h, data).expect("same size");
        }
        images.push(img);
    }

    let truth = boxes
        .iter()
        .enumerate()
        .map(|(t, b)| GroundTruthRecord {
            frame_index: t,
            instance_id: 0,
            bbox: *b,
            plate_string: cfg.plate_string.clone(),
        })
        .collect();
    let true_center = boxes.iter().map(|b| b.center()).collect();
    Ok(SyntheticScene {
        config: cfg.clone(),
        video: VideoSequence::from_images(images)?,
        truth,
        true_center,
        plate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_validated() {
        let font = Font::builtin();
        let a = render_plate("ABC1234", &font, (120, 40)).unwrap();
        assert_eq!(a, render_plate("ABC1234", &font, (120, 40)).unwrap());
        assert_eq!((a.width(), a.height()), (120, 40));
        assert!(matches!(
            render_plate("", &font, (120, 40)),
            Err(SynthError::EmptyString)
        ));
        assert!(matches!(
            render_plate("ab", &font, (120, 40)),
            Err(SynthError::UnknownGlyph('a'))
        ));
        assert!(matches!(
            render_plate("ABCDEFGHIJKLMNOP", &font, (120, 40)),
            Err(SynthError::StringTooLong { .. })
        ));
        // padding rows and columns stay plate-colored
        for x in 0..120 {
            assert_eq!(a.get(x, 0), PLATE_BACKGROUND);
            assert_eq!(a.get(x, 39), PLATE_BACKGROUND);
        }
    }

    #[test]
    fn linear_motion_centers() {
        let cfg = SceneConfig {
            start: Point::new(70.0, 100.0),
            motion: Motion::Linear { vx: 2.0, vy: 0.0 },
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let xs: Vec<f64> = scene.true_center.iter().map(|c| c.x).collect();
        let want: Vec<f64> = (0..30).map(|t| 70.0 + 2.0 * t as f64).collect();
        assert_eq!(xs, want);
        assert_eq!(*xs.last().unwrap(), 128.0);
    }

    #[test]
    fn noiseless_plate_region_equals_rendered_plate() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        for (f, gt) in scene.video.frames().iter().zip(&scene.truth) {
            let b = gt.bbox;
            let crop = f.image.crop(
                b.x0 as i64,
                b.y0 as i64,
                b.width() as usize,
                b.height() as usize,
            );
            assert_eq!(crop, scene.plate);
        }
    }

    #[test]
    fn same_config_same_bytes() {
        let cfg = SceneConfig {
            noise_sigma: 4.0,
            seed: 9,
            ..SceneConfig::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.video, b.video);
        let c = generate_scene(&SceneConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.video, c.video);
    }

    #[test]
    fn out_of_bounds_and_fast_motion_are_rejected() {
        let cfg = SceneConfig {
            motion: Motion::Linear { vx: 9.0, vy: 0.0 },
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&cfg),
            Err(SynthError::PlateOutOfBounds { .. })
        ));
        let cfg = SceneConfig {
            frames: 3,
            motion: Motion::Linear { vx: 25.0, vy: 0.0 },
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&cfg),
            Err(SynthError::MotionTooFast { .. })
        ));
    }

    #[test]
    fn distractors_never_touch_the_plate() {
        for seed in 0..20 {
            let cfg = SceneConfig::randomized(seed, 3, 0.0);
            let scene = generate_scene(&cfg).unwrap();
            let Background::Clutter(_) = cfg.background else {
                unreachable!()
            };
            for (f, gt) in scene.video.frames().iter().zip(&scene.truth) {
                let b = gt.bbox;
                // the 1-px ring around the plate is pure backdrop base color or
                // frame border; no distractor pixel may sit there
                let base = scene.video.frame(0).image.get(0, 0);
                let _ = base;
                let ring: Vec<(i64, i64)> = (b.x0 as i64 - 1..=b.x1 as i64)
                    .flat_map(|x| [(x, b.y0 as i64 - 1), (x, b.y1 as i64)])
                    .chain(
                        (b.y0 as i64..b.y1 as i64)
                            .flat_map(|y| [(b.x0 as i64 - 1, y), (b.x1 as i64, y)]),
                    )
                    .filter(|&(x, y)| {
                        x >= 0 && y >= 0 && (x as usize) < f.width() && (y as usize) < f.height()
                    })
                    .collect();
                let colors: std::collections::BTreeSet<[u8; 3]> = ring
                    .iter()
                    .map(|&(x, y)| f.image.get(x as usize, y as usize))
                    .collect();
                assert_eq!(colors.len(), 1, "seed {seed}: ring has {colors:?}");
            }
        }
    }
}
