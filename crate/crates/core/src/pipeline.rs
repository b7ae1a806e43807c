//! End-to-end orchestration: point selection → tracking → optional backward
//! refinement → per-frame segmentation → per-frame recognition → per-instance
//! aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::eval::{ApMethod, EvalConfig};
use crate::geom::Point;
use crate::par::Exec;
use crate::recognize::{
    self, BuiltinRecognizer, ExternalRecognizer, PatchStrategy, PlatePattern, PromptId,
    PromptTemplate, RecognitionResult, RecognizeError, RecognizerBackend,
};
use crate::segment::{
    self, BuiltinSegmenter, Detection, ExternalSegmenter, SegmentError, SegmenterBackend,
};
use crate::select::{self, PointSet, SelectError, Strategy};
use crate::track::{
    self, Direction, ExternalTracker, NccTracker, TrackError, TrackerBackend, Trajectory,
};
use crate::transport::{DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT};
use crate::videoio::{self, DetectionRecord, QueryAnnotation, VideoIoError, VideoSequence};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const RECOGNITIONS_FILE: &str = "recognitions.jsonl";
pub const PLATES_FILE: &str = "plates.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_ENV: &str = "ONESHOT_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {msg}")]
    InvalidValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Where a stage's model runs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BackendSpec {
    #[default]
    Builtin,
    External(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "builtin" => Ok(BackendSpec::Builtin),
            _ => match s.strip_prefix("external:") {
                Some(ep) if !ep.is_empty() => Ok(BackendSpec::External(ep.to_string())),
                _ => Err("expected `builtin` or `external:<endpoint>`".into()),
            },
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Builtin => f.write_str("builtin"),
            BackendSpec::External(ep) => write!(f, "external:{ep}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub select_strategy: Strategy,
    pub select_offset_px: f64,
    pub select_per_arm: usize,
    pub select_k: usize,
    pub select_seed: u64,

    pub track_patch_radius: usize,
    pub track_search_radius: usize,
    pub track_drop_threshold_px: f64,
    pub track_backward_refine: bool,
    pub track_lost_score: f64,
    pub track_lost_frames: usize,
    pub track_motion_weight: f64,
    pub track_backend: BackendSpec,

    pub segment_tau: f64,
    pub segment_area_cap: f64,
    pub segment_backend: BackendSpec,

    pub recog_enabled: bool,
    pub recog_strategy: PatchStrategy,
    pub recog_prompt: PromptId,
    pub recog_pattern: String,
    pub recog_backend: BackendSpec,

    pub eval_iou: f64,
    pub eval_min_chars: usize,
    pub eval_ap_method: ApMethod,

    /// Shared by every external backend.
    pub external_timeout: Duration,
    pub external_max_in_flight: usize,

    /// 0 = all cores, 1 = sequential.
    pub workers: usize,

    /// Frame directory handed to an external tracker; set by the caller.
    pub frames_ref: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            select_strategy: Strategy::Crosshairs,
            select_offset_px: select::DEFAULT_OFFSET_PX,
            select_per_arm: select::DEFAULT_PER_ARM,
            select_k: select::DEFAULT_K,
            select_seed: 0,
            track_patch_radius: track::DEFAULT_PATCH_RADIUS,
            track_search_radius: track::DEFAULT_SEARCH_RADIUS,
            track_drop_threshold_px: track::DEFAULT_DROP_THRESHOLD_PX,
            track_backward_refine: true,
            track_lost_score: track::DEFAULT_LOST_SCORE,
            track_lost_frames: track::DEFAULT_LOST_FRAMES,
            track_motion_weight: track::DEFAULT_MOTION_WEIGHT,
            track_backend: BackendSpec::Builtin,
            segment_tau: segment::DEFAULT_TAU,
            segment_area_cap: segment::DEFAULT_AREA_CAP,
            segment_backend: BackendSpec::Builtin,
            recog_enabled: true,
            recog_strategy: PatchStrategy::CenterCrop,
            recog_prompt: PromptId::P6,
            recog_pattern: recognize::DEFAULT_PLATE_PATTERN.to_string(),
            recog_backend: BackendSpec::Builtin,
            eval_iou: crate::eval::DEFAULT_IOU,
            eval_min_chars: 7,
            eval_ap_method: ApMethod::AllPoint,
            external_timeout: DEFAULT_TIMEOUT,
            external_max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            workers: 0,
            frames_ref: None,
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "select.strategy",
    "select.offset_px",
    "select.per_arm",
    "select.k",
    "select.seed",
    "track.patch_radius",
    "track.search_radius",
    "track.drop_threshold_px",
    "track.backward_refine",
    "track.lost_score",
    "track.lost_frames",
    "track.motion_weight",
    "track.backend",
    "segment.tau",
    "segment.area_cap",
    "segment.backend",
    "recog.enabled",
    "recog.strategy",
    "recog.prompt",
    "recog.pattern",
    "recog.backend",
    "eval.iou",
    "eval.min_chars",
    "eval.ap_method",
    "external.timeout_s",
    "external.max_in_flight",
    "pipeline.workers",
];

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn positive(v: f64) -> Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a positive number".into())
    }
}

impl PipelineConfig {
    /// Parses the flat `key = value` format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = |msg: String| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            msg,
        };
        let v = value;
        match key {
            "select.strategy" => {
                self.select_strategy = v.parse().map_err(|e: SelectError| invalid(e.to_string()))?
            }
            "select.offset_px" => {
                self.select_offset_px = parse_num(v).and_then(positive).map_err(invalid)?
            }
            "select.per_arm" => self.select_per_arm = parse_num(v).map_err(invalid)?,
            "select.k" => self.select_k = parse_num(v).map_err(invalid)?,
            "select.seed" => self.select_seed = parse_num(v).map_err(invalid)?,
            "track.patch_radius" => self.track_patch_radius = parse_num(v).map_err(invalid)?,
            "track.search_radius" => self.track_search_radius = parse_num(v).map_err(invalid)?,
            "track.drop_threshold_px" => {
                self.track_drop_threshold_px = parse_num(v).and_then(positive).map_err(invalid)?
            }
            "track.backward_refine" => {
                self.track_backward_refine = parse_bool(v).map_err(invalid)?
            }
            "track.lost_score" => self.track_lost_score = parse_num(v).map_err(invalid)?,
            "track.lost_frames" => self.track_lost_frames = parse_num(v).map_err(invalid)?,
            "track.motion_weight" => {
                let w: f64 = parse_num(v).map_err(invalid)?;
                if !(w.is_finite() && w >= 0.0) {
                    return Err(invalid("must be a non-negative number".into()));
                }
                self.track_motion_weight = w;
            }
            "track.backend" => self.track_backend = v.parse().map_err(invalid)?,
            "segment.tau" => self.segment_tau = parse_num(v).and_then(positive).map_err(invalid)?,
            "segment.area_cap" => {
                self.segment_area_cap = parse_num(v).and_then(positive).map_err(invalid)?
            }
            "segment.backend" => self.segment_backend = v.parse().map_err(invalid)?,
            "recog.enabled" => self.recog_enabled = parse_bool(v).map_err(invalid)?,
            "recog.strategy" => {
                self.recog_strategy = v
                    .parse()
                    .map_err(|e: RecognizeError| invalid(e.to_string()))?
            }
            "recog.prompt" => {
                self.recog_prompt = v
                    .parse()
                    .map_err(|e: RecognizeError| invalid(e.to_string()))?
            }
            "recog.pattern" => {
                PlatePattern::new(v).map_err(|e| invalid(e.to_string()))?;
                self.recog_pattern = v.to_string();
            }
            "recog.backend" => self.recog_backend = v.parse().map_err(invalid)?,
            "eval.iou" => self.eval_iou = parse_num(v).and_then(positive).map_err(invalid)?,
            "eval.min_chars" => self.eval_min_chars = parse_num(v).map_err(invalid)?,
            "eval.ap_method" => {
                self.eval_ap_method = v
                    .parse()
                    .map_err(|e: crate::eval::EvalError| invalid(e.to_string()))?
            }
            "external.timeout_s" => {
                self.external_timeout =
                    Duration::from_secs_f64(parse_num(v).and_then(positive).map_err(invalid)?)
            }
            "external.max_in_flight" => {
                let n: usize = parse_num(v).map_err(invalid)?;
                if n == 0 {
                    return Err(invalid("must be at least 1".into()));
                }
                self.external_max_in_flight = n;
            }
            "pipeline.workers" => self.workers = parse_num(v).map_err(invalid)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Renders the configuration in the file format; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let vals: Vec<String> = vec![
            self.select_strategy.to_string(),
            self.select_offset_px.to_string(),
            self.select_per_arm.to_string(),
            self.select_k.to_string(),
            self.select_seed.to_string(),
            self.track_patch_radius.to_string(),
            self.track_search_radius.to_string(),
            self.track_drop_threshold_px.to_string(),
            self.track_backward_refine.to_string(),
            self.track_lost_score.to_string(),
            self.track_lost_frames.to_string(),
            self.track_motion_weight.to_string(),
            self.track_backend.to_string(),
            self.segment_tau.to_string(),
            self.segment_area_cap.to_string(),
            self.segment_backend.to_string(),
            self.recog_enabled.to_string(),
            self.recog_strategy.to_string(),
            self.recog_prompt.to_string(),
            self.recog_pattern.clone(),
            self.recog_backend.to_string(),
            self.eval_iou.to_string(),
            self.eval_min_chars.to_string(),
            self.eval_ap_method.to_string(),
            self.external_timeout.as_secs_f64().to_string(),
            self.external_max_in_flight.to_string(),
            self.workers.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn exec(&self) -> Exec {
        Exec::from_workers(self.workers)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou: self.eval_iou,
            min_chars: self.eval_min_chars,
            ap_method: self.eval_ap_method,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("annotations: no query points")]
    AnnotationsEmpty,
    #[error("select: {0}")]
    Select(#[from] SelectError),
    #[error("track: {0}")]
    Track(#[from] TrackError),
    #[error("segment: {0}")]
    Segment(#[from] SegmentError),
    #[error("recognize: {0}")]
    Recognize(#[from] RecognizeError),
    #[error("output: {0}")]
    Output(#[from] VideoIoError),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::AnnotationsEmpty => "annotations",
            PipelineError::Select(_) => "select",
            PipelineError::Track(_) => "track",
            PipelineError::Segment(_) => "segment",
            PipelineError::Recognize(_) => "recognize",
            PipelineError::Output(_) => "output",
        }
    }

    /// True when an external backend failed (timeout, transport or non-2xx).
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            PipelineError::Track(TrackError::BackendFailure(_))
                | PipelineError::Segment(SegmentError::Backend(_))
                | PipelineError::Select(SelectError::Segment(SegmentError::Backend(_)))
                | PipelineError::Recognize(
                    RecognizeError::BackendTimeout(_) | RecognizeError::BackendError(_)
                )
        )
    }
}

/// Resolved stage backends.
pub struct Backends {
    pub tracker: Box<dyn TrackerBackend>,
    pub segmenter: Box<dyn SegmenterBackend>,
    pub recognizer: Box<dyn RecognizerBackend>,
}

impl Backends {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let tracker: Box<dyn TrackerBackend> = match &cfg.track_backend {
            BackendSpec::Builtin => {
                if cfg.track_lost_frames == 0 {
                    return Err(ConfigError::InvalidValue {
                        key: "track.lost_frames".into(),
                        value: "0".into(),
                        msg: "must be at least 1".into(),
                    }
                    .into());
                }
                Box::new(NccTracker {
                    patch_radius: cfg.track_patch_radius,
                    search_radius: cfg.track_search_radius,
                    lost_score: cfg.track_lost_score,
                    lost_frames: cfg.track_lost_frames,
                    motion_weight: cfg.track_motion_weight,
                    exec: cfg.exec(),
                })
            }
            BackendSpec::External(ep) => {
                let frames = cfg
                    .frames_ref
                    .clone()
                    .ok_or_else(|| ConfigError::InvalidValue {
                        key: "track.backend".into(),
                        value: cfg.track_backend.to_string(),
                        msg: "an external tracker needs the frame directory path".into(),
                    })?;
                Box::new(ExternalTracker::new(ep, frames, cfg.external_timeout)?)
            }
        };
        let segmenter: Box<dyn SegmenterBackend> = match &cfg.segment_backend {
            BackendSpec::Builtin => Box::new(BuiltinSegmenter::new(
                cfg.segment_tau,
                cfg.segment_area_cap,
            )?),
            BackendSpec::External(ep) => Box::new(ExternalSegmenter::new(
                ep,
                cfg.external_timeout,
                cfg.external_max_in_flight,
            )?),
        };
        let recognizer: Box<dyn RecognizerBackend> = match &cfg.recog_backend {
            BackendSpec::Builtin => Box::new(BuiltinRecognizer::default()),
            BackendSpec::External(ep) => Box::new(ExternalRecognizer::new(
                ep,
                cfg.external_timeout,
                cfg.external_max_in_flight,
            )?),
        };
        Ok(Self {
            tracker,
            segmenter,
            recognizer,
        })
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub select_ms: f64,
    pub track_ms: f64,
    pub refine_ms: f64,
    pub segment_ms: f64,
    pub recognize_ms: f64,
    pub aggregate_ms: f64,
    pub total_ms: f64,
}

/// A frame where a stage produced nothing for an instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Miss {
    pub frame: usize,
    pub instance: u32,
    pub stage: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub point_sets: Vec<PointSet>,
    pub trajectories: Vec<Trajectory>,
    pub round_trip_errors: Vec<f64>,
    /// Sorted by (frame, instance).
    pub detections: Vec<Detection>,
    pub recognitions: Vec<RecognitionResult>,
    pub final_plates: BTreeMap<u32, String>,
    pub misses: Vec<Miss>,
    pub timing: Timing,
}

impl PipelineOutput {
    /// Detection records, each carrying its frame's parsed plate when there is one.
    pub fn detection_records(&self) -> Vec<DetectionRecord> {
        let plates: BTreeMap<(usize, u32), &str> = self
            .recognitions
            .iter()
            .filter_map(|r| {
                r.plate
                    .as_deref()
                    .map(|p| ((r.frame_index, r.instance_id), p))
            })
            .collect();
        self.detections
            .iter()
            .map(|d| DetectionRecord {
                frame: d.frame_index,
                instance: d.instance_id,
                bbox: d.bbox,
                confidence: d.confidence,
                plate: plates
                    .get(&(d.frame_index, d.instance_id))
                    .map(|p| p.to_string()),
            })
            .collect()
    }

    /// Writes the four fixed-name output files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), VideoIoError> {
        fs::create_dir_all(dir)?;
        videoio::save_detections(&self.detection_records(), dir.join(DETECTIONS_FILE))?;
        videoio::write_jsonl(&self.recognitions, &dir.join(RECOGNITIONS_FILE))?;
        let plates: BTreeMap<String, &str> = self
            .final_plates
            .iter()
            .map(|(k, v)| (k.to_string(), v.as_str()))
            .collect();
        fs::write(dir.join(PLATES_FILE), pretty_json(&plates))?;
        fs::write(dir.join(TIMING_FILE), pretty_json(&self.timing))?;
        Ok(())
    }
}

fn pretty_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

/// Reads `plates.json` written by [`PipelineOutput::write`].
pub fn load_plates(path: &Path) -> Result<BTreeMap<u32, String>, VideoIoError> {
    let text = fs::read_to_string(path)?;
    let raw: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| VideoIoError::Parse {
            line: Some(e.line()),
            msg: e.to_string(),
        })?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<u32>()
                .map(|k| (k, v))
                .map_err(|_| VideoIoError::Parse {
                    line: None,
                    msg: format!("instance key {k:?} is not an integer"),
                })
        })
        .collect()
}

/// Optional debug artifact directories.
#[derive(Debug, Clone, Default)]
pub struct Dumps {
    pub masks: Option<PathBuf>,
    pub patches: Option<PathBuf>,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

fn select_points(
    video: &VideoSequence,
    q: &QueryAnnotation,
    cfg: &PipelineConfig,
    segmenter: &dyn SegmenterBackend,
) -> Result<PointSet, SelectError> {
    let dims = video.dims();
    match cfg.select_strategy {
        Strategy::Single => Ok(select::select_single(q)),
        Strategy::Crosshairs => {
            select::select_crosshairs(q, cfg.select_offset_px, cfg.select_per_arm, dims)
        }
        Strategy::Random => {
            let mask = select::bootstrap_mask(video.frame(0), q, segmenter)?;
            select::select_random(q, &mask, cfg.select_k, cfg.select_seed)
        }
        Strategy::KMedoids => {
            let mask = select::bootstrap_mask(video.frame(0), q, segmenter)?;
            select::select_kmedoids(q, &mask, cfg.select_k, cfg.exec())
        }
    }
}

/// Runs the pipeline with backends resolved from `cfg`.
pub fn run(
    video: &VideoSequence,
    annotations: &[QueryAnnotation],
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let backends = Backends::from_config(cfg)?;
    run_with(video, annotations, cfg, &backends, &Dumps::default())
}

pub fn run_with(
    video: &VideoSequence,
    annotations: &[QueryAnnotation],
    cfg: &PipelineConfig,
    backends: &Backends,
    dumps: &Dumps,
) -> Result<PipelineOutput, PipelineError> {
    let start = Instant::now();
    if annotations.is_empty() {
        return Err(PipelineError::AnnotationsEmpty);
    }
    let (w, h) = video.dims();
    for a in annotations {
        a.validate(w, h)?;
    }
    let pattern = PlatePattern::new(&cfg.recog_pattern)?;
    let exec = cfg.exec();
    let mut out = PipelineOutput::default();

    let t = Instant::now();
    for q in annotations {
        out.point_sets
            .push(select_points(video, q, cfg, backends.segmenter.as_ref())?);
    }
    out.timing.select_ms = ms(t);

    let t = Instant::now();
    let mut forward = Vec::new();
    for ps in &out.point_sets {
        forward.extend(backends.tracker.track(
            video,
            ps.instance_id,
            &ps.points,
            Direction::Forward,
        )?);
    }
    out.timing.track_ms = ms(t);

    let t = Instant::now();
    out.trajectories = if cfg.track_backward_refine {
        let r = track::backward_refine(
            video,
            &forward,
            backends.tracker.as_ref(),
            cfg.track_drop_threshold_px,
        )?;
        out.round_trip_errors = r.round_trip_errors;
        r.trajectories
    } else {
        forward
    };
    out.timing.refine_ms = ms(t);

    // one job per (instance, frame) in that order; results are re-sorted below
    let t = Instant::now();
    let mut instances: Vec<u32> = out.point_sets.iter().map(|p| p.instance_id).collect();
    instances.sort_unstable();
    instances.dedup();
    let jobs: Vec<(u32, usize)> = instances
        .iter()
        .flat_map(|&i| (0..video.len()).map(move |f| (i, f)))
        .collect();
    let trajectories = &out.trajectories;
    let seg_exec = exec.limited(backends.segmenter.max_concurrency());
    let seg_results = seg_exec.map(&jobs, |&(inst, f)| {
        let prompts: Vec<Point> = trajectories
            .iter()
            .filter(|tr| tr.instance_id == inst && tr.visible[f])
            .map(|tr| tr.positions[f])
            .collect();
        segment::detect_frame(video.frame(f), inst, &prompts, backends.segmenter.as_ref())
    });
    for (&(inst, f), r) in jobs.iter().zip(seg_results) {
        match r {
            Ok(d) => out.detections.push(d),
            Err(e @ SegmentError::Backend(_)) => return Err(e.into()),
            Err(e) => out.misses.push(Miss {
                frame: f,
                instance: inst,
                stage: "segment",
                reason: e.to_string(),
            }),
        }
    }
    out.detections
        .sort_by_key(|d| (d.frame_index, d.instance_id));
    out.timing.segment_ms = ms(t);

    if let Some(dir) = &dumps.masks {
        fs::create_dir_all(dir).map_err(VideoIoError::from)?;
        for d in &out.detections {
            if let Some(m) = &d.mask {
                let path = dir.join(format!("mask_i{}_f{:05}.pgm", d.instance_id, d.frame_index));
                let file = fs::File::create(path).map_err(VideoIoError::from)?;
                m.to_gray()
                    .write_pgm(std::io::BufWriter::new(file))
                    .map_err(VideoIoError::from)?;
            }
        }
    }

    if cfg.recog_enabled {
        let t = Instant::now();
        let prompt = PromptTemplate::from(cfg.recog_prompt);
        let rec_exec = exec.limited(backends.recognizer.max_concurrency());
        let results = rec_exec.map(&out.detections, |d| {
            recognize::recognize_detection(
                video.frame(d.frame_index),
                d,
                cfg.recog_strategy,
                &prompt,
                &pattern,
                backends.recognizer.as_ref(),
            )
        });
        for (d, r) in out.detections.iter().zip(results) {
            match r {
                Ok(r) => out.recognitions.push(r),
                Err(e @ (RecognizeError::BackendTimeout(_) | RecognizeError::BackendError(_))) => {
                    return Err(e.into())
                }
                Err(e) => out.misses.push(Miss {
                    frame: d.frame_index,
                    instance: d.instance_id,
                    stage: "recognize",
                    reason: e.to_string(),
                }),
            }
        }
        if let Some(dir) = &dumps.patches {
            fs::create_dir_all(dir).map_err(VideoIoError::from)?;
            for d in &out.detections {
                let patch =
                    recognize::extract_patch(video.frame(d.frame_index), d, cfg.recog_strategy)?;
                let path = dir.join(format!(
                    "patch_i{}_f{:05}.ppm",
                    d.instance_id, d.frame_index
                ));
                fs::write(path, patch.pixels().to_ppm_bytes()).map_err(VideoIoError::from)?;
            }
        }
        out.timing.recognize_ms = ms(t);

        let t = Instant::now();
        for &inst in &instances {
            if let Ok(p) = recognize::recognize_sequence(&out.recognitions, inst) {
                out.final_plates.insert(inst, p);
            }
        }
        out.timing.aggregate_ms = ms(t);
    }
    out.timing.total_ms = ms(start);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let text = "# comment\nselect.strategy = kmedoids  # trailing\n\nrecog.backend = external:localhost:9000\npipeline.workers=1\n";
        let c = PipelineConfig::parse(text).unwrap();
        assert_eq!(c.select_strategy, Strategy::KMedoids);
        assert_eq!(
            c.recog_backend,
            BackendSpec::External("localhost:9000".into())
        );
        assert_eq!(c.workers, 1);
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
        assert!(matches!(
            PipelineConfig::parse("select.nope = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("select.k"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("recog.prompt = P9"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("track.backend = external:"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn defaults_mirror_the_best_configuration() {
        let c = PipelineConfig::default();
        assert_eq!(c.select_strategy, Strategy::Crosshairs);
        assert_eq!(1 + 4 * c.select_per_arm, 5);
        assert!(c.track_backward_refine);
        assert_eq!(c.recog_strategy, PatchStrategy::CenterCrop);
        assert_eq!(c.recog_prompt, PromptId::P6);
    }

    #[test]
    fn empty_annotations_abort() {
        let scene = generate_scene(&SceneConfig {
            frames: 2,
            ..SceneConfig::default()
        })
        .unwrap();
        let err = run(&scene.video, &[], &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, PipelineError::AnnotationsEmpty));
        assert_eq!(err.stage(), "annotations");
    }

    #[test]
    fn noiseless_scene_end_to_end() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let out = run(&scene.video, &[scene.query()], &PipelineConfig::default()).unwrap();
        assert_eq!(out.detections.len(), scene.video.len());
        for (d, gt) in out.detections.iter().zip(&scene.truth) {
            assert_eq!(d.bbox, gt.bbox, "frame {}", d.frame_index);
        }
        assert_eq!(
            out.final_plates.get(&0).map(String::as_str),
            Some("ABC1234")
        );
    }

    #[test]
    fn recognition_can_be_disabled() {
        let scene = generate_scene(&SceneConfig {
            frames: 5,
            ..SceneConfig::default()
        })
        .unwrap();
        let cfg = PipelineConfig {
            recog_enabled: false,
            ..PipelineConfig::default()
        };
        let out = run(&scene.video, &[scene.query()], &cfg).unwrap();
        assert_eq!(out.detections.len(), 5);
        assert!(out.recognitions.is_empty() && out.final_plates.is_empty());
    }
}
