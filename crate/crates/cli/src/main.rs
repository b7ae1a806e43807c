use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oneshot_core::eval::{self, ApMethod, EvalConfig};
use oneshot_core::pipeline::{self, Backends, Dumps, PipelineConfig, PipelineError};
use oneshot_core::recognize::{self, RecognitionResult};
use oneshot_core::synth::{self, Background, Motion, SceneConfig};
use oneshot_core::videoio;
use oneshot_core::Point;

#[derive(Debug, Parser)]
#[command(
    name = "oneshot",
    about = "One-shot plate tracking and recognition",
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic plate video with ground truth.
    Synth(SynthArgs),
    /// Run the pipeline on a frame directory.
    Run(RunArgs),
    /// Score detections and plates against ground truth.
    Eval(EvalArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    /// Frame size as WxH.
    #[arg(long, default_value = "320x240", value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long, default_value = "ABC1234")]
    string: String,
    /// Plate size as WxH.
    #[arg(long, default_value = "120x40", value_parser = parse_dims)]
    plate_dims: (usize, usize),
    /// Frame-0 plate center as X,Y (default: left of center).
    #[arg(long, value_parser = parse_pair)]
    start: Option<(f64, f64)>,
    /// `linear:VX,VY` or `sin:AMP,PERIOD`.
    #[arg(long, default_value = "linear:2,0", value_parser = parse_motion)]
    motion: Motion,
    /// Per-pixel Gaussian noise sigma on the 8-bit scale.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Number of distractor rectangles.
    #[arg(long, default_value_t = 6)]
    clutter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Config file; falls back to $ONESHOT_CONFIG, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set select.strategy=single`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    #[arg(long)]
    dump_patches: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run output directory or a detections file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth file.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_IOU)]
    iou: f64,
    #[arg(long, default_value_t = 7)]
    min_chars: usize,
    #[arg(long, default_value = "all-point")]
    ap_method: ApMethod,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    Ok((w, h))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected A,B")?;
    Ok((
        a.trim().parse().map_err(|_| format!("bad number {a:?}"))?,
        b.trim().parse().map_err(|_| format!("bad number {b:?}"))?,
    ))
}

fn parse_motion(s: &str) -> Result<Motion, String> {
    let (kind, args) = s
        .split_once(':')
        .ok_or("expected linear:VX,VY or sin:AMP,PERIOD")?;
    let (a, b) = parse_pair(args)?;
    match kind {
        "linear" => Ok(Motion::Linear { vx: a, vy: b }),
        "sin" => Ok(Motion::Sinusoidal { amp: a, period: b }),
        _ => Err(format!("unknown motion {kind:?}")),
    }
}

enum Failure {
    Validation(String),
    Backend(String),
}

impl Failure {
    fn validation(e: impl std::fmt::Display) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_backend_failure() {
            Failure::Backend(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn synth_cmd(a: SynthArgs) -> Result<(), Failure> {
    let defaults = SceneConfig::default();
    let cfg = SceneConfig {
        seed: a.seed,
        frames: a.frames,
        frame_dims: a.dims,
        plate_string: a.string,
        plate_dims: a.plate_dims,
        start: a.start.map_or(defaults.start, |(x, y)| Point::new(x, y)),
        motion: a.motion,
        noise_sigma: a.noise,
        background: Background::Clutter(a.clutter),
        ..defaults
    };
    let scene = synth::generate_scene(&cfg).map_err(Failure::validation)?;
    scene.write_to(&a.out).map_err(Failure::validation)?;
    println!("wrote {} frames to {}", scene.video.len(), a.out.display());
    Ok(())
}

fn load_config(a: &RunArgs) -> Result<PipelineConfig, Failure> {
    let path = a
        .config
        .clone()
        .or_else(|| std::env::var_os(pipeline::CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(&p).map_err(Failure::validation)?,
        None => PipelineConfig::default(),
    };
    for kv in &a.overrides {
        cfg.apply_override(kv)
            .map_err(|e| Failure::Validation(format!("--set: {e}")))?;
    }
    cfg.frames_ref = Some(a.frames.clone());
    Ok(cfg)
}

fn run_cmd(a: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&a)?;
    let video = videoio::load_sequence(&a.frames)
        .map_err(|e| Failure::Validation(format!("--frames: {e}")))?;
    let anns = videoio::load_annotations(&a.annotations, Some(video.dims()))
        .map_err(|e| Failure::Validation(format!("--annotations: {e}")))?;
    let backends = Backends::from_config(&cfg)?;
    let dumps = Dumps {
        masks: a.dump_masks,
        patches: a.dump_patches,
    };
    let out = pipeline::run_with(&video, &anns, &cfg, &backends, &dumps)?;
    out.write(&a.out)
        .map_err(|e| Failure::Validation(format!("--out: {e}")))?;
    for m in &out.misses {
        eprintln!(
            "miss: frame {} instance {} at {}: {}",
            m.frame, m.instance, m.stage, m.reason
        );
    }
    println!(
        "{} detections over {} frames; plates: {}",
        out.detections.len(),
        video.len(),
        if out.final_plates.is_empty() {
            "none".to_string()
        } else {
            out.final_plates
                .iter()
                .map(|(i, p)| format!("{i}={p}"))
                .collect::<Vec<_>>()
                .join(", ")
        }
    );
    Ok(())
}

/// Per-instance plates from the per-frame `plate` fields of a detections file.
fn plates_from_records(dets: &[videoio::DetectionRecord]) -> BTreeMap<u32, String> {
    let results: Vec<RecognitionResult> = dets
        .iter()
        .map(|d| RecognitionResult {
            frame_index: d.frame,
            instance_id: d.instance,
            caption: String::new(),
            plate: d.plate.clone(),
            prompt_id: Default::default(),
            confidence: d.confidence,
        })
        .collect();
    let mut ids: Vec<u32> = dets.iter().map(|d| d.instance).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .filter_map(|i| {
            recognize::recognize_sequence(&results, i)
                .ok()
                .map(|p| (i, p))
        })
        .collect()
}

fn load_predictions(
    pred: &Path,
) -> Result<(Vec<videoio::DetectionRecord>, BTreeMap<u32, String>), Failure> {
    let bad = |e: videoio::VideoIoError| Failure::Validation(format!("--pred: {e}"));
    if pred.is_dir() {
        let dets = videoio::load_detections(pred.join(pipeline::DETECTIONS_FILE)).map_err(bad)?;
        let plates_path = pred.join(pipeline::PLATES_FILE);
        let plates = if plates_path.exists() {
            pipeline::load_plates(&plates_path).map_err(bad)?
        } else {
            plates_from_records(&dets)
        };
        Ok((dets, plates))
    } else {
        let dets = videoio::load_detections(pred).map_err(bad)?;
        let plates = plates_from_records(&dets);
        Ok((dets, plates))
    }
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Failure::Validation(format!(
            "--iou: {} is not in (0, 1]",
            a.iou
        )));
    }
    let (dets, plates) = load_predictions(&a.pred)?;
    let gts = videoio::load_ground_truth(&a.truth)
        .map_err(|e| Failure::Validation(format!("--truth: {e}")))?;
    let cfg = EvalConfig {
        iou: a.iou,
        min_chars: a.min_chars,
        ap_method: a.ap_method,
    };
    let report = eval::evaluate(&dets, &gts, &plates, &cfg).map_err(Failure::validation)?;
    print!("{report}");
    if let Some(out) = a.out {
        let text = serde_json::to_string_pretty(&report).map_err(Failure::validation)? + "\n";
        std::fs::write(&out, text).map_err(|e| Failure::Validation(format!("--out: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Version => {
            println!("oneshot {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Backend(msg)) => {
            eprintln!("backend failure: {msg}");
            ExitCode::from(2)
        }
    }
}
