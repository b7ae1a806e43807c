//! Detection and recognition metrics: IoU matching, precision/recall/F1,
//! average precision and character-level plate accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;
use crate::videoio::{DetectionRecord, GroundTruthRecord};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
    #[error("unknown AP method {0:?}")]
    UnknownApMethod(String),
}

/// Intersection over union of two well-formed boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, EvalError> {
    for bx in [a, b] {
        if !bx.is_well_formed() {
            return Err(EvalError::DegenerateBox(*bx));
        }
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Indices refer to the input slices.
    pub matched_pairs: Vec<MatchedPair>,
    /// `(confidence, is_true_positive)` in descending confidence order.
    pub ranked: Vec<(f64, bool)>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.tp + self.fn_
    }

    /// Pools the counts and rankings of several independently matched sets
    /// (for example one per video). Pair indices are dropped.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a MatchResult>) -> MatchResult {
        let mut out = MatchResult::default();
        for p in parts {
            out.tp += p.tp;
            out.fp += p.fp;
            out.fn_ += p.fn_;
            out.ranked.extend_from_slice(&p.ranked);
        }
        out.ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        out
    }
}

/// Greedy matching in descending confidence order: each detection claims the
/// unmatched ground truth of highest IoU (at least `iou_threshold`) in its frame.
/// Equal confidences keep input order.
pub fn match_detections(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry(g.frame_index).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for &g in by_frame.get(&det.frame).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[g] {
                continue;
            }
            let Ok(v) = iou(&det.bbox, &gts[g].bbox) else {
                continue;
            };
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                result.tp += 1;
                result.matched_pairs.push(MatchedPair {
                    detection: d,
                    ground_truth: g,
                    iou: v,
                });
                result.ranked.push((det.confidence, true));
            }
            None => {
                result.fp += 1;
                result.ranked.push((det.confidence, false));
            }
        }
    }
    result.fn_ = gts.len() - result.tp;
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when there were no detections and precision was defined as 0.
    pub precision_undefined: bool,
    /// Set when there was no ground truth and recall was defined as 0.
    pub recall_undefined: bool,
}

pub fn precision_recall_f1(m: &MatchResult) -> Prf {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_undefined) = ratio(m.tp, m.tp + m.fp);
    let (recall, recall_undefined) = ratio(m.tp, m.tp + m.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    #[default]
    AllPoint,
    ElevenPoint,
}

impl FromStr for ApMethod {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_point" | "all-point" => Ok(ApMethod::AllPoint),
            "11_point" | "11-point" | "eleven_point" => Ok(ApMethod::ElevenPoint),
            other => Err(EvalError::UnknownApMethod(other.to_string())),
        }
    }
}

impl fmt::Display for ApMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMethod::AllPoint => "all_point",
            ApMethod::ElevenPoint => "11_point",
        })
    }
}

/// Area under the interpolated precision/recall curve of a ranked list.
pub fn ap_from_ranked(
    ranked: &[(f64, bool)],
    num_gt: usize,
    method: ApMethod,
) -> Result<f64, EvalError> {
    if num_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (i, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope: best precision at this recall or beyond
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    Ok(match method {
        ApMethod::AllPoint => {
            let mut prev_recall = 0.0;
            let mut ap = 0.0;
            for &(r, p) in &curve {
                ap += (r - prev_recall) * p;
                prev_recall = r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let level = k as f64 / 10.0;
                    curve
                        .iter()
                        .find(|(r, _)| *r >= level - 1e-12)
                        .map_or(0.0, |&(_, p)| p)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

pub fn average_precision(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    iou_threshold: f64,
    method: ApMethod,
) -> Result<f64, EvalError> {
    let m = match_detections(dets, gts, iou_threshold);
    ap_from_ranked(&m.ranked, gts.len(), method)
}

/// Positions at which both strings agree; a length difference counts against.
pub fn char_match_count(pred: &str, gt: &str) -> usize {
    pred.chars().zip(gt.chars()).filter(|(a, b)| a == b).count()
}

/// Fraction of instances whose predicted plate agrees with the truth in at
/// least `min_chars` positions. Missing predictions count as wrong.
pub fn recognition_accuracy<'a, I>(pairs: I, min_chars: usize) -> f64
where
    I: IntoIterator<Item = (Option<&'a str>, &'a str)>,
{
    let (mut hits, mut total) = (0usize, 0usize);
    for (pred, gt) in pairs {
        total += 1;
        if pred.is_some_and(|p| char_match_count(p, gt) >= min_chars) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou: f64,
    pub min_chars: usize,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou: DEFAULT_IOU,
            min_chars: 7,
            ap_method: ApMethod::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ap_method: ApMethod,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub num_tp: usize,
    pub num_fp: usize,
    pub num_fn: usize,
    pub num_gt: usize,
    pub acc6: f64,
    pub acc7: f64,
    pub min_chars: usize,
    pub acc: f64,
    pub num_instances: usize,
    pub num_recognized: usize,
}

/// Full report for one set of detections and plate predictions.
///
/// `plates` maps instance id to the sequence-level plate; ground-truth plates
/// come from the first record of each instance.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    plates: &BTreeMap<u32, String>,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let m = match_detections(dets, gts, cfg.iou);
    evaluate_matched(&m, &instance_pairs(gts, plates), cfg)
}

/// `(predicted, truth)` plate pairs, one per ground-truth instance.
pub fn instance_pairs(
    gts: &[GroundTruthRecord],
    plates: &BTreeMap<u32, String>,
) -> Vec<(Option<String>, String)> {
    let mut truth: BTreeMap<u32, &str> = BTreeMap::new();
    for g in gts {
        truth.entry(g.instance_id).or_insert(&g.plate_string);
    }
    truth
        .into_iter()
        .map(|(inst, gt)| (plates.get(&inst).cloned(), gt.to_string()))
        .collect()
}

/// Report from pre-matched detections (possibly merged over many videos) and
/// per-instance plate pairs.
pub fn evaluate_matched(
    m: &MatchResult,
    plate_pairs: &[(Option<String>, String)],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let prf = precision_recall_f1(m);
    let ap = ap_from_ranked(&m.ranked, m.num_gt(), cfg.ap_method)?;
    let pairs = || plate_pairs.iter().map(|(p, g)| (p.as_deref(), g.as_str()));
    Ok(EvalReport {
        iou_threshold: cfg.iou,
        ap_method: cfg.ap_method,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        ap,
        precision_undefined: prf.precision_undefined,
        recall_undefined: prf.recall_undefined,
        num_tp: m.tp,
        num_fp: m.fp,
        num_fn: m.fn_,
        num_gt: m.num_gt(),
        acc6: recognition_accuracy(pairs(), 6),
        acc7: recognition_accuracy(pairs(), 7),
        min_chars: cfg.min_chars,
        acc: recognition_accuracy(pairs(), cfg.min_chars),
        num_instances: plate_pairs.len(),
        num_recognized: plate_pairs.iter().filter(|(p, _)| p.is_some()).count(),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        writeln!(
            f,
            "detection (IoU >= {}, AP {})",
            self.iou_threshold, self.ap_method
        )?;
        writeln!(f, "  P      R      F1     AP")?;
        writeln!(
            f,
            "  {} {} {} {}",
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.ap)
        )?;
        writeln!(
            f,
            "  TP {}  FP {}  FN {}  GT {}",
            self.num_tp, self.num_fp, self.num_fn, self.num_gt
        )?;
        writeln!(
            f,
            "recognition ({} instances, {} with a plate)",
            self.num_instances, self.num_recognized
        )?;
        writeln!(f, "  Acc>=6 {}  Acc>=7 {}", pct(self.acc6), pct(self.acc7))?;
        if self.min_chars != 6 && self.min_chars != 7 {
            writeln!(f, "  Acc>={} {}", self.min_chars, pct(self.acc))?;
        }
        Ok(())
    }
}
