//! Frames, sequences and the on-disk formats for annotations, detections and ground truth.
//!
//! * frame directory: `frame_%05d.ppm`, binary P6, maxval 255
//! * annotations: one JSON object `{"query_points": [{"instance", "x", "y"}, ...]}`
//! * detections / ground truth: JSON lines, one record per line

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BBox, Point};
use crate::raster::{NetpbmError, RgbImage};

#[derive(Debug, Error)]
pub enum VideoIoError {
    #[error("frame {0} is missing from the sequence")]
    MissingFrame(usize),
    #[error("frame {index} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{path}: {source}")]
    MalformedPpm {
        path: PathBuf,
        #[source]
        source: NetpbmError,
    },
    #[error("no frames found in {0}")]
    EmptySequence(PathBuf),
    #[error("parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },
    #[error(
        "query point ({x}, {y}) of instance {instance} lies outside the {width}x{height} frame"
    )]
    OutOfBounds {
        instance: u32,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VideoIoError {
    fn parse(line: Option<usize>, msg: impl Into<String>) -> Self {
        VideoIoError::Parse {
            line,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    pub image: RgbImage,
}

impl Frame {
    pub fn new(index: usize, image: RgbImage) -> Self {
        Self { index, image }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn pixels(&self) -> &[u8] {
        self.image.as_raw()
    }
}

/// Non-empty, uniformly sized frames indexed `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoSequence {
    frames: Vec<Frame>,
}

impl VideoSequence {
    /// Builds a sequence from images, assigning indices in order.
    pub fn from_images(images: Vec<RgbImage>) -> Result<Self, VideoIoError> {
        let frames = images
            .into_iter()
            .enumerate()
            .map(|(i, img)| Frame::new(i, img))
            .collect();
        Self::from_frames(frames)
    }

    pub fn from_frames(frames: Vec<Frame>) -> Result<Self, VideoIoError> {
        let first = frames
            .first()
            .ok_or_else(|| VideoIoError::EmptySequence(PathBuf::new()))?;
        let dims = (first.width(), first.height());
        for (i, f) in frames.iter().enumerate() {
            if f.index != i {
                return Err(VideoIoError::MissingFrame(i));
            }
            if (f.width(), f.height()) != dims {
                return Err(VideoIoError::DimensionMismatch {
                    index: i,
                    expected: dims,
                    found: (f.width(), f.height()),
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &Frame {
        &self.frames[index]
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    #[serde(rename = "instance")]
    pub instance_id: u32,
    pub x: f64,
    pub y: f64,
}

impl QueryAnnotation {
    pub fn new(instance_id: u32, x: f64, y: f64) -> Self {
        Self { instance_id, x, y }
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), VideoIoError> {
        if self.point().in_bounds(width, height) {
            Ok(())
        } else {
            Err(VideoIoError::OutOfBounds {
                instance: self.instance_id,
                x: self.x,
                y: self.y,
                width,
                height,
            })
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    query_points: Vec<QueryAnnotation>,
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    pub instance: u32,
    pub bbox: BBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<String>,
}

/// One line of a ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    #[serde(rename = "frame")]
    pub frame_index: usize,
    #[serde(rename = "instance")]
    pub instance_id: u32,
    pub bbox: BBox,
    #[serde(rename = "plate")]
    pub plate_string: String,
}

impl GroundTruthRecord {
    fn check(&self) -> Result<(), String> {
        if !self.bbox.is_well_formed() {
            return Err(format!("degenerate bbox {:?}", self.bbox));
        }
        if self.plate_string.is_empty() {
            return Err("empty plate string".into());
        }
        Ok(())
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

fn parse_frame_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".ppm")?;
    if digits.len() < 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Loads `frame_00000.ppm`, `frame_00001.ppm`, … from `dir`.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<VideoSequence, VideoIoError> {
    let dir = dir.as_ref();
    let mut indexed: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if let Some(idx) = entry.file_name().to_str().and_then(parse_frame_name) {
            indexed.push((idx, entry.path()));
        }
    }
    if indexed.is_empty() {
        return Err(VideoIoError::EmptySequence(dir.to_path_buf()));
    }
    indexed.sort_by_key(|(i, _)| *i);
    for (expected, (idx, _)) in indexed.iter().enumerate() {
        if *idx != expected {
            return Err(VideoIoError::MissingFrame(expected));
        }
    }
    let mut frames = Vec::with_capacity(indexed.len());
    for (idx, path) in indexed {
        let bytes = fs::read(&path)?;
        let image = RgbImage::from_ppm_bytes(&bytes)
            .map_err(|source| VideoIoError::MalformedPpm { path, source })?;
        frames.push(Frame::new(idx, image));
    }
    VideoSequence::from_frames(frames)
}

pub fn save_sequence(video: &VideoSequence, dir: impl AsRef<Path>) -> Result<(), VideoIoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for f in video.frames() {
        let w = BufWriter::new(File::create(dir.join(frame_file_name(f.index)))?);
        f.image.write_ppm(w)?;
    }
    Ok(())
}

pub fn parse_annotations(text: &str) -> Result<Vec<QueryAnnotation>, VideoIoError> {
    let file: AnnotationFile = serde_json::from_str(text)
        .map_err(|e| VideoIoError::parse(Some(e.line()), e.to_string()))?;
    if file.query_points.is_empty() {
        return Err(VideoIoError::parse(None, "no query points"));
    }
    Ok(file.query_points)
}

/// Reads an annotation file, validating coordinates against `frame_dims` when given.
pub fn load_annotations(
    path: impl AsRef<Path>,
    frame_dims: Option<(usize, usize)>,
) -> Result<Vec<QueryAnnotation>, VideoIoError> {
    let anns = parse_annotations(&fs::read_to_string(path)?)?;
    if let Some((w, h)) = frame_dims {
        for a in &anns {
            a.validate(w, h)?;
        }
    }
    Ok(anns)
}

pub fn save_annotations(
    anns: &[QueryAnnotation],
    path: impl AsRef<Path>,
) -> Result<(), VideoIoError> {
    let file = AnnotationFile {
        query_points: anns.to_vec(),
    };
    let text =
        serde_json::to_string(&file).map_err(|e| VideoIoError::parse(None, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), VideoIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| VideoIoError::parse(None, e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<Vec<(usize, T)>, VideoIoError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| VideoIoError::parse(Some(i + 1), e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn save_detections(
    dets: &[DetectionRecord],
    path: impl AsRef<Path>,
) -> Result<(), VideoIoError> {
    write_jsonl(dets, path.as_ref())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>, VideoIoError> {
    Ok(read_jsonl(path.as_ref())?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

pub fn save_ground_truth(
    records: &[GroundTruthRecord],
    path: impl AsRef<Path>,
) -> Result<(), VideoIoError> {
    write_jsonl(records, path.as_ref())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRecord>, VideoIoError> {
    read_jsonl::<GroundTruthRecord>(path.as_ref())?
        .into_iter()
        .map(|(line, r)| {
            r.check()
                .map(|_| r)
                .map_err(|msg| VideoIoError::parse(Some(line), msg))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_image(w: usize, h: usize, seed: u8) -> RgbImage {
        let data = (0..w * h * 3)
            .map(|i| (i as u8).wrapping_mul(seed))
            .collect();
        RgbImage::from_raw(w, h, data).unwrap()
    }

    fn write_frame(dir: &Path, idx: usize, img: &RgbImage) {
        fs::write(dir.join(frame_file_name(idx)), img.to_ppm_bytes()).unwrap();
    }

    #[test]
    fn loads_thirty_frames_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for i in (0..30).rev() {
            write_frame(dir.path(), i, &frame_image(8, 6, i as u8 + 1));
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.len(), 30);
        for (i, f) in seq.frames().iter().enumerate() {
            assert_eq!(f.index, i);
            assert_eq!(f.image, frame_image(8, 6, i as u8 + 1));
        }
    }

    #[test]
    fn gap_in_numbering_is_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        for i in [0, 1, 3] {
            write_frame(dir.path(), i, &frame_image(4, 4, 1));
        }
        assert!(matches!(
            load_sequence(dir.path()),
            Err(VideoIoError::MissingFrame(2))
        ));
    }

    #[test]
    fn odd_sized_frame_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..8 {
            let img = if i == 5 {
                frame_image(100, 50, 3)
            } else {
                frame_image(200, 100, 3)
            };
            write_frame(dir.path(), i, &img);
        }
        assert!(matches!(
            load_sequence(dir.path()),
            Err(VideoIoError::DimensionMismatch { index: 5, .. })
        ));
    }

    #[test]
    fn truncated_ppm_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(frame_file_name(0)), b"P6\n4 4\n255\nabc").unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(VideoIoError::MalformedPpm { .. })
        ));
    }

    #[test]
    fn annotation_parsing() {
        let anns =
            parse_annotations(r#"{"query_points":[{"instance":0,"x":812.0,"y":604.5}]}"#).unwrap();
        assert_eq!(anns, vec![QueryAnnotation::new(0, 812.0, 604.5)]);

        let err = parse_annotations(r#"{"query_points":[]}"#).unwrap_err();
        assert!(err.to_string().contains("no query points"));

        let bad = QueryAnnotation::new(0, -1.0, 3.0);
        assert!(matches!(
            bad.validate(10, 10),
            Err(VideoIoError::OutOfBounds { .. })
        ));
        assert!(QueryAnnotation::new(0, 9.5, 0.0).validate(10, 10).is_ok());
    }

    #[test]
    fn detections_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let dets = vec![DetectionRecord {
            frame: 3,
            instance: 1,
            bbox: BBox::new(1.0, 2.5, 10.0, 20.25),
            confidence: 0.6,
            plate: Some("ABC1234".into()),
        }];
        save_detections(&dets, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert_eq!(load_detections(&path).unwrap(), dets);

        save_detections(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(load_detections(&path).unwrap().is_empty());

        fs::write(
            &path,
            "{\"frame\":0,\"instance\":0,\"bbox\":[0,0,1,1],\"confidence\":1}\n{oops\n",
        )
        .unwrap();
        match load_detections(&path) {
            Err(VideoIoError::Parse { line: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ground_truth_requires_plate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        fs::write(&path, "{\"frame\":0,\"instance\":0,\"bbox\":[0,0,1,1]}\n").unwrap();
        assert!(load_ground_truth(&path).is_err());
        fs::write(
            &path,
            "{\"frame\":0,\"instance\":0,\"bbox\":[0,0,1,1],\"plate\":\"\"}\n",
        )
        .unwrap();
        assert!(load_ground_truth(&path).is_err());
    }
}
