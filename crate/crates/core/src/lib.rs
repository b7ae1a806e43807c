//! Point-prompted license plate tracking, segmentation and recognition in video.
//!
//! A single annotated point on the plate in the first frame is expanded into a
//! set of tracking points, tracked through the sequence, used to prompt a
//! segmenter in every frame, and the segmented plate is read by a recognizer.
//! Built-in desk-scale backends cover every stage; external services can be
//! plugged in behind the backend traits.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod font;
pub mod geom;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod recognize;
pub mod segment;
pub mod select;
pub mod synth;
pub mod track;
pub mod transport;
pub mod videoio;

pub use geom::{BBox, Point};
pub use par::Exec;
pub use raster::{GrayImage, RgbImage};
pub use videoio::{Frame, VideoSequence};
