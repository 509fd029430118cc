//! Front-end: corners, optical flow tracking, track table and keyframes.

pub mod corners;
pub mod image;
pub mod keyframe;
pub mod lk;
pub mod tracks;

pub use corners::{detect_corners, Corner, CornerConfig};
pub use image::{Frame, GrayImage};
pub use keyframe::{decide_keyframe, select_keyframes, KeyframeDecision, KeyframePolicy, KeyframeReason};
pub use lk::{track_bidirectional, LkConfig, TrackResult, TrackStatus};
pub use tracks::{Track, TrackId, TrackObservation, TrackTable, Tracker, TrackerConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("empty image")]
    EmptyImage,
    #[error("image dimensions differ: {prev:?} vs {next:?}")]
    DimensionMismatch { prev: (usize, usize), next: (usize, usize) },
    #[error("expected frame {expected}, got {got}")]
    NonContiguousFrame { expected: usize, got: usize },
    #[error("track {track} is not contiguous at frame {frame}")]
    NonContiguousTrack { track: TrackId, frame: usize },
    #[error("track {track} leaves the image at frame {frame}")]
    OutOfBounds { track: TrackId, frame: usize },
    #[error("tracks {a} and {b} share a coordinate at frame {frame}")]
    DuplicateObservation { a: TrackId, b: TrackId, frame: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
