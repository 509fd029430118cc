//! Synthetic sequences with ground truth, accuracy metrics and reports.

mod io;
mod metrics;
mod report;
mod synthetic;

pub use io::{parse_gt_points, parse_kitti, parse_tum, write_gt_points};
pub use metrics::{associate, ate_rmse, ate_rmse_segments, count_breaks, depth_rmse, AteResult, SegmentedAte};
pub use report::EvalReport;
pub use synthetic::{
    generate_sequence, mean_pair_parallax, render_frame, GeneratorOptions, MotionProfile, Plane, ProfileKind,
    SyntheticScene, SyntheticSequence,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("need at least 3 associated poses, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate alignment: {0}")]
    DegenerateSet(String),
    #[error("no track ids shared with the ground truth")]
    NoAssociations,
    #[error("no scene point is visible in two or more frames")]
    EmptyVisibility,
    #[error("invalid generator input: {0}")]
    InvalidInput(String),
}
