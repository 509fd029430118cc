//! Projective and epipolar geometry.

pub mod camera;
pub mod essential;
pub mod five_point;
pub mod rotation;
pub mod similarity;
pub mod triangulate;

pub use camera::{project, project_normalized, CameraIntrinsics, Pose};
pub use essential::{
    decompose_essential, eight_point, estimate_relative_pose, refine_relative_pose, Correspondence, Decomposition, EssentialMatrix,
    MinimalSolver, PoseCandidate, RansacConfig, RelativePose,
};
pub use rotation::Rotation;
pub use similarity::{umeyama_similarity, Similarity};
pub use triangulate::{max_ray_angle, triangulate_linear};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("inlier ratio {ratio:.3} below floor {floor:.3}")]
    InsufficientInliers { ratio: f64, floor: f64 },
    #[error("no pose candidate wins the cheirality test")]
    CheiralityTie(Box<[PoseCandidate; 4]>),
    #[error("maximum ray angle {0:.3e} rad below parallax floor")]
    LowParallax(f64),
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("degenerate point set: {0}")]
    DegenerateSet(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("distortion model cannot be inverted at this point")]
    DistortionNotInvertible,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}
