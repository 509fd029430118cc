//! Windowed global structure-from-motion for low-parallax monocular video.
//!
//! Keyframes are grouped into short temporal windows. Each window is solved
//! as a small global SfM problem: pairwise epipolar geometry, rotation
//! averaging, translation averaging, linear triangulation and bundle
//! adjustment. Windows are then chained together with similarity
//! alignment.

pub mod geometry;
pub mod tracking;
pub mod viewgraph;
pub mod averaging;
pub mod bundle;
pub mod eval;
pub mod config;
pub mod pipeline;
