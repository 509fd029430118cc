//! Motion averaging: global rotations from pairwise rotations, then global
//! positions from pairwise translation directions and camera-to-point rays.

mod rotations;
mod translations;

pub use rotations::{average_rotations, huber, robust_objective, RotationConfig, RotationEstimateSet};
pub use translations::{
    average_translations, build_camera_point_constraints, linear_nullity, PointTrackConstraint, PositionEstimateSet,
    TranslationConfig,
};

use nalgebra::{Unit, Vector3};
use thiserror::Error;

use crate::geometry::Rotation;
use crate::viewgraph::Window;

#[derive(Debug, Error, PartialEq)]
pub enum AveragingError {
    #[error("averaging graph is disconnected")]
    Disconnected,
    #[error("translation problem is underconstrained (nullspace dimension {0})")]
    Underconstrained(usize),
    #[error("empty averaging problem")]
    Empty,
}

/// Pairwise constraint `R_j = R_ij R_i`, direction `R_j (C_i - C_j)` up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingEdge {
    pub i: usize,
    pub j: usize,
    pub rotation: Rotation,
    pub direction: Unit<Vector3<f64>>,
    pub translation_reliable: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragingProblem {
    pub n_nodes: usize,
    pub edges: Vec<AveragingEdge>,
}

impl AveragingProblem {
    pub fn from_window(window: &Window) -> Self {
        let edges = window
            .edges
            .iter()
            .map(|e| AveragingEdge {
                i: e.i,
                j: e.j,
                rotation: e.rel.rotation,
                direction: e.rel.direction,
                translation_reliable: e.translation_reliable,
                weight: e.rel.edge_weight,
            })
            .collect();
        Self { n_nodes: window.keyframes.len(), edges }
    }
}

pub(crate) struct UnionFind(Vec<usize>);

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// Returns false when already joined.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        self.0[a.max(b)] = a.min(b);
        true
    }
}
