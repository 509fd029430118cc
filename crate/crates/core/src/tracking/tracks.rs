//! Feature track table and its text format.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::Vector2;

use super::corners::{detect_corners_excluding, CornerConfig};
use super::image::Frame;
use super::lk::{track_bidirectional_pyr, LkConfig, Pyramid, TrackStatus};
use super::TrackingError;

pub type TrackId = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub frame: usize,
    pub point: Vector2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Track {
    pub observations: Vec<TrackObservation>,
    /// Forward-backward error of each extension, one entry per observation
    /// after the first.
    pub fb_errors: Vec<f64>,
    pub alive: bool,
}

impl Track {
    pub fn first_frame(&self) -> Option<usize> {
        self.observations.first().map(|o| o.frame)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.observations.last().map(|o| o.frame)
    }

    /// Observation at `frame`, by binary search over the contiguous range.
    pub fn at(&self, frame: usize) -> Option<Vector2<f64>> {
        let first = self.first_frame()?;
        let idx = frame.checked_sub(first)?;
        self.observations.get(idx).map(|o| o.point)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackTable {
    pub tracks: BTreeMap<TrackId, Track>,
    next_id: TrackId,
}

impl TrackTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn alive_ids(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.tracks.iter().filter(|(_, t)| t.alive).map(|(id, _)| *id)
    }

    pub fn spawn(&mut self, frame: usize, point: Vector2<f64>) -> TrackId {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.insert(
            id,
            Track { observations: vec![TrackObservation { frame, point }], fb_errors: Vec::new(), alive: true },
        );
        id
    }

    /// Appends an observation, enforcing contiguity.
    pub fn push(&mut self, id: TrackId, frame: usize, point: Vector2<f64>) -> Result<(), TrackingError> {
        let track = self.tracks.entry(id).or_insert_with(|| Track { alive: true, ..Default::default() });
        if let Some(last) = track.last_frame() {
            if frame != last + 1 {
                return Err(TrackingError::NonContiguousTrack { track: id, frame });
            }
        }
        track.observations.push(TrackObservation { frame, point });
        self.next_id = self.next_id.max(id + 1);
        Ok(())
    }

    /// Largest frame index observed.
    pub fn last_frame(&self) -> Option<usize> {
        self.tracks.values().filter_map(|t| t.last_frame()).max()
    }

    /// `(track_id, point)` observed at `frame`, ordered by id.
    pub fn observations_at(&self, frame: usize) -> Vec<(TrackId, Vector2<f64>)> {
        self.tracks.iter().filter_map(|(id, t)| t.at(frame).map(|p| (*id, p))).collect()
    }

    /// Checks ordering, contiguity, bounds (when given) and duplicates.
    pub fn validate(&self, bounds: Option<(f64, f64)>) -> Result<(), TrackingError> {
        // Coordinates closer than 1e-9 px count as identical.
        let mut seen: HashMap<(usize, i64, i64), TrackId> = HashMap::new();
        for (id, track) in &self.tracks {
            for (k, obs) in track.observations.iter().enumerate() {
                if k > 0 && obs.frame != track.observations[k - 1].frame + 1 {
                    return Err(TrackingError::NonContiguousTrack { track: *id, frame: obs.frame });
                }
                if !(obs.point.x.is_finite() && obs.point.y.is_finite()) {
                    return Err(TrackingError::OutOfBounds { track: *id, frame: obs.frame });
                }
                if let Some((w, h)) = bounds {
                    if obs.point.x < 0.0 || obs.point.y < 0.0 || obs.point.x > w || obs.point.y > h {
                        return Err(TrackingError::OutOfBounds { track: *id, frame: obs.frame });
                    }
                }
                let key = (obs.frame, (obs.point.x * 1e9).round() as i64, (obs.point.y * 1e9).round() as i64);
                if let Some(other) = seen.insert(key, *id) {
                    return Err(TrackingError::DuplicateObservation { a: other, b: *id, frame: obs.frame });
                }
            }
        }
        Ok(())
    }

    /// Parses `track_id frame_index x y` lines.
    pub fn parse(text: &str) -> Result<Self, TrackingError> {
        let mut table = TrackTable::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| TrackingError::Parse { line: n + 1, message };
            let fields: Vec<&str> = line.split_ascii_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", fields.len())));
            }
            let id: TrackId = fields[0].parse().map_err(|_| err(format!("bad track id {:?}", fields[0])))?;
            let frame: usize = fields[1].parse().map_err(|_| err(format!("bad frame index {:?}", fields[1])))?;
            let x: f64 = fields[2].parse().map_err(|_| err(format!("bad x {:?}", fields[2])))?;
            let y: f64 = fields[3].parse().map_err(|_| err(format!("bad y {:?}", fields[3])))?;
            if !(x.is_finite() && y.is_finite()) {
                return Err(err("non-finite coordinate".into()));
            }
            if id == TrackId::MAX {
                return Err(err("track id out of range".into()));
            }
            table.push(id, frame, Vector2::new(x, y)).map_err(|e| err(e.to_string()))?;
        }
        table.validate(None)?;
        Ok(table)
    }

    /// Writes observations ordered by track id then frame.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, track) in &self.tracks {
            for obs in &track.observations {
                let _ = writeln!(out, "{} {} {:.9} {:.9}", id, obs.frame, obs.point.x, obs.point.y);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackerConfig {
    pub corners: CornerConfig,
    pub lk: LkConfig,
}

/// Incremental front-end: extends tracks frame by frame with LK and
/// refills with fresh corners.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub table: TrackTable,
    pub cfg: TrackerConfig,
    prev: Option<(usize, Pyramid)>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self { table: TrackTable::new(), cfg, prev: None }
    }

    pub fn advance(&mut self, frame: &Frame) -> Result<(), TrackingError> {
        let img = frame.image.as_ref().ok_or(TrackingError::EmptyImage)?;
        if img.is_empty() {
            return Err(TrackingError::EmptyImage);
        }
        let pyramid = Pyramid::new(img, self.cfg.lk.levels);
        if let Some((prev_index, prev_pyr)) = &self.prev {
            if frame.index != prev_index + 1 {
                return Err(TrackingError::NonContiguousFrame { expected: prev_index + 1, got: frame.index });
            }
            if prev_pyr.width() != pyramid.width() || prev_pyr.height() != pyramid.height() {
                return Err(TrackingError::DimensionMismatch {
                    prev: (prev_pyr.width(), prev_pyr.height()),
                    next: (pyramid.width(), pyramid.height()),
                });
            }
            let alive: Vec<TrackId> = self.table.alive_ids().collect();
            let points: Vec<_> = alive
                .iter()
                .map(|id| self.table.tracks[id].observations.last().expect("alive tracks are non-empty").point)
                .collect();
            let results = track_bidirectional_pyr(prev_pyr, &pyramid, &points, &self.cfg.lk);
            let mut occupied: HashMap<(i64, i64), TrackId> = HashMap::new();
            for (id, res) in alive.iter().zip(results) {
                let track = self.table.tracks.get_mut(id).expect("alive id");
                let key = ((res.point.x * 1e9).round() as i64, (res.point.y * 1e9).round() as i64);
                if res.status != TrackStatus::Tracked || occupied.contains_key(&key) {
                    track.alive = false;
                    continue;
                }
                occupied.insert(key, *id);
                track.observations.push(TrackObservation { frame: frame.index, point: res.point });
                track.fb_errors.push(res.fb_error);
            }
        }
        let existing: Vec<_> = self
            .table
            .alive_ids()
            .map(|id| self.table.tracks[&id].observations.last().expect("non-empty").point)
            .collect();
        let budget = self.cfg.corners.max_corners.saturating_sub(existing.len());
        if budget > 0 {
            let cfg = CornerConfig { max_corners: budget, ..self.cfg.corners };
            for c in detect_corners_excluding(img, &cfg, &existing)? {
                self.table.spawn(frame.index, c.position);
            }
        }
        self.prev = Some((frame.index, pyramid));
        Ok(())
    }
}
