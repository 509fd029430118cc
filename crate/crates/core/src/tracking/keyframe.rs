//! Keyframe designation: every `period` frames, or earlier once the mean
//! displacement of surviving tracks since the last keyframe reaches
//! `flow_threshold` pixels.

use super::tracks::TrackTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeReason {
    SequenceStart,
    SequenceEnd,
    PeriodElapsed,
    FlowThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub frame_index: usize,
    pub reason: KeyframeReason,
    pub mean_flow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePolicy {
    pub period: usize,
    pub flow_threshold: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { period: 30, flow_threshold: 20.0 }
    }
}

pub fn decide_keyframe(
    frame_index: usize,
    frames_since_kf: usize,
    mean_flow: f64,
    policy: &KeyframePolicy,
) -> Option<KeyframeDecision> {
    let reason = if mean_flow >= policy.flow_threshold {
        KeyframeReason::FlowThreshold
    } else if frames_since_kf >= policy.period {
        KeyframeReason::PeriodElapsed
    } else {
        return None;
    };
    Some(KeyframeDecision { frame_index, reason, mean_flow: mean_flow.max(0.0) })
}

/// Mean displacement between `from` and `to` over tracks seen in both.
pub fn mean_displacement(table: &TrackTable, from: usize, to: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for track in table.tracks.values() {
        if let (Some(a), Some(b)) = (track.at(from), track.at(to)) {
            sum += (b - a).norm();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Keyframes over `first..=last`; the first and last frames are always
/// keyframes.
pub fn select_keyframes(table: &TrackTable, first: usize, last: usize, policy: &KeyframePolicy) -> Vec<KeyframeDecision> {
    let mut out = vec![KeyframeDecision { frame_index: first, reason: KeyframeReason::SequenceStart, mean_flow: 0.0 }];
    let mut last_kf = first;
    for frame in first + 1..=last {
        let flow = mean_displacement(table, last_kf, frame).unwrap_or(0.0);
        if let Some(d) = decide_keyframe(frame, frame - last_kf, flow, policy) {
            out.push(d);
            last_kf = frame;
        }
    }
    if last > last_kf {
        let mean_flow = mean_displacement(table, last_kf, last).unwrap_or(0.0);
        out.push(KeyframeDecision { frame_index: last, reason: KeyframeReason::SequenceEnd, mean_flow });
    }
    out
}
