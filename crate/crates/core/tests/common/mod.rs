#![allow(dead_code)]

use winsfm::config::PipelineConfig;
use winsfm::eval::{generate_sequence, GeneratorOptions, MotionProfile, ProfileKind, SyntheticScene, SyntheticSequence};
use winsfm::pipeline::{run_pipeline, PipelineOutput};

pub struct Run {
    pub seq: SyntheticSequence,
    pub out: PipelineOutput,
    pub ate_m: f64,
    pub depth_cm: f64,
    pub seconds: f64,
}

pub fn sequence(kind: ProfileKind, length: f64, frames: Option<usize>, noise_px: f64, seed: u64) -> SyntheticSequence {
    sequence_with_gap(kind, length, frames, noise_px, seed, None)
}

pub fn sequence_with_gap(
    kind: ProfileKind,
    length: f64,
    frames: Option<usize>,
    noise_px: f64,
    seed: u64,
    gap: Option<std::ops::Range<usize>>,
) -> SyntheticSequence {
    let mut profile = MotionProfile::new(kind, length);
    profile.seed = seed;
    let scene = SyntheticScene::replica(&profile, seed);
    let n = frames.unwrap_or_else(|| profile.default_frames());
    generate_sequence(&scene, &profile, n, &GeneratorOptions { noise_px, seed, gap }).expect("sequence")
}

pub fn run(seq: SyntheticSequence, cfg: &PipelineConfig) -> Run {
    let start = std::time::Instant::now();
    let out = run_pipeline(&seq.table, &seq.timestamps, &seq.intrinsics, cfg).expect("pipeline");
    let seconds = start.elapsed().as_secs_f64();
    let report = out.report(cfg, Some(&seq.gt_trajectory()), Some(&seq.gt_points)).expect("report");
    Run {
        ate_m: report.ate_rmse_m.unwrap(),
        depth_cm: report.depth_rmse_cm.unwrap(),
        seq,
        out,
        seconds,
    }
}
