//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIP line per
//! criterion and exits non-zero when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Point3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use winsfm::averaging::{
    average_rotations, average_translations, AveragingEdge, AveragingError, AveragingProblem, PointTrackConstraint,
    RotationConfig, RotationEstimateSet, TranslationConfig,
};
use winsfm::bundle::{reprojection_jacobian, reprojection_residual, LmSummary};
use winsfm::config::PipelineConfig;
use winsfm::eval::{ate_rmse, parse_kitti, ProfileKind};
use winsfm::geometry::{rotation, CameraIntrinsics, Pose, Rotation};
use winsfm::pipeline::{run_on_frames, run_pipeline, PipelineError};
use winsfm::tracking::image::{list_frames, parse_times, read_image};
use winsfm::tracking::Frame;

use common::Run;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

#[derive(Default)]
struct Ledger {
    failures: usize,
    lines: Vec<(String, String)>,
}

impl Ledger {
    fn record(&mut self, id: &str, title: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        let line = format!("{tag} criterion {id} {title}: {detail}");
        eprintln!("{line}");
        self.lines.push((id.to_string(), line));
    }

    fn check(&mut self, id: &str, title: &str, ok: bool, detail: String) {
        self.record(id, title, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }
}

/// Every window and refinement solve seen by the suite.
#[derive(Default)]
struct SolveLog {
    summaries: Vec<LmSummary>,
    window_iterations: Vec<usize>,
}

impl SolveLog {
    /// `default_config` runs also count towards the iteration bound.
    fn absorb(&mut self, run: &Run, default_config: bool) {
        self.summaries.extend(run.out.ba_summaries.iter().cloned());
        self.summaries.extend(run.out.refinements.iter().map(|r| r.summary.clone()));
        if default_config {
            self.window_iterations.extend(run.out.ba_summaries.iter().map(|s| s.iterations));
        }
    }
}

fn path_length(run: &Run) -> f64 {
    run.seq.gt_poses.windows(2).map(|w| (w[1].center - w[0].center).norm()).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const PROFILES: [(ProfileKind, f64); 3] =
    [(ProfileKind::Frontal, 2.0), (ProfileKind::LeftRight, 4.0), (ProfileKind::Egomotion, 3.7)];

fn noiseless_exactness(ledger: &mut Ledger, log: &mut SolveLog, breaks: &mut Vec<(String, usize)>) {
    let seq = common::sequence(ProfileKind::Egomotion, 3.7, Some(600), 0.0, 0);
    let run = common::run(seq, &PipelineConfig::default());
    log.absorb(&run, true);
    breaks.push(("noiseless egomotion".into(), run.out.breaks()));
    let length = path_length(&run);
    let depth_m = run.depth_cm / 100.0;
    let ok = run.ate_m < 1e-6 * length && depth_m < 1e-6 && run.out.breaks() == 0 && run.seconds < 60.0;
    ledger.check(
        "1",
        "noiseless end-to-end exactness",
        ok,
        format!(
            "ATE {:.3e} m (limit {:.3e}), depth {:.3e} m (limit 1e-6), breaks {}, {:.1} s",
            run.ate_m,
            1e-6 * length,
            depth_m,
            run.out.breaks(),
            run.seconds
        ),
    );
}

/// Noisy replica runs, keyed by profile then seed.
fn noisy_depth(ledger: &mut Ledger, log: &mut SolveLog, breaks: &mut Vec<(String, usize)>) -> Vec<Run> {
    let mut total = 0.0;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut egomotion = Vec::new();
    for (kind, length) in PROFILES {
        let mut depths = Vec::new();
        for seed in SEEDS {
            let run = common::run(common::sequence(kind, length, None, 0.5, seed), &PipelineConfig::default());
            total += run.seconds;
            depths.push(run.depth_cm);
            log.absorb(&run, true);
            breaks.push((format!("{} seed {seed}", kind.as_str()), run.out.breaks()));
            if kind == ProfileKind::Egomotion {
                egomotion.push(run);
            }
        }
        let mean = depths.iter().sum::<f64>() / depths.len() as f64;
        ok &= mean <= 30.0;
        parts.push(format!("{} {length} m {mean:.2} cm", kind.as_str()));
    }
    ok &= total < 300.0;
    ledger.check("2", "noisy synthetic depth accuracy", ok, format!("{}, total {total:.1} s", parts.join(", ")));
    egomotion
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

/// Huber objective on geodesic edge angles, written from scratch.
fn rotation_objective(edges: &[(usize, usize, Rotation)], rots: &[Rotation], delta: f64) -> f64 {
    edges.iter().map(|(i, j, r)| huber((r.inverse() * rots[*j] * rots[*i].inverse()).angle(), delta)).sum()
}

/// BFGS with central-difference gradients and Armijo backtracking.
fn dense_minimize(f: &dyn Fn(&DVector<f64>) -> f64, x0: DVector<f64>) -> DVector<f64> {
    let n = x0.len();
    let grad = |x: &DVector<f64>| {
        let h = 1e-7;
        DVector::from_fn(n, |k, _| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[k] += h;
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    };
    let mut x = x0;
    let mut g = grad(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    for _ in 0..5000 {
        if g.norm() < 1e-11 {
            break;
        }
        let mut d = -(&h_inv * &g);
        if d.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            d = -g.clone();
        }
        let fx = f(&x);
        let mut t = 1.0;
        while f(&(&x + &d * t)) > fx + 1e-4 * t * d.dot(&g) {
            t *= 0.5;
            if t < 1e-16 {
                return x;
            }
        }
        let s = &d * t;
        x += &s;
        let g_new = grad(&x);
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-20 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            h_inv = &a * &h_inv * a.transpose() + &s * s.transpose() * rho;
        }
        g = g_new;
    }
    x
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn rotation_oracle(ledger: &mut Ledger) {
    let start = Instant::now();
    let n = 6;
    let delta = 0.1;
    let mut worst_gap = 0.0f64;
    let mut errors = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let gt: Vec<Rotation> = (0..n).map(|_| rotation::exp(&(random_axis(&mut rng) * rng.random_range(0.0..3.0)))).collect();
        let normal = rand_distr::Normal::new(0.0, 2f64.to_radians()).unwrap();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let n_outliers = (0.2 * pairs.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for k in (1..order.len()).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        let mut edges = Vec::new();
        for (slot, &(i, j)) in pairs.iter().enumerate() {
            let outlier = order[..n_outliers].contains(&slot);
            let r = if outlier {
                rotation::exp(&(random_axis(&mut rng) * rng.random_range(0.5..std::f64::consts::PI)))
            } else {
                let angle: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                rotation::exp(&(random_axis(&mut rng) * angle)) * gt[j] * gt[i].inverse()
            };
            edges.push((i, j, r));
        }
        let problem = AveragingProblem {
            n_nodes: n,
            edges: edges
                .iter()
                .map(|&(i, j, rotation)| AveragingEdge {
                    i,
                    j,
                    rotation,
                    direction: Unit::new_normalize(Vector3::x()),
                    translation_reliable: true,
                    weight: 1.0,
                })
                .collect(),
        };
        let ours = average_rotations(&problem, &RotationConfig { huber_delta: delta, ..Default::default() }).unwrap();

        let build = |x: &DVector<f64>| -> Vec<Rotation> {
            (0..n)
                .map(|k| if k == 0 { gt[0] } else { rotation::exp(&Vector3::new(x[3 * k - 3], x[3 * k - 2], x[3 * k - 1])) * gt[k] })
                .collect()
        };
        let f = |x: &DVector<f64>| rotation_objective(&edges, &build(x), delta);
        let best = dense_minimize(&f, DVector::zeros(3 * (n - 1)));
        let oracle = f(&best);
        let mine = rotation_objective(&edges, &ours.rotations, delta);
        worst_gap = worst_gap.max((mine - oracle).abs() / oracle);

        // Best global gauge, then mean per-node angle.
        let m = (0..n).fold(nalgebra::Matrix3::zeros(), |acc, k| acc + gt[k].inverse().matrix() * ours.rotations[k].matrix());
        let g = rotation::project_to_so3(&m);
        let err = (0..n).map(|k| rotation::angular_distance(&ours.rotations[k], &(gt[k] * g))).sum::<f64>() / n as f64;
        errors.push(err.to_degrees());
    }
    let secs = start.elapsed().as_secs_f64();
    let worst_error = errors.iter().cloned().fold(0.0, f64::max);
    let ok = worst_gap <= 0.01 && worst_error < 1.0 && secs < 5.0;
    ledger.check(
        "3",
        "rotation averaging oracle equivalence",
        ok,
        format!(
            "worst objective gap {:.4}% (limit 1%), mean error per seed {:?} deg (limit 1), 5 seeds in {secs:.2} s",
            100.0 * worst_gap,
            errors.iter().map(|e| (e * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

fn collinear_rig(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centers = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.6, 0.1, -0.2), Vector3::new(2.4, 0.4, -0.8)];
    let rots: Vec<Rotation> = (0..3).map(|_| rotation::exp(&(random_axis(&mut rng) * 0.2))).collect();
    let mut edges = Vec::new();
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        edges.push(AveragingEdge {
            i,
            j,
            rotation: rots[j] * rots[i].inverse(),
            direction: Unit::new_normalize(rots[j] * (centers[i] - centers[j])),
            translation_reliable: true,
            weight: 1.0,
        });
    }
    let problem = AveragingProblem { n_nodes: 3, edges };
    let estimate = RotationEstimateSet {
        rotations: rots.clone(),
        edge_residuals: vec![0.0; 3],
        objective_history: vec![0.0],
        iterations: 0,
        converged: true,
    };
    let cfg = TranslationConfig::default();
    let without = average_translations(&problem, &estimate, &[], &cfg);
    let underconstrained = matches!(without, Err(AveragingError::Underconstrained(_)));
    let points: Vec<PointTrackConstraint> = (0..4)
        .map(|t| {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..8.0));
            PointTrackConstraint { track: t, rays: centers.iter().enumerate().map(|(k, c)| (k, Unit::new_normalize(x - c))).collect() }
        })
        .collect();
    let (ratio_error, detail) = match average_translations(&problem, &estimate, &points, &cfg) {
        Ok(out) => {
            let p = &out.positions;
            let ratio = (p[2] - p[1]).norm() / (p[1] - p[0]).norm();
            let truth = (centers[2] - centers[1]).norm() / (centers[1] - centers[0]).norm();
            let e = (ratio - truth).abs() / truth;
            (e, format!("spacing ratio error {e:.2e}"))
        }
        Err(e) => (f64::INFINITY, format!("with point rays: {e}")),
    };
    ledger.check(
        "4",
        "translation averaging collinear degeneracy",
        underconstrained && ratio_error < 1e-6,
        format!("without point rays {:?}, {detail} (limit 1e-6)", without.err()),
    );
}

fn jacobian_discrepancy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pose = Pose::new(
            rotation::exp(&(random_axis(&mut rng) * rng.random_range(0.0..1.0))),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        );
        let intr = CameraIntrinsics::new(rng.random_range(300.0..900.0), 320.0, 240.0, rng.random_range(-0.2..0.2)).unwrap();
        let xc = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..10.0));
        let point = Point3::from(pose.rotation.inverse() * xc + pose.center);
        let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let jac = reprojection_jacobian(&intr, &pose, &point, &pixel).unwrap();
        let res = |p: &Pose, x: &Point3<f64>, i: &CameraIntrinsics| reprojection_residual(i, p, x, &pixel).unwrap();
        let mut compare = |analytic: Vector2<f64>, plus: Vector2<f64>, minus: Vector2<f64>| {
            let numeric = (plus - minus) / (2.0 * h);
            let scale = analytic.amax().max(numeric.amax()).max(1.0);
            worst = worst.max((analytic - numeric).amax() / scale);
        };
        for k in 0..3 {
            let e = Vector3::ith(k, h);
            compare(
                jac.d_rotation.column(k).into(),
                res(&Pose::new(rotation::exp(&e) * pose.rotation, pose.center), &point, &intr),
                res(&Pose::new(rotation::exp(&-e) * pose.rotation, pose.center), &point, &intr),
            );
            compare(
                jac.d_center.column(k).into(),
                res(&Pose::new(pose.rotation, pose.center + e), &point, &intr),
                res(&Pose::new(pose.rotation, pose.center - e), &point, &intr),
            );
            compare(jac.d_point.column(k).into(), res(&pose, &(point + e), &intr), res(&pose, &(point - e), &intr));
        }
        let with = |df: f64, dr: f64| CameraIntrinsics { focal: intr.focal + df, distortion_r: intr.distortion_r + dr, ..intr };
        compare(jac.d_intrinsics.column(0).into(), res(&pose, &point, &with(h, 0.0)), res(&pose, &point, &with(-h, 0.0)));
        compare(jac.d_intrinsics.column(1).into(), res(&pose, &point, &with(0.0, h)), res(&pose, &point, &with(0.0, -h)));
    }
    worst
}

fn ba_hygiene(ledger: &mut Ledger, log: &SolveLog) {
    let worst = (0..10).map(jacobian_discrepancy).fold(0.0, f64::max);
    let violations = log.summaries.iter().filter(|s| !s.is_monotone()).count();
    ledger.check(
        "5",
        "bundle adjustment numerical hygiene",
        worst < 1e-5 && violations == 0,
        format!(
            "worst Jacobian relative error {worst:.2e} over 10 seeds (limit 1e-5), {violations} non-monotone solves of {}",
            log.summaries.len()
        ),
    );
}

fn loop_closures(ledger: &mut Ledger, log: &mut SolveLog, with_loops: &[Run]) {
    let mut ratios = Vec::new();
    for (seed, on) in SEEDS.iter().zip(with_loops) {
        let mut cfg = PipelineConfig::default();
        cfg.viewgraph.loop_closure = false;
        let off = common::run(common::sequence(ProfileKind::Egomotion, 3.7, None, 0.5, *seed), &cfg);
        log.absorb(&off, false);
        ratios.push(on.ate_m / off.ate_m);
    }
    let m = median(ratios.clone());
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    ledger.check(
        "6",
        "local loop closures reduce drift",
        1.0 - m >= 0.2,
        format!("median ATE reduction {:.1}% (limit 20%), per-seed on/off [{}]", 100.0 * (1.0 - m), shown.join(", ")),
    );
}

fn window_size(ledger: &mut Ledger, reference: &Run) {
    let seq = common::sequence(ProfileKind::Egomotion, 3.7, None, 0.5, 0);
    let gt = seq.gt_trajectory();
    let mut cfg = PipelineConfig::default();
    cfg.viewgraph.w_min = 2;
    cfg.viewgraph.w_max = 2;
    cfg.viewgraph.overlap = 1;
    let tiny = match run_pipeline(&seq.table, &seq.timestamps, &seq.intrinsics, &cfg) {
        Ok(out) => {
            let ate = out.report(&cfg, Some(&gt), None).ok().and_then(|r| r.ate_rmse_m);
            (Some(out.breaks()), ate, None)
        }
        Err(e) => (None, None, Some(e)),
    };
    assert_eq!(PipelineConfig::default().viewgraph.w_max, 30);
    let normal_ok = reference.out.breaks() == 0;
    let (ok_tiny, detail) = match tiny {
        (Some(b), ate, _) => (
            b >= 1 || ate.is_some_and(|a| a > reference.ate_m),
            format!("2-keyframe windows: {b} breaks, ATE {ate:?} m"),
        ),
        (None, _, Some(PipelineError::NoWindows)) => (true, "2-keyframe windows: no window reconstructs, whole sequence lost".into()),
        (None, _, e) => (false, format!("2-keyframe windows: unexpected error {e:?}")),
    };
    ledger.check(
        "7",
        "window size failure mode",
        normal_ok && ok_tiny,
        format!("30-keyframe windows: {} breaks, ATE {:.4} m; {detail}", reference.out.breaks(), reference.ate_m),
    );
}

fn breaks_metric(ledger: &mut Ledger, breaks: &[(String, usize)]) {
    let broken: Vec<&String> = breaks.iter().filter(|(_, b)| *b > 0).map(|(n, _)| n).collect();
    let mut gaps = Vec::new();
    for (kind, length, seed, gap) in [(ProfileKind::LeftRight, 4.0, 1, 55..65), (ProfileKind::Egomotion, 3.7, 3, 50..60)] {
        let seq = common::sequence_with_gap(kind, length, None, 0.5, seed, Some(gap));
        let b = run_pipeline(&seq.table, &seq.timestamps, &seq.intrinsics, &PipelineConfig::default()).map(|o| o.breaks());
        gaps.push((kind.as_str(), b));
    }
    let gap_ok = gaps.iter().all(|(_, b)| matches!(b, Ok(1)));
    let shown: Vec<String> = gaps.iter().map(|(k, b)| format!("{k} gap {b:?}")).collect();
    ledger.check(
        "8",
        "breaks metric",
        broken.is_empty() && gap_ok,
        format!("{} suite runs, runs with breaks {:?}; fixtures: {}", breaks.len(), broken, shown.join(", ")),
    );
}

/// `P0: f 0 cx 0 0 f cy 0 0 0 1 0` from a KITTI calibration file.
fn kitti_intrinsics(calib: &str) -> Option<CameraIntrinsics> {
    let line = calib.lines().find(|l| l.starts_with("P0:"))?;
    let v: Vec<f64> = line[3..].split_whitespace().filter_map(|x| x.parse().ok()).collect();
    (v.len() == 12).then(|| CameraIntrinsics::new(v[0], v[2], v[6], 0.0).ok()).flatten()
}

fn kitti(ledger: &mut Ledger) {
    let root = std::env::var_os("WINSFM_KITTI_ROOT").map(PathBuf::from);
    let Some(root) = root.filter(|r| r.join("sequences/03/image_0").is_dir() && r.join("poses/03.txt").is_file()) else {
        ledger.record("9", "KITTI 03", Verdict::Skip, "set WINSFM_KITTI_ROOT to a KITTI odometry root to enable".into());
        return;
    };
    let result = (|| -> Result<f64, String> {
        let seq = root.join("sequences/03");
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
        let intr = kitti_intrinsics(&read(&seq.join("calib.txt"))?).ok_or("no P0 in calib.txt")?;
        let times = parse_times(&read(&seq.join("times.txt"))?).map_err(|e| e.to_string())?;
        let paths = list_frames(&seq.join("image_0")).map_err(|e| e.to_string())?;
        let frames = paths
            .iter()
            .zip(&times)
            .enumerate()
            .map(|(index, (p, t))| Ok(Frame { index, timestamp: *t, image: Some(read_image(p).map_err(|e| e.to_string())?) }))
            .collect::<Result<Vec<_>, String>>()?;
        let gt = parse_kitti(&read(&root.join("poses/03.txt"))?, Some(&times)).map_err(|e| e.to_string())?;
        let out = run_on_frames(&frames, &intr, &PipelineConfig::default()).map_err(|e| e.to_string())?;
        Ok(ate_rmse(&out.trajectory(), &gt).map_err(|e| e.to_string())?.rmse)
    })();
    match result {
        Ok(ate) => ledger.check("9", "KITTI 03", ate <= 1.6, format!("ATE {ate:.3} m (limit 1.6)")),
        Err(e) => ledger.check("9", "KITTI 03", false, e),
    }
}

fn main() {
    let start = Instant::now();
    let mut ledger = Ledger::default();
    let mut log = SolveLog::default();
    let mut breaks = Vec::new();

    noiseless_exactness(&mut ledger, &mut log, &mut breaks);
    let egomotion = noisy_depth(&mut ledger, &mut log, &mut breaks);
    rotation_oracle(&mut ledger);
    collinear_rig(&mut ledger);
    loop_closures(&mut ledger, &mut log, &egomotion);
    window_size(&mut ledger, &egomotion[0]);
    breaks_metric(&mut ledger, &breaks);
    ba_hygiene(&mut ledger, &log);
    kitti(&mut ledger);

    let worst = log.window_iterations.iter().copied().max().unwrap_or(0);
    ledger.check(
        "invariant",
        "window BA iterations on default runs",
        worst <= 15,
        format!("max {worst} (limit 15) over {} solves", log.window_iterations.len()),
    );

    ledger.lines.sort_by(|a, b| a.0.cmp(&b.0));
    for (_, line) in &ledger.lines {
        println!("{line}");
    }
    println!("acceptance finished in {:.1} s, {} failing", start.elapsed().as_secs_f64(), ledger.failures);
    if ledger.failures > 0 {
        std::process::exit(1);
    }
}
