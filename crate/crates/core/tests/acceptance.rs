//! Acceptance criteria A1–A10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. A1–A3 share one run of the ablation matrix.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigsplat_core::ablate::{ablate, AblationScenario, AblationTable};
use rigsplat_core::binding::{init_gaussians, local_to_world, triangle_frame, BoundGaussian};
use rigsplat_core::dataset::load_dataset;
use rigsplat_core::fit::{fit_sequence, FitConfig};
use rigsplat_core::math::{axis_angle_quat, geodesic_angle, quat_from_array, quat_to_array, quat_to_mat, Quat, Vec3};
use rigsplat_core::optim::{decay_factor, densify_and_prune, lr_schedule, DensityStats, GaussianAdam};
use rigsplat_core::raster::RasterConfig;
use rigsplat_core::rig::{Rig, Shape};
use rigsplat_core::synth::{
    interleaved_split, limb_pose, make_synthetic_limb_rig, make_synthetic_sequence, render_ground_truth, LimbDims, LimbSpec,
    Motion, OrbitSpec,
};
use rigsplat_core::trainer::{train, RunOutput, TrainConfig, FINAL_CHECKPOINT};

use common::{max_gradient_error, smooth_scene};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    axis_angle_quat(random_unit(rng), rng.random_range(-3.1..3.1))
}

fn ablation_matrix() -> (AblationTable, f64) {
    let start = Instant::now();
    let table = ablate(&AblationScenario::default(), &work_dir("ablation")).unwrap();
    (table, start.elapsed().as_secs_f64())
}

fn a1(table: &AblationTable) -> Outcome {
    let c = table.cell("high/oracle").unwrap();
    outcome(
        "A1",
        c.test_psnr >= 35.0 && c.test_ssim >= 0.97,
        format!(
            "closed-loop test PSNR {:.2} dB (>= 35), SSIM {:.4} (>= 0.97), {} iters in {:.0} s",
            c.test_psnr, c.test_ssim, table.scenario.train.total_iters, c.seconds
        ),
    )
}

fn a2(table: &AblationTable, seconds: f64) -> Outcome {
    let gap = table.summary.capacity_gap_db.unwrap();
    let recovery = table.summary.corrective_recovery.unwrap();
    let same_config = table.cells.windows(2).all(|w| w[0].config_hash == w[1].config_hash);
    outcome(
        "A2",
        gap >= 1.5 && recovery >= 0.3 && same_config && seconds <= 1800.0,
        format!(
            "3-twist minus 0-twist {gap:.2} dB (>= 1.5), correctives recover {:.0}% (>= 30%), shared config {same_config}, matrix {seconds:.0} s (<= 1800)",
            100.0 * recovery
        ),
    )
}

fn a3(table: &AblationTable) -> Outcome {
    let oracle = table.cell("high/oracle").unwrap().test_psnr;
    let noisy = table.cell("high/noisy").unwrap().test_psnr;
    outcome(
        "A3",
        noisy < oracle,
        format!("oracle poses {oracle:.2} dB > noisy fitted poses {noisy:.2} dB"),
    )
}

fn a4() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let scenes = 120;
    for seed in 0..scenes {
        let scene = smooth_scene(1000 + seed, 8, 4);
        let (err, n) = max_gradient_error(&scene, 1e-4, 1e-6);
        worst = worst.max(err);
        checked += n;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "A4",
        worst <= 1e-3 && secs < 60.0,
        format!("{scenes} scenes, {checked} partials, max relative error {worst:.2e} (<= 1e-3), {secs:.1} s (< 60)"),
    )
}

fn a5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let tri: [Vec3; 3] = std::array::from_fn(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let Ok(frame) = triangle_frame(0, &tri[0], &tri[1], &tri[2]) else {
            continue;
        };
        if frame.scale < 0.05 {
            continue;
        }
        let g = BoundGaussian {
            triangle: 0,
            position: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            rotation: quat_to_array(&random_rotation(&mut rng)),
            log_scale: std::array::from_fn(|_| rng.random_range(-3.0..0.0)),
            opacity_logit: rng.random_range(-3.0..3.0),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        };
        let r = quat_to_mat(&random_rotation(&mut rng));
        let t = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let moved = tri.map(|v| r * v + t);
        let frame2 = triangle_frame(0, &moved[0], &moved[1], &moved[2]).unwrap();
        let (w1, w2) = (local_to_world(&g, &frame), local_to_world(&g, &frame2));
        let mean_err = (r * w1.mean + t - w2.mean).norm();
        let rot_err = (r * quat_to_mat(&w1.rotation) - quat_to_mat(&w2.rotation)).abs().max();
        let scale_err = (w1.scale - w2.scale).abs().max();
        worst = worst.max(mean_err).max(rot_err).max(scale_err);
    }
    outcome(
        "A5",
        worst <= 1e-7,
        format!("1000 rigid-motion trials, max mean/rotation/scale error {worst:.2e} (<= 1e-7)"),
    )
}

fn random_limb_pose(rig: &Rig, rng: &mut ChaCha8Rng) -> rigsplat_core::rig::Pose {
    let mut pose = limb_pose(rig, random_rotation(rng), rng.random_range(0.0..1.5), rng.random_range(-2.0..2.0)).unwrap();
    pose.root_translation = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    pose
}

fn a6() -> Outcome {
    let rig = make_synthetic_limb_rig(LimbSpec::high(), LimbDims::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rest_err = 0.0f64;
    let mut fk_err = 0.0f64;
    let mut equi_err = 0.0f64;
    let mut corrective_rest_exact = true;
    for _ in 0..50 {
        let shape = Shape {
            coefficients: (0..rig.shape_count()).map(|_| rng.random_range(-0.3..0.3)).collect(),
        };
        let rest = rig.rest_pose();
        let skinned = rig.skin_vertices(&rest, &shape).unwrap();
        let shaped = rig.shaped_vertices(&shape).unwrap();
        rest_err = skinned.iter().zip(&shaped).map(|(a, b)| (a - b).norm()).fold(rest_err, f64::max);
        for (a, b) in rig.forward_kinematics(&rest).unwrap().iter().zip(rig.rest_world()) {
            fk_err = fk_err.max((a.rotation - b.rotation).abs().max()).max((a.translation - b.translation).norm());
        }
        corrective_rest_exact &= rig.corrective_offsets(&rest).unwrap().iter().all(|o| *o == Vec3::zeros());

        let pose = random_limb_pose(&rig, &mut rng);
        let base = rig.skin_vertices(&pose, &shape).unwrap();
        let g = random_rotation(&mut rng);
        let t = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let mut moved = pose.clone();
        moved.joint_rotations[0] = quat_to_array(&(g * pose.rotation(0)));
        moved.root_translation = (quat_to_mat(&g) * pose.translation() + t).into();
        let out = rig.skin_vertices(&moved, &shape).unwrap();
        let r = quat_to_mat(&g);
        equi_err = base.iter().zip(&out).map(|(a, b)| (r * a + t - b).norm()).fold(equi_err, f64::max);
    }
    outcome(
        "A6",
        rest_err <= 1e-9 && fk_err <= 1e-9 && equi_err <= 1e-7 && corrective_rest_exact,
        format!(
            "rest-pose skinning {rest_err:.1e} and FK {fk_err:.1e} (<= 1e-9), rigid equivariance {equi_err:.1e} (<= 1e-7), correctives zero at rest: {corrective_rest_exact}"
        ),
    )
}

/// Runs the density schedule of `config` for `iters` iterations of a
/// `total`-iteration run with every Gaussian above the gradient threshold.
fn simulate_density(config: &TrainConfig, faces: usize, iters: usize, total: usize) -> (bool, Vec<usize>, usize) {
    let d = &config.densify;
    let mut set = init_gaussians(faces, config.initial_count(faces), config.seed).unwrap();
    let mut adam = GaussianAdam::new(set.len(), config.adam);
    let face_scales: Vec<f64> = (0..faces).map(|f| 0.002 + 0.02 * (f % 7) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    let mut events = Vec::new();
    for it in 1..=iters {
        if !d.is_event(it, total) {
            continue;
        }
        events.push(it);
        // a few faint Gaussians get pruned; everything else wants to grow
        set.opacity_logit.iter_mut().for_each(|o| *o = if rng.random_bool(0.02) { -6.0 } else { 0.0 });
        let mut stats = DensityStats::new(set.len());
        stats.grad_norm_sum.iter_mut().for_each(|g| *g = 10.0 * d.grad_threshold);
        stats.visible_count.iter_mut().for_each(|c| *c = 1);
        let before = set.len();
        let report = densify_and_prune(&mut set, &mut adam, &mut stats, d, &face_scales, 1.0, it as u64).unwrap();
        if before > d.max_gaussians && report.split + report.cloned > 0 {
            ok = false;
        }
        if report.cloned > d.max_gaussians.saturating_sub(before) {
            ok = false;
        }
        ok &= set.lengths_consistent() && adam.lengths_consistent(set.len()) && stats.len() == set.len();
        ok &= set.len() == before - report.pruned - report.split + report.cloned + report.split * d.children;
    }
    (ok, events, set.len())
}

fn a7() -> Outcome {
    let full = TrainConfig::paper_scale();
    let desk = TrainConfig::desk();
    let (ok_p, events_p, final_p) = simulate_density(&full, 20_000, 6000, full.total_iters);
    let (ok_d, events_d, final_d) = simulate_density(&desk, 2000, 6000, 6000);
    let cadence_p = events_p == (1..=12).map(|k| 500 * k).collect::<Vec<_>>();
    let cadence_d = events_d == (1..60).map(|k| 100 * k).collect::<Vec<_>>();
    outcome(
        "A7",
        ok_p && ok_d && cadence_p && cadence_d,
        format!(
            "full scale: events every 500 its {cadence_p}, cap 100000 respected {ok_p} (final {final_p}); desk: events every 100 its {cadence_d}, cap {} respected {ok_d} (final {final_d})",
            desk.densify.max_gaussians
        ),
    )
}

fn a8() -> Outcome {
    let total = TrainConfig::paper_scale().total_iters;
    let exact = decay_factor(total, total) == 0.1 && decay_factor(0, total) == 1.0;
    let lr = TrainConfig::paper_scale().lr;
    let ratios: Vec<f64> = [lr.position, lr.rotation, lr.log_scale, lr.opacity, lr.color]
        .iter()
        .map(|&b| lr_schedule(b, total, total) / lr_schedule(b, 0, total))
        .collect();
    let worst = ratios.iter().map(|r| (r - 0.1).abs()).fold(0.0, f64::max);
    outcome(
        "A8",
        exact && worst <= f64::EPSILON,
        format!("decay(50000)/decay(0) == 0.1 exactly: {exact}; per-group lr ratio max deviation {worst:.1e}"),
    )
}

fn a9() -> Outcome {
    let rig = make_synthetic_limb_rig(LimbSpec::high(), LimbDims::default()).unwrap();
    let shape = Shape::zeros(rig.shape_count());
    let mut residual = 0.0f64;
    let mut angle = 0.0f64;
    let mut frames = 0;
    for motion in [Motion::Pronation, Motion::ElbowFlex, Motion::Composite] {
        let truths: Vec<_> = make_synthetic_sequence(&rig, motion, 9, &OrbitSpec::default())
            .unwrap()
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        let fits = fit_sequence(&rig, &rig, &truths, &shape, &rig.rest_pose(), &FitConfig::default(), true).unwrap();
        for (truth, r) in truths.iter().zip(&fits) {
            frames += 1;
            residual = residual.max(r.report.mean_distance);
            for j in 1..rig.joint_count() {
                angle = angle.max(geodesic_angle(&r.pose.rotation(j), &quat_from_array(truth.joint_rotations[j])).to_degrees());
            }
        }
    }
    outcome(
        "A9",
        residual <= 1e-4 && angle <= 2.0,
        format!("{frames} warm-started frames: self-fit residual {residual:.2e} m (<= 1e-4), worst joint error {angle:.3} deg (<= 2)"),
    )
}

fn a10() -> Outcome {
    let root = work_dir("determinism");
    let rig = make_synthetic_limb_rig(LimbSpec::high(), LimbDims::default()).unwrap();
    let orbit = OrbitSpec {
        width: 48,
        height: 48,
        focal: 56.0,
        ..OrbitSpec::default()
    };
    let frames = make_synthetic_sequence(&rig, Motion::Composite, 6, &orbit).unwrap();
    let data = root.join("dataset");
    render_ground_truth(&rig, 3, &frames, interleaved_split(6, 3), &RasterConfig::default(), &data).unwrap();
    let ds = load_dataset(&data).unwrap();
    let config = TrainConfig::desk()
        .with_overrides(&["total_iters=60".into(), "densify.interval=20".into(), "seed=9".into()])
        .unwrap();
    let mut outputs = Vec::new();
    for workers in [1, 2, 8] {
        let dir = root.join(format!("workers_{workers}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        pool.install(|| train(&ds, &rig, &config, Some(&RunOutput { dir: dir.clone(), inputs: serde_json::json!({}) })))
            .unwrap();
        let header = std::fs::read(dir.join(FINAL_CHECKPOINT)).unwrap();
        let blob = std::fs::read(dir.join("checkpoint.bin")).unwrap();
        let log = std::fs::read(dir.join("train_log.jsonl")).unwrap();
        outputs.push((header, blob, log));
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        "A10",
        identical,
        format!("checkpoints and logs bitwise identical across 1, 2 and 8 workers: {identical}"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches no criterion skips the suite
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.as_deref().is_some_and(|f| !"acceptance".contains(f) && !f.starts_with('A')) {
        return;
    }
    let selected = |id: &str| filter.as_deref().is_none_or(|f| !f.starts_with('A') || f == id);
    let mut results = Vec::new();
    let cheap: [(&str, fn() -> Outcome); 7] = [("A4", a4), ("A5", a5), ("A6", a6), ("A7", a7), ("A8", a8), ("A9", a9), ("A10", a10)];
    for (id, f) in cheap {
        if selected(id) {
            results.push(f());
        }
    }
    if ["A1", "A2", "A3"].iter().any(|id| selected(id)) {
        let (table, seconds) = ablation_matrix();
        println!("{}", table.to_csv().trim_end());
        results.push(a1(&table));
        results.push(a2(&table, seconds));
        results.push(a3(&table));
    }
    results.sort_by_key(|o| o.id[1..].parse::<u32>().unwrap());
    println!("---");
    for o in &results {
        println!("{} {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
