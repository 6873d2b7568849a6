//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `CDR_ACCEPT=1,4,8` runs a subset. A failing criterion is reported but only
//! fails the process when `CDR_ACCEPT_STRICT=1`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cdr_core::camera::{backproject, homography_transfer, in_frustum, project, Frustum, Intrinsics, Pose, Vec3};
use cdr_core::config::PipelineConfig;
use cdr_core::dataset::Dataset;
use cdr_core::fragments::is_keyframe;
use cdr_core::generate::{synth_scene, write_synthetic};
use cdr_core::gradcheck::pipeline_grad_check;
use cdr_core::mesh::{marching_cubes, to_ply, McOptions};
use cdr_core::metrics::eta3d;
use cdr_core::mvs::cell_center;
use cdr_core::pipeline::{extract_mesh, init_params};
use cdr_core::refine::{anchored_voxels, build_matching_matrix, refine_occupancy};
use cdr_core::synth::{render_view, Scene};
use cdr_core::train::{load_samples, occupied_tsdf_mae, reconstruct, train};
use cdr_core::volume::{build_fbv, ExtentBox, GridSpec};
use cdr_tensor::{Coord, CoordSet};
use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Training settings of the single-fragment overfit run.
const OVERFIT: &[(&str, &str)] = &[("preset", "desk"), ("lr", "1e-2"), ("volume_channels", "24")];
const OVERFIT_STEPS: usize = 500;

/// Ablation study: desk preset, four training rooms and one held-out room.
const ABLATION_SETS: &[&str] = &["preset=desk", "lr=1e-2"];
const ABLATION_STEPS: &str = "300";
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn cdr(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdr"))
        .args(args)
        .env("CDR_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("cdr {args:?} exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn key_value(text: &str, key: &str) -> Result<f64, String> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| format!("{key} missing from output"))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn efficiency_triplets() -> Outcome {
    let rows = [
        ("ours", 158.0, 0.391, 0.612, 37.81),
        ("atlas", 66.3, 0.340, 0.499, 11.25),
        ("neuralrecon+heads", 228.0, 0.279, 0.516, 32.82),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, fps, miou, f, want) in rows {
        let e = eta3d(fps, miou, f);
        ok &= (e - want).abs() <= 0.05;
        detail.push(format!("{name} {e:.3} (want {want})"));
    }
    check(ok, detail.join(", "))
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let r = Rotation3::new(axis * rng.gen_range(0.0..1.5));
    Pose::new(*r.matrix(), Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).unwrap()
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = Intrinsics::new(120.0, 118.0, 64.3, 47.8, 128, 96).unwrap();
    let mut round = 0.0f64;
    for _ in 0..10_000 {
        let pose = random_pose(&mut rng);
        let (u, v, d) = (rng.gen_range(0.0..128.0), rng.gen_range(0.0..96.0), rng.gen_range(0.1..10.0));
        let q = project(&backproject(u, v, d, &k, &pose).unwrap(), &k, &pose);
        round = round.max((q.u - u).abs()).max((q.v - v).abs()).max((q.z - d).abs());
    }

    let mut transfer = 0.0f64;
    for _ in 0..10_000 {
        let (t_ref, t_j) = (random_pose(&mut rng), random_pose(&mut rng));
        let (u, v, d) = (rng.gen_range(0.0..128.0), rng.gen_range(0.0..96.0), rng.gen_range(0.3..6.0));
        // K_j (R_rel + t_rel n^T / d) K_ref^-1 for the reference plane at depth d
        let rel = t_j.compose(&t_ref.inverse());
        let h = k.matrix() * (rel.rotation + rel.translation * Vec3::z().transpose() / d) * k.matrix().try_inverse().unwrap();
        let x = h * Vec3::new(u, v, 1.0);
        if x.z.abs() < 1e-6 {
            continue;
        }
        let t = homography_transfer(u, v, d, &k, &t_ref, &k, &t_j);
        let scale = 1.0 + (x.x / x.z).abs().max((x.y / x.z).abs());
        transfer = transfer.max((t.u - x.x / x.z).abs().max((t.v - x.y / x.z).abs()) / scale);
    }

    let grid = GridSpec::new(2, 0.1, Vec3::zeros()).unwrap();
    let extent = ExtentBox {
        center: Vec3::zeros(),
        side: 2.0 - 1e-9,
    };
    let mut fbv_equal = true;
    for _ in 0..5 {
        let frusta: Vec<Frustum> = (0..3)
            .map(|_| {
                let eye = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(0.2..1.5));
                let pose = Pose::look_at(eye, Vec3::new(0.0, 0.0, -0.2), Vec3::z()).unwrap();
                Frustum::new(Intrinsics::from_fov(64, 48, 60.0).unwrap(), pose, 0.2, 2.5).unwrap()
            })
            .collect();
        let got = build_fbv(&frusta, &grid, Some(&extent)).map(|c| c.coords().to_vec()).unwrap_or_default();
        let mut want = Vec::new();
        for x in -10..10 {
            for y in -10..10 {
                for z in -10..10 {
                    let c = [x, y, z];
                    if frusta.iter().any(|f| in_frustum(&grid.center(&c), f)) {
                        want.push(c);
                    }
                }
            }
        }
        fbv_equal &= got == want && !want.is_empty();
    }
    check(
        round < 1e-7 && transfer < 1e-7 && fbv_equal,
        format!("round trip {round:.2e}, transfer {transfer:.2e}, fbv equal to oracle: {fbv_equal}"),
    )
}

fn gradient_integrity() -> Outcome {
    let r = pipeline_grad_check(7, 2).map_err(|e| e.to_string())?;
    check(
        r.max_rel_error < 1e-3 && r.kinked * 4 < r.checked,
        format!(
            "max relative error {:.2e} over {} entries ({} straddling a kink skipped)",
            r.max_rel_error, r.checked, r.kinked
        ),
    )
}

fn sphere() -> Outcome {
    let grid = GridSpec::new(2, 0.04, Vec3::zeros()).unwrap();
    let r = 0.5;
    let mut tsdf = BTreeMap::new();
    for x in -18..18 {
        for y in -18..18 {
            for z in -18..18 {
                let c = [x, y, z];
                tsdf.insert(c, grid.center(&c).norm() - r);
            }
        }
    }
    let mesh = marching_cubes(&tsdf, &grid, &McOptions::default());
    let worst = mesh.vertices.iter().map(|v| (v.norm() - r).abs()).fold(0.0, f64::max);
    let chi = mesh.euler_characteristic();
    check(
        worst <= 0.02 && mesh.is_closed() && chi == 2,
        format!(
            "{} faces, max radius error {worst:.4} m, closed {}, euler {chi}",
            mesh.faces.len(),
            mesh.is_closed()
        ),
    )
}

fn refinement_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = GridSpec::new(3, 0.05, Vec3::zeros()).unwrap();
    let mut violations = 0;
    let mut kept = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..400);
        let coords = CoordSet::sorted((0..n).map(|_| [rng.gen_range(-6..6), rng.gen_range(-6..6), rng.gen_range(-6..6)]));
        let logits: Vec<f64> = (0..coords.len()).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let points: Vec<Vec3> = (0..rng.gen_range(1..20))
            .map(|_| Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)))
            .collect();
        let radius = rng.gen_range(0..3);
        let theta = rng.gen_range(0.1..0.9);
        let mut alpha: BTreeSet<Coord> = BTreeSet::new();
        for p in &points {
            let v = grid.voxel_of(p);
            for dx in -radius..=radius {
                for dy in -radius..=radius {
                    for dz in -radius..=radius {
                        alpha.insert([v[0] + dx, v[1] + dy, v[2] + dz]);
                    }
                }
            }
        }
        let keep = refine_occupancy(&coords, &logits, &anchored_voxels(&points, &grid, radius), theta);
        for ((c, o), k) in coords.coords().iter().zip(&logits).zip(&keep) {
            let thresholded = 1.0 / (1.0 + (-o).exp()) > theta;
            if *k {
                kept += 1;
            }
            if *k != (thresholded && alpha.contains(c)) {
                violations += 1;
            }
        }
    }

    let scene = Scene::random(5, Vec3::new(3.0, 3.0, 2.0)).unwrap();
    let k = Intrinsics::from_fov(64, 48, 70.0).unwrap();
    let target = scene.centroid();
    let pose = Pose::look_at(target + Vec3::new(1.0, 0.2, 0.4), target, Vec3::z()).unwrap();
    let view = render_view(&scene, &k, &pose);
    let frustum = Frustum::new(k, pose, 0.2, 4.0).unwrap();
    let (mut columns, mut bad) = (0, 0);
    for stage in [2u8, 3, 4] {
        let grid = GridSpec::new(stage, 0.04, Vec3::zeros()).unwrap();
        let f = 1usize << stage;
        let (rows, cols) = (48 / f, 64 / f);
        let depth: Vec<f64> = (0..rows * cols)
            .map(|i| view.depth[((i / cols) * f + f / 2) * 64 + (i % cols) * f + f / 2])
            .collect();
        let tau = 1.5 * grid.voxel_size;
        let fbv = build_fbv(&[frustum], &grid, None).unwrap();
        let m = build_matching_matrix(&frustum, &fbv, &grid, &depth, stage, rows, cols, tau).unwrap();
        for (c, col) in fbv.coords().iter().zip(&m.columns).filter(|(_, col)| col.mask) {
            columns += 1;
            let (cu, cv) = cell_center(col.u, col.v, stage);
            let back = backproject(cu, cv, depth[col.v * cols + col.u], &k, &pose).unwrap();
            if (back - grid.center(c)).norm() > tau {
                bad += 1;
            }
        }
    }
    check(
        violations == 0 && bad == 0 && kept > 0 && columns > 0,
        format!("{kept} kept voxels, {violations} outside threshold and anchors; {columns} matched columns, {bad} beyond tolerance"),
    )
}

fn overfit(work: &Path) -> Outcome {
    let mut cfg = PipelineConfig::default();
    for (k, v) in OVERFIT {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    let dir = work.join("overfit");
    write_synthetic(&dir, &synth_scene(0, &cfg).map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
    let mut samples = load_samples(&Dataset::open(&dir).map_err(|e| e.to_string())?, &cfg, 0).map_err(|e| e.to_string())?;
    samples.truncate(1);
    let mut params = init_params(&cfg, 0);
    let reports = train(&mut params, &samples, &cfg, OVERFIT_STEPS, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let (first, last) = (reports[0].total, reports[reports.len() - 1].total);
    let drop = 1.0 - last / first;
    let mae = occupied_tsdf_mae(&params, &samples[0], &cfg).map_err(|e| e.to_string())?;
    check(
        drop >= 0.9 && mae < 0.05,
        format!(
            "loss {first:.3} -> {last:.3} ({:.1}% drop) in {OVERFIT_STEPS} steps, occupied TSDF MAE {mae:.4}",
            100.0 * drop
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn with_sets(sets: &[&str], rest: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = sets.iter().flat_map(|kv| ["--set".to_string(), kv.to_string()]).collect();
    args.extend(rest.iter().map(|a| a.to_string()));
    args
}

fn run(args: Vec<String>) -> Result<String, String> {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    cdr(&refs)
}

fn ablation(work: &Path) -> Outcome {
    let data = work.join("ablation");
    run(with_sets(ABLATION_SETS, &["--seed", "100", "synth", "--out", s(&data), "--scenes", "5"]))?;
    let train_dirs: Vec<PathBuf> = (0..4).map(|i| data.join(format!("scene_{i:02}"))).collect();
    let held_out = data.join("scene_04");
    let mut scores: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in ["b", "e"] {
        for seed in ABLATION_SEEDS {
            let ckpt = work.join(format!("ablation_{row}_{seed}.ckpt"));
            let mesh = work.join(format!("ablation_{row}_{seed}.ply"));
            let seed = seed.to_string();
            let ablation = format!("ablation={row}");
            let mut sets: Vec<&str> = ABLATION_SETS.to_vec();
            sets.push(&ablation);
            let mut rest = vec!["--seed", &seed, "train", "--out", s(&ckpt), "--steps", ABLATION_STEPS];
            for d in &train_dirs {
                rest.extend(["--in", s(d)]);
            }
            run(with_sets(&sets, &rest))?;
            run(with_sets(
                &sets,
                &["--seed", &seed, "reconstruct", "--in", s(&held_out), "--out", s(&mesh), "--weights", s(&ckpt)],
            ))?;
            let gt = held_out.join("gt_mesh.ply");
            let report = run(with_sets(&sets, &["eval", "--in", s(&mesh), "--gt", s(&gt)]));
            let (f, m) = match report {
                Ok(r) => (key_value(&r, "fscore")?, key_value(&r, "miou")?),
                // an empty reconstruction scores zero
                Err(_) => (0.0, 0.0),
            };
            let e = scores.entry(if row == "b" { "b" } else { "e" }).or_default();
            e.0.push(f);
            e.1.push(m);
        }
    }
    let (fb, mb) = (median(scores["b"].0.clone()), median(scores["b"].1.clone()));
    let (fe, me) = (median(scores["e"].0.clone()), median(scores["e"].1.clone()));
    check(
        fe >= fb && me >= mb,
        format!(
            "median F-score (e) {fe:.4} vs (b) {fb:.4}; median mIoU (e) {me:.4} vs (b) {mb:.4}; per seed F (e) {:?} (b) {:?}, mIoU (e) {:?} (b) {:?}",
            scores["e"].0, scores["b"].0, scores["e"].1, scores["b"].1
        ),
    )
}

fn sequence(work: &Path, name: &str, sets: &[&str]) -> Result<PathBuf, String> {
    let dir = work.join(name);
    if !dir.exists() {
        run(with_sets(sets, &["synth", "--out", s(&dir)]))?;
    }
    Ok(dir)
}

fn determinism(work: &Path) -> Outcome {
    let sets = ["preset=desk", "synth_frames=60"];
    let data = sequence(work, "determinism", &sets)?;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (ply, dump) = (work.join(format!("det_{i}.ply")), work.join(format!("det_{i}.txt")));
        run(with_sets(
            &sets,
            &["--seed", "3", "reconstruct", "--in", s(&data), "--out", s(&ply), "--dump", s(&dump)],
        ))?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        outputs.push((read(&ply)?, read(&dump)?));
    }
    let faces = String::from_utf8_lossy(&outputs[0].0)
        .lines()
        .find_map(|l| l.strip_prefix("element face ").map(str::to_string))
        .unwrap_or_default();
    check(
        outputs[0] == outputs[1] && faces != "0",
        format!(
            "PLY {} bytes ({faces} faces) and dump {} bytes; identical: {}",
            outputs[0].0.len(),
            outputs[0].1.len(),
            outputs[0] == outputs[1]
        ),
    )
}

fn incremental_equals_batch(work: &Path) -> Outcome {
    // 12 degrees and 16 cm per frame: every frame is a key frame
    let sets = ["preset=desk", "synth_frames=15", "synth_orbit_turns=0.5"];
    let data = sequence(work, "incremental", &sets)?;
    let mut cfg = PipelineConfig::default();
    for kv in sets {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let params = init_params(&cfg, 0);
    let mut meshes = Vec::new();
    let rec = reconstruct(&ds, &params, &cfg, |_, global| {
        meshes.push(to_ply(&extract_mesh(global, &cfg)?));
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let batch = to_ply(&rec.mesh);
    let streamed = meshes.last().cloned().unwrap_or_default();

    let (a, b) = (work.join("inc_every.ply"), work.join("inc_once.ply"));
    run(with_sets(&sets, &["reconstruct", "--in", s(&data), "--out", s(&a), "--mesh-every-fragment"]))?;
    run(with_sets(&sets, &["reconstruct", "--in", s(&data), "--out", s(&b)]))?;
    let cli_equal = std::fs::read(&a).map_err(|e| e.to_string())? == std::fs::read(&b).map_err(|e| e.to_string())?;
    check(
        rec.throughput.fragments == 3 && rec.skipped == 0 && streamed == batch && cli_equal && !rec.mesh.is_empty(),
        format!(
            "{} fragments, {} faces; per-fragment meshing equals final: {}, CLI outputs identical: {cli_equal}",
            rec.throughput.fragments,
            rec.mesh.faces.len(),
            streamed == batch
        ),
    )
}

fn fps_protocol(work: &Path) -> Outcome {
    let sets = ["preset=desk"];
    let data = sequence(work, "bench", &sets)?;
    let report = run(with_sets(&sets, &["bench", "--in", s(&data)]))?;
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::desk();
    let policy = cfg.keyframe_policy();
    let mut last: Option<Pose> = None;
    let mut keys = 0usize;
    for f in ds.frames() {
        if last.as_ref().is_none_or(|l| is_keyframe(&f.pose, l, &policy)) {
            keys += 1;
            last = Some(f.pose);
        }
    }
    let frames = ds.frames().len() as f64;
    let (rf, rk, secs) = (key_value(&report, "frames")?, key_value(&report, "keyframes")?, key_value(&report, "seconds")?);
    let (fps, kfps) = (key_value(&report, "fps")?, key_value(&report, "kfps")?);
    let ok = rf == frames
        && rk == keys as f64
        && rk < rf
        && (fps * secs - frames).abs() <= 1e-3 * frames
        && (kfps * secs - keys as f64).abs() <= 1e-3 * keys as f64;
    check(
        ok,
        format!("{rf} frames ({frames} on disk), {rk} key frames ({keys} by the selection rule), fps {fps:.2}, kfps {kfps:.2}"),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("CDR_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("CDR_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "efficiency arithmetic", Box::new(efficiency_triplets)),
        (2, "geometry oracles", Box::new(geometry_oracles)),
        (3, "gradient integrity", Box::new(gradient_integrity)),
        (4, "marching cubes sphere", Box::new(sphere)),
        (5, "refinement laws", Box::new(refinement_laws)),
        (6, "single-fragment overfit", Box::new(|| overfit(w))),
        (7, "ablation ordering (e) vs (b)", Box::new(|| ablation(w))),
        (8, "determinism", Box::new(|| determinism(w))),
        (9, "incremental equals batch", Box::new(|| incremental_equals_batch(w))),
        (10, "FPS protocol", Box::new(|| fps_protocol(w))),
    ];
    let mut failed = 0;
    for (n, name, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:2} PASS {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:2} FAIL {name}: {d} [{secs:.1} s]");
            }
        }
    }
    println!("{failed} criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
