use cdr_core::camera::{backproject, homography_transfer, in_frustum, project, Frustum, Intrinsics, Pose, Vec3};
use cdr_core::fragments::{assemble_fragments, KeyframePolicy, KeyframeRule, PosedFrame};
use cdr_core::volume::{build_fbv, ExtentBox, GridSpec};
use nalgebra::{Matrix3, Rotation3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let r = Rotation3::new(axis * rng.gen_range(0.0..1.5));
    let t = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    Pose::new(*r.matrix(), t).unwrap()
}

fn random_intrinsics(rng: &mut impl Rng) -> Intrinsics {
    let w = 16 * rng.gen_range(2..12);
    let h = 16 * rng.gen_range(2..12);
    Intrinsics::new(
        rng.gen_range(20.0..200.0),
        rng.gen_range(20.0..200.0),
        w as f64 / 2.0 + rng.gen_range(-3.0..3.0),
        h as f64 / 2.0 + rng.gen_range(-3.0..3.0),
        w,
        h,
    )
    .unwrap()
}

#[test]
fn project_backproject_round_trip_ten_thousand_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let k = random_intrinsics(&mut rng);
        let pose = random_pose(&mut rng);
        let (u, v) = (rng.gen_range(0.0..k.width as f64), rng.gen_range(0.0..k.height as f64));
        let d = rng.gen_range(0.1..10.0);
        let p = backproject(u, v, d, &k, &pose).unwrap();
        let q = project(&p, &k, &pose);
        worst = worst.max((q.u - u).abs()).max((q.v - v).abs()).max((q.z - d).abs());
        let back = backproject(q.u, q.v, q.z, &k, &pose).unwrap();
        worst = worst.max((back - p).norm());
    }
    assert!(worst < 1e-7, "worst round-trip error {worst}");
}

/// `K_j (R + t n^T / d) K_ref^-1` for the fronto-parallel plane at depth `d`
/// of the reference camera.
fn homography_matrix(d: f64, k_ref: &Intrinsics, t_ref: &Pose, k_j: &Intrinsics, t_j: &Pose) -> Matrix3<f64> {
    let rel = t_j.compose(&t_ref.inverse());
    let n = Vec3::new(0.0, 0.0, 1.0);
    let m = rel.rotation + rel.translation * n.transpose() / d;
    k_j.matrix() * m * k_ref.matrix().try_inverse().unwrap()
}

#[test]
fn homography_transfer_matches_plane_induced_homography() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..2_000 {
        let (k_ref, k_j) = (random_intrinsics(&mut rng), random_intrinsics(&mut rng));
        let t_ref = random_pose(&mut rng);
        let t_j = random_pose(&mut rng);
        let (u, v) = (rng.gen_range(0.0..k_ref.width as f64), rng.gen_range(0.0..k_ref.height as f64));
        let d = rng.gen_range(0.3..6.0);
        let h = homography_matrix(d, &k_ref, &t_ref, &k_j, &t_j);
        let x = h * Vec3::new(u, v, 1.0);
        if x.z.abs() < 1e-6 {
            continue;
        }
        let t = homography_transfer(u, v, d, &k_ref, &t_ref, &k_j, &t_j);
        let scale = 1.0 + x.x.abs().max(x.y.abs()) / x.z.abs();
        worst = worst.max(((t.u - x.x / x.z).abs().max((t.v - x.y / x.z).abs())) / scale);
    }
    assert!(worst < 1e-7, "worst transfer error {worst}");
}

fn exhaustive_fbv(frusta: &[Frustum], grid: &GridSpec, lo: [i32; 3], n: i32, extent: &ExtentBox) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for x in lo[0]..lo[0] + n {
        for y in lo[1]..lo[1] + n {
            for z in lo[2]..lo[2] + n {
                let p = grid.center(&[x, y, z]);
                let h = extent.side / 2.0;
                let inside = (0..3).all(|a| (p[a] - extent.center[a]).abs() <= h);
                if inside && frusta.iter().any(|f| in_frustum(&p, f)) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

#[test]
fn fbv_equals_exhaustive_oracle_on_twenty_cubed_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = GridSpec::new(2, 0.1, Vec3::zeros()).unwrap();
    // a 20^3 block of voxels spanning [-1, 1)^3; the extent box is that block
    let extent = ExtentBox {
        center: Vec3::zeros(),
        side: 2.0 - 1e-9,
    };
    for _ in 0..5 {
        let frusta: Vec<Frustum> = (0..3)
            .map(|_| {
                let eye = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
                let target = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
                let up = if (target - eye).normalize().z.abs() > 0.9 { Vec3::x() } else { Vec3::z() };
                let pose = Pose::look_at(eye, target, up).unwrap();
                Frustum::new(Intrinsics::from_fov(64, 48, 60.0).unwrap(), pose, 0.2, 2.5).unwrap()
            })
            .collect();
        let got = build_fbv(&frusta, &grid, Some(&extent)).map(|s| s.coords().to_vec()).unwrap_or_default();
        let want = exhaustive_fbv(&frusta, &grid, [-10, -10, -10], 20, &extent);
        assert!(!want.is_empty());
        assert_eq!(got, want);
    }
}

#[test]
fn keyframe_counts_follow_the_policy() {
    let k = Intrinsics::from_fov(64, 48, 60.0).unwrap();
    // pure yaw steps of 4 degrees: every fourth frame crosses 15 degrees
    let frames: Vec<PosedFrame> = (0..100)
        .map(|i| {
            let r = Rotation3::from_axis_angle(&Vec3::y_axis(), (4.0 * i as f64).to_radians());
            PosedFrame {
                index: i,
                intrinsics: k,
                pose: Pose::new(*r.matrix(), Vec3::zeros()).unwrap(),
            }
        })
        .collect();
    let policy = KeyframePolicy {
        theta_deg: 15.0,
        t_key: 0.1,
        frames_per_fragment: 5,
        rule: KeyframeRule::Or,
    };
    let frags = assemble_fragments(frames, &policy).unwrap();
    let keys: Vec<usize> = frags.iter().flat_map(|f| f.frames.iter().map(|p| p.index)).collect();
    assert_eq!(&keys[..6], &[0, 4, 8, 12, 16, 20]);
    assert_eq!(frags.len(), 5);
    assert!(frags.iter().all(|f| f.len() == 5));
}

proptest! {
    #[test]
    fn projection_inverts_backprojection(
        u in 0.0f64..640.0, v in 0.0f64..480.0, d in 0.05f64..20.0,
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..3.0,
        tx in -3.0f64..3.0, ty in -3.0f64..3.0, tz in -3.0f64..3.0,
    ) {
        let k = Intrinsics::new(500.0, 510.0, 320.0, 240.0, 640, 480).unwrap();
        let axis = Vec3::new(ax, ay, az + 1e-3);
        let pose = Pose::new(*Rotation3::new(axis.normalize() * angle).matrix(), Vec3::new(tx, ty, tz)).unwrap();
        let p = backproject(u, v, d, &k, &pose).unwrap();
        let q = project(&p, &k, &pose);
        prop_assert!(q.in_front);
        prop_assert!((q.u - u).abs() < 1e-7 && (q.v - v).abs() < 1e-7 && (q.z - d).abs() < 1e-9);
    }

    #[test]
    fn fbv_voxels_are_inside_some_frustum(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec::new(3, 0.1, Vec3::zeros()).unwrap();
        let eye = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5);
        let pose = Pose::look_at(eye, Vec3::new(0.0, 0.0, 0.3), Vec3::z()).unwrap();
        let f = Frustum::new(Intrinsics::from_fov(32, 32, 60.0).unwrap(), pose, 0.2, 2.0).unwrap();
        let fbv = build_fbv(&[f], &grid, None).unwrap();
        for c in fbv.coords() {
            prop_assert!(in_frustum(&grid.center(c), &f));
        }
    }
}
