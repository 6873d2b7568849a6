//! Synthetic datasets on disk: rendered frames, the scene description and a
//! ground-truth mesh of the observed surfaces.

use std::collections::BTreeMap;
use std::path::Path;

use cdr_tensor::Coord;

use crate::camera::{project, Intrinsics, Pose, Vec3};
use crate::config::PipelineConfig;
use crate::dataset::{write_frame, GT_MESH_FILE, SCENE_FILE};
use crate::error::{invalid, Result};
use crate::mesh::{marching_cubes, transfer_labels, write_ply, McOptions, Mesh};
use crate::synth::{gt_volume, render_view, write_scene, RenderedView, Scene};
use crate::volume::GridSpec;

/// Orbit around the scene centroid at the configured radius and height.
pub fn synth_trajectory(scene: &Scene, cfg: &PipelineConfig) -> Result<Vec<Pose>> {
    if cfg.synth_frames == 0 {
        return invalid("synthetic sequence needs at least one frame");
    }
    let target = scene.centroid();
    let n = cfg.synth_frames as f64;
    (0..cfg.synth_frames)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * cfg.synth_orbit_turns * i as f64 / n;
            let eye = Vec3::new(
                target.x + cfg.synth_orbit_radius * a.cos(),
                target.y + cfg.synth_orbit_radius * a.sin(),
                cfg.synth_orbit_height,
            );
            Pose::look_at(eye, target, Vec3::z())
        })
        .collect()
}

pub fn synth_intrinsics(cfg: &PipelineConfig) -> Result<Intrinsics> {
    Intrinsics::from_fov(cfg.synth_width, cfg.synth_height, cfg.synth_hfov)
}

/// Mesh of the analytic TSDF restricted to voxels that some view observes
/// (in front of, or within one truncation behind, its rendered surface).
pub fn observed_gt_mesh(scene: &Scene, views: &[(Pose, RenderedView)], k: &Intrinsics, cfg: &PipelineConfig) -> Result<Mesh> {
    let grid = GridSpec::new(2, cfg.voxel_size, Vec3::zeros())?;
    let trunc = cfg.truncation(2);
    let vol = gt_volume(scene, &grid, trunc);
    let (w, h) = (k.width as usize, k.height as usize);
    let observed = |p: &Vec3| {
        views.iter().any(|(pose, view)| {
            let q = project(p, k, pose);
            if !q.in_front || !k.contains_pixel(q.u, q.v) {
                return false;
            }
            let d = view.depth[(q.v.floor() as usize).min(h - 1) * w + (q.u.floor() as usize).min(w - 1)];
            d > 0.0 && q.z <= d + trunc
        })
    };
    let mut tsdf = BTreeMap::new();
    let mut labels: BTreeMap<Coord, u32> = BTreeMap::new();
    for (c, v) in &vol {
        if observed(&grid.center(c)) {
            tsdf.insert(*c, v.tsdf);
            if v.occupied {
                labels.insert(*c, v.label);
            }
        }
    }
    let mut mesh = marching_cubes(&tsdf, &grid, &McOptions { iso: 0.0, skip_absent: true });
    transfer_labels(&mut mesh, &labels, &grid);
    Ok(mesh)
}

/// Renders the orbit sequence of `scene` into `root`. Returns the frame count.
pub fn write_synthetic(root: &Path, scene: &Scene, cfg: &PipelineConfig) -> Result<usize> {
    let k = synth_intrinsics(cfg)?;
    let poses = synth_trajectory(scene, cfg)?;
    let mut views = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let view = render_view(scene, &k, pose);
        write_frame(root, i, &k, pose, &view)?;
        views.push((*pose, view));
    }
    write_scene(&root.join(SCENE_FILE), scene)?;
    let mesh = observed_gt_mesh(scene, &views, &k, cfg)?;
    write_ply(&root.join(GT_MESH_FILE), &mesh)?;
    Ok(poses.len())
}

/// A random room for `seed` sized by the configuration.
pub fn synth_scene(seed: u64, cfg: &PipelineConfig) -> Result<Scene> {
    Scene::random(seed, cfg.synth_room)
}
