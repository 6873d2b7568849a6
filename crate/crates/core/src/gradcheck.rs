//! End-to-end gradient check on a tiny two-view fragment.

use cdr_tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Precision, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Intrinsics, Pose, Vec3};
use crate::config::PipelineConfig;
use crate::dataset::rgb_tensor;
use crate::error::Result;
use crate::mvs::ViewGeom;
use crate::pipeline::{fragment_loss, image_constants, init_params, run_fragment, FragmentGeometry, FragmentTruth, RunOptions};
use crate::supervision::FrameTruth;
use crate::synth::{render_view, Scene};
use crate::volume::GlobalVolume;

/// 32x32 images, two views, four depth planes, 8 cm voxels in a 2.56 m box
/// (8 coarse voxels per side) and narrow channels, all in 64-bit.
pub fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        precision: Precision::F64,
        voxel_size: 0.08,
        fbv_extent: 2.56,
        d_min: 0.3,
        d_max: 3.0,
        depth_planes: 4,
        frames_per_fragment: 2,
        stem_channels: 4,
        channels_p2: 4,
        channels_p3: 4,
        channels_p4: 4,
        head2d_channels: 4,
        reg_channels: 2,
        volume_channels: 4,
        cond_channels: 2,
        ref_channels: 2,
        synth_width: 32,
        synth_height: 32,
        ..PipelineConfig::default()
    }
}

/// A rendered fragment with cached geometry and supervision.
pub struct TinyFragment {
    pub geom: FragmentGeometry,
    pub images: Vec<Tensor>,
    pub truth: FragmentTruth,
}

pub fn tiny_fragment(cfg: &PipelineConfig, seed: u64) -> Result<TinyFragment> {
    let scene = Scene::random(seed, Vec3::new(2.4, 2.4, 1.6))?;
    let k = Intrinsics::from_fov(cfg.synth_width, cfg.synth_height, 70.0)?;
    let target = scene.centroid();
    let mut views = Vec::new();
    let mut images = Vec::new();
    let mut frames = Vec::new();
    for deg in [0.0f64, 25.0] {
        let a = deg.to_radians();
        let eye = Vec3::new(target.x + 0.75 * a.cos(), target.y + 0.75 * a.sin(), 0.9);
        let pose = Pose::look_at(eye, target, Vec3::z())?;
        let view = render_view(&scene, &k, &pose);
        images.push(rgb_tensor(&view.rgb, k.width as usize, k.height as usize));
        frames.push(FrameTruth::new(k.width as usize, k.height as usize, view.depth.clone(), view.label.clone())?);
        views.push(ViewGeom { intrinsics: k, pose });
    }
    let geom = FragmentGeometry::new(&views, cfg)?;
    let truth = FragmentTruth::new(&geom, &frames, cfg)?;
    Ok(TinyFragment { geom, images, truth })
}

/// Initial parameters with every entry jittered so that zero-initialised
/// residual paths carry gradient too.
pub fn jittered_params(cfg: &PipelineConfig, seed: u64) -> ParamStore {
    let mut p = init_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    p
}

/// Checks tape gradients of the total fragment loss against central
/// differences for every parameter tensor (`entries` sampled entries each).
/// Discrete decisions are recorded once and replayed for every evaluation.
pub fn pipeline_grad_check(seed: u64, entries: usize) -> Result<GradCheckReport> {
    grad_check_fragment(&tiny_config(), seed, entries, 1e-4)
}

pub fn grad_check_fragment(cfg: &PipelineConfig, seed: u64, entries: usize, eps: f64) -> Result<GradCheckReport> {
    let cfg = cfg.clone();
    let frag = tiny_fragment(&cfg, seed)?;
    let params = jittered_params(&cfg, seed);
    let global = GlobalVolume::new();

    let decisions = {
        let mut tape = cdr_tensor::Tape::with_precision(Precision::F64);
        let p = params.bind(&mut tape, |_| false);
        let imgs = image_constants(&mut tape, &frag.images);
        let opts = RunOptions {
            truth_support: Some(&frag.truth.occupied),
            replay: None,
        };
        run_fragment(&mut tape, &p, &cfg, &frag.geom, &imgs, &global, opts)?.decisions
    };

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut cdr_tensor::Tape, vars: &[cdr_tensor::Var]| -> cdr_tensor::Result<cdr_tensor::Var> {
        let p = names.iter().cloned().zip(vars.iter().copied()).collect();
        let imgs = image_constants(tape, &frag.images);
        let opts = RunOptions {
            truth_support: Some(&frag.truth.occupied),
            replay: Some(&decisions),
        };
        let mut run = || -> Result<cdr_tensor::Var> {
            let out = run_fragment(tape, &p, &cfg, &frag.geom, &imgs, &global, opts)?;
            Ok(fragment_loss(tape, &cfg, &frag.geom, &out, &frag.truth)?.0)
        };
        run().map_err(|e| TensorError::CheckFailed(e.to_string()))
    };
    let opts = GradCheckOptions {
        eps,
        precision: Precision::F64,
        max_entries_per_input: Some(entries),
        seed,
        skip_kinks: true,
    };
    Ok(grad_check(f, &inputs, &opts)?)
}
