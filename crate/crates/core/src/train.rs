//! Fragment sampling, the Adam training loop and reconstruction runs.

use std::io::Write;
use std::time::Instant;

use cdr_tensor::{Adam, ParamStore, Tape, Tensor};
use log::{debug, info, warn};

use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::{CdrError, Result};
use crate::fragments::{assemble_fragments, Fragment, FragmentAssembler};
use crate::mesh::Mesh;
use crate::metrics::{mesh_metrics, vertex_miou, voxel_miou, MeshMetrics, Throughput};
use crate::mvs::ViewGeom;
use crate::objectives::LossReport;
use crate::pipeline::{extract_mesh, fragment_loss, fuse_fragment, image_constants, run_fragment, FragmentGeometry, FragmentTruth, RunOptions};
use crate::supervision::FrameTruth;
use crate::volume::GlobalVolume;

fn views_of(fragment: &Fragment) -> Vec<ViewGeom> {
    fragment
        .frames
        .iter()
        .map(|f| ViewGeom {
            intrinsics: f.intrinsics,
            pose: f.pose,
        })
        .collect()
}

/// One supervised fragment with its geometry cached.
pub struct TrainSample {
    pub scene: usize,
    pub first_of_scene: bool,
    pub geom: FragmentGeometry,
    pub images: Vec<Tensor>,
    pub truth: FragmentTruth,
}

/// Every usable fragment of a dataset with ground truth.
pub fn load_samples(ds: &Dataset, cfg: &PipelineConfig, scene: usize) -> Result<Vec<TrainSample>> {
    if !ds.has_depth() || !ds.has_label() {
        return Err(CdrError::Config(format!(
            "{}: training needs depth/ and label/ ground truth",
            ds.root().display()
        )));
    }
    let k = ds.intrinsics();
    let mut out = Vec::new();
    for frag in assemble_fragments(ds.frames().iter().cloned(), &cfg.keyframe_policy())? {
        let geom = match FragmentGeometry::new(&views_of(&frag), cfg) {
            Ok(g) => g,
            Err(CdrError::EmptyFragment(m)) => {
                warn!("skipping fragment {}: {m}", frag.index);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut images = Vec::with_capacity(frag.len());
        let mut frames = Vec::with_capacity(frag.len());
        for f in &frag.frames {
            images.push(ds.load_color(f.index)?);
            frames.push(FrameTruth::new(
                k.width as usize,
                k.height as usize,
                ds.load_depth(f.index)?,
                ds.load_label(f.index)?,
            )?);
        }
        let truth = FragmentTruth::new(&geom, &frames, cfg)?;
        out.push(TrainSample {
            scene,
            first_of_scene: out.is_empty(),
            geom,
            images,
            truth,
        });
    }
    Ok(out)
}

/// Initial rate halved at a quarter, half and three quarters of training.
pub fn lr_at(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let q = (4 * step / total).min(3) as i32;
    lr0 * 0.5f64.powi(q)
}

/// `step,term,value` rows for one step.
pub fn write_loss_rows(w: &mut impl Write, step: usize, report: &LossReport, all_terms: bool) -> std::io::Result<()> {
    if all_terms {
        for (name, (v, _)) in &report.terms {
            writeln!(w, "{step},{name},{v:.9}")?;
        }
    }
    writeln!(w, "{step},total,{:.9}", report.total)
}

/// One forward/backward pass and Adam update on `sample`.
fn train_step(params: &mut ParamStore, adam: &mut Adam, sample: &TrainSample, global: &mut GlobalVolume, cfg: &PipelineConfig) -> Result<LossReport> {
    let mut tape = Tape::with_precision(cfg.precision);
    let frozen = cfg.freeze_backbone;
    let p = params.bind(&mut tape, |n| !(frozen && n.starts_with("bb.")));
    let images = image_constants(&mut tape, &sample.images);
    let out = run_fragment(
        &mut tape,
        &p,
        cfg,
        &sample.geom,
        &images,
        global,
        RunOptions {
            truth_support: Some(&sample.truth.occupied),
            replay: None,
        },
    )?;
    let (loss, report) = fragment_loss(&mut tape, cfg, &sample.geom, &out, &sample.truth)?;
    let grads = tape.backward(loss)?;
    let named = p
        .iter()
        .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
        .collect();
    adam.step(params, &named);
    fuse_fragment(global, &tape, &out, &sample.geom);
    Ok(report)
}

/// Cycles through `samples` for `steps` updates. The recurrent state is
/// reset at the first fragment of every scene.
pub fn train(
    params: &mut ParamStore,
    samples: &[TrainSample],
    cfg: &PipelineConfig,
    steps: usize,
    mut on_step: impl FnMut(usize, &LossReport, &ParamStore) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if samples.is_empty() && steps > 0 {
        return Err(CdrError::Data("no training fragments".into()));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut global = GlobalVolume::new();
    let mut reports = Vec::with_capacity(steps);
    let mut last_scene = usize::MAX;
    for step in 0..steps {
        let sample = &samples[step % samples.len()];
        if sample.first_of_scene || sample.scene != last_scene {
            global = GlobalVolume::new();
        }
        last_scene = sample.scene;
        adam.lr = lr_at(step, steps, cfg.lr);
        let report = train_step(params, &mut adam, sample, &mut global, cfg)?;
        debug!("step {step}: loss {:.6}", report.total);
        if !report.total.is_finite() {
            return Err(CdrError::Data(format!("loss became non-finite at step {step}")));
        }
        on_step(step, &report, params)?;
        reports.push(report);
    }
    if let (Some(a), Some(b)) = (reports.first(), reports.last()) {
        info!("training loss {:.6} -> {:.6} over {steps} steps", a.total, b.total);
    }
    Ok(reports)
}

/// Result of streaming a sequence through the pipeline.
pub struct Reconstruction {
    pub global: GlobalVolume,
    pub mesh: Mesh,
    pub throughput: Throughput,
    pub skipped: usize,
}

fn process_fragment(ds: &Dataset, frag: &Fragment, params: &ParamStore, cfg: &PipelineConfig, global: &mut GlobalVolume) -> Result<()> {
    let geom = FragmentGeometry::new(&views_of(frag), cfg)?;
    let images = frag
        .frames
        .iter()
        .map(|f| ds.load_color(f.index))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::with_precision(cfg.precision);
    let p = params.bind(&mut tape, |_| false);
    let vars = image_constants(&mut tape, &images);
    let out = run_fragment(&mut tape, &p, cfg, &geom, &vars, global, RunOptions::default())?;
    fuse_fragment(global, &tape, &out, &geom);
    Ok(())
}

/// Streams every frame through key-frame selection, reconstructs each
/// complete fragment and meshes the result. `after_fragment` sees the
/// global volume after each fused fragment.
pub fn reconstruct(
    ds: &Dataset,
    params: &ParamStore,
    cfg: &PipelineConfig,
    mut after_fragment: impl FnMut(usize, &GlobalVolume) -> Result<()>,
) -> Result<Reconstruction> {
    let start = Instant::now();
    let mut assembler = FragmentAssembler::new(cfg.keyframe_policy())?;
    let mut global = GlobalVolume::new();
    let mut fragments = 0;
    let mut skipped = 0;
    for frame in ds.frames() {
        let Some(frag) = assembler.push(frame.clone()) else { continue };
        fragments += 1;
        match process_fragment(ds, &frag, params, cfg, &mut global) {
            Ok(()) => after_fragment(frag.index, &global)?,
            Err(e) => {
                warn!("fragment {} skipped: {e}", frag.index);
                skipped += 1;
            }
        }
    }
    let mesh = extract_mesh(&global, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(Reconstruction {
        global,
        mesh,
        throughput: Throughput {
            frames: assembler.frames_seen(),
            keyframes: assembler.keyframes(),
            fragments,
            seconds,
        },
        skipped,
    })
}

/// Mesh metrics at the configured threshold and the semantic mIoU (vertex or
/// voxel mode).
pub fn evaluate(pred: &Mesh, gt: &Mesh, cfg: &PipelineConfig) -> Result<(MeshMetrics, f64)> {
    let tau = cfg.eval_threshold();
    let m = mesh_metrics(pred, gt, tau, cfg.eval_samples, cfg.seed)?;
    let miou = if cfg.miou_voxels {
        voxel_miou(pred, gt, cfg.voxel_size, cfg.num_classes)
    } else {
        vertex_miou(pred, gt, tau, cfg.num_classes)
    };
    Ok((m, miou))
}

/// Reads a checkpoint and checks it against the parameter layout of `cfg`.
pub fn load_weights(path: &std::path::Path, cfg: &PipelineConfig) -> Result<ParamStore> {
    let p = ParamStore::load(path).map_err(|e| CdrError::Data(format!("{}: {e}", path.display())))?;
    let want = crate::pipeline::init_params(cfg, 0);
    let same = want.len() == p.len()
        && want
            .iter()
            .all(|(n, t)| p.get(n).is_some_and(|q| q.shape() == t.shape()));
    if !same {
        return Err(CdrError::Config(format!(
            "{}: checkpoint does not match the configured model",
            path.display()
        )));
    }
    Ok(p)
}

/// Mean absolute TSDF error of the finest-stage prediction over the
/// computed voxels that are occupied in the fragment's ground truth.
pub fn occupied_tsdf_mae(params: &ParamStore, sample: &TrainSample, cfg: &PipelineConfig) -> Result<f64> {
    let mut tape = Tape::with_precision(cfg.precision);
    let p = params.bind(&mut tape, |_| false);
    let images = image_constants(&mut tape, &sample.images);
    let opts = RunOptions {
        truth_support: Some(&sample.truth.occupied),
        replay: None,
    };
    let out = run_fragment(&mut tape, &p, cfg, &sample.geom, &images, &GlobalVolume::new(), opts)?;
    let fine = out
        .stages
        .iter()
        .find(|s| s.stage == 2)
        .ok_or_else(|| CdrError::Data("no finest stage output".into()))?;
    let truth = &sample.truth.voxels[0];
    let pred = tape.value(fine.heads.tsdf).data();
    let (mut sum, mut n) = (0.0, 0usize);
    for (row, c) in fine.coords.iter().enumerate() {
        if let Some(v) = truth.get(c).filter(|v| v.occupied) {
            sum += (pred[row] - v.tsdf).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(CdrError::Data("no occupied ground-truth voxels were computed".into()));
    }
    Ok(sum / n as f64)
}
