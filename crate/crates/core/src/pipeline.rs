//! Per-fragment forward pass, global fusion and meshing.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use cdr_tensor::{Bindings, Coord, CoordSet, GatherMap, ParamStore, SparseTensor3D, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, argmax_rows, extract_pyramid, semantic_head_2d};
use crate::camera::{Frustum, Vec3};
use crate::config::PipelineConfig;
use crate::error::{invalid, CdrError, Result};
use crate::fusion::{self, binomial_gru, build_meta_feature, gru_params, predict_heads, sigmoid, Backprojection, HeadParams, Heads};
use crate::mesh::{marching_cubes, transfer_labels, McOptions, Mesh};
use crate::mvs::{self, plane_depths, pointflow_prefix, pointflow_refine, ray_grid_geometry, regularize_and_softargmin, variance_cost, warp_map, ViewGeom};
use crate::objectives::{masked_bce, masked_ce, masked_mae, LossBuilder, LossReport};
use crate::refine::{anchored_voxels, build_matching_matrix, condition_tsdf, depth_points, indicator, refine_occupancy, semantic_refine, MatchingMatrix};
use crate::supervision::{fuse_truth, FrameTruth, TruthVoxel};
use crate::volume::{build_fbv, children, dilate, parent, ExtentBox, GlobalVolume, GridSpec, VoxelState, STAGES};

type Rays = (Vec<[f64; 3]>, Vec<[f64; 3]>);

/// Every parameter of the model, freshly initialised from `seed`.
pub fn init_params(cfg: &PipelineConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    backbone::init_params(&mut store, cfg, &mut rng);
    mvs::init_params(&mut store, cfg, &mut rng);
    let (nc, cc, cr) = (cfg.num_classes, cfg.cond_channels, cfg.ref_channels);
    for s in STAGES {
        fusion::init_stage_params(&mut store, cfg, s, &mut rng);
        let pre = format!("s{s}");
        store.init_uniform(&format!("{pre}.cond.w"), &[1, cc], 1, cc, &mut rng);
        store.init_uniform(&format!("{pre}.ref.w"), &[cfg.stage_channels(s), cr], cfg.stage_channels(s), cr, &mut rng);
        for (src, c) in [("cond", cc), ("ref", cr)] {
            store.init_const(&format!("{pre}.{src}_occ.w"), &[c, 1], 0.0);
            store.init_const(&format!("{pre}.{src}_tsdf.w"), &[c, 1], 0.0);
            store.init_const(&format!("{pre}.{src}_sem.w"), &[c, nc], 0.0);
        }
    }
    store
}

/// Geometry of one fragment that does not depend on the network.
pub struct FragmentGeometry {
    pub views: Vec<ViewGeom>,
    pub frusta: Vec<Frustum>,
    pub height: usize,
    pub width: usize,
    pub planes: Vec<f64>,
    /// Indexed by stage slot (stage - 2).
    pub grids: [GridSpec; 3],
    pub fbv: [Rc<CoordSet>; 3],
    /// `warps[r][j]`: view `j` warped onto reference `r` for every plane.
    pub warps: Vec<Vec<Rc<GatherMap>>>,
    pub warp_valid: Vec<Vec<Vec<bool>>>,
    pub rays: [Vec<Rays>; 3],
}

impl FragmentGeometry {
    pub fn new(views: &[ViewGeom], cfg: &PipelineConfig) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(CdrError::EmptyFragment("no views".into()));
        };
        let (width, height) = (first.intrinsics.width as usize, first.intrinsics.height as usize);
        if width % 16 != 0 || height % 16 != 0 || views.iter().any(|v| v.intrinsics != first.intrinsics) {
            return invalid("fragment views need one intrinsics with sizes divisible by 16");
        }
        let frusta = views
            .iter()
            .map(|v| Frustum::new(v.intrinsics, v.pose, cfg.d_min, cfg.d_max))
            .collect::<Result<Vec<_>>>()?;
        let n = views.len() as f64;
        let eye = views.iter().map(|v| v.pose.center()).sum::<Vec3>() / n;
        let axis = views.iter().map(|v| v.pose.axis()).sum::<Vec3>();
        let axis = if axis.norm() > 1e-9 { axis.normalize() } else { Vec3::zeros() };
        let extent = ExtentBox {
            center: eye + axis * (cfg.fbv_extent / 2.0),
            side: cfg.fbv_extent,
        };
        let g = |s: u8| GridSpec::new(s, cfg.voxel_size, Vec3::zeros());
        let grids = [g(2)?, g(3)?, g(4)?];
        let fbv4 = Rc::new(build_fbv(&frusta, &grids[2], Some(&extent))?);
        let fine = |g: &GridSpec| -> Result<Rc<CoordSet>> {
            match build_fbv(&frusta, g, Some(&extent)) {
                Ok(c) => Ok(Rc::new(c)),
                Err(CdrError::EmptyFragment(_)) => Ok(Rc::new(CoordSet::default())),
                Err(e) => Err(e),
            }
        };
        let fbv = [fine(&grids[0])?, fine(&grids[1])?, fbv4];
        let planes = plane_depths(cfg.d_min, cfg.d_max, cfg.depth_planes);
        let (h4, w4) = (height >> 2, width >> 2);
        let mut warps = Vec::with_capacity(views.len());
        let mut warp_valid = Vec::with_capacity(views.len());
        for r in views {
            let (maps, valid): (Vec<_>, Vec<_>) = views
                .iter()
                .map(|j| {
                    let (m, v) = warp_map(r, j, &planes, h4, w4);
                    (Rc::new(m), v)
                })
                .unzip();
            warps.push(maps);
            warp_valid.push(valid);
        }
        let rays = [2u8, 3, 4].map(|s| {
            let g = &grids[(s - 2) as usize];
            views
                .iter()
                .map(|v| ray_grid_geometry(v, s, height >> s, width >> s, g))
                .collect::<Vec<_>>()
        });
        Ok(FragmentGeometry {
            views: views.to_vec(),
            frusta,
            height,
            width,
            planes,
            grids,
            fbv,
            warps,
            warp_valid,
            rays,
        })
    }

    pub fn size(&self, stage: u8) -> (usize, usize) {
        (self.height >> stage, self.width >> stage)
    }
}

/// Discrete choices made during one forward pass; replaying them makes the
/// pass a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageDecisions {
    pub support: Rc<CoordSet>,
    /// Meta-feature row of each support voxel's parent, if any.
    pub parents: Vec<Option<usize>>,
    pub anchors: Option<BTreeSet<Coord>>,
    pub keep: Vec<bool>,
    pub matching: Vec<MatchingMatrix>,
    /// Rows passed on to the next stage.
    pub next: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions {
    pub stages: Vec<StageDecisions>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub stage: u8,
    pub coords: Rc<CoordSet>,
    pub features: Var,
    pub heads: Heads,
    /// Per-view depth rows `[rows * cols, 1]` at this stage.
    pub depth: Vec<Var>,
    pub next: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FragmentOutput {
    pub stages: Vec<StageOutput>,
    /// Per-view stage-4 depth rows from the plane sweep.
    pub d_init: Vec<Var>,
    /// Per-view stage-4 semantic logit rows `[cells, N_c]`.
    pub sem2d: Vec<Var>,
    pub decisions: Decisions,
}

#[derive(Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Occupied ground-truth voxels per stage slot, kept alive through pruning.
    pub truth_support: Option<&'a [BTreeSet<Coord>; 3]>,
    pub replay: Option<&'a Decisions>,
}

struct Carry {
    meta: Var,
    meta_rows: BTreeMap<Coord, usize>,
    parents: BTreeSet<Coord>,
    depth: Vec<Var>,
}

fn nearest_up_map(rows: usize, cols: usize) -> GatherMap {
    let (r2, c2) = (rows * 2, cols * 2);
    GatherMap::select(rows * cols, (0..r2 * c2).map(|i| Some((i / c2 / 2) * cols + (i % c2) / 2)))
}

fn linear_residual(tape: &mut Tape, base: Var, x: Var, w: Var) -> Result<Var> {
    let r = tape.linear(x, w, None)?;
    Ok(tape.add(base, r)?)
}

/// Runs the coarse-to-fine reconstruction of one fragment.
pub fn run_fragment(
    tape: &mut Tape,
    p: &Bindings,
    cfg: &PipelineConfig,
    geom: &FragmentGeometry,
    images: &[Var],
    global: &GlobalVolume,
    opts: RunOptions<'_>,
) -> Result<FragmentOutput> {
    let nv = geom.views.len();
    if images.len() != nv {
        return invalid("run_fragment: one image per view required");
    }
    let pyramids = images
        .iter()
        .map(|im| extract_pyramid(tape, p, *im))
        .collect::<Result<Vec<_>>>()?;
    let mut sem2d = Vec::with_capacity(nv);
    for py in &pyramids {
        let s = semantic_head_2d(tape, p, py.p2)?;
        sem2d.push(tape.chw_to_rows(s)?);
    }

    // plane sweep
    let (h4, w4) = geom.size(2);
    let p2_rows = pyramids
        .iter()
        .map(|py| tape.chw_to_rows(py.p2))
        .collect::<cdr_tensor::Result<Vec<_>>>()?;
    let mut d_init = Vec::with_capacity(nv);
    for r in 0..nv {
        let warped = (0..nv)
            .map(|j| tape.gather(p2_rows[j], geom.warps[r][j].clone()))
            .collect::<cdr_tensor::Result<Vec<_>>>()?;
        let cost = variance_cost(tape, &warped, geom.warp_valid[r].clone())?;
        d_init.push(regularize_and_softargmin(tape, p, cost, &geom.planes, h4, w4)?);
    }

    let refine = cfg.enable_anchor || cfg.enable_pv_match;
    let cv = cfg.volume_channels;
    let mut stages = Vec::new();
    let mut decisions = Decisions::default();
    let mut carry: Option<Carry> = None;

    for (si, &s) in STAGES.iter().enumerate() {
        let slot = PipelineConfig::stage_slot(s);
        let grid = geom.grids[slot];
        let (rows, cols) = geom.size(s);
        let replay = opts.replay.and_then(|d| d.stages.get(si));
        if opts.replay.is_some() && replay.is_none() {
            break;
        }

        let (support, parents) = match (replay, &carry) {
            (Some(r), _) => (r.support.clone(), r.parents.clone()),
            (None, None) => (geom.fbv[slot].clone(), Vec::new()),
            (None, Some(c)) => {
                let mut pairs: Vec<(Coord, Option<usize>)> = Vec::new();
                for pc in &c.parents {
                    for ch in children(pc) {
                        if geom.fbv[slot].contains(&ch) {
                            pairs.push((ch, c.meta_rows.get(pc).copied()));
                        }
                    }
                }
                pairs.sort_unstable();
                let (coords, parents): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                (Rc::new(CoordSet::new(coords)?), parents)
            }
        };
        if support.is_empty() {
            if s == 4 {
                return Err(CdrError::EmptyFragment("empty coarse volume".into()));
            }
            break;
        }
        let plan = Backprojection::new(support.coords().iter().copied(), &grid, &geom.frusta);
        if plan.coords.coords() != support.coords() {
            return invalid("support voxel outside every frustum");
        }

        // inputs
        let level_rows = pyramids
            .iter()
            .map(|py| tape.chw_to_rows(py.level(s)))
            .collect::<cdr_tensor::Result<Vec<_>>>()?;
        let avg = fusion::backproject_features(tape, &plan, &level_rows, s, rows, cols)?;
        let stats = tape.constant(plan.stats(cfg.d_max));
        let mut parts = vec![avg, stats];
        if s < 4 {
            let c = carry.as_ref().expect("coarser stage ran");
            let n_meta = tape.shape(c.meta)[0];
            let up = tape.gather(c.meta, Rc::new(GatherMap::select(n_meta, parents.iter().copied())))?;
            parts.push(up);
        }
        let x = tape.concat_cols(&parts)?;
        let xs = SparseTensor3D::new(tape, support.clone(), x, s)?;
        let pre = format!("s{s}");
        let geo = tape.sparse_conv3d(&xs, p.var(&format!("{pre}.geo.w")), Some(p.var(&format!("{pre}.geo.b"))))?;
        let geo_v = tape.relu(geo.values);
        let geo = xs.with_values(geo_v);
        let sem_in = if cfg.enable_binomial_sem {
            let (r4, c4) = geom.size(4);
            let stacked = tape.concat_rows(&sem2d)?;
            let avg = tape.gather(stacked, Rc::new(plan.average_map(4, r4, c4)))?;
            let h = tape.linear(avg, p.var(&format!("{pre}.semin.w")), Some(p.var(&format!("{pre}.semin.b"))))?;
            let h = tape.relu(h);
            Some(xs.with_values(h))
        } else {
            None
        };
        let hidden = tape.constant(global.mask_hidden(s, &support, cv));
        let hidden = xs.with_values(hidden);
        let local = binomial_gru(tape, &hidden, &geo, sem_in.as_ref(), &gru_params(p, &format!("{pre}.gru")))?;
        let heads0 = predict_heads(tape, local.values, &HeadParams::bind(p, &pre))?;

        // stage depth
        let base: Vec<Var> = match &carry {
            None => d_init.clone(),
            Some(c) => {
                let (pr, pc) = geom.size(s + 1);
                let map = Rc::new(nearest_up_map(pr, pc));
                c.depth
                    .iter()
                    .map(|d| tape.gather(*d, map.clone()))
                    .collect::<cdr_tensor::Result<Vec<_>>>()?
            }
        };
        let depth: Vec<Var> = if refine {
            let prefix = pointflow_prefix(cfg, s);
            (0..nv)
                .map(|v| pointflow_refine(tape, p, &prefix, base[v], &geom.rays[slot][v], &local, grid.voxel_size, (cfg.d_min, cfg.d_max)))
                .collect::<Result<Vec<_>>>()?
        } else {
            base
        };

        let mut occ = heads0.occ;
        let mut tsdf_pre = heads0.tsdf_pre;
        let mut sem = heads0.sem;
        let mut dec = StageDecisions {
            support: support.clone(),
            parents,
            ..Default::default()
        };

        if cfg.enable_anchor {
            let anchors = match replay {
                Some(r) => r.anchors.clone().unwrap_or_default(),
                None => {
                    let mut pts = Vec::new();
                    for v in 0..nv {
                        pts.extend(depth_points(tape.value(depth[v]).data(), &geom.frusta[v], s, cols));
                    }
                    anchored_voxels(&pts, &grid, cfg.anchor_radius)
                        .into_iter()
                        .filter(|c| support.contains(c))
                        .collect()
                }
            };
            let keep = match replay {
                Some(r) => r.keep.clone(),
                None => refine_occupancy(&support, tape.value(heads0.occ).data(), &anchors, cfg.theta_occ),
            };
            let mask = if cfg.soft_intersection {
                let inside: Vec<bool> = support.iter().map(|c| anchors.contains(c)).collect();
                let ind = tape.constant(indicator(&inside));
                let prob = tape.sigmoid(heads0.occ);
                tape.mul(prob, ind)?
            } else {
                tape.constant(indicator(&keep))
            };
            let cond = condition_tsdf(tape, heads0.tsdf, mask, p.var(&format!("{pre}.cond.w")))?;
            occ = linear_residual(tape, occ, cond, p.var(&format!("{pre}.cond_occ.w")))?;
            tsdf_pre = linear_residual(tape, tsdf_pre, cond, p.var(&format!("{pre}.cond_tsdf.w")))?;
            sem = linear_residual(tape, sem, cond, p.var(&format!("{pre}.cond_sem.w")))?;
            dec.anchors = Some(anchors);
            dec.keep = keep;
        }
        if cfg.enable_pv_match {
            let matching = match replay {
                Some(r) => r.matching.clone(),
                None => (0..nv)
                    .map(|v| {
                        build_matching_matrix(
                            &geom.frusta[v],
                            &support,
                            &grid,
                            tape.value(depth[v]).data(),
                            s,
                            rows,
                            cols,
                            cfg.tau_occ_factor * grid.voxel_size,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            let r = semantic_refine(tape, &level_rows, &matching, p.var(&format!("{pre}.ref.w")))?;
            occ = linear_residual(tape, occ, r, p.var(&format!("{pre}.ref_occ.w")))?;
            tsdf_pre = linear_residual(tape, tsdf_pre, r, p.var(&format!("{pre}.ref_tsdf.w")))?;
            sem = linear_residual(tape, sem, r, p.var(&format!("{pre}.ref_sem.w")))?;
            dec.matching = matching;
        }
        let tsdf = if refine { tape.tanh(tsdf_pre) } else { heads0.tsdf };
        let heads = Heads { occ, tsdf_pre, tsdf, sem };

        let next = match replay {
            Some(r) => r.next.clone(),
            None => {
                let anchors = dec.anchors.as_ref();
                tape.value(occ)
                    .data()
                    .iter()
                    .zip(support.iter())
                    .enumerate()
                    .filter(|(_, (o, c))| sigmoid(**o) > cfg.theta_occ && anchors.is_none_or(|a| a.contains(*c)))
                    .map(|(i, _)| i)
                    .collect()
            }
        };
        dec.next = next.clone();

        if s > 2 {
            let meta = build_meta_feature(tape, local.values, &heads, &next)?;
            let meta_rows: BTreeMap<Coord, usize> = next.iter().enumerate().map(|(m, r)| (support.coords()[*r], m)).collect();
            let mut parents: BTreeSet<Coord> = meta_rows.keys().copied().collect();
            if let Some(t) = opts.truth_support {
                parents.extend(t[slot].iter().filter(|c| support.contains(c)));
            }
            carry = Some(Carry {
                meta,
                meta_rows,
                parents,
                depth: depth.clone(),
            });
        }
        stages.push(StageOutput {
            stage: s,
            coords: support,
            features: local.values,
            heads,
            depth,
            next,
        });
        decisions.stages.push(dec);
    }

    Ok(FragmentOutput {
        stages,
        d_init,
        sem2d,
        decisions,
    })
}

/// Writes the fragment's predictions into the global volume. Voxels pruned
/// at a stage keep only the sign of their TSDF. Stage-2 neighbours of
/// computed voxels that were never computed take the sign of their nearest
/// computed ancestor.
pub fn fuse_fragment(global: &mut GlobalVolume, tape: &Tape, out: &FragmentOutput, geom: &FragmentGeometry) {
    for st in &out.stages {
        let occ = tape.value(st.heads.occ).data();
        let tsdf = tape.value(st.heads.tsdf).data();
        let labels = argmax_rows(tape.value(st.heads.sem));
        let feats = tape.value(st.features);
        let kept: BTreeSet<usize> = st.next.iter().copied().collect();
        let updates: Vec<(Coord, VoxelState)> = st
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let t = if kept.contains(&i) { tsdf[i] } else if tsdf[i] < 0.0 { -1.0 } else { 1.0 };
                (
                    *c,
                    VoxelState {
                        tsdf: t,
                        occupancy: sigmoid(occ[i]),
                        label: Some(labels[i] as u32),
                        hidden: Some(feats.row(i).to_vec()),
                    },
                )
            })
            .collect();
        global.fuse(st.stage, updates);
    }
    let Some(fine) = out.stages.iter().find(|s| s.stage == 2) else { return };
    let fbv2 = &geom.fbv[0];
    let mut fillers = Vec::new();
    for c in dilate(fine.coords.iter().copied(), 1) {
        if fine.coords.contains(&c) || !fbv2.contains(&c) {
            continue;
        }
        if global.get(2, &c).is_some_and(|v| v.label.is_some()) {
            continue;
        }
        let p3 = parent(&c);
        let sign = global
            .get(3, &p3)
            .or_else(|| global.get(4, &parent(&p3)))
            .map_or(1.0, |v| if v.tsdf < 0.0 { -1.0 } else { 1.0 });
        fillers.push((
            c,
            VoxelState {
                tsdf: sign,
                occupancy: 0.0,
                label: None,
                hidden: None,
            },
        ));
    }
    global.fuse(2, fillers);
}

/// Marching cubes over the finest stage with nearest-voxel labels.
pub fn extract_mesh(global: &GlobalVolume, cfg: &PipelineConfig) -> Result<Mesh> {
    let grid = GridSpec::new(2, cfg.voxel_size, Vec3::zeros())?;
    let Some(fine) = global.stage(2) else { return Ok(Mesh::default()) };
    let tsdf: BTreeMap<Coord, f64> = fine.iter().map(|(c, v)| (*c, v.tsdf)).collect();
    let labels: BTreeMap<Coord, u32> = fine.iter().filter_map(|(c, v)| v.label.map(|l| (*c, l))).collect();
    let mut mesh = marching_cubes(
        &tsdf,
        &grid,
        &McOptions {
            iso: 0.0,
            skip_absent: cfg.mesh_skip_absent,
        },
    );
    transfer_labels(&mut mesh, &labels, &grid);
    Ok(mesh)
}

/// Supervision for one fragment.
#[derive(Clone, Debug)]
pub struct FragmentTruth {
    /// Per stage slot.
    pub voxels: [BTreeMap<Coord, TruthVoxel>; 3],
    pub occupied: [BTreeSet<Coord>; 3],
    /// Per stage slot, per view.
    pub depth: [Vec<Vec<f64>>; 3],
    /// Per view, at stage 2.
    pub labels2: Vec<Vec<Option<usize>>>,
}

impl FragmentTruth {
    pub fn new(geom: &FragmentGeometry, frames: &[FrameTruth], cfg: &PipelineConfig) -> Result<Self> {
        let mut voxels: [BTreeMap<Coord, TruthVoxel>; 3] = Default::default();
        let mut occupied: [BTreeSet<Coord>; 3] = Default::default();
        let mut depth: [Vec<Vec<f64>>; 3] = Default::default();
        for s in STAGES {
            let slot = PipelineConfig::stage_slot(s);
            voxels[slot] = fuse_truth(&geom.fbv[slot], &geom.grids[slot], &geom.frusta, frames, cfg.truncation(s), cfg.num_classes)?;
            occupied[slot] = voxels[slot].iter().filter(|(_, v)| v.occupied).map(|(c, _)| *c).collect();
            depth[slot] = frames.iter().map(|f| f.depth_at_stage(s)).collect();
        }
        let labels2 = frames.iter().map(|f| f.labels_at_stage(2, cfg.num_classes)).collect();
        Ok(FragmentTruth {
            voxels,
            occupied,
            depth,
            labels2,
        })
    }
}

fn stacked_depth_loss(tape: &mut Tape, preds: &[Var], truth: &[Vec<f64>]) -> Result<Var> {
    let x = tape.concat_rows(preds)?;
    let target: Vec<f64> = truth.iter().flatten().copied().collect();
    let mask = target.iter().map(|d| *d > 0.0).collect();
    masked_mae(tape, x, target, mask)
}

/// Weighted 3D and 2D losses of one fragment.
pub fn fragment_loss(tape: &mut Tape, cfg: &PipelineConfig, geom: &FragmentGeometry, out: &FragmentOutput, truth: &FragmentTruth) -> Result<(Var, LossReport)> {
    let mut lb = LossBuilder::new();
    for st in &out.stages {
        let s = st.stage;
        let slot = PipelineConfig::stage_slot(s);
        let gt: Vec<Option<&TruthVoxel>> = st.coords.iter().map(|c| truth.voxels[slot].get(c)).collect();
        let mask: Vec<bool> = gt.iter().map(Option::is_some).collect();
        let t_target = gt.iter().map(|g| g.map_or(0.0, |v| cdr_tensor::log_transform(v.tsdf))).collect();
        let o_target = gt.iter().map(|g| g.map_or(0.0, |v| f64::from(u8::from(v.occupied)))).collect();
        let s_target = gt
            .iter()
            .map(|g| g.filter(|v| v.occupied).and_then(|v| v.label).map(|l| l as usize))
            .collect();
        let lt = tape.log_transform(st.heads.tsdf);
        let mae = masked_mae(tape, lt, t_target, mask.clone())?;
        lb.push(format!("tsdf_mae_s{s}"), mae, cfg.alpha[slot]);
        let bce = masked_bce(tape, st.heads.occ, o_target, mask)?;
        lb.push(format!("occ_bce_s{s}"), bce, cfg.lambda_occ * cfg.alpha[slot]);
        let ce = masked_ce(tape, st.heads.sem, s_target)?;
        lb.push(format!("sem_ce_s{s}"), ce, cfg.beta[slot]);
        let dm = stacked_depth_loss(tape, &st.depth, &truth.depth[slot])?;
        lb.push(format!("depth_mae_s{s}"), dm, cfg.mu * cfg.gamma[slot]);
    }
    let di = stacked_depth_loss(tape, &out.d_init, &truth.depth[2])?;
    lb.push("depth_init_mae", di, cfg.mu);
    let (r4, c4) = geom.size(4);
    let (r2, c2) = geom.size(2);
    let up = Rc::new(GatherMap::select(
        r4 * c4,
        (0..r2 * c2).map(|i| Some(((i / c2) / 4) * c4 + (i % c2) / 4)),
    ));
    let ups = out
        .sem2d
        .iter()
        .map(|s| tape.gather(*s, up.clone()))
        .collect::<cdr_tensor::Result<Vec<_>>>()?;
    let x = tape.concat_rows(&ups)?;
    let ce = masked_ce(tape, x, truth.labels2.iter().flatten().copied().collect())?;
    lb.push("sem2d_ce", ce, cfg.mu);
    lb.total(tape)
}

/// `[3, H, W]` image tensors to tape constants.
pub fn image_constants(tape: &mut Tape, images: &[Tensor]) -> Vec<Var> {
    images.iter().map(|t| tape.constant(t.clone())).collect()
}
