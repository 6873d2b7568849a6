//! Back-projection of 2D features into sparse voxels, the binomial GRU and
//! the per-voxel prediction heads.

use std::rc::Rc;

use cdr_tensor::{Bindings, Coord, CoordSet, GatherMap, GruParams, ParamStore, SparseTensor3D, Tape, Tensor, Var};
use rand::Rng;

use crate::camera::{in_frustum, project, Frustum};
use crate::config::PipelineConfig;
use crate::error::{invalid, Result};
use crate::volume::GridSpec;

/// One view observing a voxel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub view: usize,
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Voxels seen by at least one view, with the views that see them.
#[derive(Clone, Debug)]
pub struct Backprojection {
    pub coords: Rc<CoordSet>,
    pub hits: Vec<Vec<Hit>>,
    pub views: usize,
}

impl Backprojection {
    /// Keeps the candidates whose centers fall inside some frustum. The
    /// result is sorted.
    pub fn new(candidates: impl IntoIterator<Item = Coord>, grid: &GridSpec, frusta: &[Frustum]) -> Self {
        let mut pairs: Vec<(Coord, Vec<Hit>)> = Vec::new();
        for c in candidates {
            let p = grid.center(&c);
            let hits: Vec<Hit> = frusta
                .iter()
                .enumerate()
                .filter(|(_, f)| in_frustum(&p, f))
                .map(|(view, f)| {
                    let q = project(&p, &f.intrinsics, &f.pose);
                    Hit { view, u: q.u, v: q.v, z: q.z }
                })
                .collect();
            if !hits.is_empty() {
                pairs.push((c, hits));
            }
        }
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 == b.0);
        let (coords, hits): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Backprojection {
            coords: Rc::new(CoordSet::new(coords).expect("deduplicated")),
            hits,
            views: frusta.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Averaging map over per-view row blocks of a stage-`s` map with
    /// `rows x cols` cells, stacked view after view.
    pub fn average_map(&self, stage: u8, rows: usize, cols: usize) -> GatherMap {
        let n = rows * cols;
        let mut map = GatherMap::new(self.views * n);
        for hits in &self.hits {
            let w = 1.0 / hits.len() as f64;
            map.push_row(hits.iter().map(|h| (h.view * n + cell_index(h.u, h.v, stage, rows, cols), w)));
        }
        map
    }

    /// `[n, 2]`: fraction of views that see each voxel and its mean depth
    /// over `d_max`.
    pub fn stats(&self, d_max: f64) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * 2);
        for hits in &self.hits {
            let k = hits.len() as f64;
            data.push(k / self.views as f64);
            data.push(hits.iter().map(|h| h.z).sum::<f64>() / k / d_max);
        }
        Tensor::new(vec![self.len(), 2], data).expect("shape")
    }
}

/// Row-major cell of pixel `(u, v)` in a stage-`s` map.
pub fn cell_index(u: f64, v: f64, stage: u8, rows: usize, cols: usize) -> usize {
    let f = f64::from(1u32 << stage);
    let i = ((u / f).floor().max(0.0) as usize).min(cols - 1);
    let j = ((v / f).floor().max(0.0) as usize).min(rows - 1);
    j * cols + i
}

/// Mean 2D feature of every voxel over the views that see it. `levels` are
/// per-view `[rows * cols, C]` feature rows at stage `stage`.
pub fn backproject_features(tape: &mut Tape, plan: &Backprojection, levels: &[Var], stage: u8, rows: usize, cols: usize) -> Result<Var> {
    if levels.len() != plan.views {
        return invalid("backproject_features: one feature map per view required");
    }
    let stacked = tape.concat_rows(levels)?;
    Ok(tape.gather(stacked, Rc::new(plan.average_map(stage, rows, cols)))?)
}

pub fn gru_params(p: &Bindings, prefix: &str) -> GruParams {
    GruParams {
        w_update: p.var(&format!("{prefix}.wz")),
        b_update: p.var(&format!("{prefix}.bz")),
        w_reset: p.var(&format!("{prefix}.wr")),
        b_reset: p.var(&format!("{prefix}.br")),
        w_cand: p.var(&format!("{prefix}.wc")),
        b_cand: p.var(&format!("{prefix}.bc")),
    }
}

/// Geometric step then, when given, a semantic step through the same cell.
pub fn binomial_gru(tape: &mut Tape, hidden: &SparseTensor3D, geo: &SparseTensor3D, sem: Option<&SparseTensor3D>, p: &GruParams) -> Result<SparseTensor3D> {
    let h1 = tape.gru_cell(hidden, geo, p)?;
    match sem {
        Some(s) => Ok(tape.gru_cell(&h1, s, p)?),
        None => Ok(h1),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub occ_w: Var,
    pub occ_b: Var,
    pub tsdf_w: Var,
    pub tsdf_b: Var,
    pub sem_w: Var,
    pub sem_b: Var,
}

impl HeadParams {
    pub fn bind(p: &Bindings, prefix: &str) -> Self {
        HeadParams {
            occ_w: p.var(&format!("{prefix}.occ.w")),
            occ_b: p.var(&format!("{prefix}.occ.b")),
            tsdf_w: p.var(&format!("{prefix}.tsdf.w")),
            tsdf_b: p.var(&format!("{prefix}.tsdf.b")),
            sem_w: p.var(&format!("{prefix}.sem.w")),
            sem_b: p.var(&format!("{prefix}.sem.b")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// Occupancy logits `[n, 1]`.
    pub occ: Var,
    /// TSDF before the tanh bound.
    pub tsdf_pre: Var,
    pub tsdf: Var,
    /// Semantic logits `[n, N_c]`.
    pub sem: Var,
}

pub fn predict_heads(tape: &mut Tape, features: Var, p: &HeadParams) -> Result<Heads> {
    let occ = tape.linear(features, p.occ_w, Some(p.occ_b))?;
    let tsdf_pre = tape.linear(features, p.tsdf_w, Some(p.tsdf_b))?;
    let tsdf = tape.tanh(tsdf_pre);
    let sem = tape.linear(features, p.sem_w, Some(p.sem_b))?;
    Ok(Heads { occ, tsdf_pre, tsdf, sem })
}

/// Rows whose occupancy probability exceeds `theta`.
pub fn occupied_rows(occ_logits: &Tensor, theta: f64) -> Vec<usize> {
    occ_logits
        .data()
        .iter()
        .enumerate()
        .filter(|(_, o)| sigmoid(**o) > theta)
        .map(|(i, _)| i)
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[features | TSDF | occupancy prob | semantic probs]` on the kept rows.
pub fn build_meta_feature(tape: &mut Tape, features: Var, heads: &Heads, rows: &[usize]) -> Result<Var> {
    let occ = tape.sigmoid(heads.occ);
    let sem = tape.softmax_rows(heads.sem);
    let all = tape.concat_cols(&[features, heads.tsdf, occ, sem])?;
    let n = tape.shape(all)[0];
    let map = GatherMap::select(n, rows.iter().map(|r| Some(*r)));
    Ok(tape.gather(all, Rc::new(map))?)
}

pub fn meta_channels(cfg: &PipelineConfig) -> usize {
    cfg.volume_channels + 2 + cfg.num_classes
}

pub fn init_stage_params(store: &mut ParamStore, cfg: &PipelineConfig, stage: u8, rng: &mut impl Rng) {
    let cv = cfg.volume_channels;
    let nc = cfg.num_classes;
    let geo_in = cfg.stage_channels(stage) + 2 + if stage < 4 { meta_channels(cfg) } else { 0 };
    let pre = format!("s{stage}");
    store.init_uniform(&format!("{pre}.geo.w"), &[27, geo_in, cv], 27 * geo_in, 27 * cv, rng);
    store.init_const(&format!("{pre}.geo.b"), &[cv], 0.0);
    store.init_uniform(&format!("{pre}.semin.w"), &[nc, cv], nc, cv, rng);
    store.init_const(&format!("{pre}.semin.b"), &[cv], 0.0);
    for g in ["z", "r", "c"] {
        store.init_uniform(&format!("{pre}.gru.w{g}"), &[27, 2 * cv, cv], 27 * 2 * cv, 27 * cv, rng);
        store.init_const(&format!("{pre}.gru.b{g}"), &[cv], 0.0);
    }
    store.init_uniform(&format!("{pre}.occ.w"), &[cv, 1], cv, 1, rng);
    store.init_const(&format!("{pre}.occ.b"), &[1], 0.0);
    store.init_uniform(&format!("{pre}.tsdf.w"), &[cv, 1], cv, 1, rng);
    store.init_const(&format!("{pre}.tsdf.b"), &[1], 0.0);
    store.init_uniform(&format!("{pre}.sem.w"), &[cv, nc], cv, nc, rng);
    store.init_const(&format!("{pre}.sem.b"), &[nc], 0.0);
}
