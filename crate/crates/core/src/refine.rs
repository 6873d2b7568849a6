//! Depth-anchored occupancy refinement and pixel-to-vertex semantic
//! refinement.

use std::collections::BTreeSet;
use std::io::Write;
use std::rc::Rc;

use cdr_tensor::{Coord, CoordSet, GatherMap, Tape, Tensor, Var};

use crate::camera::{backproject_unchecked, in_frustum, project, Frustum, Vec3};
use crate::error::{invalid, Result};
use crate::fusion::{cell_index, sigmoid};
use crate::mvs::cell_center;
use crate::volume::{dilate, GridSpec};

/// World points of every positive depth cell of a stage-`s` depth map.
pub fn depth_points(depth: &[f64], frustum: &Frustum, stage: u8, cols: usize) -> Vec<Vec3> {
    depth
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0 && d.is_finite())
        .map(|(idx, d)| {
            let (u, v) = cell_center(idx % cols, idx / cols, stage);
            backproject_unchecked(u, v, *d, &frustum.intrinsics, &frustum.pose)
        })
        .collect()
}

/// Voxels containing any of `points`, dilated by `radius`.
pub fn anchored_voxels(points: &[Vec3], grid: &GridSpec, radius: i32) -> BTreeSet<Coord> {
    dilate(points.iter().map(|p| grid.voxel_of(p)), radius)
}

/// Support of the refined occupancy: rows whose probability exceeds `theta`
/// and whose voxel is anchored.
pub fn refine_occupancy(coords: &CoordSet, occ_logits: &[f64], anchors: &BTreeSet<Coord>, theta: f64) -> Vec<bool> {
    coords
        .iter()
        .zip(occ_logits)
        .map(|(c, o)| sigmoid(*o) > theta && anchors.contains(c))
        .collect()
}

/// `[n, 1]` 0/1 column.
pub fn indicator(keep: &[bool]) -> Tensor {
    Tensor::new(vec![keep.len(), 1], keep.iter().map(|k| f64::from(u8::from(*k))).collect()).expect("shape")
}

/// TSDF masked by `mask` (`[n, 1]`) through a bias-free pointwise layer.
pub fn condition_tsdf(tape: &mut Tape, tsdf: Var, mask: Var, w: Var) -> Result<Var> {
    let t = tape.mul(tsdf, mask)?;
    Ok(tape.linear(t, w, None)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchColumn {
    pub u: usize,
    pub v: usize,
    pub mask: bool,
}

/// Per-view voxel-to-pixel table at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingMatrix {
    pub stage: u8,
    pub rows: usize,
    pub cols: usize,
    pub columns: Vec<MatchColumn>,
}

/// Projects every voxel center into the view. A column is valid when the
/// center is inside the frustum and the view's depth at that cell,
/// back-projected through the cell center, lands within `tau` of the voxel
/// center; otherwise it is `(0, 0, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn build_matching_matrix(
    frustum: &Frustum,
    coords: &CoordSet,
    grid: &GridSpec,
    depth: &[f64],
    stage: u8,
    rows: usize,
    cols: usize,
    tau: f64,
) -> Result<MatchingMatrix> {
    if depth.len() != rows * cols {
        return invalid("build_matching_matrix: depth map size mismatch");
    }
    let zero = MatchColumn { u: 0, v: 0, mask: false };
    let columns = coords
        .iter()
        .map(|c| {
            let p = grid.center(c);
            if !in_frustum(&p, frustum) {
                return zero;
            }
            let q = project(&p, &frustum.intrinsics, &frustum.pose);
            let idx = cell_index(q.u, q.v, stage, rows, cols);
            let d = depth[idx];
            if !(d > 0.0) {
                return zero;
            }
            let (i, j) = (idx % cols, idx / cols);
            let (cu, cv) = cell_center(i, j, stage);
            let back = backproject_unchecked(cu, cv, d, &frustum.intrinsics, &frustum.pose);
            if (back - p).norm() <= tau {
                MatchColumn { u: i, v: j, mask: true }
            } else {
                zero
            }
        })
        .collect();
    Ok(MatchingMatrix { stage, rows, cols, columns })
}

impl MatchingMatrix {
    pub fn valid(&self) -> usize {
        self.columns.iter().filter(|c| c.mask).count()
    }
}

/// Writes `view idx u v mask` rows.
pub fn dump_matching(w: &mut impl Write, matrices: &[MatchingMatrix]) -> std::io::Result<()> {
    for (view, m) in matrices.iter().enumerate() {
        for (idx, c) in m.columns.iter().enumerate() {
            writeln!(w, "{view} {idx} {} {} {}", c.u, c.v, u8::from(c.mask))?;
        }
    }
    Ok(())
}

/// Mean over the valid views of each voxel, gathering from per-view row
/// blocks stacked view after view. Voxels without a valid view get zeros.
pub fn matching_average_map(matrices: &[MatchingMatrix]) -> GatherMap {
    let n = matrices.first().map_or(0, |m| m.rows * m.cols);
    let voxels = matrices.first().map_or(0, |m| m.columns.len());
    let mut map = GatherMap::new(matrices.len() * n);
    for idx in 0..voxels {
        let taps: Vec<usize> = matrices
            .iter()
            .enumerate()
            .filter(|(_, m)| m.columns[idx].mask)
            .map(|(view, m)| view * n + m.columns[idx].v * m.cols + m.columns[idx].u)
            .collect();
        let w = 1.0 / taps.len().max(1) as f64;
        map.push_row(taps.into_iter().map(|t| (t, w)));
    }
    map
}

/// Matched 2D features through a bias-free pointwise layer and a relu.
pub fn semantic_refine(tape: &mut Tape, levels: &[Var], matrices: &[MatchingMatrix], w: Var) -> Result<Var> {
    if levels.len() != matrices.len() {
        return invalid("semantic_refine: one matching matrix per view required");
    }
    let stacked = tape.concat_rows(levels)?;
    let avg = tape.gather(stacked, Rc::new(matching_average_map(matrices)))?;
    let r = tape.linear(avg, w, None)?;
    Ok(tape.relu(r))
}
