//! Plane-sweep stereo on P2 features and PointFlow depth refinement.

use std::rc::Rc;

use cdr_tensor::{Bindings, CustomOp, GatherMap, ParamStore, SparseTensor3D, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::camera::{homography_transfer, Intrinsics, Pose, Vec3};
use crate::config::PipelineConfig;
use crate::error::{invalid, Result};
use crate::volume::GridSpec;

/// `n` depths from `d_min` to `d_max`, uniform in inverse depth.
pub fn plane_depths(d_min: f64, d_max: f64, n: usize) -> Vec<f64> {
    let (a, b) = (1.0 / d_min, 1.0 / d_max);
    (0..n)
        .map(|k| {
            if k == 0 {
                d_min
            } else if k == n - 1 {
                d_max
            } else {
                1.0 / (a + (b - a) * k as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeom {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// Center of cell `(i, j)` of a stage-`s` map in full-resolution pixels.
pub fn cell_center(i: usize, j: usize, stage: u8) -> (f64, f64) {
    let f = f64::from(1u32 << stage);
    ((i as f64 + 0.5) * f, (j as f64 + 0.5) * f)
}

/// Bilinear taps into a `rows x cols` map at continuous cell coordinates,
/// corners clamped to the border.
pub fn bilinear_taps(x: f64, y: f64, rows: usize, cols: usize) -> [(usize, f64); 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let cx = |v: f64| (v.max(0.0) as usize).min(cols - 1);
    let cy = |v: f64| (v.max(0.0) as usize).min(rows - 1);
    let (xa, xb, ya, yb) = (cx(x0), cx(x0 + 1.0), cy(y0), cy(y0 + 1.0));
    [
        (ya * cols + xa, (1.0 - fx) * (1.0 - fy)),
        (ya * cols + xb, fx * (1.0 - fy)),
        (yb * cols + xa, (1.0 - fx) * fy),
        (yb * cols + xb, fx * fy),
    ]
}

/// Gather map warping the stage-2 feature rows of view `src` onto the
/// reference grid for every plane, plus per-row validity. Rows are
/// `plane * (rows * cols) + pixel`.
pub fn warp_map(reference: &ViewGeom, src: &ViewGeom, depths: &[f64], rows: usize, cols: usize) -> (GatherMap, Vec<bool>) {
    let n = rows * cols;
    let mut map = GatherMap::new(n);
    let mut valid = Vec::with_capacity(depths.len() * n);
    for &d in depths {
        for j in 0..rows {
            for i in 0..cols {
                let (u, v) = cell_center(i, j, 2);
                let t = homography_transfer(u, v, d, &reference.intrinsics, &reference.pose, &src.intrinsics, &src.pose);
                if t.valid {
                    map.push_row(bilinear_taps(t.u / 4.0 - 0.5, t.v / 4.0 - 0.5, rows, cols));
                } else {
                    map.push_row([]);
                }
                valid.push(t.valid);
            }
        }
    }
    (map, valid)
}

/// Warps `[rows*cols, C]` feature rows with a map from [`warp_map`].
pub fn warp_features(tape: &mut Tape, rows: Var, map: Rc<GatherMap>) -> Result<Var> {
    Ok(tape.gather(rows, map)?)
}

/// Per-row population variance across the valid views, averaged over
/// channels. Rows with fewer than two valid views take the largest valid
/// cost of the volume, and pass their gradient to that cell.
pub struct VarianceCost {
    pub valid: Vec<Vec<bool>>,
}

impl VarianceCost {
    fn stats(&self, inputs: &[&Tensor]) -> (Vec<f64>, Vec<bool>, Option<usize>) {
        let m = inputs[0].rows();
        let c = inputs[0].cols();
        let mut out = vec![0.0; m];
        let mut ok = vec![false; m];
        let mut mu = vec![0.0; c];
        for r in 0..m {
            let views: Vec<usize> = (0..inputs.len()).filter(|v| self.valid[*v][r]).collect();
            if views.len() < 2 {
                continue;
            }
            let n = views.len() as f64;
            mu.iter_mut().for_each(|x| *x = 0.0);
            for &v in &views {
                for (a, x) in mu.iter_mut().zip(inputs[v].row(r)) {
                    *a += x / n;
                }
            }
            let mut s = 0.0;
            for &v in &views {
                for (a, x) in mu.iter().zip(inputs[v].row(r)) {
                    s += (x - a) * (x - a);
                }
            }
            out[r] = s / (n * c as f64);
            ok[r] = true;
        }
        let mut arg: Option<usize> = None;
        for r in 0..m {
            if ok[r] && arg.is_none_or(|a| out[r] > out[a]) {
                arg = Some(r);
            }
        }
        (out, ok, arg)
    }
}

impl CustomOp for VarianceCost {
    fn name(&self) -> &str {
        "variance_cost"
    }

    fn forward(&self, inputs: &[&Tensor]) -> cdr_tensor::Result<Tensor> {
        if inputs.len() != self.valid.len() || inputs.is_empty() {
            return Err(TensorError::InvalidArgument("variance_cost: view count mismatch".into()));
        }
        let shape = inputs[0].shape();
        if shape.len() != 2
            || inputs.iter().any(|t| t.shape() != shape)
            || self.valid.iter().any(|v| v.len() != shape[0])
        {
            return Err(TensorError::InvalidArgument("variance_cost: shape mismatch".into()));
        }
        let (mut out, ok, arg) = self.stats(inputs);
        let fill = arg.map_or(0.0, |a| out[a]);
        for (o, k) in out.iter_mut().zip(&ok) {
            if !k {
                *o = fill;
            }
        }
        Tensor::new(vec![shape[0], 1], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (_, ok, arg) = self.stats(inputs);
        let m = inputs[0].rows();
        let c = inputs[0].cols();
        let mut g: Vec<f64> = grad.data().to_vec();
        if let Some(a) = arg {
            let extra: f64 = (0..m).filter(|r| !ok[*r]).map(|r| grad.data()[r]).sum();
            g[a] += extra;
        }
        let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut mu = vec![0.0; c];
        for r in 0..m {
            if !ok[r] || g[r] == 0.0 {
                continue;
            }
            let views: Vec<usize> = (0..inputs.len()).filter(|v| self.valid[*v][r]).collect();
            let n = views.len() as f64;
            mu.iter_mut().for_each(|x| *x = 0.0);
            for &v in &views {
                for (a, x) in mu.iter_mut().zip(inputs[v].row(r)) {
                    *a += x / n;
                }
            }
            let k = 2.0 * g[r] / (n * c as f64);
            for &v in &views {
                let row = inputs[v].row(r);
                for ch in 0..c {
                    grads[v][r * c + ch] = k * (row[ch] - mu[ch]);
                }
            }
        }
        grads
            .into_iter()
            .zip(inputs)
            .map(|(d, t)| Some(Tensor::new(t.shape().to_vec(), d).unwrap()))
            .collect()
    }

    fn branches(&self, inputs: &[&Tensor]) -> Vec<i64> {
        let (_, _, arg) = self.stats(inputs);
        vec![arg.map_or(-1, |a| a as i64)]
    }
}

pub fn variance_cost(tape: &mut Tape, warped: &[Var], valid: Vec<Vec<bool>>) -> Result<Var> {
    Ok(tape.custom(warped, Rc::new(VarianceCost { valid }))?)
}

pub fn init_params(store: &mut ParamStore, cfg: &PipelineConfig, rng: &mut impl Rng) {
    let (d, cr) = (cfg.depth_planes, cfg.reg_channels);
    store.init_uniform("mvs.reg0.w", &[cr, d, 3, 3], d * 9, cr * 9, rng);
    store.init_const("mvs.reg0.b", &[cr], 0.0);
    store.init_uniform("mvs.reg1.w", &[cr, cr, 3, 3], cr * 9, cr * 9, rng);
    store.init_const("mvs.reg1.b", &[cr], 0.0);
    store.init_uniform("mvs.reg2.w", &[d, cr, 1, 1], cr, d, rng);
    store.init_const("mvs.reg2.b", &[d], 0.0);
    store.init_const("mvs.skip", &[1, 1], 10.0);
    let scorers: Vec<String> = if cfg.share_pointflow {
        vec!["pf".into()]
    } else {
        [2, 3, 4].iter().map(|s| format!("pf{s}")).collect()
    };
    for name in scorers {
        store.init_const(&format!("{name}.w"), &[cfg.volume_channels, 1], 0.0);
        store.init_const(&format!("{name}.b"), &[1], 0.0);
    }
}

pub fn pointflow_prefix(cfg: &PipelineConfig, stage: u8) -> String {
    if cfg.share_pointflow {
        "pf".into()
    } else {
        format!("pf{stage}")
    }
}

/// Depth rows `[n, 1]` from per-row plane logits `[n, D]`.
pub fn soft_argmin(tape: &mut Tape, logits: Var, depths: &[f64]) -> Result<Var> {
    let probs = tape.softmax_rows(logits);
    let planes = tape.constant(Tensor::new(vec![depths.len(), 1], depths.to_vec())?);
    Ok(tape.linear(probs, planes, None)?)
}

/// Cost rows `[D * h4 * w4, 1]` (plane-major) to stage-4 depth rows.
pub fn regularize_and_softargmin(tape: &mut Tape, p: &Bindings, cost: Var, depths: &[f64], h4: usize, w4: usize) -> Result<Var> {
    let d = depths.len();
    if h4 % 4 != 0 || w4 % 4 != 0 {
        return invalid("regularizer needs stage-2 maps divisible by 4");
    }
    let vol = tape.reshape(cost, &[d, h4, w4])?;
    let x = tape.conv2d(vol, p.var("mvs.reg0.w"), Some(p.var("mvs.reg0.b")), 2, 1)?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, p.var("mvs.reg1.w"), Some(p.var("mvs.reg1.b")), 2, 1)?;
    let x = tape.relu(x);
    let logits = tape.conv2d(x, p.var("mvs.reg2.w"), Some(p.var("mvs.reg2.b")), 1, 0)?;
    let pooled = tape.avg_pool2d(vol, 4)?;
    let (h16, w16) = (h4 / 4, w4 / 4);
    let flat = tape.reshape(pooled, &[d * h16 * w16, 1])?;
    let skip = tape.linear(flat, p.var("mvs.skip"), None)?;
    let skip = tape.scale(skip, -1.0);
    let skip = tape.reshape(skip, &[d, h16, w16])?;
    let logits = tape.add(logits, skip)?;
    let rows = tape.chw_to_rows(logits)?;
    soft_argmin(tape, rows, depths)
}

/// Hypothesis offsets in units of `delta`, nearest plane first.
pub const POINTFLOW_STEPS: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

/// Ray geometry of a stage-`s` depth map in grid coordinates: the point of
/// cell `i` at depth `z` is `a[i] + z * b[i]`.
pub fn ray_grid_geometry(view: &ViewGeom, stage: u8, rows: usize, cols: usize, grid: &GridSpec) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let k = &view.intrinsics;
    let rt = view.pose.rotation.transpose();
    let c = grid.to_grid(&view.pose.center());
    let mut a = Vec::with_capacity(rows * cols);
    let mut b = Vec::with_capacity(rows * cols);
    for j in 0..rows {
        for i in 0..cols {
            let (u, v) = cell_center(i, j, stage);
            let r: Vec3 = rt * Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0) / grid.voxel_size;
            a.push(c);
            b.push([r.x, r.y, r.z]);
        }
    }
    (a, b)
}

/// Refines depth rows `[n, 1]` by scoring seven hypotheses along each
/// viewing ray with trilinear samples of `volume`.
#[allow(clippy::too_many_arguments)]
pub fn pointflow_refine(
    tape: &mut Tape,
    p: &Bindings,
    prefix: &str,
    depth: Var,
    rays: &(Vec<[f64; 3]>, Vec<[f64; 3]>),
    volume: &SparseTensor3D,
    delta: f64,
    d_range: (f64, f64),
) -> Result<Var> {
    if !(delta > 0.0) {
        return invalid("pointflow: delta must be positive");
    }
    let n = tape.shape(depth)[0];
    if rays.0.len() != n {
        return invalid("pointflow: ray count differs from depth rows");
    }
    let k = POINTFLOW_STEPS.len();
    let shifted: Vec<Var> = POINTFLOW_STEPS.iter().map(|s| tape.affine(depth, 1.0, s * delta)).collect();
    let z = tape.concat_rows(&shifted)?;
    let a: Vec<f64> = (0..k).flat_map(|_| rays.0.iter().flatten().copied()).collect();
    let b: Vec<f64> = (0..k).flat_map(|_| rays.1.iter().flatten().copied()).collect();
    let a = tape.constant(Tensor::new(vec![k * n, 3], a)?);
    let b = tape.constant(Tensor::new(vec![k * n, 3], b)?);
    let bz = tape.mul_rows(b, z)?;
    let pts = tape.add(a, bz)?;
    let feats = tape.trilinear_sample(volume, pts)?;
    let scores = tape.linear(feats, p.var(&format!("{prefix}.w")), Some(p.var(&format!("{prefix}.b"))))?;
    let scores = tape.reshape(scores, &[k, n])?;
    let scores = tape.transpose(scores)?;
    let w = tape.softmax_rows(scores);
    let offsets = tape.constant(Tensor::new(vec![k, 1], POINTFLOW_STEPS.iter().map(|s| s * delta).collect())?);
    let disp = tape.linear(w, offsets, None)?;
    let refined = tape.add(depth, disp)?;
    Ok(tape.clamp(refined, d_range.0, d_range.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_are_uniform_in_inverse_depth() {
        let d = plane_depths(0.5, 4.0, 8);
        assert_eq!(d.len(), 8);
        assert_eq!((d[0], d[7]), (0.5, 4.0));
        let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
        for w in inv.windows(3) {
            assert!(((w[0] - w[1]) - (w[1] - w[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_soft_argmin() {
        let mut tape = Tape::new();
        let depths = [1.0, 2.0, 3.0, 4.0];
        let l = tape.constant(Tensor::new(vec![1, 4], vec![-1e9, -1e9, 0.0, -1e9]).unwrap());
        let d = soft_argmin(&mut tape, l, &depths).unwrap();
        assert_eq!(tape.value(d).item(), 3.0);
    }

    #[test]
    fn uniform_soft_argmin() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 3]));
        let d = soft_argmin(&mut tape, l, &[1.0, 2.0, 3.0]).unwrap();
        assert!((tape.value(d).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn two_point_variance() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![0.7, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![-0.7, 2.0]).unwrap());
        let c = variance_cost(&mut tape, &[a, b], vec![vec![true; 2]; 2]).unwrap();
        let v = tape.value(c).data();
        assert!((v[0] - 0.49).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn invalid_cells_take_max_cost() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::new(vec![3, 1], vec![1.0, 0.0, 5.0]).unwrap());
        let b = tape.var(Tensor::new(vec![3, 1], vec![-1.0, 0.5, 0.0]).unwrap());
        let c = variance_cost(&mut tape, &[a, b], vec![vec![true; 3], vec![true, true, false]]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 0.0625, 1.0]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // row 0 receives its own gradient plus the invalid row's
        assert_eq!(g.get(a).unwrap().data(), &[2.0, -0.25, 0.0]);
    }

    #[test]
    fn bilinear_taps_sum_to_one_and_clamp() {
        for (x, y) in [(-0.5, -0.5), (1.25, 0.75), (3.4, 2.9)] {
            let taps = bilinear_taps(x, y, 3, 4);
            assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(taps.iter().all(|t| t.0 < 12));
        }
    }
}
