//! Coordinate-sparse 3D tensors, submanifold convolution, trilinear sampling
//! and the sparse gated recurrent cell.

use std::cell::OnceCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub type Coord = [i32; 3];

/// The 27 neighbor offsets in kernel order: index `(dx+1)*9 + (dy+1)*3 + (dz+1)`.
pub fn kernel_offsets() -> [Coord; 27] {
    let mut out = [[0; 3]; 27];
    for (k, o) in out.iter_mut().enumerate() {
        *o = [k as i32 / 9 - 1, (k as i32 / 3) % 3 - 1, k as i32 % 3 - 1];
    }
    out
}

/// Ordered set of unique voxel coordinates with a lookup index.
#[derive(Debug, Default)]
pub struct CoordSet {
    coords: Vec<Coord>,
    index: HashMap<Coord, u32>,
    rules: OnceCell<Rc<Rulebook>>,
}

impl Clone for CoordSet {
    fn clone(&self) -> Self {
        Self {
            coords: self.coords.clone(),
            index: self.index.clone(),
            rules: OnceCell::new(),
        }
    }
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl CoordSet {
    /// Builds a set from unique coordinates; duplicates are an error.
    pub fn new(coords: Vec<Coord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if index.insert(*c, i as u32).is_some() {
                return invalid(format!("duplicate coordinate {c:?}"));
            }
        }
        Ok(Self {
            coords,
            index,
            rules: OnceCell::new(),
        })
    }

    /// Builds a set keeping the first occurrence of each coordinate.
    pub fn dedup(coords: impl IntoIterator<Item = Coord>) -> Self {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for c in coords {
            if let std::collections::hash_map::Entry::Vacant(e) = index.entry(c) {
                e.insert(out.len() as u32);
                out.push(c);
            }
        }
        Self {
            coords: out,
            index,
            rules: OnceCell::new(),
        }
    }

    /// Same set sorted lexicographically.
    pub fn sorted(coords: impl IntoIterator<Item = Coord>) -> Self {
        let mut v: Vec<Coord> = coords.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self::new(v).expect("sorted unique")
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).map(|i| *i as usize)
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.index.contains_key(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Coord> {
        self.coords.iter()
    }

    /// Submanifold neighbor table, built once per set.
    pub fn rulebook(&self) -> Rc<Rulebook> {
        self.rules
            .get_or_init(|| Rc::new(Rulebook::submanifold(self)))
            .clone()
    }

    /// Gather map aligning rows stored on `self` to the order of `target`;
    /// coordinates missing from `self` produce zero rows.
    pub fn align_to(&self, target: &CoordSet) -> crate::gather::GatherMap {
        crate::gather::GatherMap::select(self.len(), target.iter().map(|c| self.get(c)))
    }
}

/// Per-offset lists of `(output row, input row)` pairs.
#[derive(Debug)]
pub struct Rulebook {
    pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn submanifold(set: &CoordSet) -> Self {
        let offsets = kernel_offsets();
        let mut pairs = vec![Vec::new(); 27];
        for (o, c) in set.coords.iter().enumerate() {
            for (k, off) in offsets.iter().enumerate() {
                let n = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                if let Some(i) = set.index.get(&n) {
                    pairs[k].push((o as u32, *i));
                }
            }
        }
        Self { pairs }
    }

    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }
}

fn sparse_conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, rules: &Rulebook) -> Tensor {
    let (n, ci) = (x.rows(), x.cols());
    let co = w.shape()[w.rank() - 1];
    let mut out = vec![0.0; n * co];
    if let Some(b) = b {
        for row in out.chunks_mut(co) {
            row.copy_from_slice(b.data());
        }
    }
    let (xd, wd) = (x.data(), w.data());
    for k in 0..27 {
        let wk = &wd[k * ci * co..(k + 1) * ci * co];
        for &(o, i) in rules.pairs(k) {
            let (o, i) = (o as usize, i as usize);
            let xrow = &xd[i * ci..(i + 1) * ci];
            let orow = &mut out[o * co..(o + 1) * co];
            for (c, xv) in xrow.iter().enumerate() {
                if *xv == 0.0 {
                    continue;
                }
                for (ov, wv) in orow.iter_mut().zip(&wk[c * co..(c + 1) * co]) {
                    *ov += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![n, co], out).unwrap()
}

pub(crate) fn sparse_conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    rules: &Rulebook,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (n, ci) = (x.rows(), x.cols());
    let co = g.cols();
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut db = vec![0.0; co];
    for r in 0..n {
        for (d, gv) in db.iter_mut().zip(&gd[r * co..(r + 1) * co]) {
            *d += gv;
        }
    }
    let mut dx = need_x.then(|| vec![0.0; n * ci]);
    let mut dw = need_w.then(|| vec![0.0; wd.len()]);
    for k in 0..27 {
        let off = k * ci * co;
        for &(o, i) in rules.pairs(k) {
            let (o, i) = (o as usize, i as usize);
            let grow = &gd[o * co..(o + 1) * co];
            if let Some(dx) = dx.as_mut() {
                for c in 0..ci {
                    let wrow = &wd[off + c * co..off + (c + 1) * co];
                    dx[i * ci + c] += grow.iter().zip(wrow).map(|(g, w)| g * w).sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                for c in 0..ci {
                    let xv = xd[i * ci + c];
                    if xv == 0.0 {
                        continue;
                    }
                    for (d, gv) in dw[off + c * co..off + (c + 1) * co].iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Corner rows and weights of a trilinear sample at grid-continuous point `p`
/// (voxel `(i,j,k)` has its center at `(i,j,k)`). Absent corners keep their
/// weight but contribute no feature. Each entry also carries the derivative
/// of its weight with respect to `p`.
fn trilinear_corners(coords: &CoordSet, p: &[f64]) -> ([(Option<usize>, f64, [f64; 3]); 8], bool) {
    let mut out = [(None, 0.0, [0.0; 3]); 8];
    if !p.iter().all(|v| v.is_finite()) {
        return (out, false);
    }
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    for (corner, slot) in out.iter_mut().enumerate() {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut axis_w = [0.0; 3];
        let mut axis_d = [0.0; 3];
        for a in 0..3 {
            let (wa, da) = if bits[a] == 1 { (f[a], 1.0) } else { (1.0 - f[a], -1.0) };
            axis_w[a] = wa;
            axis_d[a] = da;
            w *= wa;
        }
        let dw = [
            axis_d[0] * axis_w[1] * axis_w[2],
            axis_w[0] * axis_d[1] * axis_w[2],
            axis_w[0] * axis_w[1] * axis_d[2],
        ];
        let c = [
            base[0] as i32 + bits[0] as i32,
            base[1] as i32 + bits[1] as i32,
            base[2] as i32 + bits[2] as i32,
        ];
        *slot = (coords.get(&c), w, dw);
    }
    (out, true)
}

/// Trilinear interpolation weights for one point; they always sum to one.
pub fn trilinear_weights(coords: &CoordSet, p: [f64; 3]) -> Vec<(Option<usize>, f64)> {
    let (corners, ok) = trilinear_corners(coords, &p);
    if !ok {
        return Vec::new();
    }
    corners.iter().map(|(r, w, _)| (*r, *w)).collect()
}

fn trilinear_forward(vol: &Tensor, pts: &Tensor, coords: &CoordSet) -> Tensor {
    let c = vol.cols();
    let np = pts.rows();
    let mut out = vec![0.0; np * c];
    for p in 0..np {
        let (corners, _) = trilinear_corners(coords, pts.row(p));
        let orow = &mut out[p * c..(p + 1) * c];
        for (row, w, _) in corners.iter() {
            if let Some(r) = row {
                for (o, v) in orow.iter_mut().zip(vol.row(*r)) {
                    *o += w * v;
                }
            }
        }
    }
    Tensor::new(vec![np, c], out).unwrap()
}

pub(crate) fn trilinear_backward(
    vol: &Tensor,
    pts: &Tensor,
    coords: &CoordSet,
    g: &Tensor,
    need_vol: bool,
    need_pts: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = vol.cols();
    let mut dvol = need_vol.then(|| vec![0.0; vol.len()]);
    let mut dpts = need_pts.then(|| vec![0.0; pts.len()]);
    for p in 0..pts.rows() {
        let (corners, _) = trilinear_corners(coords, pts.row(p));
        let grow = g.row(p);
        for (row, w, dw) in corners.iter() {
            let Some(r) = row else { continue };
            if let Some(dv) = dvol.as_mut() {
                for (d, gv) in dv[r * c..(r + 1) * c].iter_mut().zip(grow) {
                    *d += w * gv;
                }
            }
            if let Some(dp) = dpts.as_mut() {
                let dot: f64 = vol.row(*r).iter().zip(grow).map(|(v, g)| v * g).sum();
                for a in 0..3 {
                    dp[p * 3 + a] += dw[a] * dot;
                }
            }
        }
    }
    (dvol, dpts)
}

/// Values living on a coordinate set at one pyramid stage.
#[derive(Clone, Debug)]
pub struct SparseTensor3D {
    pub coords: Rc<CoordSet>,
    pub values: Var,
    pub stage: u8,
}

impl SparseTensor3D {
    pub fn new(tape: &Tape, coords: Rc<CoordSet>, values: Var, stage: u8) -> Result<Self> {
        if !(2..=4).contains(&stage) {
            return invalid(format!("stage {stage} outside 2..=4"));
        }
        let v = tape.value(values);
        if v.rank() != 2 || v.rows() != coords.len() {
            return invalid(format!(
                "sparse values {:?} do not match {} coordinates",
                v.shape(),
                coords.len()
            ));
        }
        Ok(Self { coords, values, stage })
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.value(self.values).cols()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Same coordinates, new values.
    pub fn with_values(&self, values: Var) -> Self {
        Self {
            coords: self.coords.clone(),
            values,
            stage: self.stage,
        }
    }

    fn same_coords(&self, other: &SparseTensor3D) -> bool {
        Rc::ptr_eq(&self.coords, &other.coords) || *self.coords == *other.coords
    }
}

/// Parameters of the sparse gated recurrent cell. Each kernel is
/// `[3,3,3, C_hidden + C_input, C_hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub b_reset: Var,
    pub w_cand: Var,
    pub b_cand: Var,
}

impl Tape {
    /// Submanifold sparse convolution: output coordinates equal input
    /// coordinates and only neighbors present in the set contribute.
    /// `w` is `[3,3,3,Cin,Cout]` (or `[27,Cin,Cout]`).
    pub fn sparse_conv3d(&mut self, x: &SparseTensor3D, w: Var, b: Option<Var>) -> Result<SparseTensor3D> {
        if x.is_empty() {
            return invalid("sparse_conv3d: empty coordinate set");
        }
        let (xv, wv) = (self.value(x.values), self.value(w));
        let ws = wv.shape();
        let (taps, ci, co) = match ws.len() {
            5 => (ws[0] * ws[1] * ws[2], ws[3], ws[4]),
            3 => (ws[0], ws[1], ws[2]),
            _ => return invalid(format!("sparse_conv3d: kernel shape {ws:?}")),
        };
        if taps != 27 {
            return invalid(format!("sparse_conv3d: kernel must be 3x3x3, got {ws:?}"));
        }
        if ci != xv.cols() {
            return invalid(format!(
                "sparse_conv3d: kernel expects {ci} channels, input has {}",
                xv.cols()
            ));
        }
        let bv = match b {
            Some(b) if self.value(b).len() != co => {
                return invalid("sparse_conv3d: bias length differs from output channels")
            }
            Some(b) => Some(self.value(b)),
            None => None,
        };
        let rules = x.coords.rulebook();
        let out = sparse_conv_forward(xv, wv, bv, &rules);
        let mut inputs = vec![x.values, w];
        inputs.extend(b);
        let values = self.push(out, Op::SparseConv { x: x.values, w, b, rules }, &inputs);
        Ok(x.with_values(values))
    }

    /// Samples `volume` at `points: [P, 3]` given in grid-continuous voxel
    /// coordinates. Differentiable with respect to both the features and the
    /// point positions.
    pub fn trilinear_sample(&mut self, volume: &SparseTensor3D, points: Var) -> Result<Var> {
        let pv = self.value(points);
        if pv.rank() != 2 || pv.cols() != 3 {
            return invalid(format!("trilinear_sample: points must be [P,3], got {:?}", pv.shape()));
        }
        let out = trilinear_forward(self.value(volume.values), pv, &volume.coords);
        Ok(self.push(
            out,
            Op::Trilinear {
                vol: volume.values,
                pts: points,
                coords: volume.coords.clone(),
            },
            &[volume.values, points],
        ))
    }

    /// Gated recurrent update `h' = (1 - z) * h + z * tanh(cand)` with gates
    /// computed by sparse convolutions over `[h, x]`.
    pub fn gru_cell(&mut self, hidden: &SparseTensor3D, input: &SparseTensor3D, p: &GruParams) -> Result<SparseTensor3D> {
        if !hidden.same_coords(input) {
            return invalid("gru_cell: hidden and input coordinates differ");
        }
        let hx_vals = self.concat_cols(&[hidden.values, input.values])?;
        let hx = hidden.with_values(hx_vals);
        let z_lin = self.sparse_conv3d(&hx, p.w_update, Some(p.b_update))?;
        let z = self.sigmoid(z_lin.values);
        let r_lin = self.sparse_conv3d(&hx, p.w_reset, Some(p.b_reset))?;
        let r = self.sigmoid(r_lin.values);
        if self.shape(r) != self.shape(hidden.values) {
            return invalid("gru_cell: gate width differs from hidden width");
        }
        let rh = self.mul(r, hidden.values)?;
        let rhx_vals = self.concat_cols(&[rh, input.values])?;
        let cand_lin = self.sparse_conv3d(&hidden.with_values(rhx_vals), p.w_cand, Some(p.b_cand))?;
        let cand = self.tanh(cand_lin.values);
        let keep = self.one_minus(z);
        let old = self.mul(keep, hidden.values)?;
        let new = self.mul(z, cand)?;
        let h = self.add(old, new)?;
        Ok(hidden.with_values(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_block(n: i32) -> Rc<CoordSet> {
        let mut v = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    v.push([x, y, z]);
                }
            }
        }
        Rc::new(CoordSet::new(v).unwrap())
    }

    #[test]
    fn duplicate_coords_rejected() {
        assert!(CoordSet::new(vec![[0, 0, 0], [0, 0, 0]]).is_err());
        assert_eq!(CoordSet::dedup([[1, 0, 0], [1, 0, 0], [2, 0, 0]]).len(), 2);
    }

    #[test]
    fn center_tap_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords = dense_block(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[27, 4], |_| rng.gen_range(-1.0..1.0)));
        let st = SparseTensor3D::new(&tape, coords, x, 2).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 3, 4, 4]);
        for c in 0..4 {
            w.data_mut()[13 * 16 + c * 4 + c] = 1.0;
        }
        let w = tape.constant(w);
        let y = tape.sparse_conv3d(&st, w, None).unwrap();
        assert_eq!(tape.value(y.values), tape.value(x));
    }

    #[test]
    fn isolated_voxel_sees_only_center_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords = Rc::new(CoordSet::new(vec![[0, 0, 0], [5, 5, 5]]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0)));
        let wt = Tensor::from_fn(&[27, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let w = tape.constant(wt.clone());
        let st = SparseTensor3D::new(&tape, coords, x, 3).unwrap();
        let y = tape.sparse_conv3d(&st, w, None).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let expect: f64 = (0..2)
                    .map(|c| tape.value(x).row(r)[c] * wt.data()[13 * 6 + c * 3 + o])
                    .sum();
                assert!((tape.value(y.values).row(r)[o] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn channel_mismatch_and_empty_input_rejected() {
        let mut tape = Tape::new();
        let coords = dense_block(2);
        let x = tape.constant(Tensor::zeros(&[8, 2]));
        let st = SparseTensor3D::new(&tape, coords, x, 2).unwrap();
        let w = tape.constant(Tensor::zeros(&[3, 3, 3, 3, 1]));
        assert!(tape.sparse_conv3d(&st, w, None).is_err());
        let empty = Rc::new(CoordSet::default());
        let e = tape.constant(Tensor::zeros(&[0, 3]));
        let est = SparseTensor3D::new(&tape, empty, e, 2).unwrap();
        assert!(tape.sparse_conv3d(&est, w, None).is_err());
        assert!(SparseTensor3D::new(&tape, dense_block(1), e, 2).is_err());
        assert!(SparseTensor3D::new(&tape, Rc::new(CoordSet::default()), e, 5).is_err());
    }

    #[test]
    fn trilinear_on_center_and_edge_midpoint() {
        let coords = Rc::new(CoordSet::new(vec![[0, 0, 0], [1, 0, 0]]).unwrap());
        let mut tape = Tape::new();
        let vol = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 5.0, -4.0]).unwrap());
        let st = SparseTensor3D::new(&tape, coords.clone(), vol, 2).unwrap();
        let pts = tape.constant(Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 40.0, 0.0, 0.0]).unwrap());
        let y = tape.trilinear_sample(&st, pts).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 2.0]);
        assert_eq!(tape.value(y).row(1), &[3.0, -1.0]);
        assert_eq!(tape.value(y).row(2), &[0.0, 0.0]);
        let w: f64 = trilinear_weights(&coords, [0.3, 0.7, -0.2]).iter().map(|(_, w)| w).sum();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gru_zero_state_stays_zero() {
        let mut tape = Tape::new();
        let coords = dense_block(2);
        let h = tape.constant(Tensor::zeros(&[8, 3]));
        let x = tape.constant(Tensor::zeros(&[8, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut k = || tape_kernel(&mut rng);
        let (wz, wr, wc) = (k(), k(), k());
        let p = GruParams {
            w_update: tape.constant(wz),
            b_update: tape.constant(Tensor::zeros(&[3])),
            w_reset: tape.constant(wr),
            b_reset: tape.constant(Tensor::zeros(&[3])),
            w_cand: tape.constant(wc),
            b_cand: tape.constant(Tensor::zeros(&[3])),
        };
        let hs = SparseTensor3D::new(&tape, coords.clone(), h, 2).unwrap();
        let xs = SparseTensor3D::new(&tape, coords, x, 2).unwrap();
        let out = tape.gru_cell(&hs, &xs, &p).unwrap();
        assert!(tape.value(out.values).data().iter().all(|v| *v == 0.0));
    }

    fn tape_kernel(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[3, 3, 3, 5, 3], |_| rng.gen_range(-0.5..0.5))
    }
}
