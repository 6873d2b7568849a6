//! Dense 2D ops: pointwise linear maps, convolution and average pooling.
//!
//! Feature maps are laid out `[C, H, W]`; row-feature matrices `[N, C]`.

use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = conv_out_size(h, k, stride, pad).unwrap();
    let wo = conv_out_size(wd, k, stride, pad).unwrap();
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let bias = b.map_or(0.0, |b| b.data()[o]);
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias);
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[(c * h + iy as usize) * wd..(c * h + iy as usize + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out).unwrap()
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let mut dx = need_x.then(|| vec![0.0; xd.len()]);
    let mut dw = need_w.then(|| vec![0.0; wdat.len()]);
    let mut db = vec![0.0; co];
    for o in 0..co {
        let gplane = &gd[o * ho * wo..(o + 1) * ho * wo];
        db[o] = gplane.iter().sum();
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * ci + c) * k + ky) * k + kx;
                    let wv = wdat[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * wd;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gv = gplane[oy * wo + ox];
                            let xi = base + ix as usize;
                            acc += gv * xd[xi];
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += gv * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (n, ci) = (x.rows(), x.cols());
    let co = w.shape()[1];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut db = vec![0.0; co];
    for r in 0..n {
        for (o, d) in db.iter_mut().enumerate() {
            *d += gd[r * co + o];
        }
    }
    let dx = need_x.then(|| {
        let mut dx = vec![0.0; n * ci];
        for r in 0..n {
            let grow = &gd[r * co..(r + 1) * co];
            for c in 0..ci {
                let wrow = &wd[c * co..(c + 1) * co];
                dx[r * ci + c] = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
            }
        }
        dx
    });
    let dw = need_w.then(|| {
        let mut dw = vec![0.0; ci * co];
        for r in 0..n {
            let grow = &gd[r * co..(r + 1) * co];
            for c in 0..ci {
                let xv = xd[r * ci + c];
                if xv == 0.0 {
                    continue;
                }
                let drow = &mut dw[c * co..(c + 1) * co];
                for (d, g) in drow.iter_mut().zip(grow) {
                    *d += xv * g;
                }
            }
        }
        dw
    });
    (dx, dw, db)
}

pub(crate) fn avg_pool2d_backward(xshape: &[usize], g: &Tensor, k: usize) -> Vec<f64> {
    let (c, h, w) = (xshape[0], xshape[1], xshape[2]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g.data()[(ch * ho + oy) * wo + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        d[(ch * h + oy * k + dy) * w + ox * k + dx] += gv;
                    }
                }
            }
        }
    }
    d
}

impl Tape {
    /// Row-wise affine map `x W + b` for `x: [N, Cin]`, `W: [Cin, Cout]`,
    /// `b: [Cout]`. This is the pointwise convolution on sparse or flattened
    /// features.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.cols() != wv.shape()[0] {
            return invalid(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let (n, ci, co) = (xv.rows(), xv.cols(), wv.shape()[1]);
        if let Some(b) = b {
            if self.value(b).len() != co {
                return invalid(format!("linear: bias length {} != {co}", self.value(b).len()));
            }
        }
        let mut out = vec![0.0; n * co];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..n {
            let orow = &mut out[r * co..(r + 1) * co];
            if let Some(b) = b {
                orow.copy_from_slice(self.nodes[b.0].value.data());
            }
            for c in 0..ci {
                let a = xd[r * ci + c];
                if a == 0.0 {
                    continue;
                }
                for (o, w) in orow.iter_mut().zip(&wd[c * co..(c + 1) * co]) {
                    *o += a * w;
                }
            }
        }
        let out = Tensor::new(vec![n, co], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// 2D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 4 {
            return invalid(format!(
                "conv2d: expected [C,H,W] input and [O,C,k,k] kernel, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let k = wv.shape()[2];
        if k != wv.shape()[3] || k % 2 == 0 {
            return invalid(format!("conv2d: kernel must be square and odd, got {:?}", wv.shape()));
        }
        if wv.shape()[1] != xv.shape()[0] {
            return invalid(format!(
                "conv2d: kernel expects {} input channels, input has {}",
                wv.shape()[1],
                xv.shape()[0]
            ));
        }
        if stride == 0
            || conv_out_size(xv.shape()[1], k, stride, pad).is_none()
            || conv_out_size(xv.shape()[2], k, stride, pad).is_none()
        {
            return invalid("conv2d: input smaller than kernel");
        }
        let bv = match b {
            Some(b) => {
                let t = self.value(b);
                if t.len() != wv.shape()[0] {
                    return invalid("conv2d: bias length differs from output channels");
                }
                Some(t)
            }
            None => None,
        };
        let out = conv2d_forward(xv, wv, bv, stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Non-overlapping `k x k` average pooling of a `[C, H, W]` map.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || k == 0 || xv.shape()[1] % k != 0 || xv.shape()[2] % k != 0 {
            return invalid(format!("avg_pool2d: {:?} not divisible by {k}", xv.shape()));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += xv.data()[(ch * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool2d(x, k), &[x]))
    }

    /// `[C, H, W]` feature map to per-pixel rows `[H*W, C]`.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return invalid(format!("chw_to_rows: expected rank 3, got {s:?}"));
        }
        let flat = self.reshape(x, &[s[0], s[1] * s[2]])?;
        self.transpose(flat)
    }

    /// Per-pixel rows `[H*W, C]` back to a `[C, H, W]` feature map.
    pub fn rows_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.transpose(x)?;
        let c = self.shape(t)[0];
        self.reshape(t, &[c, h, w])
    }
}
