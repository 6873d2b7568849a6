//! Elementwise, reduction and shape ops.

use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign-preserving base-2 log transform, `sgn(t) * log2(1 + |t|)`; maps ±1 to ±1.
pub fn log_transform(t: f64) -> f64 {
    t.signum() * (1.0 + t.abs()).log2()
}

impl Tape {
    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| f(*a)).collect())
            .expect("unary shape");
        self.push(out, op, &[x])
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return invalid(format!(
                "{name}: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            ));
        }
        Ok((av.shape().to_vec(), av.data().to_vec(), bv.data().to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, x, y) = self.zip_same(a, b, "add")?;
        let out = Tensor::new(shape, x.iter().zip(&y).map(|(x, y)| x + y).collect())?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, x, y) = self.zip_same(a, b, "sub")?;
        let out = Tensor::new(shape, x.iter().zip(&y).map(|(x, y)| x - y).collect())?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, x, y) = self.zip_same(a, b, "mul")?;
        let out = Tensor::new(shape, x.iter().zip(&y).map(|(x, y)| x * y).collect())?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Scales each row of `x: [N, C]` by the matching entry of `s: [N, 1]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != xv.rows() || sv.cols() != 1 {
            return invalid(format!(
                "mul_rows: scale {:?} does not match rows of {:?}",
                sv.shape(),
                xv.shape()
            ));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, a)| a * sv.data()[k / c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRows(x, s), &[x, s]))
    }

    /// Adds a `[C]` vector to every row of `x: [N, C]`.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.len();
        if xv.cols() != c {
            return invalid(format!(
                "add_row_vector: bias of {c} for {:?}",
                xv.shape()
            ));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, a)| a + bv.data()[k % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowVector(x, b), &[x, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map_unary(x, |a| scale * a + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn log_transform(&mut self, x: Var) -> Var {
        self.map_unary(x, log_transform, Op::LogTf(x))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map_unary(x, |a| a.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax along the last axis of a `[N, K]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in row.iter_mut() {
                *a = (*a - m).exp();
                s += *a;
            }
            for a in row.iter_mut() {
                *a /= s;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("softmax shape");
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return invalid(format!("transpose needs rank 2, got {:?}", v.shape()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Concatenates `[N, C_i]` tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_cols of nothing");
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return invalid(format!(
                    "concat_cols: row counts {} and {} differ",
                    rows,
                    v.rows()
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_rows of nothing");
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape()[1..] != tail[..] {
                return invalid(format!(
                    "concat_rows: trailing dims {:?} and {:?} differ",
                    tail,
                    &v.shape()[1..]
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_transform_keeps_unit_range() {
        assert_eq!(log_transform(1.0), 1.0);
        assert_eq!(log_transform(-1.0), -1.0);
        assert_eq!(log_transform(0.0), 0.0);
        assert_abs_diff_eq!(log_transform(0.5), 1.5f64.log2(), epsilon = 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = tape.softmax_rows(x);
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.concat_cols(&[a, b]).is_err());
    }

    #[test]
    fn detached_input_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(d).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64));
        let t = tape.transpose(x).unwrap();
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.value(tt), tape.value(x));
    }
}
