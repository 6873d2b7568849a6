use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Fixed weighted row gather: output row `i` is `sum_k w_ik * input[src_ik]`.
///
/// Covers bilinear and nearest sampling, back-projection averaging, masking
/// and nearest-neighbor upsampling. Weights are constants; gradients flow to
/// the input rows only. An output row with no entries is all zeros.
#[derive(Clone, Debug, Default)]
pub struct GatherMap {
    offsets: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
    input_rows: usize,
}

impl GatherMap {
    pub fn new(input_rows: usize) -> Self {
        Self {
            offsets: vec![0],
            src: Vec::new(),
            weight: Vec::new(),
            input_rows,
        }
    }

    /// Appends one output row built from `(source row, weight)` pairs.
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, f64)>) {
        for (s, w) in taps {
            debug_assert!(s < self.input_rows);
            self.src.push(s as u32);
            self.weight.push(w);
        }
        self.offsets.push(self.src.len());
    }

    /// Output row `i` copies input row `rows[i]`, or is zero for `None`.
    pub fn select(input_rows: usize, rows: impl IntoIterator<Item = Option<usize>>) -> Self {
        let mut m = Self::new(input_rows);
        for r in rows {
            m.push_row(r.map(|r| (r, 1.0)));
        }
        m
    }

    pub fn output_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.src[a..b]
            .iter()
            .zip(&self.weight[a..b])
            .map(|(s, w)| (*s as usize, *w))
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = vec![0.0; self.output_rows() * c];
        for i in 0..self.output_rows() {
            let orow = &mut out[i * c..(i + 1) * c];
            for (s, w) in self.row(i) {
                for (o, v) in orow.iter_mut().zip(x.row(s)) {
                    *o += w * v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if shape.is_empty() {
            shape.push(self.output_rows());
        } else {
            shape[0] = self.output_rows();
        }
        Tensor::new(shape, out).expect("gather shape")
    }

    pub(crate) fn backward(&self, input_rows: usize, g: &Tensor) -> Vec<f64> {
        let c = g.cols();
        let mut d = vec![0.0; input_rows * c];
        for i in 0..self.output_rows() {
            let grow = g.row(i);
            for (s, w) in self.row(i) {
                for (dv, gv) in d[s * c..(s + 1) * c].iter_mut().zip(grow) {
                    *dv += w * gv;
                }
            }
        }
        d
    }
}

impl Tape {
    /// Applies a [`GatherMap`] to the rows of `x`.
    pub fn gather(&mut self, x: Var, map: std::rc::Rc<GatherMap>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != map.input_rows() {
            return invalid(format!(
                "gather: map expects {} input rows, tensor has {}",
                map.input_rows(),
                xv.rows()
            ));
        }
        let out = map.apply(xv);
        Ok(self.push(out, Op::Gather(x, map), &[x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    #[test]
    fn select_and_weighted_rows() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut m = GatherMap::new(3);
        m.push_row([(0, 0.5), (2, 0.5)]);
        m.push_row([]);
        m.push_row([(1, 2.0)]);
        let y = tape.gather(x, Rc::new(m)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 0.0, 0.0, 6.0, 8.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5, 2.0, 2.0, 0.5, 0.5]);
    }
}
