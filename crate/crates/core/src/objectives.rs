//! Masked regression and classification losses and the weighted objective.

use std::collections::BTreeMap;
use std::rc::Rc;

use cdr_tensor::{CustomOp, Tape, Tensor, TensorError, Var};

use crate::error::{invalid, Result};

/// Mean absolute error over the masked rows of a `[n, 1]` prediction.
pub struct MaskedMae {
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Mean binary cross-entropy with logits over the masked rows of `[n, 1]`.
pub struct MaskedBce {
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Mean softmax cross-entropy over the rows of `[n, C]` logits that have a
/// target class.
pub struct MaskedCe {
    pub target: Vec<Option<usize>>,
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|m| **m).count()
}

fn check_rows(op: &str, x: &Tensor, n: usize) -> cdr_tensor::Result<()> {
    if x.rank() != 2 || x.rows() != n {
        return Err(TensorError::InvalidArgument(format!("{op}: prediction {:?} vs {n} targets", x.shape())));
    }
    Ok(())
}

impl CustomOp for MaskedMae {
    fn name(&self) -> &str {
        "masked_mae"
    }

    fn forward(&self, inputs: &[&Tensor]) -> cdr_tensor::Result<Tensor> {
        let x = inputs[0];
        check_rows(self.name(), x, self.target.len())?;
        let k = count(&self.mask);
        let s: f64 = (0..x.rows())
            .filter(|i| self.mask[*i])
            .map(|i| (x.data()[i] - self.target[i]).abs())
            .sum();
        Ok(Tensor::scalar(if k == 0 { 0.0 } else { s / k as f64 }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let k = count(&self.mask).max(1) as f64;
        let g = grad.item() / k;
        let d = (0..x.rows())
            .map(|i| {
                if !self.mask[i] {
                    return 0.0;
                }
                let e = x.data()[i] - self.target[i];
                if e > 0.0 {
                    g
                } else if e < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }

    fn branches(&self, inputs: &[&Tensor]) -> Vec<i64> {
        let x = inputs[0];
        (0..x.rows())
            .filter(|i| self.mask[*i])
            .map(|i| (x.data()[i] - self.target[i]).signum() as i64)
            .collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl CustomOp for MaskedBce {
    fn name(&self) -> &str {
        "masked_bce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> cdr_tensor::Result<Tensor> {
        let x = inputs[0];
        check_rows(self.name(), x, self.target.len())?;
        let k = count(&self.mask);
        let s: f64 = (0..x.rows())
            .filter(|i| self.mask[*i])
            .map(|i| softplus(x.data()[i]) - self.target[i] * x.data()[i])
            .sum();
        Ok(Tensor::scalar(if k == 0 { 0.0 } else { s / k as f64 }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let g = grad.item() / count(&self.mask).max(1) as f64;
        let d = (0..x.rows())
            .map(|i| {
                if self.mask[i] {
                    g * (1.0 / (1.0 + (-x.data()[i]).exp()) - self.target[i])
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl CustomOp for MaskedCe {
    fn name(&self) -> &str {
        "masked_ce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> cdr_tensor::Result<Tensor> {
        let x = inputs[0];
        check_rows(self.name(), x, self.target.len())?;
        if self.target.iter().flatten().any(|t| *t >= x.cols()) {
            return Err(TensorError::InvalidArgument("masked_ce: class index out of range".into()));
        }
        let mut s = 0.0;
        let mut k = 0usize;
        for (i, t) in self.target.iter().enumerate() {
            if let Some(t) = t {
                s -= log_softmax(x.row(i))[*t];
                k += 1;
            }
        }
        Ok(Tensor::scalar(if k == 0 { 0.0 } else { s / k as f64 }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let c = x.cols();
        let k = self.target.iter().flatten().count().max(1) as f64;
        let g = grad.item() / k;
        let mut d = vec![0.0; x.len()];
        for (i, t) in self.target.iter().enumerate() {
            if let Some(t) = t {
                let ls = log_softmax(x.row(i));
                for j in 0..c {
                    d[i * c + j] = g * (ls[j].exp() - f64::from(u8::from(j == *t)));
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

pub fn masked_mae(tape: &mut Tape, x: Var, target: Vec<f64>, mask: Vec<bool>) -> Result<Var> {
    if target.len() != mask.len() {
        return invalid("masked_mae: target and mask lengths differ");
    }
    Ok(tape.custom(&[x], Rc::new(MaskedMae { target, mask }))?)
}

pub fn masked_bce(tape: &mut Tape, x: Var, target: Vec<f64>, mask: Vec<bool>) -> Result<Var> {
    if target.len() != mask.len() {
        return invalid("masked_bce: target and mask lengths differ");
    }
    Ok(tape.custom(&[x], Rc::new(MaskedBce { target, mask }))?)
}

pub fn masked_ce(tape: &mut Tape, x: Var, target: Vec<Option<usize>>) -> Result<Var> {
    Ok(tape.custom(&[x], Rc::new(MaskedCe { target }))?)
}

/// Named scalar terms with their weights; the total is their weighted sum.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub terms: BTreeMap<String, (f64, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.terms.get(name).map(|t| t.0)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.values().map(|(v, w)| v * w).sum()
    }
}

/// Accumulates weighted scalar terms on the tape.
#[derive(Default)]
pub struct LossBuilder {
    parts: Vec<(String, Var, f64)>,
}

impl LossBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, term: Var, weight: f64) {
        self.parts.push((name.into(), term, weight));
    }

    /// Weighted sum of every term pushed so far.
    pub fn total(&self, tape: &mut Tape) -> Result<(Var, LossReport)> {
        let mut report = LossReport::default();
        let mut acc: Option<Var> = None;
        for (name, v, w) in &self.parts {
            report.terms.insert(name.clone(), (tape.value(*v).item(), *w));
            let t = tape.scale(*v, *w);
            acc = Some(match acc {
                Some(a) => tape.add(a, t)?,
                None => t,
            });
        }
        let total = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        report.total = tape.value(total).item();
        Ok((total, report))
    }
}

/// `l3d + mu * l2d`.
pub fn total_loss(tape: &mut Tape, l3d: Var, l2d: Var, mu: f64) -> Result<Var> {
    let b = tape.scale(l2d, mu);
    Ok(tape.add(l3d, b)?)
}
