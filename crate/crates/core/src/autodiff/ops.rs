//! Differentiable primitives recorded on a [`Tape`].

use std::rc::Rc;

use super::tape::{Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

fn shape_str(t: &Tensor) -> String {
    format!("{}x{}", t.rows(), t.cols())
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, shape_str(ta), shape_str(tb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, vec![a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, vec![a, b], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let value = ta.zip_map(&tb, |x, y| x * y);
        Ok(self.push(value, vec![a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&tb, |u, y| u * y)),
                need[1].then(|| g.zip_map(&ta, |u, x| u * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, vec![a], move |g, _| vec![Some(g.scale(s))])
    }

    /// `x·W + b` with `x: B×C_in`, `W: C_in×C_out`, `b: 1×C_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols() != tw.rows() {
            return Err(Error::shape(
                "linear",
                format!("input width {}", tw.rows()),
                shape_str(tx),
            ));
        }
        if tb.shape() != (1, tw.cols()) {
            return Err(Error::shape(
                "linear",
                format!("bias 1x{}", tw.cols()),
                shape_str(tb),
            ));
        }
        let mut value = Tensor::zeros(tx.rows(), tw.cols());
        for r in 0..value.rows() {
            value.row_mut(r).copy_from_slice(tb.data());
        }
        gemm(tx, false, tw, false, &mut value, 1.0);
        let (tx, tw) = (Rc::new(tx.clone()), Rc::new(tw.clone()));
        Ok(self.push(value, vec![x, w, b], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                gemm(g, false, &tw, true, &mut gx, 0.0);
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = Tensor::zeros(tw.rows(), tw.cols());
                gemm(&tx, true, g, false, &mut gw, 0.0);
                gw
            });
            let gb = need[2].then(|| column_sums(g));
            vec![gx, gw, gb]
        }))
    }

    /// `x > 0 ? x : exp(x) − 1`.
    pub fn elu(&mut self, x: Var) -> Var {
        let tx = self.value(x).clone();
        let value = tx.map(elu);
        self.push(value, vec![x], move |g, _| {
            vec![Some(g.zip_map(&tx, |u, v| if v > 0.0 { u } else { u * v.exp() }))]
        })
    }

    /// Per-row standardisation followed by `gain ⊙ · + shift` (both `1×C`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        for (name, v) in [("gain", gain), ("shift", shift)] {
            if self.value(v).shape() != (1, c) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} 1x{c}"),
                    shape_str(self.value(v)),
                ));
            }
        }
        if c == 0 {
            return Err(Error::Empty { op: "layer_norm" });
        }
        let tg = self.value(gain).clone();
        let ts = self.value(shift);
        let mut normed = Tensor::zeros(tx.rows(), c);
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut value = Tensor::zeros(tx.rows(), c);
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let nrow = normed.row_mut(r);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * inv;
            }
            let out = value.row_mut(r);
            for j in 0..c {
                out[j] = normed.get(r, j) * tg.data()[j] + ts.data()[j];
            }
        }
        Ok(self.push(value, vec![x, gain, shift], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = Tensor::zeros(g.rows(), c);
                for r in 0..g.rows() {
                    let (gr, nr) = (g.row(r), normed.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dn = 0.0;
                    for j in 0..c {
                        let d = gr[j] * tg.data()[j];
                        mean_d += d;
                        mean_dn += d * nr[j];
                    }
                    mean_d /= c as f64;
                    mean_dn /= c as f64;
                    let out = gx.row_mut(r);
                    for j in 0..c {
                        let d = gr[j] * tg.data()[j];
                        out[j] = inv_std[r] * (d - mean_d - nr[j] * mean_dn);
                    }
                }
                gx
            });
            let gg = need[1].then(|| column_sums(&g.zip_map(&normed, |u, n| u * n)));
            let gs = need[2].then(|| column_sums(g));
            vec![gx, gg, gs]
        }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(Error::Empty { op: "concat_cols" })?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), shape_str(t)));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        Ok(self.push(value, parts.to_vec(), move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &n)| {
                    let s = n.then(|| g.slice_cols(offset, offset + w));
                    offset += w;
                    s
                })
                .collect()
        }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or(Error::Empty { op: "concat_rows" })?;
        let mut heights = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{cols} columns"), shape_str(t)));
            }
            heights.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(heights.iter().sum(), cols, data)?;
        Ok(self.push(value, parts.to_vec(), move |g, need| {
            let mut start = 0;
            heights
                .iter()
                .zip(need)
                .map(|(&h, &n)| {
                    let s = n.then(|| {
                        Tensor::from_vec(h, cols, g.data()[start * cols..(start + h) * cols].to_vec())
                            .expect("row block")
                    });
                    start += h;
                    s
                })
                .collect()
        }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("range within {} columns", t.cols()),
                format!("{start}..{end}"),
            ));
        }
        let (rows, cols) = t.shape();
        let value = t.slice_cols(start, end);
        Ok(self.push(value, vec![x], move |g, _| {
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                out.row_mut(r)[start..end].copy_from_slice(g.row(r));
            }
            vec![Some(out)]
        }))
    }

    /// Row `e` of the result is row `index[e]` of `x`; the backward pass
    /// scatter-adds.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::LabelOutOfRange {
                op: "gather_rows",
                label: bad,
                count: t.rows(),
            });
        }
        let rows = t.rows();
        let value = t.gather_rows(index);
        let index = index.to_vec();
        Ok(self.push(value, vec![x], move |g, _| {
            vec![Some(scatter_add(g, &index, rows))]
        }))
    }

    /// Row `l` of the result is the sum of rows of `x` whose label is `l`.
    pub fn scatter_sum(&mut self, x: Var, labels: &[usize], groups: usize) -> Result<Var> {
        let t = self.value(x);
        check_labels("scatter_sum", t, labels, groups)?;
        let value = scatter_add(t, labels, groups);
        let labels = labels.to_vec();
        Ok(self.push(value, vec![x], move |g, _| vec![Some(g.gather_rows(&labels))]))
    }

    /// `B×C → B×1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let sums = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(t.rows(), 1, sums).expect("column");
        self.push(value, vec![x], move |g, _| {
            let mut out = Tensor::zeros(g.rows(), cols);
            for r in 0..g.rows() {
                out.row_mut(r).fill(g.get(r, 0));
            }
            vec![Some(out)]
        })
    }

    /// Multiplies each row of `x: B×C` by the scalar in the matching row of
    /// `w: B×1`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        if tw.shape() != (tx.rows(), 1) {
            return Err(Error::shape("mul_col", format!("{}x1", tx.rows()), shape_str(&tw)));
        }
        let mut value = tx.clone();
        for r in 0..value.rows() {
            let s = tw.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(value, vec![x, w], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let s = tw.get(r, 0);
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                gx
            });
            let gw = need[1].then(|| {
                let d = (0..g.rows())
                    .map(|r| g.row(r).iter().zip(tx.row(r)).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::from_vec(g.rows(), 1, d).expect("column")
            });
            vec![gx, gw]
        }))
    }

    /// Softmax over each run of `group` consecutive rows, independently per
    /// column. Rows `[i·group, (i+1)·group)` form the `i`-th distribution.
    pub fn group_softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || t.rows() % group != 0 {
            return Err(Error::shape(
                "group_softmax",
                format!("rows divisible by {group}"),
                shape_str(t),
            ));
        }
        let cols = t.cols();
        let mut value = Tensor::zeros(t.rows(), cols);
        for base in (0..t.rows()).step_by(group) {
            for c in 0..cols {
                let max = (0..group)
                    .map(|j| t.get(base + j, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..group {
                    let e = (t.get(base + j, c) - max).exp();
                    value.set(base + j, c, e);
                    total += e;
                }
                for j in 0..group {
                    let v = value.get(base + j, c) / total;
                    value.set(base + j, c, v);
                }
            }
        }
        let y = value.clone();
        Ok(self.push(value, vec![x], move |g, _| {
            let mut out = Tensor::zeros(y.rows(), cols);
            for base in (0..y.rows()).step_by(group) {
                for c in 0..cols {
                    let dot: f64 = (0..group)
                        .map(|j| y.get(base + j, c) * g.get(base + j, c))
                        .sum();
                    for j in 0..group {
                        let yj = y.get(base + j, c);
                        out.set(base + j, c, yj * (g.get(base + j, c) - dot));
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape();
        let value = Tensor::scalar(t.sum());
        self.push(value, vec![x], move |g, _| {
            vec![Some(Tensor::filled(shape.0, shape.1, g.item()))]
        })
    }

    /// `Σ weights ⊙ x` for a constant `weights` of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", shape_str(t), shape_str(weights)));
        }
        let value = Tensor::scalar(t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum());
        let weights = weights.clone();
        Ok(self.push(value, vec![x], move |g, _| vec![Some(weights.scale(g.item()))]))
    }

    /// A scalar node whose value and input gradients were computed outside
    /// the tape, e.g. by a loss with a closed-form derivative.
    pub fn scalar_op(&mut self, inputs: Vec<Var>, value: f64, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::shape("scalar_op", inputs.len(), grads.len()));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.value(v).shape() != g.shape() {
                return Err(Error::shape("scalar_op", shape_str(self.value(v)), shape_str(g)));
            }
        }
        Ok(self.push(Tensor::scalar(value), inputs, move |g, need| {
            let s = g.item();
            grads
                .iter()
                .zip(need)
                .map(|(gr, &n)| n.then(|| gr.scale(s)))
                .collect()
        }))
    }
}

#[inline]
pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

pub(crate) fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// Sum of rows per label, in label order. Summation within a group follows
/// row order, so results are bitwise reproducible.
pub(crate) fn scatter_add(t: &Tensor, labels: &[usize], groups: usize) -> Tensor {
    let mut out = Tensor::zeros(groups, t.cols());
    for (r, &l) in labels.iter().enumerate() {
        for (o, v) in out.row_mut(l).iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn check_labels(op: &'static str, t: &Tensor, labels: &[usize], groups: usize) -> Result<()> {
    if labels.len() != t.rows() {
        return Err(Error::shape(op, format!("{} labels", t.rows()), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= groups) {
        return Err(Error::LabelOutOfRange {
            op,
            label: bad,
            count: groups,
        });
    }
    Ok(())
}
