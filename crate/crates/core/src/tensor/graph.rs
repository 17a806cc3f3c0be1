use std::collections::BTreeMap;

use super::{
    check_finite, compensated_sum, matmul_raw, smooth_l1_deriv, smooth_l1_elem, transpose_raw,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    AddBias(Var, Var),
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    MeanRowGroups(Var, usize),
    EmbedBag(Var, Vec<Vec<usize>>),
    Diagonal(Var),
    Sum(Var),
    Mean(Var),
    SmoothL1(Var, Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-use trace of a forward computation.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. `backward` may be called once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf, or `None` when the leaf was not
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(Vec::as_slice)
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let value = Tensor {
            requires_grad,
            grad: None,
            ..value
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_values(
        &mut self,
        op_name: &'static str,
        shape: &[usize],
        values: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, &values)?;
        let value = Tensor::new(shape, values)?;
        Ok(self.push(value, op, inputs))
    }

    /// Records a tensor as a leaf. It participates in backward iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.clone(), Op::Leaf, &[])
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = Tensor {
            requires_grad: false,
            grad: None,
            ..tensor
        };
        self.push(t, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a));
        let (k2, n) = rows_cols(self.value(b));
        if self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        self.push_values("matmul", &[m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let shape = ta.shape().to_vec();
        let out = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push_values(name, &shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let out = t.values().iter().map(|x| x * c).collect();
        self.push_values("scale", &shape, out, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let out = t.values().iter().map(|x| x.tanh()).collect();
        self.push_values("tanh", &shape, out, Op::Tanh(a), &[a])
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!(
                    "bias of {} elements for {m}x{n} input",
                    self.value(bias).numel()
                ),
            ));
        }
        let b = self.value(bias).values();
        let out = self
            .value(a)
            .values()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push_values("add_bias", &[m, n], out, Op::AddBias(a, bias), &[a, bias])
    }

    /// `x·W + b` for an m×k input, k×n weight and length-n bias.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    /// Reinterprets the row-major values under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let values = self.value(a).values().to_vec();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        self.push_values("reshape", shape, values, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        let out = transpose_raw(self.value(a).values(), m, n);
        self.push_values("transpose", &[n, m], out, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        let out = softmax_rows_raw(self.value(a).values(), n);
        self.push_values("softmax_rows", &[m, n], out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).values().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        self.push_values(
            "log_softmax_rows",
            &[m, n],
            out,
            Op::LogSoftmaxRows(a),
            &[a],
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for (i, row) in self.value(a).values().chunks(n).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has norm {norm:e}"),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        self.push_values(
            "l2_normalize_rows",
            &[m, n],
            out,
            Op::L2NormalizeRows(a, norms),
            &[a],
        )
    }

    /// Averages consecutive groups of `group` rows: (B·group)×C → B×C.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        if group == 0 || m % group != 0 {
            return Err(Error::shape(
                "mean_row_groups",
                format!("{m} rows in groups of {group}"),
            ));
        }
        let b = m / group;
        let mut out = vec![0.0; b * n];
        let vals = self.value(a).values();
        for (i, row) in vals.chunks(n).enumerate() {
            let dst = &mut out[(i / group) * n..(i / group + 1) * n];
            for (o, x) in dst.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        self.push_values(
            "mean_row_groups",
            &[b, n],
            out,
            Op::MeanRowGroups(a, group),
            &[a],
        )
    }

    /// Mean of embedding-table rows per sequence: V×E table → B×E.
    pub fn embed_bag(&mut self, table: Var, sequences: &[Vec<usize>]) -> Result<Var> {
        let (v, e) = rows_cols(self.value(table));
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("embed_bag: no sequences".into()));
        }
        let mut out = vec![0.0; sequences.len() * e];
        let vals = self.value(table).values();
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "embed_bag: sequence {i} is empty"
                )));
            }
            let dst = &mut out[i * e..(i + 1) * e];
            for &tok in seq {
                if tok >= v {
                    return Err(Error::InvalidArgument(format!(
                        "embed_bag: token {tok} outside vocabulary of {v}"
                    )));
                }
                for (o, x) in dst.iter_mut().zip(&vals[tok * e..(tok + 1) * e]) {
                    *o += x;
                }
            }
            let inv = 1.0 / seq.len() as f64;
            dst.iter_mut().for_each(|x| *x *= inv);
        }
        self.push_values(
            "embed_bag",
            &[sequences.len(), e],
            out,
            Op::EmbedBag(table, sequences.to_vec()),
            &[table],
        )
    }

    /// Diagonal of a square matrix as a 1×n row.
    pub fn diagonal(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(a));
        if m != n {
            return Err(Error::shape("diagonal", format!("{m}x{n} is not square")));
        }
        let vals = self.value(a).values();
        let out = (0..n).map(|i| vals[i * n + i]).collect();
        self.push_values("diagonal", &[1, n], out, Op::Diagonal(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = compensated_sum(self.value(a).values().iter().copied());
        self.push_values("sum", &[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = compensated_sum(t.values().iter().copied()) / t.numel() as f64;
        self.push_values("mean", &[1], vec![s], Op::Mean(a), &[a])
    }

    /// Mean Smooth-L1 between `pred` and a gradient-free `target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smooth_l1: beta must be positive, got {beta}"
            )));
        }
        if self.requires_grad(target) {
            return Err(Error::InvalidArgument(
                "smooth_l1: target must not carry a gradient".into(),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        let total = compensated_sum(
            p.values()
                .iter()
                .zip(t.values())
                .map(|(x, y)| smooth_l1_elem(x - y, beta)),
        );
        let loss = total / p.numel() as f64;
        self.push_values(
            "smooth_l1",
            &[1],
            vec![loss],
            Op::SmoothL1(pred, target, beta),
            &[pred, target],
        )
    }

    /// Propagates gradients from a scalar `loss` back to every reachable
    /// leaf with `requires_grad`. Fan-out contributions accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("trace already consumed".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(idx), g);
                }
                op => self.backprop(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(contribution)
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match *op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = rows_cols(ta);
                let n = tb.cols();
                if self.requires_grad(a) {
                    let bt = transpose_raw(tb.values(), k, n);
                    acc(a, matmul_raw(g, &bt, m, n, k));
                }
                if self.requires_grad(b) {
                    let at = transpose_raw(ta.values(), m, k);
                    acc(b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).values(), self.value(b).values());
                acc(a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                acc(b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => acc(a, g.iter().map(|x| x * c).collect()),
            Op::Tanh(a) => acc(
                a,
                g.iter()
                    .zip(out.values())
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect(),
            ),
            Op::AddBias(a, bias) => {
                let n = out.cols();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                acc(a, g.to_vec());
                acc(bias, gb);
            }
            Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Transpose(a) => {
                let (m, n) = rows_cols(out);
                acc(a, transpose_raw(g, m, n));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.values().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                acc(a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.values().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| x - y.exp() * total));
                }
                acc(a, ga);
            }
            Op::L2NormalizeRows(a, ref norms) => {
                let n = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for ((gr, yr), norm) in g.chunks(n).zip(out.values().chunks(n)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| (x - y * dot) / norm));
                }
                acc(a, ga);
            }
            Op::MeanRowGroups(a, group) => {
                let n = out.cols();
                let rows = self.value(a).rows();
                let inv = 1.0 / group as f64;
                let mut ga = Vec::with_capacity(rows * n);
                for i in 0..rows {
                    ga.extend(
                        g[(i / group) * n..(i / group + 1) * n]
                            .iter()
                            .map(|x| x * inv),
                    );
                }
                acc(a, ga);
            }
            Op::EmbedBag(table, ref sequences) => {
                let e = out.cols();
                let mut gt = vec![0.0; self.value(table).numel()];
                for (i, seq) in sequences.iter().enumerate() {
                    let inv = 1.0 / seq.len() as f64;
                    let gr = &g[i * e..(i + 1) * e];
                    for &tok in seq {
                        gt[tok * e..(tok + 1) * e]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(t, x)| *t += x * inv);
                    }
                }
                acc(table, gt);
            }
            Op::Diagonal(a) => {
                let n = out.cols();
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = g[i];
                }
                acc(a, ga);
            }
            Op::Sum(a) => acc(a, vec![g[0]; self.value(a).numel()]),
            Op::Mean(a) => {
                let numel = self.value(a).numel();
                acc(a, vec![g[0] / numel as f64; numel]);
            }
            Op::SmoothL1(pred, target, beta) => {
                let (p, t) = (self.value(pred).values(), self.value(target).values());
                let scale = g[0] / p.len() as f64;
                acc(
                    pred,
                    p.iter()
                        .zip(t)
                        .map(|(x, y)| scale * smooth_l1_deriv(x - y, beta))
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows_raw(values: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|x| *x /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(m(&[&[1.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).values(), &[3.0, 7.0]);

        let eye = g.constant(Tensor::identity(2));
        let b2 = g.constant(m(&[&[1.5, -2.0, 7.0], &[0.25, 3.0, -1.0]]));
        let c2 = g.matmul(eye, b2).unwrap();
        assert_eq!(g.value(c2).values(), g.value(b2).values());

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let c3 = g.matmul(b2, z).unwrap();
        assert!(g.value(c3).values().iter().all(|&x| x == 0.0));

        assert!(matches!(g.matmul(b2, b2), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[2.0, 3.0]]));
        let b = g.constant(m(&[&[4.0, 5.0]]));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).values(), &[8.0, 15.0]);
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).values(), g.value(a).values());
        let zero = g.constant(Tensor::scalar(0.0));
        let t = g.tanh(zero).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let c = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[0.7, 0.7, 0.7], &[0.0, 3f64.ln(), -1e9 + 1e9]]));
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s);
        for x in v.row(0) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = g.constant(m(&[&[42.0]]));
        let s1 = g.softmax_rows(single).unwrap();
        assert_eq!(g.value(s1).item(), 1.0);

        let pair = g.constant(m(&[&[0.0, 3f64.ln()]]));
        let sp = g.softmax_rows(pair).unwrap();
        assert!((g.value(sp).get(0, 0) - 0.25).abs() < 1e-15);
        assert!((g.value(sp).get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[3.0, 4.0], &[0.6, 0.8]]));
        let n = g.l2_normalize_rows(a).unwrap();
        let v = g.value(n);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.6, 0.8]);
        let z = g.constant(m(&[&[0.0, 0.0]]));
        assert!(matches!(
            g.l2_normalize_rows(z),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn smooth_l1_examples() {
        let mut g = Graph::new();
        let p = g.constant(m(&[&[0.5, 2.0]]));
        let t = g.constant(Tensor::zeros(&[1, 2]));
        let d05 = g.constant(Tensor::scalar(0.5));
        let d2 = g.constant(Tensor::scalar(2.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let l1 = g.smooth_l1(d05, zero, 1.0).unwrap();
        let l2 = g.smooth_l1(d2, zero, 1.0).unwrap();
        assert!((g.value(l1).item() - 0.125).abs() < 1e-12);
        assert!((g.value(l2).item() - 1.5).abs() < 1e-12);
        let same = g.smooth_l1(p, p, 1.0).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let mean = g.smooth_l1(p, t, 1.0).unwrap();
        assert!((g.value(mean).item() - 0.8125).abs() < 1e-12);
        assert!(g.smooth_l1(p, t, 0.0).is_err());
        assert!(g.smooth_l1(p, d2, 1.0).is_err());

        let trainable = g.leaf(&Tensor::scalar(1.0).trainable());
        assert!(g.smooth_l1(zero, trainable, 1.0).is_err());
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).trainable());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_constant_function() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).trainable());
        let c = g.constant(Tensor::scalar(2.0));
        let _unused = g.scale(x, 5.0).unwrap();
        let y = g.scale(c, 4.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap_or(&[0.0]), &[0.0]);
    }

    #[test]
    fn backward_sum_of_product() {
        let a_t = m(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0]]).trainable();
        let b_t = m(&[&[2.0, 1.0], &[-1.0, 0.5], &[4.0, 3.0]]);
        let mut g = Graph::new();
        let a = g.leaf(&a_t);
        let b = g.constant(b_t.clone());
        let ab = g.matmul(a, b).unwrap();
        let s = g.sum(ab).unwrap();
        let grads = g.backward(s).unwrap();
        // ones(2x2) · Bᵀ: every row equals the row sums of B
        let expected: Vec<f64> = (0..2)
            .flat_map(|_| (0..3).map(|k| b_t.row(k).iter().sum::<f64>()))
            .collect();
        assert_eq!(grads.get(a).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 2]).trainable());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_matches_sum_rule() {
        // y = x^3 + 2x^2 built from shared uses of x; dy/dx = 3x^2 + 4x
        for x0 in [-2.0, -0.5, 0.0, 1.25, 3.0] {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::scalar(x0).trainable());
            let x2 = g.mul(x, x).unwrap();
            let x3 = g.mul(x2, x).unwrap();
            let t = g.scale(x2, 2.0).unwrap();
            let y = g.add(x3, t).unwrap();
            let grads = g.backward(y).unwrap();
            assert_eq!(grads.get(x).unwrap()[0], 3.0 * x0 * x0 + 4.0 * x0);
        }
    }

    #[test]
    fn mean_row_groups_and_embed_bag() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[0.0, 2.0], &[2.0, 0.0], &[1.0, 1.0], &[3.0, 5.0]]));
        let pooled = g.mean_row_groups(a, 2).unwrap();
        assert_eq!(g.value(pooled).values(), &[1.0, 1.0, 2.0, 3.0]);
        assert!(g.mean_row_groups(a, 3).is_err());

        let table = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]));
        let bag = g.embed_bag(table, &[vec![0, 2], vec![1]]).unwrap();
        assert_eq!(g.value(bag).values(), &[1.5, 1.0, 0.0, 1.0]);
        assert!(g.embed_bag(table, &[vec![3]]).is_err());
        assert!(g.embed_bag(table, &[vec![]]).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let big = g.constant(Tensor::scalar(1e200));
        let sq = g.mul(big, big);
        assert!(matches!(sq, Err(Error::NonFinite { op: "mul" })));
    }
}
