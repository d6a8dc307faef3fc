//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Nodes are appended in evaluation order, so the record is already a
//! topological order and the backward sweep is a single reverse pass.
//! Forward values are `f32`; adjoints accumulate in `f64` and are truncated to
//! `f32` only when handed back in [`Gradients`].

use std::collections::BTreeMap;

use super::tensor::{self as k, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    RowSimilarity(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    L2NormRows(Var, Vec<f32>),
    Softmax(Var, f32),
    LogSoftmax(Var, f32),
    Diag(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    norm_eps: f32,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of one backward sweep, keyed by leaf handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            norm_eps: NORM_EPS,
        }
    }

    pub fn with_norm_eps(norm_eps: f32) -> Self {
        Tape {
            nodes: Vec::new(),
            norm_eps,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiable iff the tensor's `requires_grad`
    /// flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` over rows: cosine similarity for unit-norm rows.
    pub fn row_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::row_similarity(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::RowSimilarity(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = k::scale(self.value(a), c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = k::add_bias(self.value(a), self.value(bias))?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = k::tanh(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = k::concat_cols(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = k::select_rows(self.value(a), indices)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows(a, indices.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = k::transpose(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (out, norms) = k::l2_normalize_rows_with_norms(self.value(a), self.norm_eps)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormRows(a, norms), rg))
    }

    pub fn scaled_row_softmax(&mut self, logits: Var, temperature: f32) -> Result<Var> {
        let out = k::scaled_row_softmax(self.value(logits), temperature)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::Softmax(logits, temperature), rg))
    }

    pub fn scaled_row_log_softmax(&mut self, logits: Var, temperature: f32) -> Result<Var> {
        let out = k::scaled_row_log_softmax(self.value(logits), temperature)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::LogSoftmax(logits, temperature), rg))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let out = k::diag(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Diag(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = k::sum(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = k::mean(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::mse(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every differentiable leaf recorded before `loss` gets an entry (zeros
    /// if `loss` does not depend on it); non-differentiable leaves never do.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes[..=loss.0].iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = match adj[idx].take() {
                    Some(g) => g.into_iter().map(|x| x as f32).collect(),
                    None => vec![0.0; node.value.len()],
                };
                grads.insert(
                    Var(idx),
                    Tensor::from_parts(node.value.shape().to_vec(), data),
                );
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(
        &self,
        adj: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, kk) = val(*a).dims2();
                let n = val(*b).cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        for p in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * f64::from(bd[p * n + j]);
                            }
                            ga[i * kk + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.acc(adj, *b) {
                    for i in 0..m {
                        for p in 0..kk {
                            let av = f64::from(ad[i * kk + p]);
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::RowSimilarity(a, b) => {
                let (m, d) = val(*a).dims2();
                let n = val(*b).rows();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for c in 0..d {
                                ga[i * d + c] += gij * f64::from(bd[j * d + c]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(adj, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for c in 0..d {
                                gb[j * d + c] += gij * f64::from(ad[i * d + c]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Scale(a, c) => {
                let c = f64::from(*c);
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddBias(a, b) => {
                let (m, n) = val(*a).dims2();
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(adj, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(adj, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        let yi = f64::from(y[i]);
                        *x += g[i] * (1.0 - yi * yi);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(gp) = self.acc(adj, *p) {
                        for i in 0..rows {
                            for c in 0..w {
                                gp[i * w + c] += g[i * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectRows(a, idx) => {
                let n = val(*a).cols();
                if let Some(ga) = self.acc(adj, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga[src * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2();
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::L2NormRows(a, norms) => {
                let (m, n) = node.value.dims2();
                let y = node.value.data();
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let proj: f64 = yr.iter().zip(gr).map(|(&a, b)| f64::from(a) * b).sum();
                        let inv = 1.0 / f64::from(norms[i]);
                        for c in 0..n {
                            ga[i * n + c] += (gr[c] - f64::from(yr[c]) * proj) * inv;
                        }
                    }
                }
            }
            Op::Softmax(a, t) => {
                let (m, n) = node.value.dims2();
                let p = node.value.data();
                let t = f64::from(*t);
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        let pr = &p[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let inner: f64 = pr.iter().zip(gr).map(|(&a, b)| f64::from(a) * b).sum();
                        for c in 0..n {
                            ga[i * n + c] += f64::from(pr[c]) * (gr[c] - inner) / t;
                        }
                    }
                }
            }
            Op::LogSoftmax(a, t) => {
                let (m, n) = node.value.dims2();
                let l = node.value.data();
                let t = f64::from(*t);
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..n {
                            let p = f64::from(l[i * n + c]).exp();
                            ga[i * n + c] += (gr[c] - p * gsum) / t;
                        }
                    }
                }
            }
            Op::Diag(a) => {
                let n = val(*a).cols();
                if let Some(ga) = self.acc(adj, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i * n + i] += gi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let n = ad.len() as f64;
                let coeff = 2.0 * g[0] / n;
                if let Some(ga) = self.acc(adj, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += coeff * (f64::from(ad[i]) - f64::from(bd[i]));
                    }
                }
                if let Some(gb) = self.acc(adj, *b) {
                    for (i, x) in gb.iter_mut().enumerate() {
                        *x -= coeff * (f64::from(ad[i]) - f64::from(bd[i]));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(p).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn mse_gradient_hand_case() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = tape.mse(p, z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn detached_inputs_are_absent() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.add(p, c).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.contains(p));
        assert!(!g.contains(c));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn unreached_params_get_zeros() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let q = tape.param(Tensor::vector(vec![5.0]));
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(q).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let t = tape.tanh(p);
        assert!(matches!(tape.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // l = sum(p + p) => dl/dp = 2
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, -1.0, 0.5]));
        let s = tape.add(p, p).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
