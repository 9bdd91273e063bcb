//! Reverse-mode differentiation tape.
//!
//! Every model forward pass is expressed as a sequence of tape operations, so
//! the same code path yields plain outputs and exact gradients. Nodes are
//! appended in evaluation order; a node's inputs always precede it.
//!
//! Piecewise operations (ReLU, thresholded masks, zero-variance and zero-norm
//! guards) fold the branch they took into a running [`Tape::branch_signature`].
//! Finite-difference checkers compare signatures to detect when a probe step
//! crossed a kink.

use crate::error::{Error, Result};
use crate::tensor::{self, matmul, Tensor};

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
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleCols(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    StandardizeRows { x: Var, sd: Vec<Option<f64>> },
    RowSum(Var),
    Powf(Var, f64),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ColumnStandardize { x: Var, floor: f64 },
    PairwiseDistance(Var),
    RowUnit { x: Var, norms: Vec<f64>, floor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    branch: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of every piecewise branch taken so far.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    pub fn note_branches(&mut self, bits: impl IntoIterator<Item = bool>) {
        for b in bits {
            self.branch = (self.branch ^ (b as u64 + 1)).wrapping_mul(FNV_PRIME);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    fn check_matrix(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::dim(op, t.shape(), &[]));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a[m×n] + b[n]`, adding `b` to every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "add_bias")?;
        if self.value(b).numel() != n {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let av = self.value(a);
        let v = Tensor::from_fn(&[m, n], |i| av.at(i[0], i[1]) + bv[i[1]]);
        Ok(self.push(v, Op::AddBias(a, b)))
    }

    /// `out_ij = a_ij · v_j`.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "scale_cols")?;
        if self.value(v).numel() != n {
            return Err(Error::dim("scale_cols", self.shape(a), self.shape(v)));
        }
        let vv = self.value(v).data();
        let av = self.value(a);
        let out = Tensor::from_fn(&[m, n], |i| av.at(i[0], i[1]) * vv[i[1]]);
        Ok(self.push(out, Op::ScaleCols(a, v)))
    }

    /// `out_ij = a_ij · v_i`.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "scale_rows")?;
        if self.value(v).numel() != m {
            return Err(Error::dim("scale_rows", self.shape(a), self.shape(v)));
        }
        let vv = self.value(v).data();
        let av = self.value(a);
        let out = Tensor::from_fn(&[m, n], |i| av.at(i[0], i[1]) * vv[i[0]]);
        Ok(self.push(out, Op::ScaleRows(a, v)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.map(|z| z.max(0.0));
        let bits: Vec<bool> = x.data().iter().map(|&z| z > 0.0).collect();
        self.note_branches(bits);
        self.push(v, Op::Relu(a))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_matrix(a, "softmax_rows")?;
        let v = tensor::softmax(self.value(a), 1)?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    /// Per-row zero-mean unit-variance standardization; rows with variance
    /// below `eps` become zero.
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.check_matrix(a, "standardize_rows")?;
        let mut v = self.value(a).clone();
        let sd: Vec<Option<f64>> = v
            .data_mut()
            .chunks_mut(n)
            .map(|row| tensor::standardize_in_place(row, eps))
            .collect();
        self.note_branches(sd.iter().map(Option::is_some));
        Ok(self.push(v, Op::StandardizeRows { x: a, sd }))
    }

    /// Sum of each row of a matrix, shape `[m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.check_matrix(a, "row_sum")?;
        let x = self.value(a);
        let data = (0..m).map(|i| x.row(i).iter().sum()).collect();
        let v = Tensor::new(&[m], data)?;
        Ok(self.push(v, Op::RowSum(a)))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let (m, _) = self.check_matrix(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != m {
                return Err(Error::dim("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(&[m, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { x: a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let x = self.value(a);
        let v = Tensor::from_fn(&[m, len], |i| x.at(i[0], start + i[1]));
        Ok(self.push(v, Op::SliceCols { x: a, start }))
    }

    /// Divides each column by `sqrt(var + floor)`, where `var` is the
    /// population variance of that column over the rows.
    pub fn column_standardize(&mut self, a: Var, floor: f64) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "column_standardize")?;
        let x = self.value(a);
        let (_, var) = column_moments(x);
        let v = Tensor::from_fn(&[m, n], |i| x.at(i[0], i[1]) / (var[i[1]] + floor).sqrt());
        Ok(self.push(v, Op::ColumnStandardize { x: a, floor }))
    }

    /// Euclidean distances between all pairs of rows, `[m×m]`.
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "pairwise_distance")?;
        let x = self.value(a);
        let mut v = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..n {
                    let d = x.at(i, k) - x.at(j, k);
                    s += d * d;
                }
                v.set(i, j, s.sqrt());
            }
        }
        let bits: Vec<bool> = v.data().iter().map(|&d| d > 0.0).collect();
        self.note_branches(bits);
        Ok(self.push(v, Op::PairwiseDistance(a)))
    }

    /// Scales every row to unit length; rows with norm below `floor` map to
    /// zero.
    pub fn row_unit(&mut self, a: Var, floor: f64) -> Result<Var> {
        let (m, _) = self.check_matrix(a, "row_unit")?;
        let mut v = self.value(a).clone();
        let n = v.cols();
        let norms: Vec<f64> = (0..m)
            .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        for (row, &nr) in v.data_mut().chunks_mut(n).zip(&norms) {
            if nr < floor {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= nr);
            }
        }
        self.note_branches(norms.iter().map(|&nr| nr >= floor));
        Ok(self.push(v, Op::RowUnit { x: a, norms, floor }))
    }

    /// `x·w + b` with `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.standardize_rows(x, eps)?;
        let s = self.scale_cols(n, gamma)?;
        self.add_bias(s, beta)
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for id in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.propagate(id, g, lower)?;
        }

        Ok(Gradients(
            grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
                .collect(),
        ))
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let ga = matmul(g, &val(*b).transpose()?)?;
                let gb = matmul(&val(*a).transpose()?, g)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape())?),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?);
                accumulate(grads, *b, g.mul(val(*a))?);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::AddBias(a, b) => {
                accumulate(grads, *a, g.clone());
                let (m, n) = (g.rows(), g.cols());
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for (s, x) in gb.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                accumulate(grads, *b, Tensor::new(val(*b).shape(), gb)?);
            }
            Op::ScaleCols(a, v) => {
                let (av, vv) = (val(*a), val(*v).data());
                let (m, n) = (g.rows(), g.cols());
                let ga = Tensor::from_fn(&[m, n], |i| g.at(i[0], i[1]) * vv[i[1]]);
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gv[j] += g.at(i, j) * av.at(i, j);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *v, Tensor::new(val(*v).shape(), gv)?);
            }
            Op::ScaleRows(a, v) => {
                let (av, vv) = (val(*a), val(*v).data());
                let (m, n) = (g.rows(), g.cols());
                let ga = Tensor::from_fn(&[m, n], |i| g.at(i[0], i[1]) * vv[i[0]]);
                let gv = (0..m)
                    .map(|i| (0..n).map(|j| g.at(i, j) * av.at(i, j)).sum())
                    .collect();
                accumulate(grads, *a, ga);
                accumulate(grads, *v, Tensor::new(val(*v).shape(), gv)?);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = g.clone();
                for (i, row) in ga.data_mut().chunks_mut(n).enumerate() {
                    let y = out.row(i);
                    let dot: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (r, yv) in row.iter_mut().zip(y) {
                        *r = yv * (*r - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::StandardizeRows { x, sd } => {
                let n = out.cols();
                let nf = n as f64;
                let mut ga = g.clone();
                for (i, row) in ga.data_mut().chunks_mut(n).enumerate() {
                    match sd[i] {
                        None => row.iter_mut().for_each(|r| *r = 0.0),
                        Some(s) => {
                            let xh = out.row(i);
                            let mean_g = row.iter().sum::<f64>() / nf;
                            let mean_gx =
                                row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / nf;
                            for (r, h) in row.iter_mut().zip(xh) {
                                *r = (*r - mean_g - h * mean_gx) / s;
                            }
                        }
                    }
                }
                accumulate(grads, *x, ga);
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let gd = g.data();
                let ga = Tensor::from_fn(av.shape(), |i| gd[i[0]]);
                accumulate(grads, *a, ga);
            }
            Op::Powf(a, p) => {
                let ga = g.zip_map(val(*a), "powf", |gi, x| gi * p * x.powf(p - 1.0))?;
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gs));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).rows();
                    accumulate(grads, p, g.slice_rows(start, len)?);
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pv = val(p);
                    let gp = Tensor::from_fn(pv.shape(), |i| g.at(i[0], start + i[1]));
                    start += pv.cols();
                    accumulate(grads, p, gp);
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let len = g.rows();
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    if i[0] >= *start && i[0] < start + len {
                        g.at(i[0] - start, i[1])
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let len = g.cols();
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    if i[1] >= *start && i[1] < start + len {
                        g.at(i[0], i[1] - start)
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, gx);
            }
            Op::ColumnStandardize { x, floor } => {
                // s_ik = r_ik·u_k with u_k = (v_k + floor)^(-1/2), v_k the
                // population variance of column k.
                let r = val(*x);
                let (m, n) = (r.rows(), r.cols());
                let (mean, var) = column_moments(r);
                let mut coef = vec![0.0; n];
                for (k, c) in coef.iter_mut().enumerate() {
                    let gr: f64 = (0..m).map(|i| g.at(i, k) * r.at(i, k)).sum();
                    let dv = -0.5 * (var[k] + floor).powf(-1.5);
                    *c = gr * dv * 2.0 / m as f64;
                }
                let gx = Tensor::from_fn(&[m, n], |i| {
                    let (a, k) = (i[0], i[1]);
                    g.at(a, k) / (var[k] + floor).sqrt() + coef[k] * (r.at(a, k) - mean[k])
                });
                accumulate(grads, *x, gx);
            }
            Op::PairwiseDistance(a) => {
                let s = val(*a);
                let (m, n) = (s.rows(), s.cols());
                let mut gs = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..m {
                        let d = out.at(i, j);
                        if d <= 0.0 {
                            continue;
                        }
                        let w = (g.at(i, j) + g.at(j, i)) / d;
                        for k in 0..n {
                            let cur = gs.at(i, k);
                            gs.set(i, k, cur + w * (s.at(i, k) - s.at(j, k)));
                        }
                    }
                }
                accumulate(grads, *a, gs);
            }
            Op::RowUnit { x, norms, floor } => {
                let n = out.cols();
                let mut gx = g.clone();
                for (i, row) in gx.data_mut().chunks_mut(n).enumerate() {
                    if norms[i] < *floor {
                        row.iter_mut().for_each(|r| *r = 0.0);
                        continue;
                    }
                    let u = out.row(i);
                    let dot: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (r, uv) in row.iter_mut().zip(u) {
                        *r = (*r - uv * dot) / norms[i];
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (k, mu) in mean.iter_mut().enumerate() {
            *mu += x.at(i, k);
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= m as f64);
    let mut var = vec![0.0; n];
    for i in 0..m {
        for (k, v) in var.iter_mut().enumerate() {
            let d = x.at(i, k) - mean[k];
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    (mean, var)
}

/// Per-node gradients from [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Tensor>);

impl Gradients {
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.0[v.0]
    }
}

/// Builds a fresh tape, runs `f` on it and returns the value of the node it
/// produces.
pub fn evaluate(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.nodes.swap_remove(out.0).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tensor::finite_diff_grad;

    fn rand_t(shape: &[usize], label: &str) -> Tensor {
        SeedStream::new(11).uniform(label, shape, -1.0, 1.0)
    }

    /// Checks d/dx sum(w ⊙ build(x)) against central differences.
    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Result<Var>) {
        let probe_shape = evaluate(|t| {
            let v = t.leaf(x.clone());
            build(t, v)
        })
        .unwrap()
        .shape()
        .to_vec();
        let w = rand_t(&probe_shape, "probe");
        let loss = |xv: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(xv.clone());
            let y = build(&mut t, v).unwrap();
            let wv = t.leaf(w.clone());
            let p = t.mul(y, wv).unwrap();
            let s = t.sum(p);
            (t, v, s)
        };
        let (tape, v, s) = loss(&x);
        let grads = tape.backward(s).unwrap();
        let fd = finite_diff_grad(
            |xv| {
                let (t, _, s) = loss(xv);
                t.value(s).data()[0]
            },
            &x,
            1e-6,
        );
        let err = grads.wrt(v).max_abs_diff(&fd);
        assert!(err < 1e-7, "gradient mismatch {err}");
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let g = t.backward(x).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(rand_t(&[1, 5], "x"));
        let s = t.softmax_rows(x).unwrap();
        let total = t.sum(s);
        let g = t.backward(total).unwrap();
        assert!(g.wrt(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_nodes_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(rand_t(&[2, 2], "x"));
        let unused = t.leaf(rand_t(&[3], "u"));
        let y = t.sum(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused), &Tensor::zeros(&[3]));
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let c = rand_t(&[3, 4], "c");
        check(rand_t(&[3, 4], "x"), |t, x| {
            let cv = t.leaf(c.clone());
            let a = t.add(x, cv)?;
            let b = t.mul(a, x)?;
            let d = t.sub(b, cv)?;
            Ok(t.scale(d, 0.7))
        });
        check(rand_t(&[3, 4], "x"), |t, x| {
            let tr = t.transpose(x)?;
            let r = t.reshape(tr, &[2, 6])?;
            let r = t.reshape(r, &[4, 3])?;
            t.matmul(x, r)
        });
        check(rand_t(&[3, 4], "x"), |t, x| {
            let a = t.slice_cols(x, 1, 2)?;
            let b = t.slice_rows(x, 0, 2)?;
            let bt = t.transpose(b)?;
            let c = t.concat_cols(&[a, x])?;
            let d = t.concat_rows(&[bt, bt])?;
            let e = t.reshape(d, &[2, 8])?;
            let f = t.relu(e);
            let cr = t.slice_rows(c, 1, 2)?;
            let cc = t.concat_cols(&[cr, cr])?;
            let cs = t.slice_cols(cc, 0, 8)?;
            t.mul(cs, f)
        });
    }

    #[test]
    fn matmul_and_broadcast_ops() {
        let w = rand_t(&[4, 5], "w");
        let b = rand_t(&[5], "b");
        check(rand_t(&[3, 4], "x"), |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            t.linear(x, wv, bv)
        });
        check(rand_t(&[4, 5], "x"), |t, w| {
            let x = t.leaf(rand_t(&[3, 4], "xx"));
            let bv = t.leaf(b.clone());
            t.linear(x, w, bv)
        });
        check(rand_t(&[5], "x"), |t, bv| {
            let x = t.leaf(rand_t(&[3, 4], "xx"));
            let wv = t.leaf(w.clone());
            t.linear(x, wv, bv)
        });
        check(rand_t(&[4], "v"), |t, v| {
            let a = t.leaf(rand_t(&[3, 4], "a"));
            let r = t.leaf(rand_t(&[3], "r"));
            let s = t.scale_cols(a, v)?;
            t.scale_rows(s, r)
        });
        check(rand_t(&[3], "v"), |t, v| {
            let a = t.leaf(rand_t(&[3, 4], "a"));
            t.scale_rows(a, v)
        });
    }

    #[test]
    fn normalization_ops() {
        check(rand_t(&[4, 6], "x"), |t, x| t.softmax_rows(x));
        check(rand_t(&[4, 6], "x"), |t, x| t.standardize_rows(x, 1e-5));
        check(rand_t(&[4, 6], "x"), |t, x| t.row_unit(x, 1e-12));
        check(rand_t(&[4, 6], "x"), |t, x| t.column_standardize(x, 1e-8));
        check(rand_t(&[5, 3], "x"), |t, x| t.pairwise_distance(x));
        check(rand_t(&[4, 6], "x").map(|v| v + 2.0), |t, x| {
            let s = t.row_sum(x)?;
            let p = t.powf(s, -0.5);
            t.scale_rows(x, p)
        });
        let g = rand_t(&[6], "g");
        let b = rand_t(&[6], "b");
        check(rand_t(&[4, 6], "x"), |t, x| {
            let gv = t.leaf(g.clone());
            let bv = t.leaf(b.clone());
            t.layer_norm(x, gv, bv, 1e-5)
        });
    }

    #[test]
    fn branch_signature_tracks_relu_pattern() {
        let sig = |v: f64| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(&[2], vec![v, 1.0]).unwrap());
            t.relu(x);
            t.branch_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
