//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are only
//! ever appended, and [`Tape::backward`] walks them in strict reverse
//! creation order, so a node's cotangent is complete before its backward
//! rule runs. Tapes are rebuilt for every forward pass; parameters enter as
//! leaves via [`Tape::leaf`].
//!
//! ```
//! use halvingpool::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::column(&[1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{contract, Error, Result};
use crate::matrix::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise functions available through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Tanh,
    /// Subgradient at exactly zero is taken as zero.
    Relu,
    AddConst(f64),
    Scale(f64),
}

impl Elementwise {
    fn apply(self, x: f64) -> f64 {
        match self {
            Elementwise::Tanh => x.tanh(),
            Elementwise::Relu => x.max(0.0),
            Elementwise::AddConst(c) => x + c,
            Elementwise::Scale(s) => x * s,
        }
    }
}

/// Reduction used by [`Tape::window_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Unary(Var, Elementwise),
    RowSoftmax(Var),
    Sum(Var),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { src: Var, indices: Vec<usize> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    PairSoftmax { scores: Var, tau: f64 },
    WindowPool {
        src: Var,
        mode: WindowMode,
        window: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Single-owner record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Cotangent of `var`; zero when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Cotangent of `var` if the loss reached it.
    pub fn get_ref(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Distance of the recorded pass from the nearest kink: the smallest
    /// `|x|` fed to a ReLU and the smallest gap between the winner and the
    /// runner-up of any max window. Infinite when there are none.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary(src, Elementwise::Relu) => {
                    for &x in self.value(*src).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::WindowPool {
                    src,
                    mode: WindowMode::Max,
                    window,
                    stride,
                    argmax,
                } => {
                    let x = self.value(*src);
                    let (n, d) = x.shape();
                    for (slot, &best) in argmax.iter().enumerate() {
                        let (w, j) = (slot / d, slot % d);
                        let start = w * stride;
                        for r in start..(start + window).min(n) {
                            if r != best {
                                margin = margin.min(x[(best, j)] - x[(r, j)]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = gemm(self.value(a), false, self.value(b), false)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                left: x.shape(),
                right: c.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            let s = c.data()[i];
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        Ok(self.push(value, Op::MulCol(a, col)))
    }

    pub fn elementwise(&mut self, a: Var, f: Elementwise) -> Var {
        let value = self.value(a).map(|x| f.apply(x));
        self.push(value, Op::Unary(a, f))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(a, Elementwise::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(a, Elementwise::Relu)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.elementwise(a, Elementwise::Scale(s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.elementwise(a, Elementwise::AddConst(c))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).row_softmax();
        self.push(value, Op::RowSoftmax(a))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(contract(format!(
                "row slice {start}..{} out of {} rows",
                start + len,
                x.rows()
            )));
        }
        let value = x.slice_rows(start, len);
        Ok(self.push(value, Op::SliceRows { src: a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(contract(format!(
                "column slice {start}..{} out of {} columns",
                start + len,
                x.cols()
            )));
        }
        let mut value = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            value.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        Ok(self.push(value, Op::SliceCols { src: a, start }))
    }

    /// Stacks the parts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: x.shape(),
                });
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let value = Matrix::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Places the parts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(*first).shape(),
                    right: x.shape(),
                });
            }
            cols += x.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Row `r` of the result is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(contract(format!("row index {bad} out of {} rows", x.rows())));
        }
        let value = x.gather_rows(indices);
        Ok(self.push(
            value,
            Op::GatherRows {
                src: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-row normalisation followed by a learned gain and bias (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let input = self.value(x);
        let cols = input.cols();
        for p in [gain, bias] {
            let s = self.shape(p);
            if s != (1, cols) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: input.shape(),
                    right: s,
                });
            }
        }
        let mut normalized = input.clone();
        let mut inv_std = Vec::with_capacity(input.rows());
        for i in 0..input.rows() {
            let row = normalized.row_mut(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = normalized.clone();
        for i in 0..value.rows() {
            for ((v, gv), bv) in value.row_mut(i).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Mean token cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.rows() {
            return Err(contract(format!(
                "{} targets for {} logit rows",
                targets.len(),
                z.rows()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= z.cols()) {
            return Err(contract(format!("token id {bad} outside vocabulary of {}", z.cols())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(contract("cross-entropy without any target"));
        }
        let probs = z.row_softmax();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = z.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let value = Matrix::scalar(loss / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Peaked softmax over the pairs `(i, 2m - 1 - i)` of a `2m x 1` score
    /// column. Row `i` of the `m x 2` result holds the weights of both
    /// members of pair `i`.
    pub fn pair_softmax(&mut self, scores: Var, tau: f64) -> Result<Var> {
        let v = self.value(scores);
        if v.cols() != 1 || v.rows() % 2 != 0 {
            return Err(contract(format!(
                "pair softmax needs an even score column, got {:?}",
                v.shape()
            )));
        }
        let n = v.rows();
        let m = n / 2;
        let mut value = Matrix::zeros(m, 2);
        for i in 0..m {
            let (wa, wb) = crate::topk::peaked_softmax_pair(v.data()[i], v.data()[n - 1 - i], tau);
            value[(i, 0)] = wa;
            value[(i, 1)] = wb;
        }
        Ok(self.push(value, Op::PairSoftmax { scores, tau }))
    }

    /// Column-wise mean or max over windows of rows.
    pub fn window_pool(&mut self, a: Var, mode: WindowMode, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(contract("window and stride must be positive"));
        }
        let x = self.value(a);
        let (n, d) = x.shape();
        let out_rows = n.div_ceil(stride);
        let mut value = Matrix::zeros(out_rows, d);
        let mut argmax = Vec::new();
        for w in 0..out_rows {
            let start = w * stride;
            let end = (start + window).min(n);
            for j in 0..d {
                match mode {
                    WindowMode::Mean => {
                        let s: f64 = (start..end).map(|r| x[(r, j)]).sum();
                        value[(w, j)] = s / (end - start) as f64;
                    }
                    WindowMode::Max => {
                        let mut best = start;
                        for r in start + 1..end {
                            if x[(r, j)] > x[(best, j)] {
                                best = r;
                            }
                        }
                        value[(w, j)] = x[(best, j)];
                        argmax.push(best);
                    }
                }
            }
        }
        Ok(self.push(
            value,
            Op::WindowPool {
                src: a,
                mode,
                window,
                stride,
                argmax,
            },
        ))
    }

    /// Cotangents of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backward_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, gemm(g, false, val(*b), true)?);
                accumulate(grads, *b, gemm(val(*a), true, g, false)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(val(*b))?);
                accumulate(grads, *b, g.hadamard(val(*a))?);
            }
            Op::AddRow(a, row) => {
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (acc, x) in gr.data_mut().iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                let (x, c) = (val(*a), val(*col));
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(c.rows(), 1);
                for i in 0..g.rows() {
                    let s = c.data()[i];
                    gc.data_mut()[i] = g.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
                    for v in ga.row_mut(i) {
                        *v *= s;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::Unary(a, f) => {
                let ga = match f {
                    Elementwise::Tanh => g.zip_map(&node.value, "tanh", |gi, y| gi * (1.0 - y * y))?,
                    Elementwise::Relu => {
                        g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?
                    }
                    Elementwise::AddConst(_) => g.clone(),
                    Elementwise::Scale(s) => g.scale(*s),
                };
                accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::SliceRows { src, start } => {
                let (r, c) = val(*src).shape();
                let mut gs = Matrix::zeros(r, c);
                gs.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *src, gs);
            }
            Op::SliceCols { src, start } => {
                let (r, c) = val(*src).shape();
                let mut gs = Matrix::zeros(r, c);
                for i in 0..r {
                    gs.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *src, gs);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    accumulate(grads, p, g.slice_rows(offset, rows));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut gp = Matrix::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    accumulate(grads, p, gp);
                    offset += c;
                }
            }
            Op::GatherRows { src, indices } => {
                let (r, c) = val(*src).shape();
                let mut gs = Matrix::zeros(r, c);
                for (out_row, &i) in indices.iter().enumerate() {
                    for (acc, x) in gs.row_mut(i).iter_mut().zip(g.row(out_row)) {
                        *acc += x;
                    }
                }
                accumulate(grads, *src, gs);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = val(*gain);
                let (r, c) = normalized.shape();
                let mut ggain = Matrix::zeros(1, c);
                let mut gbias = Matrix::zeros(1, c);
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    let xh = normalized.row(i);
                    let gi = g.row(i);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        ggain.data_mut()[j] += gi[j] * xh[j];
                        gbias.data_mut()[j] += gi[j];
                        let d = gi[j] * gv.data()[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    let s = inv_std[i] / c as f64;
                    for j in 0..c {
                        let d = gi[j] * gv.data()[j];
                        gx[(i, j)] = s * (c as f64 * d - sum_d - xh[j] * sum_dx);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, ggain);
                accumulate(grads, *bias, gbias);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let count = targets.iter().flatten().count() as f64;
                let scale = g.item() / count;
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *o = p * scale;
                        }
                        gl[(i, t)] -= scale;
                    }
                }
                accumulate(grads, *logits, gl);
            }
            Op::PairSoftmax { scores, tau } => {
                let w = &node.value;
                let n = val(*scores).rows();
                let mut gs = Matrix::zeros(n, 1);
                for i in 0..w.rows() {
                    let (wa, wb) = (w[(i, 0)], w[(i, 1)]);
                    let c = tau * wa * wb * (g[(i, 0)] - g[(i, 1)]);
                    gs.data_mut()[i] += c;
                    gs.data_mut()[n - 1 - i] -= c;
                }
                accumulate(grads, *scores, gs);
            }
            Op::WindowPool {
                src,
                mode,
                window,
                stride,
                argmax,
            } => {
                let (n, d) = val(*src).shape();
                let mut gs = Matrix::zeros(n, d);
                for w in 0..g.rows() {
                    let start = w * stride;
                    let end = (start + window).min(n);
                    for j in 0..d {
                        match mode {
                            WindowMode::Mean => {
                                let share = g[(w, j)] / (end - start) as f64;
                                for r in start..end {
                                    gs[(r, j)] += share;
                                }
                            }
                            WindowMode::Max => gs[(argmax[w * d + j], j)] += g[(w, j)],
                        }
                    }
                }
                accumulate(grads, *src, gs);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}
