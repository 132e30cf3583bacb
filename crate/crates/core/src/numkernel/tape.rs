//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in strict reverse order
//! of recording and accumulates adjoints into every node that depends on a
//! parameter. There is no fusion or reordering, so replaying the same
//! sequence of operations always produces bit-identical gradients.

use crate::error::{Error, Result};
use crate::numkernel::matrix::{softmax_in_place, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// 1 x k repeated to n x k.
    BroadcastRows(Var),
    /// n x 1 repeated to n x k.
    BroadcastCols(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Ln(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation. One tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, or zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    fn push(
        &mut self,
        value: Matrix,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        let rg = self.rg(a);
        self.push(value, op, rg, name)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.binary(a, b, v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.binary(a, b, v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.binary(a, b, v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.binary(a, b, v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        self.binary(a, b, v, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a), "add_scalar")
    }

    /// Repeats a `1 x k` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                left: src.shape(),
                right: (1, src.cols()),
            });
        }
        let mut out = Matrix::zeros(n, src.cols());
        for r in 0..n {
            out.row_mut(r).copy_from_slice(src.row(0));
        }
        self.unary(a, out, Op::BroadcastRows(a), "broadcast_rows")
    }

    /// Repeats an `n x 1` column `k` times.
    pub fn broadcast_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let src = self.value(a);
        if src.cols() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_cols",
                left: src.shape(),
                right: (src.rows(), 1),
            });
        }
        let mut out = Matrix::zeros(src.rows(), k);
        for r in 0..src.rows() {
            let v = src[(r, 0)];
            out.row_mut(r).fill(v);
        }
        self.unary(a, out, Op::BroadcastCols(a), "broadcast_cols")
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let b = self.broadcast_rows(row, n)?;
        self.add(a, b)
    }

    /// `a * row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let b = self.broadcast_rows(row, n)?;
        self.mul(a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a), "exp")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a), "sqrt")
    }

    /// Natural log of strictly positive entries.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Degenerate("ln of a non-positive entry".into()));
        }
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Ln(a), "ln")
    }

    /// `ln(clamp(a, floor, 1))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).log_clamped(floor);
        self.unary(a, v, Op::LogClamped(a, floor), "log_clamped")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        self.unary(a, v, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Stable `ln Σ_k exp(a_ik)` per row, as an `n x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = src
            .row_iter()
            .map(|r| {
                let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Matrix::from_vec(src.rows(), 1, data)?;
        self.unary(a, v, Op::LogSumExpRows(a), "logsumexp_rows")
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_sums();
        self.unary(a, v, Op::RowSum(a), "row_sum")
    }

    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).col_sums();
        self.unary(a, v, Op::ColSum(a), "col_sum")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(self.value(a).sum());
        self.unary(a, v, Op::SumAll(a), "sum")
    }

    /// Column means as a `1 x k` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let s = self.col_sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Rows of `a` scaled to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        if self
            .value(a)
            .row_iter()
            .any(|r| r.iter().all(|&x| x == 0.0))
        {
            return Err(Error::Degenerate("l2 normalization of a zero row".into()));
        }
        let k = self.value(a).cols();
        let sq = self.mul(a, a)?;
        let ss = self.row_sum(sq)?;
        let norm = self.sqrt(ss)?;
        let norm = self.broadcast_cols(norm, k)?;
        self.div(a, norm)
    }

    /// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }

        // Only parameter-dependent nodes carry meaningful adjoints.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let ga = g.matmul(&self.value(b).transpose())?;
                    self.accumulate(grads, a, ga)?;
                }
                if self.rg(b) {
                    let gb = self.value(a).transpose().matmul(g)?;
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.mul(self.value(b))?)?;
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.mul(self.value(a))?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                if self.rg(a) {
                    self.accumulate(grads, a, g.div(bv)?)?;
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.mul(out)?.div(bv)?.scale(-1.0);
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s))?,
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone())?,
            Op::BroadcastRows(a) => self.accumulate(grads, a, g.col_sums())?,
            Op::BroadcastCols(a) => self.accumulate(grads, a, g.row_sums())?,
            Op::Relu(a) => {
                let x = self.value(a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::Exp(a) => self.accumulate(grads, a, g.mul(out)?)?,
            Op::Sqrt(a) => {
                let ga = g.div(&out.scale(2.0))?;
                self.accumulate(grads, a, ga)?;
            }
            Op::Ln(a) => self.accumulate(grads, a, g.div(self.value(a))?)?,
            Op::LogClamped(a, floor) => {
                let x = self.value(a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *gv = if xv >= floor && xv <= 1.0 {
                        *gv / xv
                    } else {
                        0.0
                    };
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                // y ⊙ (g − Σ_j g_j y_j)
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in ga.row_mut(r).iter_mut().zip(y) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::LogSumExpRows(a) => {
                let mut ga = self.value(a).clone();
                for r in 0..ga.rows() {
                    let gr = g[(r, 0)];
                    let row = ga.row_mut(r);
                    softmax_in_place(row);
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::RowSum(a) => {
                let k = self.value(a).cols();
                let mut ga = Matrix::zeros(g.rows(), k);
                for r in 0..g.rows() {
                    ga.row_mut(r).fill(g[(r, 0)]);
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::ColSum(a) => {
                let n = self.value(a).rows();
                let mut ga = Matrix::zeros(n, g.cols());
                for r in 0..n {
                    ga.row_mut(r).copy_from_slice(g.row(0));
                }
                self.accumulate(grads, a, ga)?;
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.item()))?;
            }
        }
        Ok(())
    }
}
