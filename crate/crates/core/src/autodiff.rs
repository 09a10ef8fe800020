//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so the tape is
//! already in topological order and the backward pass is a single reverse
//! sweep. Leaves are either parameters (gradients are reported) or constants
//! (gradients are never materialized).

use crate::error::{Error, Result};
use crate::nn::{self, BnSaved, Mode, RunningStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    ConcatCols { a: Var, b: Var, a_cols: usize },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        saved: BnSaved,
    },
    Scale(Var, f32),
    SumSquares(Var),
    MeanRowSqError { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Full-precision value for scalar reductions.
    exact: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch statistics produced by a train-mode batch norm, to be folded into
/// the layer's running statistics by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub batch: usize,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`, at full precision when `v` is a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = nn::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::Shape(format!(
                "concat: row counts {ra} and {rb} differ"
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let y = Tensor::new(vec![ra, ca + cb], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::ConcatCols { a, b, a_cols: ca }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = nn::relu(self.value(x));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (y, saved) = nn::batchnorm_kernel(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        let batch = saved.batch.clone().map(|(mean, var)| BatchStats {
            mean,
            var,
            batch: y.shape()[0],
        });
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                saved,
            },
            needs,
        );
        Ok((v, batch))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let y = self.value(x).scale(s);
        let exact = self.nodes[x.0].exact.map(|e| e * s as f64);
        let needs = self.needs(x);
        let v = self.push(y, Op::Scale(x, s), needs);
        self.nodes[v.0].exact = exact;
        v
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| (v as f64).powi(2)).sum();
        let needs = self.needs(x);
        let v = self.push(Tensor::scalar(s as f32), Op::SumSquares(x), needs);
        self.nodes[v.0].exact = Some(s);
        v
    }

    /// Mean over rows of the squared L2 distance between `pred` and `target`.
    pub fn mean_row_sq_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "loss: prediction {:?} and target {:?} differ",
                p.shape(),
                t.shape()
            )));
        }
        let (rows, _) = p.dims2()?;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / rows as f64;
        let needs = self.needs(pred) || self.needs(target);
        let v = self.push(
            Tensor::scalar(s as f32),
            Op::MeanRowSqError { pred, target },
            needs,
        );
        self.nodes[v.0].exact = Some(s);
        Ok(v)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let l = self.value(loss);
        if l.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                l.shape()
            )));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::numeric(0, "non-finite loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    if self.needs(*x) {
                        let gx = g.matmul(&self.value(*w).transpose()?)?;
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let gw = self.value(*x).transpose()?.matmul(&g)?;
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, column_sums(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::ConcatCols { a, b, a_cols } => {
                    let (rows, cols) = g.dims2()?;
                    let b_cols = cols - a_cols;
                    if self.needs(*a) {
                        let mut ga = Vec::with_capacity(rows * a_cols);
                        for i in 0..rows {
                            ga.extend_from_slice(&g.row(i)[..*a_cols]);
                        }
                        accumulate(&mut grads, *a, Tensor::new(vec![rows, *a_cols], ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = Vec::with_capacity(rows * b_cols);
                        for i in 0..rows {
                            gb.extend_from_slice(&g.row(i)[*a_cols..]);
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![rows, b_cols], gb)?);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mode,
                    saved,
                } => {
                    let (n, f) = g.dims2()?;
                    let gd = g.data();
                    let xhat = saved.xhat.data();
                    let mut sum_g = vec![0.0f64; f];
                    let mut sum_gx = vec![0.0f64; f];
                    for i in 0..n {
                        for j in 0..f {
                            let gij = gd[i * f + j] as f64;
                            sum_g[j] += gij;
                            sum_gx[j] += gij * xhat[i * f + j] as f64;
                        }
                    }
                    if self.needs(*gamma) {
                        let t = Tensor::vector(sum_gx.iter().map(|&v| v as f32).collect());
                        accumulate(&mut grads, *gamma, t);
                    }
                    if self.needs(*beta) {
                        let t = Tensor::vector(sum_g.iter().map(|&v| v as f32).collect());
                        accumulate(&mut grads, *beta, t);
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma).data();
                        let mut gx = vec![0.0f32; n * f];
                        for i in 0..n {
                            for j in 0..f {
                                let k = gam[j] as f64 * saved.inv_std[j] as f64;
                                let gij = gd[i * f + j] as f64;
                                gx[i * f + j] = match mode {
                                    Mode::Eval => (k * gij) as f32,
                                    Mode::Train => {
                                        let nf = n as f64;
                                        (k / nf
                                            * (nf * gij
                                                - sum_g[j]
                                                - xhat[i * f + j] as f64 * sum_gx[j]))
                                            as f32
                                    }
                                };
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(vec![n, f], gx)?);
                    }
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.scale(*s));
                }
                Op::SumSquares(x) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads, *x, self.value(*x).scale(2.0 * gs));
                }
                Op::MeanRowSqError { pred, target } => {
                    let gs = g.data()[0];
                    let p = self.value(*pred);
                    let rows = p.dims2()?.0 as f32;
                    let diff = p.sub(self.value(*target))?;
                    let gp = diff.scale(2.0 * gs / rows);
                    if self.needs(*target) {
                        accumulate(&mut grads, *target, gp.scale(-1.0));
                    }
                    if self.needs(*pred) {
                        accumulate(&mut grads, *pred, gp);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (_, c) = g.dims2()?;
    let mut acc = vec![0.0f64; c];
    for row in g.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Ok(Tensor::vector(acc.iter().map(|&v| v as f32).collect()))
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when the loss does not
    /// depend on `v`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
