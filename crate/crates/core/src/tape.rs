//! Reverse-mode automatic differentiation at primitive granularity.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Leaves are
//! either trainable parameters (which receive gradients) or constants (which
//! never do). [`Tape::backward`] walks the records in reverse and returns a
//! [`Gradients`] table; it borrows the tape immutably, so repeated calls on
//! the same tape yield identical results.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m×n] + [1×n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m×n] ⊙ [1×n]` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, true)
    }

    /// Leaf without a gradient handle.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    fn check_row(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).dims2(op)?;
        let (r, c) = self.value(b).dims2(op)?;
        if r != 1 || c != n {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok((m, n))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_row(a, row, "add_row")?;
        let mut out = self.value(a).clone().reshape(&[m, n])?;
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let g = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), g))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_row(a, row, "mul_row")?;
        let mut out = self.value(a).clone().reshape(&[m, n])?;
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let g = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::MulRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::silu);
        let g = self.needs(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.needs(a);
        self.push(v, Op::Sum(a), g)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        p.check_same(t, "mse")?;
        let n = p.len().max(1) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let g = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), g))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Param | Op::Constant => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Matmul(a, b) => {
                    if self.needs(a) {
                        let ga = gout.matmul_nt(self.value(b))?;
                        accumulate(&mut grads, a, ga)?;
                    }
                    if self.needs(b) {
                        let gb = self.value(a).matmul_tn(&gout)?;
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, gout.clone())?;
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, gout.clone())?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, gout.clone())?;
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, gout.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let ga = gout.zip_map(self.value(b), "mul", |g, y| g * y)?;
                        accumulate(&mut grads, a, ga)?;
                    }
                    if self.needs(b) {
                        let gb = gout.zip_map(self.value(a), "mul", |g, x| g * x)?;
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(row) {
                        let gr = gout.sum_rows()?.reshape(self.shape(row))?;
                        accumulate(&mut grads, row, gr)?;
                    }
                    if self.needs(a) {
                        let ga = gout.clone().reshape(self.shape(a))?;
                        accumulate(&mut grads, a, ga)?;
                    }
                }
                Op::MulRow(a, row) => {
                    let (m, n) = gout.dims2("mul_row")?;
                    if self.needs(row) {
                        let x = self.value(a);
                        let mut gr = vec![0.0; n];
                        for i in 0..m {
                            for ((acc, g), xv) in gr.iter_mut().zip(gout.row(i)).zip(x.row(i)) {
                                *acc += g * xv;
                            }
                        }
                        accumulate(&mut grads, row, Tensor::new(self.shape(row), gr)?)?;
                    }
                    if self.needs(a) {
                        let r = self.value(row).data();
                        let mut ga = gout.clone();
                        for i in 0..m {
                            for (g, rv) in ga.row_mut(i).iter_mut().zip(r) {
                                *g *= rv;
                            }
                        }
                        accumulate(&mut grads, a, ga.reshape(self.shape(a))?)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, gout.scale(s))?,
                Op::Silu(a) => {
                    let ga = gout.zip_map(self.value(a), "silu", |g, x| g * tensor::silu_grad(x))?;
                    accumulate(&mut grads, a, ga)?;
                }
                Op::Sum(a) => {
                    let g = gout.data()[0];
                    accumulate(&mut grads, a, Tensor::full(self.shape(a), g))?;
                }
                Op::Mse(p, t) => {
                    let g = gout.data()[0];
                    let pv = self.value(p);
                    let tv = self.value(t);
                    let k = 2.0 * g / pv.len().max(1) as f64;
                    let diff = pv.zip_map(tv, "mse", |a, b| k * (a - b))?;
                    if self.needs(t) {
                        accumulate(&mut grads, t, diff.scale(-1.0))?;
                    }
                    if self.needs(p) {
                        accumulate(&mut grads, p, diff)?;
                    }
                }
            }
        }

        // Only leaves keep their gradient; intermediates were consumed above.
        let mut leaf_grads = vec![None; self.nodes.len()];
        for (i, g) in grads.into_iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Param) {
                leaf_grads[i] = g;
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self
                .nodes
                .iter()
                .map(|n| matches!(n.op, Op::Param))
                .collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradient table returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<bool>,
}

impl Gradients {
    /// Gradient for a parameter leaf; zeros if it did not reach the loss.
    /// Returns `None` for constants and intermediates.
    pub fn of(&self, v: Var) -> Option<Tensor> {
        if !self.params.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0])),
        )
    }

    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        self.of(v)
            .ok_or_else(|| Error::Autodiff(format!("no gradient handle for node {}", v.0)))
    }
}
