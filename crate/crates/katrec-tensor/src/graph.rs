//! Reverse-mode automatic differentiation over a flat computation graph.
//!
//! Nodes are appended eagerly, so insertion order is a topological order and
//! the backward pass is a single reverse sweep that visits each node once.

use crate::ops;
use crate::{Tensor, TensorError};
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { trans_b: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    ConcatCols,
    SoftmaxRows,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Gelu,
    Softplus,
    Log,
    ClampMin(f64),
    LayerNorm,
    Dropout { keep: Vec<bool>, scale: f64 },
    SumAll,
    MeanAll,
    RowSums,
    RowMeans,
    SqL2,
    Gather { indices: Vec<usize> },
    Reshape { from: (usize, usize) },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or a zero tensor of the given shape if the loss
    /// did not depend on it.
    pub fn get_or_zeros(&self, var: Var, rows: usize, cols: usize) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// Computation graph. Forward values are computed at node-creation time.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite forward value from {op:?}",
            op = op_name(&op)
        );
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf; gradients are not accumulated through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::matmul(self.value(a), self.value(b), false)?;
        Ok(self.push(Op::MatMul { trans_b: false }, vec![a.0, b.0], v))
    }

    /// `a @ b^T`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::matmul(self.value(a), self.value(b), true)?;
        Ok(self.push(Op::MatMul { trans_b: true }, vec![a.0, b.0], v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a.0, b.0], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub, vec![a.0, b.0], v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a.0, b.0], v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = ops::scale(self.value(a), c);
        self.push(Op::Scale(c), vec![a.0], v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCols, vec![a.0, b.0], v))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = ops::softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows, vec![a.0], v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = ops::tanh(self.value(a));
        self.push(Op::Tanh, vec![a.0], v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::sigmoid(self.value(a));
        self.push(Op::Sigmoid, vec![a.0], v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = ops::leaky_relu(self.value(a), slope);
        self.push(Op::LeakyRelu(slope), vec![a.0], v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = ops::gelu(self.value(a));
        self.push(Op::Gelu, vec![a.0], v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = ops::softplus(self.value(a));
        self.push(Op::Softplus, vec![a.0], v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = ops::log(self.value(a));
        self.push(Op::Log, vec![a.0], v)
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let v = ops::clamp_min(self.value(a), min);
        self.push(Op::ClampMin(min), vec![a.0], v)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let v = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(Op::LayerNorm, vec![x.0, gamma.0, beta.0], v))
    }

    /// Inverted dropout. Identity when `train` is false or `rate == 0`; the
    /// keep mask is drawn from `rng` at node creation and reused in backward.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        let value = self.value(a);
        let keep: Vec<bool> = (0..value.numel()).map(|_| rng.gen::<f64>() >= rate).collect();
        let scale = 1.0 / (1.0 - rate);
        let mut out = value.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(keep.iter()) {
            *v = if k { *v * scale } else { 0.0 };
        }
        self.push(Op::Dropout { keep, scale }, vec![a.0], out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ops::sum_all(self.value(a));
        self.push(Op::SumAll, vec![a.0], v)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = ops::mean_all(self.value(a));
        self.push(Op::MeanAll, vec![a.0], v)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = ops::row_sums(self.value(a));
        self.push(Op::RowSums, vec![a.0], v)
    }

    pub fn row_means(&mut self, a: Var) -> Var {
        let v = ops::row_means(self.value(a));
        self.push(Op::RowMeans, vec![a.0], v)
    }

    pub fn sq_l2(&mut self, a: Var) -> Var {
        let v = ops::sq_l2(self.value(a));
        self.push(Op::SqL2, vec![a.0], v)
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let v = ops::gather_rows(self.value(table), indices)?;
        Ok(self.push(
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![table.0],
            v,
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let from = self.value(a).shape();
        let v = ops::reshape(self.value(a), rows, cols)?;
        Ok(self.push(Op::Reshape { from }, vec![a.0], v))
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; nodes the
    /// loss does not depend on (or constants) have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                self.accumulate_inputs(idx, &out_grad, &mut grads)?;
            }
            grads[idx] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        d: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let mut push = |k: usize, g: Tensor, grads: &mut [Option<Tensor>]| {
            let target = node.inputs[k];
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { trans_b } => {
                let (a, b) = (input(0), input(1));
                if *trans_b {
                    // c = a b^T: da = d b, db = d^T a
                    push(0, ops::matmul(d, b, false)?, grads);
                    push(1, ops::matmul_ta(d, a)?, grads);
                } else {
                    // c = a b: da = d b^T, db = a^T d
                    push(0, ops::matmul(d, b, true)?, grads);
                    push(1, ops::matmul_ta(a, d)?, grads);
                }
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                push(0, d.clone(), grads);
                let b = input(1);
                if b.same_shape(d) {
                    push(1, ops::scale(d, sign), grads);
                } else {
                    // Row-broadcast rhs: sum the gradient over rows.
                    let mut g = Tensor::zeros(1, d.cols());
                    for r in 0..d.rows() {
                        for (acc, v) in g.row_mut(0).iter_mut().zip(self_row(d, r)) {
                            *acc += sign * v;
                        }
                    }
                    push(1, g, grads);
                }
            }
            Op::Mul => {
                push(0, ops::mul(d, input(1))?, grads);
                push(1, ops::mul(d, input(0))?, grads);
            }
            Op::Scale(c) => push(0, ops::scale(d, *c), grads),
            Op::ConcatCols => {
                let (a, b) = (input(0), input(1));
                let mut ga = Tensor::zeros(a.rows(), a.cols());
                let mut gb = Tensor::zeros(b.rows(), b.cols());
                for r in 0..d.rows() {
                    let row = d.row(r);
                    ga.row_mut(r).copy_from_slice(&row[..a.cols()]);
                    gb.row_mut(r).copy_from_slice(&row[a.cols()..]);
                }
                push(0, ga, grads);
                push(1, gb, grads);
            }
            Op::SoftmaxRows => {
                // dx = y * (d - <d, y>) per row.
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = d.row(r);
                    let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (out, (&yv, &dv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr.iter())) {
                        *out = yv * (dv - dot);
                    }
                }
                push(0, g, grads);
            }
            Op::Tanh => {
                let y = &node.value;
                push(0, elementwise3(d, y, |dv, yv| dv * (1.0 - yv * yv)), grads);
            }
            Op::Sigmoid => {
                let y = &node.value;
                push(0, elementwise3(d, y, |dv, yv| dv * yv * (1.0 - yv)), grads);
            }
            Op::LeakyRelu(slope) => {
                let x = input(0);
                let s = *slope;
                push(
                    0,
                    elementwise3(d, x, |dv, xv| if xv >= 0.0 { dv } else { s * dv }),
                    grads,
                );
            }
            Op::Gelu => {
                let x = input(0);
                push(
                    0,
                    elementwise3(d, x, |dv, xv| dv * ops::gelu_grad_scalar(xv)),
                    grads,
                );
            }
            Op::Softplus => {
                let x = input(0);
                push(
                    0,
                    elementwise3(d, x, |dv, xv| dv * ops::sigmoid_scalar(xv)),
                    grads,
                );
            }
            Op::Log => {
                let x = input(0);
                push(0, elementwise3(d, x, |dv, xv| dv / xv), grads);
            }
            Op::ClampMin(min) => {
                let x = input(0);
                let m = *min;
                push(
                    0,
                    elementwise3(d, x, |dv, xv| if xv > m { dv } else { 0.0 }),
                    grads,
                );
            }
            Op::LayerNorm => {
                let x = input(0);
                let gamma = input(1);
                let n = x.cols() as f64;
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                let mut ggamma = Tensor::zeros(1, x.cols());
                let mut gbeta = Tensor::zeros(1, x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let dr = d.row(r);
                    let (mean, var) = ops::row_moments(xr);
                    let inv = 1.0 / (var + ops::LAYER_NORM_EPS).sqrt();
                    let y: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    let g: Vec<f64> = dr
                        .iter()
                        .zip(gamma.row(0).iter())
                        .map(|(&dv, &gv)| dv * gv)
                        .collect();
                    let g_mean = g.iter().sum::<f64>() / n;
                    let gy_mean = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..xr.len() {
                        gx.row_mut(r)[i] = (g[i] - g_mean - y[i] * gy_mean) * inv;
                        ggamma.row_mut(0)[i] += dr[i] * y[i];
                        gbeta.row_mut(0)[i] += dr[i];
                    }
                }
                push(0, gx, grads);
                push(1, ggamma, grads);
                push(2, gbeta, grads);
            }
            Op::Dropout { keep, scale } => {
                let mut g = d.clone();
                for (v, &k) in g.data_mut().iter_mut().zip(keep.iter()) {
                    *v = if k { *v * scale } else { 0.0 };
                }
                push(0, g, grads);
            }
            Op::SumAll => {
                let x = input(0);
                push(0, Tensor::filled(x.rows(), x.cols(), d.scalar_value()), grads);
            }
            Op::MeanAll => {
                let x = input(0);
                let v = d.scalar_value() / x.numel() as f64;
                push(0, Tensor::filled(x.rows(), x.cols(), v), grads);
            }
            Op::RowSums => {
                let x = input(0);
                push(
                    0,
                    Tensor::from_fn(x.rows(), x.cols(), |r, _| d.at(r, 0)),
                    grads,
                );
            }
            Op::RowMeans => {
                let x = input(0);
                let n = x.cols() as f64;
                push(
                    0,
                    Tensor::from_fn(x.rows(), x.cols(), |r, _| d.at(r, 0) / n),
                    grads,
                );
            }
            Op::SqL2 => {
                let x = input(0);
                let dv = d.scalar_value();
                push(0, x.map(|v| 2.0 * v * dv), grads);
            }
            Op::Gather { indices } => {
                let table = input(0);
                let mut g = Tensor::zeros(table.rows(), table.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (acc, v) in g.row_mut(i).iter_mut().zip(d.row(k)) {
                        *acc += v;
                    }
                }
                push(0, g, grads);
            }
            Op::Reshape { from } => {
                push(0, ops::reshape(d, from.0, from.1)?, grads);
            }
        }
        Ok(())
    }
}

fn self_row(t: &Tensor, r: usize) -> impl Iterator<Item = f64> + '_ {
    t.row(r).iter().copied()
}

fn elementwise3(d: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert!(d.same_shape(other));
    let data = d
        .data()
        .iter()
        .zip(other.data().iter())
        .map(|(&dv, &ov)| f(dv, ov))
        .collect();
    Tensor::new(d.rows(), d.cols(), data).expect("same shape")
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Scale(_) => "scale",
        Op::ConcatCols => "concat_cols",
        Op::SoftmaxRows => "softmax_rows",
        Op::Tanh => "tanh",
        Op::Sigmoid => "sigmoid",
        Op::LeakyRelu(_) => "leaky_relu",
        Op::Gelu => "gelu",
        Op::Softplus => "softplus",
        Op::Log => "log",
        Op::ClampMin(_) => "clamp_min",
        Op::LayerNorm => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::SumAll => "sum_all",
        Op::MeanAll => "mean_all",
        Op::RowSums => "row_sums",
        Op::RowMeans => "row_means",
        Op::SqL2 => "sq_l2",
        Op::Gather { .. } => "gather",
        Op::Reshape { .. } => "reshape",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // loss = x * x at x = 3 -> dx = 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[0.3, -1.2, 2.4, 0.0]).unwrap());
        let s = g.softmax_rows(x);
        let total = g.sum_all(s);
        assert!((g.value(total).scalar_value() - 1.0).abs() < 1e-12);
        let grads = g.backward(total).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        let y = g.tanh(x);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn constant_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().scalar_value(), 5.0);
        assert!(grads.get(c).is_none());
    }
}
