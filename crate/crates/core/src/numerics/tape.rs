//! Reverse-mode gradient tape over dense [`Tensor`]s.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and returns a [`Gradients`] table without mutating the tape, so repeated
//! backward passes are identical.

use super::tensor::{self, Tensor};
use crate::error::{RadaError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    /// a · bᵀ
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Abs(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    SumLastDim(Var),
    SumAll(Var),
    MeanAll(Var),
    MaxAll(Var, usize),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    NormalizeRows(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Confined to one thread of control.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A learnable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies the value of `x` into a fresh constant leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose on the tape.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(RadaError::dim("matmul_bt", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &va.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &vb.data()[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let out = tensor::softmax_lastdim(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            tensor::log_softmax_in_place(row);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let data: Vec<f64> = x.data().chunks(c).map(tensor::log_sum_exp).collect();
        let out = Tensor::new(&reduced_shape(x.shape()), data).expect("reduced shape");
        self.push(out, Op::LogSumExp(a), &[a])
    }

    /// Sum over the last axis; drops that axis.
    pub fn sum_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let data: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(&reduced_shape(x.shape()), data).expect("reduced shape");
        self.push(out, Op::SumLastDim(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(out, Op::MeanAll(a), &[a])
    }

    /// Maximum entry; the gradient flows to the first maximal index.
    pub fn max_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (idx, max) = x
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        self.push(Tensor::scalar(max), Op::MaxAll(a, idx), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Stacks rank-1 or rank-2 inputs with a common last extent into a matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| RadaError::Degenerate("concat_rows of nothing".into()))?;
        let cols = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != cols || v.shape().len() > 2 {
                return Err(RadaError::dim("concat_rows", self.value(*first).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Repeats a single row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(RadaError::Contract(format!(
                "repeat_rows expects one row, got shape {:?}",
                x.shape()
            )));
        }
        let cols = x.last_dim();
        let data = x.data().repeat(n);
        let out = Tensor::new(&[n, cols], data)?;
        Ok(self.push(out, Op::RepeatRows(a), &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms = tensor::row_norms(x);
        let out = tensor::l2_normalize_rows(x)?;
        Ok(self.push(out, Op::NormalizeRows(a, norms), &[a]))
    }

    /// Batch-mean cross-entropy of `logits` (B×K) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(RadaError::dim("cross_entropy", z.shape(), &[labels.len()]));
        }
        let k = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(RadaError::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| {
                let row = z.row(b);
                tensor::log_sum_exp(row) - row[y]
            })
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, labels.to_vec()), &[logits]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(RadaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(seed.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ if node.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| accumulate(&self.nodes, grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul(&val(*b).transpose()?)?)?;
                send(*b, val(*a).transpose()?.matmul(g)?)?;
            }
            Op::MatMulBt(a, b) => {
                send(*a, g.matmul(val(*b))?)?;
                send(*b, g.transpose()?.matmul(val(*a))?)?;
            }
            Op::Transpose(a) => send(*a, g.transpose()?)?,
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?)?;
                send(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?)?;
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c))?,
            Op::AddScalar(a) => send(*a, g.clone())?,
            Op::Exp(a) => send(*a, g.zip_map(&node.value, "exp", |x, y| x * y)?)?,
            Op::Abs(a) => send(*a, g.zip_map(val(*a), "abs", |x, y| x * sign(y))?)?,
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, "tanh", |x, y| x * (1.0 - y * y))?)?,
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                send(*a, dx)?;
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let mut dx = g.clone();
                for (drow, lrow) in dx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let total: f64 = drow.iter().sum();
                    for (d, l) in drow.iter_mut().zip(lrow) {
                        *d -= l.exp() * total;
                    }
                }
                send(*a, dx)?;
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let c = x.last_dim();
                let mut dx = tensor::softmax_lastdim(x);
                for (row, gi) in dx.data_mut().chunks_mut(c).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                send(*a, dx)?;
            }
            Op::SumLastDim(a) => {
                let x = val(*a);
                let c = x.last_dim();
                let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect();
                send(*a, Tensor::new(x.shape(), data)?)?;
            }
            Op::SumAll(a) => send(*a, Tensor::full(val(*a).shape(), g.data()[0]))?,
            Op::MeanAll(a) => {
                let x = val(*a);
                send(*a, Tensor::full(x.shape(), g.data()[0] / x.numel() as f64))?;
            }
            Op::MaxAll(a, idx) => {
                let mut dx = Tensor::zeros(val(*a).shape());
                dx.data_mut()[*idx] = g.data()[0];
                send(*a, dx)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?)?,
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let n: usize = shape.iter().product();
                    send(p, Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?)?;
                    offset += n;
                }
            }
            Op::RepeatRows(a) => {
                let x = val(*a);
                let c = x.last_dim();
                let mut acc = vec![0.0; c];
                for row in g.data().chunks(c) {
                    acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                send(*a, Tensor::new(x.shape(), acc)?)?;
            }
            Op::NormalizeRows(a, norms) => {
                let c = node.value.last_dim();
                let mut dx = g.clone();
                for ((drow, yrow), n) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(norms)
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = (*d - y * dot) / n;
                    }
                }
                send(*a, dx)?;
            }
            Op::CrossEntropy(a, labels) => {
                let mut dx = tensor::softmax_lastdim(val(*a));
                let k = dx.last_dim();
                let scale = g.data()[0] / labels.len() as f64;
                for (b, &y) in labels.iter().enumerate() {
                    dx.data_mut()[b * k + y] -= 1.0;
                }
                dx.data_mut().iter_mut().for_each(|v| *v *= scale);
                send(*a, dx)?;
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, t: Tensor) -> Result<()> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(acc) => {
            if acc.shape() != t.shape() {
                return Err(RadaError::dim("accumulate", acc.shape(), t.shape()));
            }
            acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        slot @ None => *slot = Some(t),
    }
    Ok(())
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node. `None` for anything that does not require grad;
    /// learnable leaves off the loss path get exact zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
