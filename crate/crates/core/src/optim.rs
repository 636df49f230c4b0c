//! First-order optimizers and learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{RadaError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::SgdMomentum { .. } => f.write_str("sgd-momentum"),
            OptimizerKind::AdamW { .. } => f.write_str("adamw"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::sgd()),
            "adamw" => Ok(OptimizerKind::adamw()),
            _ => Err(RadaError::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos()),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(RadaError::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u32,
}

impl Optimizer {
    pub fn new<'a>(kind: OptimizerKind, weight_decay: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = match kind {
            OptimizerKind::AdamW { .. } => first.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            weight_decay,
            first,
            second,
            steps: 0,
        }
    }

    /// Applies one update. `params` and `grads` follow construction order.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        self.steps += 1;
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let g = grads
                .get(i)
                .ok_or_else(|| RadaError::dim("optimizer", &[self.first.len()], &[grads.len()]))?;
            if g.shape() != p.shape() {
                return Err(RadaError::dim("optimizer", p.shape(), g.shape()));
            }
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let v = self.first[i].data_mut();
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        let gi = gi + self.weight_decay * *w;
                        *vi = momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w -= lr * (update + self.weight_decay * *w);
                    }
                }
            }
        }
        if count != self.first.len() {
            return Err(RadaError::dim("optimizer", &[self.first.len()], &[count]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(Schedule::Cosine.rate(1.0, 0, 10), 1.0);
        assert!(Schedule::Cosine.rate(1.0, 10, 10).abs() < 1e-15);
        assert!((Schedule::Cosine.rate(2.0, 5, 10) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut w = Tensor::scalar(4.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.0, [&w]);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * w.data()[0]);
            opt.step([&mut w], &[g], 0.01).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::adamw(), 0.0, [&w]);
        opt.step([&mut w], &[Tensor::scalar(123.0)], 0.01).unwrap();
        assert!((w.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut w = Tensor::from_rows(&[vec![0.5, -0.25]]).unwrap();
        let before = w.clone();
        let mut opt = Optimizer::new(OptimizerKind::adamw(), 0.1, [&w]);
        opt.step([&mut w], &[Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()], 0.0).unwrap();
        assert_eq!(w, before);
    }
}
