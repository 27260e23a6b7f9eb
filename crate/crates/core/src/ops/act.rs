use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax over the last axis of a flat buffer.
pub fn softmax_rows<S: Scalar>(data: &[S], k: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: S = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    out
}

/// Row-wise log-softmax, computed through log-sum-exp.
pub fn log_softmax_rows<S: Scalar>(data: &[S], k: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::shape(op, shape, &[1]))
}

impl<S: Scalar> Tape<S> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push(
            "relu",
            out,
            &[x],
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.output, |g, y| if y > S::zero() { g } else { S::zero() })
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(S::tanh);
        self.push(
            "tanh",
            out,
            &[x],
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.output, |g, y| g * (S::one() - y * y))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = last_dim("softmax", self.shape(x))?;
        let out = Tensor::new(self.shape(x), softmax_rows(self.value(x).data(), k))?;
        self.push(
            "softmax",
            out,
            &[x],
            Box::new(move |args| {
                let mut gx = Vec::with_capacity(args.grad.numel());
                for (g, y) in args.grad.data().chunks(k).zip(args.output.data().chunks(k)) {
                    let dot: S = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    gx.extend(g.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), gx).unwrap())]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let k = last_dim("log_softmax", self.shape(x))?;
        let out = Tensor::new(self.shape(x), log_softmax_rows(self.value(x).data(), k))?;
        self.push(
            "log_softmax",
            out,
            &[x],
            Box::new(move |args| {
                let mut gx = Vec::with_capacity(args.grad.numel());
                for (g, ly) in args.grad.data().chunks(k).zip(args.output.data().chunks(k)) {
                    let total: S = g.iter().copied().sum();
                    gx.extend(g.iter().zip(ly).map(|(&a, &l)| a - l.exp() * total));
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), gx).unwrap())]
            }),
        )
    }
}
