use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_at_axis, Tensor};

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|args| {
                let [x, y] = [args.inputs[0], args.inputs[1]];
                vec![
                    args.needs[0].then(|| args.grad.zip_map(y, |g, v| g * v).unwrap()),
                    args.needs[1].then(|| args.grad.zip_map(x, |g, v| g * v).unwrap()),
                ]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(
            "square",
            out,
            &[a],
            Box::new(|args| {
                let two = S::one() + S::one();
                vec![Some(args.grad.zip_map(args.inputs[0], |g, x| two * g * x).unwrap())]
            }),
        )
    }

    /// Multiplies every element by a constant.
    pub fn mul_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(
            "mul_scalar",
            out,
            &[a],
            Box::new(move |args| vec![Some(args.grad.map(|g| g * c))]),
        )
    }

    /// `alpha * x` with `alpha` a one-element (learnable) tensor.
    pub fn scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).numel() != 1 {
            return Err(Error::shape("scale", self.shape(alpha), &[1]));
        }
        let a = self.value(alpha).data()[0];
        let out = self.value(x).map(|v| v * a);
        self.push(
            "scale",
            out,
            &[x, alpha],
            Box::new(|args| {
                let a = args.inputs[1].data()[0];
                let gx = args.needs[0].then(|| args.grad.map(|g| g * a));
                let ga = args.needs[1].then(|| {
                    let s: S = args
                        .grad
                        .data()
                        .iter()
                        .zip(args.inputs[0].data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    Tensor::new(args.inputs[1].shape(), vec![s]).unwrap()
                });
                vec![gx, ga]
            }),
        )
    }

    /// Adds a constant tensor broadcast over the leading axes of `x`
    /// (`c`'s shape must equal the trailing axes of `x`).
    pub fn add_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        let xs = self.shape(x);
        if c.ndim() > xs.len() || xs[xs.len() - c.ndim()..] != *c.shape() {
            return Err(Error::shape("add_const", xs, c.shape()));
        }
        let mut out = self.value(x).clone();
        let cd = c.data();
        for chunk in out.data_mut().chunks_mut(cd.len()) {
            for (o, &v) in chunk.iter_mut().zip(cd) {
                *o = *o + v;
            }
        }
        self.push(
            "add_const",
            out,
            &[x],
            Box::new(|args| vec![Some(args.grad.clone())]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(
            "sum",
            Tensor::scalar(s),
            &[x],
            Box::new(|args| {
                let g = args.grad.data()[0];
                vec![Some(Tensor::full(args.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::count(self.value(x).numel());
        let s = self.value(x).sum() / n;
        self.push(
            "mean",
            Tensor::scalar(s),
            &[x],
            Box::new(move |args| {
                let g = args.grad.data()[0] / n;
                vec![Some(Tensor::full(args.inputs[0].shape(), g))]
            }),
        )
    }

    /// `sum(x * w)` for a constant weight tensor; projects any output to a
    /// scalar for gradient checks.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(Error::shape("dot_const", self.shape(x), w.shape()));
        }
        let s: S = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let w = w.clone();
        self.push(
            "dot_const",
            Tensor::scalar(s),
            &[x],
            Box::new(move |args| {
                let g = args.grad.data()[0];
                vec![Some(w.map(|v| v * g))]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(|args| {
                vec![Some(args.grad.clone().reshape(args.inputs[0].shape()).unwrap())]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        self.push(
            "concat",
            out,
            xs,
            Box::new(move |args| {
                let (outer, total, inner) = split_at_axis(args.grad.shape(), axis);
                let gd = args.grad.data();
                let mut start = 0;
                extents
                    .iter()
                    .zip(args.inputs)
                    .zip(args.needs)
                    .map(|((&len, inp), &need)| {
                        let s = start;
                        start += len;
                        need.then(|| {
                            let mut data = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + s) * inner;
                                data.extend_from_slice(&gd[base..base + len * inner]);
                            }
                            Tensor::new(inp.shape(), data).unwrap()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        if start == 0 && len == shape[axis] {
            return Ok(x);
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.push(
            "narrow",
            out,
            &[x],
            Box::new(move |args| {
                let gd = args.grad.data();
                let mut gx = vec![S::zero(); outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, gx).unwrap())]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::shape("transpose_last2", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        let out = self.value(x).permute(&perm)?;
        self.push(
            "transpose_last2",
            out,
            &[x],
            Box::new(move |args| vec![Some(args.grad.permute(&perm).unwrap())]),
        )
    }

    /// `d[.., i, j] = p[.., i] - q[.., j]` for `p`, `q` of shape `[.., N]`.
    pub fn pairwise_sub(&mut self, p: Var, q: Var) -> Result<Var> {
        let (ps, qs) = (self.shape(p), self.shape(q));
        if ps != qs {
            return Err(Error::shape("pairwise_sub", ps, qs));
        }
        let n = *ps.last().unwrap();
        let mut shape = ps.to_vec();
        shape.push(n);
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut out = Vec::with_capacity(pd.len() * n);
        for (pr, qr) in pd.chunks(n).zip(qd.chunks(n)) {
            for &pi in pr {
                out.extend(qr.iter().map(|&qj| pi - qj));
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push(
            "pairwise_sub",
            out,
            &[p, q],
            Box::new(move |args| {
                let shape = args.inputs[0].shape();
                let gd = args.grad.data();
                let mut gp = vec![S::zero(); args.inputs[0].numel()];
                let mut gq = vec![S::zero(); args.inputs[0].numel()];
                for (r, block) in gd.chunks(n * n).enumerate() {
                    for i in 0..n {
                        for j in 0..n {
                            let g = block[i * n + j];
                            gp[r * n + i] = gp[r * n + i] + g;
                            gq[r * n + j] = gq[r * n + j] - g;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(shape, gp).unwrap()),
                    Some(Tensor::new(shape, gq).unwrap()),
                ]
            }),
        )
    }
}
