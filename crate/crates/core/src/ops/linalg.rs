use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Batch layout of a broadcast matmul: output batch shape plus, for each
/// output batch index, the matching batch index into each operand.
struct BatchPlan {
    out_batch: Vec<usize>,
    a_index: Vec<usize>,
    b_index: Vec<usize>,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize]) -> Option<BatchPlan> {
    let nd = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut out_batch = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out_batch.push(x),
            (1, _) => out_batch.push(y),
            (_, 1) => out_batch.push(x),
            _ => return None,
        }
    }
    let total: usize = out_batch.iter().product();
    let mut a_index = Vec::with_capacity(total);
    let mut b_index = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..nd {
            ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        a_index.push(ia);
        b_index.push(ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan {
        out_batch,
        a_index,
        b_index,
    })
}

impl<S: Scalar> Tape<S> {
    /// Batched matrix product `a[.., M, K] x b[.., K, N]` with broadcast
    /// batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., M, K] x b[.., N, K]^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::shape(name, &ashape, &bshape));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = if trans_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(name, &ashape, &bshape));
        }
        let plan = plan_batches(&ashape[..ashape.len() - 2], &bshape[..bshape.len() - 2])
            .ok_or_else(|| Error::shape(name, &ashape, &bshape))?;
        let mut out_shape = plan.out_batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let batches = plan.a_index.len();
        let mut out = vec![S::zero(); batches * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for (i, c) in out.chunks_mut(m * n).enumerate() {
                let ab = &ad[plan.a_index[i] * m * k..][..m * k];
                let bb = &bd[plan.b_index[i] * k * n..][..k * n];
                gemm(false, trans_b, m, k, n, S::one(), ab, bb, S::zero(), c);
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        self.push(
            name,
            out,
            &[a, b],
            Box::new(move |args| {
                let (ad, bd, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![S::zero(); ad.len()];
                    for i in 0..batches {
                        let g = &gd[i * m * n..][..m * n];
                        let bb = &bd[plan.b_index[i] * k * n..][..k * n];
                        let dst = &mut ga[plan.a_index[i] * m * k..][..m * k];
                        // dA = dC B^T  (or dC B when b was transposed)
                        gemm(false, !trans_b, m, n, k, S::one(), g, bb, S::one(), dst);
                    }
                    Tensor::new(args.inputs[0].shape(), ga).unwrap()
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![S::zero(); bd.len()];
                    for i in 0..batches {
                        let g = &gd[i * m * n..][..m * n];
                        let ab = &ad[plan.a_index[i] * m * k..][..m * k];
                        let dst = &mut gb[plan.b_index[i] * k * n..][..k * n];
                        if trans_b {
                            // dB (n×k) = dC^T A
                            gemm(true, false, n, m, k, S::one(), g, ab, S::one(), dst);
                        } else {
                            // dB (k×n) = A^T dC
                            gemm(true, false, k, m, n, S::one(), ab, g, S::one(), dst);
                        }
                    }
                    Tensor::new(args.inputs[1].shape(), gb).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Fully connected layer: `x[B, Cin] w[Cout, Cin]^T + bias[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear bias", self.shape(b), &[cout]));
            }
        }
        let mut out = vec![S::zero(); batch * cout];
        if let Some(b) = bias {
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(
            false,
            true,
            batch,
            cin,
            cout,
            S::one(),
            self.value(x).data(),
            self.value(w).data(),
            S::one(),
            &mut out,
        );
        let out = Tensor::new(&[batch, cout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "linear",
            out,
            &inputs,
            Box::new(move |args| {
                let g = args.grad.data();
                let mut res = Vec::with_capacity(3);
                res.push(args.needs[0].then(|| {
                    let mut gx = vec![S::zero(); batch * cin];
                    gemm(false, false, batch, cout, cin, S::one(), g, args.inputs[1].data(), S::zero(), &mut gx);
                    Tensor::new(&[batch, cin], gx).unwrap()
                }));
                res.push(args.needs[1].then(|| {
                    let mut gw = vec![S::zero(); cout * cin];
                    gemm(true, false, cout, batch, cin, S::one(), g, args.inputs[0].data(), S::zero(), &mut gw);
                    Tensor::new(&[cout, cin], gw).unwrap()
                }));
                if args.inputs.len() == 3 {
                    let mut gb = vec![S::zero(); cout];
                    for row in g.chunks(cout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    res.push(Some(Tensor::new(&[cout], gb).unwrap()));
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(p), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[17., 39.]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn broadcast_batch_matches_explicit() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 2, 4], |i| (i as f64 * 0.37).sin()));
        let b = tape.constant(Tensor::from_fn(&[3, 4, 5], |i| (i as f64 * 0.11).cos()));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(p), &[2, 3, 2, 5]);
        let (av, bv, pv) = (tape.value(a), tape.value(b), tape.value(p));
        for x in 0..2 {
            for y in 0..3 {
                for i in 0..2 {
                    for j in 0..5 {
                        let s: f64 = (0..4).map(|k| av.get(&[x, y, i, k]) * bv.get(&[y, k, j])).sum();
                        assert!((s - pv.get(&[x, y, i, j])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_nt_equals_transpose_then_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[3, 2, 4], |i| (i as f64).sin()));
        let b = tape.constant(Tensor::from_fn(&[3, 5, 4], |i| (i as f64).cos()));
        let bt = tape.transpose_last2(b).unwrap();
        let p1 = tape.matmul(a, bt).unwrap();
        let p2 = tape.matmul_nt(a, b).unwrap();
        assert!(tape.value(p1).max_abs_diff(tape.value(p2)).unwrap() < 1e-14);
    }
}
