use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, c, t, n] => Ok((b, c, t, n)),
        _ => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

impl<S: Scalar> Tape<S> {
    /// Mean over the time axis: `[B, C, T, N] -> [B, C, N]`.
    pub fn temporal_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, t, n) = dims4("temporal_pool", self.shape(x))?;
        let inv = S::one() / S::count(t);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); b * c * n];
        for (o, block) in out.chunks_mut(n).zip(xd.chunks(t * n)) {
            for row in block.chunks(n) {
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            for v in o.iter_mut() {
                *v = *v * inv;
            }
        }
        let out = Tensor::new(&[b, c, n], out)?;
        self.push(
            "temporal_pool",
            out,
            &[x],
            Box::new(move |args| {
                let mut gx = Vec::with_capacity(b * c * t * n);
                for g in args.grad.data().chunks(n) {
                    for _ in 0..t {
                        gx.extend(g.iter().map(|&v| v * inv));
                    }
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), gx).unwrap())]
            }),
        )
    }

    /// Mean over time and joints: `[B, C, T, N] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, t, n) = dims4("global_avg_pool", self.shape(x))?;
        let area = t * n;
        let inv = S::one() / S::count(area);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        let out = Tensor::new(&[b, c], out)?;
        self.push(
            "global_avg_pool",
            out,
            &[x],
            Box::new(move |args| {
                let mut gx = Vec::with_capacity(b * c * area);
                for &g in args.grad.data() {
                    gx.extend(core::iter::repeat_n(g * inv, area));
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), gx).unwrap())]
            }),
        )
    }

    /// Max over a temporal window of `kernel` frames; padded frames never win.
    pub fn max_pool_t(&mut self, x: Var, kernel: usize, spec: Conv2dSpec) -> Result<Var> {
        let (b, c, t, n) = dims4("max_pool_t", self.shape(x))?;
        let t_out = spec.out_len(t, kernel)?;
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); b * c * t_out * n];
        let mut arg = vec![0u32; out.len()];
        for (bc, (o, a)) in out.chunks_mut(t_out * n).zip(arg.chunks_mut(t_out * n)).enumerate() {
            let src = &xd[bc * t * n..(bc + 1) * t * n];
            for to in 0..t_out {
                for j in 0..n {
                    let mut best: Option<(S, usize)> = None;
                    for k in 0..kernel {
                        let ts = (to * spec.stride_t + k * spec.dilation_t) as isize - spec.pad_t as isize;
                        if ts < 0 || ts as usize >= t {
                            continue;
                        }
                        let v = src[ts as usize * n + j];
                        if best.is_none_or(|(bv, _)| v > bv) {
                            best = Some((v, ts as usize));
                        }
                    }
                    let (v, ts) = best.ok_or_else(|| {
                        Error::config("max_pool_t window lies entirely in padding")
                    })?;
                    o[to * n + j] = v;
                    a[to * n + j] = (ts * n + j) as u32;
                }
            }
        }
        let out = Tensor::new(&[b, c, t_out, n], out)?;
        self.push(
            "max_pool_t",
            out,
            &[x],
            Box::new(move |args| {
                let mut gx = vec![S::zero(); b * c * t * n];
                let gd = args.grad.data();
                for (bc, (g, a)) in gd.chunks(t_out * n).zip(arg.chunks(t_out * n)).enumerate() {
                    let dst = &mut gx[bc * t * n..(bc + 1) * t * n];
                    for (&gv, &ai) in g.iter().zip(a) {
                        dst[ai as usize] = dst[ai as usize] + gv;
                    }
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), gx).unwrap())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_pool_means() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 1], &[1., 3.]).unwrap());
        let p = tape.temporal_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
        let c = tape.constant(Tensor::full(&[2, 3, 5, 4], 1.5));
        let pc = tape.temporal_pool(c).unwrap();
        assert!(tape.value(pc).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn gap_constant_and_squeeze() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[2, 3, 4, 5], -0.25));
        let g = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.shape(g), &[2, 3]);
        assert!(tape.value(g).data().iter().all(|&v| (v + 0.25).abs() < 1e-15));
        let x = tape.constant(Tensor::from_f64(&[1, 2, 1, 1], &[7., 8.]).unwrap());
        let g = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(g).data(), &[7., 8.]);
    }

    #[test]
    fn max_pool_stride_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 5, 1], &[1., 5., 2., 0., 3.]).unwrap());
        let y = tape.max_pool_t(x, 3, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 5., 3.]);
    }
}
