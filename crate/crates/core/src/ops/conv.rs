use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Temporal geometry of a 2-D convolution over `[B, C, T, N]`.
///
/// Stride, dilation and zero padding apply to the time axis only; the joint
/// axis is always stride 1, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride_t: usize,
    pub dilation_t: usize,
    pub pad_t: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride_t: 1,
            dilation_t: 1,
            pad_t: 0,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride_t: usize, dilation_t: usize, pad_t: usize) -> Self {
        Self {
            stride_t,
            dilation_t,
            pad_t,
        }
    }

    /// Output temporal extent, or a configuration error when it would be
    /// nonpositive.
    pub fn out_len(&self, t: usize, kt: usize) -> Result<usize> {
        if self.stride_t == 0 || self.dilation_t == 0 || kt == 0 {
            return Err(Error::config("stride, dilation and kernel must be positive"));
        }
        let span = self.dilation_t * (kt - 1) + 1;
        let padded = t + 2 * self.pad_t;
        if padded < span {
            return Err(Error::config(alloc::format!(
                "temporal extent {t} (padding {}) shorter than dilated kernel span {span}",
                self.pad_t
            )));
        }
        Ok((padded - span) / self.stride_t + 1)
    }
}

struct Geometry {
    cin: usize,
    t: usize,
    n: usize,
    kt: usize,
    kn: usize,
    t_out: usize,
    n_out: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kn == 1 && self.spec.stride_t == 1 && self.spec.pad_t == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kt * self.kn
    }

    fn col_cols(&self) -> usize {
        self.t_out * self.n_out
    }

    /// Source time index for output row `to` and kernel tap `a`, if inside.
    #[inline]
    fn src_t(&self, to: usize, a: usize) -> Option<usize> {
        let t = (to * self.spec.stride_t + a * self.spec.dilation_t) as isize - self.spec.pad_t as isize;
        (t >= 0 && (t as usize) < self.t).then_some(t as usize)
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let cc = self.col_cols();
        for ci in 0..self.cin {
            for a in 0..self.kt {
                for bk in 0..self.kn {
                    let row = (ci * self.kt + a) * self.kn + bk;
                    let dst = &mut cols[row * cc..(row + 1) * cc];
                    for to in 0..self.t_out {
                        let d = &mut dst[to * self.n_out..(to + 1) * self.n_out];
                        match self.src_t(to, a) {
                            Some(ts) => {
                                let base = (ci * self.t + ts) * self.n + bk;
                                d.copy_from_slice(&x[base..base + self.n_out]);
                            }
                            None => d.fill(S::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], gx: &mut [S]) {
        let cc = self.col_cols();
        for ci in 0..self.cin {
            for a in 0..self.kt {
                for bk in 0..self.kn {
                    let row = (ci * self.kt + a) * self.kn + bk;
                    let src = &cols[row * cc..(row + 1) * cc];
                    for to in 0..self.t_out {
                        if let Some(ts) = self.src_t(to, a) {
                            let base = (ci * self.t + ts) * self.n + bk;
                            let s = &src[to * self.n_out..(to + 1) * self.n_out];
                            for (g, &v) in gx[base..base + self.n_out].iter_mut().zip(s) {
                                *g = *g + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Cross-correlation of `x[B, Cin, T, N]` with `w[Cout, Cin, kt, kn]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (batch, cin, t, n) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kt, kn) = (ws[0], ws[2], ws[3]);
        if kn > n {
            return Err(Error::config(alloc::format!(
                "conv2d: joint kernel {kn} wider than {n} joints"
            )));
        }
        let geo = Geometry {
            cin,
            t,
            n,
            kt,
            kn,
            t_out: spec.out_len(t, kt)?,
            n_out: n - kn + 1,
            spec,
        };
        let (rows, cc) = (geo.col_rows(), geo.col_cols());
        let in_stride = cin * t * n;
        let mut out = vec![S::zero(); batch * cout * cc];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * cc] };
            for (b, y) in out.chunks_mut(cout * cc).enumerate() {
                let xb = &xd[b * in_stride..(b + 1) * in_stride];
                let src: &[S] = if geo.is_pointwise() {
                    xb
                } else {
                    geo.im2col(xb, &mut cols);
                    &cols
                };
                gemm(false, false, cout, rows, cc, S::one(), wd, src, S::zero(), y);
            }
        }
        let out = Tensor::new(&[batch, cout, geo.t_out, geo.n_out], out)?;
        self.push(
            "conv2d",
            out,
            &[x, w],
            Box::new(move |args| {
                let (xd, wd, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let mut cols = vec![S::zero(); rows * cc];
                let mut gx = args.needs[0].then(|| vec![S::zero(); xd.len()]);
                let mut gw = args.needs[1].then(|| vec![S::zero(); wd.len()]);
                for b in 0..batch {
                    let g = &gd[b * cout * cc..(b + 1) * cout * cc];
                    let xb = &xd[b * in_stride..(b + 1) * in_stride];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[S] = if geo.is_pointwise() {
                            xb
                        } else {
                            geo.im2col(xb, &mut cols);
                            &cols
                        };
                        gemm(false, true, cout, cc, rows, S::one(), g, src, S::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx[b * in_stride..(b + 1) * in_stride];
                        if geo.is_pointwise() {
                            gemm(true, false, rows, cout, cc, S::one(), wd, g, S::zero(), gxb);
                        } else {
                            gemm(true, false, rows, cout, cc, S::one(), wd, g, S::zero(), &mut cols);
                            geo.col2im(&cols, gxb);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::new(args.inputs[0].shape(), v).unwrap()),
                    gw.map(|v| Tensor::new(args.inputs[1].shape(), v).unwrap()),
                ]
            }),
        )
    }

    /// Per-position channel mixing of `x[B, Cin, ...]` by `w[Cout, Cin]`,
    /// plus an optional per-output-channel bias. Trailing axes are kept.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() < 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("pointwise_conv", &xs, &ws));
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let spatial: usize = xs[2..].iter().product();
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("pointwise_conv bias", self.shape(b), &[cout]));
            }
        }
        let mut out = vec![S::zero(); batch * cout * spatial];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            let bd = bias.map(|b| self.value(b).data());
            for (b, y) in out.chunks_mut(cout * spatial).enumerate() {
                let beta = if let Some(bd) = bd {
                    for (row, &bv) in y.chunks_mut(spatial).zip(bd) {
                        row.fill(bv);
                    }
                    S::one()
                } else {
                    S::zero()
                };
                let xb = &xd[b * cin * spatial..(b + 1) * cin * spatial];
                gemm(false, false, cout, cin, spatial, S::one(), wd, xb, beta, y);
            }
        }
        let mut shape = xs.clone();
        shape[1] = cout;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "pointwise_conv",
            out,
            &inputs,
            Box::new(move |args| {
                let (xd, wd, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let gx = args.needs[0].then(|| {
                    let mut gx = vec![S::zero(); xd.len()];
                    for b in 0..batch {
                        let g = &gd[b * cout * spatial..(b + 1) * cout * spatial];
                        let dst = &mut gx[b * cin * spatial..(b + 1) * cin * spatial];
                        gemm(true, false, cin, cout, spatial, S::one(), wd, g, S::zero(), dst);
                    }
                    Tensor::new(args.inputs[0].shape(), gx).unwrap()
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![S::zero(); wd.len()];
                    for b in 0..batch {
                        let g = &gd[b * cout * spatial..(b + 1) * cout * spatial];
                        let xb = &xd[b * cin * spatial..(b + 1) * cin * spatial];
                        gemm(false, true, cout, spatial, cin, S::one(), g, xb, S::one(), &mut gw);
                    }
                    Tensor::new(args.inputs[1].shape(), gw).unwrap()
                });
                let mut res = vec![gx, gw];
                if args.inputs.len() == 3 {
                    let mut gb = vec![S::zero(); cout];
                    for (i, row) in gd.chunks(spatial).enumerate() {
                        gb[i % cout] = gb[i % cout] + row.iter().copied().sum::<S>();
                    }
                    res.push(Some(Tensor::new(&[cout], gb).unwrap()));
                }
                res
            }),
        )
    }
}
