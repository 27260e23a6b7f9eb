use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running per-channel statistics; start at mean 0, variance 1.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a, S> {
    pub mean: &'a [S],
    pub var: &'a [S],
}

/// Statistics observed on a training batch, to be folded into the running
/// buffers by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased estimate.
    pub var: Vec<S>,
}

impl<S: Scalar> BatchStats<S> {
    /// `running <- (1 - m) * running + m * batch`.
    pub fn fold_into(&self, mean: &mut [S], var: &mut [S], momentum: S) {
        let keep = S::one() - momentum;
        for (r, &b) in mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in var.iter_mut().zip(&self.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Per-channel normalisation of `x[B, C, ...]`.
    ///
    /// In training mode the batch statistics over `(B, ...)` are used and
    /// returned; otherwise `running` is used and `None` is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats<'_, S>,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", &xs, &[0, 0]));
        }
        let (batch, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::shape(what, self.shape(v), &[c]));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[running.mean.len()], &[c]));
        }
        let count = batch * spatial;
        let eps = S::from_f64_lossy(BN_EPS);
        let xd = self.value(x).data();

        let (mean, var, stats) = if training {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for (i, row) in xd.chunks(spatial).enumerate() {
                let ch = i % c;
                mean[ch] = mean[ch] + row.iter().copied().sum::<S>();
            }
            let inv_n = S::one() / S::count(count);
            for m in &mut mean {
                *m = *m * inv_n;
            }
            for (i, row) in xd.chunks(spatial).enumerate() {
                let ch = i % c;
                let m = mean[ch];
                var[ch] = var[ch] + row.iter().map(|&v| (v - m) * (v - m)).sum::<S>();
            }
            let unbiased: Vec<S> = var
                .iter()
                .map(|&s| if count > 1 { s / S::count(count - 1) } else { S::zero() })
                .collect();
            for v in &mut var {
                *v = *v * inv_n;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (running.mean.to_vec(), running.var.to_vec(), None)
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, row) in xd.chunks(spatial).enumerate() {
            let ch = i % c;
            for &v in row {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let out = Tensor::new(&xs, out)?;
        let var = self.push(
            "batch_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let gd = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for (i, (grow, hrow)) in gd.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    let ch = i % c;
                    for (&gv, &h) in grow.iter().zip(hrow) {
                        sum_g[ch] = sum_g[ch] + gv;
                        sum_gx[ch] = sum_gx[ch] + gv * h;
                    }
                }
                let gx = args.needs[0].then(|| {
                    let mut gx = Vec::with_capacity(gd.len());
                    let n = S::count(count);
                    for (i, (grow, hrow)) in gd.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                        let ch = i % c;
                        let k = gamma[ch] * inv_std[ch];
                        if training {
                            for (&gv, &h) in grow.iter().zip(hrow) {
                                gx.push(k * (gv - (sum_g[ch] + h * sum_gx[ch]) / n));
                            }
                        } else {
                            gx.extend(grow.iter().map(|&gv| k * gv));
                        }
                    }
                    Tensor::new(args.inputs[0].shape(), gx).unwrap()
                });
                vec![
                    gx,
                    Some(Tensor::new(&[c], sum_gx).unwrap()),
                    Some(Tensor::new(&[c], sum_g).unwrap()),
                ]
            }),
        )?;
        Ok((var, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(x: Tensor<f64>, training: bool) -> (Tensor<f64>, Option<BatchStats<f64>>) {
        let c = x.dim(1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[c]));
        let b = tape.constant(Tensor::zeros(&[c]));
        let (mean, var) = (vec![0.0; c], vec![1.0; c]);
        let (y, s) = tape
            .batch_norm(xv, g, b, RunningStats { mean: &mean, var: &var }, training)
            .unwrap();
        (tape.value(y).clone(), s)
    }

    #[test]
    fn normalized_input_is_nearly_unchanged() {
        let x = Tensor::from_f64(&[2, 1, 2, 1], &[1., -1., 1., -1.]).unwrap();
        let (y, stats) = bn(x.clone(), true);
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.var[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_channel_is_finite() {
        let x = Tensor::full(&[3, 2, 4, 5], 2.5);
        let (y, _) = bn(x, true);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_uses_initial_running_stats() {
        let x = Tensor::from_f64(&[1, 1, 1, 2], &[2., -4.]).unwrap();
        let (y, stats) = bn(x, false);
        assert!(stats.is_none());
        let k = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((y.data()[0] - 2.0 * k).abs() < 1e-15);
        assert!((y.data()[1] + 4.0 * k).abs() < 1e-15);
    }
}
