use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Tape<S> {
    /// Mean negative log-likelihood of `labels` under row log-probabilities
    /// `logp[B, K]`.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        let [batch, k] = shape[..] else {
            return Err(Error::shape("nll", &shape, &[labels.len(), 0]));
        };
        if batch != labels.len() {
            return Err(Error::shape("nll", &shape, &[labels.len(), k]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                len: k,
            });
        }
        let d = self.value(logp).data();
        let total: S = labels.iter().enumerate().map(|(b, &l)| -d[b * k + l]).sum();
        let inv = S::one() / S::count(batch);
        let labels = labels.to_vec();
        self.push(
            "nll",
            Tensor::scalar(total * inv),
            &[logp],
            Box::new(move |args| {
                let g = args.grad.data()[0] * inv;
                let mut gx = vec![S::zero(); batch * k];
                for (b, &l) in labels.iter().enumerate() {
                    gx[b * k + l] = -g;
                }
                vec![Some(Tensor::new(&[batch, k], gx).unwrap())]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = self.log_softmax(logits)?;
        self.nll(logp, labels)
    }

    /// Log of the person-averaged probabilities.
    ///
    /// `logp` holds per-person log-probabilities `[B * M, K]` with persons
    /// innermost; `valid[b * M + m]` marks persons with data. Samples whose
    /// persons are all marked invalid fall back to person 0.
    pub fn person_log_mean(&mut self, logp: Var, persons: usize, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        let [rows, k] = shape[..] else {
            return Err(Error::shape("person_log_mean", &shape, &[0, 0]));
        };
        if persons == 0 || rows % persons != 0 || valid.len() != rows {
            return Err(Error::shape("person_log_mean", &shape, &[valid.len(), persons]));
        }
        let batch = rows / persons;
        let mut members: Vec<Vec<usize>> = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut ms: Vec<usize> = (0..persons).filter(|&m| valid[b * persons + m]).collect();
            if ms.is_empty() {
                ms.push(0);
            }
            members.push(ms);
        }
        let d = self.value(logp).data();
        let mut out = Vec::with_capacity(batch * k);
        for (b, ms) in members.iter().enumerate() {
            let ln_count = S::count(ms.len()).ln();
            for j in 0..k {
                let m = ms
                    .iter()
                    .map(|&p| d[(b * persons + p) * k + j])
                    .fold(S::neg_infinity(), S::max);
                let s: S = ms.iter().map(|&p| (d[(b * persons + p) * k + j] - m).exp()).sum();
                out.push(m + s.ln() - ln_count);
            }
        }
        let out = Tensor::new(&[batch, k], out)?;
        self.push(
            "person_log_mean",
            out,
            &[logp],
            Box::new(move |args| {
                let (d, o, g) = (args.inputs[0].data(), args.output.data(), args.grad.data());
                let mut gx = vec![S::zero(); rows * k];
                for (b, ms) in members.iter().enumerate() {
                    let inv = S::one() / S::count(ms.len());
                    for &p in ms {
                        let r = (b * persons + p) * k;
                        for j in 0..k {
                            let w = (d[r + j] - o[b * k + j]).exp() * inv;
                            gx[r + j] = g[b * k + j] * w;
                        }
                    }
                }
                vec![Some(Tensor::new(&[rows, k], gx).unwrap())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 7]));
        let l = tape.cross_entropy(x, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1e6, 0., 0., 0., 0., 1e6]).unwrap());
        let l = tape.cross_entropy(x, &[0, 2]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn single_person_mean_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 0.1, 0.2, 0.3]).unwrap());
        let lp = tape.log_softmax(x).unwrap();
        let pm = tape.person_log_mean(lp, 1, &[true, true]).unwrap();
        assert_eq!(tape.value(lp), tape.value(pm));
    }

    #[test]
    fn person_mean_skips_invalid() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[2.0, 0.0, -5.0, 9.0]).unwrap());
        let lp = tape.log_softmax(x).unwrap();
        let pm = tape.person_log_mean(lp, 2, &[true, false]).unwrap();
        let row0: Vec<f64> = tape.value(lp).data()[..2].to_vec();
        assert_eq!(tape.value(pm).data(), &row0[..]);
        let both = tape.person_log_mean(lp, 2, &[true, true]).unwrap();
        let p = tape.value(both).data().iter().map(|v| v.exp()).sum::<f64>();
        assert!((p - 1.0).abs() < 1e-12);
    }
}
