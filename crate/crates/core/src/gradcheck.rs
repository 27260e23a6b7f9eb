//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative errors are `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many coordinates of each input (sampled with
    /// `seed`); `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-4,
            abs_floor: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates excluded because the step crossed a kink (see
    /// [`grad_check`]).
    pub kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    /// Every smooth coordinate is within tolerance and at most a tenth of
    /// the coordinates sat on kinks.
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.kinks * 10 <= self.checked
    }
}

/// Compares the tape gradient of scalar `f` against central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps` for each input coordinate.
///
/// ReLU and max-pool make `f` piecewise smooth. When the central
/// difference disagrees but the analytic value matches one of the two
/// one-sided differences, the step straddled a kink; such coordinates are
/// counted in `kinks` instead of `max_rel_err`. A wrong gradient in a
/// smooth region matches neither side and still fails.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::shape("grad_check objective", tape.shape(out), &[1]));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs, true)?;
    let base = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
        tol: cfg.tol,
    };
    for (which, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        for idx in coords {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + cfg.eps;
            let (t, _, o) = eval(&work, false)?;
            let plus = t.value(o).data()[0];
            work[which].data_mut()[idx] = orig - cfg.eps;
            let (t, _, o) = eval(&work, false)?;
            let minus = t.value(o).data()[0];
            work[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[which].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err >= cfg.tol {
                let ahead = (plus - base) / cfg.eps;
                let behind = (base - minus) / cfg.eps;
                let side = (a - ahead).abs().min((a - behind).abs()) / denom;
                if side < cfg.tol {
                    report.kinks += 1;
                    continue;
                }
            }
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((which, idx));
            }
        }
    }
    Ok(report)
}
