//! Finite-difference suite over the network's building blocks, in f64.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::mmdg::{Layout, ModalitySelection};
use crate::model::{ModelConfig, StreamNet};
use crate::nn::{Builder, Forward, ParamStore};
use crate::ops::{Conv2dSpec, RunningStats};
use crate::skeleton::{build_adjacency, Part};
use crate::strb::{AttentionMaps, Samg, SamgOptions, Squash, Strb, StrbConfig, Trm, TrmConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckModule {
    Ops,
    Samg,
    Trm,
    Strb,
    Mmdg,
    Stream,
}

impl CheckModule {
    pub const ALL: [CheckModule; 6] = [Self::Ops, Self::Samg, Self::Trm, Self::Strb, Self::Mmdg, Self::Stream];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown check module {s:?}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ops => "ops",
            Self::Samg => "samg",
            Self::Trm => "trm",
            Self::Strb => "strb",
            Self::Mmdg => "mmdg",
            Self::Stream => "stream",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn chain_adjacency(n: usize) -> Result<Tensor<f64>> {
    let edges: Vec<(usize, usize)> = (1..n).map(|j| (j, j - 1)).collect();
    build_adjacency(n, &edges, false)
}

/// Gives every blend weight a nonzero value so the attention path is live.
fn wake_alphas(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<usize> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.name.ends_with(".alpha"))
        .map(|(i, _)| i)
        .collect();
    for id in ids {
        *store.value_mut(id) = Tensor::full(&[1], rng.random_range(0.3..0.9));
    }
}

/// Checks `x` and the trainable entries of `store` accepted by `keep`
/// (by position among trainable entries) through `forward`,
/// reduced to a scalar by a fixed random projection (or used directly
/// when `forward` already returns a scalar).
fn check_layer(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    seed: u64,
    coords: usize,
    eps: f64,
    keep: impl Fn(usize) -> bool,
    forward: impl Fn(&mut Forward<'_, f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let ids: Vec<usize> = store
        .trainable()
        .enumerate()
        .filter(|&(k, _)| keep(k))
        .map(|(_, id)| id)
        .collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let objective = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut bind = vec![None; store.len()];
        for (k, &id) in ids.iter().enumerate() {
            bind[id] = Some(vars[k + 1]);
        }
        let mut f = Forward::new(tape, store, true, true).with_bindings(bind)?;
        let y = forward(&mut f, vars[0])?;
        if f.tape.value(y).numel() == 1 {
            return Ok(y);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = normal_tensor(f.tape.shape(y), &mut rng);
        f.tape.dot_const(y, &w)
    };
    let cfg = GradCheckConfig {
        max_coords_per_input: Some(coords),
        seed,
        eps,
        ..GradCheckConfig::default()
    };
    grad_check(objective, &inputs, &cfg)
}

/// `op` on `inputs`, reduced to a scalar by a fixed random projection.
fn op_case(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let objective = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let y = op(tape, v)?;
        if tape.value(y).numel() == 1 {
            return Ok(y);
        }
        let w = normal_tensor(tape.shape(y), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x0b5));
        tape.dot_const(y, &w)
    };
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    grad_check(objective, &inputs, &cfg)
}

/// Every differentiable tape op on small random operands.
fn op_cases(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| normal_tensor(shape, &mut r);
    let (a, b, c) = (t(&[2, 3, 4]), t(&[2, 3, 4]), t(&[2, 3, 4]));
    let alpha = t(&[1]);
    let (m1, m2, m3) = (t(&[2, 3, 4]), t(&[2, 4, 5]), t(&[2, 5, 4]));
    let (lin_x, lin_w, lin_b) = (t(&[3, 4]), t(&[5, 4]), t(&[5]));
    let x4 = t(&[2, 3, 7, 4]);
    let (cw, pw, pb) = (t(&[2, 3, 3, 1]), t(&[2, 3]), t(&[2]));
    let (gamma, beta) = (t(&[3]), t(&[3]));
    let logits = t(&[4, 5]);
    let coords = t(&[2, 3, 5, 4]);
    let parent = [0, 0, 1, 1];
    let labels = [0, 3, 4, 1];
    let (run_mean, run_var) = ([0.1, -0.2, 0.3], [0.8, 1.2, 1.5]);
    let mut out = Vec::new();
    let mut push = |name, r: Result<GradCheckReport>| -> Result<()> {
        out.push((name, r?));
        Ok(())
    };
    push("op/add", op_case(seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])))?;
    push("op/sub", op_case(seed, vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])))?;
    push("op/mul", op_case(seed, vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])))?;
    push("op/square", op_case(seed, vec![a.clone()], |t, v| t.square(v[0])))?;
    push("op/mul_scalar", op_case(seed, vec![a.clone()], |t, v| t.mul_scalar(v[0], -1.3)))?;
    push("op/scale", op_case(seed, vec![a.clone(), alpha], |t, v| t.scale(v[0], v[1])))?;
    push("op/add_const", op_case(seed, vec![a.clone()], |t, v| t.add_const(v[0], &c)))?;
    push("op/sum", op_case(seed, vec![a.clone()], |t, v| t.sum(v[0])))?;
    push("op/mean", op_case(seed, vec![a.clone()], |t, v| t.mean(v[0])))?;
    push("op/reshape", op_case(seed, vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4])))?;
    push("op/concat", op_case(seed, vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], 1)))?;
    push("op/narrow", op_case(seed, vec![a.clone()], |t, v| t.narrow(v[0], 2, 1, 2)))?;
    push("op/transpose_last2", op_case(seed, vec![a.clone()], |t, v| t.transpose_last2(v[0])))?;
    push("op/pairwise_sub", op_case(seed, vec![a.clone(), b.clone()], |t, v| t.pairwise_sub(v[0], v[1])))?;
    push("op/relu", op_case(seed, vec![a.clone()], |t, v| t.relu(v[0])))?;
    push("op/tanh", op_case(seed, vec![a], |t, v| t.tanh(v[0])))?;
    push("op/matmul", op_case(seed, vec![m1.clone(), m2], |t, v| t.matmul(v[0], v[1])))?;
    push("op/matmul_nt", op_case(seed, vec![m1, m3], |t, v| t.matmul_nt(v[0], v[1])))?;
    push("op/linear", op_case(seed, vec![lin_x, lin_w, lin_b], |t, v| t.linear(v[0], v[1], Some(v[2]))))?;
    push(
        "op/conv2d",
        op_case(seed, vec![x4.clone(), cw], |t, v| t.conv2d(v[0], v[1], Conv2dSpec::new(2, 2, 1))),
    )?;
    push(
        "op/pointwise_conv",
        op_case(seed, vec![x4.clone(), pw, pb], |t, v| t.pointwise_conv(v[0], v[1], Some(v[2]))),
    )?;
    push("op/temporal_pool", op_case(seed, vec![x4.clone()], |t, v| t.temporal_pool(v[0])))?;
    push("op/global_avg_pool", op_case(seed, vec![x4.clone()], |t, v| t.global_avg_pool(v[0])))?;
    push(
        "op/max_pool_t",
        op_case(seed, vec![x4.clone()], |t, v| t.max_pool_t(v[0], 3, Conv2dSpec::new(2, 1, 1))),
    )?;
    for (name, training) in [("op/batch_norm", true), ("op/batch_norm_eval", false)] {
        push(
            name,
            op_case(seed, vec![x4.clone(), gamma.clone(), beta.clone()], |t, v| {
                let running = RunningStats {
                    mean: &run_mean,
                    var: &run_var,
                };
                Ok(t.batch_norm(v[0], v[1], v[2], running, training)?.0)
            }),
        )?;
    }
    push("op/softmax", op_case(seed, vec![logits.clone()], |t, v| t.softmax(v[0])))?;
    push("op/log_softmax", op_case(seed, vec![logits.clone()], |t, v| t.log_softmax(v[0])))?;
    push("op/nll", op_case(seed, vec![logits.clone()], |t, v| t.nll(v[0], &labels)))?;
    push("op/cross_entropy", op_case(seed, vec![logits.clone()], |t, v| t.cross_entropy(v[0], &labels)))?;
    push(
        "op/person_log_mean",
        op_case(seed, vec![logits], |t, v| {
            let lp = t.log_softmax(v[0])?;
            t.person_log_mean(lp, 2, &[true, true, true, false])
        }),
    )?;
    push("op/bone", op_case(seed, vec![coords.clone()], |t, v| t.bone(v[0], &parent, 3)))?;
    push("op/velocity", op_case(seed, vec![coords], |t, v| t.velocity(v[0], 2)))?;
    Ok(out)
}

fn samg_case(seed: u64, options: SamgOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let samg = Samg::build(&mut Builder::new(&mut store, &mut rng, "samg"), 4, 6, options)?;
    wake_alphas(&mut store, &mut rng);
    let adj = chain_adjacency(5)?;
    let x = normal_tensor(&[2, 4, 5, 5], &mut rng);
    check_layer(&store, x, seed, 8, 1e-6, |_| true, |f, x| samg.forward(f, x, &adj))
}

fn trm_case(seed: u64, stride: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let trm = Trm::build(&mut Builder::new(&mut store, &mut rng, "trm"), 8, stride, &TrmConfig::default())?;
    let x = normal_tensor(&[2, 8, 9, 4], &mut rng);
    check_layer(&store, x, seed, 8, 1e-6, |_| true, |f, x| trm.forward(f, x))
}

fn strb_case(seed: u64, cin: usize, cout: usize, stride: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = Strb::build(
        &mut Builder::new(&mut store, &mut rng, "strb"),
        &StrbConfig::new(cin, cout, stride),
    )?;
    wake_alphas(&mut store, &mut rng);
    let adj = chain_adjacency(5)?;
    let x = normal_tensor(&[2, cin, 8, 5], &mut rng);
    check_layer(&store, x, seed, 6, 1e-6, |_| true, |f, x| block.forward(f, x, &adj))
}

fn mmdg_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new();
    let parent = vec![0, 0, 1, 1, 3];
    let x = normal_tensor(&[2, 3, 6, 5], &mut rng);
    check_layer(&store, x, seed, 60, 1e-6, |_| true, |f, x| {
        f.tape.assemble_modalities(x, &parent, ModalitySelection::ALL, Layout::BATCH)
    })
}

/// A narrow hands stream on the 25-joint skeleton, two persons (one
/// absent), through the classification loss.
fn stream_case(seed: u64) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::with_width("ntu25", 4, 8)?;
    cfg.persons = 2;
    let topology = cfg.validate()?;
    let sc = cfg.stream(Part::Hands).unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = StreamNet::build(&sc, &topology, &cfg.groups, cfg.num_classes, &mut store, &mut rng)?;
    wake_alphas(&mut store, &mut rng);
    let mut x = normal_tensor(&[4, 3, 8, net.joints()], &mut rng);
    // Sample 1 has only its first person. The absent row is small noise
    // rather than zeros: a constant row ties every max-pool window, which
    // is a genuine kink.
    let row = 3 * 8 * net.joints();
    x.data_mut()[3 * row..].iter_mut().for_each(|v| *v *= 0.01);
    let valid = [true, true, true, false];
    let labels = [rng.random_range(0..4), rng.random_range(0..4)];
    // A deep stack has many ReLU and max-pool kinks; a shorter step
    // crosses fewer of them and the O(1) loss keeps roundoff negligible.
    // Odd and even seeds split the parameter tensors between them.
    check_layer(&store, x, seed, 2, 1e-7, |k| k % 2 == (seed % 2) as usize, |f, x| {
        let out = net.forward(f, x, &valid, 2)?;
        f.tape.nll(out.log_probs, &labels)
    })
}

/// Runs the checks for `module` (all when `None`) at `seed`.
pub fn run_checks(module: Option<CheckModule>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<GradCheckReport>| -> Result<()> {
        out.push(CheckResult {
            name: name.into(),
            seed,
            report: r?,
        });
        Ok(())
    };
    let wanted = |m: CheckModule| module.map_or(true, |w| w == m);
    if wanted(CheckModule::Ops) {
        for (name, report) in op_cases(seed)? {
            push(name, Ok(report))?;
        }
    }
    if wanted(CheckModule::Samg) {
        push("samg", samg_case(seed, SamgOptions::default()))?;
        push(
            "samg/shared+pointwise",
            samg_case(
                seed,
                SamgOptions {
                    squash: Squash::Pointwise,
                    maps: AttentionMaps::Shared,
                    ..SamgOptions::default()
                },
            ),
        )?;
    }
    if wanted(CheckModule::Trm) {
        push("trm", trm_case(seed, 1))?;
        push("trm/stride2", trm_case(seed, 2))?;
    }
    if wanted(CheckModule::Strb) {
        push("strb/projection", strb_case(seed, 4, 8, 2))?;
        push("strb/identity", strb_case(seed, 8, 8, 1))?;
    }
    if wanted(CheckModule::Mmdg) {
        push("mmdg", mmdg_case(seed))?;
    }
    if wanted(CheckModule::Stream) {
        push("stream/hands+loss", stream_case(seed))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_at_one_seed() {
        for r in run_checks(None, 11).unwrap() {
            assert!(r.report.passed(), "{} {:?}", r.name, r.report);
            assert!(r.report.checked > 0);
        }
    }

    #[test]
    fn module_names_round_trip() {
        for m in CheckModule::ALL {
            assert_eq!(CheckModule::parse(m.as_str()).unwrap(), m);
        }
        assert!(CheckModule::parse("bogus").is_err());
    }
}
