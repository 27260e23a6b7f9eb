//! Named parameter storage and the small layers the network is built from.
//!
//! Layers hold indices into a [`ParamStore`] rather than tensors, so one
//! architecture description runs against either precision of the same
//! weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, Conv2dSpec, RunningStats, BN_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Param,
    /// Updated outside the optimizer (running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, kind: ParamKind) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, kind });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: usize) -> &Entry<S> {
        &self.entries[id]
    }

    pub fn value(&self, id: usize) -> &Tensor<S> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.entries[id].value
    }

    pub fn entries(&self) -> &[Entry<S>] {
        &self.entries
    }

    /// Ids of trainable entries, in insertion order.
    pub fn trainable(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Param)
            .map(|(i, _)| i)
    }

    /// Total element count of trainable entries.
    pub fn count_params(&self) -> usize {
        self.trainable().map(|i| self.entries[i].value.numel()).sum()
    }

    /// Trainable element count of entries whose name starts with `prefix`.
    pub fn count_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Param && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("assign", value.shape(), slot.shape()));
        }
        *slot = value;
        Ok(())
    }
}

/// Binds store entries to tape leaves for one forward pass.
///
/// Parameters become leaves on first use. Batch-norm layers record the
/// batch statistics they observe in training mode; fold them in with
/// [`apply_bn_updates`].
pub struct Forward<'a, S> {
    pub tape: &'a mut Tape<S>,
    store: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
    pub training: bool,
    track: bool,
    bn_updates: Vec<(usize, usize, BatchStats<S>)>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    /// `track` controls whether parameters receive gradients.
    pub fn new(tape: &'a mut Tape<S>, store: &'a ParamStore<S>, training: bool, track: bool) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            training,
            track,
            bn_updates: Vec::new(),
        }
    }

    /// Uses `vars` (one per store entry, or `None`) instead of fresh leaves.
    /// Lets a caller own the leaves, as the gradient checker does.
    pub fn with_bindings(mut self, vars: Vec<Option<Var>>) -> Result<Self> {
        if vars.len() != self.store.len() {
            return Err(Error::shape("bindings", &[vars.len()], &[self.store.len()]));
        }
        self.bound = vars;
        Ok(self)
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let e = &self.store.entries[id];
        let v = self
            .tape
            .leaf(e.value.clone(), self.track && e.kind == ParamKind::Param);
        self.bound[id] = Some(v);
        v
    }

    /// `(entry id, leaf)` for every entry used so far.
    pub fn bindings(&self) -> Vec<(usize, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }

    /// Gradient of every trainable entry used in the pass, by entry id.
    pub fn collect_grads(&self, grads: &mut Gradients<S>) -> Vec<(usize, Tensor<S>)> {
        self.bindings()
            .into_iter()
            .filter(|&(i, _)| self.store.entries[i].kind == ParamKind::Param)
            .filter_map(|(i, v)| grads.take(v).map(|g| (i, g)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(usize, usize, BatchStats<S>)> {
        core::mem::take(&mut self.bn_updates)
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn apply_bn_updates<S: Scalar>(store: &mut ParamStore<S>, updates: &[(usize, usize, BatchStats<S>)]) {
    let m = S::from_f64_lossy(BN_MOMENTUM);
    for (mean_id, var_id, stats) in updates {
        let mut mean = store.value(*mean_id).clone();
        let mut var = store.value(*var_id).clone();
        stats.fold_into(mean.data_mut(), var.data_mut(), m);
        *store.value_mut(*mean_id) = mean;
        *store.value_mut(*var_id) = var;
    }
}

/// Builds layers under a dotted name prefix.
pub struct Builder<'a, S, R> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, S: Scalar, R: Rng> Builder<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// A builder for `prefix.sub`.
    pub fn scope(&mut self, sub: &str) -> Builder<'_, S, R> {
        let prefix = self.name(sub);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, leaf: &str, value: Tensor<S>, kind: ParamKind) -> Result<usize> {
        let name = self.name(leaf);
        self.store.add(name, value, kind)
    }

    /// Normal draws with standard deviation `sqrt(2 / fan_out)`.
    pub fn kaiming_fan_out(&mut self, shape: &[usize], fan_out: usize) -> Tensor<S> {
        let std = num_traits::Float::sqrt(2.0 / fan_out as f64);
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| S::from_f64_lossy(dist.sample(self.rng)))
    }

    /// Uniform draws in `±1/sqrt(fan_in)`.
    pub fn uniform_fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        let bound = 1.0 / num_traits::Float::sqrt(fan_in as f64);
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Tensor::from_fn(shape, |_| S::from_f64_lossy(dist.sample(self.rng)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    pub channels: usize,
}

impl BatchNorm {
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.add("weight", Tensor::ones(&[channels]), ParamKind::Param)?,
            beta: b.add("bias", Tensor::zeros(&[channels]), ParamKind::Param)?,
            mean: b.add("running_mean", Tensor::zeros(&[channels]), ParamKind::Buffer)?,
            var: b.add("running_var", Tensor::ones(&[channels]), ParamKind::Buffer)?,
            channels,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let store = f.store;
        let running = RunningStats {
            mean: store.value(self.mean).data(),
            var: store.value(self.var).data(),
        };
        let (y, stats) = f.tape.batch_norm(x, g, b, running, f.training)?;
        if let Some(s) = stats {
            f.bn_updates.push((self.mean, self.var, s));
        }
        Ok(y)
    }
}

/// 1x1 convolution, optionally with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pointwise {
    pub weight: usize,
    pub bias: Option<usize>,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let w = b.kaiming_fan_out(&[cout, cin], cout);
        let weight = b.add("weight", w, ParamKind::Param)?;
        let bias = if bias {
            Some(b.add("bias", Tensor::zeros(&[cout]), ParamKind::Param)?)
        } else {
            None
        };
        Ok(Self { weight, bias, cin, cout })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        f.tape.pointwise_conv(x, w, b)
    }

    pub fn params(&self) -> usize {
        self.cin * self.cout + self.bias.map_or(0, |_| self.cout)
    }
}

/// Temporal convolution with a `kt x 1` kernel and no bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalConv {
    pub weight: usize,
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub spec: Conv2dSpec,
}

impl TemporalConv {
    pub fn build<S: Scalar, R: Rng>(
        b: &mut Builder<'_, S, R>,
        cin: usize,
        cout: usize,
        kt: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let w = b.kaiming_fan_out(&[cout, cin, kt, 1], cout * kt);
        let weight = b.add("weight", w, ParamKind::Param)?;
        Ok(Self {
            weight,
            cin,
            cout,
            kt,
            spec,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        f.tape.conv2d(x, w, self.spec)
    }
}

/// Fully connected layer with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, cin: usize, cout: usize) -> Result<Self> {
        let w = b.uniform_fan_in(&[cout, cin], cin);
        let bias = b.uniform_fan_in(&[cout], cin);
        Ok(Self {
            weight: b.add("weight", w, ParamKind::Param)?,
            bias: b.add("bias", bias, ParamKind::Param)?,
            cin,
            cout,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.linear(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::zeros(&[2]), ParamKind::Param).unwrap();
        assert!(s.add("a.weight", Tensor::zeros(&[2]), ParamKind::Param).is_err());
    }

    #[test]
    fn fc_256_to_60_has_15420_params() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut s, &mut rng, "fc");
        Linear::build(&mut b, 256, 60).unwrap();
        assert_eq!(s.count_params(), 15_420);
        assert_eq!(s.id("fc.bias"), Some(1));
    }

    #[test]
    fn buffers_are_not_counted() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        BatchNorm::build(&mut Builder::new(&mut s, &mut rng, "bn"), 4).unwrap();
        assert_eq!(s.count_params(), 8);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm::build(&mut Builder::new(&mut s, &mut rng, "bn"), 1).unwrap();
        let mut tape = Tape::new();
        let updates = {
            let mut f = Forward::new(&mut tape, &s, true, true);
            let x = f.tape.constant(Tensor::from_f64(&[4, 1], &[1., 2., 3., 4.]).unwrap());
            bn.forward(&mut f, x).unwrap();
            f.take_bn_updates()
        };
        apply_bn_updates(&mut s, &updates);
        // batch mean 2.5, unbiased var 5/3
        assert!((s.value(bn.mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((s.value(bn.var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kaiming_scale_is_plausible() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut s, &mut rng, "");
        let w = b.kaiming_fan_out(&[200, 50], 200);
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64;
        assert!((var - 0.01).abs() < 0.001, "{var}");
    }
}
