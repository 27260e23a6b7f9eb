//! Part streams and their late fusion.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mmdg::{Layout, ModalitySelection};
use crate::nn::{BatchNorm, Builder, Forward, Linear, ParamStore};
use crate::ops::softmax_rows;
use crate::scalar::Scalar;
use crate::skeleton::{
    stack_batch, to_local_frame, ActionSequence, JointGraph, Part, PartGroupSpec, SkeletonTopology, COORDS,
    DEFAULT_WINDOW,
};
use crate::strb::{SamgOptions, StrbConfig, Strm, TrmConfig};
use crate::tensor::Tensor;

/// Base block width of the shipped streams; widths double twice.
pub const BASE_WIDTH: usize = 88;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub part: Part,
    pub depth: usize,
    /// Output width of each block.
    pub channels: Vec<usize>,
    /// Temporal stride of each block (1 or 2).
    pub strides: Vec<usize>,
    #[serde(default)]
    pub modalities: ModalitySelection,
    #[serde(default)]
    pub samg: SamgOptions,
    #[serde(default)]
    pub trm: TrmConfig,
}

impl StreamConfig {
    /// Shipped schedule for `part` with base width `w`: body 10 blocks,
    /// hands 6, legs 4.
    pub fn standard(part: Part, w: usize) -> Self {
        let (channels, strides) = match part {
            Part::Body => (
                vec![w, w, w, w, 2 * w, 2 * w, 2 * w, 4 * w, 4 * w, 4 * w],
                vec![1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
            ),
            Part::Hands => (vec![w, w, 2 * w, 2 * w, 4 * w, 4 * w], vec![1, 1, 2, 1, 2, 1]),
            Part::Legs => (vec![w, w, 2 * w, 4 * w], vec![1, 2, 2, 1]),
        };
        Self {
            part,
            depth: channels.len(),
            channels,
            strides,
            modalities: ModalitySelection::ALL,
            samg: SamgOptions::default(),
            trm: TrmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config(format!("{} stream has zero depth", self.part)));
        }
        if self.channels.len() != self.depth || self.strides.len() != self.depth {
            return Err(Error::config(format!(
                "{} stream: depth {} but {} widths and {} strides",
                self.part,
                self.depth,
                self.channels.len(),
                self.strides.len()
            )));
        }
        self.modalities.validate()
    }

    pub fn input_channels(&self) -> usize {
        self.modalities.channels(COORDS)
    }

    pub fn block_configs(&self) -> Vec<StrbConfig> {
        let mut cin = self.input_channels();
        self.channels
            .iter()
            .zip(&self.strides)
            .map(|(&cout, &stride)| {
                let c = StrbConfig {
                    cin,
                    cout,
                    stride,
                    samg: self.samg,
                    trm: self.trm.clone(),
                };
                cin = cout;
                c
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weighted mean of class probabilities.
    #[default]
    Probabilities,
    /// Softmax of the weighted mean of logits.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub topology: String,
    pub groups: PartGroupSpec,
    pub streams: Vec<StreamConfig>,
    /// One nonnegative weight per entry of `streams`.
    pub fusion_weights: Vec<f64>,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    pub num_classes: usize,
    pub window: usize,
    /// Person slots per sample; absent persons are zero.
    pub persons: usize,
    pub seed: u64,
}

pub fn default_fusion_weight(part: Part) -> f64 {
    match part {
        Part::Body | Part::Hands => 1.0,
        Part::Legs => 0.5,
    }
}

impl ModelConfig {
    /// The shipped configuration for a built-in topology: every non-empty
    /// part group gets its standard stream.
    pub fn standard(topology: &str, num_classes: usize) -> Result<Self> {
        Self::with_width(topology, num_classes, BASE_WIDTH)
    }

    pub fn with_width(topology: &str, num_classes: usize, width: usize) -> Result<Self> {
        let groups = PartGroupSpec::standard(topology)?;
        let parts = groups.present();
        Ok(Self {
            topology: topology.into(),
            streams: parts.iter().map(|&p| StreamConfig::standard(p, width)).collect(),
            fusion_weights: parts.iter().map(|&p| default_fusion_weight(p)).collect(),
            groups,
            fusion_mode: FusionMode::Probabilities,
            num_classes,
            window: DEFAULT_WINDOW,
            persons: 2,
            seed: 0,
        })
    }

    pub fn stream(&self, part: Part) -> Option<&StreamConfig> {
        self.streams.iter().find(|s| s.part == part)
    }

    pub fn validate(&self) -> Result<SkeletonTopology> {
        let topology = SkeletonTopology::by_name(&self.topology)?;
        self.groups.validate(&topology)?;
        if self.streams.is_empty() || self.streams.len() > 3 {
            return Err(Error::config("a model needs one to three streams"));
        }
        for (i, s) in self.streams.iter().enumerate() {
            s.validate()?;
            if self.streams[..i].iter().any(|o| o.part == s.part) {
                return Err(Error::config(format!("two streams for part {}", s.part)));
            }
            if self.groups.group(s.part).is_empty() {
                return Err(Error::config(format!(
                    "{} stream configured but its part group is empty",
                    s.part
                )));
            }
        }
        validate_weights(&self.fusion_weights, self.streams.len())?;
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.window < 2 || self.persons == 0 {
            return Err(Error::config("window must be at least 2 and persons positive"));
        }
        Ok(topology)
    }
}

fn validate_weights(weights: &[f64], streams: usize) -> Result<()> {
    if weights.len() != streams {
        return Err(Error::config(format!(
            "{} fusion weights for {streams} streams",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("fusion weights must be finite and nonnegative"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::config("fusion weights are all zero"));
    }
    Ok(())
}

/// Architecture of one part stream: modality generator, input
/// normalisation, block stack, pooling and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamNet {
    pub config: StreamConfig,
    pub graph: JointGraph,
    pub local_frame: bool,
    pub adjacency: Tensor<f64>,
    pub input_bn: BatchNorm,
    pub strm: Strm,
    pub fc: Linear,
    pub num_classes: usize,
}

/// Forward results for a batch of `B` samples.
pub struct StreamOutput {
    /// Person-averaged log-probabilities `[B, K]`.
    pub log_probs: Var,
    /// Per-person logits `[B * M, K]`.
    pub logits: Var,
}

impl StreamNet {
    pub fn build<S: Scalar>(
        config: &StreamConfig,
        topology: &SkeletonTopology,
        groups: &PartGroupSpec,
        num_classes: usize,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let graph = groups.subgraph(topology, config.part)?;
        let adjacency = graph.adjacency(groups.local_frame)?;
        let mut b = Builder::new(store, rng, config.part.as_str());
        let input_bn = BatchNorm::build(&mut b.scope("input_bn"), config.input_channels())?;
        let strm = Strm::build(&mut b, &config.block_configs())?;
        let last = *config.channels.last().unwrap();
        let fc = Linear::build(&mut b.scope("fc"), last, num_classes)?;
        Ok(Self {
            config: config.clone(),
            graph,
            local_frame: groups.local_frame,
            adjacency,
            input_bn,
            strm,
            fc,
            num_classes,
        })
    }

    pub fn joints(&self) -> usize {
        self.graph.len()
    }

    /// Selects this stream's joints from full-skeleton sequences and stacks
    /// them into `[B * M, 3, T, N]` plus per-row presence flags.
    pub fn prepare<S: Scalar>(&self, seqs: &[&ActionSequence]) -> Result<(Tensor<S>, Vec<bool>)> {
        let mut picked = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut coords = s.coords.index_select(2, &self.graph.joints)?;
            if self.local_frame {
                coords = to_local_frame(&coords, &self.graph)?;
            }
            picked.push(ActionSequence {
                coords,
                label: s.label,
                meta: s.meta.clone(),
            });
        }
        let refs: Vec<&ActionSequence> = picked.iter().collect();
        stack_batch(&refs)
    }

    /// Runs the stream on a prepared batch `x[B * M, 3, T, N]`.
    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var, valid: &[bool], persons: usize) -> Result<StreamOutput> {
        let xs = f.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != COORDS || xs[3] != self.joints() {
            return Err(Error::shape("stream input", &xs, &[0, COORDS, 0, self.joints()]));
        }
        let adjacency: Tensor<S> = self.adjacency.cast();
        let h = f
            .tape
            .assemble_modalities(x, &self.graph.parent, self.config.modalities, Layout::BATCH)?;
        let h = self.input_bn.forward(f, h)?;
        let h = self.strm.forward(f, h, &adjacency)?;
        let h = f.tape.global_avg_pool(h)?;
        let logits = self.fc.forward(f, h)?;
        let per_person = f.tape.log_softmax(logits)?;
        let log_probs = f.tape.person_log_mean(per_person, persons, valid)?;
        Ok(StreamOutput { log_probs, logits })
    }
}

/// A stream with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub net: StreamNet,
    pub params: ParamStore<f32>,
}

/// Class scores of one stream for `B` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamScores {
    /// Person-averaged probabilities `[B, K]`.
    pub probs: Tensor<f64>,
    /// Logits averaged over present persons `[B, K]`.
    pub logits: Tensor<f64>,
}

impl Stream {
    pub fn part(&self) -> Part {
        self.net.config.part
    }

    /// Eval-mode scores for already normalised sequences, `batch` at a time.
    pub fn scores(&self, seqs: &[&ActionSequence], persons: usize, batch: usize) -> Result<StreamScores> {
        let k = self.net.num_classes;
        let mut probs = Vec::with_capacity(seqs.len() * k);
        let mut logits = Vec::with_capacity(seqs.len() * k);
        for chunk in seqs.chunks(batch.max(1)) {
            let (x, valid) = self.net.prepare::<f32>(chunk)?;
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &self.params, false, false);
            let xv = f.tape.constant(x);
            let out = self.net.forward(&mut f, xv, &valid, persons)?;
            probs.extend(f.tape.value(out.log_probs).data().iter().map(|&v| num_traits::Float::exp(v as f64)));
            let raw = f.tape.value(out.logits).data();
            for (b, _) in chunk.iter().enumerate() {
                let rows: Vec<usize> = (0..persons).filter(|&m| valid[b * persons + m]).collect();
                let rows = if rows.is_empty() { vec![0] } else { rows };
                for j in 0..k {
                    let s: f64 = rows.iter().map(|&m| raw[(b * persons + m) * k + j] as f64).sum();
                    logits.push(s / rows.len() as f64);
                }
            }
        }
        let n = seqs.len();
        Ok(StreamScores {
            probs: Tensor::new(&[n, k], probs)?,
            logits: Tensor::new(&[n, k], logits)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: SkeletonTopology,
    pub streams: Vec<Stream>,
}

/// Seed for the weights of `part`, so a stream built alone matches the same
/// stream built as part of a full model.
pub fn stream_seed(seed: u64, part: Part) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (part as u64 + 1)
}

pub fn build_stream(config: &ModelConfig, part: Part) -> Result<Stream> {
    let topology = config.validate()?;
    let sc = config
        .stream(part)
        .ok_or_else(|| Error::config(format!("no {part} stream configured")))?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, part));
    let net = StreamNet::build(sc, &topology, &config.groups, config.num_classes, &mut params, &mut rng)?;
    Ok(Stream { net, params })
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    let topology = config.validate()?;
    let streams = config
        .streams
        .iter()
        .map(|s| build_stream(config, s.part))
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: config.clone(),
        topology,
        streams,
    })
}

impl Model {
    pub fn stream(&self, part: Part) -> Option<&Stream> {
        self.streams.iter().find(|s| s.part() == part)
    }

    pub fn stream_mut(&mut self, part: Part) -> Option<&mut Stream> {
        self.streams.iter_mut().find(|s| s.part() == part)
    }

    /// Per-stream and fused scores for normalised sequences.
    pub fn predict(&self, seqs: &[&ActionSequence], weights: &[f64], batch: usize) -> Result<PredictionScores> {
        validate_weights(weights, self.streams.len())?;
        let mut per_stream = BTreeMap::new();
        let mut logits = Vec::new();
        for s in &self.streams {
            let sc = s.scores(seqs, self.config.persons, batch)?;
            per_stream.insert(s.part(), sc.probs);
            logits.push((s.part(), sc.logits));
        }
        let fused = match self.config.fusion_mode {
            FusionMode::Probabilities => {
                let ordered: Vec<&Tensor<f64>> = self.streams.iter().map(|s| &per_stream[&s.part()]).collect();
                fuse(&ordered, weights)?
            }
            FusionMode::Logits => {
                let ordered: Vec<&Tensor<f64>> = logits.iter().map(|(_, l)| l).collect();
                let mean = fuse_unnormalised(&ordered, weights)?;
                let k = mean.shape()[1];
                Tensor::new(mean.shape(), softmax_rows(mean.data(), k))?
            }
        };
        Ok(PredictionScores { per_stream, fused })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionScores {
    pub per_stream: BTreeMap<Part, Tensor<f64>>,
    pub fused: Tensor<f64>,
}

fn fuse_unnormalised(scores: &[&Tensor<f64>], weights: &[f64]) -> Result<Tensor<f64>> {
    validate_weights(weights, scores.len())?;
    let shape = scores[0].shape().to_vec();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; scores[0].numel()];
    for (s, &w) in scores.iter().zip(weights) {
        if s.shape() != &shape[..] {
            return Err(Error::shape("fuse", s.shape(), &shape));
        }
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(s.data()) {
            *o += w * v;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Tensor::new(&shape, out)
}

/// `sum_i w_i * scores_i / sum_i w_i`. Zero-weight streams are skipped
/// entirely, so a one-hot weight vector returns that stream's scores
/// exactly.
pub fn fuse(scores: &[&Tensor<f64>], weights: &[f64]) -> Result<Tensor<f64>> {
    if scores.is_empty() {
        return Err(Error::config("nothing to fuse"));
    }
    let nonzero: Vec<usize> = (0..weights.len().min(scores.len())).filter(|&i| weights[i] != 0.0).collect();
    validate_weights(weights, scores.len())?;
    if let [only] = nonzero[..] {
        return Ok(scores[only].clone());
    }
    fuse_unnormalised(scores, weights)
}

/// Row-wise argmax.
pub fn argmax_rows(t: &Tensor<f64>) -> Vec<usize> {
    let k = *t.shape().last().unwrap();
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_hand_arithmetic() {
        let body = Tensor::from_f64(&[1, 2], &[0.7, 0.3]).unwrap();
        let hands = Tensor::from_f64(&[1, 2], &[0.2, 0.8]).unwrap();
        let f = fuse(&[&body, &hands], &[1.0, 1.0]).unwrap();
        assert!((f.data()[0] - 0.45).abs() < 1e-15 && (f.data()[1] - 0.55).abs() < 1e-15);
        assert_eq!(argmax_rows(&f), vec![1]);
        assert_eq!(fuse(&[&body, &hands], &[1.0, 0.0]).unwrap(), body);
        let scaled = fuse(&[&body, &hands], &[3.0, 3.0]).unwrap();
        assert!(scaled.max_abs_diff(&f).unwrap() < 1e-15);
        assert!(fuse(&[&body, &hands], &[1.0]).is_err());
        assert!(fuse(&[&body, &hands], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn standard_depths_and_joints() {
        let cfg = ModelConfig::standard("ntu25", 60).unwrap();
        let depths: Vec<usize> = cfg.streams.iter().map(|s| s.depth).collect();
        assert_eq!(depths, vec![10, 6, 4]);
        let topo = cfg.validate().unwrap();
        let joints: Vec<usize> = cfg
            .streams
            .iter()
            .map(|s| cfg.groups.subgraph(&topo, s.part).unwrap().len())
            .collect();
        assert_eq!(joints, vec![25, 13, 9]);
        let shrec = ModelConfig::standard("shrec22", 14).unwrap();
        assert_eq!(shrec.streams.len(), 1);
        assert_eq!(shrec.streams[0].part, Part::Hands);
    }

    #[test]
    fn depth_mismatch_rejected() {
        let mut cfg = ModelConfig::with_width("ntu25", 4, 8).unwrap();
        cfg.streams[0].depth = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::with_width("ntu25", 5, 8).unwrap();
        let a = build_stream(&cfg, Part::Legs).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(&a, b.stream(Part::Legs).unwrap());
        let other = ModelConfig { seed: 1, ..cfg };
        assert_ne!(a.params, build_stream(&other, Part::Legs).unwrap().params);
    }

    #[test]
    fn scores_are_distributions() {
        let cfg = ModelConfig {
            window: 8,
            persons: 1,
            ..ModelConfig::with_width("ntu25", 5, 8).unwrap()
        };
        let model = build_model(&cfg).unwrap();
        let seq = ActionSequence::new(Tensor::from_fn(&[3, 8, 25, 1], |i| ((i * 7) % 11) as f32 * 0.05), 0).unwrap();
        let p = model.predict(&[&seq], &cfg.fusion_weights, 4).unwrap();
        for t in p.per_stream.values().chain([&p.fused]) {
            assert_eq!(t.shape(), &[1, 5]);
            assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
