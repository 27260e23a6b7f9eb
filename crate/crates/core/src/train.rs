//! Stream training, evaluation, partial-sequence evaluation and the
//! ablation grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::metrics::{Accuracy, EvalReport};
use crate::mmdg::ModalitySelection;
use crate::model::{argmax_rows, build_stream, Model, ModelConfig, Stream};
use crate::nn::{apply_bn_updates, Forward, ParamStore};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::skeleton::{normalize_sequence_padded, ActionSequence, FramePad, Part, PartGroupSpec, SkeletonTopology};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to `min(5, epochs - 1)`.
    pub warmup_epochs: Option<usize>,
    /// Epochs at which the rate is multiplied by `lr_factor`; defaults to
    /// 60% and 80% of `epochs`.
    pub milestones: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 16,
            epochs: 50,
            warmup_epochs: None,
            milestones: None,
            lr_factor: 0.1,
            seed: 0,
            early_stop: None,
            eval_batch: 64,
        }
    }
}

/// Training ends after the first epoch meeting both thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub train_acc: f64,
    pub val_acc: f64,
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        let mut s = LrSchedule::standard(self.base_lr, self.epochs);
        if let Some(w) = self.warmup_epochs {
            s.warmup_epochs = w;
        }
        if let Some(m) = &self.milestones {
            s.milestones = m.clone();
        }
        s.factor = self.lr_factor;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 || self.epochs == 0 {
            return Err(Error::config("batch sizes and epochs must be positive"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must be in [0, 1) and weight decay nonnegative"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Centres every person, fixes the person count and fits each clip to
/// `window` frames.
pub fn prepare_sequences(
    raw: &[&ActionSequence],
    topology: &SkeletonTopology,
    window: usize,
    persons: usize,
    pad: FramePad,
) -> Result<Vec<ActionSequence>> {
    raw.iter()
        .map(|s| normalize_sequence_padded(&s.with_persons(persons)?, topology, window, pad))
        .collect()
}

fn check_labels(seqs: &[ActionSequence], classes: usize) -> Result<()> {
    match seqs.iter().find(|s| s.label >= classes) {
        Some(s) => Err(Error::Data(format!(
            "label {} but the model has {classes} classes",
            s.label
        ))),
        None => Ok(()),
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Sample order of `epoch`; batches are consecutive chunks of it.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    order
}

/// Resumable trainer state besides the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    /// Set once the early-stop thresholds were met.
    pub stopped: bool,
    /// Optimizer velocity per parameter name.
    pub velocities: Vec<(String, Tensor<f32>)>,
}

/// Trains one stream with momentum SGD.
pub struct Trainer {
    stream: Stream,
    best: Option<ParamStore<f32>>,
    cfg: TrainConfig,
    schedule: LrSchedule,
    sgd: Sgd<f32>,
    persons: usize,
    state: TrainState,
}

pub struct TrainOutcome {
    /// Weights after the final epoch.
    pub last: Stream,
    /// Weights of the epoch with the best validation accuracy (the last
    /// epoch when there is no validation data).
    pub best: Stream,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
}

impl Trainer {
    pub fn new(stream: Stream, cfg: &TrainConfig, persons: usize) -> Result<Self> {
        cfg.validate()?;
        let sgd = Sgd::new(
            SgdConfig {
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            },
            stream.params.len(),
        );
        Ok(Self {
            stream,
            best: None,
            cfg: cfg.clone(),
            schedule: cfg.schedule(),
            sgd,
            persons,
            state: TrainState {
                next_epoch: 0,
                log: Vec::new(),
                best_epoch: None,
                best_val_acc: None,
                stopped: false,
                velocities: Vec::new(),
            },
        })
    }

    /// Continues from `state`, with `best` holding the best weights so far.
    pub fn resume(stream: Stream, best: Option<ParamStore<f32>>, cfg: &TrainConfig, persons: usize, state: TrainState) -> Result<Self> {
        let mut t = Self::new(stream, cfg, persons)?;
        for (name, v) in &state.velocities {
            let id = t
                .stream
                .params
                .id(name)
                .ok_or_else(|| Error::Data(format!("velocity for unknown parameter {name}")))?;
            if v.shape() != t.stream.params.value(id).shape() {
                return Err(Error::shape("resume velocity", v.shape(), t.stream.params.value(id).shape()));
            }
            t.sgd.set_velocity(id, v.clone())?;
        }
        t.best = best;
        t.state = TrainState {
            velocities: Vec::new(),
            ..state
        };
        Ok(t)
    }

    pub fn stream(&self) -> &Stream {
        &self.stream
    }

    pub fn best_params(&self) -> Option<&ParamStore<f32>> {
        self.best.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped || self.state.next_epoch >= self.cfg.epochs
    }

    /// Snapshot for resuming, velocities included.
    pub fn state(&self) -> TrainState {
        let mut s = self.state.clone();
        s.velocities = (0..self.stream.params.len())
            .filter_map(|id| {
                self.sgd
                    .velocity(id)
                    .map(|v| (self.stream.params.entry(id).name.clone(), v.clone()))
            })
            .collect();
        s
    }

    /// One pass over `train` (shuffled), then validation.
    pub fn run_epoch(&mut self, train: &[ActionSequence], val: &[ActionSequence]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let classes = self.stream.net.num_classes;
        check_labels(train, classes)?;
        check_labels(val, classes)?;
        let epoch = self.state.next_epoch;
        let lr = self.schedule.lr_at(epoch);
        let order = epoch_order(self.cfg.seed, epoch, train.len());

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let seqs: Vec<&ActionSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
            let (x, valid) = self.stream.net.prepare::<f32>(&seqs)?;
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &self.stream.params, true, true);
            let xv = f.tape.constant(x);
            let out = self.stream.net.forward(&mut f, xv, &valid, self.persons)?;
            let loss = f.tape.nll(out.log_probs, &labels)?;
            loss_sum += f.tape.value(loss).data()[0] as f64 * labels.len() as f64;
            let logp: Tensor<f64> = f.tape.value(out.log_probs).cast();
            correct += argmax_rows(&logp).iter().zip(&labels).filter(|(p, l)| p == l).count();
            let mut grads = f.tape.backward(loss)?;
            let grads = f.collect_grads(&mut grads);
            let bn = f.take_bn_updates();
            self.sgd.step(&mut self.stream.params, &grads, lr)?;
            apply_bn_updates(&mut self.stream.params, &bn);
        }

        let val_acc = if val.is_empty() {
            None
        } else {
            Some(stream_accuracy(&self.stream, val, self.persons, self.cfg.eval_batch)?.top1)
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        };
        let score = val_acc.unwrap_or(f64::INFINITY);
        if self.state.best_val_acc.map_or(true, |b| score >= b) || val_acc.is_none() {
            self.state.best_val_acc = val_acc;
            self.state.best_epoch = Some(epoch);
            self.best = Some(self.stream.params.clone());
        }
        if let Some(stop) = self.cfg.early_stop {
            if record.train_acc >= stop.train_acc && val_acc.map_or(true, |v| v >= stop.val_acc) {
                self.state.stopped = true;
            }
        }
        self.state.log.push(record.clone());
        self.state.next_epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs; `on_epoch` sees each record as it lands.
    pub fn fit(
        mut self,
        train: &[ActionSequence],
        val: &[ActionSequence],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<TrainOutcome> {
        while !self.is_done() {
            let r = self.run_epoch(train, val)?;
            on_epoch(&r, &self)?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let best_params = self
            .best
            .ok_or_else(|| Error::Data("no epoch has been trained".into()))?;
        Ok(TrainOutcome {
            best: Stream {
                net: self.stream.net.clone(),
                params: best_params,
            },
            last: self.stream,
            log: self.state.log,
            best_epoch: self.state.best_epoch.unwrap_or(0),
            best_val_acc: self.state.best_val_acc,
        })
    }
}

/// Trains `part` of `config` from its seeded initialisation.
pub fn train_stream(
    config: &ModelConfig,
    part: Part,
    train: &[ActionSequence],
    val: &[ActionSequence],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
) -> Result<TrainOutcome> {
    let stream = build_stream(config, part)?;
    Trainer::new(stream, cfg, config.persons)?.fit(train, val, on_epoch)
}

/// Accuracy of a single stream on prepared sequences.
pub fn stream_accuracy(stream: &Stream, seqs: &[ActionSequence], persons: usize, batch: usize) -> Result<Accuracy> {
    let refs: Vec<&ActionSequence> = seqs.iter().collect();
    let scores = stream.scores(&refs, persons, batch)?;
    let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
    Accuracy::new(&labels, &argmax_rows(&scores.probs), stream.net.num_classes)
}

/// Scores prepared sequences with every stream and their fusion.
pub fn evaluate_prepared(model: &Model, seqs: &[ActionSequence], weights: &[f64], batch: usize) -> Result<EvalReport> {
    let k = model.config.num_classes;
    check_labels(seqs, k)?;
    let refs: Vec<&ActionSequence> = seqs.iter().collect();
    let scores = model.predict(&refs, weights, batch)?;
    let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
    let mut streams = BTreeMap::new();
    for (part, probs) in &scores.per_stream {
        streams.insert(*part, Accuracy::new(&labels, &argmax_rows(probs), k)?);
    }
    Ok(EvalReport {
        samples: seqs.len(),
        fusion_weights: model.streams.iter().map(|s| s.part()).zip(weights.iter().copied()).collect(),
        fused: Accuracy::new(&labels, &argmax_rows(&scores.fused), k)?,
        streams,
    })
}

/// Normalises raw clips the same way training does, then evaluates.
pub fn evaluate(model: &Model, raw: &[&ActionSequence], weights: &[f64], batch: usize) -> Result<EvalReport> {
    let c = &model.config;
    let seqs = prepare_sequences(raw, &model.topology, c.window, c.persons, FramePad::Loop)?;
    evaluate_prepared(model, &seqs, weights, batch)
}

/// Fractions used for the early-observation curve.
pub const PARTIAL_FRACTIONS: [f64; 9] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialPoint {
    pub fraction: f64,
    /// Frames kept, summed over all clips.
    pub frames_kept: u64,
    pub top1: f64,
    pub report: EvalReport,
}

/// Accuracy when only the first `ceil(p * T)` frames of each clip are
/// observed. Truncation happens before normalisation and windowing.
pub fn evaluate_partial(
    model: &Model,
    raw: &[&ActionSequence],
    fractions: &[f64],
    weights: &[f64],
    batch: usize,
    pad: FramePad,
) -> Result<Vec<PartialPoint>> {
    let c = &model.config;
    fractions
        .iter()
        .map(|&p| {
            let cut = raw.iter().map(|s| s.truncate(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ActionSequence> = cut.iter().collect();
            let seqs = prepare_sequences(&refs, &model.topology, c.window, c.persons, pad)?;
            let report = evaluate_prepared(model, &seqs, weights, batch)?;
            Ok(PartialPoint {
                fraction: p,
                frames_kept: cut.iter().map(|s| s.frames() as u64).sum(),
                top1: report.fused.top1,
                report,
            })
        })
        .collect()
}

/// One row of the ablation grid: a model configuration and the streams it
/// fuses.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub params: usize,
    pub top1: f64,
}

fn restrict(base: &ModelConfig, parts: &[Part]) -> ModelConfig {
    let keep: Vec<usize> = (0..base.streams.len())
        .filter(|&i| parts.contains(&base.streams[i].part))
        .collect();
    ModelConfig {
        streams: keep.iter().map(|&i| base.streams[i].clone()).collect(),
        fusion_weights: keep.iter().map(|&i| base.fusion_weights[i]).collect(),
        ..base.clone()
    }
}

/// Single streams, stream pairs, all streams, disjoint locally rooted
/// groups (where defined for the topology) and one row per input modality.
pub fn ablation_variants(base: &ModelConfig) -> Result<Vec<AblationVariant>> {
    base.validate()?;
    let parts: Vec<Part> = base.streams.iter().map(|s| s.part).collect();
    let label = |ps: &[Part]| ps.iter().map(|p| p.as_str()).collect::<Vec<_>>().join("+");
    let mut out = Vec::new();
    for &p in &parts {
        out.push(AblationVariant {
            name: label(&[p]),
            config: restrict(base, &[p]),
        });
    }
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            if parts.len() > 2 {
                let pair = [parts[i], parts[j]];
                out.push(AblationVariant {
                    name: label(&pair),
                    config: restrict(base, &pair),
                });
            }
        }
    }
    if parts.len() > 1 {
        out.push(AblationVariant {
            name: label(&parts),
            config: base.clone(),
        });
    }
    if let Ok(groups) = PartGroupSpec::disjoint(&base.topology) {
        let config = ModelConfig { groups, ..base.clone() };
        if config.validate().is_ok() {
            out.push(AblationVariant {
                name: format!("disjoint:{}", label(&parts)),
                config,
            });
        }
    }
    for (name, sel) in [
        ("joint", ModalitySelection::JOINT),
        ("bone", ModalitySelection::BONE),
        ("joint_vel", ModalitySelection::JOINT_VEL),
        ("bone_vel", ModalitySelection::BONE_VEL),
    ] {
        let mut config = base.clone();
        for s in &mut config.streams {
            s.modalities = sel;
        }
        out.push(AblationVariant {
            name: format!("modality:{name}"),
            config,
        });
    }
    Ok(out)
}

/// Trains every distinct stream the variants need (once each), then
/// evaluates each variant on `val`.
pub fn run_ablation(
    variants: &[AblationVariant],
    train_raw: &[&ActionSequence],
    val_raw: &[&ActionSequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&str, Part, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let mut cache: Vec<(ModelConfig, Stream)> = Vec::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let topology = v.config.validate()?;
        let c = &v.config;
        let train = prepare_sequences(train_raw, &topology, c.window, c.persons, FramePad::Loop)?;
        let val = prepare_sequences(val_raw, &topology, c.window, c.persons, FramePad::Loop)?;
        let mut streams = Vec::with_capacity(c.streams.len());
        for sc in &c.streams {
            // Streams are shared across variants when everything that
            // shapes their training matches.
            let key = ModelConfig {
                streams: alloc::vec![sc.clone()],
                fusion_weights: alloc::vec![1.0],
                ..c.clone()
            };
            let hit = cache.iter().find(|(k, _)| *k == key).map(|(_, s)| s.clone());
            let stream = match hit {
                Some(s) => s,
                None => {
                    let out = train_stream(&key, sc.part, &train, &val, cfg, |r, _| {
                        progress(&v.name, sc.part, r);
                        Ok(())
                    })?;
                    cache.push((key, out.best.clone()));
                    out.best
                }
            };
            streams.push(stream);
        }
        let model = Model {
            config: c.clone(),
            topology,
            streams,
        };
        let report = evaluate_prepared(&model, &val, &c.fusion_weights, cfg.eval_batch)?;
        rows.push(AblationRow {
            config: v.name.clone(),
            params: model.streams.iter().map(|s| s.params.count_params()).sum(),
            top1: report.fused.top1,
        });
    }
    Ok(rows)
}
