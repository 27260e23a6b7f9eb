//! The work behind each command, separated from argument parsing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use psumnet_core::accounting::{model_budget, ModelBudget};
use psumnet_core::checks::{run_checks, CheckModule, CheckResult};
use psumnet_core::metrics::EvalReport;
use psumnet_core::model::{build_model, build_stream, Model, ModelConfig};
use psumnet_core::skeleton::{synth_dataset, ActionSequence, FramePad, Part, SynthSpec};
use psumnet_core::train::{
    ablation_variants, evaluate, evaluate_partial, prepare_sequences, run_ablation, AblationRow, EpochRecord,
    PartialPoint, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_stream, read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::{load_config, EffectiveConfig, LoadedConfig, Overrides};
use crate::error::{Error, Result};
use crate::manifest::{load_manifest, save_manifest, DataSplit, ManifestEntry, Splits};
use crate::skj::write_skj;

/// Parses a comma-separated list of numbers, such as fusion weights.
pub fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Usage(format!("malformed {what} {text:?}: {s:?} is not a number")))
        })
        .collect()
}

pub fn parse_weights(text: &str) -> Result<Vec<f64>> {
    let w = parse_list(text, "fusion weights")?;
    if w.iter().any(|&v| v < 0.0) || w.iter().all(|&v| v == 0.0) {
        return Err(Error::Usage(format!(
            "fusion weights {text:?} must be nonnegative and not all zero"
        )));
    }
    Ok(w)
}

pub fn parse_fractions(text: &str) -> Result<Vec<f64>> {
    let f = parse_list(text, "fractions")?;
    if let Some(p) = f.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Usage(format!("fraction {p} outside (0, 1]")));
    }
    Ok(f)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub topology: String,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub frames: usize,
    pub manifest: PathBuf,
}

/// Writes a synthetic dataset under `out`: `samples` clips per class, a
/// third of them for validation.
pub fn synth(out: &Path, spec_in: &SynthSpec, samples: usize) -> Result<SynthSummary> {
    if samples < 3 {
        return Err(Error::Usage(format!("--samples {samples}: need at least 3 per class")));
    }
    let spec = SynthSpec {
        train_per_class: samples - samples / 3,
        val_per_class: samples / 3,
        ..spec_in.clone()
    };
    let data = synth_dataset(&spec)?;
    let mut entries = Vec::with_capacity(data.samples.len());
    let mut counters: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    create_dir(&out.join("train"))?;
    create_dir(&out.join("val"))?;
    for s in &data.samples {
        let split = s.split.as_str();
        let idx = counters.entry((split, s.sequence.label)).or_default();
        let rel = format!("{split}/{:02}_{:04}.skj", s.sequence.label, *idx);
        *idx += 1;
        write_skj(&out.join(&rel), &s.sequence, &spec.topology)?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.sequence.label,
            split: DataSplit::parse(split)?,
        });
    }
    let manifest = out.join("manifest.json");
    save_manifest(&manifest, &entries)?;
    Ok(SynthSummary {
        topology: spec.topology.clone(),
        classes: spec.classes,
        class_names: data.class_names,
        train: spec.train_per_class * spec.classes,
        val: spec.val_per_class * spec.classes,
        frames: spec.frames,
        manifest,
    })
}

fn load_splits(cfg: &LoadedConfig) -> Result<Splits> {
    let topology = cfg.model.validate()?;
    load_manifest(&cfg.manifest)?.load(&topology)
}

fn prepared(cfg: &LoadedConfig, raw: &[ActionSequence]) -> Result<Vec<ActionSequence>> {
    let topology = cfg.model.validate()?;
    let refs: Vec<&ActionSequence> = raw.iter().collect();
    Ok(prepare_sequences(
        &refs,
        &topology,
        cfg.model.window,
        cfg.model.persons,
        FramePad::Loop,
    )?)
}

/// Which streams `train` should fit.
pub fn select_parts(model: &ModelConfig, choice: &str) -> Result<Vec<Part>> {
    if choice == "all" {
        return Ok(model.streams.iter().map(|s| s.part).collect());
    }
    let part = Part::parse(choice).map_err(|_| Error::Usage(format!("unknown stream {choice:?}")))?;
    if model.stream(part).is_none() {
        return Err(Error::Usage(format!("the config has no {part} stream")));
    }
    Ok(vec![part])
}

pub fn checkpoint_path(out: &Path, part: Part) -> PathBuf {
    out.join(format!("{part}.ckpt"))
}

pub fn resume_path(out: &Path, part: Part) -> PathBuf {
    out.join(format!("{part}.last.ckpt"))
}

pub fn log_path(out: &Path, part: Part) -> PathBuf {
    out.join(format!("{part}.log.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub part: Part,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub final_train_acc: f64,
}

fn log_line(r: &EpochRecord) -> String {
    let mut s = serde_json::to_string(r).expect("record serializes");
    s.push('\n');
    s
}

/// Trains the requested streams one after another. Each gets a best
/// checkpoint, a resumable last checkpoint and a JSON-lines log in `out`.
pub fn train(config: &Path, overrides: &Overrides, stream: &str, out: &Path, resume: bool) -> Result<Vec<TrainSummary>> {
    let cfg = load_config(config, overrides)?;
    let parts = select_parts(&cfg.model, stream)?;
    let effective = cfg.effective();
    let hash = effective.hash();
    if resume {
        for &p in &parts {
            let path = resume_path(out, p);
            let ck = read_checkpoint(&path)?;
            if ck.header.config_hash != hash {
                return Err(Error::Usage(format!(
                    "{}: config hash {} does not match the current config ({hash}); refusing to resume",
                    path.display(),
                    ck.header.config_hash
                )));
            }
        }
    }
    create_dir(out)?;
    let splits = load_splits(&cfg)?;
    if splits.train.is_empty() {
        return Err(Error::Core(psumnet_core::Error::Data("training split is empty".into())));
    }
    let train_set = prepared(&cfg, &splits.train)?;
    let val_set = prepared(&cfg, &splits.val)?;
    write_json(&out.join("config.json"), &effective)?;

    let mut summaries = Vec::new();
    for part in parts {
        let (trainer, mut log) = if resume {
            let (ck, stream) = load_stream(&resume_path(out, part))?;
            let state = ck
                .train_state()
                .ok_or_else(|| Error::format(resume_path(out, part), "checkpoint carries no trainer state"))?;
            let best = match state.best_epoch {
                Some(_) => Some(load_stream(&checkpoint_path(out, part))?.1.params),
                None => None,
            };
            let log: String = state.log.iter().map(log_line).collect();
            (Trainer::resume(stream, best, &cfg.train, cfg.model.persons, state)?, log)
        } else {
            let stream = build_stream(&cfg.model, part)?;
            (Trainer::new(stream, &cfg.train, cfg.model.persons)?, String::new())
        };
        let log_file = log_path(out, part);
        fs::write(&log_file, &log).map_err(|e| Error::io(&log_file, e))?;
        let mut last_err = None;
        let outcome = trainer.fit(&train_set, &val_set, |r, t| {
            eprintln!(
                "{part} epoch {:>3} lr {:.5} loss {:.4} train {:.3} val {}",
                r.epoch,
                r.lr,
                r.loss,
                r.train_acc,
                r.val_acc.map_or("-".into(), |v| format!("{v:.3}"))
            );
            let res = (|| -> Result<()> {
                log.push_str(&log_line(r));
                fs::write(&log_file, &log).map_err(|e| Error::io(&log_file, e))?;
                let state = t.state();
                if state.best_epoch == Some(r.epoch) {
                    let best = t.best_params().expect("best weights exist once an epoch ran");
                    let ck = Checkpoint::new(part, &effective, r.epoch, r.val_acc, best, None);
                    write_checkpoint(&checkpoint_path(out, part), &ck)?;
                }
                let ck = Checkpoint::new(part, &effective, r.epoch, r.val_acc, &t.stream().params, Some(&state));
                write_checkpoint(&resume_path(out, part), &ck)
            })();
            res.map_err(|e| {
                let msg = e.to_string();
                last_err = Some(e);
                psumnet_core::Error::Data(msg)
            })
        });
        let outcome = match (outcome, last_err) {
            (Err(_), Some(e)) => return Err(e),
            (r, _) => r?,
        };
        summaries.push(TrainSummary {
            part,
            epochs: outcome.log.len(),
            best_epoch: outcome.best_epoch,
            best_val_acc: outcome.best_val_acc,
            final_train_acc: outcome.log.last().map_or(0.0, |r| r.train_acc),
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub part: Part,
    pub config_hash: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config: EffectiveConfig,
    pub split: DataSplit,
    pub checkpoints: Vec<CheckpointRef>,
    pub report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partial: Option<Vec<PartialPoint>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// One weight per loaded stream, in body, hands, legs order.
    pub weights: Option<Vec<f64>>,
    pub partial: Option<Vec<f64>>,
    pub pad: FramePad,
    pub split: Option<DataSplit>,
}

/// Loads checkpoints into a model matching the config.
pub fn load_model(cfg: &LoadedConfig, checkpoints: &[PathBuf]) -> Result<(Model, Vec<CheckpointRef>)> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("no checkpoints given".into()));
    }
    let mut loaded = Vec::new();
    for path in checkpoints {
        let (ck, stream) = load_stream(path)?;
        if ck.header.config.model != cfg.model {
            return Err(Error::Usage(format!(
                "{}: trained with a different model configuration",
                path.display()
            )));
        }
        if loaded.iter().any(|(p, _, _)| *p == ck.header.part) {
            return Err(Error::Usage(format!("two checkpoints for the {} stream", ck.header.part)));
        }
        let r = CheckpointRef {
            part: ck.header.part,
            config_hash: ck.header.config_hash.clone(),
            epoch: ck.header.epoch,
        };
        loaded.push((ck.header.part, r, stream));
    }
    loaded.sort_by_key(|(p, _, _)| *p);
    let keep: Vec<usize> = (0..cfg.model.streams.len())
        .filter(|&i| loaded.iter().any(|(p, _, _)| *p == cfg.model.streams[i].part))
        .collect();
    let config = ModelConfig {
        streams: keep.iter().map(|&i| cfg.model.streams[i].clone()).collect(),
        fusion_weights: keep.iter().map(|&i| cfg.model.fusion_weights[i]).collect(),
        ..cfg.model.clone()
    };
    let topology = config.validate()?;
    let refs = loaded.iter().map(|(_, r, _)| r.clone()).collect();
    let model = Model {
        config,
        topology,
        streams: loaded.into_iter().map(|(_, _, s)| s).collect(),
    };
    Ok((model, refs))
}

pub fn eval(config: &Path, overrides: &Overrides, checkpoints: &[PathBuf], opts: &EvalOptions) -> Result<EvalOutput> {
    let cfg = load_config(config, overrides)?;
    for p in checkpoints {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
    }
    let (model, refs) = load_model(&cfg, checkpoints)?;
    let weights = match &opts.weights {
        Some(w) if w.len() != model.streams.len() => {
            return Err(Error::Usage(format!(
                "{} fusion weights for {} loaded streams",
                w.len(),
                model.streams.len()
            )))
        }
        Some(w) => w.clone(),
        None => model.config.fusion_weights.clone(),
    };
    let split = opts.split.unwrap_or(cfg.file.data.eval_split);
    let splits = load_splits(&cfg)?;
    let raw: Vec<&ActionSequence> = splits.get(split).iter().collect();
    if raw.is_empty() {
        return Err(Error::Core(psumnet_core::Error::Data(format!(
            "the {split:?} split is empty"
        ))));
    }
    let report = evaluate(&model, &raw, &weights, cfg.train.eval_batch)?;
    let partial = match &opts.partial {
        Some(f) => Some(evaluate_partial(&model, &raw, f, &weights, cfg.train.eval_batch, opts.pad)?),
        None => None,
    };
    Ok(EvalOutput {
        config: cfg.effective(),
        split,
        checkpoints: refs,
        report,
        partial,
    })
}

/// Parameter and multiply-accumulate counts of a freshly built model.
pub fn info(model: &ModelConfig) -> Result<ModelBudget> {
    let built = build_model(model)?;
    Ok(model_budget(&built, model.window)?)
}

pub fn format_budget(b: &ModelBudget) -> String {
    let mut s = format!("{:<8} {:>12} {:>16}\n", "stream", "params", "MACs/person");
    for st in &b.streams {
        s += &format!("{:<8} {:>12} {:>16}\n", st.part.as_str(), st.params, st.macs);
    }
    s += &format!("{:<8} {:>12} {:>16}\n", "total", b.total_params, b.total_macs);
    s += &format!("window {} frames\n", b.window);
    s
}

/// Runs the finite-difference suite at seeds `seed..seed + seeds`.
pub fn gradcheck(module: Option<CheckModule>, seed: u64, seeds: u64) -> Result<Vec<CheckResult>> {
    let mut all = Vec::new();
    for s in seed..seed + seeds {
        all.extend(run_checks(module, s)?);
    }
    Ok(all)
}

pub fn format_check(r: &CheckResult) -> String {
    format!(
        "{:<24} seed {:>3}  max_rel_err {:.3e}  checked {:>4}  kinks {:>2}  {}",
        r.name,
        r.seed,
        r.report.max_rel_err,
        r.report.checked,
        r.report.kinks,
        if r.report.passed() { "ok" } else { "FAIL" }
    )
}

/// Trains what the ablation grid needs and writes the table as CSV.
pub fn ablate(config: &Path, overrides: &Overrides, out: &Path) -> Result<Vec<AblationRow>> {
    let cfg = load_config(config, overrides)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let splits = load_splits(&cfg)?;
    let variants = ablation_variants(&cfg.model)?;
    let train_raw: Vec<&ActionSequence> = splits.train.iter().collect();
    let val_raw: Vec<&ActionSequence> = splits.val.iter().collect();
    let rows = run_ablation(&variants, &train_raw, &val_raw, &cfg.train, |name, part, r| {
        eprintln!("{name} [{part}] epoch {:>3} loss {:.4} train {:.3}", r.epoch, r.loss, r.train_acc);
    })?;
    write_ablation_csv(out, &rows)?;
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `value` as pretty JSON to `out`, or to stdout without one.
pub fn emit_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_json(p, value)
        }
        None => {
            let mut text = serde_json::to_string_pretty(value).expect("value serializes");
            text.push('\n');
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}
