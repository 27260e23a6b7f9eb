//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.
//!
//! Criteria 6 to 9 share a single synthetic training run of all three
//! streams; criterion 10 drives the built binary.

#[path = "../../core/tests/naive/mod.rs"]
#[allow(dead_code)]
mod naive;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use psumnet_core::accounting::model_budget;
use psumnet_core::checks::run_checks;
use psumnet_core::mmdg::ModalitySelection;
use psumnet_core::model::{build_model, build_stream, Model, ModelConfig, StreamConfig};
use psumnet_core::nn::Forward;
use psumnet_core::skeleton::{
    synth_dataset, ActionSequence, ClassKind, FramePad, Part, PartGroupSpec, Split, SynthDataset, SynthSpec,
};
use psumnet_core::train::{epoch_order, evaluate, evaluate_partial, prepare_sequences, train_stream, TrainConfig, TrainOutcome, PARTIAL_FRACTIONS};
use psumnet_core::Tape;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut kinks, mut worst, mut failed) = (0, 0, 0.0f64, Vec::new());
    for seed in 0..20 {
        for r in run_checks(None, seed).map_err(|e| e.to_string())? {
            checked += r.report.checked;
            kinks += r.report.kinks;
            worst = worst.max(r.report.max_rel_err);
            if !r.report.passed() {
                failed.push(format!("{}@{}", r.name, r.seed));
            }
        }
    }
    let took = start.elapsed();
    verdict(
        failed.is_empty() && took < Duration::from_secs(120),
        format!(
            "20 seeds, {checked} coordinates, {kinks} kinks skipped, max rel err {worst:.2e}, {:.1}s, failures {failed:?}",
            took.as_secs_f64()
        ),
    )
}

fn oracles() -> Outcome {
    let conv = naive::conv2d_sweep();
    let (bone, vel) = naive::modality_sweeps();
    let adj = naive::adjacency_sweep();
    let samg = naive::samg_sweep();
    let sweeps = [("conv", conv), ("bone", bone), ("velocity", vel), ("adjacency", adj), ("samg", samg)];
    let ok = sweeps.iter().all(|(_, s)| s.cases > 0 && s.max_diff <= 1e-10);
    let detail = sweeps
        .iter()
        .map(|(n, s)| format!("{n} {} cases {:.1e}", s.cases, s.max_diff))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(ok, detail)
}

fn structure() -> Outcome {
    let mut problems = Vec::new();
    for (topo, want) in [("ntu25", [25, 13, 9]), ("ntux67", [37, 48, 13])] {
        let groups = PartGroupSpec::standard(topo).map_err(|e| e.to_string())?;
        let got: Vec<usize> = Part::ALL.iter().map(|&p| groups.group(p).len()).collect();
        if got != want {
            problems.push(format!("{topo} groups {got:?}"));
        }
    }
    let model = build_model(&ModelConfig::standard("ntu25", 60).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for (part, depth) in [(Part::Body, 10), (Part::Hands, 6), (Part::Legs, 4)] {
        let built = model.stream(part).map(|s| s.net.strm.depth());
        if StreamConfig::standard(part, 88).depth != depth || built != Some(depth) {
            problems.push(format!("{part} depth {built:?}"));
        }
        let channels = model.stream(part).map(|s| s.net.config.input_channels());
        if channels != Some(12) {
            problems.push(format!("{part} input channels {channels:?}"));
        }
    }
    if ModalitySelection::ALL.channels(3) != 12 {
        problems.push("modality channels".into());
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "groups 25/13/9 and 37/48/13, depths 10/6/4, 12 input channels".into()
        } else {
            problems.join("; ")
        },
    )
}

fn budget() -> Outcome {
    let model = build_model(&ModelConfig::standard("ntu25", 60).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b = model_budget(&model, 64).map_err(|e| e.to_string())?;
    let params: Vec<usize> = b.streams.iter().map(|s| s.params).collect();
    let within = |got: usize, want: f64| (got as f64 / want - 1.0).abs() <= 0.25;
    let ok = params.len() == 3
        && within(params[0], 1.4e6)
        && within(params[1], 0.9e6)
        && within(params[2], 0.5e6)
        && within(b.total_params, 2.8e6)
        && params[0] > params[1]
        && params[1] > params[2];
    verdict(
        ok,
        format!("params {params:?} total {} ({:.2} GMACs per person)", b.total_params, b.total_macs as f64 / 1e9),
    )
}

/// Width and window of the synthetic runs.
fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::with_width("ntu25", 8, 16).unwrap();
    cfg.window = 32;
    cfg.persons = 1;
    cfg
}

struct Trained {
    data: SynthDataset,
    model: Model,
    runs: Vec<(Part, TrainOutcome, Duration)>,
    init_loss: f32,
}

/// Loss of the body stream on the first shuffled batch the trainer sees.
fn first_batch_loss(cfg: &ModelConfig, tc: &TrainConfig, train: &[ActionSequence]) -> psumnet_core::Result<f32> {
    let stream = build_stream(cfg, Part::Body)?;
    let order = epoch_order(tc.seed, 0, train.len());
    let refs: Vec<&ActionSequence> = order.iter().take(tc.batch_size).map(|&i| &train[i]).collect();
    let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
    let (x, valid) = stream.net.prepare::<f32>(&refs)?;
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &stream.params, true, false);
    let xv = f.tape.constant(x);
    let out = stream.net.forward(&mut f, xv, &valid, cfg.persons)?;
    let loss = f.tape.nll(out.log_probs, &labels)?;
    Ok(f.tape.value(loss).data()[0])
}

fn train_all() -> psumnet_core::Result<Trained> {
    let data = synth_dataset(&SynthSpec::default())?;
    let cfg = small_config();
    let tc = TrainConfig::default();
    let train = prepare_sequences(&data.split(Split::Train), &data.topology, cfg.window, cfg.persons, FramePad::Loop)?;
    let val = prepare_sequences(&data.split(Split::Val), &data.topology, cfg.window, cfg.persons, FramePad::Loop)?;
    let init_loss = first_batch_loss(&cfg, &tc, &train)?;
    let mut model = build_model(&cfg)?;
    let mut runs = Vec::new();
    for part in Part::ALL {
        let start = Instant::now();
        let out = train_stream(&cfg, part, &train, &val, &tc, |r, _| {
            eprintln!(
                "  {part} epoch {:>2} loss {:.4} train {:.3} val {:.3}",
                r.epoch,
                r.loss,
                r.train_acc,
                r.val_acc.unwrap_or(f64::NAN)
            );
            Ok(())
        })?;
        *model.stream_mut(part).expect("stream configured") = out.best.clone();
        runs.push((part, out, start.elapsed()));
    }
    Ok(Trained { data, model, runs, init_loss })
}

fn learns(t: &Trained) -> Outcome {
    let expect = (8f32).ln();
    let loss_ok = (t.init_loss / expect - 1.0).abs() <= 0.2;
    let (_, body, took) = t.runs.iter().find(|(p, _, _)| *p == Part::Body).expect("body run");
    let hit = body
        .log
        .iter()
        .find(|r| r.train_acc >= 0.99 && r.val_acc.is_some_and(|v| v >= 0.90));
    let ok = loss_ok && hit.is_some() && *took < Duration::from_secs(600);
    let reached = match hit {
        Some(r) => format!("epoch {} train {:.3} val {:.3}", r.epoch, r.train_acc, r.val_acc.unwrap()),
        None => {
            let last = body.log.last().expect("an epoch ran");
            format!("never; last train {:.3} val {:.3}", last.train_acc, last.val_acc.unwrap_or(f64::NAN))
        }
    };
    verdict(
        ok,
        format!("initial loss {:.3} (ln 8 = {expect:.3}), reached {reached}, {:.0}s", t.init_loss, took.as_secs_f64()),
    )
}

fn val_refs(t: &Trained) -> Vec<&ActionSequence> {
    t.data.split(Split::Val)
}

fn part_specialisation(t: &Trained) -> Outcome {
    let report = evaluate(&t.model, &val_refs(t), &[1.0, 1.0, 1.0], 64).map_err(|e| e.to_string())?;
    let classes = |kind: ClassKind| -> Vec<usize> {
        t.data.kinds.iter().enumerate().filter(|(_, k)| **k == kind).map(|(c, _)| c).collect()
    };
    let (hand, leg) = (classes(ClassKind::HandDominant), classes(ClassKind::LegDominant));
    let acc = |part: Part, cls: &[usize]| report.streams[&part].subset_accuracy(cls);
    let hand_gap = acc(Part::Hands, &hand) - acc(Part::Legs, &hand);
    let leg_gap = acc(Part::Legs, &leg) - acc(Part::Hands, &leg);
    verdict(
        !hand.is_empty() && !leg.is_empty() && hand_gap >= 0.2 && leg_gap >= 0.2,
        format!(
            "hand classes {hand:?}: hands-legs {hand_gap:+.3}; leg classes {leg:?}: legs-hands {leg_gap:+.3}"
        ),
    )
}

fn fusion(t: &Trained) -> Outcome {
    let cfg = &t.model.config;
    let raw = val_refs(t);
    let seqs = prepare_sequences(&raw, &t.model.topology, cfg.window, cfg.persons, FramePad::Loop).map_err(|e| e.to_string())?;
    let refs: Vec<&ActionSequence> = seqs.iter().collect();
    let mut exact = true;
    for (i, part) in Part::ALL.iter().enumerate() {
        let mut w = [0.0; 3];
        w[i] = 1.0;
        let scores = t.model.predict(&refs, &w, 64).map_err(|e| e.to_string())?;
        exact &= scores.fused == scores.per_stream[part];
    }
    let weights: Vec<f64> = Part::ALL.iter().map(|&p| psumnet_core::model::default_fusion_weight(p)).collect();
    let report = evaluate(&t.model, &raw, &weights, 64).map_err(|e| e.to_string())?;
    let best_single = report.streams.values().map(|a| a.top1).fold(0.0, f64::max);
    verdict(
        exact && report.fused.top1 >= best_single - 0.02,
        format!(
            "one-hot fusion exact: {exact}; fused {:.3} vs best single {best_single:.3} (weights {weights:?})",
            report.fused.top1
        ),
    )
}

fn early_observation(t: &Trained) -> Outcome {
    let raw = val_refs(t);
    let w = [1.0, 1.0, 1.0];
    let plain = evaluate(&t.model, &raw, &w, 64).map_err(|e| e.to_string())?;
    let full = evaluate_partial(&t.model, &raw, &[1.0], &w, 64, FramePad::Loop).map_err(|e| e.to_string())?;
    let curve = evaluate_partial(&t.model, &raw, &PARTIAL_FRACTIONS, &w, 64, FramePad::Loop).map_err(|e| e.to_string())?;
    let same = full.len() == 1 && full[0].report == plain;
    let complete = curve.len() == 9
        && curve.iter().all(|p| p.top1.is_finite())
        && curve.windows(2).all(|w| w[0].frames_kept <= w[1].frames_kept);
    let points: Vec<String> = curve.iter().map(|p| format!("{:.1}:{:.2}", p.fraction, p.top1)).collect();
    verdict(same && complete, format!("p=1.0 equals plain eval: {same}; curve {}", points.join(" ")))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str], cwd: &Path) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_psumnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(o.stdout)
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    let mut reports = Vec::new();
    for tag in ["a", "b"] {
        let data = format!("data_{tag}");
        cli(&["synth", "--out", &data, "--samples", "6", "--frames", "16", "--seed", "0"], p)?;
        let cfg = format!("cfg_{tag}.json");
        fs::write(
            p.join(&cfg),
            format!(
                r#"{{"version":1,"data":{{"manifest":"{data}/manifest.json"}},
                    "model":{{"topology":"ntu25","num_classes":8,"width":8,"window":16,"persons":1,"seed":0}},
                    "train":{{"epochs":2,"batch_size":8,"seed":0}}}}"#
            ),
        )
        .map_err(|e| e.to_string())?;
        let run = format!("run_{tag}");
        cli(&["train", "--config", &cfg, "--stream", "all", "--out", &run], p)?;
        let ckpts: Vec<String> = ["body", "hands", "legs"].iter().map(|s| format!("{run}/{s}.ckpt")).collect();
        let mut args = vec!["eval", "--config", cfg.as_str(), "--checkpoints"];
        args.extend(ckpts.iter().map(String::as_str));
        args.extend(["--partial", "0.5,1.0"]);
        reports.push(cli(&args, p)?);
    }
    let same_data = tree(&p.join("data_a")) == tree(&p.join("data_b"));
    let same_run = tree(&p.join("run_a")) == tree(&p.join("run_b"));
    let same_eval = reports[0] == reports[1];
    let files = tree(&p.join("run_a")).len();
    verdict(
        same_data && same_run && same_eval,
        format!("synth identical: {same_data}; {files} run files identical: {same_run}; eval output identical: {same_eval}"),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut step = |id: u8, name: &'static str, f: &dyn Fn() -> Outcome| {
        eprintln!("[{id}] {name} ...");
        let r = f();
        results.push((id, name, r));
    };
    step(2, "gradient checks", &gradients);
    step(3, "kernels against naive oracles", &oracles);
    step(4, "part groups, depths and input channels", &structure);
    step(5, "parameter budget", &budget);
    eprintln!("[6-9] training body, hands and legs on synthetic data ...");
    match train_all() {
        Ok(t) => {
            step(6, "synthetic training converges", &|| learns(&t));
            step(7, "part streams specialise", &|| part_specialisation(&t));
            step(8, "score fusion", &|| fusion(&t));
            step(9, "early observation curve", &|| early_observation(&t));
        }
        Err(e) => {
            for (id, name) in [
                (6, "synthetic training converges"),
                (7, "part streams specialise"),
                (8, "score fusion"),
                (9, "early observation curve"),
            ] {
                step(id, name, &|| Err(format!("training failed: {e}")));
            }
        }
    }
    step(10, "bit-identical reruns through the CLI", &determinism);

    let rest_ok = results.iter().all(|(_, _, r)| r.is_ok());
    let failing: Vec<u8> = results.iter().filter(|(_, _, r)| r.is_err()).map(|(id, _, _)| *id).collect();
    results.push((
        1,
        "end-to-end reproduction",
        verdict(rest_ok, format!("criteria 2-10 failing: {failing:?}")),
    ));
    results.sort_by_key(|(id, _, _)| *id);

    let mut all = true;
    for (id, name, r) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        all &= r.is_ok();
        println!("criterion {id:>2} {tag} {name}: {detail}");
    }
    if !all {
        std::process::exit(1);
    }
}
