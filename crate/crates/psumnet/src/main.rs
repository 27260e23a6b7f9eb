use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use psumnet::config::{load_config, Overrides};
use psumnet::manifest::DataSplit;
use psumnet::runner::{self, EvalOptions};
use psumnet::{Error, Result};
use psumnet_core::checks::CheckModule;
use psumnet_core::model::ModelConfig;
use psumnet_core::skeleton::{FramePad, SynthSpec};

#[derive(Parser)]
#[command(name = "psumnet", version, about = "Part-stream skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct OverrideArgs {
    /// Seed for initialisation and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch_size,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Pad {
    Loop,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic part-dominant dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Clips per class; a third go to validation.
        #[arg(long, default_value_t = 24)]
        samples: usize,
        #[arg(long, default_value = "ntu25")]
        topology: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        persons: usize,
    },
    /// Train one stream or all of them.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// body, hands, legs or all.
        #[arg(long, default_value = "all")]
        stream: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the last checkpoints in --out.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate checkpoints, fused, optionally on truncated clips.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated, one per checkpoint in body, hands, legs order.
        #[arg(long)]
        fusion_weights: Option<String>,
        /// Comma-separated observed fractions, such as 0.2,0.4,1.0.
        #[arg(long)]
        partial: Option<String>,
        #[arg(long, value_enum, default_value = "loop")]
        pad: Pad,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parameter and MAC counts per stream.
    Info {
        #[arg(long, conflicts_with_all = ["topology", "classes", "width", "window"])]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ntu25")]
        topology: String,
        #[arg(long, default_value_t = 60)]
        classes: usize,
        #[arg(long, default_value_t = psumnet_core::model::BASE_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        window: usize,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        /// all, samg, trm, strb, mmdg or stream.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Train and evaluate the ablation grid, writing a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth {
            out,
            classes,
            samples,
            topology,
            seed,
            frames,
            persons,
        } => {
            let spec = SynthSpec {
                classes,
                frames,
                topology,
                persons,
                seed,
                ..SynthSpec::default()
            };
            let s = runner::synth(&out, &spec, samples)?;
            println!(
                "{} classes on {}: {} train, {} val, {} frames each -> {}",
                s.classes,
                s.topology,
                s.train,
                s.val,
                s.frames,
                s.manifest.display()
            );
            for (i, name) in s.class_names.iter().enumerate() {
                println!("  {i:>2} {name}");
            }
        }
        Command::Train {
            config,
            stream,
            out,
            resume,
            overrides,
        } => {
            for s in runner::train(&config, &overrides.into(), &stream, &out, resume)? {
                println!(
                    "{}: {} epochs, best epoch {} val {} final train {:.3}",
                    s.part,
                    s.epochs,
                    s.best_epoch,
                    s.best_val_acc.map_or("-".into(), |v| format!("{v:.3}")),
                    s.final_train_acc
                );
            }
        }
        Command::Eval {
            config,
            checkpoints,
            fusion_weights,
            partial,
            pad,
            split,
            out,
            seed,
        } => {
            let opts = EvalOptions {
                weights: fusion_weights.as_deref().map(runner::parse_weights).transpose()?,
                partial: partial.as_deref().map(runner::parse_fractions).transpose()?,
                pad: match pad {
                    Pad::Loop => FramePad::Loop,
                    Pad::Zero => FramePad::Zero,
                },
                split: split.map(|s| match s {
                    SplitArg::Train => DataSplit::Train,
                    SplitArg::Val => DataSplit::Val,
                    SplitArg::Test => DataSplit::Test,
                }),
            };
            let overrides = Overrides {
                seed,
                ..Overrides::default()
            };
            let result = runner::eval(&config, &overrides, &checkpoints, &opts)?;
            runner::emit_json(&result, out.as_deref())?;
            if out.is_some() {
                println!("top1 {:.4}", result.report.fused.top1);
            }
        }
        Command::Info {
            config,
            topology,
            classes,
            width,
            window,
            json,
        } => {
            let model = match config {
                Some(p) => load_config(&p, &Overrides::default())?.model,
                None => ModelConfig {
                    window,
                    ..ModelConfig::with_width(&topology, classes, width)?
                },
            };
            let budget = runner::info(&model)?;
            if json {
                runner::emit_json(&budget, None)?;
            } else {
                print!("{}", runner::format_budget(&budget));
            }
        }
        Command::Gradcheck { module, seed, seeds } => {
            let module = match module.as_str() {
                "all" => None,
                m => Some(CheckModule::parse(m).map_err(|e| Error::Usage(e.to_string()))?),
            };
            if seeds == 0 {
                return Err(Error::Usage("--seeds must be positive".into()));
            }
            let results = runner::gradcheck(module, seed, seeds)?;
            let mut ok = true;
            for r in &results {
                println!("{}", runner::format_check(r));
                ok &= r.report.passed();
            }
            println!("{} checks, {}", results.len(), if ok { "all passed" } else { "FAILURES" });
            return Ok(ok);
        }
        Command::Ablate { config, out, overrides } => {
            let rows = runner::ablate(&config, &overrides.into(), &out)?;
            for r in &rows {
                println!("{:<32} {:>10} {:.4}", r.config, r.params, r.top1);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
