use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protokd::eval::{Averaging, PredictionRule};
use protokd::trainer::Method;
use protokd_cli::config::{self, DatasetSource};
use protokd_cli::{
    cmd_benchmark, cmd_eval, cmd_synth_gen, cmd_train, CliError, EvalArgs, EvalData, Result,
    RunConfig, SplitPart, SynthFormat,
};
use serde::de::DeserializeOwned;

/// Few-shot classifiers from one to five labelled samples per class.
#[derive(Parser)]
#[command(name = "protokd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the split, initialisation and episodes.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, history and config snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_snake::<Method>)]
        method: Option<Method>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Paired multi-trial comparison of methods or loss combinations.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Methods to compare; repeat the flag for several.
        #[arg(long, value_parser = parse_snake::<Method>)]
        method: Vec<Method>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Compare the loss combinations instead of the methods.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a saved model on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image directory or pseudo-image file.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Evaluate on the dataset and split of this run config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test", requires = "config")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prediction rule; the model's own rule by default.
        #[arg(long, value_parser = parse_snake::<PredictionRule>)]
        rule: Option<PredictionRule>,
        #[arg(long, value_parser = parse_snake::<Averaging>, default_value = "macro")]
        averaging: Averaging,
    },
    /// Render the configured synthetic corpus to disk.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "png")]
        format: FormatArg,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        variance: Option<f64>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Print the default config, or the key reference with `--reference`.
    Defaults {
        #[arg(long)]
        reference: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Png,
    Pseudo,
}

fn parse_snake<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn load_common(common: &Common) -> Result<RunConfig> {
    let mut cfg = config::load(common.config.as_deref(), std::env::vars())?;
    if let Some(out) = &common.out {
        cfg.out_dir = std::path::absolute(out).map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            method,
            quiet,
        } => {
            let mut cfg = load_common(&common)?;
            if let Some(m) = method {
                cfg.set_method(m);
            }
            let s = cmd_train(&cfg, quiet)?;
            println!(
                "{}: best epoch {} of {}, test macro-F1 {:.4} ({:?} rule)",
                s.out_dir.display(),
                s.best_epoch,
                s.epochs_run,
                s.test.f1,
                s.test.rule
            );
        }
        Command::Benchmark {
            common,
            method,
            jobs,
            trials,
            ablation,
            quiet,
        } => {
            let mut cfg = load_common(&common)?;
            if !method.is_empty() {
                cfg.benchmark.methods = method;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cfg.benchmark.ablation |= ablation;
            let out = cmd_benchmark(&cfg, quiet)?;
            for s in &out.summaries {
                match &s.aggregate {
                    Some(a) => println!(
                        "{:<12} macro P {:.3}  R {:.3}  F1 {:.3} ± {:.3}  ({}/{} trials)",
                        s.label,
                        a.macro_precision.mean,
                        a.macro_recall.mean,
                        a.macro_f1.mean,
                        a.macro_f1.std,
                        a.completed,
                        s.trials.len()
                    ),
                    None => println!("{:<12} no completed trials", s.label),
                }
            }
            if !out.paired {
                eprintln!("warning: split checksums differ across methods");
            }
        }
        Command::Eval {
            checkpoint,
            data,
            config: config_path,
            split,
            out,
            rule,
            averaging,
        } => {
            let data = match (data, config_path) {
                (Some(p), _) => EvalData::Path(p),
                (None, Some(c)) => {
                    let part = match split {
                        SplitArg::Train => SplitPart::Train,
                        SplitArg::Val => SplitPart::Val,
                        SplitArg::Test => SplitPart::Test,
                        SplitArg::All => SplitPart::All,
                    };
                    EvalData::Config(Box::new(config::load(Some(&c), std::env::vars())?), part)
                }
                (None, None) => {
                    return Err(CliError::Config("eval needs --data or --config".into()))
                }
            };
            let out_dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(|p| p.join("eval"))
                    .unwrap_or_else(|| "eval".into())
            });
            let res = cmd_eval(&EvalArgs {
                checkpoint,
                data,
                out_dir: out_dir.clone(),
                rule,
                averaging,
            })?;
            println!(
                "{}: {} items, {:?} precision {:.4} recall {:.4} F1 {:.4} -> {}",
                res.dataset,
                res.items,
                res.averaging,
                res.precision,
                res.recall,
                res.f1,
                out_dir.display()
            );
        }
        Command::SynthGen {
            common,
            format,
            classes,
            per_class,
            variance,
            size,
        } => {
            let mut cfg = load_common(&common)?;
            if let DatasetSource::Synthetic(s) = &mut cfg.dataset {
                s.classes = classes.unwrap_or(s.classes);
                s.per_class = per_class.unwrap_or(s.per_class);
                s.intra_class_variance = variance.unwrap_or(s.intra_class_variance);
                s.image_size = size.unwrap_or(s.image_size);
            }
            let format = match format {
                FormatArg::Png => SynthFormat::Png,
                FormatArg::Pseudo => SynthFormat::Pseudo,
            };
            println!("{}", cmd_synth_gen(&cfg, format)?.display());
        }
        Command::Defaults { reference } => {
            if reference {
                print!("{}", config::reference_page());
            } else {
                print!("{}", RunConfig::default().to_toml()?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
