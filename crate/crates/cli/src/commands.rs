use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use protokd::checkpoint;
use protokd::data::{
    generate_synthetic, generate_synthetic_pseudo, load_image_dataset, load_pseudo_images,
    save_image_dataset, scarce_split, write_pseudo_images, Dataset, DatasetManifest, Split,
    SplitSpec,
};
use protokd::eval::{
    ablation_csv, classify_dataset, comparison_csv, confusion_csv, per_class_metrics, report_csv,
    run_trials, trial_seeds, trials_csv, Averaging, Experiment, MetricsReport, PredictionRule,
    TrialSummary,
};
use protokd::trainer::{self, EpochRecord, LossSet, Method, TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, RunConfig};
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "model.pkd";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRIALS_CSV: &str = "trials.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const PSEUDO_FILE: &str = "pseudo.bin";
pub const IMAGES_DIR: &str = "images";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(protokd::Error::from)?;
    v.push(b'\n');
    Ok(v)
}

/// A directory is read as an image tree, anything else as a pseudo-image file.
pub fn load_path(path: &Path, size: usize) -> Result<Dataset> {
    if path.is_dir() {
        Ok(load_image_dataset(path, size)?)
    } else if path.exists() {
        Ok(load_pseudo_images(path)?)
    } else {
        Err(protokd::Error::Data(format!("{} does not exist", path.display())).into())
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(match &cfg.dataset {
        DatasetSource::Images { root } => load_image_dataset(root, cfg.encoder.input_size)?,
        DatasetSource::Pseudo { path } => load_pseudo_images(path)?,
        DatasetSource::Synthetic(spec) => generate_synthetic(spec)?,
    })
}

fn epoch_line(label: &str, r: &EpochRecord) -> String {
    let mut s = format!("[{label}] epoch {:>3}", r.epoch);
    for (name, v) in [
        ("Lm", r.loss_matching),
        ("Ls", r.loss_distill),
        ("Ld", r.loss_discriminative),
        ("CE", r.loss_supervised),
    ] {
        if let Some(v) = v {
            s.push_str(&format!("  {name} {v:+.4}"));
        }
    }
    s.push_str(&format!("  val F1 {:.3}", r.val_f1));
    if r.best {
        s.push_str(" *");
    }
    s
}

/// Metrics of one model on one dataset under both prediction rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub dataset: String,
    pub items: usize,
    pub averaging: Averaging,
    pub rule: PredictionRule,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub report: MetricsReport,
    pub alternate_rule: PredictionRule,
    pub alternate: MetricsReport,
}

fn evaluate(
    model: &TrainedModel,
    ds: &Dataset,
    name: String,
    rule: Option<PredictionRule>,
    averaging: Averaging,
) -> Result<EvalOutput> {
    let rule = rule.unwrap_or(model.rules()[0]);
    let alternate_rule = match rule {
        PredictionRule::Prototype => PredictionRule::Head,
        PredictionRule::Head => PredictionRule::Prototype,
    };
    let truths = ds.labels();
    let c = model.class_names.len();
    let report = |r| -> Result<MetricsReport> {
        Ok(per_class_metrics(
            &classify_dataset(model, ds, r)?.predictions,
            &truths,
            c,
        )?)
    };
    let primary = report(rule)?;
    let (precision, recall, f1) = primary.average(averaging);
    Ok(EvalOutput {
        dataset: name,
        items: ds.len(),
        averaging,
        rule,
        precision,
        recall,
        f1,
        alternate: report(alternate_rule)?,
        alternate_rule,
        report: primary,
    })
}

fn write_eval(out_dir: &Path, out: &EvalOutput, class_names: &[String]) -> Result<()> {
    write_file(&out_dir.join(METRICS_FILE), json(out)?)?;
    write_file(
        &out_dir.join(METRICS_CSV),
        report_csv(&out.report, class_names)?,
    )?;
    write_file(
        &out_dir.join(CONFUSION_CSV),
        confusion_csv(&out.report, class_names)?,
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: EvalOutput,
}

/// Trains one model on the configured split and writes the checkpoint, the
/// line-JSON history, the resolved config, the dataset manifest and test
/// metrics into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = &cfg.out_dir;
    create_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let ds = load_dataset(cfg)?;
    let split = scarce_split(&ds, &cfg.split)?;
    let mut manifest = DatasetManifest::new(cfg.dataset.describe(), &ds);
    manifest.record_split(cfg.split.seed, &split);
    write_file(&out_dir.join(MANIFEST_FILE), json(&manifest)?)?;

    let history_path = out_dir.join(HISTORY_FILE);
    let mut history = fs::File::create(&history_path).map_err(|source| CliError::Output {
        path: history_path.clone(),
        source,
    })?;
    let mut write_error = None;
    let label = cfg.train.label();
    let outcome = trainer::train(
        &split.train,
        &split.val,
        &cfg.encoder,
        &cfg.policy(),
        &cfg.train,
        |r| {
            if !quiet {
                eprintln!("{}", epoch_line(&label, r));
            }
            let line = serde_json::to_string(r).expect("records serialise");
            if let Err(e) = writeln!(history, "{line}") {
                write_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(source) = write_error {
        return Err(CliError::Output {
            path: history_path,
            source,
        });
    }
    checkpoint::save(
        &out_dir.join(CHECKPOINT_FILE),
        &outcome.model,
        Some(&cfg.train),
        Some(outcome.best_epoch),
    )?;
    let test = evaluate(
        &outcome.model,
        &split.test,
        "test".into(),
        None,
        Averaging::Macro,
    )?;
    write_eval(out_dir, &test, ds.class_names())?;
    Ok(TrainSummary {
        out_dir: out_dir.clone(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.epochs.len(),
        test,
    })
}

/// Which part of a configured split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

impl SplitPart {
    fn pick(self, ds: &Dataset, split: &Split) -> Dataset {
        match self {
            SplitPart::Train => split.train.clone(),
            SplitPart::Val => split.val.clone(),
            SplitPart::Test => split.test.clone(),
            SplitPart::All => ds.clone(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
            SplitPart::All => "all",
        }
    }
}

#[derive(Debug, Clone)]
pub enum EvalData {
    /// Image directory or pseudo-image file.
    Path(PathBuf),
    /// The dataset and split a run config describes.
    Config(Box<RunConfig>, SplitPart),
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: EvalData,
    pub out_dir: PathBuf,
    pub rule: Option<PredictionRule>,
    pub averaging: Averaging,
}

/// Evaluates a saved model and writes JSON and CSV metrics plus the
/// confusion matrix.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let size = model.encoder.config().input_size;
    let (ds, name) = match &args.data {
        EvalData::Path(p) => (load_path(p, size)?, p.display().to_string()),
        EvalData::Config(cfg, part) => {
            cfg.validate()?;
            let ds = load_dataset(cfg)?;
            let split = scarce_split(&ds, &cfg.split)?;
            (
                part.pick(&ds, &split),
                format!("{} [{}]", cfg.dataset.describe(), part.name()),
            )
        }
    };
    let out = evaluate(&model, &ds, name, args.rule, args.averaging)?;
    create_dir(&args.out_dir)?;
    write_eval(&args.out_dir, &out, &model.class_names)?;
    Ok(out)
}

/// Training configurations compared by `benchmark`, in column order.
pub fn benchmark_arms(cfg: &RunConfig) -> Vec<TrainConfig> {
    let with = |method: Method, losses: Option<LossSet>| TrainConfig {
        method,
        losses,
        ..cfg.train.clone()
    };
    if cfg.benchmark.ablation {
        std::iter::once(with(Method::Supervised, None))
            .chain(
                LossSet::ABLATION
                    .iter()
                    .map(|&l| with(Method::Protokd, Some(l))),
            )
            .collect()
    } else {
        cfg.benchmark
            .methods
            .iter()
            .map(|&m| {
                with(
                    m,
                    if m == Method::Protokd {
                        cfg.train.losses
                    } else {
                        None
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutput {
    pub dataset: String,
    pub seeds: Vec<u64>,
    /// Every arm saw the same split at every trial index.
    pub paired: bool,
    pub summaries: Vec<TrialSummary>,
}

fn splits_paired(summaries: &[TrialSummary]) -> bool {
    let Some(first) = summaries.first() else {
        return true;
    };
    summaries.iter().all(|s| {
        s.trials
            .iter()
            .zip(&first.trials)
            .all(|(a, b)| a.split_checksum == b.split_checksum && !a.split_checksum.is_empty())
    })
}

/// Runs every arm over the same trial seeds and writes the per-trial table,
/// the per-class comparison table and the loss-combination table.
pub fn cmd_benchmark(cfg: &RunConfig, quiet: bool) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    let arms = benchmark_arms(cfg);
    for arm in &arms {
        arm.validate()?;
    }
    let out_dir = &cfg.out_dir;
    create_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let ds = load_dataset(cfg)?;
    let seeds = trial_seeds(cfg.train.seed, cfg.trials);
    let mut manifest = DatasetManifest::new(cfg.dataset.describe(), &ds);
    for &seed in &seeds {
        if let Ok(split) = scarce_split(&ds, &SplitSpec { seed, ..cfg.split }) {
            manifest.record_split(seed, &split);
        }
    }
    write_file(&out_dir.join(MANIFEST_FILE), json(&manifest)?)?;
    let exp = Experiment {
        dataset: &ds,
        split: cfg.split,
        encoder: cfg.encoder.clone(),
        policy: cfg.policy(),
        seeds: seeds.clone(),
        jobs: cfg.jobs,
    };
    let mut summaries = Vec::with_capacity(arms.len());
    for arm in &arms {
        let label = arm.label();
        let n = seeds.len();
        let progress = |t: &protokd::eval::TrialOutcome| {
            if quiet {
                return;
            }
            match (&t.metrics, &t.error) {
                (Some(m), _) => eprintln!(
                    "[{label}] trial {}/{n}  macro-F1 {:.3}  best epoch {}",
                    t.trial + 1,
                    m.primary.macro_f1,
                    m.best_epoch
                ),
                (None, Some(e)) => eprintln!("[{label}] trial {}/{n} failed: {e}", t.trial + 1),
                (None, None) => {}
            }
        };
        summaries.push(run_trials(&exp, arm, &progress)?);
    }
    let names = ds.class_names();
    write_file(&out_dir.join(TRIALS_CSV), trials_csv(&summaries, names)?)?;
    write_file(
        &out_dir.join(COMPARISON_CSV),
        comparison_csv(&summaries, names)?,
    )?;
    write_file(&out_dir.join(ABLATION_CSV), ablation_csv(&summaries)?)?;
    let output = BenchmarkOutput {
        dataset: cfg.dataset.describe(),
        seeds,
        paired: splits_paired(&summaries),
        summaries,
    };
    write_file(&out_dir.join(SUMMARY_FILE), json(&output)?)?;
    Ok(output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthFormat {
    /// Directory of PNG files per class.
    Png,
    /// Pseudo-image container of symmetric matrices.
    Pseudo,
}

/// Renders the configured synthetic corpus to disk and returns its path.
pub fn cmd_synth_gen(cfg: &RunConfig, format: SynthFormat) -> Result<PathBuf> {
    let DatasetSource::Synthetic(spec) = &cfg.dataset else {
        return Err(CliError::Config(
            "synth-gen needs a [dataset.synthetic] section".into(),
        ));
    };
    spec.validate()?;
    create_dir(&cfg.out_dir)?;
    let (ds, path) = match format {
        SynthFormat::Png => {
            let ds = generate_synthetic(spec)?;
            let root = cfg.out_dir.join(IMAGES_DIR);
            save_image_dataset(&ds, &root)?;
            (ds, root)
        }
        SynthFormat::Pseudo => {
            let ds = generate_synthetic_pseudo(spec)?;
            let path = cfg.out_dir.join(PSEUDO_FILE);
            let mut buf = Vec::new();
            write_pseudo_images(&ds, &mut buf)?;
            write_file(&path, buf)?;
            (ds, path)
        }
    };
    write_file(
        &cfg.out_dir.join(MANIFEST_FILE),
        json(&DatasetManifest::new(cfg.dataset.describe(), &ds))?,
    )?;
    Ok(path)
}
