//! Inference, per-class metrics and the paired multi-trial runner.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::data::{scarce_split, Dataset, Image, SplitSpec};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{compute_prototypes, teacher_probs, Distance, PrototypeSet};
use crate::real::Real;
use crate::rng::mix_seed;
use crate::tensor::Tensor;
use crate::trainer::{self, LossSet, Method, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionRule {
    /// Nearest prototype.
    Prototype,
    /// Argmax of the student head's logits.
    Head,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions with one probability row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub probabilities: Tensor<f32>,
}

/// Eval-mode embeddings of every item, in dataset order.
pub fn embed_dataset(encoder: &Encoder<f32>, ds: &Dataset) -> Result<Tensor<f32>> {
    let refs: Vec<&Image> = ds.items().iter().map(|s| &s.image).collect();
    encoder.embed(&Image::batch(&refs)?)
}

/// Class-mean embeddings of `ds`; every class must be present.
pub fn dataset_prototypes(encoder: &Encoder<f32>, ds: &Dataset) -> Result<PrototypeSet<f32>> {
    compute_prototypes(&embed_dataset(encoder, ds)?, &ds.labels(), ds.num_classes())
}

/// Nearest-prototype labels (lowest class index on exact ties) and the
/// prototype softmax probabilities.
pub fn classify_embeddings(
    embeddings: &Tensor<f32>,
    protos: &PrototypeSet<f32>,
    distance: Distance,
) -> Result<Classification> {
    let (_, d) = embeddings.dims2("classify")?;
    if d != protos.dim() {
        return Err(Error::shape(
            "classify",
            format!("embedding dim {d} vs prototype dim {}", protos.dim()),
        ));
    }
    let predictions = embeddings
        .data()
        .chunks(d)
        .map(|e| {
            let mut best = (f64::INFINITY, 0);
            for (k, p) in protos.prototypes.data().chunks(d).enumerate() {
                let dist: f64 = e
                    .iter()
                    .zip(p)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            protos.class_ids[best.1]
        })
        .collect();
    Ok(Classification {
        predictions,
        probabilities: teacher_probs(embeddings, protos, distance)?,
    })
}

/// Argmax of each logit row plus the row softmax.
pub fn classify_logits(logits: &Tensor<f32>) -> Result<Classification> {
    let (_, c) = logits.dims2("classify")?;
    let mut probs = Vec::with_capacity(logits.numel());
    let mut predictions = Vec::new();
    for row in logits.data().chunks(c) {
        predictions.push(argmax(row));
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| (e / z) as f32));
    }
    Ok(Classification {
        predictions,
        probabilities: Tensor::new(logits.shape(), probs)?,
    })
}

/// Classifies images with a trained model.
pub fn classify(
    model: &TrainedModel,
    images: &[&Image],
    rule: PredictionRule,
) -> Result<Classification> {
    let cfg = model.encoder.config();
    for (i, im) in images.iter().enumerate() {
        if (im.channels(), im.height(), im.width())
            != (cfg.in_channels, cfg.input_size, cfg.input_size)
        {
            return Err(Error::Data(format!(
                "sample {i} is {}x{}x{} but the model expects {}x{s}x{s}",
                im.channels(),
                im.height(),
                im.width(),
                cfg.in_channels,
                s = cfg.input_size
            )));
        }
    }
    if images.is_empty() {
        return Ok(Classification {
            predictions: vec![],
            probabilities: Tensor::zeros(&[1, model.class_names.len()]),
        });
    }
    let emb = model.encoder.embed(&Image::batch(images)?)?;
    match rule {
        PredictionRule::Prototype => classify_embeddings(&emb, &model.prototypes, model.distance),
        PredictionRule::Head => classify_logits(&model.head.logits_of(&emb)?),
    }
}

/// Classifies a whole dataset, checking its modality and class list.
pub fn classify_dataset(
    model: &TrainedModel,
    ds: &Dataset,
    rule: PredictionRule,
) -> Result<Classification> {
    if ds.modality() != model.modality {
        return Err(Error::Data(format!(
            "dataset modality {:?} does not match the model's {:?}",
            ds.modality(),
            model.modality
        )));
    }
    if ds.class_names() != model.class_names.as_slice() {
        return Err(Error::Data(
            "dataset classes do not match the model's class map".into(),
        ));
    }
    let refs: Vec<&Image> = ds.items().iter().map(|s| &s.image).collect();
    classify(model, &refs, rule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true label is this class.
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes.
    Macro,
    /// Mean weighted by class support.
    Weighted,
}

/// Single-trial metrics. Macro values are unweighted class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Harmonic mean of the macro precision and recall.
    pub f1_of_macro: f64,
    pub accuracy: f64,
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class precision, recall and F1; empty denominators count as 0.
pub fn per_class_metrics(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument(
            "metrics need at least one class".into(),
        ));
    }
    if let Some(&bad) = predictions.iter().chain(truths).find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{classes}"
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        })
        .collect();
    let n = classes as f64;
    let macro_precision = per_class.iter().map(|m| m.precision).sum::<f64>() / n;
    let macro_recall = per_class.iter().map(|m| m.recall).sum::<f64>() / n;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / n;
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        macro_precision,
        macro_recall,
        macro_f1,
        f1_of_macro: harmonic(macro_precision, macro_recall),
        accuracy: ratio(correct, truths.len()),
        per_class,
        confusion,
    })
}

impl MetricsReport {
    /// `(precision, recall, f1)` under the given averaging.
    pub fn average(&self, averaging: Averaging) -> (f64, f64, f64) {
        match averaging {
            Averaging::Macro => (self.macro_precision, self.macro_recall, self.macro_f1),
            Averaging::Weighted => {
                let total: usize = self.per_class.iter().map(|m| m.support).sum();
                let w = |f: fn(&ClassMetrics) -> f64| {
                    self.per_class
                        .iter()
                        .map(|m| f(m) * m.support as f64)
                        .sum::<f64>()
                        / total.max(1) as f64
                };
                (w(|m| m.precision), w(|m| m.recall), w(|m| m.f1))
            }
        }
    }
}

/// Mean, sample standard deviation and range of a set of trial values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Stat {
            // Keep the mean inside [min, max] despite rounding.
            mean: mean.clamp(
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n,
        })
    }
}

/// Seeds shared by every method compared in one experiment.
pub fn trial_seeds(base_seed: u64, n_trials: usize) -> Vec<u64> {
    (0..n_trials as u64)
        .map(|i| mix_seed(base_seed, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// Metrics under the method's own prediction rule.
    pub primary: MetricsReport,
    pub primary_rule: PredictionRule,
    /// Metrics under the other rule.
    pub alternate: MetricsReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub split_checksum: String,
    pub metrics: Option<TrialMetrics>,
    /// Failure description when the trial did not complete.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class: usize,
    pub name: String,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub macro_precision: Stat,
    pub macro_recall: Stat,
    pub macro_f1: Stat,
    pub per_class: Vec<ClassAggregate>,
}

/// All trials of one method or loss combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub label: String,
    pub method: Method,
    pub losses: Option<LossSet>,
    pub trials: Vec<TrialOutcome>,
    /// Absent when no trial completed.
    pub aggregate: Option<Aggregate>,
}

impl TrialSummary {
    pub fn macro_f1_per_trial(&self) -> Vec<Option<f64>> {
        self.trials
            .iter()
            .map(|t| t.metrics.as_ref().map(|m| m.primary.macro_f1))
            .collect()
    }
}

fn aggregate(trials: &[TrialOutcome], class_names: &[String]) -> Option<Aggregate> {
    let done: Vec<&MetricsReport> = trials
        .iter()
        .filter_map(|t| t.metrics.as_ref())
        .map(|m| &m.primary)
        .collect();
    let pick = |f: &dyn Fn(&MetricsReport) -> f64| {
        Stat::of(&done.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    Some(Aggregate {
        completed: done.len(),
        macro_precision: pick(&|r| r.macro_precision)?,
        macro_recall: pick(&|r| r.macro_recall)?,
        macro_f1: pick(&|r| r.macro_f1)?,
        per_class: class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                Some(ClassAggregate {
                    class: c,
                    name: name.clone(),
                    precision: pick(&|r| r.per_class[c].precision)?,
                    recall: pick(&|r| r.per_class[c].recall)?,
                    f1: pick(&|r| r.per_class[c].f1)?,
                })
            })
            .collect::<Option<Vec<_>>>()?,
    })
}

/// Fixed inputs of a multi-trial experiment.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub split: SplitSpec,
    pub encoder: EncoderConfig,
    pub policy: AugmentPolicy,
    pub seeds: Vec<u64>,
    /// Worker threads; 1 runs trials in order on the calling thread.
    pub jobs: usize,
}

fn run_one(exp: &Experiment, config: &TrainConfig, trial: usize, seed: u64) -> TrialOutcome {
    let split_spec = SplitSpec { seed, ..exp.split };
    let split = match scarce_split(exp.dataset, &split_spec) {
        Ok(s) => s,
        Err(e) => {
            return TrialOutcome {
                trial,
                seed,
                split_checksum: String::new(),
                metrics: None,
                error: Some(e.to_string()),
            }
        }
    };
    let checksum = split.checksum();
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let result = (|| -> Result<TrialMetrics> {
        let out = trainer::train(
            &split.train,
            &split.val,
            &exp.encoder,
            &exp.policy,
            &cfg,
            |_| {},
        )?;
        let truths = split.test.labels();
        let c = exp.dataset.num_classes();
        let rules = out.model.rules();
        let report = |rule| -> Result<MetricsReport> {
            let preds = classify_dataset(&out.model, &split.test, rule)?.predictions;
            per_class_metrics(&preds, &truths, c)
        };
        Ok(TrialMetrics {
            primary: report(rules[0])?,
            primary_rule: rules[0],
            alternate: report(rules[1])?,
            best_epoch: out.best_epoch,
            epochs_run: out.history.epochs.len(),
        })
    })();
    let (metrics, error) = match result {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    TrialOutcome {
        trial,
        seed,
        split_checksum: checksum,
        metrics,
        error,
    }
}

/// Trains and tests `config` once per experiment seed. Trial `i` uses seed
/// `i` for both its split and its training run, so runs with the same seeds
/// are paired. Failures are recorded per trial and do not stop the others.
pub fn run_trials(
    exp: &Experiment,
    config: &TrainConfig,
    progress: &(dyn Fn(&TrialOutcome) + Sync),
) -> Result<TrialSummary> {
    config.validate()?;
    exp.split.validate()?;
    let n = exp.seeds.len();
    let slots: Mutex<Vec<Option<TrialOutcome>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            break;
        }
        let outcome = run_one(exp, config, i, exp.seeds[i]);
        progress(&outcome);
        slots.lock().expect("no worker panicked")[i] = Some(outcome);
    };
    let jobs = exp.jobs.clamp(1, n.max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let trials: Vec<TrialOutcome> = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|t| t.expect("every trial ran"))
        .collect();
    Ok(TrialSummary {
        label: config.label(),
        method: config.method,
        losses: config.active_losses(),
        aggregate: aggregate(&trials, exp.dataset.class_names()),
        trials,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// One row per class and the macro row of a single report.
pub fn report_csv(report: &MetricsReport, class_names: &[String]) -> Result<String> {
    let mut rows = vec![vec!["class", "precision", "recall", "f1", "support"]
        .into_iter()
        .map(String::from)
        .collect()];
    for m in &report.per_class {
        rows.push(vec![
            class_names
                .get(m.class)
                .cloned()
                .unwrap_or_else(|| m.class.to_string()),
            f(m.precision),
            f(m.recall),
            f(m.f1),
            m.support.to_string(),
        ]);
    }
    rows.push(vec![
        "macro".into(),
        f(report.macro_precision),
        f(report.macro_recall),
        f(report.macro_f1),
        report
            .per_class
            .iter()
            .map(|m| m.support)
            .sum::<usize>()
            .to_string(),
    ]);
    csv_string(rows)
}

/// Confusion matrix with truths as rows and predictions as columns.
pub fn confusion_csv(report: &MetricsReport, class_names: &[String]) -> Result<String> {
    let mut header = vec!["truth\\prediction".to_string()];
    header.extend(class_names.iter().cloned());
    let mut rows = vec![header];
    for (c, row) in report.confusion.iter().enumerate() {
        let mut r = vec![class_names[c].clone()];
        r.extend(row.iter().map(|v| v.to_string()));
        rows.push(r);
    }
    csv_string(rows)
}

/// Long-format table: one row per method, trial and class, then mean and
/// standard-deviation rows per method.
pub fn trials_csv(summaries: &[TrialSummary], class_names: &[String]) -> Result<String> {
    let mut rows = vec![vec![
        "method",
        "trial",
        "seed",
        "split_checksum",
        "class",
        "precision",
        "recall",
        "f1",
        "support",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>()];
    for s in summaries {
        for t in &s.trials {
            let base = |class: &str| {
                vec![
                    s.label.clone(),
                    t.trial.to_string(),
                    t.seed.to_string(),
                    t.split_checksum.clone(),
                    class.to_string(),
                ]
            };
            match &t.metrics {
                Some(m) => {
                    for cm in &m.primary.per_class {
                        let mut r = base(&class_names[cm.class]);
                        r.extend([
                            f(cm.precision),
                            f(cm.recall),
                            f(cm.f1),
                            cm.support.to_string(),
                        ]);
                        rows.push(r);
                    }
                    let mut r = base("macro");
                    r.extend([
                        f(m.primary.macro_precision),
                        f(m.primary.macro_recall),
                        f(m.primary.macro_f1),
                        String::new(),
                    ]);
                    rows.push(r);
                }
                None => {
                    let mut r = base("macro");
                    r.extend([
                        "absent".into(),
                        "absent".into(),
                        "absent".into(),
                        String::new(),
                    ]);
                    rows.push(r);
                }
            }
        }
        if let Some(a) = &s.aggregate {
            for (kind, get) in [
                ("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64),
                ("std", |s: &Stat| s.std),
            ] {
                for c in &a.per_class {
                    rows.push(vec![
                        s.label.clone(),
                        kind.into(),
                        String::new(),
                        String::new(),
                        c.name.clone(),
                        f(get(&c.precision)),
                        f(get(&c.recall)),
                        f(get(&c.f1)),
                        String::new(),
                    ]);
                }
                rows.push(vec![
                    s.label.clone(),
                    kind.into(),
                    String::new(),
                    String::new(),
                    "macro".into(),
                    f(get(&a.macro_precision)),
                    f(get(&a.macro_recall)),
                    f(get(&a.macro_f1)),
                    String::new(),
                ]);
            }
        }
    }
    csv_string(rows)
}

/// Per-class mean precision and recall for each method side by side, with
/// a final average row.
pub fn comparison_csv(summaries: &[TrialSummary], class_names: &[String]) -> Result<String> {
    let mut header = vec!["class".to_string()];
    for s in summaries {
        header.push(format!("{} precision", s.label));
        header.push(format!("{} recall", s.label));
    }
    let mut rows = vec![header];
    let cell = |s: &TrialSummary, c: Option<usize>, recall: bool| -> String {
        match &s.aggregate {
            None => "absent".into(),
            Some(a) => {
                let st = match (c, recall) {
                    (Some(c), false) => a.per_class[c].precision,
                    (Some(c), true) => a.per_class[c].recall,
                    (None, false) => a.macro_precision,
                    (None, true) => a.macro_recall,
                };
                format!("{:.3}", st.mean)
            }
        }
    };
    for (c, name) in class_names.iter().enumerate() {
        let mut r = vec![name.clone()];
        for s in summaries {
            r.push(cell(s, Some(c), false));
            r.push(cell(s, Some(c), true));
        }
        rows.push(r);
    }
    let mut avg = vec!["Average".to_string()];
    for s in summaries {
        avg.push(cell(s, None, false));
        avg.push(cell(s, None, true));
    }
    rows.push(avg);
    csv_string(rows)
}

/// One row per loss combination with mean and std of the macro metrics.
/// Baselines without the prototype objectives leave the loss marks empty.
pub fn ablation_csv(summaries: &[TrialSummary]) -> Result<String> {
    let mut rows = vec![vec![
        "label",
        "Lm",
        "Ls",
        "Ld",
        "precision",
        "recall",
        "f1",
        "f1_std",
        "completed",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>()];
    for s in summaries {
        let l = s.losses.unwrap_or(LossSet::new(false, false, false));
        let mark = |on: bool| if on { "x" } else { "" }.to_string();
        let mut r = vec![
            s.label.clone(),
            mark(l.matching),
            mark(l.distill),
            mark(l.discriminative),
        ];
        match &s.aggregate {
            Some(a) => r.extend([
                format!("{:.3}", a.macro_precision.mean),
                format!("{:.3}", a.macro_recall.mean),
                format!("{:.3}", a.macro_f1.mean),
                format!("{:.3}", a.macro_f1.std),
                a.completed.to_string(),
            ]),
            None => r.extend([
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "0".into(),
            ]),
        }
        rows.push(r);
    }
    csv_string(rows)
}

/// Real-valued convenience used by oracle tests: argmin of squared distances.
pub fn nearest<T: Real>(embedding: &[T], prototypes: &Tensor<T>) -> usize {
    let d = embedding.len();
    let mut best = (f64::INFINITY, 0);
    for (k, p) in prototypes.data().chunks(d).enumerate() {
        let dist: f64 = embedding
            .iter()
            .zip(p)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}
