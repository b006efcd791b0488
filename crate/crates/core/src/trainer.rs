//! Alternating two-phase training.
//!
//! Every epoch runs `phase1_iters` episodes of prototype matching, then
//! `phase2_iters` episodes in which a linear student head distils the
//! prototype classifier's soft labels on augmented queries while the
//! discriminative loss pulls queries to their own prototype. Each iteration
//! draws a fresh episode: one or more original samples per class as support
//! and `query_per_class` augmented copies per class as queries.

use serde::{Deserialize, Serialize};

use crate::augment::{make_query_set, AugmentPolicy};
use crate::autodiff::{Graph, Mode, Optimizer, OptimizerConfig, Var};
use crate::data::{Dataset, Image, Modality, Sample};
use crate::encoder::{Encoder, EncoderConfig, StudentHead};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, PredictionRule};
use crate::losses::{
    combined_phase2_loss, discriminative_loss, distill_loss, matching_loss, prototypes_var,
    teacher_probs_var, Distance, LossWeights, PrototypeSet,
};
use crate::real::Real;
use crate::rng::{mix_seed, streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Hard-label cross-entropy on the student head.
    Supervised,
    /// Matching loss only.
    Protonet,
    /// Full alternating schedule; `TrainConfig::losses` may switch terms off.
    Protokd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Supervised, Method::Protonet, Method::Protokd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Protonet => "protonet",
            Method::Protokd => "protokd",
        }
    }

    /// Prediction rule used for reported metrics.
    pub fn primary_rule(self) -> PredictionRule {
        match self {
            Method::Supervised => PredictionRule::Head,
            _ => PredictionRule::Prototype,
        }
    }
}

/// Which of the three objectives take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSet {
    pub matching: bool,
    pub distill: bool,
    pub discriminative: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        matching: true,
        distill: true,
        discriminative: true,
    };

    /// The five combinations of the ablation table, in row order.
    pub const ABLATION: [LossSet; 5] = [
        LossSet::new(true, false, false),
        LossSet::new(false, true, false),
        LossSet::new(true, true, false),
        LossSet::new(true, false, true),
        LossSet::new(true, true, true),
    ];

    pub const fn new(matching: bool, distill: bool, discriminative: bool) -> Self {
        LossSet {
            matching,
            distill,
            discriminative,
        }
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.matching, "Lm"),
            (self.distill, "Ls"),
            (self.discriminative, "Ld"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        parts.join("+")
    }

    pub fn phase2(&self) -> bool {
        self.distill || self.discriminative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabels {
    /// Teacher class distribution.
    #[default]
    Soft,
    /// One-hot argmax of the teacher distribution.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Active objectives for `protokd`; all three when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<LossSet>,
    pub epochs: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub support_size: usize,
    pub query_per_class: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub distance: Distance,
    pub pseudo_labels: PseudoLabels,
    pub optimizer: OptimizerConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Protokd,
            losses: None,
            epochs: 100,
            phase1_iters: 10,
            phase2_iters: 10,
            support_size: 1,
            query_per_class: 5,
            tau: 5.0,
            weights: LossWeights::default(),
            distance: Distance::SquaredEuclidean,
            pseudo_labels: PseudoLabels::Soft,
            optimizer: OptimizerConfig::default(),
            early_stop_patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        for (name, v) in [
            ("epochs", self.epochs),
            ("phase1_iters", self.phase1_iters),
            ("phase2_iters", self.phase2_iters),
            ("support_size", self.support_size),
            ("query_per_class", self.query_per_class),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau = {} must be positive", self.tau));
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(format!("train.weights: {e}")))?;
        self.optimizer.validate()?;
        match (self.method, self.losses) {
            (Method::Protokd, Some(l)) if !(l.matching || l.distill || l.discriminative) => {
                fail("losses must enable at least one objective".into())
            }
            (Method::Protokd, _) | (_, None) => Ok(()),
            (m, Some(_)) => fail(format!(
                "losses can only be set for method protokd, not {}",
                m.name()
            )),
        }
    }

    /// Objectives in use; `None` for the supervised baseline.
    pub fn active_losses(&self) -> Option<LossSet> {
        match self.method {
            Method::Supervised => None,
            Method::Protonet => Some(LossSet::new(true, false, false)),
            Method::Protokd => Some(self.losses.unwrap_or(LossSet::ALL)),
        }
    }

    /// Name for reports: the method, or the loss combination for ablations.
    pub fn label(&self) -> String {
        match (self.method, self.losses) {
            (Method::Protokd, Some(l)) if l != LossSet::ALL => l.label(),
            (m, _) => m.name().to_string(),
        }
    }

    fn effective_weights(&self, losses: LossSet) -> LossWeights {
        LossWeights {
            distill: if losses.distill {
                self.weights.distill
            } else {
                0.0
            },
            discriminative: if losses.discriminative {
                self.weights.discriminative
            } else {
                0.0
            },
        }
    }
}

/// Original support samples and augmented queries for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    /// Seed of the generator that produced the episode (for diagnostics).
    pub seed: u64,
}

/// Draws `support_size` training samples per class and `query_per_class`
/// augmentations per class, cycling over that class's support samples.
pub fn build_episode(
    train: &Dataset,
    policy: &AugmentPolicy,
    config: &TrainConfig,
    seed: u64,
    rng: &mut Rng,
) -> Result<Episode> {
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (c, mut idx) in train.indices_by_class().into_iter().enumerate() {
        if idx.len() < config.support_size {
            return Err(Error::Data(format!(
                "class '{}' has {} training samples, support_size is {}",
                train.class_names()[c],
                idx.len(),
                config.support_size
            )));
        }
        if idx.len() > config.support_size {
            rng.shuffle(&mut idx);
            idx.truncate(config.support_size);
        }
        let n = idx.len();
        for (j, &i) in idx.iter().enumerate() {
            let k = config.query_per_class / n + usize::from(j < config.query_per_class % n);
            let sample = &train.items()[i];
            if k > 0 {
                query.extend(make_query_set(sample, train.modality(), policy, k, rng)?);
            }
            support.push(sample.clone());
        }
    }
    Ok(Episode {
        support,
        query,
        seed,
    })
}

/// Stacked episode tensors; support rows come first in `images`.
#[derive(Debug, Clone)]
pub struct EpisodeBatch<T> {
    pub images: Tensor<T>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl<T: Real> EpisodeBatch<T> {
    pub fn new(episode: &Episode) -> Result<Self> {
        let refs: Vec<&Image> = episode
            .support
            .iter()
            .chain(&episode.query)
            .map(|s| &s.image)
            .collect();
        Ok(EpisodeBatch {
            images: Image::batch(&refs)?,
            support_labels: episode.support.iter().map(|s| s.label).collect(),
            query_labels: episode.query.iter().map(|s| s.label).collect(),
        })
    }

    pub fn n_support(&self) -> usize {
        self.support_labels.len()
    }

    fn support_rows(&self) -> Vec<usize> {
        (0..self.n_support()).collect()
    }

    fn query_rows(&self) -> Vec<usize> {
        (self.n_support()..self.n_support() + self.query_labels.len()).collect()
    }

    pub fn query_images(&self) -> Result<Tensor<T>> {
        let n = self.images.shape()[0];
        let per = self.images.numel() / n;
        let mut shape = self.images.shape().to_vec();
        shape[0] = self.query_labels.len();
        Tensor::new(
            &shape,
            self.images.data()[self.n_support() * per..].to_vec(),
        )
    }
}

/// Matching loss on one episode; prototypes stay on the tape so gradients
/// flow through both the queries and the support samples.
#[allow(clippy::too_many_arguments)]
pub fn phase1_objective<T: Real>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    enc_vars: &[Var],
    batch: &EpisodeBatch<T>,
    n_classes: usize,
    distance: Distance,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let x = g.constant(batch.images.clone());
    let emb = encoder.forward(g, enc_vars, x, mode, rng)?;
    let s = g.select_rows(emb, &batch.support_rows())?;
    let q = g.select_rows(emb, &batch.query_rows())?;
    let p = prototypes_var(g, s, &batch.support_labels, n_classes)?;
    matching_loss(g, q, p, &batch.query_labels, distance)
}

/// Terms of the second phase; inactive terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct Phase2Terms {
    pub distill: Option<Var>,
    pub discriminative: Option<Var>,
    pub total: Var,
}

/// Distillation and discriminative losses against fixed `prototypes`.
/// Pseudo-labels are read off the query embeddings as constants.
#[allow(clippy::too_many_arguments)]
pub fn phase2_objective<T: Real>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    enc_vars: &[Var],
    head: &StudentHead<T>,
    head_vars: &[Var],
    batch: &EpisodeBatch<T>,
    prototypes: &Tensor<T>,
    config: &TrainConfig,
    losses: LossSet,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Phase2Terms> {
    let x = g.constant(batch.query_images()?);
    let q = encoder.forward(g, enc_vars, x, mode, rng)?;
    let teacher = if losses.distill {
        let frozen = g.detach(q);
        let p = g.constant(prototypes.clone());
        let probs = teacher_probs_var(g, frozen, p, config.distance)?;
        let t = g.value(probs).clone();
        Some(match config.pseudo_labels {
            PseudoLabels::Soft => t,
            PseudoLabels::Hard => one_hot_argmax(&t)?,
        })
    } else {
        None
    };
    phase2_terms(
        g,
        q,
        head,
        head_vars,
        teacher.as_ref(),
        prototypes,
        &batch.query_labels,
        config,
        losses,
    )
}

/// Phase-2 losses for query embeddings `q` given the pseudo-labels as data.
#[allow(clippy::too_many_arguments)]
pub fn phase2_terms<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    head: &StudentHead<T>,
    head_vars: &[Var],
    teacher: Option<&Tensor<T>>,
    prototypes: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    losses: LossSet,
) -> Result<Phase2Terms> {
    let distill = match (losses.distill, teacher) {
        (true, Some(teacher)) => {
            let logits = head.logits(g, head_vars, q)?;
            Some(distill_loss(g, teacher, logits, config.tau)?)
        }
        (true, None) => {
            return Err(Error::InvalidArgument(
                "distillation needs pseudo-labels".into(),
            ))
        }
        (false, _) => None,
    };
    let discriminative = if losses.discriminative {
        let p = g.constant(prototypes.clone());
        Some(discriminative_loss(g, q, p, labels)?)
    } else {
        None
    };
    let w = config.effective_weights(losses);
    let total = match (distill, discriminative) {
        (Some(s), Some(d)) => combined_phase2_loss(g, s, d, w)?,
        (Some(s), None) => g.scale(s, T::lit(w.distill))?,
        (None, Some(d)) => g.scale(d, T::lit(w.discriminative))?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "phase 2 needs an active loss".into(),
            ))
        }
    };
    Ok(Phase2Terms {
        distill,
        discriminative,
        total,
    })
}

fn one_hot_argmax<T: Real>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = probs.dims2("pseudo_labels")?;
    let mut out = Tensor::zeros(probs.shape());
    for (row, dst) in probs.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        dst[eval::argmax(row)] = T::one();
    }
    Ok(out)
}

/// Hard-label cross-entropy of the student head over support and queries.
#[allow(clippy::too_many_arguments)]
pub fn supervised_objective<T: Real>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    enc_vars: &[Var],
    head: &StudentHead<T>,
    head_vars: &[Var],
    batch: &EpisodeBatch<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let x = g.constant(batch.images.clone());
    let emb = encoder.forward(g, enc_vars, x, mode, rng)?;
    let logits = head.logits(g, head_vars, emb)?;
    let lp = g.log_softmax(logits)?;
    let labels: Vec<usize> = batch
        .support_labels
        .iter()
        .chain(&batch.query_labels)
        .copied()
        .collect();
    let picked = g.pick(lp, &labels)?;
    let m = g.mean(picked)?;
    g.neg(m)
}

/// Encoder, head and the shared optimizer. Optimizer slots cover the encoder
/// parameters first, then the head.
#[derive(Debug, Clone)]
pub struct Learner {
    pub encoder: Encoder<f32>,
    pub head: StudentHead<f32>,
    optimizer: Optimizer<f32>,
    config: TrainConfig,
    n_classes: usize,
    steps: usize,
}

impl Learner {
    pub fn new(
        config: TrainConfig,
        encoder_config: EncoderConfig,
        n_classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(config.seed, streams::INIT);
        let encoder = Encoder::new(encoder_config, &mut rng)?;
        let head = StudentHead::new(encoder.config().embed_dim, n_classes, &mut rng);
        Ok(Learner {
            encoder,
            head,
            optimizer: Optimizer::new(config.optimizer),
            config,
            n_classes,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimizer updates applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn apply(&mut self, g: &Graph<f32>, enc_vars: &[Var], head_vars: Option<&[Var]>) -> Result<()> {
        for (slot, (p, &v)) in self
            .encoder
            .params_mut()
            .iter_mut()
            .zip(enc_vars)
            .enumerate()
        {
            if let Some(grad) = g.grad(v) {
                self.optimizer.update(slot, &mut p.value, grad)?;
            }
        }
        if let Some(head_vars) = head_vars {
            let offset = enc_vars.len();
            for (k, (p, &v)) in self.head.params_mut().iter_mut().zip(head_vars).enumerate() {
                if let Some(grad) = g.grad(v) {
                    self.optimizer.update(offset + k, &mut p.value, grad)?;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// One matching-loss update of the encoder; returns the pre-update loss.
    pub fn phase1_step(&mut self, episode: &Episode, rng: &mut Rng) -> Result<f64> {
        let batch = EpisodeBatch::new(episode)?;
        let mut g = Graph::new();
        let enc = self.encoder.params().bind(&mut g);
        let loss = phase1_objective(
            &mut g,
            &self.encoder,
            &enc,
            &batch,
            self.n_classes,
            self.config.distance,
            Mode::Train,
            rng,
        )?;
        let value = g.value(loss).item()?.as_f64();
        g.backward(loss)?;
        self.apply(&g, &enc, None)?;
        Ok(value)
    }

    /// Prototypes of the episode's support under the current encoder (eval mode).
    pub fn episode_prototypes(&self, episode: &Episode) -> Result<Tensor<f32>> {
        let refs: Vec<&Image> = episode.support.iter().map(|s| &s.image).collect();
        let emb = self.encoder.embed(&Image::batch(&refs)?)?;
        let labels: Vec<usize> = episode.support.iter().map(|s| s.label).collect();
        Ok(crate::losses::compute_prototypes(&emb, &labels, self.n_classes)?.prototypes)
    }

    /// One distillation/discriminative update of encoder and head; returns
    /// the pre-update `(L_s, L_d)`, `None` for inactive terms. Zero weights
    /// on both terms leave every parameter untouched.
    pub fn phase2_step(
        &mut self,
        episode: &Episode,
        losses: LossSet,
        rng: &mut Rng,
    ) -> Result<(Option<f64>, Option<f64>)> {
        let protos = self.episode_prototypes(episode)?;
        let batch = EpisodeBatch::new(episode)?;
        let mut g = Graph::new();
        let enc = self.encoder.params().bind(&mut g);
        let head = self.head.params().bind(&mut g);
        let terms = phase2_objective(
            &mut g,
            &self.encoder,
            &enc,
            &self.head,
            &head,
            &batch,
            &protos,
            &self.config,
            losses,
            Mode::Train,
            rng,
        )?;
        let read = |v: Option<Var>| -> Result<Option<f64>> {
            v.map(|v| g.value(v).item().map(|x| x.as_f64())).transpose()
        };
        let out = (read(terms.distill)?, read(terms.discriminative)?);
        let w = self.config.effective_weights(losses);
        if w.distill == 0.0 && w.discriminative == 0.0 {
            return Ok(out);
        }
        g.backward(terms.total)?;
        self.apply(&g, &enc, Some(&head))?;
        Ok(out)
    }

    /// One cross-entropy update of encoder and head.
    pub fn supervised_step(&mut self, episode: &Episode, rng: &mut Rng) -> Result<f64> {
        let batch = EpisodeBatch::new(episode)?;
        let mut g = Graph::new();
        let enc = self.encoder.params().bind(&mut g);
        let head = self.head.params().bind(&mut g);
        let loss = supervised_objective(
            &mut g,
            &self.encoder,
            &enc,
            &self.head,
            &head,
            &batch,
            Mode::Train,
            rng,
        )?;
        let value = g.value(loss).item()?.as_f64();
        g.backward(loss)?;
        self.apply(&g, &enc, Some(&head))?;
        Ok(value)
    }
}

/// Per-epoch record; loss fields are means over the epoch's steps and are
/// absent when the term was not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub loss_matching: Option<f64>,
    pub loss_distill: Option<f64>,
    pub loss_discriminative: Option<f64>,
    pub loss_supervised: Option<f64>,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    /// This epoch became the best snapshot.
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn total_steps(&self) -> usize {
        self.epochs
            .iter()
            .map(|e| e.phase1_steps + e.phase2_steps)
            .sum()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|e| e.best)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything needed for inference.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub method: Method,
    pub encoder: Encoder<f32>,
    pub head: StudentHead<f32>,
    /// Computed from the full training split with the selected weights.
    pub prototypes: PrototypeSet<f32>,
    pub distance: Distance,
    pub class_names: Vec<String>,
    pub modality: Modality,
}

impl TrainedModel {
    pub fn rules(&self) -> Vec<PredictionRule> {
        match self.method {
            Method::Supervised => vec![PredictionRule::Head, PredictionRule::Prototype],
            _ => vec![PredictionRule::Prototype, PredictionRule::Head],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: History,
    pub best_epoch: usize,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn divergence(epoch: usize, phase: &'static str, seed: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            phase,
            episode_seed: seed,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn validation_report(
    learner: &Learner,
    train: &Dataset,
    val: &Dataset,
    rule: PredictionRule,
    distance: Distance,
) -> Result<MetricsReport> {
    let c = train.num_classes();
    let preds = match rule {
        PredictionRule::Prototype => {
            let protos = eval::dataset_prototypes(&learner.encoder, train)?;
            eval::classify_embeddings(
                &eval::embed_dataset(&learner.encoder, val)?,
                &protos,
                distance,
            )?
            .predictions
        }
        PredictionRule::Head => {
            let emb = eval::embed_dataset(&learner.encoder, val)?;
            eval::classify_logits(&learner.head.logits_of(&emb)?)?.predictions
        }
    };
    eval::per_class_metrics(&preds, &val.labels(), c)
}

/// Runs the schedule with early stopping on validation macro-F1 and returns
/// the best snapshot. `on_epoch` sees each record as it is produced.
pub fn train(
    train_split: &Dataset,
    val_split: &Dataset,
    encoder_config: &EncoderConfig,
    policy: &AugmentPolicy,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    encoder_config.validate()?;
    policy.validate_for(train_split.modality())?;
    let c = train_split.num_classes();
    if val_split.num_classes() != c {
        return Err(Error::Data(
            "train and validation splits disagree on the class list".into(),
        ));
    }
    if let Some((ch, h, w)) = train_split.item_dims() {
        if ch != encoder_config.in_channels
            || h != encoder_config.input_size
            || w != encoder_config.input_size
        {
            return Err(Error::Config(format!(
                "data items are {ch}x{h}x{w} but the encoder expects {}x{s}x{s}",
                encoder_config.in_channels,
                s = encoder_config.input_size
            )));
        }
    }
    let mut learner = Learner::new(config.clone(), encoder_config.clone(), c)?;
    let rule = config.method.primary_rule();
    let mut episodes = Rng::stream(config.seed, streams::EPISODE);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Encoder<f32>, StudentHead<f32>)> = None;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let (mut lm, mut ls, mut ld, mut lce) = (vec![], vec![], vec![], vec![]);
        let (mut p1, mut p2) = (0, 0);
        let next_episode = |rng: &mut Rng| -> Result<(Episode, Rng)> {
            let seed = mix_seed(rng.next_u64(), epoch as u64);
            let mut erng = Rng::new(seed);
            let ep = build_episode(train_split, policy, config, seed, &mut erng)?;
            Ok((ep, erng))
        };
        match config.active_losses() {
            None => {
                for _ in 0..config.phase2_iters {
                    let (ep, mut erng) = next_episode(&mut episodes)?;
                    let l = learner.supervised_step(&ep, &mut erng).map_err(divergence(
                        epoch,
                        "supervised",
                        ep.seed,
                    ))?;
                    lce.push(l);
                    p2 += 1;
                }
            }
            Some(losses) => {
                if losses.matching {
                    for _ in 0..config.phase1_iters {
                        let (ep, mut erng) = next_episode(&mut episodes)?;
                        let l = learner
                            .phase1_step(&ep, &mut erng)
                            .map_err(divergence(epoch, "phase1", ep.seed))?;
                        lm.push(l);
                        p1 += 1;
                    }
                }
                if losses.phase2() {
                    for _ in 0..config.phase2_iters {
                        let (ep, mut erng) = next_episode(&mut episodes)?;
                        let (s, d) = learner
                            .phase2_step(&ep, losses, &mut erng)
                            .map_err(divergence(epoch, "phase2", ep.seed))?;
                        ls.extend(s);
                        ld.extend(d);
                        p2 += 1;
                    }
                }
            }
        }
        let report = if val_split.is_empty() {
            None
        } else {
            Some(validation_report(
                &learner,
                train_split,
                val_split,
                rule,
                config.distance,
            )?)
        };
        let f1 = report.as_ref().map_or(0.0, |r| r.macro_f1);
        let improved = match &best {
            None => true,
            Some((b, ..)) => report.is_none() || f1 > *b,
        };
        if improved {
            best = Some((f1, epoch, learner.encoder.clone(), learner.head.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            phase1_steps: p1,
            phase2_steps: p2,
            loss_matching: mean(&lm),
            loss_distill: mean(&ls),
            loss_discriminative: mean(&ld),
            loss_supervised: mean(&lce),
            val_precision: report.as_ref().map_or(0.0, |r| r.macro_precision),
            val_recall: report.as_ref().map_or(0.0, |r| r.macro_recall),
            val_f1: f1,
            best: improved,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if stale >= config.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, encoder, head) = best.expect("at least one epoch ran");
    let prototypes = eval::dataset_prototypes(&encoder, train_split)?;
    Ok(TrainOutcome {
        model: TrainedModel {
            method: config.method,
            encoder,
            head,
            prototypes,
            distance: config.distance,
            class_names: train_split.class_names().to_vec(),
            modality: train_split.modality(),
        },
        history,
        best_epoch,
    })
}
