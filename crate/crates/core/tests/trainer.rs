use protokd::augment::AugmentPolicy;
use protokd::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use protokd::data::{
    generate_synthetic, scarce_split, Dataset, Image, Modality, Sample, SplitSpec, SyntheticSpec,
};
use protokd::encoder::{Encoder, EncoderConfig, StudentHead};
use protokd::losses::{compute_prototypes, discriminative_loss, distill_loss, soften};
use protokd::trainer::{
    build_episode, phase1_objective, phase2_objective, phase2_terms, train, Episode, EpisodeBatch,
    Learner, LossSet, Method, TrainConfig,
};
use protokd::{Graph, Mode, Rng, Tensor, Var};

fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig {
        input_size: 8,
        embed_dim: 8,
        dropout_rate: 0.0,
        ..EncoderConfig::default()
    }
}

fn desk_encoder(size: usize) -> EncoderConfig {
    EncoderConfig {
        input_size: size,
        ..EncoderConfig::default()
    }
}

fn corpus(classes: usize, per_class: usize, variance: f64, size: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        classes,
        per_class,
        intra_class_variance: variance,
        image_size: size,
        seed: 11,
        imbalance: 0.0,
        min_per_class: 1,
    })
    .unwrap()
}

fn toy_episode(classes: usize) -> Episode {
    let ds = corpus(classes, 4, 0.8, 8);
    let split = scarce_split(
        &ds,
        &SplitSpec {
            train_per_class: 1,
            val_per_class: 0,
            seed: 1,
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        query_per_class: 2,
        ..TrainConfig::default()
    };
    build_episode(
        &split.train,
        &AugmentPolicy::default(),
        &cfg,
        0,
        &mut Rng::new(5),
    )
    .unwrap()
}

#[test]
fn episode_sizes_and_determinism() {
    let ds = corpus(14, 3, 0.3, 16);
    let split = scarce_split(
        &ds,
        &SplitSpec {
            train_per_class: 1,
            val_per_class: 1,
            seed: 0,
        },
    )
    .unwrap();
    let cfg = TrainConfig::default();
    let policy = AugmentPolicy::default();
    let a = build_episode(&split.train, &policy, &cfg, 9, &mut Rng::new(9)).unwrap();
    assert_eq!((a.support.len(), a.query.len()), (14, 70));
    let b = build_episode(&split.train, &policy, &cfg, 9, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    for c in 0..14 {
        assert_eq!(a.query.iter().filter(|s| s.label == c).count(), 5);
    }
    let plain = build_episode(
        &split.train,
        &AugmentPolicy::empty(),
        &cfg,
        9,
        &mut Rng::new(9),
    )
    .unwrap();
    for q in &plain.query {
        let s = plain.support.iter().find(|s| s.label == q.label).unwrap();
        assert_eq!(q, s);
    }
    let big = TrainConfig {
        support_size: 2,
        ..cfg
    };
    assert!(build_episode(&split.train, &policy, &big, 0, &mut Rng::new(0)).is_err());
}

#[test]
fn constant_encoder_gives_log_c() {
    let classes = 5;
    let ep = toy_episode(classes);
    let mut learner = Learner::new(TrainConfig::default(), toy_encoder_config(), classes).unwrap();
    for p in learner.encoder.params_mut().iter_mut() {
        if p.name == "proj.weight" {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let loss = learner.phase1_step(&ep, &mut Rng::new(0)).unwrap();
    assert!((loss - (classes as f64).ln()).abs() < 1e-6, "{loss}");
}

/// Binds encoder parameters, swapping in graph inputs for the listed ones.
fn bind_with(
    g: &mut Graph<f64>,
    enc: &Encoder<f64>,
    checked: &[usize],
    inputs: &[Var],
) -> Vec<Var> {
    enc.params()
        .iter()
        .enumerate()
        .map(|(i, p)| match checked.iter().position(|&c| c == i) {
            Some(k) => inputs[k],
            None => g.constant(p.value.clone()),
        })
        .collect()
}

fn checked_slots(enc: &Encoder<f64>) -> Vec<usize> {
    [
        "stem.conv",
        "stage2.block0.norm2.gamma",
        "final.norm.beta",
        "proj.weight",
        "proj.bias",
    ]
    .iter()
    .map(|n| enc.params().iter().position(|p| p.name == *n).unwrap())
    .collect()
}

#[test]
fn phase1_gradient_matches_finite_differences() {
    let ep = toy_episode(3);
    let batch = EpisodeBatch::<f64>::new(&ep).unwrap();
    let enc = Encoder::<f64>::new(toy_encoder_config(), &mut Rng::new(2)).unwrap();
    let slots = checked_slots(&enc);
    let inputs: Vec<Tensor<f64>> = slots
        .iter()
        .map(|&i| enc.params().get(i).value.clone())
        .collect();
    // A 1e-4 step straddles ReLU kinks for a few stem weights.
    let config = GradCheckConfig {
        step: 1e-6,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(&inputs, &vec![true; inputs.len()], config, |g, vars| {
        let bound = bind_with(g, &enc, &slots, vars);
        phase1_objective(
            g,
            &enc,
            &bound,
            &batch,
            3,
            Default::default(),
            Mode::Train,
            &mut Rng::new(0),
        )
    })
    .unwrap();
    assert!(
        report.passed(),
        "{:?}",
        &report.mismatches[..report.mismatches.len().min(5)]
    );
    assert!(report.checked > 900);
}

#[test]
fn phase2_gradient_matches_finite_differences() {
    // The pseudo-labels are data during the step, so the oracle holds them fixed.
    let ep = toy_episode(3);
    let batch = EpisodeBatch::<f64>::new(&ep).unwrap();
    let mut rng = Rng::new(3);
    let enc = Encoder::<f64>::new(toy_encoder_config(), &mut rng).unwrap();
    let head = StudentHead::<f64>::new(8, 3, &mut rng);
    let support: Vec<&Image> = ep.support.iter().map(|s| &s.image).collect();
    let protos = enc.embed(&Image::batch(&support).unwrap()).unwrap();
    let queries = batch.query_images().unwrap();
    let ps = compute_prototypes(&protos, &[0, 1, 2], 3).unwrap();
    let cfg = TrainConfig {
        tau: 2.0,
        ..TrainConfig::default()
    };
    let teacher =
        protokd::losses::teacher_probs(&enc.embed(&queries).unwrap(), &ps, cfg.distance).unwrap();
    let slots = checked_slots(&enc);
    let mut inputs: Vec<Tensor<f64>> = slots
        .iter()
        .map(|&i| enc.params().get(i).value.clone())
        .collect();
    inputs.extend(head.params().iter().map(|p| p.value.clone()));
    let n = slots.len();
    let config = GradCheckConfig {
        step: 1e-6,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(&inputs, &vec![true; inputs.len()], config, |g, vars| {
        let bound = bind_with(g, &enc, &slots, &vars[..n]);
        let x = g.constant(queries.clone());
        let q = enc.forward(g, &bound, x, Mode::Train, &mut Rng::new(0))?;
        let terms = phase2_terms(
            g,
            q,
            &head,
            &vars[n..],
            Some(&teacher),
            &protos,
            &batch.query_labels,
            &cfg,
            LossSet::ALL,
        )?;
        Ok(terms.total)
    })
    .unwrap();
    assert!(
        report.passed(),
        "{:?}",
        &report.mismatches[..report.mismatches.len().min(5)]
    );

    // The full objective computes the same pseudo-labels internally.
    let mut g = Graph::new();
    let ev = enc.params().bind(&mut g);
    let hv = head.params().bind(&mut g);
    let full = phase2_objective(
        &mut g,
        &enc,
        &ev,
        &head,
        &hv,
        &batch,
        &protos,
        &cfg,
        LossSet::ALL,
        Mode::Train,
        &mut Rng::new(0),
    )
    .unwrap();
    let mut h = Graph::new();
    let bound = enc.params().bind_frozen(&mut h);
    let hb = head.params().bind_frozen(&mut h);
    let x = h.constant(queries.clone());
    let q = enc
        .forward(&mut h, &bound, x, Mode::Train, &mut Rng::new(0))
        .unwrap();
    let fixed = phase2_terms(
        &mut h,
        q,
        &head,
        &hb,
        Some(&teacher),
        &protos,
        &batch.query_labels,
        &cfg,
        LossSet::ALL,
    )
    .unwrap();
    let (a, b) = (
        g.value(full.total).item().unwrap(),
        h.value(fixed.total).item().unwrap(),
    );
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn teacher_branch_contributes_no_gradient() {
    // Gradients with the in-graph teacher equal those with the same teacher
    // computed on a separate graph and passed in as data.
    let ep = toy_episode(3);
    let batch = EpisodeBatch::<f64>::new(&ep).unwrap();
    let mut rng = Rng::new(8);
    let enc = Encoder::<f64>::new(toy_encoder_config(), &mut rng).unwrap();
    let head = StudentHead::<f64>::new(8, 3, &mut rng);
    let support: Vec<&Image> = ep.support.iter().map(|s| &s.image).collect();
    let protos = enc.embed(&Image::batch(&support).unwrap()).unwrap();
    let cfg = TrainConfig::default();

    let mut g = Graph::new();
    let ev = enc.params().bind(&mut g);
    let hv = head.params().bind(&mut g);
    let terms = phase2_objective(
        &mut g,
        &enc,
        &ev,
        &head,
        &hv,
        &batch,
        &protos,
        &cfg,
        LossSet::ALL,
        Mode::Eval,
        &mut Rng::new(0),
    )
    .unwrap();
    g.backward(terms.total).unwrap();

    let queries: Vec<&Image> = ep.query.iter().map(|s| &s.image).collect();
    let q_emb = enc.embed(&Image::batch(&queries).unwrap()).unwrap();
    let ps = compute_prototypes(&protos, &[0, 1, 2], 3).unwrap();
    let teacher = protokd::losses::teacher_probs(&q_emb, &ps, cfg.distance).unwrap();
    let mut h = Graph::new();
    let ev2 = enc.params().bind(&mut h);
    let hv2 = head.params().bind(&mut h);
    let x = h.constant(Image::batch(&queries).unwrap());
    let q = enc
        .forward(&mut h, &ev2, x, Mode::Eval, &mut Rng::new(0))
        .unwrap();
    let logits = head.logits(&mut h, &hv2, q).unwrap();
    let ls = distill_loss(&mut h, &teacher, logits, cfg.tau).unwrap();
    let p = h.constant(protos.clone());
    let labels: Vec<usize> = ep.query.iter().map(|s| s.label).collect();
    let ld = discriminative_loss(&mut h, q, p, &labels).unwrap();
    let total = h.add(ls, ld).unwrap();
    h.backward(total).unwrap();

    for (a, b) in ev.iter().chain(&hv).zip(ev2.iter().chain(&hv2)) {
        let (ga, gb) = (g.grad(*a).unwrap(), h.grad(*b).unwrap());
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn matched_student_leaves_only_discriminative_term() {
    let teacher: Tensor<f64> = Tensor::new(&[2, 3], vec![0.7, 0.2, 0.1, 0.1, 0.1, 0.8]).unwrap();
    let tau = 5.0;
    let soft = soften(&teacher, tau).unwrap();
    let logits = soft.map(|p| tau * p.ln());
    let mut g = Graph::<f64>::new();
    let z = g.param(logits);
    let ls = distill_loss(&mut g, &teacher, z, tau).unwrap();
    assert!(g.value(ls).item().unwrap().abs() < 1e-9);
    let q = g.param(Tensor::new(&[2, 2], vec![1.0, 0.2, 0.3, 1.0]).unwrap());
    let p = g.constant(Tensor::new(&[3, 2], vec![1.0, 0.2, 0.0, 1.0, -1.0, 0.0]).unwrap());
    let ld = discriminative_loss(&mut g, q, p, &[0, 1]).unwrap();
    let w = protokd::losses::LossWeights {
        distill: 1.0,
        discriminative: 0.7,
    };
    let total = protokd::losses::combined_phase2_loss(&mut g, ls, ld, w).unwrap();
    let expect = 0.7 * g.value(ld).item().unwrap();
    assert!((g.value(total).item().unwrap() - expect).abs() < 1e-9);
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let ep = toy_episode(3);
    let cfg = TrainConfig {
        weights: protokd::losses::LossWeights {
            distill: 0.0,
            discriminative: 0.0,
        },
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(cfg, toy_encoder_config(), 3).unwrap();
    let before = (
        learner.encoder.params().clone(),
        learner.head.params().clone(),
    );
    let (ls, ld) = learner
        .phase2_step(&ep, LossSet::ALL, &mut Rng::new(0))
        .unwrap();
    assert!(ls.is_some() && ld.is_some());
    assert_eq!(learner.encoder.params(), &before.0);
    assert_eq!(learner.head.params(), &before.1);
    assert_eq!(learner.steps(), 0);
}

fn quick(method: Method, epochs: usize, p1: usize, p2: usize) -> TrainConfig {
    TrainConfig {
        method,
        epochs,
        phase1_iters: p1,
        phase2_iters: p2,
        ..TrainConfig::default()
    }
}

fn tiny_split(classes: usize, variance: f64) -> protokd::data::Split {
    scarce_split(
        &corpus(classes, 8, variance, 16),
        &SplitSpec {
            train_per_class: 1,
            val_per_class: 2,
            seed: 4,
        },
    )
    .unwrap()
}

#[test]
fn step_bookkeeping() {
    let split = tiny_split(3, 0.2);
    let enc = desk_encoder(16);
    let policy = AugmentPolicy::default();
    let out = train(
        &split.train,
        &split.val,
        &enc,
        &policy,
        &quick(Method::Protokd, 1, 1, 1),
        |_| {},
    )
    .unwrap();
    assert_eq!(out.history.total_steps(), 2);
    let out = train(
        &split.train,
        &split.val,
        &enc,
        &policy,
        &quick(Method::Protokd, 2, 3, 2),
        |_| {},
    )
    .unwrap();
    assert!(out
        .history
        .epochs
        .iter()
        .all(|e| (e.phase1_steps, e.phase2_steps) == (3, 2)));
    let out = train(
        &split.train,
        &split.val,
        &enc,
        &policy,
        &quick(Method::Protonet, 2, 3, 2),
        |_| {},
    )
    .unwrap();
    assert!(out
        .history
        .epochs
        .iter()
        .all(|e| (e.phase1_steps, e.phase2_steps) == (3, 0)));
    assert!(out.history.epochs.iter().all(|e| e.loss_distill.is_none()));
    let out = train(
        &split.train,
        &split.val,
        &enc,
        &policy,
        &quick(Method::Supervised, 1, 3, 2),
        |_| {},
    )
    .unwrap();
    assert_eq!(out.history.epochs[0].phase2_steps, 2);
    assert!(out.history.epochs[0].loss_supervised.is_some());
    let ld_only = TrainConfig {
        losses: Some(LossSet::new(false, false, true)),
        ..quick(Method::Protokd, 1, 3, 2)
    };
    let out = train(&split.train, &split.val, &enc, &policy, &ld_only, |_| {}).unwrap();
    assert_eq!(
        (
            out.history.epochs[0].phase1_steps,
            out.history.epochs[0].phase2_steps
        ),
        (0, 2)
    );
}

#[test]
fn replayed_runs_are_identical_and_best_is_max() {
    let split = tiny_split(4, 0.6);
    let enc = desk_encoder(16);
    let cfg = TrainConfig {
        early_stop_patience: 2,
        ..quick(Method::Protokd, 6, 2, 2)
    };
    let run = || {
        train(
            &split.train,
            &split.val,
            &enc,
            &AugmentPolicy::default(),
            &cfg,
            |_| {},
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history.to_jsonl().unwrap(), b.history.to_jsonl().unwrap());
    assert_eq!(a.model.encoder.params(), b.model.encoder.params());
    let max = a
        .history
        .epochs
        .iter()
        .map(|e| e.val_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.history.epochs[a.best_epoch].val_f1, max);
    assert!(a.history.epochs[a.best_epoch].best);
    // Early stopping: no more than `patience` epochs after the last improvement.
    let last_best = a.history.epochs.iter().rposition(|e| e.best).unwrap();
    assert!(a.history.epochs.len() - 1 - last_best <= cfg.early_stop_patience);
}

#[test]
fn separable_corpus_reaches_perfect_validation() {
    let split = tiny_split(4, 0.0);
    let cfg = quick(Method::Protokd, 30, 10, 10);
    let mut perfect_at = None;
    let out = train(
        &split.train,
        &split.val,
        &desk_encoder(16),
        &AugmentPolicy::default(),
        &cfg,
        |r| {
            if r.val_f1 == 1.0 && perfect_at.is_none() {
                perfect_at = Some(r.epoch);
            }
        },
    )
    .unwrap();
    assert!(perfect_at.is_some());
    assert_eq!(out.history.best().unwrap().val_f1, 1.0);
}

#[test]
fn matching_loss_trends_down_on_separable_data() {
    // 20 phase-1 steps; the 5-step moving average must not increase.
    let split = tiny_split(4, 0.0);
    let cfg = TrainConfig {
        support_size: 1,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(cfg.clone(), desk_encoder(16), 4).unwrap();
    let mut rng = Rng::new(21);
    let mut losses = Vec::new();
    for _ in 0..20 {
        let ep = build_episode(&split.train, &AugmentPolicy::empty(), &cfg, 0, &mut rng).unwrap();
        losses.push(learner.phase1_step(&ep, &mut rng).unwrap());
    }
    let ma: Vec<f64> = losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    for w in ma.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "moving average rose: {ma:?}");
    }
    assert!(losses[0] > *losses.last().unwrap());
}

#[test]
fn degenerate_episode_beats_uniform_after_one_epoch() {
    let split = tiny_split(4, 0.0);
    let cfg = TrainConfig {
        phase1_iters: 10,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(cfg.clone(), desk_encoder(16), 4).unwrap();
    let mut rng = Rng::new(1);
    let ep = build_episode(&split.train, &AugmentPolicy::empty(), &cfg, 0, &mut rng).unwrap();
    for _ in 0..cfg.phase1_iters {
        learner.phase1_step(&ep, &mut rng).unwrap();
    }
    let after = learner.phase1_step(&ep, &mut rng).unwrap();
    assert!(after < 4f64.ln(), "{after}");
}

#[test]
fn mismatched_input_size_is_a_config_error() {
    let split = tiny_split(3, 0.0);
    let err = train(
        &split.train,
        &split.val,
        &desk_encoder(32),
        &AugmentPolicy::default(),
        &quick(Method::Protokd, 1, 1, 1),
        |_| {},
    );
    assert!(matches!(err, Err(protokd::Error::Config(_))));
    let bad = Dataset::new(
        vec![Sample {
            image: Image::filled(1, 16, 16, 0.0),
            label: 0,
        }],
        vec!["a".into()],
        Modality::PseudoImage,
    )
    .unwrap();
    let err = train(
        &bad,
        &bad,
        &desk_encoder(16),
        &AugmentPolicy::default(),
        &quick(Method::Protokd, 1, 1, 1),
        |_| {},
    );
    assert!(matches!(err, Err(protokd::Error::Config(_))));
}
