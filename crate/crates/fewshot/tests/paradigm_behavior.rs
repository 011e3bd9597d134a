//! Training-paradigm semantics: inner-loop subsets, the alpha=0 limit,
//! prototype oracles, projector-presence in every training loss.

use fewshot::data::{make_synthetic_domain, sample_episode, ShiftSpec, SynthSpec};
use fewshot::model::{
    train_forward, BackboneKind, BackboneSpec, HeadKind, ImageShape, ModelBundle, ProjectorConfig,
};
use fewshot::nn::loss::cross_entropy;
use fewshot::nn::params::ParamGroup;
use fewshot::nn::sgd::Sgd;
use fewshot::paradigms::{
    compute_prototypes, meta_inner_adapt, meta_outer_step, metric_episode_grads, proto_predict,
    DistanceKind, EpisodeObjective, InnerSubset, Objective, ParadigmConfig, ParadigmKind,
};
use fewshot::rng::stream;
use ndarray::{Array2, Array4};
use rand::Rng;

fn tiny_bundle(classes: usize, seed: u64) -> ModelBundle {
    let spec = BackboneSpec::new(BackboneKind::Conv32fTiny, ImageShape::new(3, 16, 16));
    let d = spec.feature_dim().unwrap();
    ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, classes, seed).unwrap()
}

fn toy_source(seed: u64) -> fewshot::data::LabeledDataset {
    make_synthetic_domain(&SynthSpec {
        name: format!("src-{seed}"),
        base_seed: seed,
        classes: 5,
        items_per_class: 8,
        shape: ImageShape::new(3, 16, 16),
        shift: ShiftSpec::none(),
    })
    .unwrap()
}

fn meta_cfg() -> ParadigmConfig {
    let mut cfg = ParadigmConfig::meta();
    cfg.train_way = 5;
    cfg.train_shot = 1;
    cfg.train_query = 2;
    cfg
}

#[test]
fn head_only_inner_adapt_leaves_body_bitwise_unchanged() {
    let bundle = tiny_bundle(5, 3);
    let source = toy_source(40);
    let ep = sample_episode(&source, 5, 1, 2, &mut stream(1, "ep")).unwrap();
    let (sx, sy) = ep.support_batch();
    let mut cfg = meta_cfg();
    cfg.inner_subset = InnerSubset::HeadOnly;
    cfg.inner_lr = 0.05;
    let adapted = meta_inner_adapt(&bundle, &sx, &sy, &cfg).unwrap();
    let layout = bundle.params.layout.clone();
    let mut omega_changed = false;
    for ((entry, before), after) in layout
        .entries
        .iter()
        .zip(bundle.params.tensors())
        .zip(adapted.tensors())
    {
        match entry.group {
            ParamGroup::Omega => {
                omega_changed |= before.iter().zip(after.iter()).any(|(a, b)| a != b);
            }
            _ => {
                assert!(
                    before
                        .iter()
                        .zip(after.iter())
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{} must be untouched",
                    entry.name
                );
            }
        }
    }
    assert!(omega_changed, "head parameters should move");
}

#[test]
fn inner_adaptation_decreases_support_loss() {
    // head must be non-zero for gradients to reach it usefully
    let mut bundle = tiny_bundle(5, 3);
    let layout = bundle.params.layout.clone();
    let mut rng = stream(8, "head");
    for (entry, tensor) in layout.entries.iter().zip(bundle.params.tensors_mut()) {
        if entry.group == ParamGroup::Omega {
            for v in tensor.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let source = toy_source(41);
    let ep = sample_episode(&source, 5, 2, 2, &mut stream(2, "ep")).unwrap();
    let (sx, sy) = ep.support_batch();
    let mut cfg = meta_cfg();
    cfg.inner_lr = 1e-2;
    cfg.inner_steps = 3;
    let obj = EpisodeObjective::new(&bundle.arch, &bundle.params, sx.clone(), sy.clone()).unwrap();
    let before = obj.loss(&bundle.params.flatten());
    let adapted = meta_inner_adapt(&bundle, &sx, &sy, &cfg).unwrap();
    let after = obj.loss(&adapted.flatten());
    assert!(after < before, "support loss {before} -> {after}");
}

#[test]
fn alpha_zero_outer_step_equals_plain_supervised_training_on_queries() {
    let source = toy_source(42);
    let ep = sample_episode(&source, 5, 1, 3, &mut stream(3, "ep")).unwrap();

    let mut cfg = meta_cfg();
    cfg.inner_lr = 0.0; // degenerate on purpose: adaptation is identity
    let mut meta_bundle = tiny_bundle(5, 7);
    let mut opt = Sgd::new(&meta_bundle.params, cfg.momentum, cfg.weight_decay);
    meta_outer_step(&mut meta_bundle, &[ep.clone()], &cfg, &mut opt, 0.01).unwrap();

    let mut plain_bundle = tiny_bundle(5, 7);
    let (qx, qy) = ep.query_batch();
    let (_, grads) = plain_bundle.ce_loss_and_grads(&qx, &qy, true).unwrap();
    let mut opt2 = Sgd::new(&plain_bundle.params, cfg.momentum, cfg.weight_decay);
    opt2.step(&mut plain_bundle.params, &grads, 0.01);

    for (a, b) in meta_bundle
        .params
        .tensors()
        .iter()
        .zip(plain_bundle.params.tensors())
    {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn outer_steps_reduce_query_loss_on_a_fixed_episode() {
    let source = toy_source(43);
    let ep = sample_episode(&source, 5, 2, 3, &mut stream(4, "ep")).unwrap();
    let mut bundle = tiny_bundle(5, 11);
    let mut cfg = meta_cfg();
    cfg.inner_lr = 0.01;
    let mut opt = Sgd::new(&bundle.params, 0.9, 0.0);
    let (first, _) = meta_outer_step(&mut bundle, &[ep.clone()], &cfg, &mut opt, 0.02).unwrap();
    let mut last = first;
    for _ in 0..10 {
        let (l, _) = meta_outer_step(&mut bundle, &[ep.clone()], &cfg, &mut opt, 0.02).unwrap();
        last = l;
    }
    assert!(last < first, "query loss {first} -> {last}");
}

#[test]
fn prototypes_match_brute_force_resummation_on_random_instances() {
    let mut rng = stream(17, "proto");
    for _ in 0..20 {
        let classes = rng.gen_range(2..=5);
        let k = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=8);
        let per_class: Vec<Array2<f64>> = (0..classes)
            .map(|_| Array2::from_shape_fn((k, d), |_| rng.gen_range(-3.0..3.0)))
            .collect();
        let protos = compute_prototypes(&per_class).unwrap();
        for (c, feats) in per_class.iter().enumerate() {
            for j in 0..d {
                let mut sum = 0.0;
                for i in 0..k {
                    sum += feats[[i, j]];
                }
                assert_eq!(protos[[c, j]], sum / k as f64);
            }
        }
    }
}

#[test]
fn proto_argmax_matches_nearest_centroid_on_random_instances() {
    let mut rng = stream(19, "argmax");
    for _ in 0..50 {
        let c = rng.gen_range(2..=5);
        let q = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let protos = Array2::from_shape_fn((c, d), |_| rng.gen_range(-2.0..2.0));
        let query = Array2::from_shape_fn((q, d), |_| rng.gen_range(-2.0..2.0));
        let probs = proto_predict(&query, &protos, DistanceKind::SqEuclidean).unwrap();
        for i in 0..q {
            let pred = fewshot::nn::loss::argmax_lowest(probs.row(i).iter().copied());
            // brute-force nearest centroid, lowest index on ties
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..c {
                let dist: f64 = (0..d)
                    .map(|k| (query[[i, k]] - protos[[j, k]]).powi(2))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            assert_eq!(pred, best);
        }
    }
}

#[test]
fn prototype_scaling_linearity() {
    let mut rng = stream(23, "lin");
    let per_class: Vec<Array2<f64>> = (0..3)
        .map(|_| Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let base = compute_prototypes(&per_class).unwrap();
    let scaled: Vec<Array2<f64>> = per_class.iter().map(|f| f.mapv(|v| 2.5 * v)).collect();
    let got = compute_prototypes(&scaled).unwrap();
    for (a, b) in got.iter().zip(base.iter()) {
        assert!((a - 2.5 * b).abs() < 1e-12);
    }
}

#[test]
fn separable_features_give_perfect_episode_accuracy() {
    // prototype mechanism on a constructed separable instance
    let protos_src = [
        [10.0, 0.0, 0.0],
        [0.0, 10.0, 0.0],
        [0.0, 0.0, 10.0],
    ];
    let mut rng = stream(29, "sep");
    let mut support = Vec::new();
    for center in &protos_src {
        support.push(Array2::from_shape_fn((5, 3), |(_, j)| {
            center[j] + rng.gen_range(-0.5..0.5)
        }));
    }
    let protos = compute_prototypes(&support).unwrap();
    let query = Array2::from_shape_fn((30, 3), |(i, j)| {
        protos_src[i % 3][j] + rng.gen_range(-0.5..0.5)
    });
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let probs = proto_predict(&query, &protos, DistanceKind::SqEuclidean).unwrap();
    assert_eq!(fewshot::nn::loss::accuracy(&probs, &labels), 1.0);
}

#[test]
fn every_training_loss_flows_through_the_projector() {
    // mutating epsilon changes each paradigm's training loss
    let source = toy_source(44);
    let ep = sample_episode(&source, 5, 2, 2, &mut stream(5, "ep")).unwrap();
    let (sx, sy) = ep.support_batch();
    let (qx, qy) = ep.query_batch();

    let bundle = {
        let mut b = tiny_bundle(5, 13);
        let layout = b.params.layout.clone();
        let mut rng = stream(6, "head");
        for (entry, tensor) in layout.entries.iter().zip(b.params.tensors_mut()) {
            if entry.group == ParamGroup::Omega {
                for v in tensor.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        b
    };
    let mut mutated = bundle.clone();
    let layout = mutated.params.layout.clone();
    let mut rng = stream(7, "eps");
    for (entry, tensor) in layout.entries.iter().zip(mutated.params.tensors_mut()) {
        if entry.group == ParamGroup::Epsilon {
            for v in tensor.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    // non-episodic / meta losses: plain CE through the stack
    let ce_loss = |b: &ModelBundle| -> f64 {
        let (logits, _, _) = train_forward(&b.arch, &b.params, &sx).unwrap();
        cross_entropy(&logits, &sy).0
    };
    assert!((ce_loss(&bundle) - ce_loss(&mutated)).abs() > 1e-9);

    // metric loss: prototype CE
    let metric_loss = |b: &ModelBundle| -> f64 {
        metric_episode_grads(
            &b.arch,
            &b.params,
            &sx,
            &sy,
            &qx,
            &qy,
            5,
            DistanceKind::SqEuclidean,
        )
        .unwrap()
        .0
    };
    assert!((metric_loss(&bundle) - metric_loss(&mutated)).abs() > 1e-9);

    // while evaluation features ignore epsilon entirely
    let fa = bundle.forward_eval(&qx).unwrap();
    let fb = mutated.forward_eval(&qx).unwrap();
    assert!(fa.iter().zip(fb.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn identical_seeds_reproduce_training_histories_exactly() {
    let source = toy_source(45);
    let mut cfg = ParadigmConfig::metric();
    cfg.epochs = 2;
    cfg.episodes_per_epoch = 3;
    cfg.train_way = 5;
    cfg.train_shot = 2;
    cfg.train_query = 2;
    let run = || -> Vec<f64> {
        let mut bundle = tiny_bundle(5, 21);
        fewshot::paradigms::train_metric(&mut bundle, &source, &cfg)
            .unwrap()
            .epoch_losses()
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn metric_loss_history_has_one_entry_per_epoch() {
    let source = toy_source(46);
    let mut cfg = ParadigmConfig::metric();
    cfg.epochs = 3;
    cfg.episodes_per_epoch = 2;
    cfg.train_way = 4;
    cfg.train_shot = 1;
    cfg.train_query = 2;
    let mut bundle = {
        let spec = BackboneSpec::new(BackboneKind::Conv32fTiny, ImageShape::new(3, 16, 16));
        let d = spec.feature_dim().unwrap();
        ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, 4, 2).unwrap()
    };
    let hist = fewshot::paradigms::train_metric(&mut bundle, &source, &cfg).unwrap();
    assert_eq!(hist.records.len(), 3);
    assert!(hist.records.iter().all(|r| r.accuracy.is_some()));
}

#[test]
fn untrained_extractor_scores_near_chance_on_episodes() {
    // small-scale version of the random-extractor control
    let bundle = tiny_bundle(5, 31);
    let target = toy_source(47);
    let protocol = fewshot::paradigms::EvalProtocol {
        way: 5,
        shot: 1,
        query: 3,
        episodes: 60,
    };
    let accs = fewshot::paradigms::evaluate_episodes(
        &bundle,
        &target,
        &protocol,
        &fewshot::paradigms::TuneConfig::default(),
        9,
    )
    .unwrap();
    let (mean, _) = fewshot::metrics::aggregate_accuracy(&accs).unwrap();
    assert!(
        (0.05..0.45).contains(&mean),
        "untrained accuracy should be loosely near chance, got {mean}"
    );
}

