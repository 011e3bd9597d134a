//! Forward-path contracts: projector composition, training vs
//! evaluation paths, BN statistics behavior.

use fewshot::model::{
    BackboneKind, BackboneSpec, HeadKind, ImageShape, ModelBundle, Projector, ProjectorConfig,
};
use fewshot::nn::layers::{bn2_train, linear_forward, relu_forward};
use fewshot::nn::loss::cross_entropy;
use fewshot::nn::params::ParamGroup;
use fewshot::rng::stream;
use fewshot::Error;
use ndarray::{Array2, Array4};
use rand::Rng;

fn spec16() -> BackboneSpec {
    BackboneSpec::new(BackboneKind::Conv32fTiny, ImageShape::new(3, 16, 16))
}

fn rand_batch(seed: u64, n: usize, shape: (usize, usize, usize)) -> Array4<f64> {
    let mut rng = stream(seed, "batch");
    Array4::from_shape_fn((n, shape.0, shape.1, shape.2), |_| rng.gen_range(0.0..1.0))
}

#[test]
fn all_sixteen_projector_combinations_build_and_preserve_dimension() {
    let d = 10;
    let x = Array2::from_shape_fn((6, d), |(i, j)| ((i * d + j) as f64).sin());
    for bits in 0..16u8 {
        let cfg = ProjectorConfig {
            input_fc: bits & 1 != 0,
            bn: bits & 2 != 0,
            relu: bits & 4 != 0,
            output_fc: bits & 8 != 0,
            feature_dim: d,
        };
        let mut p = Projector::build(cfg, 42);
        let y = p.forward_train(&x);
        assert_eq!(y.dim(), (6, d), "combination {bits:04b}");
        let y_eval = p.forward_eval(&x);
        assert_eq!(y_eval.dim(), (6, d));
    }
}

#[test]
fn all_off_projector_is_exactly_identity() {
    let d = 7;
    let mut p = Projector::build(ProjectorConfig::none(d), 0);
    let mut rng = stream(9, "idproj");
    let x = Array2::from_shape_fn((100, d), |_| rng.gen_range(-5.0..5.0));
    let y = p.forward_train(&x);
    assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let y = p.forward_eval(&x);
    assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn partial_projector_composes_enabled_components_in_eq_order() {
    // flags {input_fc, bn}: the map must equal BN(fc1(x)) built by hand
    // from the same parameters
    let d = 5;
    let cfg = ProjectorConfig {
        input_fc: true,
        bn: true,
        relu: false,
        output_fc: false,
        feature_dim: d,
    };
    let mut p = Projector::build(cfg, 7);
    let mut rng = stream(3, "order");
    let x = Array2::from_shape_fn((8, d), |_| rng.gen_range(-1.0..1.0));
    let got = p.forward_train(&x);

    let names: Vec<&str> = p.params.layout.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(
        names,
        vec!["epsilon.fc1.weight", "epsilon.fc1.bias", "epsilon.bn.gamma", "epsilon.bn.beta"]
    );
    let w = p.params.a2(fewshot::nn::params::ParamId(0));
    let b = p.params.a1(fewshot::nn::params::ParamId(1));
    let gamma = p.params.a1(fewshot::nn::params::ParamId(2));
    let beta = p.params.a1(fewshot::nn::params::ParamId(3));
    let h = linear_forward(&x, w, Some(b));
    let (expect, _, _) = bn2_train(&h, gamma, beta);
    assert!(got
        .iter()
        .zip(expect.iter())
        .all(|(a, b)| (a - b).abs() < 1e-12));

    // and {relu, output_fc} must equal fc2(relu(x)), distinguishing the
    // order from fc2-then-relu
    let cfg = ProjectorConfig {
        input_fc: false,
        bn: false,
        relu: true,
        output_fc: true,
        feature_dim: d,
    };
    let mut p = Projector::build(cfg, 7);
    let got = p.forward_train(&x);
    let w = p.params.a2(fewshot::nn::params::ParamId(0));
    let b = p.params.a1(fewshot::nn::params::ParamId(1));
    let (rx, _) = relu_forward(&x);
    let expect = linear_forward(&rx, w, Some(b));
    assert!(got
        .iter()
        .zip(expect.iter())
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn zero_init_linear_head_gives_uniform_softmax_and_ln_c_loss() {
    for classes in [3usize, 8] {
        let spec = spec16();
        let d = spec.feature_dim().unwrap();
        let mut bundle =
            ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, classes, 1).unwrap();
        let x = rand_batch(5, 4, (3, 16, 16));
        let logits = bundle.forward_train(&x).unwrap();
        assert_eq!(logits.dim(), (4, classes));
        let labels: Vec<usize> = (0..4).map(|i| i % classes).collect();
        let (loss, _) = cross_entropy(&logits, &labels);
        assert!(
            (loss - (classes as f64).ln()).abs() < 1e-6,
            "classes={classes} loss={loss}"
        );
    }
}

#[test]
fn input_shape_mismatch_reports_expected_and_actual() {
    let spec = spec16();
    let d = spec.feature_dim().unwrap();
    let mut bundle =
        ModelBundle::new(spec, ProjectorConfig::none(d), HeadKind::Linear, 3, 1).unwrap();
    let bad = rand_batch(5, 2, (3, 16, 20));
    match bundle.forward_train(&bad) {
        Err(Error::ShapeMismatch { expected, actual }) => {
            assert_eq!(expected, vec![3, 16, 16]);
            assert_eq!(actual, vec![3, 16, 20]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(bundle.forward_eval(&bad).is_err());
}

#[test]
fn eval_path_ignores_projector_and_head_parameters() {
    let spec = spec16();
    let d = spec.feature_dim().unwrap();
    let bundle =
        ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, 5, 3).unwrap();
    let x = rand_batch(8, 3, (3, 16, 16));
    let before = bundle.forward_eval(&x).unwrap();

    // mutate every epsilon and omega tensor, then re-run
    let mut mutated = bundle.clone();
    let layout = mutated.params.layout.clone();
    let mut rng = stream(77, "mutate");
    for (entry, tensor) in layout.entries.iter().zip(mutated.params.tensors_mut()) {
        if entry.group != ParamGroup::Theta {
            for v in tensor.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let after = mutated.forward_eval(&x).unwrap();
    assert!(before
        .iter()
        .zip(after.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    // while the projector-bearing training path must change
    let (l0, _) = cross_entropy(
        &{
            let mut b = bundle.clone();
            b.forward_train(&x).unwrap()
        },
        &[0, 1, 2],
    );
    let (l1, _) = cross_entropy(&mutated.forward_train(&x).unwrap(), &[0, 1, 2]);
    assert!((l0 - l1).abs() > 1e-9);
}

#[test]
fn eval_output_matches_projectorless_bundle_and_is_deterministic() {
    let spec = spec16();
    let d = spec.feature_dim().unwrap();
    let full = ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, 4, 11).unwrap();
    let none = ModelBundle::new(spec, ProjectorConfig::none(d), HeadKind::Linear, 4, 11).unwrap();
    let x = rand_batch(2, 5, (3, 16, 16));
    let a = full.forward_eval(&x).unwrap();
    let b = none.forward_eval(&x).unwrap();
    assert_eq!(a.dim(), (5, d));
    // same seed -> same theta stream -> identical features
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    // repeated eval calls mutate nothing
    let again = full.forward_eval(&x).unwrap();
    assert!(a.iter().zip(again.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_forward_updates_running_stats_eval_does_not() {
    let spec = spec16();
    let d = spec.feature_dim().unwrap();
    let mut bundle =
        ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, 3, 2).unwrap();
    let x = rand_batch(21, 4, (3, 16, 16));
    let snapshot = |b: &ModelBundle| -> Vec<f64> {
        b.buffers
            .entries()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    };
    let s0 = snapshot(&bundle);
    bundle.forward_eval(&x).unwrap();
    assert_eq!(s0, snapshot(&bundle), "eval must not touch statistics");
    bundle.forward_train(&x).unwrap();
    assert_ne!(s0, snapshot(&bundle), "training must update statistics");
}

#[test]
fn one_small_sgd_step_decreases_batch_loss() {
    let spec = spec16();
    let d = spec.feature_dim().unwrap();
    let mut bundle =
        ModelBundle::new(spec, ProjectorConfig::full(d), HeadKind::Linear, 3, 4).unwrap();
    let x = rand_batch(31, 6, (3, 16, 16));
    let y = vec![0, 1, 2, 0, 1, 2];
    let (l0, grads) = bundle.ce_loss_and_grads(&x, &y, false).unwrap();
    let mut opt = fewshot::nn::sgd::Sgd::new(&bundle.params, 0.0, 0.0);
    opt.step(&mut bundle.params, &grads, 1e-3);
    let (l1, _) = bundle.ce_loss_and_grads(&x, &y, false).unwrap();
    assert!(l1 < l0, "loss {l0} -> {l1}");
}

#[test]
fn feature_dim_follows_kind_and_input_shape() {
    let conv64 = BackboneSpec::new(BackboneKind::Conv64f, ImageShape::new(3, 32, 32));
    assert_eq!(conv64.feature_dim().unwrap(), 64 * 2 * 2);
    let tiny = BackboneSpec::new(BackboneKind::Conv32fTiny, ImageShape::new(3, 84, 84));
    // 84 -> 42 -> 21 -> 10 -> 5
    assert_eq!(tiny.feature_dim().unwrap(), 32 * 5 * 5);
    let too_small = BackboneSpec::new(BackboneKind::Conv64f, ImageShape::new(3, 8, 8));
    assert!(too_small.feature_dim().is_err());
}
