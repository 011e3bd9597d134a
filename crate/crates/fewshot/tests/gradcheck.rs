//! Central finite differences vs analytic gradients, through the full
//! training path and through the bilevel meta objective.
//!
//! The finite-difference oracle below only touches the public loss
//! surface (perturb a parameter, re-evaluate the loss); it never calls
//! the backward pass it checks.

use fewshot::model::{
    BackboneKind, BackboneSpec, HeadKind, ImageShape, ModelBundle, ProjectorConfig,
};
use fewshot::nn::params::ParamGroup;
use fewshot::paradigms::{
    inner_trajectory, metric_episode_grads, DistanceKind, EpisodeObjective, InnerSubset,
    Objective,
};
use fewshot::rng::stream;
use ndarray::Array4;
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `|a - fd| <= atol + rtol * max(|a|, |fd|)`; the absolute floor only
/// matters for structurally-zero gradients (e.g. conv bias ahead of
/// BN, which cancels it exactly), where both sides are pure noise.
fn grads_match(a: f64, fd: f64) -> bool {
    (a - fd).abs() <= 1e-7 + REL_TOL * a.abs().max(fd.abs())
}

/// Deterministic spread of up to `k` flat indices per parameter tensor,
/// always covering the first and last entries.
fn probe_indices(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..k).map(|i| i * (len - 1) / (k - 1)).collect();
    out.dedup();
    out
}

fn tiny_bundle(projector: [bool; 4], head: HeadKind, seed: u64) -> ModelBundle {
    let spec = BackboneSpec::new(BackboneKind::Conv32fTiny, ImageShape::new(3, 16, 16));
    let d = spec.feature_dim().unwrap();
    let cfg = ProjectorConfig {
        input_fc: projector[0],
        bn: projector[1],
        relu: projector[2],
        output_fc: projector[3],
        feature_dim: d,
    };
    let mut bundle = ModelBundle::new(spec, cfg, head, 3, seed).unwrap();
    // a zero linear head would zero out all upstream gradients; give
    // every group generic values for the check
    let mut rng = stream(seed, "gradcheck-head");
    for (entry, tensor) in bundle
        .params
        .layout
        .clone()
        .entries
        .iter()
        .zip(bundle.params.tensors_mut())
    {
        if entry.group == ParamGroup::Omega {
            for v in tensor.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    bundle
}

fn toy_batch(seed: u64, n: usize) -> (Array4<f64>, Vec<usize>) {
    let mut rng = stream(seed, "gradcheck-batch");
    let x = Array4::from_shape_fn((n, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
    let y = (0..n).map(|i| i % 3).collect();
    (x, y)
}

/// Checks every parameter group of the bundle against central
/// differences on a 2-image, 3-class toy instance.
fn check_bundle_gradients(bundle: &ModelBundle, probes_per_tensor: usize) {
    let (x, y) = toy_batch(11, 2);
    let obj = EpisodeObjective::new(&bundle.arch, &bundle.params, x, y).unwrap();
    let w = bundle.params.flatten();
    let (_, analytic) = obj.loss_grad(&w);

    let mut offset = 0;
    let mut checked_groups = std::collections::HashSet::new();
    for entry in &bundle.params.layout.entries {
        let len: usize = entry.shape.iter().product();
        for &i in &probe_indices(len, probes_per_tensor) {
            let flat = offset + i;
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[flat] += FD_STEP;
            wm[flat] -= FD_STEP;
            let fd = (obj.loss(&wp) - obj.loss(&wm)) / (2.0 * FD_STEP);
            let a = analytic[flat];
            assert!(
                grads_match(a, fd),
                "{} [{}]: analytic {a:.10e} vs fd {fd:.10e} (rel {:.3e})",
                entry.name,
                i,
                rel_err(a, fd)
            );
        }
        checked_groups.insert(entry.group);
        offset += len;
    }
    assert_eq!(checked_groups.len(), 3, "theta, epsilon and omega all checked");
}

#[test]
fn full_mlp_linear_head_gradients_match_finite_differences() {
    let bundle = tiny_bundle([true; 4], HeadKind::Linear, 3);
    check_bundle_gradients(&bundle, 6);
}

#[test]
fn cosine_head_gradients_match_finite_differences() {
    let bundle = tiny_bundle([true, true, false, true], HeadKind::Cosine, 5);
    check_bundle_gradients(&bundle, 4);
}

#[test]
fn partial_projector_gradients_match_finite_differences() {
    // Table-4 style row (c): input FC + BN only
    let bundle = tiny_bundle([true, true, false, false], HeadKind::Linear, 7);
    check_bundle_gradients(&bundle, 4);
}

#[test]
fn metric_episode_gradients_match_finite_differences() {
    let bundle = tiny_bundle([true; 4], HeadKind::Linear, 13);
    let mut rng = stream(21, "metric-episode");
    let way = 3;
    let sx = Array4::from_shape_fn((way * 2, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
    let sy: Vec<usize> = (0..way * 2).map(|i| i / 2).collect();
    let qx = Array4::from_shape_fn((way, 3, 16, 16), |_| rng.gen_range(0.0..1.0));
    let qy: Vec<usize> = (0..way).collect();

    let (_, _, grads, _) = metric_episode_grads(
        &bundle.arch,
        &bundle.params,
        &sx,
        &sy,
        &qx,
        &qy,
        way,
        DistanceKind::SqEuclidean,
    )
    .unwrap();
    let analytic = grads.flatten();
    let w = bundle.params.flatten();
    let loss_at = |flat: &[f64]| -> f64 {
        let mut ps = bundle.params.clone();
        ps.assign_from_flat(flat);
        metric_episode_grads(
            &bundle.arch,
            &ps,
            &sx,
            &sy,
            &qx,
            &qy,
            way,
            DistanceKind::SqEuclidean,
        )
        .unwrap()
        .0
    };
    // the prototype loss has steeper curvature than plain CE; its
    // central difference converges at a smaller step
    let h = 1e-6;
    let mut offset = 0;
    for entry in &bundle.params.layout.entries {
        let len: usize = entry.shape.iter().product();
        for &i in &probe_indices(len, 3) {
            let flat = offset + i;
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[flat] += h;
            wm[flat] -= h;
            let fd = (loss_at(&wp) - loss_at(&wm)) / (2.0 * h);
            assert!(
                grads_match(analytic[flat], fd),
                "{} [{}]: analytic {:.6e} vs fd {:.6e}",
                entry.name,
                i,
                analytic[flat],
                fd
            );
        }
        offset += len;
    }
}

#[test]
fn exact_meta_gradient_matches_finite_differences_on_the_network() {
    let bundle = tiny_bundle([true, true, true, false], HeadKind::Linear, 17);
    let (sx, sy) = toy_batch(31, 3);
    let (qx, qy) = toy_batch(32, 3);
    let inner = EpisodeObjective::new(&bundle.arch, &bundle.params, sx, sy).unwrap();
    let outer = EpisodeObjective::new(&bundle.arch, &bundle.params, qx, qy).unwrap();
    let w0 = bundle.params.flatten();
    let alpha = 0.05;
    let steps = 2;

    for subset in [InnerSubset::All, InnerSubset::HeadOnly, InnerSubset::BodyOnly] {
        let mask = bundle.params.layout.group_mask(subset.groups());
        let (_, exact) =
            fewshot::paradigms::exact_meta_grad(&inner, &outer, &w0, alpha, steps, &mask);
        let meta_loss = |w: &[f64]| -> f64 {
            let traj = inner_trajectory(&inner, w, alpha, steps, &mask);
            outer.loss(traj.last().unwrap())
        };
        // inner trajectories amplify curvature and kink density; the
        // central difference only converges at a much smaller step
        let h = 1e-7;
        // probe a spread of coordinates across the flat vector
        for &flat in &probe_indices(w0.len(), 9) {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[flat] += h;
            wm[flat] -= h;
            let fd = (meta_loss(&wp) - meta_loss(&wm)) / (2.0 * h);
            assert!(
                (exact[flat] - fd).abs() <= 1e-7 + 2.0 * REL_TOL * exact[flat].abs().max(fd.abs()),
                "{subset:?} flat {flat}: exact {:.6e} vs fd {fd:.6e}",
                exact[flat]
            );
        }
    }
}

#[test]
fn second_order_term_changes_the_meta_gradient() {
    let bundle = tiny_bundle([true, true, true, false], HeadKind::Linear, 19);
    let (sx, sy) = toy_batch(41, 3);
    let (qx, qy) = toy_batch(42, 3);
    let inner = EpisodeObjective::new(&bundle.arch, &bundle.params, sx, sy).unwrap();
    let outer = EpisodeObjective::new(&bundle.arch, &bundle.params, qx, qy).unwrap();
    let w0 = bundle.params.flatten();
    let mask = vec![1.0; w0.len()];
    let (_, fo) = fewshot::paradigms::first_order_meta_grad(&inner, &outer, &w0, 0.05, 1, &mask);
    let (_, exact) = fewshot::paradigms::exact_meta_grad(&inner, &outer, &w0, 0.05, 1, &mask);
    let diff: f64 = fo
        .iter()
        .zip(exact.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-8, "second-order correction should be nonzero");
}
