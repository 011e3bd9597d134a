//! Prototype-based metric learning.
//!
//! Training: support and query images pass through the projector; class
//! prototypes are the mean projected support features; query
//! probabilities are a softmax over negative distances to prototypes,
//! trained with cross-entropy. Evaluation drops the projector and
//! classifies raw extractor features the same way.

use ndarray::{Array2, Axis};
use std::time::Instant;

use crate::data::{sample_episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{apply_bn_updates, train_backward, train_forward, ModelBundle};
use crate::nn::loss::{accuracy, cross_entropy, softmax_rows};
use crate::nn::sgd::{cosine_lr, Sgd};
use crate::rng::stream;

use super::{EpochRecord, ParadigmConfig, ParadigmKind, TrainingHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    SqEuclidean,
    Cosine,
}

impl DistanceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sq_euclidean" | "sq-euclidean" | "euclidean" => Ok(DistanceKind::SqEuclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::InvalidConfig(vec![format!(
                "unknown distance '{other}'"
            )])),
        }
    }
}

/// Mean of each class's support features, in local label order.
/// Input: one `(K_i, d)` matrix per class.
pub fn compute_prototypes(per_class: &[Array2<f64>]) -> Result<Array2<f64>> {
    if per_class.is_empty() {
        return Err(Error::EmptyInput("prototype class list"));
    }
    let d = per_class[0].dim().1;
    let mut protos = Array2::zeros((per_class.len(), d));
    for (i, feats) in per_class.iter().enumerate() {
        if feats.dim().0 == 0 {
            return Err(Error::TooFewItems {
                class: format!("local-{i}"),
                available: 0,
                needed: 1,
            });
        }
        if feats.dim().1 != d {
            return Err(Error::DimMismatch {
                left: feats.dim().1,
                right: d,
            });
        }
        protos.row_mut(i).assign(&feats.mean_axis(Axis(0)).unwrap());
    }
    Ok(protos)
}

/// Prototypes from a flat `(n, d)` feature matrix with local labels.
pub fn compute_prototypes_rows(
    features: &Array2<f64>,
    labels: &[usize],
    way: usize,
) -> Result<Array2<f64>> {
    let d = features.dim().1;
    let mut protos = Array2::zeros((way, d));
    let mut counts = vec![0usize; way];
    for (row, &label) in features.rows().into_iter().zip(labels.iter()) {
        ndarray::Zip::from(protos.row_mut(label))
            .and(&row)
            .for_each(|p, &v| *p += v);
        counts[label] += 1;
    }
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::TooFewItems {
                class: format!("local-{i}"),
                available: 0,
                needed: 1,
            });
        }
        protos.row_mut(i).mapv_inplace(|v| v / count as f64);
    }
    Ok(protos)
}

fn distances(
    query: &Array2<f64>,
    protos: &Array2<f64>,
    distance: DistanceKind,
) -> Array2<f64> {
    let (q, _) = query.dim();
    let c = protos.dim().0;
    let mut out = Array2::zeros((q, c));
    for i in 0..q {
        for j in 0..c {
            let qi = query.row(i);
            let pj = protos.row(j);
            out[[i, j]] = match distance {
                DistanceKind::SqEuclidean => qi
                    .iter()
                    .zip(pj.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
                DistanceKind::Cosine => {
                    let dot: f64 = qi.iter().zip(pj.iter()).map(|(a, b)| a * b).sum();
                    let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let np = pj.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    1.0 - dot / (nq * np)
                }
            };
        }
    }
    out
}

/// `P(y=j | x_i) = exp(-dist_ij) / sum_k exp(-dist_ik)`; rows sum to 1.
pub fn proto_predict(
    query: &Array2<f64>,
    protos: &Array2<f64>,
    distance: DistanceKind,
) -> Result<Array2<f64>> {
    if query.dim().1 != protos.dim().1 {
        return Err(Error::DimMismatch {
            left: query.dim().1,
            right: protos.dim().1,
        });
    }
    let neg = distances(query, protos, distance).mapv(|d| -d);
    Ok(softmax_rows(&neg))
}

/// One metric-paradigm episode: forward support+query through the
/// training path, prototype loss on the queries, full backward.
/// Returns `(loss, query accuracy, grads, bn updates)`.
pub fn metric_episode_grads(
    arch: &crate::model::Architecture,
    params: &crate::nn::params::ParamStore<f64>,
    sx: &ndarray::Array4<f64>,
    sy: &[usize],
    qx: &ndarray::Array4<f64>,
    qy: &[usize],
    way: usize,
    distance: DistanceKind,
) -> Result<(f64, f64, crate::nn::params::ParamStore<f64>, Vec<crate::model::BnUpdate>)> {
    let n_s = sx.dim().0;
    let x = ndarray::concatenate(
        Axis(0),
        &[sx.view(), qx.view()],
    )
    .expect("support/query shapes agree");
    let (z, tape, updates) = train_forward(arch, params, &x)?;
    let zs = z.slice(ndarray::s![..n_s, ..]).to_owned();
    let zq = z.slice(ndarray::s![n_s.., ..]).to_owned();
    let protos = compute_prototypes_rows(&zs, sy, way)?;
    let dist = distances(&zq, &protos, distance);
    let logits = dist.mapv(|d| -d);
    let (loss, dlogits) = cross_entropy(&logits, qy);
    let acc = accuracy(&logits, qy);
    // d loss / d dist = -dlogits
    let ddist = dlogits.mapv(|g| -g);
    let (dzq, dprotos) = distance_backward(&zq, &protos, &dist, &ddist, distance);
    // prototypes are per-class means of support rows
    let mut dzs = Array2::zeros(zs.raw_dim());
    let mut counts = vec![0usize; way];
    for &label in sy {
        counts[label] += 1;
    }
    for (row, &label) in sy.iter().enumerate() {
        let scale = 1.0 / counts[label] as f64;
        ndarray::Zip::from(dzs.row_mut(row))
            .and(dprotos.row(label))
            .for_each(|d, &g| *d = g * scale);
    }
    let dz = ndarray::concatenate(Axis(0), &[dzs.view(), dzq.view()]).unwrap();
    let grads = train_backward(arch, params, &tape, &dz);
    Ok((loss, acc, grads, updates))
}

/// Gradients of `sum_ij ddist_ij * dist_ij` w.r.t. queries and
/// prototypes.
fn distance_backward(
    query: &Array2<f64>,
    protos: &Array2<f64>,
    dist: &Array2<f64>,
    ddist: &Array2<f64>,
    distance: DistanceKind,
) -> (Array2<f64>, Array2<f64>) {
    let (q, d) = query.dim();
    let c = protos.dim().0;
    let mut dq = Array2::zeros((q, d));
    let mut dp = Array2::zeros((c, d));
    match distance {
        DistanceKind::SqEuclidean => {
            for i in 0..q {
                for j in 0..c {
                    let g = ddist[[i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = query[[i, k]] - protos[[j, k]];
                        dq[[i, k]] += g * 2.0 * diff;
                        dp[[j, k]] -= g * 2.0 * diff;
                    }
                }
            }
        }
        DistanceKind::Cosine => {
            for i in 0..q {
                let qi = query.row(i);
                let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for j in 0..c {
                    let g = ddist[[i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    let pj = protos.row(j);
                    let np = pj.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let cos = 1.0 - dist[[i, j]];
                    for k in 0..d {
                        // d(1 - cos)/dq = -(p/(nq np) - cos q / nq^2)
                        dq[[i, k]] -= g * (pj[k] / (nq * np) - cos * qi[k] / (nq * nq));
                        dp[[j, k]] -= g * (qi[k] / (nq * np) - cos * pj[k] / (np * np));
                    }
                }
            }
        }
    }
    (dq, dp)
}

/// Episodic prototype training over the source dataset.
pub fn train_metric(
    bundle: &mut ModelBundle,
    source: &LabeledDataset,
    cfg: &ParadigmConfig,
) -> Result<TrainingHistory> {
    assert!(matches!(cfg.kind, ParadigmKind::Metric), "metric config required");
    cfg.validate()?;
    let mut opt = Sgd::new(&bundle.params, cfg.momentum, cfg.weight_decay);
    let mut history = TrainingHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(cfg.outer_lr, epoch, cfg.epochs);
        let mut rng = stream(bundle.seed, &format!("metric-epoch-{epoch}"));
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(source, cfg.train_way, cfg.train_shot, cfg.train_query, &mut rng)?;
            let (sx, sy) = ep.support_batch();
            let (qx, qy) = ep.query_batch();
            let (loss, acc, grads, updates) = metric_episode_grads(
                &bundle.arch,
                &bundle.params,
                &sx,
                &sy,
                &qx,
                &qy,
                cfg.train_way,
                cfg.distance,
            )?;
            apply_bn_updates(&mut bundle.buffers, &updates);
            opt.step(&mut bundle.params, &grads, lr);
            loss_sum += loss;
            acc_sum += acc;
        }
        let n = cfg.episodes_per_epoch as f64;
        history.records.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            accuracy: Some(acc_sum / n),
            lr,
            wall_s: start.elapsed().as_secs_f64(),
        });
        bundle.epoch += 1;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prototype_is_the_arithmetic_mean() {
        let per_class = vec![array![[1.0, 1.0], [3.0, 3.0]]];
        let protos = compute_prototypes(&per_class).unwrap();
        assert_eq!(protos, array![[2.0, 2.0]]);
    }

    #[test]
    fn prototype_is_permutation_invariant() {
        let a = vec![array![[1.0, 0.0], [5.0, 2.0], [0.0, 4.0]]];
        let b = vec![array![[0.0, 4.0], [1.0, 0.0], [5.0, 2.0]]];
        assert_eq!(
            compute_prototypes(&a).unwrap(),
            compute_prototypes(&b).unwrap()
        );
    }

    #[test]
    fn empty_class_is_an_error() {
        let per_class = vec![Array2::<f64>::zeros((0, 3))];
        assert!(compute_prototypes(&per_class).is_err());
    }

    #[test]
    fn equidistant_query_gets_uniform_row() {
        let protos = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let query = array![[0.0, 0.0]];
        let p = proto_predict(&query, &protos, DistanceKind::SqEuclidean).unwrap();
        for v in p.row(0) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_prototype_closed_form() {
        // distances 0 and 2 -> (e^0, e^-2) normalized
        let protos = array![[0.0], [2.0_f64.sqrt()]];
        let query = array![[0.0]];
        let p = proto_predict(&query, &protos, DistanceKind::SqEuclidean).unwrap();
        let z = 1.0 + (-2.0_f64).exp();
        assert!((p[[0, 0]] - 1.0 / z).abs() < 1e-12);
        assert!((p[[0, 1]] - (-2.0_f64).exp() / z).abs() < 1e-12);
        assert!((p[[0, 0]] - 0.8808).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn rows_sum_to_one() {
        let protos = array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]];
        let query = array![[0.5, 0.5], [-2.0, 1.0]];
        for kind in [DistanceKind::SqEuclidean, DistanceKind::Cosine] {
            let p = proto_predict(&query, &protos, kind).unwrap();
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let protos = array![[1.0, 2.0, 3.0]];
        let query = array![[0.5, 0.5]];
        assert!(proto_predict(&query, &protos, DistanceKind::SqEuclidean).is_err());
    }

    #[test]
    fn cosine_argmax_is_scale_invariant() {
        let protos = array![[1.0, 0.2], [-0.5, 1.0], [0.3, -0.7]];
        let query = array![[0.9, 0.1], [-0.2, 0.8]];
        let base = proto_predict(&query, &protos, DistanceKind::Cosine).unwrap();
        let scaled = proto_predict(
            &query.mapv(|v| v * 37.5),
            &protos.mapv(|v| v * 37.5),
            DistanceKind::Cosine,
        )
        .unwrap();
        for (a, b) in base.rows().into_iter().zip(scaled.rows()) {
            let am = crate::nn::loss::argmax_lowest(a.iter().copied());
            let bm = crate::nn::loss::argmax_lowest(b.iter().copied());
            assert_eq!(am, bm);
        }
    }
}
