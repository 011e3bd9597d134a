//! Test-tuning: fit a fresh classifier on an episode's support features
//! with the extractor frozen, then score the query set.
//!
//! Features come from the evaluation path, so the projector never
//! participates here.

use ndarray::{Array1, Array2, Array4};
use rayon::prelude::*;

use crate::data::{sample_episode_plan, Episode, EpisodePlan, LabeledDataset};
use crate::error::Result;
use crate::model::{HeadKind, ModelBundle};
use crate::nn::layers::{cosine_backward, cosine_forward, linear_backward, linear_forward};
use crate::nn::loss::{accuracy, cross_entropy};
use crate::rng::stream;

use super::metric::{compute_prototypes_rows, proto_predict, DistanceKind};

/// Fresh-head fitting recipe: full-batch gradient descent on the
/// support set, new head per task.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct TuneConfig {
    pub head: HeadKind,
    pub tune_lr: f64,
    pub tune_steps: usize,
    pub weight_decay: f64,
    /// Always true: warm-starting a head across tasks is unsupported.
    pub reinit: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Linear,
            tune_lr: 0.01,
            tune_steps: 100,
            weight_decay: 1e-3,
            reinit: true,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.tune_steps == 0 {
            problems.push("tune_steps must be >= 1".to_string());
        }
        if self.tune_lr <= 0.0 {
            problems.push(format!("tune_lr must be > 0, got {}", self.tune_lr));
        }
        if !self.reinit {
            problems.push("reinit=false is unsupported; a new head is fit per task".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::error::Error::InvalidConfig(problems))
        }
    }
}

/// Episode evaluation protocol.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalProtocol {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 15,
            episodes: 600,
        }
    }
}

/// A classifier fit to one episode's support features.
pub struct TunedHead {
    kind: HeadKind,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl TunedHead {
    pub fn logits(&self, feats: &Array2<f64>) -> Array2<f64> {
        match self.kind {
            HeadKind::Linear => linear_forward(feats, self.w.view(), Some(self.b.view())),
            HeadKind::Cosine => {
                cosine_forward(feats, self.w.view(), crate::model::COSINE_TEMPERATURE).0
            }
        }
    }

    pub fn accuracy(&self, feats: &Array2<f64>, labels: &[usize]) -> f64 {
        accuracy(&self.logits(feats), labels)
    }
}

/// Full-batch gradient descent on cross-entropy over the support set.
/// Linear heads start from zero, so the fit is deterministic; cosine
/// heads draw a seeded random init.
pub fn tune_head_on_features(
    support: &Array2<f64>,
    labels: &[usize],
    way: usize,
    cfg: &TuneConfig,
    seed: u64,
) -> TunedHead {
    let d = support.dim().1;
    let mut w;
    let mut bias = Array1::zeros(way);
    match cfg.head {
        HeadKind::Linear => {
            w = Array2::zeros((d, way));
        }
        HeadKind::Cosine => {
            let mut rng = stream(seed, "tune-head-init");
            let std = (2.0 / d as f64).sqrt();
            let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
            w = Array2::from_shape_fn((d, way), |_| {
                rand_distr::Distribution::sample(&normal, &mut rng)
            });
        }
    }
    for _ in 0..cfg.tune_steps {
        match cfg.head {
            HeadKind::Linear => {
                let logits = linear_forward(support, w.view(), Some(bias.view()));
                let (_, dlogits) = cross_entropy(&logits, labels);
                let (_, dw, db) = linear_backward(support, w.view(), &dlogits);
                ndarray::Zip::from(&mut w).and(&dw).for_each(|w, &g| {
                    *w -= cfg.tune_lr * (g + cfg.weight_decay * *w);
                });
                ndarray::Zip::from(&mut bias)
                    .and(&db)
                    .for_each(|b, &g| *b -= cfg.tune_lr * g);
            }
            HeadKind::Cosine => {
                let (logits, cache) =
                    cosine_forward(support, w.view(), crate::model::COSINE_TEMPERATURE);
                let (_, dlogits) = cross_entropy(&logits, labels);
                let (_, dw) = cosine_backward(&cache, &dlogits, crate::model::COSINE_TEMPERATURE);
                ndarray::Zip::from(&mut w).and(&dw).for_each(|w, &g| {
                    *w -= cfg.tune_lr * (g + cfg.weight_decay * *w);
                });
            }
        }
    }
    TunedHead {
        kind: cfg.head,
        w,
        b: bias,
    }
}

/// Tune a fresh head on the episode's support set (raw extractor
/// features) and return query accuracy. Argmax ties break toward the
/// lowest class index.
pub fn test_tune_and_eval(
    bundle: &ModelBundle,
    episode: &Episode,
    tune: &TuneConfig,
) -> Result<f64> {
    tune.validate()?;
    let (sx, sy) = episode.support_batch();
    let (qx, qy) = episode.query_batch();
    let sf = bundle.forward_eval(&sx)?;
    let qf = bundle.forward_eval(&qx)?;
    let head = tune_head_on_features(&sf, &sy, episode.way, tune, bundle.seed);
    Ok(head.accuracy(&qf, &qy))
}

/// Evaluation-path features for every item, cached once per dataset.
pub struct FeatureCache {
    /// Rows in `dataset.all_indices()` order.
    pub features: Array2<f64>,
    row_of: Vec<Vec<usize>>,
}

impl FeatureCache {
    pub fn row(&self, class: usize, item: usize) -> usize {
        self.row_of[class][item]
    }

    pub fn gather(&self, plan_rows: &[usize]) -> Array2<f64> {
        let d = self.features.dim().1;
        let mut out = Array2::zeros((plan_rows.len(), d));
        for (i, &r) in plan_rows.iter().enumerate() {
            out.row_mut(i).assign(&self.features.row(r));
        }
        out
    }
}

/// Run the whole dataset through the evaluation path once.
pub fn feature_cache(
    bundle: &ModelBundle,
    dataset: &LabeledDataset,
    batch: usize,
) -> Result<FeatureCache> {
    let indices = dataset.all_indices();
    let d = bundle.feature_dim();
    let mut features = Array2::zeros((indices.len(), d));
    let mut start = 0;
    for chunk in indices.chunks(batch.max(1)) {
        let x: Array4<f64> = dataset.stack(chunk);
        let f = bundle.forward_eval(&x)?;
        features
            .slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&f);
        start += chunk.len();
    }
    let mut row_of: Vec<Vec<usize>> = (0..dataset.num_classes()).map(|_| Vec::new()).collect();
    for (row, &(c, _)) in indices.iter().enumerate() {
        row_of[c].push(row);
    }
    Ok(FeatureCache { features, row_of })
}

fn plan_support_rows(cache: &FeatureCache, plan: &EpisodePlan) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::with_capacity(plan.way * plan.shot);
    let mut labels = Vec::with_capacity(plan.way * plan.shot);
    for (local, &class) in plan.classes.iter().enumerate() {
        for &item in &plan.support[local] {
            rows.push(cache.row(class, item));
            labels.push(local);
        }
    }
    (rows, labels)
}

fn plan_query_rows(cache: &FeatureCache, plan: &EpisodePlan) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::with_capacity(plan.way * plan.query_per_class);
    let mut labels = Vec::with_capacity(plan.way * plan.query_per_class);
    for (local, &class) in plan.classes.iter().enumerate() {
        for &item in &plan.query[local] {
            rows.push(cache.row(class, item));
            labels.push(local);
        }
    }
    (rows, labels)
}

fn eval_plan_tuned(
    cache: &FeatureCache,
    plan: &EpisodePlan,
    tune: &TuneConfig,
    seed: u64,
) -> f64 {
    let (srows, sy) = plan_support_rows(cache, plan);
    let (qrows, qy) = plan_query_rows(cache, plan);
    let sf = cache.gather(&srows);
    let qf = cache.gather(&qrows);
    let head = tune_head_on_features(&sf, &sy, plan.way, tune, seed);
    head.accuracy(&qf, &qy)
}

fn sample_plans(
    dataset: &LabeledDataset,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<Vec<EpisodePlan>> {
    let mut rng = stream(seed, &format!("eval-episodes-{}", dataset.name()));
    (0..protocol.episodes)
        .map(|_| {
            sample_episode_plan(
                dataset,
                protocol.way,
                protocol.shot,
                protocol.query,
                &mut rng,
            )
        })
        .collect()
}

/// Per-episode tuned-head accuracies over `protocol.episodes` episodes.
/// Episodes are pre-sampled and evaluated in parallel; results are
/// merged in episode order.
pub fn evaluate_episodes(
    bundle: &ModelBundle,
    dataset: &LabeledDataset,
    protocol: &EvalProtocol,
    tune: &TuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    tune.validate()?;
    let cache = feature_cache(bundle, dataset, 64)?;
    let plans = sample_plans(dataset, protocol, seed)?;
    Ok(plans
        .par_iter()
        .map(|plan| eval_plan_tuned(&cache, plan, tune, seed))
        .collect())
}

/// Prototype-classifier episode accuracies on raw extractor features
/// (the metric paradigm's evaluation form; no tuning).
pub fn evaluate_episodes_proto(
    bundle: &ModelBundle,
    dataset: &LabeledDataset,
    protocol: &EvalProtocol,
    distance: DistanceKind,
    seed: u64,
) -> Result<Vec<f64>> {
    let cache = feature_cache(bundle, dataset, 64)?;
    let plans = sample_plans(dataset, protocol, seed)?;
    plans
        .par_iter()
        .map(|plan| {
            let (srows, sy) = plan_support_rows(&cache, plan);
            let (qrows, qy) = plan_query_rows(&cache, plan);
            let sf = cache.gather(&srows);
            let qf = cache.gather(&qrows);
            let protos = compute_prototypes_rows(&sf, &sy, plan.way)?;
            let probs = proto_predict(&qf, &protos, distance)?;
            Ok(accuracy(&probs, &qy))
        })
        .collect()
}

/// Mean query accuracy across episodes sampled on the fly from owned
/// [`Episode`] values; used by tests that hand-build episodes.
pub fn episode_support_accuracy(
    bundle: &ModelBundle,
    episode: &Episode,
    tune: &TuneConfig,
) -> Result<f64> {
    let (sx, sy) = episode.support_batch();
    let sf = bundle.forward_eval(&sx)?;
    let head = tune_head_on_features(&sf, &sy, episode.way, tune, bundle.seed);
    Ok(head.accuracy(&sf, &sy))
}
