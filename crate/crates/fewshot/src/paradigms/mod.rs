//! The three training/evaluation paradigms.
//!
//! All three train through the projector and evaluate without it:
//! non-episodic pretraining with per-task head tuning, bilevel
//! meta-learning (inner adapt on support, outer update on query), and
//! prototype-based metric learning.

pub mod meta;
pub mod metric;
pub mod nonepisodic;
pub mod tune;

use crate::error::{Error, Result};
use crate::model::HeadKind;

pub use meta::{
    exact_meta_grad, first_order_meta_grad, inner_trajectory, meta_inner_adapt, meta_outer_step,
    train_meta, EpisodeObjective, InnerSubset, Objective, Quadratic,
};
pub use metric::{
    compute_prototypes, compute_prototypes_rows, metric_episode_grads, proto_predict,
    train_metric, DistanceKind,
};
pub use nonepisodic::{pretrain_nonepisodic, train_path_accuracy};
pub use tune::{
    evaluate_episodes, evaluate_episodes_proto, test_tune_and_eval, tune_head_on_features,
    EvalProtocol, TuneConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParadigmKind {
    NonEpisodic,
    Meta,
    Metric,
}

impl ParadigmKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nonepisodic" | "non-episodic" | "non_episodic" => Ok(ParadigmKind::NonEpisodic),
            "meta" => Ok(ParadigmKind::Meta),
            "metric" => Ok(ParadigmKind::Metric),
            other => Err(Error::InvalidConfig(vec![format!(
                "unknown paradigm '{other}'"
            )])),
        }
    }
}

impl std::fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParadigmKind::NonEpisodic => "nonepisodic",
            ParadigmKind::Meta => "meta",
            ParadigmKind::Metric => "metric",
        };
        write!(f, "{s}")
    }
}

/// Hyperparameters for one training paradigm. Optimizer defaults follow
/// SGD with momentum 0.9, weight decay 5e-4 and cosine decay; the
/// per-paradigm base learning rates are desk-scale choices inside the
/// 0.001..0.1 band.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ParadigmConfig {
    pub kind: ParadigmKind,
    pub head: HeadKind,
    pub epochs: usize,
    pub outer_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Non-episodic batch size.
    pub batch_size: usize,
    /// Meta/metric episodes per epoch.
    pub episodes_per_epoch: usize,
    /// Training-episode geometry (meta/metric).
    pub train_way: usize,
    pub train_shot: usize,
    pub train_query: usize,
    /// Inner-loop step size alpha (meta).
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub inner_subset: InnerSubset,
    /// Episodes averaged per outer update (meta).
    pub task_batch: usize,
    /// Exact second-order meta-gradients instead of first-order.
    pub second_order: bool,
    /// Prototype distance (metric).
    pub distance: DistanceKind,
}

impl ParadigmConfig {
    pub fn non_episodic() -> Self {
        Self {
            kind: ParadigmKind::NonEpisodic,
            head: HeadKind::Linear,
            epochs: 5,
            outer_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            episodes_per_epoch: 0,
            train_way: 5,
            train_shot: 5,
            train_query: 15,
            inner_lr: 0.0,
            inner_steps: 1,
            inner_subset: InnerSubset::All,
            task_batch: 1,
            second_order: false,
            distance: DistanceKind::SqEuclidean,
        }
    }

    pub fn meta() -> Self {
        Self {
            kind: ParadigmKind::Meta,
            head: HeadKind::Linear,
            epochs: 5,
            outer_lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 0,
            episodes_per_epoch: 50,
            train_way: 5,
            train_shot: 1,
            train_query: 5,
            inner_lr: 0.01,
            inner_steps: 1,
            inner_subset: InnerSubset::All,
            task_batch: 1,
            second_order: false,
            distance: DistanceKind::SqEuclidean,
        }
    }

    pub fn metric() -> Self {
        Self {
            kind: ParadigmKind::Metric,
            head: HeadKind::Linear,
            epochs: 5,
            outer_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 0,
            episodes_per_epoch: 50,
            train_way: 5,
            train_shot: 5,
            train_query: 10,
            inner_lr: 0.0,
            inner_steps: 1,
            inner_subset: InnerSubset::All,
            task_batch: 1,
            second_order: false,
            distance: DistanceKind::SqEuclidean,
        }
    }

    pub fn for_kind(kind: ParadigmKind) -> Self {
        match kind {
            ParadigmKind::NonEpisodic => Self::non_episodic(),
            ParadigmKind::Meta => Self::meta(),
            ParadigmKind::Metric => Self::metric(),
        }
    }

    /// Enumerates every violated field before failing.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.outer_lr <= 0.0 {
            problems.push(format!("outer_lr must be > 0, got {}", self.outer_lr));
        }
        match self.kind {
            ParadigmKind::NonEpisodic => {
                if self.batch_size == 0 {
                    problems.push("batch_size must be >= 1 for the non-episodic paradigm".into());
                }
            }
            ParadigmKind::Meta => {
                if self.inner_lr <= 0.0 {
                    problems.push(format!("inner_lr must be > 0, got {}", self.inner_lr));
                }
                if self.inner_steps == 0 {
                    problems.push("inner_steps must be >= 1".into());
                }
                if self.episodes_per_epoch == 0 {
                    problems.push("episodes_per_epoch must be >= 1".into());
                }
                if self.task_batch == 0 {
                    problems.push("task_batch must be >= 1".into());
                }
            }
            ParadigmKind::Metric => {
                if self.episodes_per_epoch == 0 {
                    problems.push("episodes_per_epoch must be >= 1".into());
                }
            }
        }
        if matches!(self.kind, ParadigmKind::Meta | ParadigmKind::Metric)
            && (self.train_way < 2 || self.train_shot == 0 || self.train_query == 0)
        {
            problems.push(format!(
                "episode geometry way={} shot={} query={} is degenerate",
                self.train_way, self.train_shot, self.train_query
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Episodic paradigms report mean training-episode query accuracy.
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.accuracy)
    }
}
