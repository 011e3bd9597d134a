//! Bilevel meta-learning: adapt on support, update on query.
//!
//! Inner steps are plain gradient descent on a masked parameter subset
//! (all parameters, head only, or body only). The outer gradient is
//! first-order by default (stop-gradient through the inner step); exact
//! second-order differentiation is available and implemented with the
//! reverse recurrence
//!
//! `a_i = a_{i+1} - alpha * H(w_i) (M a_{i+1})`
//!
//! where each Hessian-vector product is a dual-number forward+backward
//! pass, so it is exact to machine precision.

use ndarray::Array2;
use std::time::Instant;

use crate::data::{sample_episode, Episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    apply_bn_updates, ce_loss_and_grads, train_backward, train_forward, Architecture, ModelBundle,
};
use crate::nn::loss::{accuracy, cross_entropy};
use crate::nn::params::{ParamGroup, ParamStore};
use crate::nn::sgd::{cosine_lr, Sgd};
use crate::rng::stream;
use crate::scalar::Dual;

use super::{EpochRecord, ParadigmConfig, ParadigmKind, TrainingHistory};

/// Which parameter groups the inner loop updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSubset {
    /// Update theta, epsilon and omega (MAML-style).
    All,
    /// Update omega only (ANIL-style).
    HeadOnly,
    /// Update theta and epsilon only (BOIL-style).
    BodyOnly,
}

impl InnerSubset {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            InnerSubset::All => &[ParamGroup::Theta, ParamGroup::Epsilon, ParamGroup::Omega],
            InnerSubset::HeadOnly => &[ParamGroup::Omega],
            InnerSubset::BodyOnly => &[ParamGroup::Theta, ParamGroup::Epsilon],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "maml" => Ok(InnerSubset::All),
            "head_only" | "head-only" | "head" | "anil" => Ok(InnerSubset::HeadOnly),
            "body_only" | "body-only" | "body" | "boil" => Ok(InnerSubset::BodyOnly),
            other => Err(Error::InvalidConfig(vec![format!(
                "unknown inner subset '{other}'"
            )])),
        }
    }
}

/// A twice-differentiable objective over a flat parameter vector.
pub trait Objective {
    fn loss_grad(&self, w: &[f64]) -> (f64, Vec<f64>);

    /// Exact Hessian-vector product at `w` in direction `v`.
    fn hvp(&self, w: &[f64], v: &[f64]) -> Vec<f64>;

    fn loss(&self, w: &[f64]) -> f64 {
        self.loss_grad(w).0
    }
}

/// `L(w) = 1/2 (w - c)^T A (w - c)`; the surrogate used by the
/// convexity checks.
pub struct Quadratic {
    pub a: Array2<f64>,
    pub c: Vec<f64>,
}

impl Quadratic {
    /// `1/2 ||w||^2` in `dim` dimensions.
    pub fn half_norm_squared(dim: usize) -> Self {
        Self {
            a: Array2::eye(dim),
            c: vec![0.0; dim],
        }
    }
}

impl Objective for Quadratic {
    fn loss_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let n = w.len();
        let diff: Vec<f64> = w.iter().zip(self.c.iter()).map(|(w, c)| w - c).collect();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                grad[i] += self.a[[i, j]] * diff[j];
            }
        }
        let loss = 0.5 * diff.iter().zip(grad.iter()).map(|(d, g)| d * g).sum::<f64>();
        (loss, grad)
    }

    fn hvp(&self, _w: &[f64], v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                out[i] += self.a[[i, j]] * v[j];
            }
        }
        out
    }
}

/// Cross-entropy through the full training path on one fixed batch.
/// BN uses batch statistics; running statistics are never touched.
pub struct EpisodeObjective<'a> {
    arch: &'a Architecture,
    template: &'a ParamStore<f64>,
    x: ndarray::Array4<f64>,
    x_dual: ndarray::Array4<Dual>,
    y: Vec<usize>,
}

impl<'a> EpisodeObjective<'a> {
    pub fn new(
        arch: &'a Architecture,
        template: &'a ParamStore<f64>,
        x: ndarray::Array4<f64>,
        y: Vec<usize>,
    ) -> Result<Self> {
        arch.check_input(&x)?;
        let x_dual = x.mapv(Dual::constant);
        Ok(Self {
            arch,
            template,
            x,
            x_dual,
            y,
        })
    }
}

impl Objective for EpisodeObjective<'_> {
    fn loss_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let mut ps = self.template.clone();
        ps.assign_from_flat(w);
        let (loss, grads, _) =
            ce_loss_and_grads(self.arch, &ps, &self.x, &self.y).expect("validated at build");
        (loss, grads.flatten())
    }

    fn hvp(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let mut ps = self.template.clone();
        ps.assign_from_flat(w);
        let dual = ps.to_dual(v);
        let (_, grads, _) =
            ce_loss_and_grads(self.arch, &dual, &self.x_dual, &self.y).expect("validated at build");
        grads.split_flat().1
    }
}

/// Masked gradient-descent trajectory `[w_0, .., w_k]`. Coordinates
/// outside the mask keep their exact bits.
pub fn inner_trajectory(
    obj: &dyn Objective,
    w0: &[f64],
    alpha: f64,
    steps: usize,
    mask: &[f64],
) -> Vec<Vec<f64>> {
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(w0.to_vec());
    for _ in 0..steps {
        let w = traj.last().unwrap();
        let (_, g) = obj.loss_grad(w);
        let next: Vec<f64> = w
            .iter()
            .zip(g.iter())
            .zip(mask.iter())
            .map(|((w, g), m)| if *m != 0.0 { w - alpha * g } else { *w })
            .collect();
        traj.push(next);
    }
    traj
}

/// First-order meta-gradient: the query gradient evaluated at the
/// adapted parameters, with the inner trajectory treated as constant.
pub fn first_order_meta_grad(
    inner: &dyn Objective,
    outer: &dyn Objective,
    w0: &[f64],
    alpha: f64,
    steps: usize,
    mask: &[f64],
) -> (f64, Vec<f64>) {
    let traj = inner_trajectory(inner, w0, alpha, steps, mask);
    outer.loss_grad(traj.last().unwrap())
}

/// Exact meta-gradient: backpropagates through every inner step via
/// Hessian-vector products.
pub fn exact_meta_grad(
    inner: &dyn Objective,
    outer: &dyn Objective,
    w0: &[f64],
    alpha: f64,
    steps: usize,
    mask: &[f64],
) -> (f64, Vec<f64>) {
    let traj = inner_trajectory(inner, w0, alpha, steps, mask);
    let (loss, mut a) = outer.loss_grad(traj.last().unwrap());
    for i in (0..steps).rev() {
        let masked: Vec<f64> = a.iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let hv = inner.hvp(&traj[i], &masked);
        for (a, h) in a.iter_mut().zip(hv.iter()) {
            *a -= alpha * h;
        }
    }
    (loss, a)
}

/// Inner-loop adaptation of one episode's support set. Parameters
/// outside `cfg.inner_subset` are returned bitwise unchanged.
pub fn meta_inner_adapt(
    bundle: &ModelBundle,
    support_x: &ndarray::Array4<f64>,
    support_y: &[usize],
    cfg: &ParadigmConfig,
) -> Result<ParamStore<f64>> {
    assert!(matches!(cfg.kind, ParadigmKind::Meta), "meta config required");
    let obj = EpisodeObjective::new(
        &bundle.arch,
        &bundle.params,
        support_x.clone(),
        support_y.to_vec(),
    )?;
    let mask = bundle.params.layout.group_mask(cfg.inner_subset.groups());
    let traj = inner_trajectory(
        &obj,
        &bundle.params.flatten(),
        cfg.inner_lr,
        cfg.inner_steps,
        &mask,
    );
    let mut adapted = bundle.params.clone();
    adapted.assign_from_flat(traj.last().unwrap());
    Ok(adapted)
}

/// One outer update over a batch of episodes. Returns
/// `(mean query loss, mean query accuracy)`.
pub fn meta_outer_step(
    bundle: &mut ModelBundle,
    episodes: &[Episode],
    cfg: &ParadigmConfig,
    opt: &mut Sgd,
    lr: f64,
) -> Result<(f64, f64)> {
    assert!(matches!(cfg.kind, ParadigmKind::Meta), "meta config required");
    assert!(!episodes.is_empty(), "episode batch is empty");
    let mask = bundle.params.layout.group_mask(cfg.inner_subset.groups());
    let w0 = bundle.params.flatten();
    let mut grad_sum = vec![0.0; w0.len()];
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for ep in episodes {
        let (sx, sy) = ep.support_batch();
        let (qx, qy) = ep.query_batch();
        let inner = EpisodeObjective::new(&bundle.arch, &bundle.params, sx, sy)?;
        let traj = inner_trajectory(&inner, &w0, cfg.inner_lr, cfg.inner_steps, &mask);
        let wk = traj.last().unwrap();

        // query pass at the adapted parameters; this is the pass that
        // owns running-statistic updates
        let mut ps_k = bundle.params.clone();
        ps_k.assign_from_flat(wk);
        let (logits, tape, updates) = train_forward(&bundle.arch, &ps_k, &qx)?;
        let (qloss, dlogits) = cross_entropy(&logits, &qy);
        acc_sum += accuracy(&logits, &qy);
        loss_sum += qloss;
        apply_bn_updates(&mut bundle.buffers, &updates);
        let mut a = train_backward(&bundle.arch, &ps_k, &tape, &dlogits).flatten();

        if cfg.second_order {
            for i in (0..cfg.inner_steps).rev() {
                let masked: Vec<f64> = a.iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
                let hv = inner.hvp(&traj[i], &masked);
                for (a, h) in a.iter_mut().zip(hv.iter()) {
                    *a -= cfg.inner_lr * h;
                }
            }
        }
        for (s, g) in grad_sum.iter_mut().zip(a.iter()) {
            *s += g;
        }
    }
    let n = episodes.len() as f64;
    grad_sum.iter_mut().for_each(|g| *g /= n);
    let mut grads = bundle.params.zeros_like();
    grads.assign_from_flat(&grad_sum);
    opt.step(&mut bundle.params, &grads, lr);
    Ok((loss_sum / n, acc_sum / n))
}

/// Episodic meta-training over the source dataset.
pub fn train_meta(
    bundle: &mut ModelBundle,
    source: &LabeledDataset,
    cfg: &ParadigmConfig,
) -> Result<TrainingHistory> {
    assert!(matches!(cfg.kind, ParadigmKind::Meta), "meta config required");
    cfg.validate()?;
    if bundle.num_classes() != cfg.train_way {
        return Err(Error::ClassCountMismatch {
            expected: bundle.num_classes(),
            actual: cfg.train_way,
        });
    }
    let mut opt = Sgd::new(&bundle.params, cfg.momentum, cfg.weight_decay);
    let mut history = TrainingHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(cfg.outer_lr, epoch, cfg.epochs);
        let mut rng = stream(bundle.seed, &format!("meta-epoch-{epoch}"));
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut batches = 0usize;
        let mut pending: Vec<Episode> = Vec::with_capacity(cfg.task_batch);
        for i in 0..cfg.episodes_per_epoch {
            pending.push(sample_episode(
                source,
                cfg.train_way,
                cfg.train_shot,
                cfg.train_query,
                &mut rng,
            )?);
            if pending.len() == cfg.task_batch || i + 1 == cfg.episodes_per_epoch {
                let (l, a) = meta_outer_step(bundle, &pending, cfg, &mut opt, lr)?;
                loss_sum += l;
                acc_sum += a;
                batches += 1;
                pending.clear();
            }
        }
        history.records.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: Some(acc_sum / batches as f64),
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
    fn half_norm_inner_step_scales_by_one_minus_alpha() {
        let q = Quadratic::half_norm_squared(3);
        let w0 = vec![2.0, -1.0, 0.5];
        let alpha = 0.3;
        let traj = inner_trajectory(&q, &w0, alpha, 1, &[1.0, 1.0, 1.0]);
        for (w1, w) in traj[1].iter().zip(w0.iter()) {
            assert!((w1 - (1.0 - alpha) * w).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_coordinates_keep_exact_bits() {
        let q = Quadratic::half_norm_squared(2);
        let w0 = vec![0.1 + 0.2, -1.0 / 3.0]; // awkward floats on purpose
        let traj = inner_trajectory(&q, &w0, 0.05, 3, &[0.0, 1.0]);
        assert_eq!(traj.last().unwrap()[0].to_bits(), w0[0].to_bits());
        assert!(traj.last().unwrap()[1] != w0[1]);
    }

    #[test]
    fn exact_meta_grad_matches_analytic_on_quadratic() {
        // inner L_s = 1/2 w^T A w, outer L_q = 1/2 (w-c)^T B (w-c)
        let inner = Quadratic {
            a: array![[2.0, 0.5], [0.5, 1.0]],
            c: vec![0.0, 0.0],
        };
        let outer = Quadratic {
            a: array![[1.0, 0.0], [0.0, 3.0]],
            c: vec![1.0, -2.0],
        };
        let w0 = vec![0.7, 0.4];
        let alpha = 0.1;
        let (_, exact) = exact_meta_grad(&inner, &outer, &w0, alpha, 1, &[1.0, 1.0]);
        // analytic: (I - alpha A)^T B (w' - c)
        let w1 = [
            w0[0] - alpha * (2.0 * w0[0] + 0.5 * w0[1]),
            w0[1] - alpha * (0.5 * w0[0] + 1.0 * w0[1]),
        ];
        let g = [1.0 * (w1[0] - 1.0), 3.0 * (w1[1] + 2.0)];
        let expect = [
            (1.0 - alpha * 2.0) * g[0] + (-alpha * 0.5) * g[1],
            (-alpha * 0.5) * g[0] + (1.0 - alpha * 1.0) * g[1],
        ];
        assert!((exact[0] - expect[0]).abs() < 1e-12);
        assert!((exact[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn exact_meta_grad_matches_finite_differences_on_quadratic() {
        let inner = Quadratic {
            a: array![[1.5, -0.3], [-0.3, 0.8]],
            c: vec![0.2, -0.1],
        };
        let outer = Quadratic {
            a: array![[2.0, 0.4], [0.4, 1.0]],
            c: vec![-1.0, 0.5],
        };
        let w0 = vec![0.3, -0.6];
        let alpha = 0.07;
        let steps = 3;
        let mask = [1.0, 1.0];
        let (_, exact) = exact_meta_grad(&inner, &outer, &w0, alpha, steps, &mask);
        let meta_loss = |w: &[f64]| -> f64 {
            let traj = inner_trajectory(&inner, w, alpha, steps, &mask);
            outer.loss(traj.last().unwrap())
        };
        let h = 1e-6;
        for i in 0..2 {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (meta_loss(&wp) - meta_loss(&wm)) / (2.0 * h);
            assert!(
                (fd - exact[i]).abs() < 1e-6,
                "coordinate {i}: fd={fd} exact={}",
                exact[i]
            );
        }
    }
}
