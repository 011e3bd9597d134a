//! The removable MLP projector (epsilon).
//!
//! Composes up to four components in a fixed order — input FC, BN, ReLU,
//! output FC — skipping whichever are disabled. Both FC layers map the
//! feature dimension to itself. With every component off the projector
//! is the identity map.

use ndarray::Array2;
use rand::Rng;

use crate::nn::layers::{
    bn2_backward, bn2_eval, bn2_train, linear_backward, linear_forward, relu_backward,
    relu_forward, BnCache2,
};
use crate::nn::params::{BufferStore, BufId, Init, ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

use super::extractor::{accumulate, BnUpdate};

/// Which projector components are active, and the width they share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProjectorConfig {
    pub input_fc: bool,
    pub bn: bool,
    pub relu: bool,
    pub output_fc: bool,
    pub feature_dim: usize,
}

impl ProjectorConfig {
    pub fn none(feature_dim: usize) -> Self {
        Self {
            input_fc: false,
            bn: false,
            relu: false,
            output_fc: false,
            feature_dim,
        }
    }

    pub fn full(feature_dim: usize) -> Self {
        Self {
            input_fc: true,
            bn: true,
            relu: true,
            output_fc: true,
            feature_dim,
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.input_fc || self.bn || self.relu || self.output_fc)
    }

    pub fn flags(&self) -> [bool; 4] {
        [self.input_fc, self.bn, self.relu, self.output_fc]
    }

    /// Spelled-out list of enabled components, in pipeline order.
    pub fn component_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.input_fc {
            names.push("input-fc");
        }
        if self.bn {
            names.push("bn");
        }
        if self.relu {
            names.push("relu");
        }
        if self.output_fc {
            names.push("output-fc");
        }
        names
    }

    /// Parse a comma list of component names; `none` and `full` are
    /// accepted as shorthands.
    pub fn parse(spec: &str, feature_dim: usize) -> Result<Self, String> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("none") || spec.is_empty() {
            return Ok(Self::none(feature_dim));
        }
        if spec.eq_ignore_ascii_case("full") {
            return Ok(Self::full(feature_dim));
        }
        let mut cfg = Self::none(feature_dim);
        for part in spec.split(',') {
            match part.trim().to_ascii_lowercase().as_str() {
                "input-fc" | "input_fc" | "fc1" => cfg.input_fc = true,
                "bn" => cfg.bn = true,
                "relu" => cfg.relu = true,
                "output-fc" | "output_fc" | "fc2" => cfg.output_fc = true,
                other => return Err(format!("unknown projector component '{other}'")),
            }
        }
        Ok(cfg)
    }
}

impl std::fmt::Display for ProjectorConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_identity() {
            write!(f, "none")
        } else {
            write!(f, "{}", self.component_names().join(","))
        }
    }
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: BufId,
    var: BufId,
}

#[derive(Clone, Debug)]
pub struct ProjectorArch {
    pub cfg: ProjectorConfig,
    fc1: Option<LinearIds>,
    bn: Option<BnIds>,
    fc2: Option<LinearIds>,
}

pub struct ProjectorTape<S: Scalar> {
    fc1_in: Option<Array2<S>>,
    bn: Option<BnCache2<S>>,
    relu_mask: Option<ndarray::Array2<bool>>,
    fc2_in: Option<Array2<S>>,
}

impl ProjectorArch {
    pub fn build<R: Rng>(
        builder: &mut ParamBuilder,
        bufs: &mut BufferStore,
        cfg: ProjectorConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.feature_dim;
        let fc1 = cfg.input_fc.then(|| LinearIds {
            w: builder.add(
                "epsilon.fc1.weight",
                ParamGroup::Epsilon,
                &[d, d],
                Init::HeNormal { fan_in: d },
                rng,
            ),
            b: builder.add("epsilon.fc1.bias", ParamGroup::Epsilon, &[d], Init::Zeros, rng),
        });
        let bn = cfg.bn.then(|| BnIds {
            gamma: builder.add("epsilon.bn.gamma", ParamGroup::Epsilon, &[d], Init::Ones, rng),
            beta: builder.add("epsilon.bn.beta", ParamGroup::Epsilon, &[d], Init::Zeros, rng),
            mean: bufs.add("epsilon.bn.running_mean", d, 0.0),
            var: bufs.add("epsilon.bn.running_var", d, 1.0),
        });
        let fc2 = cfg.output_fc.then(|| LinearIds {
            w: builder.add(
                "epsilon.fc2.weight",
                ParamGroup::Epsilon,
                &[d, d],
                Init::HeNormal { fan_in: d },
                rng,
            ),
            b: builder.add("epsilon.fc2.bias", ParamGroup::Epsilon, &[d], Init::Zeros, rng),
        });
        ProjectorArch { cfg, fc1, bn, fc2 }
    }

    pub fn forward_train<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array2<S>,
        updates: &mut Vec<BnUpdate>,
    ) -> (Array2<S>, ProjectorTape<S>) {
        let mut tape = ProjectorTape {
            fc1_in: None,
            bn: None,
            relu_mask: None,
            fc2_in: None,
        };
        let mut cur = x.clone();
        if let Some(fc1) = &self.fc1 {
            tape.fc1_in = Some(cur.clone());
            cur = linear_forward(&cur, ps.a2(fc1.w), Some(ps.a1(fc1.b)));
        }
        if let Some(bn) = &self.bn {
            let (y, cache, stats) = bn2_train(&cur, ps.a1(bn.gamma), ps.a1(bn.beta));
            updates.push(BnUpdate {
                mean_buf: bn.mean,
                var_buf: bn.var,
                stats,
            });
            tape.bn = Some(cache);
            cur = y;
        }
        if self.cfg.relu {
            let (y, mask) = relu_forward(&cur);
            tape.relu_mask = Some(mask);
            cur = y;
        }
        if let Some(fc2) = &self.fc2 {
            tape.fc2_in = Some(cur.clone());
            cur = linear_forward(&cur, ps.a2(fc2.w), Some(ps.a1(fc2.b)));
        }
        (cur, tape)
    }

    /// Eval-mode forward. Only used by the standalone projector; the
    /// model's evaluation path bypasses the projector entirely.
    pub fn forward_eval<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        bufs: &BufferStore,
        x: &Array2<S>,
    ) -> Array2<S> {
        let mut cur = x.clone();
        if let Some(fc1) = &self.fc1 {
            cur = linear_forward(&cur, ps.a2(fc1.w), Some(ps.a1(fc1.b)));
        }
        if let Some(bn) = &self.bn {
            cur = bn2_eval(
                &cur,
                ps.a1(bn.gamma),
                ps.a1(bn.beta),
                bufs.get(bn.mean),
                bufs.get(bn.var),
            );
        }
        if self.cfg.relu {
            cur = relu_forward(&cur).0;
        }
        if let Some(fc2) = &self.fc2 {
            cur = linear_forward(&cur, ps.a2(fc2.w), Some(ps.a1(fc2.b)));
        }
        cur
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        tape: &ProjectorTape<S>,
        gy: &Array2<S>,
        grads: &mut ParamStore<S>,
    ) -> Array2<S> {
        let mut g = gy.clone();
        if let Some(fc2) = &self.fc2 {
            let x = tape.fc2_in.as_ref().expect("fc2 input cached");
            let (gx, dw, db) = linear_backward(x, ps.a2(fc2.w), &g);
            accumulate(grads.get_mut(fc2.w), dw.view().into_dyn());
            accumulate(grads.get_mut(fc2.b), db.view().into_dyn());
            g = gx;
        }
        if let Some(mask) = &tape.relu_mask {
            g = relu_backward(mask, &g);
        }
        if let Some(bn) = &self.bn {
            let cache = tape.bn.as_ref().expect("bn cache present");
            let (gx, dgamma, dbeta) = bn2_backward(cache, ps.a1(bn.gamma), &g);
            accumulate(grads.get_mut(bn.gamma), dgamma.view().into_dyn());
            accumulate(grads.get_mut(bn.beta), dbeta.view().into_dyn());
            g = gx;
        }
        if let Some(fc1) = &self.fc1 {
            let x = tape.fc1_in.as_ref().expect("fc1 input cached");
            let (gx, dw, db) = linear_backward(x, ps.a2(fc1.w), &g);
            accumulate(grads.get_mut(fc1.w), dw.view().into_dyn());
            accumulate(grads.get_mut(fc1.b), db.view().into_dyn());
            g = gx;
        }
        g
    }
}

/// A projector with its own parameters, built directly from a config.
/// The training-time map from d-vectors to d-vectors.
pub struct Projector {
    pub arch: ProjectorArch,
    pub params: ParamStore<f64>,
    pub buffers: BufferStore,
}

impl Projector {
    pub fn build(cfg: ProjectorConfig, seed: u64) -> Self {
        let mut builder = ParamBuilder::new();
        let mut bufs = BufferStore::default();
        let mut rng = crate::rng::stream(seed, "init-epsilon");
        let arch = ProjectorArch::build(&mut builder, &mut bufs, cfg, &mut rng);
        Projector {
            arch,
            params: builder.finish(),
            buffers: bufs,
        }
    }

    /// Training-mode map (batch statistics; running statistics updated).
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let mut updates = Vec::new();
        let (y, _) = self.arch.forward_train(&self.params, x, &mut updates);
        super::extractor::apply_bn_updates(&mut self.buffers, &updates);
        y
    }

    /// Evaluation-mode map (running statistics, no mutation).
    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.arch.forward_eval(&self.params, &self.buffers, x)
    }
}
