//! Classifier heads (omega): affine logits or scaled cosine similarity.

use ndarray::Array2;
use rand::Rng;

use crate::nn::layers::{
    cosine_backward, cosine_forward, linear_backward, linear_forward, CosineCache,
};
use crate::nn::params::{Init, ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

use super::extractor::accumulate;

/// Unscaled cosine logits live in [-1, 1], which starves cross-entropy
/// gradients; this fixed scale restores a useful dynamic range.
pub const COSINE_TEMPERATURE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Linear => write!(f, "linear"),
            HeadKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl HeadKind {
    pub fn parse_cli(s: &str) -> crate::error::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "cosine" => Ok(HeadKind::Cosine),
            other => Err(crate::error::Error::InvalidConfig(vec![format!(
                "unknown head kind '{other}'"
            )])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadArch {
    pub kind: HeadKind,
    pub num_classes: usize,
    w: ParamId,
    b: Option<ParamId>,
}

pub enum HeadTape<S: Scalar> {
    Linear { x: Array2<S> },
    Cosine { cache: CosineCache<S> },
}

impl HeadArch {
    /// Linear heads start at zero (uniform softmax, loss ln C); cosine
    /// heads start He-random since gradients blow up at the zero vector
    /// under normalization.
    pub fn build<R: Rng>(
        builder: &mut ParamBuilder,
        kind: HeadKind,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            HeadKind::Linear => {
                let w = builder.add(
                    "omega.head.weight",
                    ParamGroup::Omega,
                    &[feature_dim, num_classes],
                    Init::Zeros,
                    rng,
                );
                let b = builder.add(
                    "omega.head.bias",
                    ParamGroup::Omega,
                    &[num_classes],
                    Init::Zeros,
                    rng,
                );
                HeadArch {
                    kind,
                    num_classes,
                    w,
                    b: Some(b),
                }
            }
            HeadKind::Cosine => {
                let w = builder.add(
                    "omega.head.weight",
                    ParamGroup::Omega,
                    &[feature_dim, num_classes],
                    Init::HeNormal { fan_in: feature_dim },
                    rng,
                );
                HeadArch {
                    kind,
                    num_classes,
                    w,
                    b: None,
                }
            }
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array2<S>,
    ) -> (Array2<S>, HeadTape<S>) {
        match self.kind {
            HeadKind::Linear => {
                let y = linear_forward(
                    x,
                    ps.a2(self.w),
                    self.b.map(|b| ps.a1(b)),
                );
                (y, HeadTape::Linear { x: x.clone() })
            }
            HeadKind::Cosine => {
                let (y, cache) = cosine_forward(x, ps.a2(self.w), COSINE_TEMPERATURE);
                (y, HeadTape::Cosine { cache })
            }
        }
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        tape: &HeadTape<S>,
        gy: &Array2<S>,
        grads: &mut ParamStore<S>,
    ) -> Array2<S> {
        match (self.kind, tape) {
            (HeadKind::Linear, HeadTape::Linear { x }) => {
                let (gx, dw, db) = linear_backward(x, ps.a2(self.w), gy);
                accumulate(grads.get_mut(self.w), dw.view().into_dyn());
                if let Some(b) = self.b {
                    accumulate(grads.get_mut(b), db.view().into_dyn());
                }
                gx
            }
            (HeadKind::Cosine, HeadTape::Cosine { cache }) => {
                let (gx, dw) = cosine_backward(cache, gy, COSINE_TEMPERATURE);
                accumulate(grads.get_mut(self.w), dw.view().into_dyn());
                gx
            }
            _ => unreachable!("head tape kind matches head kind"),
        }
    }
}
