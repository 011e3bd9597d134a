//! Model assembly: feature extractor, projector, classifier head.
//!
//! The training path runs `head(projector(extractor(x)))`; the
//! evaluation path returns raw extractor features, with the projector
//! and head bypassed entirely.

pub mod extractor;
pub mod head;
pub mod projector;

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::nn::params::{BufferStore, ParamBuilder, ParamStore};
use crate::scalar::Scalar;

pub use extractor::{apply_bn_updates, BnUpdate, ExtractorArch, ExtractorTape};
pub use head::{HeadArch, HeadKind, HeadTape, COSINE_TEMPERATURE};
pub use projector::{Projector, ProjectorArch, ProjectorConfig, ProjectorTape};

pub const CONV_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Conv32fTiny,
    Conv64f,
    Resnet12,
}

impl BackboneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv32f-tiny" | "conv32f_tiny" | "conv32f" => Ok(BackboneKind::Conv32fTiny),
            "conv64f" => Ok(BackboneKind::Conv64f),
            "resnet12" => Ok(BackboneKind::Resnet12),
            other => Err(Error::UnsupportedBackbone(other.to_string())),
        }
    }

    fn filters(self) -> usize {
        match self {
            BackboneKind::Conv32fTiny => 32,
            BackboneKind::Conv64f => 64,
            BackboneKind::Resnet12 => 64,
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneKind::Conv32fTiny => write!(f, "conv32f-tiny"),
            BackboneKind::Conv64f => write!(f, "conv64f"),
            BackboneKind::Resnet12 => write!(f, "resnet12"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `CxHxW` notation, e.g. `3x32x32`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split('x').collect();
        let bad = || Error::InvalidConfig(vec![format!("bad image shape '{s}', want CxHxW")]);
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if nums.iter().any(|&n| n == 0) {
            return Err(bad());
        }
        Ok(Self::new(nums[0], nums[1], nums[2]))
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_shape: ImageShape,
}

fn halved(mut n: usize, times: usize) -> usize {
    for _ in 0..times {
        n /= 2;
    }
    n
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, input_shape: ImageShape) -> Self {
        Self { kind, input_shape }
    }

    /// Output dimensionality, fully determined by kind and input shape.
    pub fn feature_dim(&self) -> Result<usize> {
        match self.kind {
            BackboneKind::Conv32fTiny | BackboneKind::Conv64f => {
                let h = halved(self.input_shape.height, CONV_BLOCKS);
                let w = halved(self.input_shape.width, CONV_BLOCKS);
                if h == 0 || w == 0 {
                    return Err(Error::InvalidConfig(vec![format!(
                        "input shape {} too small for {} pooling stages",
                        self.input_shape, CONV_BLOCKS
                    )]));
                }
                Ok(self.kind.filters() * h * w)
            }
            BackboneKind::Resnet12 => Err(Error::UnsupportedBackbone("resnet12".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub spec: BackboneSpec,
    pub extractor: ExtractorArch,
    pub projector: ProjectorArch,
    pub head: HeadArch,
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim
    }

    pub fn check_input<S: Scalar>(&self, x: &Array4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let want = self.spec.input_shape;
        if (c, h, w) != (want.channels, want.height, want.width) {
            return Err(Error::ShapeMismatch {
                expected: vec![want.channels, want.height, want.width],
                actual: vec![c, h, w],
            });
        }
        Ok(())
    }
}

pub struct Tape<S: Scalar> {
    extractor: ExtractorTape<S>,
    projector: ProjectorTape<S>,
    head: HeadTape<S>,
}

/// Training-mode forward through extractor, projector and head.
/// Batch-norm updates are returned for the caller to apply (or drop,
/// in inner loops that must not touch running statistics).
pub fn train_forward<S: Scalar>(
    arch: &Architecture,
    ps: &ParamStore<S>,
    x: &Array4<S>,
) -> Result<(Array2<S>, Tape<S>, Vec<BnUpdate>)> {
    arch.check_input(x)?;
    let mut updates = Vec::new();
    let (feats, ext_tape) = arch.extractor.forward_train(ps, x, &mut updates);
    let (projected, proj_tape) = arch.projector.forward_train(ps, &feats, &mut updates);
    let (logits, head_tape) = arch.head.forward(ps, &projected);
    Ok((
        logits,
        Tape {
            extractor: ext_tape,
            projector: proj_tape,
            head: head_tape,
        },
        updates,
    ))
}

/// Backprop a logit gradient through the tape; returns parameter grads.
pub fn train_backward<S: Scalar>(
    arch: &Architecture,
    ps: &ParamStore<S>,
    tape: &Tape<S>,
    dlogits: &Array2<S>,
) -> ParamStore<S> {
    let mut grads = ps.zeros_like();
    let g = arch.head.backward(ps, &tape.head, dlogits, &mut grads);
    let g = arch.projector.backward(ps, &tape.projector, &g, &mut grads);
    let _ = arch.extractor.backward(ps, &tape.extractor, &g, &mut grads);
    grads
}

/// Cross-entropy loss and parameter gradients in one pass.
pub fn ce_loss_and_grads<S: Scalar>(
    arch: &Architecture,
    ps: &ParamStore<S>,
    x: &Array4<S>,
    labels: &[usize],
) -> Result<(S, ParamStore<S>, Vec<BnUpdate>)> {
    let (logits, tape, updates) = train_forward(arch, ps, x)?;
    let (loss, dlogits) = crate::nn::loss::cross_entropy(&logits, labels);
    let grads = train_backward(arch, ps, &tape, &dlogits);
    Ok((loss, grads, updates))
}

/// One model: architecture plus its parameters and buffers.
///
/// A bundle is single-writer during training. A frozen bundle (shared
/// reference) is safe for concurrent evaluation.
#[derive(Clone)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub params: ParamStore<f64>,
    pub buffers: BufferStore,
    pub seed: u64,
    pub epoch: usize,
}

impl ModelBundle {
    /// Builds all three parameter groups from independent seed streams,
    /// so e.g. extractor initialization is identical across projector
    /// ablation rows.
    pub fn new(
        spec: BackboneSpec,
        projector: ProjectorConfig,
        head: HeadKind,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let feature_dim = spec.feature_dim()?;
        if projector.feature_dim != feature_dim {
            return Err(Error::InvalidConfig(vec![format!(
                "projector feature_dim {} != backbone feature_dim {}",
                projector.feature_dim, feature_dim
            )]));
        }
        let mut builder = ParamBuilder::new();
        let mut bufs = BufferStore::default();
        let mut theta_rng = crate::rng::stream(seed, "init-theta");
        let extractor = ExtractorArch::build(
            &mut builder,
            &mut bufs,
            spec.input_shape.channels,
            spec.kind.filters(),
            CONV_BLOCKS,
            feature_dim,
            &mut theta_rng,
        );
        let mut eps_rng = crate::rng::stream(seed, "init-epsilon");
        let projector = ProjectorArch::build(&mut builder, &mut bufs, projector, &mut eps_rng);
        let mut omega_rng = crate::rng::stream(seed, "init-omega");
        let head = HeadArch::build(&mut builder, head, feature_dim, num_classes, &mut omega_rng);
        Ok(ModelBundle {
            arch: Architecture {
                spec,
                extractor,
                projector,
                head,
            },
            params: builder.finish(),
            buffers: bufs,
            seed,
            epoch: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.head.num_classes
    }

    /// Training-mode logits; BN batch statistics are used and running
    /// statistics updated.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let (logits, _, updates) = train_forward(&self.arch, &self.params, x)?;
        apply_bn_updates(&mut self.buffers, &updates);
        Ok(logits)
    }

    /// Evaluation-mode features: extractor only, running statistics,
    /// no mutation. Projector and head parameters never enter this path.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.arch.check_input(x)?;
        Ok(self
            .arch
            .extractor
            .forward_eval(&self.params, &self.buffers, x))
    }

    /// Loss + gradients for one labeled batch.
    pub fn ce_loss_and_grads(
        &mut self,
        x: &Array4<f64>,
        labels: &[usize],
        update_stats: bool,
    ) -> Result<(f64, ParamStore<f64>)> {
        let (loss, grads, updates) = ce_loss_and_grads(&self.arch, &self.params, x, labels)?;
        if update_stats {
            apply_bn_updates(&mut self.buffers, &updates);
        }
        Ok((loss, grads))
    }
}
