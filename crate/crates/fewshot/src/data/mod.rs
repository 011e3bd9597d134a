//! Labeled image datasets and few-shot episodes.

pub mod folder;
pub mod sampler;
pub mod synth;

use ndarray::{Array3, Array4};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ImageShape;

pub use sampler::{sample_batches, sample_episode, sample_episode_plan, EpisodePlan};
pub use synth::{make_synthetic_domain, ShiftKind, ShiftSpec, SynthSpec};

/// Where an item's pixels came from; kept so datasets can be traced
/// back to disk files or generator seeds.
#[derive(Clone, Debug)]
pub enum ItemSource {
    Path(std::path::PathBuf),
    Seed(u64),
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    /// `(C, H, W)` pixels in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub source: ItemSource,
}

/// Immutable labeled dataset: per-class item lists with a content
/// fingerprint. Iteration order is fixed at construction.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    name: String,
    shape: ImageShape,
    classes: Vec<String>,
    items: Vec<Vec<ImageRecord>>,
    fingerprint: String,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        classes: Vec<String>,
        items: Vec<Vec<ImageRecord>>,
    ) -> Result<Self> {
        let name = name.into();
        if classes.is_empty() || items.iter().all(|v| v.is_empty()) {
            return Err(Error::EmptyDataset(name));
        }
        assert_eq!(classes.len(), items.len(), "one item list per class");
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            assert!(seen.insert(c.clone()), "duplicate class id '{c}'");
        }
        for (c, list) in classes.iter().zip(&items) {
            if list.is_empty() {
                return Err(Error::TooFewItems {
                    class: c.clone(),
                    available: 0,
                    needed: 1,
                });
            }
            for rec in list {
                let (ch, h, w) = rec.pixels.dim();
                if (ch, h, w) != (shape.channels, shape.height, shape.width) {
                    return Err(Error::ShapeMismatch {
                        expected: vec![shape.channels, shape.height, shape.width],
                        actual: vec![ch, h, w],
                    });
                }
            }
        }
        let fingerprint = fingerprint_of(&name, shape, &classes, &items);
        Ok(Self {
            name,
            shape,
            classes,
            items,
            fingerprint,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> &[String] {
        &self.classes
    }

    pub fn items_in(&self, class: usize) -> &[ImageRecord] {
        &self.items[class]
    }

    pub fn total_items(&self) -> usize {
        self.items.iter().map(Vec::len).sum()
    }

    pub fn min_items_per_class(&self) -> usize {
        self.items.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Content hash; equal fingerprints mean byte-identical pixels,
    /// classes and ordering.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Stack `(class, item)` picks into a `(B, C, H, W)` batch.
    pub fn stack(&self, picks: &[(usize, usize)]) -> Array4<f64> {
        let s = self.shape;
        let mut out = Array4::zeros((picks.len(), s.channels, s.height, s.width));
        for (b, &(c, i)) in picks.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), b)
                .assign(&self.items[c][i].pixels);
        }
        out
    }

    /// Every `(class, item)` index pair in iteration order.
    pub fn all_indices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total_items());
        for (c, list) in self.items.iter().enumerate() {
            for i in 0..list.len() {
                out.push((c, i));
            }
        }
        out
    }
}

fn fingerprint_of(
    name: &str,
    shape: ImageShape,
    classes: &[String],
    items: &[Vec<ImageRecord>],
) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(shape.to_string().as_bytes());
    for (c, list) in classes.iter().zip(items) {
        h.update(c.as_bytes());
        h.update((list.len() as u64).to_le_bytes());
        for rec in list {
            for v in rec.pixels.iter() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One N-way K-shot task with owned images and local labels.
#[derive(Clone, Debug)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub support: Vec<(Array3<f64>, usize)>,
    pub query: Vec<(Array3<f64>, usize)>,
    /// Local label -> global class identifier.
    pub class_map: Vec<String>,
}

impl Episode {
    pub fn support_batch(&self) -> (Array4<f64>, Vec<usize>) {
        stack_pairs(&self.support)
    }

    pub fn query_batch(&self) -> (Array4<f64>, Vec<usize>) {
        stack_pairs(&self.query)
    }
}

fn stack_pairs(pairs: &[(Array3<f64>, usize)]) -> (Array4<f64>, Vec<usize>) {
    let (c, h, w) = pairs[0].0.dim();
    let mut x = Array4::zeros((pairs.len(), c, h, w));
    let mut y = Vec::with_capacity(pairs.len());
    for (b, (img, label)) in pairs.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), b).assign(img);
        y.push(*label);
    }
    (x, y)
}
