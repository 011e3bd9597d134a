//! Named parameter and buffer storage.
//!
//! Parameters live in one store, partitioned into three disjoint groups:
//! extractor (theta), projector (epsilon) and classifier (omega). Layers
//! hold [`ParamId`] handles instead of owning their weights, which keeps
//! the whole parameter set addressable as named tensors (checkpoints),
//! as per-group subsets (inner-loop updates) and as one flat vector
//! (meta-gradients, finite differences).
//!
//! Non-trainable state (BN running statistics) lives in a separate
//! [`BufferStore`] and is always `f64`, whatever scalar the parameters
//! are instantiated with.

use std::sync::Arc;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::{Dual, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Theta,
    Epsilon,
    Omega,
}

impl ParamGroup {
    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::Theta => "theta",
            ParamGroup::Epsilon => "epsilon",
            ParamGroup::Omega => "omega",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

/// Immutable description of every tensor in a store; shared between a
/// store, its gradients and its optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    /// 0/1 mask over the flat vector selecting the given groups.
    pub fn group_mask(&self, groups: &[ParamGroup]) -> Vec<f64> {
        let mut mask = Vec::with_capacity(self.total_len());
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            let sel = if groups.contains(&e.group) { 1.0 } else { 0.0 };
            mask.extend(std::iter::repeat(sel).take(n));
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<S = f64> {
    pub layout: Arc<ParamLayout>,
    tensors: Vec<ArrayD<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.tensors[id.0]
    }

    pub fn a1(&self, id: ParamId) -> ArrayView1<'_, S> {
        self.tensors[id.0].view().into_dimensionality().unwrap()
    }

    pub fn a2(&self, id: ParamId) -> ArrayView2<'_, S> {
        self.tensors[id.0].view().into_dimensionality().unwrap()
    }

    pub fn a4(&self, id: ParamId) -> ArrayView4<'_, S> {
        self.tensors[id.0].view().into_dimensionality().unwrap()
    }

    pub fn tensors(&self) -> &[ArrayD<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<S>] {
        &mut self.tensors
    }

    /// Same layout, all zeros. Gradient accumulators start here.
    pub fn zeros_like(&self) -> ParamStore<S> {
        ParamStore {
            layout: self.layout.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::from_elem(t.raw_dim(), S::zero()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.layout.total_len());
        for t in &self.tensors {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[S]) {
        let mut off = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        assert_eq!(off, flat.len(), "flat vector length mismatch");
    }
}

impl ParamStore<f64> {
    /// Dual-number copy with the given tangent direction installed.
    pub fn to_dual(&self, tangent: &[f64]) -> ParamStore<Dual> {
        assert_eq!(tangent.len(), self.layout.total_len());
        let mut off = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let data: Vec<Dual> = t
                    .iter()
                    .map(|&re| {
                        let d = Dual::new(re, tangent[off]);
                        off += 1;
                        d
                    })
                    .collect();
                ArrayD::from_shape_vec(t.raw_dim(), data).unwrap()
            })
            .collect();
        ParamStore {
            layout: self.layout.clone(),
            tensors,
        }
    }
}

impl ParamStore<Dual> {
    /// Split a dual-valued gradient into (primal, tangent) flat vectors.
    pub fn split_flat(&self) -> (Vec<f64>, Vec<f64>) {
        let mut re = Vec::with_capacity(self.layout.total_len());
        let mut dx = Vec::with_capacity(self.layout.total_len());
        for t in &self.tensors {
            for v in t.iter() {
                re.push(v.re);
                dx.push(v.dx);
            }
        }
        (re, dx)
    }
}

/// Weight initialization recipes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He fan-in scaling: N(0, sqrt(2 / fan_in)).
    HeNormal { fan_in: usize },
}

/// Collects parameter registrations while an architecture is built.
#[derive(Default)]
pub struct ParamBuilder {
    entries: Vec<ParamEntry>,
    tensors: Vec<ArrayD<f64>>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        let id = ParamId(self.tensors.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            shape: shape.to_vec(),
        });
        self.tensors
            .push(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
        id
    }

    pub fn finish(self) -> ParamStore<f64> {
        ParamStore {
            layout: Arc::new(ParamLayout {
                entries: self.entries,
            }),
            tensors: self.tensors,
        }
    }
}

/// Non-trainable 1-D state, e.g. BN running mean/variance.
#[derive(Clone, Debug, Default)]
pub struct BufferStore {
    names: Vec<String>,
    tensors: Vec<ndarray::Array1<f64>>,
}

impl BufferStore {
    pub fn add(&mut self, name: impl Into<String>, len: usize, fill: f64) -> BufId {
        let id = BufId(self.tensors.len());
        self.names.push(name.into());
        self.tensors.push(ndarray::Array1::from_elem(len, fill));
        id
    }

    pub fn get(&self, id: BufId) -> ArrayView1<'_, f64> {
        self.tensors[id.0].view()
    }

    pub fn get_mut(&mut self, id: BufId) -> ArrayViewMut1<'_, f64> {
        self.tensors[id.0].view_mut()
    }

    /// Mutable views of two distinct buffers at once.
    pub fn get_pair_mut(
        &mut self,
        a: BufId,
        b: BufId,
    ) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
        assert_ne!(a.0, b.0);
        let (lo, hi, swapped) = if a.0 < b.0 {
            (a.0, b.0, false)
        } else {
            (b.0, a.0, true)
        };
        let (head, tail) = self.tensors.split_at_mut(hi);
        let first = head[lo].view_mut();
        let second = tail[0].view_mut();
        if swapped {
            (second, first)
        } else {
            (first, second)
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ndarray::Array1<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut ndarray::Array1<f64>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn flat_roundtrip_preserves_values() {
        let mut rng = stream(1, "test");
        let mut b = ParamBuilder::new();
        b.add("w", ParamGroup::Theta, &[2, 3], Init::HeNormal { fan_in: 3 }, &mut rng);
        b.add("g", ParamGroup::Epsilon, &[4], Init::Ones, &mut rng);
        let mut ps = b.finish();
        let flat = ps.flatten();
        assert_eq!(flat.len(), 10);
        let orig = ps.clone();
        ps.assign_from_flat(&flat);
        for (a, b) in ps.tensors().iter().zip(orig.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn group_mask_selects_by_group() {
        let mut rng = stream(1, "test");
        let mut b = ParamBuilder::new();
        b.add("w", ParamGroup::Theta, &[2], Init::Zeros, &mut rng);
        b.add("p", ParamGroup::Epsilon, &[3], Init::Zeros, &mut rng);
        b.add("h", ParamGroup::Omega, &[1], Init::Zeros, &mut rng);
        let ps = b.finish();
        let mask = ps.layout.group_mask(&[ParamGroup::Epsilon]);
        assert_eq!(mask, vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dual_conversion_installs_tangent() {
        let mut rng = stream(1, "test");
        let mut b = ParamBuilder::new();
        b.add("w", ParamGroup::Theta, &[3], Init::HeNormal { fan_in: 3 }, &mut rng);
        let ps = b.finish();
        let dual = ps.to_dual(&[1.0, 2.0, 3.0]);
        let (re, dx) = dual.split_flat();
        assert_eq!(re, ps.flatten());
        assert_eq!(dx, vec![1.0, 2.0, 3.0]);
    }
}
