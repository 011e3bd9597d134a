//! Episode and batch sampling.
//!
//! Samplers are pure functions of (dataset fingerprint, parameters, rng
//! state): the same seeded generator always yields the same episodes
//! and the same epoch permutations.

use ndarray::Array4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{sample_distinct, shuffle};

use super::{Episode, LabeledDataset};

/// Index-level episode: which classes and items, without pixel copies.
/// Bulk evaluation runs on plans plus a feature cache.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePlan {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Global class index per local label.
    pub classes: Vec<usize>,
    /// Per local label, item indices within the class.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

pub fn sample_episode_plan<R: Rng>(
    dataset: &LabeledDataset,
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut R,
) -> Result<EpisodePlan> {
    if dataset.num_classes() < way {
        return Err(Error::TooFewClasses {
            dataset: dataset.name().to_string(),
            available: dataset.num_classes(),
            needed: way,
        });
    }
    let classes = sample_distinct(rng, dataset.num_classes(), way);
    let mut support = Vec::with_capacity(way);
    let mut query_items = Vec::with_capacity(way);
    for &c in &classes {
        let available = dataset.items_in(c).len();
        if available < shot + query {
            return Err(Error::TooFewItems {
                class: dataset.class_ids()[c].clone(),
                available,
                needed: shot + query,
            });
        }
        let picks = sample_distinct(rng, available, shot + query);
        support.push(picks[..shot].to_vec());
        query_items.push(picks[shot..].to_vec());
    }
    Ok(EpisodePlan {
        way,
        shot,
        query_per_class: query,
        classes,
        support,
        query: query_items,
    })
}

/// Copy a plan's pixels into an owned [`Episode`].
pub fn materialize(dataset: &LabeledDataset, plan: &EpisodePlan) -> Episode {
    let mut support = Vec::with_capacity(plan.way * plan.shot);
    let mut query = Vec::with_capacity(plan.way * plan.query_per_class);
    let mut class_map = Vec::with_capacity(plan.way);
    for (local, &c) in plan.classes.iter().enumerate() {
        class_map.push(dataset.class_ids()[c].clone());
        for &i in &plan.support[local] {
            support.push((dataset.items_in(c)[i].pixels.clone(), local));
        }
        for &i in &plan.query[local] {
            query.push((dataset.items_in(c)[i].pixels.clone(), local));
        }
    }
    Episode {
        way: plan.way,
        shot: plan.shot,
        query_per_class: plan.query_per_class,
        support,
        query,
        class_map,
    }
}

/// One N-way K-shot episode with disjoint support and query sets.
pub fn sample_episode<R: Rng>(
    dataset: &LabeledDataset,
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut R,
) -> Result<Episode> {
    let plan = sample_episode_plan(dataset, way, shot, query, rng)?;
    Ok(materialize(dataset, &plan))
}

/// Shuffled single-epoch batch stream over global labels. Every item
/// appears exactly once per epoch; the final short batch is emitted.
pub struct EpochBatches<'a> {
    dataset: &'a LabeledDataset,
    order: Vec<(usize, usize)>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for EpochBatches<'a> {
    type Item = (Array4<f64>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picks = &self.order[self.cursor..end];
        self.cursor = end;
        let x = self.dataset.stack(picks);
        let y = picks.iter().map(|&(c, _)| c).collect();
        Some((x, y))
    }
}

pub fn sample_batches<'a, R: Rng>(
    dataset: &'a LabeledDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochBatches<'a>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    if dataset.total_items() == 0 {
        return Err(Error::EmptyDataset(dataset.name().to_string()));
    }
    let mut order = dataset.all_indices();
    shuffle(rng, &mut order);
    Ok(EpochBatches {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageRecord, ItemSource};
    use crate::model::ImageShape;
    use crate::rng::stream;
    use ndarray::Array3;

    pub(crate) fn toy_dataset(classes: usize, items: usize) -> LabeledDataset {
        let shape = ImageShape::new(1, 2, 2);
        let class_ids: Vec<String> = (0..classes).map(|c| format!("class{c:02}")).collect();
        let recs = (0..classes)
            .map(|c| {
                (0..items)
                    .map(|i| ImageRecord {
                        pixels: Array3::from_elem(
                            (1, 2, 2),
                            (c * items + i) as f64 / (classes * items) as f64,
                        ),
                        source: ItemSource::Seed((c * items + i) as u64),
                    })
                    .collect()
            })
            .collect();
        LabeledDataset::new("toy", shape, class_ids, recs).unwrap()
    }

    #[test]
    fn episode_counts_and_disjointness() {
        let ds = toy_dataset(10, 20);
        let mut rng = stream(42, "ep");
        let ep = sample_episode(&ds, 5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        // disjoint at the index level
        let plan = sample_episode_plan(&ds, 5, 5, 15, &mut stream(42, "ep")).unwrap();
        for local in 0..5 {
            for s in &plan.support[local] {
                assert!(!plan.query[local].contains(s));
            }
        }
    }

    #[test]
    fn too_few_classes_is_an_error() {
        let ds = toy_dataset(4, 10);
        let err = sample_episode(&ds, 5, 1, 1, &mut stream(0, "e")).unwrap_err();
        assert!(matches!(err, Error::TooFewClasses { needed: 5, .. }));
    }

    #[test]
    fn too_few_items_names_the_class() {
        let ds = toy_dataset(6, 4);
        let err = sample_episode(&ds, 5, 3, 2, &mut stream(0, "e")).unwrap_err();
        match err {
            Error::TooFewItems { class, available, needed } => {
                assert!(class.starts_with("class"));
                assert_eq!(available, 4);
                assert_eq!(needed, 5);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn same_seed_reproduces_episode() {
        let ds = toy_dataset(8, 10);
        let a = sample_episode_plan(&ds, 5, 2, 3, &mut stream(7, "e")).unwrap();
        let b = sample_episode_plan(&ds, 5, 2, 3, &mut stream(7, "e")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_labels_are_contiguous_and_mapped() {
        let ds = toy_dataset(8, 10);
        let ep = sample_episode(&ds, 5, 2, 3, &mut stream(3, "e")).unwrap();
        assert_eq!(ep.class_map.len(), 5);
        let mut seen: Vec<usize> = ep.support.iter().map(|(_, l)| *l).collect();
        seen.extend(ep.query.iter().map(|(_, l)| *l));
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn epoch_batches_cover_everything_once() {
        let ds = toy_dataset(10, 10);
        let mut rng = stream(1, "batch");
        let sizes: Vec<usize> = sample_batches(&ds, 32, &mut rng)
            .unwrap()
            .map(|(x, _)| x.dim().0)
            .collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let mut labels: Vec<usize> = sample_batches(&ds, 32, &mut stream(1, "batch"))
            .unwrap()
            .flat_map(|(_, y)| y)
            .collect();
        labels.sort_unstable();
        let mut expect: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat(c).take(10)).collect();
        expect.sort_unstable();
        assert_eq!(labels, expect);
    }

    #[test]
    fn different_rng_states_permute_differently() {
        let ds = toy_dataset(10, 10);
        let collect = |tag: &str| -> Vec<usize> {
            sample_batches(&ds, 100, &mut stream(1, tag))
                .unwrap()
                .flat_map(|(_, y)| y)
                .collect()
        };
        assert_eq!(collect("a"), collect("a"));
        assert_ne!(collect("a"), collect("b"));
    }
}
