//! Labelled datasets, class splits and C-way K-shot episode sampling.

mod io;
mod synthetic;

pub use io::{
    load_jsonl_vectors, load_tsv, parse_jsonl_vectors, parse_tsv, save_jsonl_vectors, save_tsv,
};
pub use synthetic::gen_synthetic;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::Input;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream};

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Text(String),
    Vector(Vec<f64>),
}

impl Payload {
    pub fn as_input(&self) -> Input<'_> {
        match self {
            Payload::Text(t) => Input::Text(t),
            Payload::Vector(v) => Input::Vector(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub label: usize,
    pub payload: Payload,
}

/// Items with dense class ids `0..num_classes`; every class has at least one item.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    class_names: Vec<String>,
    classes: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, items: Vec<Item>) -> Result<Self> {
        let mut classes = vec![Vec::new(); class_names.len()];
        for (i, item) in items.iter().enumerate() {
            let slot = classes.get_mut(item.label).ok_or_else(|| {
                Error::Data(format!(
                    "item {i} has label {} but only {} classes exist",
                    item.label,
                    class_names.len()
                ))
            })?;
            slot.push(i);
        }
        if let Some(c) = classes.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!(
                "class `{}` has no items",
                class_names[c]
            )));
        }
        if items.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let mut dim = None;
        for item in &items {
            if let Payload::Vector(v) = &item.payload {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::Dimension {
                            expected: d,
                            found: v.len(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Dataset {
            items,
            class_names,
            classes,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &Item {
        &self.items[i]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Item indices of class `c`.
    pub fn class_items(&self, c: usize) -> &[usize] {
        &self.classes[c]
    }

    /// Vector dimension, or `None` for a text dataset.
    pub fn vector_dim(&self) -> Option<usize> {
        self.items.iter().find_map(|it| match &it.payload {
            Payload::Vector(v) => Some(v.len()),
            Payload::Text(_) => None,
        })
    }

    pub fn is_text(&self) -> bool {
        self.items
            .iter()
            .all(|it| matches!(it.payload, Payload::Text(_)))
    }

    /// Dataset restricted to `classes`, relabelled `0..classes.len()` in the given order.
    pub fn subset(&self, classes: &[usize]) -> Result<Dataset> {
        let mut names = Vec::with_capacity(classes.len());
        let mut items = Vec::new();
        for (new_label, &c) in classes.iter().enumerate() {
            if c >= self.num_classes() {
                return Err(Error::InvalidArgument(format!("class {c} out of range")));
            }
            names.push(self.class_names[c].clone());
            items.extend(self.classes[c].iter().map(|&i| Item {
                label: new_label,
                payload: self.items[i].payload.clone(),
            }));
        }
        Dataset::new(names, items)
    }
}

/// Splits classes into `num_base` base classes and the rest, after a seeded shuffle of class ids.
pub fn split_base_novel(
    dataset: &Dataset,
    num_base: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let n = dataset.num_classes();
    if num_base == 0 || num_base >= n {
        return Err(Error::InvalidArgument(format!(
            "num_base must be in 1..{n}, got {num_base}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seeded(derive_seed(seed, stream::CLASS_SPLIT)));
    let base = dataset.subset(&ids[..num_base])?;
    let novel = dataset.subset(&ids[num_base..])?;
    Ok((base, novel))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.queries < 1 {
            return Err(Error::Config(format!(
                "episodes need C >= 2, K >= 1, L >= 1 (got C={}, K={}, L={})",
                self.way, self.shot, self.queries
            )));
        }
        Ok(())
    }

    pub fn items_per_episode(&self) -> usize {
        self.way * (self.shot + self.queries)
    }
}

/// One sampled task. Episode-local label `c` refers to dataset class `classes[c]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Episode {
    pub classes: Vec<usize>,
    /// `support[c]` holds the K item indices of local class `c`.
    pub support: Vec<Vec<usize>>,
    /// `(item index, local label)`, grouped by class.
    pub queries: Vec<(usize, usize)>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn total_items(&self) -> usize {
        self.support.iter().map(Vec::len).sum::<usize>() + self.queries.len()
    }
}

/// Samples episode `index`; the result depends only on `(dataset, cfg, index)`.
pub fn sample_episode(dataset: &Dataset, cfg: &EpisodeConfig, index: u64) -> Result<Episode> {
    cfg.validate()?;
    let need = cfg.shot + cfg.queries;
    let eligible: Vec<usize> = (0..dataset.num_classes())
        .filter(|&c| dataset.class_items(c).len() >= need)
        .collect();
    if eligible.len() < cfg.way {
        return Err(Error::InsufficientData(format!(
            "{}-way {}-shot with {} queries needs {} classes with >= {} items; dataset has {}",
            cfg.way,
            cfg.shot,
            cfg.queries,
            cfg.way,
            need,
            eligible.len()
        )));
    }
    let mut rng = seeded(derive_seed(cfg.seed, index));
    let classes: Vec<usize> = sample(&mut rng, eligible.len(), cfg.way)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    let mut support = Vec::with_capacity(cfg.way);
    let mut queries = Vec::with_capacity(cfg.way * cfg.queries);
    for (local, &c) in classes.iter().enumerate() {
        let pool = dataset.class_items(c);
        let picked: Vec<usize> = sample(&mut rng, pool.len(), need)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        support.push(picked[..cfg.shot].to_vec());
        queries.extend(picked[cfg.shot..].iter().map(|&i| (i, local)));
    }
    Ok(Episode {
        classes,
        support,
        queries,
    })
}

/// A support-only episode: `way` classes with `shot` items each and no queries.
pub fn sample_support(dataset: &Dataset, way: usize, shot: usize, seed: u64) -> Result<Episode> {
    if way < 2 || shot < 1 {
        return Err(Error::Config(format!(
            "support sets need C >= 2 and K >= 1 (got C={way}, K={shot})"
        )));
    }
    let eligible: Vec<usize> = (0..dataset.num_classes())
        .filter(|&c| dataset.class_items(c).len() >= shot)
        .collect();
    if eligible.len() < way {
        return Err(Error::InsufficientData(format!(
            "{way}-way {shot}-shot support needs {way} classes with >= {shot} items; dataset has {}",
            eligible.len()
        )));
    }
    let mut rng = seeded(seed);
    let classes: Vec<usize> = sample(&mut rng, eligible.len(), way)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    let support = classes
        .iter()
        .map(|&c| {
            let pool = dataset.class_items(c);
            sample(&mut rng, pool.len(), shot)
                .into_iter()
                .map(|k| pool[k])
                .collect()
        })
        .collect();
    Ok(Episode {
        classes,
        support,
        queries: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn toy(classes: usize, per_class: usize) -> Dataset {
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let items = (0..classes * per_class)
            .map(|i| Item {
                label: i / per_class,
                payload: Payload::Vector(vec![i as f64, 1.0]),
            })
            .collect();
        Dataset::new(names, items).unwrap()
    }

    fn cfg(way: usize, shot: usize, queries: usize) -> EpisodeConfig {
        EpisodeConfig {
            way,
            shot,
            queries,
            seed: 11,
        }
    }

    #[test]
    fn five_way_five_shot_has_75_items() {
        let ep = sample_episode(&toy(10, 20), &cfg(5, 5, 10), 0).unwrap();
        assert_eq!(ep.total_items(), 75);
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 25);
        assert_eq!(ep.queries.len(), 50);
        let one_shot = sample_episode(&toy(10, 20), &cfg(5, 1, 10), 0).unwrap();
        assert_eq!(one_shot.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(one_shot.queries.len(), 50);
    }

    #[test]
    fn episodes_are_reproducible_and_disjoint() {
        let ds = toy(8, 15);
        let c = cfg(4, 3, 5);
        for index in 0..50 {
            let ep = sample_episode(&ds, &c, index).unwrap();
            assert_eq!(ep, sample_episode(&ds, &c, index).unwrap());
            let support: HashSet<usize> = ep.support.iter().flatten().copied().collect();
            let queries: HashSet<usize> = ep.queries.iter().map(|q| q.0).collect();
            assert!(support.is_disjoint(&queries));
            assert_eq!(support.len() + queries.len(), ep.total_items());
            let distinct: HashSet<usize> = ep.classes.iter().copied().collect();
            assert_eq!(distinct.len(), 4);
            for (local, items) in ep.support.iter().enumerate() {
                assert!(items.iter().all(|&i| ds.item(i).label == ep.classes[local]));
            }
            for &(i, local) in &ep.queries {
                assert!(local < 4);
                assert_eq!(ds.item(i).label, ep.classes[local]);
            }
        }
        assert_ne!(
            sample_episode(&ds, &c, 0).unwrap(),
            sample_episode(&ds, &c, 1).unwrap()
        );
    }

    #[test]
    fn insufficient_classes_or_items() {
        assert!(matches!(
            sample_episode(&toy(3, 20), &cfg(5, 1, 10), 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            sample_episode(&toy(6, 5), &cfg(5, 1, 10), 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(sample_episode(&toy(6, 20), &cfg(1, 1, 10), 0).is_err());
    }

    #[test]
    fn support_only_sampling() {
        let ds = toy(12, 5);
        let ep = sample_support(&ds, 10, 5, 1).unwrap();
        assert_eq!(ep.total_items(), 50);
        assert!(ep.queries.is_empty());
        assert_eq!(ep, sample_support(&ds, 10, 5, 1).unwrap());
        assert!(sample_support(&ds, 13, 5, 1).is_err());
        assert!(sample_support(&ds, 10, 6, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let ds = toy(30, 3);
        let (base, novel) = split_base_novel(&ds, 20, 4).unwrap();
        assert_eq!(base.num_classes(), 20);
        assert_eq!(novel.num_classes(), 10);
        let b: HashSet<&String> = base.class_names().iter().collect();
        assert!(novel.class_names().iter().all(|n| !b.contains(n)));
        assert_eq!(base.len() + novel.len(), ds.len());
        assert!(split_base_novel(&ds, 30, 4).is_err());
        assert!(split_base_novel(&ds, 0, 4).is_err());
    }

    #[test]
    fn one_novel_class_cannot_form_an_episode() {
        let (_, novel) = split_base_novel(&toy(30, 20), 29, 1).unwrap();
        assert_eq!(novel.num_classes(), 1);
        assert!(sample_episode(&novel, &cfg(5, 1, 10), 0).is_err());
    }

    #[test]
    fn dataset_rejects_empty_classes_and_ragged_vectors() {
        let item = |label, v: Vec<f64>| Item {
            label,
            payload: Payload::Vector(v),
        };
        assert!(Dataset::new(vec!["a".into(), "b".into()], vec![item(0, vec![1.0])]).is_err());
        assert!(Dataset::new(
            vec!["a".into()],
            vec![item(0, vec![1.0]), item(0, vec![1.0, 2.0])]
        )
        .is_err());
        assert!(Dataset::new(vec!["a".into()], vec![item(1, vec![1.0])]).is_err());
    }
}
