use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::graph::CrystalGraph;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Property {
    pub name: String,
    pub unit: String,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub graph: Arc<CrystalGraph>,
    /// One raw value per property, in `Dataset::properties` order.
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<Entry>,
    pub properties: Vec<Property>,
}

impl Dataset {
    pub fn new(entries: Vec<Entry>, properties: Vec<Property>) -> Result<Self, TrainError> {
        for e in &entries {
            if e.targets.len() != properties.len() {
                return Err(TrainError::Data(format!(
                    "entry {:?} has {} targets, expected {}",
                    e.graph.id,
                    e.targets.len(),
                    properties.len()
                )));
            }
            if e.targets.iter().any(|t| !t.is_finite()) {
                return Err(TrainError::Data(format!(
                    "entry {:?} has a non-finite target",
                    e.graph.id
                )));
            }
        }
        Ok(Self { entries, properties })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_tasks(&self) -> usize {
        self.properties.len()
    }

    pub fn property_names(&self) -> Vec<String> {
        self.properties.iter().map(|p| p.name.clone()).collect()
    }

    pub fn property_index(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    /// Same entries (sharing graphs), restricted to the named properties in the
    /// given order.
    pub fn select_tasks(&self, names: &[String]) -> Result<Dataset, TrainError> {
        if names.is_empty() {
            return Err(TrainError::Data("task subset is empty".into()));
        }
        let idx = names
            .iter()
            .map(|n| {
                self.property_index(n)
                    .ok_or_else(|| TrainError::Data(format!("unknown property {n:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    graph: e.graph.clone(),
                    targets: idx.iter().map(|&i| e.targets[i]).collect(),
                })
                .collect(),
            properties: idx.iter().map(|&i| self.properties[i].clone()).collect(),
        })
    }

    pub fn column(&self, task: usize, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .map(|&i| self.entries[i].targets[task])
            .collect()
    }
}

/// Disjoint train/validation/test index lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split sizes for `n` items: validation and test get `floor(r * n)`, training
/// gets the rest (its own floor plus the rounding remainder).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize), TrainError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    if n < 3 {
        return Err(TrainError::Data(format!("{n} entries cannot fill three splits")));
    }
    // the epsilon keeps e.g. 0.2 * 10 from flooring to 1
    let floor = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let val = floor(ratios[1]);
    let test = floor(ratios[2]);
    let train = n - val - test;
    if train == 0 || val == 0 || test == 0 {
        return Err(TrainError::Data(format!(
            "{n} entries leave an empty split at ratios {ratios:?}"
        )));
    }
    Ok((train, val, test))
}

/// Seeded uniform shuffle of `0..n`, cut into train, validation and test.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split, TrainError> {
    let (n_train, n_val, _) = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

/// Per-task z-scoring fitted on training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Leaves targets unchanged.
    pub fn identity(n_tasks: usize) -> Self {
        Self {
            mean: vec![0.0; n_tasks],
            std: vec![1.0; n_tasks],
        }
    }

    /// Population mean and standard deviation per task.
    pub fn fit(rows: &[&[f64]]) -> Result<Self, TrainError> {
        if rows.len() < 2 {
            return Err(TrainError::Data(format!(
                "normalizer needs at least 2 training entries, got {}",
                rows.len()
            )));
        }
        let n_tasks = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; n_tasks];
        let mut std = vec![0.0; n_tasks];
        for p in 0..n_tasks {
            let m = rows.iter().map(|r| r[p]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[p] - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(TrainError::ConstantTarget { task: p });
            }
            mean[p] = m;
            std[p] = s;
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, task: usize, y: f64) -> f64 {
        (y - self.mean[task]) / self.std[task]
    }

    pub fn denormalize(&self, task: usize, z: f64) -> f64 {
        z * self.std[task] + self.mean[task]
    }

    pub fn n_tasks(&self) -> usize {
        self.mean.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_items_split_six_two_two() {
        let s = split_dataset(10, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    }

    #[test]
    fn large_split_remainder_goes_to_train() {
        assert_eq!(
            split_sizes(46774, [0.6, 0.2, 0.2]).unwrap(),
            (28066, 9354, 9354)
        );
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(2, [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_dataset(4, [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_dataset(10, [0.6, 0.3, 0.2], 0).is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let a = split_dataset(50, [0.6, 0.2, 0.2], 9).unwrap();
        let b = split_dataset(50, [0.6, 0.2, 0.2], 9).unwrap();
        let c = split_dataset(50, [0.6, 0.2, 0.2], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_covering(n in 5usize..300, seed in any::<u64>()) {
            let s = split_dataset(n, [0.6, 0.2, 0.2], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn normalize_round_trips(ys in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let rows: Vec<Vec<f64>> = ys.iter().map(|&y| vec![y]).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            if let Ok(norm) = Normalizer::fit(&refs) {
                for &y in &ys {
                    let back = norm.denormalize(0, norm.normalize(0, y));
                    prop_assert!((back - y).abs() <= 1e-12 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn normalizer_examples() {
        let rows = [vec![0.0], vec![2.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let n = Normalizer::fit(&refs).unwrap();
        assert_eq!((n.mean[0], n.std[0]), (1.0, 1.0));
        assert_eq!(n.denormalize(0, n.normalize(0, 0.37)), 0.37);

        let flat = [vec![0.1, 1.0], vec![0.1, 2.0], vec![0.1, 3.0]];
        let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
        assert_eq!(
            Normalizer::fit(&refs),
            Err(TrainError::ConstantTarget { task: 0 })
        );
        assert!(Normalizer::fit(&refs[..1]).is_err());
    }
}
