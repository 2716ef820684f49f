//! Exhaustive hyperparameter grid with early-stopped trials.
//!
//! Configurations are enumerated lexicographically over
//! `(n_conv, atom_len, hidden_len, n_hidden, l2, lr, weights)`, the last
//! field varying fastest. Loss-weight tuples are all of `levels^P` whose
//! smallest entry is the smallest level, so ratios are not repeated at
//! different scales.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::graph::json_hash;
use crate::io::SCHEMA_VERSION;
use crate::model::ModelConfig;
use crate::training::{derive_seed, split_dataset, train_on_split, Dataset, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub n_conv: Vec<usize>,
    pub atom_len: Vec<usize>,
    pub hidden_len: Vec<usize>,
    pub n_hidden: Vec<usize>,
    pub l2: Vec<f64>,
    pub lr: Vec<f64>,
    pub weight_levels: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_conv: vec![1, 2, 3, 4, 5],
            atom_len: vec![16, 32, 64, 128],
            hidden_len: vec![16, 32, 64, 128],
            n_hidden: vec![1, 2, 3, 4],
            l2: vec![0.0, 1e-6, 1e-4],
            lr: vec![1e-4, 1e-3, 1e-2, 1e-1],
            weight_levels: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        }
    }
}

/// Weight tuples over `levels^n_tasks` whose minimum equals the smallest
/// level, in lexicographic order.
pub fn weight_tuples(levels: &[f64], n_tasks: usize) -> Vec<Vec<f64>> {
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if n_tasks == 1 || levels.is_empty() {
        return vec![vec![levels.first().copied().unwrap_or(1.0); n_tasks]];
    }
    let lo = levels[0];
    let mut out = Vec::new();
    let total = levels.len().pow(n_tasks as u32);
    for mut k in 0..total {
        let mut t = vec![0.0; n_tasks];
        for slot in t.iter_mut().rev() {
            *slot = levels[k % levels.len()];
            k /= levels.len();
        }
        if t.iter().any(|&w| w == lo) {
            out.push(t);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_conv: usize,
    pub atom_len: usize,
    pub hidden_len: usize,
    pub n_hidden: usize,
    pub l2: f64,
    pub lr: f64,
    pub weights: Vec<f64>,
}

/// All configurations in enumeration order.
pub fn enumerate_grid(grid: &GridSpec, n_tasks: usize) -> Vec<TrialConfig> {
    let weights = weight_tuples(&grid.weight_levels, n_tasks);
    let mut out = Vec::new();
    for &n_conv in &grid.n_conv {
        for &atom_len in &grid.atom_len {
            for &hidden_len in &grid.hidden_len {
                for &n_hidden in &grid.n_hidden {
                    for &l2 in &grid.l2 {
                        for &lr in &grid.lr {
                            for w in &weights {
                                out.push(TrialConfig {
                                    n_conv,
                                    atom_len,
                                    hidden_len,
                                    n_hidden,
                                    l2,
                                    lr,
                                    weights: w.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub trial: usize,
    pub config_hash: String,
    pub config: TrialConfig,
    pub val_avg_mae: Option<f64>,
    pub epochs_run: Option<usize>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub schema_version: u32,
    pub total_configs: usize,
    pub trials: Vec<TrialLog>,
    pub best: TrialLog,
    pub best_model: ModelConfig,
    pub best_train: TrainConfig,
}

impl GridResult {
    pub fn trial_csv(&self) -> String {
        let mut out =
            String::from("trial,config_hash,n_conv,atom_len,hidden_len,n_hidden,l2,lr,weights,val_avg_mae,epochs_run,error\n");
        for t in &self.trials {
            let c = &t.config;
            let w: Vec<String> = c.weights.iter().map(f64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                t.trial,
                t.config_hash,
                c.n_conv,
                c.atom_len,
                c.hidden_len,
                c.n_hidden,
                c.l2,
                c.lr,
                w.join(";"),
                t.val_avg_mae.map_or(String::new(), |v| v.to_string()),
                t.epochs_run.map_or(String::new(), |v| v.to_string()),
                t.error.as_deref().unwrap_or("").replace([',', '\n'], " "),
            ));
        }
        out
    }
}

fn configs_for(base_model: &ModelConfig, base_train: &TrainConfig, c: &TrialConfig, seed: u64) -> (ModelConfig, TrainConfig) {
    (
        ModelConfig {
            n_conv: c.n_conv,
            atom_len: c.atom_len,
            hidden_len: c.hidden_len,
            n_hidden_per_task: c.n_hidden,
            seed: derive_seed(seed, "init"),
            ..base_model.clone()
        },
        TrainConfig {
            l2: c.l2,
            lr: c.lr,
            loss_weights: Some(c.weights.clone()),
            seed,
            ..base_train.clone()
        },
    )
}

/// Trains the first `budget` configurations on one shared split and keeps
/// the lowest average validation MAE (earliest wins ties). Trial `t` seeds
/// its initialization and batch order from `seed ^ t`.
pub fn grid_search(
    dataset: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &GridSpec,
    budget: usize,
    seed: u64,
) -> Result<GridResult, ExperimentError> {
    if budget == 0 {
        return Err(ExperimentError::Spec("budget must be >= 1".into()));
    }
    let configs = enumerate_grid(grid, dataset.n_tasks());
    if configs.is_empty() {
        return Err(ExperimentError::Spec("grid is empty".into()));
    }
    let split = split_dataset(dataset.len(), base_train.split_ratios, derive_seed(seed, "split"))
        .map_err(|e| ExperimentError::Spec(e.to_string()))?;
    let base_model = ModelConfig {
        n_tasks: dataset.n_tasks(),
        ..base_model.clone()
    };
    let n = budget.min(configs.len());
    let trials: Vec<TrialLog> = configs[..n]
        .par_iter()
        .enumerate()
        .map(|(t, c)| {
            let (m, tr) = configs_for(&base_model, base_train, c, seed ^ t as u64);
            let mut log = TrialLog {
                trial: t,
                config_hash: json_hash(&(&m, &tr)),
                config: c.clone(),
                val_avg_mae: None,
                epochs_run: None,
                best_epoch: None,
                error: None,
            };
            match train_on_split(dataset, &split, &m, &tr) {
                Ok(out) => {
                    log.val_avg_mae = Some(out.history.best().val_avg_mae);
                    log.epochs_run = Some(out.history.epochs.len());
                    log.best_epoch = Some(out.history.best_epoch);
                }
                Err(e) => log.error = Some(e.to_string()),
            }
            log
        })
        .collect();

    let mut best: Option<&TrialLog> = None;
    for t in &trials {
        if let Some(v) = t.val_avg_mae {
            if best.map_or(true, |b| v < b.val_avg_mae.expect("scored")) {
                best = Some(t);
            }
        }
    }
    let best = match best {
        Some(b) => b.clone(),
        None => {
            return Err(ExperimentError::AllTrialsFailed(
                trials
                    .iter()
                    .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("?")))
                    .collect(),
            ))
        }
    };
    let (best_model, best_train) = configs_for(&base_model, base_train, &best.config, seed ^ best.trial as u64);
    Ok(GridResult {
        schema_version: SCHEMA_VERSION,
        total_configs: configs.len(),
        trials,
        best,
        best_model,
        best_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::{tiny_dataset, tiny_spec};

    fn small_grid() -> GridSpec {
        GridSpec {
            n_conv: vec![1],
            atom_len: vec![4],
            hidden_len: vec![4],
            n_hidden: vec![1],
            l2: vec![0.0],
            lr: vec![1e-2, 1e-4],
            weight_levels: vec![1.0],
        }
    }

    #[test]
    fn weight_tuples_normalized_to_min_one() {
        let t = weight_tuples(&[1.0, 2.0, 3.0], 2);
        assert_eq!(
            t,
            vec![vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 3.0], vec![2.0, 1.0], vec![3.0, 1.0]]
        );
        let levels: Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(weight_tuples(&levels, 2).len(), 13);
        assert_eq!(weight_tuples(&levels, 1), vec![vec![1.0]]);
    }

    #[test]
    fn default_grid_order_is_lexicographic() {
        let g = enumerate_grid(&GridSpec::default(), 1);
        assert_eq!(g.len(), 5 * 4 * 4 * 4 * 3 * 4);
        assert_eq!((g[0].n_conv, g[0].lr), (1, 1e-4));
        assert_eq!((g[1].n_conv, g[1].lr), (1, 1e-3));
        assert_eq!(g.last().unwrap().n_conv, 5);
    }

    #[test]
    fn two_configs_two_trials_best_is_lowest() {
        let ds = tiny_dataset(30).select_tasks(&["y1".into()]).unwrap();
        let spec = tiny_spec(&["y1"]);
        let r = grid_search(&ds, &spec.model, &spec.train, &small_grid(), 10, 3).unwrap();
        assert_eq!(r.trials.len(), 2);
        let min = r.trials.iter().filter_map(|t| t.val_avg_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best.val_avg_mae, Some(min));
        assert_eq!(r.trial_csv().lines().count(), 3);
        let again = grid_search(&ds, &spec.model, &spec.train, &small_grid(), 10, 3).unwrap();
        assert_eq!(r.trial_csv(), again.trial_csv());
    }

    #[test]
    fn budget_caps_trials() {
        let ds = tiny_dataset(30).select_tasks(&["y1".into()]).unwrap();
        let spec = tiny_spec(&["y1"]);
        let grid = GridSpec {
            lr: vec![1e-2, 2e-2, 3e-2, 4e-2, 5e-2, 6e-2, 7e-2, 8e-2, 9e-2, 1e-1],
            n_hidden: (0..10).collect(),
            ..small_grid()
        };
        assert_eq!(enumerate_grid(&grid, 1).len(), 100);
        let train = TrainConfig { max_epochs: 1, ..spec.train };
        let r = grid_search(&ds, &spec.model, &train, &grid, 5, 0).unwrap();
        assert_eq!(r.trials.len(), 5);
        assert!(r.trials.iter().all(|t| t.epochs_run == Some(1)));
    }

    #[test]
    fn all_failures_are_reported() {
        let ds = tiny_dataset(30).select_tasks(&["y1".into()]).unwrap();
        let spec = tiny_spec(&["y1"]);
        let grid = GridSpec { atom_len: vec![0], ..small_grid() };
        match grid_search(&ds, &spec.model, &spec.train, &grid, 5, 0) {
            Err(ExperimentError::AllTrialsFailed(c)) => assert_eq!(c.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
