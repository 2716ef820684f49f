//! Supervised multi-task training: splits, target normalization, the weighted
//! loss, Adam, early stopping and the epoch loop.
//!
//! Randomness: the model is initialized from `ModelConfig::seed`; mini-batch
//! order comes from `derive_seed(TrainConfig::seed, "batches")`. Splits are
//! supplied by the caller (see [`train`] for the default).

mod data;
mod optim;

pub use data::{split_dataset, split_sizes, Dataset, Entry, Normalizer, Property, Split};
pub use optim::{adam_step, AdamConfig, AdamState};

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::CrystalGraph;
use crate::model::{forward, predict_batch, GraphBatch, ModelConfig, ModelError, ModelParams, ParamVars};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("train config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("constant target: task {task} has zero variance on the training split")]
    ConstantTarget { task: usize },
    #[error("non-finite training state at epoch {epoch}, batch {batch}: {cause}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        cause: String,
    },
}

/// Independent sub-seed for a named random stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// One weight per task; `None` means all ones.
    pub loss_weights: Option<Vec<f64>>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    /// Standardize targets with training-split statistics. When off, the
    /// loss sees raw targets, which allows a constant target column.
    pub standardize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weights: None,
            batch_size: 32,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
            max_epochs: 100,
            patience: 10,
            split_ratios: [0.6, 0.2, 0.2],
            seed: 0,
            standardize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_tasks: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.l2 >= 0.0) {
            return bad("lr and eps must be positive, l2 non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {:?} must be positive and sum to 1", self.split_ratios));
        }
        let w = self.weights(n_tasks);
        if w.len() != n_tasks {
            return bad(format!("{} loss weights for {n_tasks} tasks", w.len()));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || !w.iter().any(|x| *x > 0.0) {
            return bad(format!("loss weights {w:?} must be non-negative with at least one positive"));
        }
        Ok(())
    }

    pub fn weights(&self, n_tasks: usize) -> Vec<f64> {
        self.loss_weights.clone().unwrap_or_else(|| vec![1.0; n_tasks])
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            l2: self.l2,
        }
    }
}

/// `(1/P) Σ_p w_p L_p`.
pub fn combine_losses(per_task: &[f64], weights: &[f64]) -> f64 {
    per_task.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>() / per_task.len() as f64
}

/// Per-task batch mean squared errors and their weighted combination, from
/// plain rows (`preds[b][p]`, `targets[b][p]`).
pub fn weighted_loss_values(preds: &[Vec<f64>], targets: &[Vec<f64>], weights: &[f64]) -> (f64, Vec<f64>) {
    let n = preds.len() as f64;
    let per_task: Vec<f64> = (0..weights.len())
        .map(|p| {
            preds
                .iter()
                .zip(targets)
                .map(|(y, t)| (y[p] - t[p]).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    (combine_losses(&per_task, weights), per_task)
}

pub struct LossVars {
    pub total: Var,
    pub per_task: Vec<Var>,
}

/// Records the weighted loss on the tape. `outputs[p]` and `targets[p]` are
/// `B x 1` columns of normalized values.
pub fn weighted_loss(
    tape: &mut Tape,
    outputs: &[Var],
    targets: &[Var],
    weights: &[f64],
) -> Result<LossVars, NumericsError> {
    let n = outputs.len() as f64;
    let mut per_task = Vec::with_capacity(outputs.len());
    let mut total: Option<Var> = None;
    for ((&y, &t), &w) in outputs.iter().zip(targets).zip(weights) {
        let diff = tape.sub(y, t)?;
        let sq = tape.square(diff)?;
        let lp = tape.mean_all(sq)?;
        per_task.push(lp);
        let term = tape.scale(lp, w / n)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(LossVars {
        total: total.expect("at least one task"),
        per_task,
    })
}

/// Outcome of feeding one epoch's validation metric to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Lower is better; only a strict improvement resets the counter.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(metric < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the epoch's mini-batches, weighted by batch size.
    pub train_loss: f64,
    pub train_mae: Vec<f64>,
    pub train_avg_mae: f64,
    pub val_mae: Vec<f64>,
    pub val_avg_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub property_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
}

impl RunHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// CSV with one row per epoch. Wall-clock time is left out so that reruns
    /// are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_avg_mae");
        for n in &self.property_names {
            out.push_str(&format!(",val_mae_{n}"));
        }
        out.push_str(",val_avg_mae\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}", r.epoch, r.train_loss, r.train_avg_mae));
            for m in &r.val_mae {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{}\n", r.val_avg_mae));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub normalizer: Normalizer,
    pub history: RunHistory,
    pub split: Split,
}

const EVAL_CHUNK: usize = 128;

/// Raw-unit predictions (`out[i][p]`) for the given entries.
pub fn predict_entries(
    dataset: &Dataset,
    indices: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    normalizer: &Normalizer,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let graphs: Vec<&CrystalGraph> = chunk.iter().map(|&i| dataset.entries[i].graph.as_ref()).collect();
        for pred in predict_batch(&graphs, params, cfg)? {
            out.push(
                pred.values
                    .iter()
                    .enumerate()
                    .map(|(p, &z)| normalizer.denormalize(p, z))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Per-task raw MAE over the given entries.
pub fn split_mae(
    dataset: &Dataset,
    indices: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    normalizer: &Normalizer,
) -> Result<Vec<f64>, ModelError> {
    let preds = predict_entries(dataset, indices, params, cfg, normalizer)?;
    Ok((0..dataset.n_tasks())
        .map(|p| {
            preds
                .iter()
                .zip(indices)
                .map(|(y, &i)| (y[p] - dataset.entries[i].targets[p]).abs())
                .sum::<f64>()
                / indices.len() as f64
        })
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Everything needed for one optimizer step on one mini-batch.
pub struct BatchStep {
    pub loss: f64,
    pub per_task: Vec<f64>,
    /// Gradients in [`ModelParams::named_tensors`] order.
    pub grads: Vec<Tensor>,
}

/// Forward and backward pass for a mini-batch. `targets` are normalized rows.
pub fn batch_gradients(
    tape: &mut Tape,
    graphs: &[&CrystalGraph],
    targets: &[Vec<f64>],
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &[f64],
) -> Result<BatchStep, ModelError> {
    tape.reset();
    let batch = GraphBatch::new(graphs, params.raw_atom_len(), params.bond_len(cfg.conv_variant))?;
    let vars = ParamVars::register(tape, params, true)?;
    let fwd = forward(tape, &batch, &vars, cfg)?;
    let mut tvars = Vec::with_capacity(weights.len());
    for p in 0..weights.len() {
        let col: Vec<f64> = targets.iter().map(|t| t[p]).collect();
        let t = Tensor::new(vec![col.len(), 1], col)?;
        tvars.push(tape.constant(t)?);
    }
    let loss = weighted_loss(tape, &fwd.outputs, &tvars, weights)?;
    let value = tape.value(loss.total).data()[0];
    let per_task = loss.per_task.iter().map(|&v| tape.value(v).data()[0]).collect();
    let mut g = tape.backward(loss.total)?;
    let grads = vars
        .flat
        .iter()
        .map(|&v| g.take(v).expect("trainable leaf has a gradient"))
        .collect();
    Ok(BatchStep {
        loss: value,
        per_task,
        grads,
    })
}

/// Mask of tensors that receive weight decay: weights, not biases.
pub fn decay_mask(params: &ModelParams) -> Vec<bool> {
    params
        .named_tensors()
        .iter()
        .map(|(n, _)| n.ends_with(".weight"))
        .collect()
}

/// Splits with `derive_seed(train_cfg.seed, "split")`, then trains.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let split = split_dataset(dataset.len(), train_cfg.split_ratios, derive_seed(train_cfg.seed, "split"))?;
    train_on_split(dataset, &split, model_cfg, train_cfg)
}

/// Mini-batch Adam over `split.train`, early-stopped on the average raw
/// validation MAE. Returns the parameters of the best epoch.
pub fn train_on_split(
    dataset: &Dataset,
    split: &Split,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let n_tasks = dataset.n_tasks();
    train_cfg.validate(n_tasks)?;
    model_cfg.validate()?;
    if model_cfg.n_tasks != n_tasks {
        return Err(TrainError::Config(format!(
            "model has {} heads but dataset has {n_tasks} tasks",
            model_cfg.n_tasks
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(TrainError::Data("train and validation splits must be nonempty".into()));
    }
    let first = &dataset.entries[split.train[0]].graph;
    let raw_atom_len = first.atom_len();
    let bond_len = dataset
        .entries
        .iter()
        .map(|e| e.graph.bond_len())
        .find(|&b| b > 0)
        .ok_or_else(|| TrainError::Data("no graph has any edges".into()))?;

    let rows: Vec<&[f64]> = split.train.iter().map(|&i| dataset.entries[i].targets.as_slice()).collect();
    let normalizer = if train_cfg.standardize_targets {
        Normalizer::fit(&rows)?
    } else {
        Normalizer::identity(n_tasks)
    };
    let norm_targets: Vec<Vec<f64>> = dataset
        .entries
        .iter()
        .map(|e| e.targets.iter().enumerate().map(|(p, &y)| normalizer.normalize(p, y)).collect())
        .collect();

    let weights = train_cfg.weights(n_tasks);
    let adam = train_cfg.adam();
    let mut params = ModelParams::init(model_cfg, raw_atom_len, bond_len)?;
    let decay = decay_mask(&params);
    let mut state = AdamState::new(&params.tensors());
    let mut best_params = params.clone();
    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, "batches"));
    let mut order = split.train.clone();
    let mut tape = Tape::new();
    let mut epochs = Vec::new();

    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let ctx = |cause: String| TrainError::NonFinite {
                epoch,
                batch: b,
                cause,
            };
            let graphs: Vec<&CrystalGraph> = chunk.iter().map(|&i| dataset.entries[i].graph.as_ref()).collect();
            let targets: Vec<Vec<f64>> = chunk.iter().map(|&i| norm_targets[i].clone()).collect();
            let step = match batch_gradients(&mut tape, &graphs, &targets, &params, model_cfg, &weights) {
                Ok(s) => s,
                Err(ModelError::Numerics(e @ NumericsError::NonFinite { .. })) => return Err(ctx(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            if !step.loss.is_finite() {
                return Err(ctx(format!("loss {}", step.loss)));
            }
            loss_sum += step.loss * chunk.len() as f64;
            let grad_refs: Vec<&Tensor> = step.grads.iter().collect();
            adam_step(&mut params.tensors_mut(), &grad_refs, &decay, &mut state, &adam);
            if params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(ctx("parameter update".into()));
            }
        }
        let train_mae = split_mae(dataset, &split.train, &params, model_cfg, &normalizer)?;
        let val_mae = split_mae(dataset, &split.val, &params, model_cfg, &normalizer)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            train_avg_mae: mean(&train_mae),
            train_mae,
            val_avg_mae: mean(&val_mae),
            val_mae,
        };
        let decision = stopper.observe(epoch, record.val_avg_mae);
        epochs.push(record);
        match decision {
            StopDecision::Improved => best_params = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let best_epoch = stopper.best().map(|(e, _)| e).expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        normalizer,
        history: RunHistory {
            property_names: dataset.property_names(),
            epochs,
            best_epoch,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        split: split.clone(),
    })
}

/// Wraps graphs and raw targets into a dataset with generic property names.
pub fn dataset_from_graphs(graphs: Vec<CrystalGraph>, targets: Vec<Vec<f64>>, names: &[&str]) -> Result<Dataset, TrainError> {
    let entries = graphs
        .into_iter()
        .zip(targets)
        .map(|(g, t)| Entry {
            graph: Arc::new(g),
            targets: t,
        })
        .collect();
    let properties = names
        .iter()
        .map(|n| Property {
            name: n.to_string(),
            unit: String::new(),
        })
        .collect();
    Dataset::new(entries, properties)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, CrystalStructure, GraphConfig};
    use crate::model::ConvVariant;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        assert!((combine_losses(&[0.2, 0.4], &[1.0, 1.0]) - 0.3).abs() < 1e-15);
        assert!((combine_losses(&[0.2, 0.4], &[2.0, 1.0]) - 0.4).abs() < 1e-15);
        let rows = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let (l, per) = weighted_loss_values(&rows, &rows, &[1.0, 1.0]);
        assert_eq!(l, 0.0);
        assert_eq!(per, vec![0.0, 0.0]);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let preds = vec![vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.7, 2.2]];
        let targets = vec![vec![0.1, -0.6], vec![1.0, 0.9], vec![0.2, 2.0]];
        let w = [3.0, 0.5];
        let mut tape = Tape::new();
        let mut cols = |rows: &Vec<Vec<f64>>| -> Vec<Var> {
            (0..2)
                .map(|p| {
                    let c: Vec<f64> = rows.iter().map(|r| r[p]).collect();
                    tape.constant(Tensor::new(vec![3, 1], c).unwrap()).unwrap()
                })
                .collect()
        };
        let y = cols(&preds);
        let t = cols(&targets);
        let lv = weighted_loss(&mut tape, &y, &t, &w).unwrap();
        let (expect, per) = weighted_loss_values(&preds, &targets, &w);
        assert!((tape.value(lv.total).data()[0] - expect).abs() < 1e-15);
        for (v, e) in lv.per_task.iter().zip(per) {
            assert!((tape.value(*v).data()[0] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn early_stopping_patience_three() {
        let mut es = EarlyStopping::new(3);
        let metrics = [1.0, 1.5, 1.2, 1.0, 0.9];
        let mut stopped = None;
        for (i, &m) in metrics.iter().enumerate() {
            if es.observe(i + 1, m) == StopDecision::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(4));
        assert_eq!(es.best(), Some((1, 1.0)));
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_eq!(derive_seed(7, "split"), derive_seed(7, "split"));
        assert_ne!(derive_seed(7, "split"), derive_seed(7, "batches"));
        assert_ne!(derive_seed(7, "split"), derive_seed(8, "split"));
    }

    fn random_structure(rng: &mut ChaCha8Rng, id: usize) -> CrystalStructure {
        let n = rng.gen_range(1..4);
        let a: f64 = rng.gen_range(3.0..4.5);
        CrystalStructure {
            id: format!("s{id}"),
            lattice: [[a, 0.0, 0.0], [0.2, a, 0.0], [0.0, 0.1, a]],
            frac_coords: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            atomic_numbers: (0..n).map(|_| rng.gen_range(1..9)).collect(),
        }
    }

    fn small_setup(n: usize, seed: u64) -> (Dataset, ModelConfig) {
        let gcfg = GraphConfig {
            cutoff: 5.0,
            max_neighbors: 6,
            gauss_step: 0.5,
            z_max: 10,
            ..GraphConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graphs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            let s = random_structure(&mut rng, i);
            let zbar = s.atomic_numbers.iter().sum::<u32>() as f64 / s.n_atoms() as f64;
            targets.push(vec![zbar, s.volume() / s.n_atoms() as f64]);
            graphs.push(build_graph(&s, &gcfg, None).unwrap());
        }
        let ds = dataset_from_graphs(graphs, targets, &["a", "b"]).unwrap();
        let mcfg = ModelConfig {
            conv_variant: ConvVariant::Gated,
            n_conv: 1,
            atom_len: 6,
            hidden_len: 5,
            n_hidden_per_task: 1,
            n_tasks: 2,
            seed: 3,
        };
        (ds, mcfg)
    }

    fn loss_and_grads(ds: &Dataset, mcfg: &ModelConfig, params: &ModelParams, w: &[f64]) -> BatchStep {
        let graphs: Vec<&CrystalGraph> = ds.entries.iter().map(|e| e.graph.as_ref()).collect();
        let targets: Vec<Vec<f64>> = ds.entries.iter().map(|e| e.targets.iter().map(|y| y / 4.0).collect()).collect();
        batch_gradients(&mut Tape::new(), &graphs, &targets, params, mcfg, w).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn loss_is_linear_in_weights(seed in any::<u64>(), w0 in 0.1f64..5.0, w1 in 0.1f64..5.0) {
            let (ds, mcfg) = small_setup(4, seed);
            let params = ModelParams::init(&mcfg, 10, ds.entries[0].graph.bond_len().max(11)).unwrap();
            let a = loss_and_grads(&ds, &mcfg, &params, &[w0, w1]);
            let b = loss_and_grads(&ds, &mcfg, &params, &[2.0 * w0, 2.0 * w1]);
            prop_assert!((b.loss - 2.0 * a.loss).abs() <= 1e-12 * a.loss.abs().max(1.0));
            for (ga, gb) in a.grads.iter().zip(&b.grads) {
                for (x, y) in ga.data().iter().zip(gb.data()) {
                    prop_assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn zero_weight_silences_head_and_rescales_trunk() {
        let (ds, mcfg) = small_setup(5, 11);
        let params = ModelParams::init(&mcfg, 10, 11).unwrap();
        let full = loss_and_grads(&ds, &mcfg, &params, &[1.0, 0.0]);
        for i in params.head_param_range(1) {
            assert!(full.grads[i].data().iter().all(|&g| g == 0.0));
        }

        // same trunk and head 0, trained on task "a" alone
        let solo_ds = ds.select_tasks(&["a".to_string()]).unwrap();
        let solo_cfg = ModelConfig { n_tasks: 1, ..mcfg.clone() };
        let mut solo_params = params.clone();
        solo_params.heads.truncate(1);
        let solo = loss_and_grads(&solo_ds, &solo_cfg, &solo_params, &[1.0]);
        // with two tasks the loss divides by 2
        assert!((full.loss - solo.loss / 2.0).abs() < 1e-15);
        for i in 0..params.trunk_len() {
            for (x, y) in full.grads[i].data().iter().zip(solo.grads[i].data()) {
                assert!((x - y / 2.0).abs() <= 1e-14 * y.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn small_lr_full_batch_step_decreases_loss() {
        let (ds, mcfg) = small_setup(6, 5);
        let mut params = ModelParams::init(&mcfg, 10, 11).unwrap();
        let w = [1.0, 1.0];
        let before = loss_and_grads(&ds, &mcfg, &params, &w);
        let cfg = AdamConfig { lr: 1e-4, ..AdamConfig::default() };
        let refs: Vec<&Tensor> = before.grads.iter().collect();
        let mut st = AdamState::new(&params.tensors());
        let mask = decay_mask(&params);
        adam_step(&mut params.tensors_mut(), &refs, &mask, &mut st, &cfg);
        let after = loss_and_grads(&ds, &mcfg, &params, &w);
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
    }

    #[test]
    fn training_is_deterministic_and_returns_best_epoch() {
        let (ds, mcfg) = small_setup(30, 2);
        let tcfg = TrainConfig {
            batch_size: 8,
            max_epochs: 8,
            patience: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&ds, &mcfg, &tcfg).unwrap();
        let b = train(&ds, &mcfg, &tcfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert!(a.history.epochs.len() <= 8);

        let min = a.history.epochs.iter().map(|r| r.val_avg_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history.best().val_avg_mae, min);
        let recomputed = split_mae(&ds, &a.split.val, &a.params, &mcfg, &a.normalizer).unwrap();
        assert_eq!(mean(&recomputed), min);
    }

    #[test]
    fn non_finite_loss_reports_epoch_and_batch() {
        let (ds, mcfg) = small_setup(12, 8);
        let tcfg = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            lr: 1e200,
            ..TrainConfig::default()
        };
        match train(&ds, &mcfg, &tcfg) {
            Err(TrainError::NonFinite { epoch, batch, .. }) => {
                assert!(epoch >= 1);
                assert!(batch < 3);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = RunHistory {
            property_names: vec!["a".into(), "b".into()],
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_mae: vec![1.0, 2.0],
                train_avg_mae: 1.5,
                val_mae: vec![0.25, 0.75],
                val_avg_mae: 0.5,
            }],
            best_epoch: 1,
            wall_clock_secs: 3.0,
        };
        assert_eq!(
            h.to_csv(),
            "epoch,train_loss,train_avg_mae,val_mae_a,val_mae_b,val_avg_mae\n1,0.5,1.5,0.25,0.75,0.5\n"
        );
    }
}
