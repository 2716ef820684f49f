//! Multi-seed experiments: joint versus single-task runs on paired splits,
//! training-fraction sweeps, grid search, and synthetic data.
//!
//! Seeds: run `s` of an experiment uses `seed = base_seed + s`. The split
//! comes from `derive_seed(seed, "split")` and model initialization from
//! `derive_seed(seed, "init")`, so every method sees the same indices and the
//! same trunk initialization within a seed.

mod grid;
mod synth;

pub use grid::{enumerate_grid, grid_search, GridResult, GridSpec, TrialConfig, TrialLog};
pub use synth::{generate_synthetic, synthesize, SynthData, SynthSpec, SYNTH_MANIFEST};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{IoError, SCHEMA_VERSION};
use crate::metrics::{evaluate, improvement_pct, EvalOptions, EvalReport};
use crate::model::ModelConfig;
use crate::training::{derive_seed, split_dataset, split_sizes, train_on_split, Dataset, Split, TrainConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("seed {seed}, method {method}: {cause}")]
    Run {
        seed: u64,
        method: String,
        cause: String,
        /// Runs that completed before the failure was reported.
        partial: Vec<SeedRun>,
    },
    #[error("all {} trials failed:\n  {}", .0.len(), .0.join("\n  "))]
    AllTrialsFailed(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Properties trained jointly.
    pub tasks: Vec<String>,
    /// Also train one single-task model per property.
    pub single_task_baselines: bool,
    pub n_seeds: usize,
    pub base_seed: u64,
    /// Fraction of the whole dataset used for training (a prefix of the
    /// shuffled training pool); `None` uses the full pool.
    pub train_fraction: Option<f64>,
    /// Fractions for [`sweep_train_fraction`].
    pub fractions: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub band_gap: Option<String>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            single_task_baselines: true,
            n_seeds: 5,
            base_seed: 0,
            train_fraction: None,
            fractions: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            band_gap: None,
        }
    }
}

/// A task subset trained as one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub tasks: Vec<String>,
}

impl ExperimentSpec {
    pub fn validate(&self, dataset: &Dataset) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(m));
        if self.tasks.is_empty() {
            return bad("task subset is empty".into());
        }
        for t in &self.tasks {
            if dataset.property_index(t).is_none() {
                return bad(format!("unknown property {t:?}"));
            }
        }
        if self.n_seeds == 0 {
            return bad("n_seeds must be >= 1".into());
        }
        if let Some(w) = &self.train.loss_weights {
            if w.len() != self.tasks.len() {
                return bad(format!("{} loss weights for {} tasks", w.len(), self.tasks.len()));
            }
        }
        Ok(())
    }

    /// Joint method first, then single-task baselines in task order.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![Method {
            name: self.tasks.join("+"),
            tasks: self.tasks.clone(),
        }];
        if self.single_task_baselines && self.tasks.len() > 1 {
            out.extend(self.tasks.iter().map(|t| Method {
                name: t.clone(),
                tasks: vec![t.clone()],
            }));
        }
        out
    }

    fn weights_for(&self, method: &Method) -> Option<Vec<f64>> {
        self.train.loss_weights.as_ref().map(|w| {
            method
                .tasks
                .iter()
                .map(|t| w[self.tasks.iter().position(|x| x == t).expect("task in spec")])
                .collect()
        })
    }
}

/// Training-set size for a fraction of `n`.
pub fn fraction_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Split for one seed, with the training set cut to a prefix of the pool
/// when `fraction` is given. Prefixes nest across fractions.
pub fn seed_split(n: usize, ratios: [f64; 3], seed: u64, fraction: Option<f64>) -> Result<Split, ExperimentError> {
    let mut split = split_dataset(n, ratios, derive_seed(seed, "split"))
        .map_err(|e| ExperimentError::Spec(e.to_string()))?;
    if let Some(f) = fraction {
        if !(f > 0.0 && f <= ratios[0] + 1e-9) {
            return Err(ExperimentError::Spec(format!(
                "train fraction {f} must lie in (0, {}]",
                ratios[0]
            )));
        }
        let k = fraction_size(n, f).min(split.train.len());
        if k == 0 {
            return Err(ExperimentError::Spec(format!("train fraction {f} of {n} entries is empty")));
        }
        split.train.truncate(k);
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub method: String,
    pub fraction: Option<f64>,
    pub train_size: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Test-split report.
    pub report: EvalReport,
}

fn run_one(
    dataset: &Dataset,
    spec: &ExperimentSpec,
    method: &Method,
    seed: u64,
    fraction: Option<f64>,
) -> Result<SeedRun, String> {
    let split = seed_split(dataset.len(), spec.train.split_ratios, seed, fraction).map_err(|e| e.to_string())?;
    let ds = dataset.select_tasks(&method.tasks).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        n_tasks: method.tasks.len(),
        seed: derive_seed(seed, "init"),
        ..spec.model.clone()
    };
    let train = TrainConfig {
        loss_weights: spec.weights_for(method),
        seed,
        ..spec.train.clone()
    };
    let out = train_on_split(&ds, &split, &model, &train).map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        split_name: "test".into(),
        band_gap_task: spec.band_gap.as_ref().and_then(|g| ds.property_index(g)),
        baseline: None,
    };
    let report = evaluate(&ds, &split.test, &out.params, &model, &out.normalizer, &opts).map_err(|e| e.to_string())?;
    Ok(SeedRun {
        seed,
        method: method.name.clone(),
        fraction,
        train_size: split.train.len(),
        best_epoch: out.history.best_epoch,
        epochs_run: out.history.epochs.len(),
        report,
    })
}

/// Every (seed, method) run, in seed-major order. Runs execute in parallel;
/// results are joined in that fixed order.
fn run_grid_of_runs(dataset: &Dataset, spec: &ExperimentSpec, fraction: Option<f64>) -> Result<Vec<SeedRun>, ExperimentError> {
    let methods = spec.methods();
    let jobs: Vec<(u64, &Method)> = (0..spec.n_seeds as u64)
        .flat_map(|s| methods.iter().map(move |m| (spec.base_seed + s, m)))
        .collect();
    let results: Vec<Result<SeedRun, String>> = jobs
        .par_iter()
        .map(|(seed, m)| run_one(dataset, spec, m, *seed, fraction))
        .collect();
    let mut runs = Vec::new();
    let mut failure = None;
    for ((seed, m), r) in jobs.iter().zip(results) {
        match r {
            Ok(run) => runs.push(run),
            Err(cause) if failure.is_none() => failure = Some((*seed, m.name.clone(), cause)),
            Err(_) => {}
        }
    }
    match failure {
        None => Ok(runs),
        Some((seed, method, cause)) => Err(ExperimentError::Run {
            seed,
            method,
            cause,
            partial: runs,
        }),
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One method's per-task test MAE summarized across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub tasks: Vec<String>,
    pub fraction: Option<f64>,
    pub n_seeds: usize,
    pub train_size: usize,
    pub mae_mean: Vec<f64>,
    pub mae_std: Vec<f64>,
    pub avg_mae_mean: f64,
    pub avg_mae_std: f64,
}

pub fn aggregate(runs: &[SeedRun], methods: &[Method]) -> Vec<AggregateRow> {
    methods
        .iter()
        .filter_map(|m| {
            let mine: Vec<&SeedRun> = runs.iter().filter(|r| r.method == m.name).collect();
            let first = mine.first()?;
            let per_task: Vec<(f64, f64)> = (0..m.tasks.len())
                .map(|p| mean_std(&mine.iter().map(|r| r.report.mae[p]).collect::<Vec<_>>()))
                .collect();
            let (avg_mae_mean, avg_mae_std) = mean_std(&mine.iter().map(|r| r.report.avg_mae).collect::<Vec<_>>());
            Some(AggregateRow {
                method: m.name.clone(),
                tasks: m.tasks.clone(),
                fraction: first.fraction,
                n_seeds: mine.len(),
                train_size: first.train_size,
                mae_mean: per_task.iter().map(|x| x.0).collect(),
                mae_std: per_task.iter().map(|x| x.1).collect(),
                avg_mae_mean,
                avg_mae_std,
            })
        })
        .collect()
}

/// Joint-versus-single comparison for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub task: String,
    pub single_mae: f64,
    pub joint_mae: f64,
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
    pub improvements: Vec<Improvement>,
    /// Average of single-task mean MAEs against the joint average MAE.
    pub avg_improvement: Option<Improvement>,
}

fn improvements(spec: &ExperimentSpec, rows: &[AggregateRow]) -> (Vec<Improvement>, Option<Improvement>) {
    let joint = match rows.first() {
        Some(j) if j.tasks.len() > 1 => j,
        _ => return (Vec::new(), None),
    };
    let mut out = Vec::new();
    for (p, t) in spec.tasks.iter().enumerate() {
        if let Some(single) = rows.iter().find(|r| r.tasks.len() == 1 && &r.tasks[0] == t) {
            out.push(Improvement {
                task: t.clone(),
                single_mae: single.mae_mean[0],
                joint_mae: joint.mae_mean[p],
                improvement_pct: improvement_pct(single.mae_mean[0], joint.mae_mean[p]),
            });
        }
    }
    let avg = (out.len() == spec.tasks.len() && !out.is_empty()).then(|| {
        let base = out.iter().map(|i| i.single_mae).sum::<f64>() / out.len() as f64;
        Improvement {
            task: "average".into(),
            single_mae: base,
            joint_mae: joint.avg_mae_mean,
            improvement_pct: improvement_pct(base, joint.avg_mae_mean),
        }
    });
    (out, avg)
}

/// Trains every method for every seed and aggregates test MAE.
pub fn run_experiment(dataset: &Dataset, spec: &ExperimentSpec) -> Result<ExperimentReport, ExperimentError> {
    spec.validate(dataset)?;
    let runs = run_grid_of_runs(dataset, spec, spec.train_fraction)?;
    let aggregate = aggregate(&runs, &spec.methods());
    let (improvements, avg_improvement) = improvements(spec, &aggregate);
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        runs,
        aggregate,
        improvements,
        avg_improvement,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Per-task mean and std columns for every method, one row per method
/// (and fraction, for sweeps).
pub fn aggregate_csv(tasks: &[String], rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,fraction,train_size,n_seeds");
    for t in tasks {
        out.push_str(&format!(",mae_{t}_mean,mae_{t}_std"));
    }
    out.push_str(",avg_mae_mean,avg_mae_std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.method, opt(r.fraction), r.train_size, r.n_seeds));
        for t in tasks {
            match r.tasks.iter().position(|x| x == t) {
                Some(p) => out.push_str(&format!(",{},{}", r.mae_mean[p], r.mae_std[p])),
                None => out.push_str(",,"),
            }
        }
        out.push_str(&format!(",{},{}\n", r.avg_mae_mean, r.avg_mae_std));
    }
    out
}

impl ExperimentReport {
    pub fn aggregate_csv(&self) -> String {
        aggregate_csv(&self.spec.tasks, &self.aggregate)
    }

    /// Single versus joint MAE with the relative improvement, per task and
    /// on average.
    pub fn improvement_csv(&self) -> String {
        let mut out = String::from("task,single_mae,joint_mae,improvement_pct\n");
        for i in self.improvements.iter().chain(&self.avg_improvement) {
            out.push_str(&format!("{},{},{},{}\n", i.task, i.single_mae, i.joint_mae, i.improvement_pct));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub runs: Vec<SeedRun>,
    /// One row per fraction per method, fraction-major.
    pub rows: Vec<AggregateRow>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        aggregate_csv(&self.spec.tasks, &self.rows)
    }
}

/// Trains on nested prefixes of each seed's training pool while validation
/// and test splits stay fixed.
pub fn sweep_train_fraction(dataset: &Dataset, spec: &ExperimentSpec) -> Result<SweepReport, ExperimentError> {
    spec.validate(dataset)?;
    if spec.fractions.is_empty() {
        return Err(ExperimentError::Spec("no fractions to sweep".into()));
    }
    let (pool, _, _) = split_sizes(dataset.len(), spec.train.split_ratios).map_err(|e| ExperimentError::Spec(e.to_string()))?;
    for &f in &spec.fractions {
        if !(f > 0.0 && f <= spec.train.split_ratios[0] + 1e-9) || fraction_size(dataset.len(), f).min(pool) == 0 {
            return Err(ExperimentError::Spec(format!(
                "fraction {f} must give a nonempty training set within the {} pool",
                spec.train.split_ratios[0]
            )));
        }
    }
    let methods = spec.methods();
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &f in &spec.fractions {
        let r = run_grid_of_runs(dataset, spec, Some(f))?;
        rows.extend(aggregate(&r, &methods));
        runs.extend(r);
    }
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        runs,
        rows,
    })
}
