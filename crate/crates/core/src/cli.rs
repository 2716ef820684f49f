//! The `crystalmt` command line.
//!
//! Every subcommand prints one JSON object to stdout on success. Failures
//! print `{"schema_version", "status": "error", "kind", "message"}` to
//! stderr and exit 1, or 2 for usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::experiments::{
    generate_synthetic, grid_search, run_experiment, sweep_train_fraction, ExperimentSpec, GridSpec, SynthSpec,
};
use crate::graph::{ElementTable, GraphConfig};
use crate::io::{
    cache_dir, read_json, write_json, write_text, CacheMode, Checkpoint, LoadOptions, LoadedDataset, RunConfig,
    RunManifest, CODE_VERSION, SCHEMA_VERSION,
};
use crate::metrics::{evaluate, EvalOptions};
use crate::training::{derive_seed, train, Dataset};

#[derive(Parser, Debug)]
#[command(name = "crystalmt", version, about = "Multi-task crystal graph networks for materials properties")]
struct Cli {
    /// Worker threads for featurization and parallel runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build and cache every graph of a dataset.
    Graphify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model and write checkpoint, history and manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Run manifest holding the split; defaults to the checkpoint's directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint and single-task runs over several seeds.
    Experiment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training-fraction sweep with fixed validation and test splits.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search with early stopping.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

/// Experiment and sweep spec file: graph settings plus the experiment.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentFile {
    pub graph: GraphConfig,
    pub element_table: Option<PathBuf>,
    pub experiment: ExperimentSpec,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<serde_json::Value, Failure>;

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            report_error(&Failure::new("usage", e.render().to_string().trim_end()));
            return 2;
        }
    };
    let result = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| run(cli.command, cli.jobs)),
            Err(e) => Err(Failure::new("runtime", e)),
        },
        None => run(cli.command, None),
    };
    match result {
        Ok(v) => {
            // a closed pipe on stdout is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("json"));
            0
        }
        Err(f) => {
            report_error(&f);
            1
        }
    }
}

fn report_error(f: &Failure) {
    let v = json!({
        "schema_version": SCHEMA_VERSION,
        "status": "error",
        "kind": f.kind,
        "message": f.message,
    });
    let _ = writeln!(std::io::stderr(), "{}", serde_json::to_string(&v).expect("json"));
}

fn config_or_default<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        Some(p) => read_json(p).map_err(|e| Failure::new("config", e)),
        None => Ok(T::default()),
    }
}

fn load(data: &Path, graph: &GraphConfig, table: Option<&Path>, jobs: Option<usize>) -> Result<LoadedDataset, Failure> {
    let element_table = match table {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::new("io", format!("{}: {e}", p.display())))?;
            Some(ElementTable::parse(&text).map_err(|e| Failure::new("config", e))?)
        }
        None => None,
    };
    crate::io::load_dataset(
        data,
        graph,
        &LoadOptions {
            cache: CacheMode::Default,
            element_table,
            jobs,
        },
    )
    .map_err(|e| Failure::new("dataset", e))
}

fn select(ds: Dataset, tasks: &[String]) -> Result<Dataset, Failure> {
    if tasks.is_empty() {
        Ok(ds)
    } else {
        ds.select_tasks(tasks).map_err(|e| Failure::new("config", e))
    }
}

fn ok(command: &str, out: &Path, files: &[&str], extra: serde_json::Value) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "status": "ok",
        "command": command,
        "out": out.display().to_string(),
        "files": files,
        "result": extra,
    })
}

fn io_fail(e: crate::io::IoError) -> Failure {
    Failure::new("io", e)
}

fn run(command: Command, jobs: Option<usize>) -> Outcome {
    match command {
        Command::Synth { spec, out, seed } => {
            let mut spec: SynthSpec = config_or_default(spec.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate_synthetic(&spec, &out).map_err(|e| Failure::new("synth", e))?;
            Ok(ok(
                "synth",
                &out,
                &["targets.csv", "properties.json", "structures/", "synth_manifest.json"],
                json!({ "entries": data.structures.len() }),
            ))
        }
        Command::Graphify { data, config } => {
            let cfg: RunConfig = config_or_default(config.as_deref())?;
            let loaded = load(&data, &cfg.graph, cfg.element_table.as_deref(), jobs)?;
            Ok(ok(
                "graphify",
                &data,
                &[],
                json!({
                    "entries": loaded.dataset.len(),
                    "cache_dir": cache_dir(&data, &CacheMode::Default).map(|p| p.display().to_string()),
                    "cache_hits": loaded.cache_hits,
                    "graphs_built": loaded.cache_builds,
                    "dataset_hash": loaded.hash,
                }),
            ))
        }
        Command::Train { data, config, seed, out } => {
            let cfg: RunConfig = config_or_default(config.as_deref())?;
            let loaded = load(&data, &cfg.graph, cfg.element_table.as_deref(), jobs)?;
            let ds = select(loaded.dataset, &cfg.tasks)?;
            let mut model = cfg.model.clone();
            model.n_tasks = ds.n_tasks();
            model.seed = derive_seed(seed, "init");
            let mut tcfg = cfg.train.clone();
            tcfg.seed = seed;
            let outcome = train(&ds, &model, &tcfg).map_err(|e| Failure::new("train", e))?;

            let element_table = match cfg.element_table.as_deref() {
                Some(p) => Some(
                    ElementTable::parse(&std::fs::read_to_string(p).map_err(|e| Failure::new("io", e))?)
                        .map_err(|e| Failure::new("config", e))?,
                ),
                None => None,
            };
            let ck = Checkpoint {
                schema_version: SCHEMA_VERSION,
                code_version: CODE_VERSION.into(),
                model: model.clone(),
                graph: cfg.graph.clone(),
                element_table,
                properties: ds.properties.clone(),
                normalizer: outcome.normalizer.clone(),
                params: outcome.params.clone(),
            };
            ck.save(&out.join("checkpoint.json")).map_err(io_fail)?;
            write_text(&out.join("history.csv"), &outcome.history.to_csv()).map_err(io_fail)?;
            let mut manifest = RunManifest::new("train", seed, &data, loaded.hash, cfg);
            manifest.split = Some(outcome.split.clone());
            manifest.outputs = ["checkpoint.json", "history.csv", "manifest.json"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            write_json(&out.join("manifest.json"), &manifest).map_err(io_fail)?;
            let best = outcome.history.best();
            Ok(ok(
                "train",
                &out,
                &["checkpoint.json", "history.csv", "manifest.json"],
                json!({
                    "epochs_run": outcome.history.epochs.len(),
                    "best_epoch": outcome.history.best_epoch,
                    "best_val_avg_mae": best.val_avg_mae,
                    "wall_clock_secs": outcome.history.wall_clock_secs,
                }),
            ))
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            manifest,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint).map_err(io_fail)?;
            let ck_dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
            let loaded = crate::io::load_dataset(
                &data,
                &ck.graph,
                &LoadOptions {
                    cache: CacheMode::Default,
                    element_table: ck.element_table.clone(),
                    jobs,
                },
            )
            .map_err(|e| Failure::new("dataset", e))?;
            let names: Vec<String> = ck.properties.iter().map(|p| p.name.clone()).collect();
            let ds = select(loaded.dataset, &names)?;
            let manifest_path = manifest.unwrap_or_else(|| ck_dir.join("manifest.json"));
            let run_manifest: Option<RunManifest> = read_json(&manifest_path).ok();
            let indices: Vec<usize> = match split {
                SplitArg::All => (0..ds.len()).collect(),
                s => {
                    let m = run_manifest.as_ref().ok_or_else(|| {
                        Failure::new("usage", format!("split {s:?} needs a run manifest at {}", manifest_path.display()))
                    })?;
                    let sp = m
                        .split
                        .as_ref()
                        .ok_or_else(|| Failure::new("usage", "manifest records no split"))?;
                    match s {
                        SplitArg::Train => sp.train.clone(),
                        SplitArg::Val => sp.val.clone(),
                        _ => sp.test.clone(),
                    }
                }
            };
            if let Some(bad) = indices.iter().find(|&&i| i >= ds.len()) {
                return Err(Failure::new("dataset", format!("split index {bad} out of range for {} entries", ds.len())));
            }
            let mut notes = Vec::new();
            if let Some(m) = &run_manifest {
                if m.dataset_hash != loaded.hash {
                    notes.push("dataset hash differs from the training run".to_string());
                }
            }
            let band_gap = run_manifest
                .as_ref()
                .and_then(|m| m.config.band_gap.as_ref())
                .and_then(|g| ds.property_index(g));
            let opts = EvalOptions {
                split_name: format!("{split:?}").to_lowercase(),
                band_gap_task: band_gap,
                baseline: None,
            };
            let mut report =
                evaluate(&ds, &indices, &ck.params, &ck.model, &ck.normalizer, &opts).map_err(|e| Failure::new("eval", e))?;
            report.notes.extend(notes);
            let out = out.unwrap_or(ck_dir);
            write_json(&out.join("metrics.json"), &report).map_err(io_fail)?;
            Ok(ok(
                "eval",
                &out,
                &["metrics.json"],
                json!({ "avg_mae": report.avg_mae, "mae": report.mae, "auc": report.auc }),
            ))
        }
        Command::Experiment { data, spec, seed, out } => {
            let (file, ds, hash) = load_experiment(&data, &spec, seed, jobs)?;
            let rep = run_experiment(&ds, &file.experiment).map_err(|e| experiment_failure(e, &out))?;
            write_json(&out.join("experiment.json"), &rep).map_err(io_fail)?;
            write_text(&out.join("aggregate.csv"), &rep.aggregate_csv()).map_err(io_fail)?;
            write_text(&out.join("improvement.csv"), &rep.improvement_csv()).map_err(io_fail)?;
            write_experiment_manifest(&out, "experiment", &data, hash, &file)?;
            Ok(ok(
                "experiment",
                &out,
                &["experiment.json", "aggregate.csv", "improvement.csv", "manifest.json"],
                json!({ "aggregate": rep.aggregate, "avg_improvement": rep.avg_improvement }),
            ))
        }
        Command::Sweep { data, spec, seed, out } => {
            let (file, ds, hash) = load_experiment(&data, &spec, seed, jobs)?;
            let rep = sweep_train_fraction(&ds, &file.experiment).map_err(|e| experiment_failure(e, &out))?;
            write_json(&out.join("sweep.json"), &rep).map_err(io_fail)?;
            write_text(&out.join("sweep.csv"), &rep.csv()).map_err(io_fail)?;
            write_experiment_manifest(&out, "sweep", &data, hash, &file)?;
            Ok(ok(
                "sweep",
                &out,
                &["sweep.json", "sweep.csv", "manifest.json"],
                json!({ "rows": rep.rows.len() }),
            ))
        }
        Command::Gridsearch {
            data,
            config,
            grid,
            budget,
            seed,
            out,
        } => {
            let cfg: RunConfig = config_or_default(config.as_deref())?;
            let grid: GridSpec = config_or_default(grid.as_deref())?;
            let loaded = load(&data, &cfg.graph, cfg.element_table.as_deref(), jobs)?;
            let ds = select(loaded.dataset, &cfg.tasks)?;
            let res = grid_search(&ds, &cfg.model, &cfg.train, &grid, budget, seed)
                .map_err(|e| Failure::new("gridsearch", e))?;
            write_text(&out.join("trials.csv"), &res.trial_csv()).map_err(io_fail)?;
            write_json(&out.join("gridsearch.json"), &res).map_err(io_fail)?;
            let best = RunConfig {
                model: res.best_model.clone(),
                train: res.best_train.clone(),
                ..cfg.clone()
            };
            write_json(&out.join("best_config.json"), &best).map_err(io_fail)?;
            let mut manifest = RunManifest::new("gridsearch", seed, &data, loaded.hash, cfg);
            manifest.outputs = ["trials.csv", "gridsearch.json", "best_config.json", "manifest.json"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            write_json(&out.join("manifest.json"), &manifest).map_err(io_fail)?;
            Ok(ok(
                "gridsearch",
                &out,
                &["trials.csv", "gridsearch.json", "best_config.json", "manifest.json"],
                json!({ "trials": res.trials.len(), "total_configs": res.total_configs, "best": res.best }),
            ))
        }
    }
}

fn load_experiment(
    data: &Path,
    spec: &Path,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<(ExperimentFile, Dataset, String), Failure> {
    let mut file: ExperimentFile = read_json(spec).map_err(|e| Failure::new("config", e))?;
    if let Some(s) = seed {
        file.experiment.base_seed = s;
    }
    let loaded = load(data, &file.graph, file.element_table.as_deref(), jobs)?;
    Ok((file, loaded.dataset, loaded.hash))
}

/// Persists completed runs before reporting a failed experiment.
fn experiment_failure(e: crate::experiments::ExperimentError, out: &Path) -> Failure {
    if let crate::experiments::ExperimentError::Run { partial, .. } = &e {
        let _ = write_json(&out.join("partial_runs.json"), partial);
    }
    Failure::new("experiment", e)
}

fn write_experiment_manifest(out: &Path, command: &str, data: &Path, hash: String, file: &ExperimentFile) -> Result<(), Failure> {
    let e = &file.experiment;
    let cfg = RunConfig {
        graph: file.graph.clone(),
        model: e.model.clone(),
        train: e.train.clone(),
        tasks: e.tasks.clone(),
        band_gap: e.band_gap.clone(),
        element_table: file.element_table.clone(),
    };
    let mut m = RunManifest::new(command, e.base_seed, data, hash, cfg);
    m.outputs.insert("manifest.json".into());
    write_json(&out.join("manifest.json"), &json!({ "run": m, "experiment": file })).map_err(io_fail)
}
