//! On-disk dataset layout, checkpoints and run manifests.
//!
//! A dataset root holds
//!
//! ```text
//! targets.csv        id,<prop1>,<prop2>,...
//! properties.json    {"schema_version": 1, "properties": [{"name": ..., "unit": ...}]}
//! structures/<id>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{parse_structure, CrystalStructure, ElementTable, GraphCache, GraphConfig, GraphError};
use crate::model::{ModelConfig, ModelParams};
use crate::training::{Dataset, Entry, Normalizer, Property, Split, TrainConfig};

pub const TARGETS_FILE: &str = "targets.csv";
pub const PROPERTIES_FILE: &str = "properties.json";
pub const STRUCTURES_DIR: &str = "structures";
pub const CACHE_ENV: &str = "CRYSTALMT_CACHE_DIR";
pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!("crystalmt ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error("dataset has {} problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    Load(Vec<String>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Invalid(String),
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| file_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| file_err(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| file_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| file_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertiesFile {
    pub schema_version: u32,
    pub properties: Vec<Property>,
}

/// Writes a dataset root. Rows of `targets` follow `structures`.
pub fn write_dataset(
    root: &Path,
    structures: &[CrystalStructure],
    targets: &[Vec<f64>],
    properties: &[Property],
) -> Result<(), IoError> {
    let sdir = root.join(STRUCTURES_DIR);
    fs::create_dir_all(&sdir).map_err(|e| file_err(&sdir, e))?;
    for s in structures {
        write_json(&sdir.join(format!("{}.json", s.id)), s)?;
    }
    write_json(
        &root.join(PROPERTIES_FILE),
        &PropertiesFile {
            schema_version: SCHEMA_VERSION,
            properties: properties.to_vec(),
        },
    )?;
    let path = root.join(TARGETS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| file_err(&path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend(properties.iter().map(|p| p.name.clone()));
    w.write_record(&header).map_err(|e| file_err(&path, e))?;
    for (s, t) in structures.iter().zip(targets) {
        let mut row = vec![s.id.clone()];
        row.extend(t.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| file_err(&path, e))?;
    }
    w.flush().map_err(|e| file_err(&path, e))
}

/// Hex SHA-256 over the targets table, the property sidecar, and every
/// structure file (name and bytes, in name order).
pub fn dataset_hash(root: &Path) -> Result<String, IoError> {
    let mut h = Sha256::new();
    let mut feed = |label: &str, bytes: &[u8]| {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    for name in [TARGETS_FILE, PROPERTIES_FILE] {
        let p = root.join(name);
        feed(name, &fs::read(&p).map_err(|e| file_err(&p, e))?);
    }
    for (name, path) in structure_files(root)? {
        feed(&name, &fs::read(&path).map_err(|e| file_err(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// `(file stem, path)` for each `structures/*.json`, sorted by stem.
fn structure_files(root: &Path) -> Result<BTreeMap<String, PathBuf>, IoError> {
    let dir = root.join(STRUCTURES_DIR);
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(&dir).map_err(|e| file_err(&dir, e))? {
        let path = entry.map_err(|e| file_err(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Target table aligned with the property sidecar, sorted by id.
pub struct TargetTable {
    pub properties: Vec<Property>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

pub fn read_targets(root: &Path) -> Result<TargetTable, IoError> {
    let props: PropertiesFile = read_json(&root.join(PROPERTIES_FILE))?;
    let path = root.join(TARGETS_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| file_err(&path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| file_err(&path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut issues = Vec::new();
    let names: Vec<&str> = props.properties.iter().map(|p| p.name.as_str()).collect();
    if header.first().map(String::as_str) != Some("id") {
        issues.push(format!("{TARGETS_FILE}: first column must be `id`"));
    }
    if header.iter().skip(1).map(String::as_str).ne(names.iter().copied()) {
        issues.push(format!(
            "{TARGETS_FILE} columns {:?} do not match {PROPERTIES_FILE} properties {names:?}",
            &header[1.min(header.len())..]
        ));
    }
    if !issues.is_empty() {
        return Err(IoError::Load(issues));
    }
    let mut rows = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let line = line + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(format!("{TARGETS_FILE} line {line}: {e}"));
                continue;
            }
        };
        let id = rec.get(0).unwrap_or("").to_string();
        let mut vals = Vec::new();
        for (c, field) in rec.iter().enumerate().skip(1) {
            match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => issues.push(format!(
                    "{TARGETS_FILE} line {line}: bad value {field:?} for `{}`",
                    names[c - 1]
                )),
            }
        }
        if vals.len() != names.len() {
            continue;
        }
        if rows.insert(id.clone(), vals).is_some() {
            issues.push(format!("{TARGETS_FILE} line {line}: duplicate id {id:?}"));
        }
    }
    if issues.is_empty() {
        Ok(TargetTable {
            properties: props.properties,
            rows,
        })
    } else {
        Err(IoError::Load(issues))
    }
}

/// Where graphs are cached while loading.
#[derive(Clone, Debug, Default)]
pub enum CacheMode {
    /// `$CRYSTALMT_CACHE_DIR`, else `<root>/.graph_cache`.
    #[default]
    Default,
    Dir(PathBuf),
    Off,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub cache: CacheMode,
    pub element_table: Option<ElementTable>,
    /// Worker threads for parsing and featurization; `None` uses all cores.
    pub jobs: Option<usize>,
}

pub struct LoadedDataset {
    pub dataset: Dataset,
    pub hash: String,
    pub cache_hits: usize,
    pub cache_builds: usize,
}

pub fn cache_dir(root: &Path, mode: &CacheMode) -> Option<PathBuf> {
    match mode {
        CacheMode::Off => None,
        CacheMode::Dir(d) => Some(d.clone()),
        CacheMode::Default => Some(
            std::env::var_os(CACHE_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| root.join(".graph_cache")),
        ),
    }
}

/// Parses every structure named in the targets table and builds its graph.
/// Entries come out sorted by id. Problems are collected and reported
/// together.
pub fn load_dataset(root: &Path, cfg: &GraphConfig, opts: &LoadOptions) -> Result<LoadedDataset, IoError> {
    cfg.validate()?;
    let table = read_targets(root)?;
    let files = structure_files(root)?;
    let mut issues: Vec<String> = table
        .rows
        .keys()
        .filter(|id| !files.contains_key(*id))
        .map(|id| format!("no structure file for id {id:?}"))
        .collect();
    if !issues.is_empty() {
        return Err(IoError::Load(issues));
    }

    let cache = cache_dir(root, &opts.cache).map(GraphCache::new);
    let ids: Vec<&String> = table.rows.keys().collect();
    let work = || {
        ids.par_iter()
            .map(|id| -> Result<_, String> {
                let path = &files[*id];
                let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let s = parse_structure(&text, cfg.z_max).map_err(|e| format!("{}: {e}", path.display()))?;
                if &s.id != *id {
                    return Err(format!("{}: id {:?} does not match file name", path.display(), s.id));
                }
                let g = match &cache {
                    Some(c) => c.get_or_build(&s, cfg, opts.element_table.as_ref()),
                    None => crate::graph::build_graph(&s, cfg, opts.element_table.as_ref()),
                };
                g.map_err(|e| format!("{id}: {e}"))
            })
            .collect::<Vec<_>>()
    };
    let built = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| IoError::Invalid(e.to_string()))?
            .install(work),
        None => work(),
    };

    let mut entries = Vec::with_capacity(ids.len());
    for (id, g) in ids.iter().zip(built) {
        match g {
            Ok(g) => entries.push(Entry {
                graph: Arc::new(g),
                targets: table.rows[*id].clone(),
            }),
            Err(e) => issues.push(e),
        }
    }
    if !issues.is_empty() {
        return Err(IoError::Load(issues));
    }
    let dataset = Dataset::new(entries, table.properties).map_err(|e| IoError::Invalid(e.to_string()))?;
    Ok(LoadedDataset {
        dataset,
        hash: dataset_hash(root)?,
        cache_hits: cache.as_ref().map_or(0, GraphCache::hits),
        cache_builds: cache.as_ref().map_or(0, GraphCache::builds),
    })
}

/// Trained model plus everything needed to featurize and denormalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub code_version: String,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub element_table: Option<ElementTable>,
    pub properties: Vec<Property>,
    pub normalizer: Normalizer,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let ck: Checkpoint = read_json(path)?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(IoError::Invalid(format!(
                "checkpoint schema {} is not supported (expected {SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        let expect = ModelParams::zeros(&ck.model, ck.params.raw_atom_len(), ck.params.bond_len(ck.model.conv_variant))
            .map_err(|e| IoError::Invalid(e.to_string()))?;
        let shapes = |p: &ModelParams| -> Vec<(String, Vec<usize>)> {
            p.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
        };
        if shapes(&expect) != shapes(&ck.params) {
            return Err(IoError::Invalid("checkpoint parameters do not match its model config".into()));
        }
        Ok(ck)
    }
}

/// Settings shared by `train`, `experiment`, `sweep` and `gridsearch`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Property subset to train on; empty means all.
    pub tasks: Vec<String>,
    /// Property treated as the band gap for the metal/non-metal AUC.
    pub band_gap: Option<String>,
    /// JSON element table replacing one-hot atom features.
    pub element_table: Option<PathBuf>,
}

/// Everything needed to rerun a command exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub command: String,
    pub seed: u64,
    pub data_root: String,
    pub dataset_hash: String,
    pub config: RunConfig,
    pub split: Option<Split>,
    pub outputs: BTreeSet<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, data_root: &Path, dataset_hash: String, config: RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            code_version: CODE_VERSION.to_string(),
            command: command.to_string(),
            seed,
            data_root: data_root.display().to_string(),
            dataset_hash,
            config,
            split: None,
            outputs: BTreeSet::new(),
        }
    }
}
