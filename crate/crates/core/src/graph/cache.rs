//! On-disk graph cache.
//!
//! One JSON file per graph, named `<structure hash>-<config hash>.json`:
//!
//! ```json
//! {"schema_version": 1, "structure_hash": "...", "config_hash": "...", "graph": {...}}
//! ```
//!
//! Files with another schema version or mismatching hashes are treated as misses.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{build_graph, config_hash, json_hash, CrystalGraph, CrystalStructure, ElementTable, GraphConfig, GraphError};

pub const GRAPH_CACHE_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    schema_version: u32,
    structure_hash: String,
    config_hash: String,
    graph: CrystalGraph,
}

#[derive(Debug)]
pub struct GraphCache {
    dir: PathBuf,
    hits: AtomicUsize,
    builds: AtomicUsize,
}

impl GraphCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            hits: AtomicUsize::new(0),
            builds: AtomicUsize::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }

    fn path_for(&self, structure_hash: &str, config_hash: &str) -> PathBuf {
        self.dir.join(format!("{structure_hash}-{config_hash}.json"))
    }

    /// Returns the cached graph for `s`, building and storing it on a miss.
    pub fn get_or_build(
        &self,
        s: &CrystalStructure,
        cfg: &GraphConfig,
        table: Option<&ElementTable>,
    ) -> Result<CrystalGraph, GraphError> {
        let sh = json_hash(s);
        let ch = config_hash(cfg, table);
        let path = self.path_for(&sh, &ch);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(file) = serde_json::from_slice::<CacheFile>(&bytes) {
                if file.schema_version == GRAPH_CACHE_SCHEMA
                    && file.structure_hash == sh
                    && file.config_hash == ch
                {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(file.graph);
                }
            }
        }
        let graph = build_graph(s, cfg, table)?;
        self.builds.fetch_add(1, Ordering::Relaxed);
        let file = CacheFile {
            schema_version: GRAPH_CACHE_SCHEMA,
            structure_hash: sh,
            config_hash: ch,
            graph,
        };
        fs::create_dir_all(&self.dir).map_err(|e| GraphError::Cache(e.to_string()))?;
        // write-then-rename so concurrent readers never see a partial file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let bytes = serde_json::to_vec(&file).map_err(|e| GraphError::Cache(e.to_string()))?;
        fs::write(&tmp, bytes).map_err(|e| GraphError::Cache(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| GraphError::Cache(e.to_string()))?;
        Ok(file.graph)
    }
}
