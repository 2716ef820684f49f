//! Crystal structures and the multigraphs built from them.
//!
//! Nodes are atoms. Each atom gets one directed edge per retained periodic
//! neighbor, so two atoms joined through several images are linked by
//! several parallel edges, distinguished by a multiplicity index.

mod cache;
mod features;
mod neighbors;
mod structure;

pub use cache::{GraphCache, GRAPH_CACHE_SCHEMA};
pub use features::{
    atom_feature_len, atom_init_features, gaussian_expand, ElementTable, GraphConfig,
};
pub use neighbors::{image_range, periodic_neighbors, Neighbor};
pub use structure::{parse_structure, wrap_unit, CrystalStructure, MIN_CELL_VOLUME};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("malformed structure document: {0}")]
    Json(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("lattice must be a 3x3 matrix")]
    LatticeShape,
    #[error("fractional coordinate has {len} components, expected 3")]
    CoordinateShape { len: usize },
    #[error("degenerate cell: volume {volume:e} Å^3")]
    ZeroVolume { volume: f64 },
    #[error("structure has no atoms")]
    NoAtoms,
    #[error("{coords} coordinates but {numbers} atomic numbers")]
    LengthMismatch { coords: usize, numbers: usize },
    #[error("atomic number {z} outside 1..={z_max}")]
    AtomicNumber { z: i64, z_max: u32 },
    #[error("non-finite value in `{field}`")]
    NonFinite { field: &'static str },
    #[error("distance {distance} outside [0, {cutoff}]")]
    DistanceRange { distance: f64, cutoff: f64 },
    #[error("element table has no entry for Z={z}")]
    MissingElement { z: u32 },
    #[error("element table: {0}")]
    Table(String),
    #[error("graph config: {0}")]
    Config(String),
    #[error("graph cache: {0}")]
    Cache(String),
}

/// One bond `(i, j)_k`: the `k`-th retained image of atom `neighbor` around
/// atom `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub center: usize,
    pub neighbor: usize,
    pub multiplicity: usize,
    pub distance: f64,
    pub bond_feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalGraph {
    pub id: String,
    /// Row `i` is the raw feature vector of atom `i`.
    pub atom_features: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
    /// Atoms that found fewer than `max_neighbors` neighbors within the cutoff.
    pub underfull_atoms: usize,
}

impl CrystalGraph {
    pub fn n_atoms(&self) -> usize {
        self.atom_features.len()
    }

    pub fn atom_len(&self) -> usize {
        self.atom_features.first().map_or(0, Vec::len)
    }

    pub fn bond_len(&self) -> usize {
        self.edges.first().map_or(0, |e| e.bond_feature.len())
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.edges.iter().filter(|e| e.center == atom).count()
    }

    /// Relabels atoms: old atom `i` becomes atom `perm[i]`. Edges keep their
    /// order; endpoints are rewritten.
    pub fn permuted(&self, perm: &[usize]) -> CrystalGraph {
        let mut atom_features = vec![Vec::new(); self.n_atoms()];
        for (old, row) in self.atom_features.iter().enumerate() {
            atom_features[perm[old]] = row.clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                center: perm[e.center],
                neighbor: perm[e.neighbor],
                ..e.clone()
            })
            .collect();
        CrystalGraph {
            id: self.id.clone(),
            atom_features,
            edges,
            underfull_atoms: self.underfull_atoms,
        }
    }
}

/// Builds the crystal graph: one-hot (or table) atom rows, and one edge per
/// retained neighbor with a Gaussian-expanded distance as its feature.
///
/// Edges are ordered by center atom, then by the neighbor ordering.
pub fn build_graph(
    s: &CrystalStructure,
    cfg: &GraphConfig,
    table: Option<&ElementTable>,
) -> Result<CrystalGraph, GraphError> {
    cfg.validate()?;
    let atom_features = s
        .atomic_numbers
        .iter()
        .map(|&z| atom_init_features(z, cfg, table))
        .collect::<Result<Vec<_>, _>>()?;

    let neighbors = periodic_neighbors(s, cfg);
    let mut edges = Vec::new();
    let mut underfull_atoms = 0;
    for (center, list) in neighbors.iter().enumerate() {
        if list.len() < cfg.max_neighbors {
            underfull_atoms += 1;
        }
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for nb in list {
            let k = seen.entry(nb.index).or_insert(0);
            edges.push(Edge {
                center,
                neighbor: nb.index,
                multiplicity: *k,
                distance: nb.distance,
                bond_feature: gaussian_expand(nb.distance, cfg)?,
            });
            *k += 1;
        }
    }
    Ok(CrystalGraph {
        id: s.id.clone(),
        atom_features,
        edges,
        underfull_atoms,
    })
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(bytes))
}

/// Cache key component for a graph configuration plus optional element table.
pub fn config_hash(cfg: &GraphConfig, table: Option<&ElementTable>) -> String {
    json_hash(&(cfg, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(a: f64) -> CrystalStructure {
        CrystalStructure {
            id: "sc".into(),
            lattice: [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
            frac_coords: vec![[0.0; 3]],
            atomic_numbers: vec![11],
        }
    }

    fn rock_salt_like() -> CrystalStructure {
        CrystalStructure {
            id: "rs".into(),
            lattice: [[4.2, 0.1, 0.0], [0.0, 4.0, 0.3], [0.2, 0.0, 4.4]],
            frac_coords: vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.1, 0.6, 0.25]],
            atomic_numbers: vec![11, 17, 8],
        }
    }

    #[test]
    fn one_atom_cubic_has_only_self_image_edges() {
        let g = build_graph(&sc(3.0), &GraphConfig::default(), None).unwrap();
        assert_eq!(g.n_atoms(), 1);
        assert_eq!(g.edges.len(), 12);
        assert!(g.edges.iter().all(|e| e.center == 0 && e.neighbor == 0));
        let ks: Vec<usize> = g.edges.iter().map(|e| e.multiplicity).collect();
        assert_eq!(ks, (0..12).collect::<Vec<_>>());
        assert_eq!(g.bond_len(), 41);
        assert_eq!(g.underfull_atoms, 0);
    }

    #[test]
    fn edge_count_bounded_and_features_in_range() {
        let s = rock_salt_like();
        let cfg = GraphConfig::default();
        let g = build_graph(&s, &cfg, None).unwrap();
        assert_eq!(g.atom_features.len(), 3);
        assert!(g.edges.len() <= 3 * cfg.max_neighbors);
        for e in &g.edges {
            assert!(e.bond_feature.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = e.bond_feature.iter().cloned().fold(0.0, f64::max);
            assert!(max >= (-0.25f64).exp() - 1e-12);
        }
    }

    #[test]
    fn build_is_bit_exact_deterministic() {
        let s = rock_salt_like();
        let cfg = GraphConfig::default();
        let a = build_graph(&s, &cfg, None).unwrap();
        let b = build_graph(&s, &cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn shortfall_is_counted_not_padded() {
        let cfg = GraphConfig {
            cutoff: 3.5,
            ..GraphConfig::default()
        };
        let g = build_graph(&sc(3.0), &cfg, None).unwrap();
        assert_eq!(g.edges.len(), 6);
        assert_eq!(g.underfull_atoms, 1);
    }

    #[test]
    fn hashes_track_config() {
        let a = GraphConfig::default();
        let b = GraphConfig {
            cutoff: 6.0,
            ..a.clone()
        };
        assert_eq!(config_hash(&a, None), config_hash(&a.clone(), None));
        assert_ne!(config_hash(&a, None), config_hash(&b, None));
        assert_ne!(json_hash(&sc(3.0)), json_hash(&sc(3.1)));
    }
}
