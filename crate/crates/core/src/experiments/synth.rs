//! Synthetic crystals with graph-derived targets, standing in for real
//! materials data at desk scale.
//!
//! Targets, per structure:
//!
//! * `y1 = z_scale * mean(Z) + dist_scale * mean neighbor distance`, where the
//!   neighbors are those of `recipe_graph` (the same periodic search the
//!   model's graphs use)
//! * `y2 = slope * y1 + noise * std(y1) * xi`, `xi ~ N(0, 1)`
//! * `y3 = population std of Z`

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::graph::{periodic_neighbors, CrystalStructure, GraphConfig};
use crate::io::{write_dataset, write_json, SCHEMA_VERSION};
use crate::training::Property;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    /// Inclusive atom-count range per cell.
    pub atoms: [usize; 2],
    /// Lattice vector lengths, Å.
    pub lattice_length: [f64; 2],
    /// Largest deviation of cell angles from 90°, degrees.
    pub angle_jitter: f64,
    /// Inclusive atomic-number range.
    pub z_range: [u32; 2],
    /// Minimum separation between any two atoms (including images), Å.
    pub min_separation: f64,
    pub z_scale: f64,
    pub dist_scale: f64,
    pub slope: f64,
    /// Noise on `y2` as a fraction of `std(y1)`.
    pub noise: f64,
    pub recipe_graph: GraphConfig,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 500,
            atoms: [1, 4],
            lattice_length: [3.0, 5.0],
            angle_jitter: 10.0,
            z_range: [1, 20],
            min_separation: 1.2,
            z_scale: 0.1,
            dist_scale: 1.0,
            slope: 2.0,
            noise: 0.05,
            recipe_graph: GraphConfig {
                cutoff: 5.0,
                max_neighbors: 12,
                ..GraphConfig::default()
            },
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Spec(format!("synth: {m}")));
        if self.n < 2 {
            return bad("n must be >= 2");
        }
        if self.atoms[0] < 1 || self.atoms[0] > self.atoms[1] {
            return bad("atoms must be a range [lo, hi] with lo >= 1");
        }
        let [lo, hi] = self.lattice_length;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("lattice_length must be a positive range");
        }
        if !(0.0..45.0).contains(&self.angle_jitter) {
            return bad("angle_jitter must lie in [0, 45)");
        }
        if self.z_range[0] < 1 || self.z_range[0] > self.z_range[1] || self.z_range[1] > self.recipe_graph.z_max {
            return bad("z_range must lie within 1..=z_max");
        }
        if !(self.min_separation >= 0.0) || !(self.noise >= 0.0) {
            return bad("min_separation and noise must be non-negative");
        }
        self.recipe_graph
            .validate()
            .map_err(|e| ExperimentError::Spec(format!("synth recipe graph: {e}")))
    }
}

pub struct SynthData {
    pub structures: Vec<CrystalStructure>,
    pub targets: Vec<Vec<f64>>,
    pub properties: Vec<Property>,
}

const MAX_ATTEMPTS: usize = 1000;

fn lattice(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> [[f64; 3]; 3] {
    let [lo, hi] = spec.lattice_length;
    let mut len = || if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let (a, b, c) = (len(), len(), len());
    let j = spec.angle_jitter;
    let mut ang = || (90.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }).to_radians();
    let (alpha, beta, gamma) = (ang(), ang(), ang());
    let cx = c * beta.cos();
    let cy = c * (alpha.cos() - beta.cos() * gamma.cos()) / gamma.sin();
    let cz2 = c * c - cx * cx - cy * cy;
    [
        [a, 0.0, 0.0],
        [b * gamma.cos(), b * gamma.sin(), 0.0],
        [cx, cy, cz2.max(0.0).sqrt()],
    ]
}

fn draw_structure(rng: &mut ChaCha8Rng, spec: &SynthSpec, id: String) -> Result<CrystalStructure, ExperimentError> {
    let sep = GraphConfig {
        cutoff: spec.min_separation.max(1e-6),
        max_neighbors: 1,
        ..GraphConfig::default()
    };
    for _ in 0..MAX_ATTEMPTS {
        let lat = lattice(rng, spec);
        let n = rng.gen_range(spec.atoms[0]..=spec.atoms[1]);
        let s = CrystalStructure {
            id: id.clone(),
            lattice: lat,
            frac_coords: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            atomic_numbers: (0..n).map(|_| rng.gen_range(spec.z_range[0]..=spec.z_range[1])).collect(),
        };
        let l = spec.lattice_length[0];
        if s.volume() < 0.2 * l * l * l {
            continue;
        }
        if spec.min_separation > 0.0 && periodic_neighbors(&s, &sep).iter().any(|nb| !nb.is_empty()) {
            continue;
        }
        return Ok(s);
    }
    Err(ExperimentError::Spec(format!(
        "synth: no valid structure for {id} after {MAX_ATTEMPTS} draws; loosen min_separation or atoms"
    )))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Structures and targets, deterministic in `spec`.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthData, ExperimentError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n.to_string().len();
    let mut structures = Vec::with_capacity(spec.n);
    let mut y1 = Vec::with_capacity(spec.n);
    let mut y3 = Vec::with_capacity(spec.n);
    while structures.len() < spec.n {
        let id = format!("syn-{:0width$}", structures.len());
        let s = draw_structure(&mut rng, spec, id)?;
        let dists: Vec<f64> = periodic_neighbors(&s, &spec.recipe_graph)
            .into_iter()
            .flatten()
            .map(|nb| nb.distance)
            .collect();
        if dists.is_empty() {
            continue;
        }
        let z: Vec<f64> = s.atomic_numbers.iter().map(|&z| z as f64).collect();
        y1.push(spec.z_scale * mean(&z) + spec.dist_scale * mean(&dists));
        y3.push(pop_std(&z));
        structures.push(s);
    }
    let s1 = pop_std(&y1);
    let targets = (0..spec.n)
        .map(|i| {
            let xi: f64 = rng.sample(StandardNormal);
            vec![y1[i], spec.slope * y1[i] + spec.noise * s1 * xi, y3[i]]
        })
        .collect();
    let properties = ["y1", "y2", "y3"]
        .iter()
        .map(|n| Property {
            name: n.to_string(),
            unit: "arb".into(),
        })
        .collect();
    Ok(SynthData {
        structures,
        targets,
        properties,
    })
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    schema_version: u32,
    recipe: [&'a str; 3],
    spec: &'a SynthSpec,
}

pub const SYNTH_MANIFEST: &str = "synth_manifest.json";

/// Writes a dataset root (see [`crate::io`]) plus `synth_manifest.json`
/// recording the recipe and spec.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<SynthData, ExperimentError> {
    let data = synthesize(spec)?;
    write_dataset(out, &data.structures, &data.targets, &data.properties)?;
    write_json(
        &out.join(SYNTH_MANIFEST),
        &SynthManifest {
            schema_version: SCHEMA_VERSION,
            recipe: [
                "y1 = z_scale * mean(Z) + dist_scale * mean(neighbor distance under recipe_graph)",
                "y2 = slope * y1 + noise * std(y1) * N(0, 1)",
                "y3 = population std(Z)",
            ],
            spec,
        },
    )?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{dataset_hash, STRUCTURES_DIR, TARGETS_FILE};
    use crate::metrics::pearson;

    #[test]
    fn correlated_pair_and_file_counts() {
        let spec = SynthSpec {
            n: 200,
            seed: 4,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&spec, dir.path()).unwrap();
        let y1: Vec<f64> = data.targets.iter().map(|t| t[0]).collect();
        let y2: Vec<f64> = data.targets.iter().map(|t| t[1]).collect();
        assert!(pearson(&y1, &y2).unwrap() >= 0.95);
        assert!(data.targets.iter().flatten().all(|v| v.is_finite()));
        let files = std::fs::read_dir(dir.path().join(STRUCTURES_DIR)).unwrap().count();
        assert_eq!(files, 200);
        let rows = std::fs::read_to_string(dir.path().join(TARGETS_FILE)).unwrap().lines().count();
        assert_eq!(rows, 201);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec {
            n: 30,
            seed: 9,
            ..SynthSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        assert_eq!(dataset_hash(a.path()).unwrap(), dataset_hash(b.path()).unwrap());
        let other = SynthSpec { seed: 10, ..spec };
        let c = tempfile::tempdir().unwrap();
        generate_synthetic(&other, c.path()).unwrap();
        assert_ne!(dataset_hash(a.path()).unwrap(), dataset_hash(c.path()).unwrap());
    }

    #[test]
    fn atoms_respect_min_separation() {
        let spec = SynthSpec {
            n: 40,
            atoms: [2, 5],
            ..SynthSpec::default()
        };
        let data = synthesize(&spec).unwrap();
        for s in &data.structures {
            assert!((2..=5).contains(&s.n_atoms()));
            let close = GraphConfig {
                cutoff: spec.min_separation,
                ..GraphConfig::default()
            };
            assert!(periodic_neighbors(s, &close).iter().all(Vec::is_empty));
        }
    }

    #[test]
    fn impossible_spec_is_rejected() {
        let spec = SynthSpec {
            n: 3,
            atoms: [40, 40],
            lattice_length: [3.0, 3.0],
            ..SynthSpec::default()
        };
        assert!(synthesize(&spec).is_err());
        assert!(synthesize(&SynthSpec { n: 1, ..SynthSpec::default() }).is_err());
    }
}
