use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GraphError;

/// Graph-construction settings. Defaults follow the usual CGCNN choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub max_neighbors: usize,
    /// Å
    pub cutoff: f64,
    /// Spacing of Gaussian centres, Å.
    pub gauss_step: f64,
    /// Gaussian width, Å. `None` means equal to `gauss_step`.
    pub gauss_width: Option<f64>,
    pub z_max: u32,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_neighbors: 12,
            cutoff: 8.0,
            gauss_step: 0.2,
            gauss_width: None,
            z_max: 100,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(GraphError::Config("cutoff must be > 0".into()));
        }
        if !(self.gauss_step > 0.0 && self.gauss_step.is_finite()) {
            return Err(GraphError::Config("gauss_step must be > 0".into()));
        }
        if let Some(w) = self.gauss_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(GraphError::Config("gauss_width must be > 0".into()));
            }
        }
        if self.max_neighbors < 1 {
            return Err(GraphError::Config("max_neighbors must be >= 1".into()));
        }
        if self.z_max < 1 {
            return Err(GraphError::Config("z_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.gauss_width.unwrap_or(self.gauss_step)
    }

    /// Bond feature length, `floor(cutoff / step) + 1`.
    pub fn bond_len(&self) -> usize {
        // the epsilon absorbs representation error in e.g. 8.0 / 0.2
        (self.cutoff / self.gauss_step + 1e-9).floor() as usize + 1
    }
}

/// Expands a distance on Gaussians centred at `0, step, 2 step, ...`.
pub fn gaussian_expand(d: f64, cfg: &GraphConfig) -> Result<Vec<f64>, GraphError> {
    if !(0.0..=cfg.cutoff).contains(&d) {
        return Err(GraphError::DistanceRange {
            distance: d,
            cutoff: cfg.cutoff,
        });
    }
    let w2 = cfg.width() * cfg.width();
    Ok((0..cfg.bond_len())
        .map(|t| {
            let c = t as f64 * cfg.gauss_step;
            (-(d - c) * (d - c) / w2).exp()
        })
        .collect())
}

/// Per-element feature vectors, loaded from `{"Z": [f, ...], ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<f64>>", into = "BTreeMap<String, Vec<f64>>")]
pub struct ElementTable {
    vectors: BTreeMap<u32, Vec<f64>>,
    len: usize,
}

impl ElementTable {
    pub fn new(vectors: BTreeMap<u32, Vec<f64>>) -> Result<Self, GraphError> {
        let len = vectors.values().next().map_or(0, Vec::len);
        if len == 0 {
            return Err(GraphError::Table("table is empty".into()));
        }
        if let Some((z, v)) = vectors.iter().find(|(_, v)| v.len() != len) {
            return Err(GraphError::Table(format!(
                "element {z} has {} values, expected {len}",
                v.len()
            )));
        }
        Ok(Self { vectors, len })
    }

    pub fn parse(document: &str) -> Result<Self, GraphError> {
        serde_json::from_str(document).map_err(|e| GraphError::Table(e.to_string()))
    }

    pub fn feature_len(&self) -> usize {
        self.len
    }

    pub fn get(&self, z: u32) -> Option<&[f64]> {
        self.vectors.get(&z).map(Vec::as_slice)
    }
}

impl TryFrom<BTreeMap<String, Vec<f64>>> for ElementTable {
    type Error = GraphError;

    fn try_from(raw: BTreeMap<String, Vec<f64>>) -> Result<Self, Self::Error> {
        let mut vectors = BTreeMap::new();
        for (k, v) in raw {
            let z: u32 = k
                .trim()
                .parse()
                .map_err(|_| GraphError::Table(format!("bad element key {k:?}")))?;
            vectors.insert(z, v);
        }
        Self::new(vectors)
    }
}

impl From<ElementTable> for BTreeMap<String, Vec<f64>> {
    fn from(t: ElementTable) -> Self {
        t.vectors
            .into_iter()
            .map(|(z, v)| (z.to_string(), v))
            .collect()
    }
}

/// Length of the raw atom feature vector under `cfg` and `table`.
pub fn atom_feature_len(cfg: &GraphConfig, table: Option<&ElementTable>) -> usize {
    table.map_or(cfg.z_max as usize, ElementTable::feature_len)
}

/// One-hot encoding of `z` over `1..=z_max`, or the table's vector for `z`.
pub fn atom_init_features(
    z: u32,
    cfg: &GraphConfig,
    table: Option<&ElementTable>,
) -> Result<Vec<f64>, GraphError> {
    if z < 1 || z > cfg.z_max {
        return Err(GraphError::AtomicNumber {
            z: i64::from(z),
            z_max: cfg.z_max,
        });
    }
    match table {
        Some(t) => t
            .get(z)
            .map(<[f64]>::to_vec)
            .ok_or(GraphError::MissingElement { z }),
        None => {
            let mut v = vec![0.0; cfg.z_max as usize];
            v[z as usize - 1] = 1.0;
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bond_length() {
        assert_eq!(GraphConfig::default().bond_len(), 41);
    }

    #[test]
    fn gaussian_closed_forms() {
        let cfg = GraphConfig::default();
        let at_center = gaussian_expand(1.4, &cfg).unwrap();
        assert!((at_center[7] - 1.0).abs() < 1e-12);
        let exact = gaussian_expand(0.0, &cfg).unwrap();
        assert_eq!(exact[0], 1.0);
        // one width away from centre 5 (1.0 Å)
        let one_width = gaussian_expand(1.2, &cfg).unwrap();
        assert!((one_width[5] - (-1f64).exp()).abs() < 1e-12);
        assert!((one_width[5] - 0.36788).abs() < 1e-5);
        assert_eq!(gaussian_expand(8.0, &cfg).unwrap().len(), 41);
    }

    #[test]
    fn gaussian_range_errors() {
        let cfg = GraphConfig::default();
        assert!(matches!(
            gaussian_expand(-0.1, &cfg),
            Err(GraphError::DistanceRange { .. })
        ));
        assert!(matches!(
            gaussian_expand(8.01, &cfg),
            Err(GraphError::DistanceRange { .. })
        ));
    }

    #[test]
    fn one_hot_and_table() {
        let cfg = GraphConfig::default();
        let v = atom_init_features(1, &cfg, None).unwrap();
        assert_eq!(v.len(), 100);
        assert_eq!(v[0], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);

        assert_eq!(
            atom_init_features(101, &cfg, None),
            Err(GraphError::AtomicNumber { z: 101, z_max: 100 })
        );

        let table = ElementTable::parse(r#"{"8": [0.1, 0.9], "1": [1.0, 0.0]}"#).unwrap();
        assert_eq!(atom_init_features(8, &cfg, Some(&table)).unwrap(), vec![0.1, 0.9]);
        assert_eq!(
            atom_init_features(26, &cfg, Some(&table)),
            Err(GraphError::MissingElement { z: 26 })
        );
        assert_eq!(atom_feature_len(&cfg, Some(&table)), 2);
    }

    #[test]
    fn ragged_table_is_rejected() {
        assert!(ElementTable::parse(r#"{"8": [0.1, 0.9], "1": [1.0]}"#).is_err());
        assert!(ElementTable::parse(r#"{"oxygen": [0.1]}"#).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GraphConfig::default().validate().is_ok());
        let bad = GraphConfig {
            cutoff: 0.0,
            ..GraphConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GraphConfig {
            max_neighbors: 0,
            ..GraphConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
