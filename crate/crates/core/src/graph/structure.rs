use serde::{Deserialize, Serialize};

use super::GraphError;

/// Periodic crystal: lattice rows in Å, fractional coordinates, atomic numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    pub id: String,
    pub lattice: [[f64; 3]; 3],
    pub frac_coords: Vec<[f64; 3]>,
    pub atomic_numbers: Vec<u32>,
}

#[derive(Deserialize)]
struct RawStructure {
    id: Option<String>,
    lattice: Option<Vec<Vec<f64>>>,
    frac_coords: Option<Vec<Vec<f64>>>,
    atomic_numbers: Option<Vec<i64>>,
}

pub const MIN_CELL_VOLUME: f64 = 1e-6;

impl CrystalStructure {
    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    /// Signed cell volume, `a . (b x c)`.
    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.lattice;
        dot(a, cross(b, c))
    }

    /// Cartesian position (Å) of a fractional coordinate.
    pub fn to_cartesian(&self, f: [f64; 3]) -> [f64; 3] {
        let l = &self.lattice;
        let mut out = [0.0; 3];
        for (k, fk) in f.iter().enumerate() {
            for (o, lk) in out.iter_mut().zip(l[k]) {
                *o += fk * lk;
            }
        }
        out
    }

    /// Distance between adjacent lattice planes normal to each lattice vector's
    /// reciprocal direction, i.e. `V / |b x c|` and its cyclic versions.
    pub fn plane_spacings(&self) -> [f64; 3] {
        let [a, b, c] = self.lattice;
        let v = self.volume().abs();
        [
            v / norm(cross(b, c)),
            v / norm(cross(c, a)),
            v / norm(cross(a, b)),
        ]
    }

    /// Checks the structure invariants and wraps coordinates into `[0, 1)`.
    pub fn validated(mut self, z_max: u32) -> Result<Self, GraphError> {
        if self.lattice.iter().flatten().any(|x| !x.is_finite()) {
            return Err(GraphError::NonFinite { field: "lattice" });
        }
        let det = self.volume();
        if det.abs() <= MIN_CELL_VOLUME {
            return Err(GraphError::ZeroVolume { volume: det });
        }
        if self.atomic_numbers.is_empty() {
            return Err(GraphError::NoAtoms);
        }
        if self.frac_coords.len() != self.atomic_numbers.len() {
            return Err(GraphError::LengthMismatch {
                coords: self.frac_coords.len(),
                numbers: self.atomic_numbers.len(),
            });
        }
        for &z in &self.atomic_numbers {
            if z < 1 || z > z_max {
                return Err(GraphError::AtomicNumber { z: z as i64, z_max });
            }
        }
        for f in self.frac_coords.iter_mut() {
            for x in f.iter_mut() {
                if !x.is_finite() {
                    return Err(GraphError::NonFinite {
                        field: "frac_coords",
                    });
                }
                *x = wrap_unit(*x);
            }
        }
        Ok(self)
    }
}

/// Maps `x` into `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Parses a structure document:
/// `{"id", "lattice": [[f;3];3], "frac_coords": [[f;3];N], "atomic_numbers": [int;N]}`.
pub fn parse_structure(document: &str, z_max: u32) -> Result<CrystalStructure, GraphError> {
    let raw: RawStructure =
        serde_json::from_str(document).map_err(|e| GraphError::Json(e.to_string()))?;
    let id = raw.id.ok_or(GraphError::MissingField("id"))?;
    let lattice_rows = raw.lattice.ok_or(GraphError::MissingField("lattice"))?;
    let coords = raw
        .frac_coords
        .ok_or(GraphError::MissingField("frac_coords"))?;
    let numbers = raw
        .atomic_numbers
        .ok_or(GraphError::MissingField("atomic_numbers"))?;

    if lattice_rows.len() != 3 || lattice_rows.iter().any(|r| r.len() != 3) {
        return Err(GraphError::LatticeShape);
    }
    let mut lattice = [[0.0; 3]; 3];
    for (dst, src) in lattice.iter_mut().zip(&lattice_rows) {
        dst.copy_from_slice(src);
    }
    let mut frac_coords = Vec::with_capacity(coords.len());
    for c in &coords {
        let arr: [f64; 3] = c
            .as_slice()
            .try_into()
            .map_err(|_| GraphError::CoordinateShape { len: c.len() })?;
        frac_coords.push(arr);
    }
    let mut atomic_numbers = Vec::with_capacity(numbers.len());
    for &z in &numbers {
        if z < 1 || z > i64::from(z_max) {
            return Err(GraphError::AtomicNumber { z, z_max });
        }
        atomic_numbers.push(z as u32);
    }
    CrystalStructure {
        id,
        lattice,
        frac_coords,
        atomic_numbers,
    }
    .validated(z_max)
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBIC_NA: &str = r#"{"id": "na", "lattice": [[3,0,0],[0,3,0],[0,0,3]],
        "frac_coords": [[0,0,0]], "atomic_numbers": [11]}"#;

    #[test]
    fn parses_single_atom_cubic() {
        let s = parse_structure(CUBIC_NA, 100).unwrap();
        assert_eq!(s.n_atoms(), 1);
        assert_eq!(s.atomic_numbers, vec![11]);
        assert!((s.volume() - 27.0).abs() < 1e-12);
        assert_eq!(s.plane_spacings(), [3.0, 3.0, 3.0]);
    }

    #[test]
    fn missing_lattice_is_named() {
        let doc = r#"{"id": "x", "frac_coords": [[0,0,0]], "atomic_numbers": [1]}"#;
        let err = parse_structure(doc, 100).unwrap_err();
        assert_eq!(err, GraphError::MissingField("lattice"));
        assert!(err.to_string().contains("lattice"));
    }

    #[test]
    fn dependent_lattice_rows_are_zero_volume() {
        let doc = r#"{"id": "x", "lattice": [[1,0,0],[0,1,0],[1,1,0]],
            "frac_coords": [[0,0,0]], "atomic_numbers": [1]}"#;
        assert!(matches!(
            parse_structure(doc, 100),
            Err(GraphError::ZeroVolume { .. })
        ));
    }

    #[test]
    fn distinct_errors_for_bad_documents() {
        let bad_shape = r#"{"id": "x", "lattice": [[1,0,0],[0,1,0]],
            "frac_coords": [[0,0,0]], "atomic_numbers": [1]}"#;
        assert_eq!(parse_structure(bad_shape, 100), Err(GraphError::LatticeShape));

        let bad_z = r#"{"id": "x", "lattice": [[3,0,0],[0,3,0],[0,0,3]],
            "frac_coords": [[0,0,0]], "atomic_numbers": [101]}"#;
        assert_eq!(
            parse_structure(bad_z, 100),
            Err(GraphError::AtomicNumber { z: 101, z_max: 100 })
        );

        let mismatch = r#"{"id": "x", "lattice": [[3,0,0],[0,3,0],[0,0,3]],
            "frac_coords": [[0,0,0],[0.5,0.5,0.5]], "atomic_numbers": [1]}"#;
        assert!(matches!(
            parse_structure(mismatch, 100),
            Err(GraphError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn coordinates_wrap_into_unit_cell() {
        let doc = r#"{"id": "x", "lattice": [[3,0,0],[0,3,0],[0,0,3]],
            "frac_coords": [[1.25,-0.25,2.0]], "atomic_numbers": [1]}"#;
        let s = parse_structure(doc, 100).unwrap();
        assert_eq!(s.frac_coords[0], [0.25, 0.75, 0.0]);
        assert_eq!(wrap_unit(-1e-18), 0.0);
    }
}
